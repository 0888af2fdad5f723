use std::fs;
use std::path::{Path, PathBuf};

use depthdecomp::data::{build_dataset, load_depth_raster, raster, save_depth_raster, Dataset, DatasetConfig, DepthFormat, Split, MANIFEST_FILE};
use depthdecomp::decomposition::{invert_depth, spatial_gradients, znormalize, DepthSpace, MetricDepthMap};
use depthdecomp::metrics::{evaluate_corpus, CorpusReport, EvalProtocol, MetricReport};
use depthdecomp::network::Model;
use depthdecomp::training::{
    predict_original, run_experiment, BundleState, ExperimentConfig, ExperimentOptions, LogRecord,
    FINAL_REPORT, STATE_FILE, TRAIN_LOG,
};
use depthdecomp::viz::{error_map, save_colorized};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::Value;

use crate::config::{apply_overrides, decode, read_table, set_path};
use crate::error::CliError;
use crate::plot::{legend, line_chart, Series};
use crate::Common;

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::UnreadableFile(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::UnreadableFile(format!("{}: {e}", path.display())))
}

pub fn gen_data(c: &Common) -> Result<(), CliError> {
    let (mut table, _) = read_table(c.config.as_deref())?;
    if let Some(Value::Table(data)) = table.remove("data") {
        table = data;
    }
    let stripped: Vec<String> = c
        .overrides
        .iter()
        .map(|o| o.strip_prefix("data.").unwrap_or(o).to_string())
        .collect();
    apply_overrides(&mut table, &stripped)?;
    if let Some(seed) = c.seed {
        set_path(&mut table, "seed", Value::Integer(seed as i64))?;
    }
    let cfg: DatasetConfig = decode(table)?;
    fs::create_dir_all(&c.out)?;
    let records = build_dataset(&cfg, &c.out)?;
    let count = |s: Split| records.iter().filter(|r| r.split == s).count();
    let relative = records.iter().filter(|r| !r.has_metric_label).count();
    let digest = sha256_hex(&fs::read(c.out.join(MANIFEST_FILE))?);
    println!(
        "scenes {} (train {}, val {}, test {}; relative-only {relative}) seed {}",
        records.len(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test),
        cfg.seed
    );
    println!("manifest sha256 {digest}");
    Ok(())
}

pub fn train(
    c: &Common,
    variant: Option<String>,
    dataset: Option<PathBuf>,
    resume: bool,
    max_epochs: Option<usize>,
) -> Result<(), CliError> {
    let (mut table, source) = read_table(c.config.as_deref())?;
    apply_overrides(&mut table, &c.overrides)?;
    if let Some(seed) = c.seed {
        set_path(&mut table, "train.seed", Value::Integer(seed as i64))?;
        set_path(&mut table, "data.seed", Value::Integer(seed as i64))?;
    }
    if let Some(v) = variant {
        set_path(&mut table, "train.variant", Value::String(v))?;
    }
    if let Some(d) = dataset {
        set_path(&mut table, "dataset", Value::String(d.display().to_string()))?;
    }
    let cfg: ExperimentConfig = decode(table)?;
    let resolved = toml::to_string(&cfg).map_err(|e| CliError::Config(e.to_string()))?;
    fs::create_dir_all(&c.out)?;
    if let (Some(text), false) = (&source, resume) {
        fs::write(c.out.join("source_config.toml"), text)?;
    }
    let opts = ExperimentOptions { resume, max_epochs, config_text: Some(resolved) };
    let result = run_experiment(&cfg, Some(&c.out), &opts)?;

    let audit: String = result
        .best_model
        .params()
        .iter()
        .map(|(_, name, t)| format!("{name} {:?}\n", t.shape))
        .collect();
    fs::write(c.out.join("parameters.txt"), audit)?;

    let s = &result.state;
    println!(
        "variant {} parameters {} epochs phase1 {} phase2 {}{}",
        s.variant,
        s.num_parameters,
        s.progress.phase1,
        s.progress.phase2,
        if s.complete { "" } else { " (incomplete)" }
    );
    if let Some(b) = &s.best {
        println!("best val rmse {} at phase {} epoch {}", b.rmse, b.phase.number(), b.epoch);
    }
    if let Some(r) = &result.final_report {
        print_report("test", &r.mean);
    }
    Ok(())
}

fn print_report(label: &str, r: &MetricReport) {
    println!(
        "{label}: rmse {:.4} rel {:.4} log10 {:.4} d1 {:.4} d2 {:.4} d3 {:.4} tau {:.4} whdr {:.4} ({} px)",
        r.rmse, r.rel, r.log10, r.delta[0], r.delta[1], r.delta[2], r.kendall_tau, r.whdr, r.n_valid
    );
}

pub struct EvalArgs {
    pub out: PathBuf,
    pub protocol: String,
    pub checkpoint: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub split: String,
    pub pred: Option<PathBuf>,
    pub gt: Option<PathBuf>,
    pub depth_range: (f64, f64),
}

fn load_model(path: &Path) -> Result<Model, CliError> {
    if !path.exists() {
        return Err(CliError::MissingCheckpoint(path.display().to_string()));
    }
    Ok(Model::load(path, None)?)
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let protocol = EvalProtocol::by_name(&a.protocol)?;
    fs::create_dir_all(&a.out)?;
    let report = match (&a.pred, &a.gt, &a.checkpoint, &a.dataset) {
        (Some(pred), Some(gt), _, _) => evaluate_corpus(pred, gt, &protocol)?,
        (_, _, Some(ckpt), Some(ds)) => {
            let model = load_model(ckpt)?;
            let split: Split = a.split.parse()?;
            let ds = Dataset::open(ds)?;
            let (pred_dir, gt_dir) = (a.out.join("predictions"), a.out.join("gt"));
            fs::create_dir_all(&pred_dir)?;
            fs::create_dir_all(&gt_dir)?;
            for r in ds.records.iter().filter(|r| r.split == split && r.has_metric_label) {
                let src = ds.root.join(&r.depth);
                let format = DepthFormat::from_path(&src)?;
                fs::copy(&src, gt_dir.join(format!("{}.{}", r.source_id, format.extension())))?;
                let image = raster::load_rgb_png(&ds.root.join(&r.image))?;
                let pred = predict_original(&model, &image, a.depth_range)?;
                save_depth_raster(&pred, &pred_dir.join(format!("{}.f32", r.source_id)), DepthFormat::Rawf32)?;
            }
            evaluate_corpus(&pred_dir, &gt_dir, &protocol)?
        }
        _ => return Err(CliError::Config("eval needs --pred and --gt, or --checkpoint and --dataset".into())),
    };
    fs::write(a.out.join("report.jsonl"), report.to_jsonl())?;
    write_json(&a.out.join("report.json"), &report)?;
    print_report(&format!("{} images", report.per_image.len()), &report.mean);
    Ok(())
}

/// Writes `name.f32` and a colorized `name.png` from the stored raster,
/// so the PNG annotations describe exactly what is on disk.
fn write_field(out: &Path, name: &str, data: Array2<f64>, valid: Array2<bool>) -> Result<MetricDepthMap, CliError> {
    let map = MetricDepthMap::new(data, DepthSpace::Original, valid)?;
    let path = out.join(format!("{name}.f32"));
    fs::write(&path, raster::encode_rawf32(&map))?;
    let stored = raster::decode_rawf32(&fs::read(&path)?)?;
    save_colorized(&stored.data, &stored.valid, &out.join(format!("{name}.png")))?;
    Ok(stored)
}

pub fn predict(
    ckpt: &Path,
    image: &Path,
    gt: Option<&Path>,
    out: &Path,
    range: (f64, f64),
) -> Result<(), CliError> {
    let model = load_model(ckpt)?;
    let img = raster::load_rgb_png(image)?;
    fs::create_dir_all(out)?;
    let o = model.forward_full(&img)?;
    let full = |d: &Array2<f64>| Array2::from_elem(d.dim(), true);
    if let Some(g) = &o.g_hat {
        write_field(out, "gx", g.gx.clone(), full(&g.gx))?;
        write_field(out, "gy", g.gy.clone(), full(&g.gy))?;
    }
    if let Some(n) = &o.n_hat {
        write_field(out, "n", n.data.clone(), n.valid.clone())?;
    }
    let m = predict_original(&model, &img, range)?;
    let m = write_field(out, "m", m.data, m.valid)?;
    if let Some(gt) = gt {
        let truth = load_depth_raster(gt, DepthFormat::from_path(gt)?)?;
        if truth.data.dim() != m.data.dim() {
            return Err(CliError::Config(format!(
                "ground truth is {:?}, prediction is {:?}",
                truth.data.dim(),
                m.data.dim()
            )));
        }
        let (img, max) = error_map(&m.data, &truth.data, &truth.valid)?;
        img.save_with_format(out.join("error.png"), image::ImageFormat::Png)
            .map_err(|e| CliError::Viz(e.into()))?;
        write_json(&out.join("error.json"), &serde_json::json!({ "max_abs_error": max }))?;
    }
    println!("wrote predictions to {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct DecomposeStats {
    mean: f64,
    std: f64,
    space: DepthSpace,
}

pub fn decompose(depth: &Path, out: &Path, inverted: bool) -> Result<(), CliError> {
    let map = load_depth_raster(depth, DepthFormat::from_path(depth)?)?;
    let map = if inverted { invert_depth(&map)? } else { map };
    let (n, stats) = znormalize(&map)?;
    let g = spatial_gradients(&n)?;
    fs::create_dir_all(out)?;
    write_field(out, "n", n.data.clone(), n.valid.clone())?;
    write_field(out, "gx", g.gx.clone(), g.valid_x.clone())?;
    write_field(out, "gy", g.gy.clone(), g.valid_y.clone())?;
    write_json(&out.join("stats.json"), &DecomposeStats { mean: stats.mean, std: stats.std, space: map.space })?;
    println!("mean {} std {} ({:?} space)", stats.mean, stats.std, map.space);
    Ok(())
}

#[derive(Debug, Serialize)]
struct Row {
    bundle: String,
    variant: String,
    #[serde(flatten)]
    report: MetricReport,
}

pub fn report(bundles: &[PathBuf], out: &Path) -> Result<(), CliError> {
    let mut rows = Vec::new();
    let mut series = Vec::new();
    for b in bundles {
        let state: BundleState = read_json(&b.join(STATE_FILE))?;
        let report: CorpusReport = read_json(&b.join(FINAL_REPORT))?;
        let name = b.file_name().map_or_else(|| b.display().to_string(), |n| n.to_string_lossy().into_owned());
        let log = fs::read_to_string(b.join(TRAIN_LOG))
            .map_err(|e| CliError::UnreadableFile(format!("{}: {e}", b.display())))?;
        let mut points = Vec::new();
        for line in log.lines().filter(|l| !l.trim().is_empty()) {
            let rec: LogRecord = serde_json::from_str(line)
                .map_err(|e| CliError::UnreadableFile(format!("{}: {e}", b.join(TRAIN_LOG).display())))?;
            if let Some(v) = rec.val {
                points.push(v.rmse);
            }
        }
        series.push(Series { label: name.clone(), values: points });
        rows.push(Row { bundle: name, variant: state.variant, report: report.mean });
    }
    rows.sort_by(|a, b| a.report.rmse.total_cmp(&b.report.rmse).then_with(|| a.bundle.cmp(&b.bundle)));

    let header = ["bundle", "variant", "rmse", "rel", "log10", "d1", "d2", "d3", "tau", "whdr"];
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let m = &r.report;
            vec![
                r.bundle.clone(),
                r.variant.clone(),
                m.rmse.to_string(),
                m.rel.to_string(),
                m.log10.to_string(),
                m.delta[0].to_string(),
                m.delta[1].to_string(),
                m.delta[2].to_string(),
                m.kendall_tau.to_string(),
                m.whdr.to_string(),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|i| cells.iter().map(|c| c[i].len()).chain([header[i].len()]).max().unwrap_or(0))
        .collect();
    let fmt_row = |r: Vec<&str>| -> String {
        let mut s: Vec<String> = r.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        s.last_mut().map(|l| *l = l.trim_end().to_string());
        s.join("  ") + "\n"
    };
    let mut table = fmt_row(header.to_vec());
    for c in &cells {
        table.push_str(&fmt_row(c.iter().map(String::as_str).collect()));
    }
    fs::create_dir_all(out)?;
    fs::write(out.join("table.txt"), &table)?;
    write_json(&out.join("table.json"), &rows)?;
    line_chart(&series, 640, 360)
        .save_with_format(out.join("val_rmse.png"), image::ImageFormat::Png)
        .map_err(|e| CliError::Viz(e.into()))?;
    write_json(&out.join("val_rmse.json"), &legend(&series))?;
    print!("{table}");
    Ok(())
}
