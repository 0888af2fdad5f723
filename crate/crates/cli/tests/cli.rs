use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use depthdecomp::data::{load_depth_raster, DepthFormat};
use depthdecomp::decomposition::{reconstruct_direct, DepthSpace, NormalizedDepthMap, ScaleStats};
use depthdecomp::metrics::{evaluate_map, pair_counts, EvalProtocol, MetricReport};
use depthdecomp::metrics::CorpusReport;
use serde_json::Value;
use tempfile::TempDir;

const SMOKE: &str = r#"model = "tiny"

[data]
num_scenes = 32
image_size = [16, 16]
seed = 4

[train]
batch_size = 4
seed = 4

[train.phase1]
epochs = 2
lr = 1e-3
decay = 0.1
decay_every = 5

[train.phase2]
epochs = 2
lr = 1e-3
decay = 0.1
decay_every = 3
"#;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_depthdecomp")).args(args).output().expect("spawn depthdecomp")
}

fn ok(args: &[&str]) -> String {
    let out = bin(args);
    assert!(
        out.status.success(),
        "depthdecomp {}: {}\n{}",
        args.join(" "),
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

struct Smoke {
    dir: TempDir,
}

impl Smoke {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("smoke.toml"), SMOKE).unwrap();
        let smoke = Self { dir };
        ok(&["gen-data", "--config", &s(&smoke.config()), "--out", &s(&smoke.data())]);
        smoke
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn config(&self) -> PathBuf {
        self.path("smoke.toml")
    }

    fn data(&self) -> PathBuf {
        self.path("data")
    }

    fn train(&self, out: &str, extra: &[&str]) -> PathBuf {
        let bundle = self.path(out);
        let mut args = vec!["train", "--config", &*Box::leak(s(&self.config()).into_boxed_str())];
        let data = s(&self.data());
        let b = s(&bundle);
        args.extend(["--dataset", &data, "--out", &b]);
        args.extend(extra);
        ok(&args);
        bundle
    }
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn raster(p: &Path) -> depthdecomp::decomposition::MetricDepthMap {
    load_depth_raster(p, DepthFormat::from_path(p).unwrap()).unwrap()
}

fn manifest_digest(stdout: &str) -> String {
    stdout.lines().find_map(|l| l.strip_prefix("manifest sha256 ")).unwrap().to_string()
}

#[test]
fn gen_data_defaults_and_replay() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let first = ok(&["gen-data", "--out", &s(&a)]);
    let second = ok(&["gen-data", "--out", &s(&b)]);
    let manifest = std::fs::read_to_string(a.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 200);
    assert_eq!(manifest_digest(&first), manifest_digest(&second));
    assert_eq!(manifest.as_bytes(), std::fs::read(b.join("manifest.jsonl")).unwrap());
}

#[test]
fn relative_fraction_override() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    ok(&["gen-data", "--override", "relative_fraction=0.5", "--override", "num_scenes=40", "--out", &s(&out)]);
    let manifest = std::fs::read_to_string(out.join("manifest.jsonl")).unwrap();
    let train: Vec<Value> = manifest
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap())
        .filter(|r| r["split"] == "train")
        .collect();
    let relative = train.iter().filter(|r| r["has_metric_label"] == false).count() as f64;
    assert!((relative - 0.5 * train.len() as f64).abs() <= 1.0, "{relative} of {}", train.len());

    let other = tmp.path().join("e");
    let digest = manifest_digest(&ok(&["gen-data", "--override", "relative_fraction=0.5", "--out", &s(&other)]));
    let base = manifest_digest(&ok(&["gen-data", "--out", &s(&tmp.path().join("f"))]));
    assert_ne!(digest, base);
}

#[test]
fn variants_have_distinct_parameter_audits() {
    let smoke = Smoke::new();
    let b = smoke.train("baseline", &["--variant", "baseline"]);
    let p = smoke.train("proposed", &["--variant", "proposed"]);
    let audit_b = std::fs::read_to_string(b.join("parameters.txt")).unwrap();
    let audit_p = std::fs::read_to_string(p.join("parameters.txt")).unwrap();
    assert_ne!(audit_b, audit_p);
    assert!(!audit_b.contains("g_net.") && !audit_b.contains("n_net.") && !audit_b.contains("mdr."));
    assert!(audit_p.contains("g_net.") && audit_p.contains("m_net.mdr."));
}

#[test]
fn smoke_run_writes_val_metrics_and_mirrors_config() {
    let smoke = Smoke::new();
    let bundle = smoke.train("run", &[]);
    let log = std::fs::read_to_string(bundle.join("train_log.jsonl")).unwrap();
    let records: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 4);
    assert!(records[2]["val"]["rmse"].as_f64().unwrap().is_finite());
    assert_eq!(std::fs::read_to_string(bundle.join("source_config.toml")).unwrap(), SMOKE);
    for f in ["config.toml", "best.ckpt", "last.ckpt", "final_report.json", "state.json"] {
        assert!(bundle.join(f).exists(), "{f}");
    }
}

#[test]
fn interrupted_run_resumes_identically() {
    let smoke = Smoke::new();
    let full = smoke.train("full", &[]);
    let part = smoke.train("part", &["--max-epochs", "3"]);
    let state = read_json(&part.join("state.json"));
    assert_eq!(state["complete"], false);
    smoke.train("part", &["--resume"]);
    for f in ["train_log.jsonl", "best.ckpt", "last.ckpt", "final_report.json"] {
        assert_eq!(std::fs::read(full.join(f)).unwrap(), std::fs::read(part.join(f)).unwrap(), "{f}");
    }
    let log = std::fs::read_to_string(part.join("train_log.jsonl")).unwrap();
    let lrs: Vec<f64> = log.lines().map(|l| serde_json::from_str::<Value>(l).unwrap()["lr"].as_f64().unwrap()).collect();
    assert_eq!(lrs, [1e-3; 4]);
}

#[test]
fn eval_checkpoint_and_ground_truth_against_itself() {
    let smoke = Smoke::new();
    let bundle = smoke.train("run", &[]);
    let eval = smoke.path("eval");
    ok(&["eval", "--checkpoint", &s(&bundle.join("best.ckpt")), "--dataset", &s(&smoke.data()), "--out", &s(&eval)]);
    let report: CorpusReport = serde_json::from_value(read_json(&eval.join("report.json"))).unwrap();
    assert_eq!(report.per_image.len(), 3);

    // Per-image fields equal a direct recomputation from the rasters.
    for (id, r) in &report.per_image {
        let pred = raster(&eval.join(format!("predictions/{id}.f32")));
        let gt = raster(&eval.join(format!("gt/{id}.f32")));
        let again = evaluate_map(&pred, &gt, &EvalProtocol::synthetic()).unwrap();
        assert_eq!(&again, r, "{id}");
    }
    let final_report: CorpusReport = serde_json::from_value(read_json(&bundle.join("final_report.json"))).unwrap();
    // The bundle scores f64 predictions, eval scores the stored f32 rasters.
    assert!((final_report.mean.rmse - report.mean.rmse).abs() < 1e-6);

    let selfeval = smoke.path("self");
    let gt = s(&eval.join("gt"));
    ok(&["eval", "--pred", &gt, "--gt", &gt, "--out", &s(&selfeval)]);
    let r: CorpusReport = serde_json::from_value(read_json(&selfeval.join("report.json"))).unwrap();
    let m: &MetricReport = &r.mean;
    assert_eq!((m.rmse, m.rel, m.log10), (0.0, 0.0, 0.0));
    assert_eq!(m.delta, [1.0; 3]);
    assert_eq!(m.whdr, 0.0);
    // Tau-a: tied pixels in the ground truth keep tau below 1, but nothing is discordant.
    for (id, per) in &r.per_image {
        let map = raster(&eval.join(format!("gt/{id}.f32")));
        let vals: Vec<f64> = map.data.iter().zip(&map.valid).filter(|(_, &v)| v).map(|(&x, _)| x).collect();
        let counts = pair_counts(&vals, &vals);
        assert_eq!(counts.discordant, 0);
        assert_eq!(per.kendall_tau, counts.tau(), "{id}");
    }
}

#[test]
fn crop_protocol_only_on_request() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["gen-data", "--override", "num_scenes=10", "--override", "image_size=[480, 640]", "--out", &s(&data)]);
    let gt = tmp.path().join("gt");
    std::fs::create_dir_all(&gt).unwrap();
    for e in std::fs::read_dir(data.join("test")).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "f32") {
            std::fs::copy(&p, gt.join(p.file_name().unwrap())).unwrap();
        }
    }
    let n_valid = |protocol: &str| {
        let out = tmp.path().join(protocol);
        ok(&["eval", "--pred", &s(&gt), "--gt", &s(&gt), "--protocol", protocol, "--out", &s(&out)]);
        let r: CorpusReport = serde_json::from_value(read_json(&out.join("report.json"))).unwrap();
        r.per_image.values().map(|m| m.n_valid).sum::<usize>()
    };
    let full: usize = std::fs::read_dir(&gt)
        .unwrap()
        .map(|e| raster(&e.unwrap().path()).valid.iter().filter(|&&v| v).count())
        .sum();
    assert_eq!(n_valid("synthetic"), full);
    assert!(n_valid("nyuv2-crop") < full);
}

#[test]
fn decompose_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["gen-data", "--override", "num_scenes=10", "--out", &s(&data)]);
    let depth = data.join("test/test_00000_depth.f32");
    let out = tmp.path().join("dec");
    ok(&["decompose", "--depth", &s(&depth), "--out", &s(&out)]);
    let input = raster(&depth);
    let n = raster(&out.join("n.f32"));
    let stats = read_json(&out.join("stats.json"));
    assert_eq!(stats["space"], "original");
    let stats = ScaleStats { mean: stats["mean"].as_f64().unwrap(), std: stats["std"].as_f64().unwrap() };
    let n = NormalizedDepthMap { data: n.data, valid: n.valid, origin_stats: Some(stats), source_space: DepthSpace::Original };
    let back = reconstruct_direct(&n, &stats).unwrap();
    let mut worst = 0.0f64;
    for ((a, b), &v) in back.data.iter().zip(&input.data).zip(&input.valid) {
        if v {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst <= 1e-6, "{worst}");
    for f in ["gx.f32", "gy.f32", "n.png", "gx.png", "gy.png"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn predict_writes_fields_and_black_error_map_for_perfect_prediction() {
    let smoke = Smoke::new();
    let bundle = smoke.train("run", &[]);
    let ckpt = s(&bundle.join("best.ckpt"));
    let image = s(&smoke.data().join("test/test_00000_rgb.png"));
    let first = smoke.path("p1");
    ok(&["predict", "--checkpoint", &ckpt, "--image", &image, "--out", &s(&first)]);
    for f in ["gx", "gy", "n", "m"] {
        let stored = raster(&first.join(format!("{f}.f32")));
        let meta = read_json(&first.join(format!("{f}.json")));
        let (lo, hi) = depthdecomp::viz::value_range(&stored.data, &stored.valid).unwrap();
        assert_eq!(meta["min"].as_f64().unwrap(), lo, "{f}");
        assert_eq!(meta["max"].as_f64().unwrap(), hi, "{f}");
        assert_eq!(meta["colormap"], depthdecomp::viz::COLORMAP);
    }

    let second = smoke.path("p2");
    let own = s(&first.join("m.f32"));
    ok(&["predict", "--checkpoint", &ckpt, "--image", &image, "--gt", &own, "--out", &s(&second)]);
    let err = image::open(second.join("error.png")).unwrap().to_luma8();
    assert!(err.pixels().all(|p| p.0[0] == 0));
    assert_eq!(read_json(&second.join("error.json"))["max_abs_error"], 0.0);

    let truth = s(&smoke.data().join("test/test_00000_depth.f32"));
    let third = smoke.path("p3");
    ok(&["predict", "--checkpoint", &ckpt, "--image", &image, "--gt", &truth, "--out", &s(&third)]);
    let err = image::open(third.join("error.png")).unwrap().to_luma8();
    assert_eq!(err.pixels().map(|p| p.0[0]).max(), Some(255));
}

#[test]
fn report_sorts_rows_and_copies_numbers_verbatim() {
    let smoke = Smoke::new();
    let b = smoke.train("baseline", &["--variant", "baseline"]);
    let p = smoke.train("proposed", &["--variant", "proposed"]);

    let one = smoke.path("r1");
    ok(&["report", &s(&b), "--out", &s(&one)]);
    let rows = read_json(&one.join("table.json"));
    assert_eq!(rows.as_array().unwrap().len(), 1);

    let two = smoke.path("r2");
    let table = ok(&["report", &s(&p), &s(&b), "--out", &s(&two)]);
    let rows = read_json(&two.join("table.json"));
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows[0]["rmse"].as_f64().unwrap() <= rows[1]["rmse"].as_f64().unwrap());
    for row in rows {
        let bundle = smoke.path(row["bundle"].as_str().unwrap());
        let stored = &read_json(&bundle.join("final_report.json"))["mean"];
        for k in ["rmse", "rel", "log10", "kendall_tau", "whdr"] {
            assert_eq!(row[k], stored[k], "{k}");
            assert!(table.contains(&stored[k].as_f64().unwrap().to_string()), "{k} not verbatim in table");
        }
    }
    assert!(two.join("val_rmse.png").exists());
}

#[test]
fn error_families_have_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = s(&tmp.path().join("x"));
    let code = |args: &[&str]| bin(args).status.code().unwrap();

    assert_eq!(code(&["train", "--variant", "nope", "--out", &out]), 3);
    assert_eq!(code(&["gen-data", "--override", "split=[0.5, 0.5, 0.5]", "--out", &out]), 5);
    assert_eq!(code(&["gen-data", "--config", "/nonexistent/cfg.toml", "--out", &out]), 4);
    let missing = s(&tmp.path().join("missing.ckpt"));
    let img = s(&tmp.path().join("img.png"));
    assert_eq!(code(&["predict", "--checkpoint", &missing, "--image", &img, "--out", &out]), 7);
    assert_eq!(code(&["eval", "--pred", &out, "--gt", &out, "--protocol", "kitti", "--out", &out]), 9);
    assert_eq!(code(&["report", &out, "--out", &out]), 4);
    assert_eq!(code(&["gen-data"]), 2);
}
