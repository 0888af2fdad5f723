use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::optim::Adam;
use super::session::{evaluate_samples, Best, Progress, Trainer};
use super::variants::{build_variant, VariantRegistry};
use super::{LogRecord, Phase, TrainConfig, TrainError};
use crate::data::{generate_samples, Dataset, DatasetConfig, SplitSamples};
use crate::graph::{ParamId, ParamStore};
use crate::metrics::{CorpusReport, EvalProtocol};
use crate::network::{Model, ModelConfig};

pub const CONFIG_FILE: &str = "config.toml";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const FINAL_REPORT: &str = "final_report.json";
pub const STATE_FILE: &str = "state.json";
pub const RESUME_FILE: &str = "resume.bin";

const RESUME_MAGIC: &[u8; 8] = b"DDRESUME";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Directory holding a dataset manifest. Without one, `data` is rendered
    /// in memory.
    pub dataset: Option<PathBuf>,
    pub data: DatasetConfig,
    /// Model preset: `toy`, `tiny` or `full`.
    pub model: String,
    /// Full model description; replaces the preset when present.
    pub model_config: Option<ModelConfig>,
    pub protocol: String,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            data: DatasetConfig::default(),
            model: "toy".into(),
            model_config: None,
            protocol: "synthetic".into(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn model_config(&self) -> Result<ModelConfig, TrainError> {
        if let Some(m) = &self.model_config {
            return Ok(m.clone().with_seed(self.train.seed));
        }
        let base = match self.model.as_str() {
            "toy" => ModelConfig::toy(),
            "tiny" => ModelConfig::tiny(),
            "full" => ModelConfig::full(),
            other => return Err(TrainError::InvalidConfig(format!("unknown model preset {other:?}"))),
        };
        Ok(base.with_seed(self.train.seed))
    }

    pub fn protocol(&self) -> Result<EvalProtocol, TrainError> {
        Ok(EvalProtocol::by_name(&self.protocol)?)
    }
}

/// Reads a TOML experiment config, returning it with its source text.
pub fn load_experiment_config(path: &Path) -> Result<(ExperimentConfig, String), TrainError> {
    let text = fs::read_to_string(path)?;
    let cfg = toml::from_str(&text).map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
    Ok((cfg, text))
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentOptions {
    /// Continue from the bundle's resume state if one exists.
    pub resume: bool,
    /// Stop after this many epochs in this invocation.
    pub max_epochs: Option<usize>,
    /// Text mirrored into the bundle as `config.toml`; defaults to the
    /// serialized config.
    pub config_text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestScore {
    pub rmse: f64,
    pub phase: Phase,
    pub epoch: usize,
}

/// `state.json`: where a bundle's run stands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleState {
    pub variant: String,
    pub progress: Progress,
    pub complete: bool,
    pub best: Option<BestScore>,
    pub num_parameters: usize,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub log: Vec<LogRecord>,
    pub state: BundleState,
    /// Test-split report of the best model; present once the schedule is done.
    pub final_report: Option<CorpusReport>,
    pub best_model: Model,
}

/// Loads or renders the data, then runs [`run_experiment_on`].
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out: Option<&Path>,
    opts: &ExperimentOptions,
) -> Result<ExperimentResult, TrainError> {
    let data = match &cfg.dataset {
        Some(dir) => Dataset::open(dir)?.load_all()?,
        None => generate_samples(&cfg.data)?,
    };
    run_experiment_on(cfg, &data, &VariantRegistry::builtin(), out, opts)
}

/// Trains the configured variant on `data`, writing a result bundle to `out`
/// after every epoch when given.
pub fn run_experiment_on(
    cfg: &ExperimentConfig,
    data: &SplitSamples,
    registry: &VariantRegistry,
    out: Option<&Path>,
    opts: &ExperimentOptions,
) -> Result<ExperimentResult, TrainError> {
    let variant = registry.get(&cfg.train.variant)?;
    let model = build_variant(variant, &cfg.model_config()?)?;
    let protocol = cfg.protocol()?;
    if data.train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut trainer = Trainer::new(variant, model, cfg.train.clone(), protocol.clone())?;

    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let resume = dir.join(RESUME_FILE);
        if opts.resume && resume.exists() {
            restore(&mut trainer, &resume)?;
        } else {
            let text = match &opts.config_text {
                Some(t) => t.clone(),
                None => toml::to_string(cfg).map_err(|e| TrainError::InvalidConfig(e.to_string()))?,
            };
            write_atomic(&dir.join(CONFIG_FILE), text.as_bytes())?;
        }
    }

    let left = std::cell::Cell::new(opts.max_epochs.unwrap_or(usize::MAX));
    trainer.run_until(
        data,
        |_, _| {
            let n = left.get();
            left.set(n.saturating_sub(1));
            n > 0
        },
        &mut |t, _| match out {
            Some(dir) => write_bundle(t, dir),
            None => Ok(()),
        },
    )?;

    let best_model = trainer.best_model();
    let final_report = if trainer.is_complete() && !data.test.is_empty() {
        Some(evaluate_samples(&best_model, &data.test, &protocol, cfg.train.depth_range)?)
    } else {
        None
    };
    let state = bundle_state(&trainer);
    if let Some(dir) = out {
        if let Some(r) = &final_report {
            let json = serde_json::to_string_pretty(r).expect("report serializes");
            write_atomic(&dir.join(FINAL_REPORT), json.as_bytes())?;
        }
    }
    Ok(ExperimentResult { log: trainer.log.clone(), state, final_report, best_model })
}

fn bundle_state(t: &Trainer) -> BundleState {
    BundleState {
        variant: t.variant.name().to_string(),
        progress: t.progress,
        complete: t.is_complete(),
        best: t.best.as_ref().map(|b| BestScore { rmse: b.rmse, phase: b.phase, epoch: b.epoch }),
        num_parameters: t.model.num_parameters(),
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), TrainError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn checkpoint_bytes(m: &Model) -> Result<Vec<u8>, TrainError> {
    let mut buf = Vec::new();
    crate::network::write_checkpoint(m, &mut buf)?;
    Ok(buf)
}

fn write_bundle(t: &Trainer, dir: &Path) -> Result<(), TrainError> {
    let log: String = t.log.iter().map(LogRecord::to_json_line).collect();
    write_atomic(&dir.join(TRAIN_LOG), log.as_bytes())?;
    write_atomic(&dir.join(LAST_CHECKPOINT), &checkpoint_bytes(&t.model)?)?;
    if t.best.is_some() {
        write_atomic(&dir.join(BEST_CHECKPOINT), &checkpoint_bytes(&t.best_model())?)?;
    }
    let state = serde_json::to_string_pretty(&bundle_state(t)).expect("state serializes");
    write_atomic(&dir.join(STATE_FILE), state.as_bytes())?;
    write_atomic(&dir.join(RESUME_FILE), &encode_resume(t))?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ResumeHeader {
    model: ModelConfig,
    train: TrainConfig,
    progress: Progress,
    log: Vec<LogRecord>,
    best: Option<BestScore>,
    optimizer: Option<OptimizerHeader>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    phase: Phase,
    step: u64,
    params: Vec<usize>,
}

fn put_f64s(buf: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_store(buf: &mut Vec<u8>, s: &ParamStore) {
    for (_, _, t) in s.iter() {
        put_f64s(buf, &t.data);
    }
}

/// Exact training state: header JSON, then every float as little-endian f64.
fn encode_resume(t: &Trainer) -> Vec<u8> {
    let header = ResumeHeader {
        model: t.model.config().clone(),
        train: t.cfg.clone(),
        progress: t.progress,
        log: t.log.clone(),
        best: t.best.as_ref().map(|b| BestScore { rmse: b.rmse, phase: b.phase, epoch: b.epoch }),
        optimizer: t.optimizer.as_ref().map(|(phase, a)| OptimizerHeader {
            phase: *phase,
            step: a.step,
            params: a.params.iter().map(|p| p.index()).collect(),
        }),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::new();
    buf.extend_from_slice(RESUME_MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    put_store(&mut buf, t.model.params());
    if let Some(b) = &t.best {
        put_store(&mut buf, &b.params);
    }
    if let Some((_, a)) = &t.optimizer {
        for (m, v) in a.m.iter().zip(&a.v) {
            put_f64s(&mut buf, m);
            put_f64s(&mut buf, v);
        }
    }
    buf
}

struct Cursor<'a>(&'a [u8]);

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], TrainError> {
        if self.0.len() < n {
            return Err(TrainError::Resume("truncated file".into()));
        }
        let (head, rest) = self.0.split_at(n);
        self.0 = rest;
        Ok(head)
    }

    fn f64s(&mut self, out: &mut [f64]) -> Result<(), TrainError> {
        let raw = self.take(8 * out.len())?;
        for (x, c) in out.iter_mut().zip(raw.chunks_exact(8)) {
            *x = f64::from_le_bytes(c.try_into().expect("8 bytes"));
        }
        Ok(())
    }

    fn store(&mut self, s: &mut ParamStore) -> Result<(), TrainError> {
        let ids: Vec<ParamId> = s.ids().collect();
        for id in ids {
            self.f64s(&mut s.get_mut(id).data)?;
        }
        Ok(())
    }
}

fn restore(t: &mut Trainer, path: &Path) -> Result<(), TrainError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut c = Cursor(&bytes);
    if c.take(8)? != RESUME_MAGIC {
        return Err(TrainError::Resume("bad magic".into()));
    }
    let n = u64::from_le_bytes(c.take(8)?.try_into().expect("8 bytes")) as usize;
    let header: ResumeHeader =
        serde_json::from_slice(c.take(n)?).map_err(|e| TrainError::Resume(e.to_string()))?;
    if header.model != *t.model.config() || header.train != t.cfg {
        return Err(TrainError::Resume("bundle was produced by a different config".into()));
    }
    c.store(t.model.params_mut())?;
    t.best = match header.best {
        Some(b) => {
            let mut params = t.model.params().clone();
            c.store(&mut params)?;
            Some(Best { rmse: b.rmse, phase: b.phase, epoch: b.epoch, params })
        }
        None => None,
    };
    t.optimizer = match header.optimizer {
        Some(o) => {
            let ids: Vec<ParamId> = o.params.iter().map(|&i| ParamId(i)).collect();
            let mut a = Adam::new(t.cfg.optimizer, t.model.params(), ids);
            a.step = o.step;
            for k in 0..a.params.len() {
                c.f64s(&mut a.m[k])?;
                c.f64s(&mut a.v[k])?;
            }
            Some((o.phase, a))
        }
        None => None,
    };
    if !c.0.is_empty() {
        return Err(TrainError::Resume("trailing bytes".into()));
    }
    t.progress = header.progress;
    t.log = header.log;
    Ok(())
}
