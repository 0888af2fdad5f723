//! Depth evaluation metrics and protocols.
//!
//! All metrics take original-space maps in meters; predictions in inverted
//! space must be passed through `uninvert_depth` first. A pixel counts iff it
//! is valid in both maps.

mod crop;
mod kendall;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{load_depth_raster, DataError, DepthFormat};
use crate::decomposition::{DepthSpace, MetricDepthMap};

pub use crop::{eigen_center_crop, CropBounds};
pub use kendall::{pair_counts, PairCounts};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("no valid pixels")]
    EmptyMask,
    #[error("ground truth must be strictly positive at valid pixels")]
    NonPositiveGroundTruth,
    #[error("need at least 2 valid pixels, got {0}")]
    TooFewPixels(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("metrics are computed in original depth space")]
    SpaceMismatch,
    #[error("no prediction for ground truth {0}")]
    MissingPair(String),
    #[error("cannot read {0}")]
    UnreadableFile(String),
    #[error("invalid protocol: {0}")]
    InvalidProtocol(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<DataError> for MetricError {
    fn from(e: DataError) -> Self {
        MetricError::UnreadableFile(e.to_string())
    }
}

/// Paired `(prediction, ground truth)` values at jointly valid pixels.
fn paired(m_hat: &MetricDepthMap, m: &MetricDepthMap) -> Result<Vec<(f64, f64)>, MetricError> {
    if m_hat.space != DepthSpace::Original || m.space != DepthSpace::Original {
        return Err(MetricError::SpaceMismatch);
    }
    if m_hat.data.dim() != m.data.dim() {
        return Err(MetricError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            m_hat.data.dim(),
            m.data.dim()
        )));
    }
    let v: Vec<(f64, f64)> = m_hat
        .data
        .iter()
        .zip(m.data.iter())
        .zip(m_hat.valid.iter().zip(m.valid.iter()))
        .filter(|(_, (a, b))| **a && **b)
        .map(|((p, g), _)| (*p, *g))
        .collect();
    if v.is_empty() {
        return Err(MetricError::EmptyMask);
    }
    Ok(v)
}

fn positive(v: &[(f64, f64)]) -> Result<(), MetricError> {
    if v.iter().all(|&(_, g)| g > 0.0) {
        Ok(())
    } else {
        Err(MetricError::NonPositiveGroundTruth)
    }
}

/// `sqrt(mean((m_hat - m)^2))`.
pub fn rmse(m_hat: &MetricDepthMap, m: &MetricDepthMap) -> Result<f64, MetricError> {
    let v = paired(m_hat, m)?;
    Ok((v.iter().map(|(p, g)| (p - g).powi(2)).sum::<f64>() / v.len() as f64).sqrt())
}

/// `mean(|m_hat - m| / m)`.
pub fn rel(m_hat: &MetricDepthMap, m: &MetricDepthMap) -> Result<f64, MetricError> {
    let v = paired(m_hat, m)?;
    positive(&v)?;
    Ok(v.iter().map(|(p, g)| (p - g).abs() / g).sum::<f64>() / v.len() as f64)
}

/// `mean(|log10 m_hat - log10 m|)`.
pub fn log10(m_hat: &MetricDepthMap, m: &MetricDepthMap) -> Result<f64, MetricError> {
    let v = paired(m_hat, m)?;
    positive(&v)?;
    if v.iter().any(|&(p, _)| p <= 0.0) {
        return Err(MetricError::NonPositiveGroundTruth);
    }
    Ok(v.iter().map(|(p, g)| (p.log10() - g.log10()).abs()).sum::<f64>() / v.len() as f64)
}

/// Fraction of pixels with `max(m_hat / m, m / m_hat) < 1.25^k`.
pub fn delta_k(m_hat: &MetricDepthMap, m: &MetricDepthMap, k: i32) -> Result<f64, MetricError> {
    let v = paired(m_hat, m)?;
    positive(&v)?;
    let thr = 1.25f64.powi(k);
    let hits = v
        .iter()
        .filter(|&&(p, g)| p > 0.0 && (p / g).max(g / p) < thr)
        .count();
    Ok(hits as f64 / v.len() as f64)
}

fn joint_values(d_hat: &Array2<f64>, d: &Array2<f64>, mask: &Array2<bool>) -> (Vec<f64>, Vec<f64>) {
    let mut a = Vec::new();
    let mut b = Vec::new();
    for ((&x, &y), &ok) in d_hat.iter().zip(d.iter()).zip(mask.iter()) {
        if ok {
            a.push(x);
            b.push(y);
        }
    }
    (a, b)
}

fn check_dims(a: &Array2<f64>, b: &Array2<f64>, m: &Array2<bool>) -> Result<(), MetricError> {
    if a.dim() == b.dim() && b.dim() == m.dim() {
        Ok(())
    } else {
        Err(MetricError::ShapeMismatch(format!("{:?}, {:?}, {:?}", a.dim(), b.dim(), m.dim())))
    }
}

/// Kendall's tau-a over all pairs of valid pixels.
pub fn kendall_tau(d_hat: &Array2<f64>, d: &Array2<f64>, mask: &Array2<bool>) -> Result<f64, MetricError> {
    check_dims(d_hat, d, mask)?;
    let (a, b) = joint_values(d_hat, d, mask);
    if a.len() < 2 {
        return Err(MetricError::TooFewPixels(a.len()));
    }
    Ok(pair_counts(&b, &a).tau())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WhdrConfig {
    pub num_pairs: usize,
    /// Relative difference below which two depths are labeled equal.
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for WhdrConfig {
    fn default() -> Self {
        Self {
            num_pairs: 50_000,
            tolerance: 0.03,
            seed: 0,
        }
    }
}

/// Ordinal label of a pair: `-1` if `a` is nearer, `1` if farther, `0` if
/// their relative difference is within `tolerance`.
pub fn ordinal_label(a: f64, b: f64, tolerance: f64) -> i8 {
    if (a - b).abs() > tolerance * a.abs().min(b.abs()) {
        if a < b {
            -1
        } else {
            1
        }
    } else {
        0
    }
}

/// `num_pairs` pairs of distinct indices into `0..n`, drawn with replacement.
pub fn sample_pairs(n: usize, num_pairs: usize, seed: u64) -> Vec<(usize, usize)> {
    assert!(n >= 2, "sample_pairs needs two items");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..num_pairs)
        .map(|_| {
            let i = rng.random_range(0..n);
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            (i, j)
        })
        .collect()
}

/// Fraction of sampled valid-pixel pairs whose predicted ordinal label
/// disagrees with the ground-truth label. Pairs index valid pixels in
/// row-major order.
pub fn whdr(d_hat: &Array2<f64>, d: &Array2<f64>, mask: &Array2<bool>, cfg: &WhdrConfig) -> Result<f64, MetricError> {
    check_dims(d_hat, d, mask)?;
    if !(cfg.tolerance >= 0.0) || cfg.num_pairs == 0 {
        return Err(MetricError::InvalidProtocol("WHDR needs tolerance >= 0 and pairs > 0".into()));
    }
    let (a, b) = joint_values(d_hat, d, mask);
    if a.len() < 2 {
        return Err(MetricError::TooFewPixels(a.len()));
    }
    let pairs = sample_pairs(a.len(), cfg.num_pairs, cfg.seed);
    let wrong = pairs
        .iter()
        .filter(|&&(i, j)| ordinal_label(a[i], a[j], cfg.tolerance) != ordinal_label(b[i], b[j], cfg.tolerance))
        .count();
    Ok(wrong as f64 / pairs.len() as f64)
}

/// Per-image or averaged scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rmse: f64,
    pub rel: f64,
    pub log10: f64,
    pub delta: [f64; 3],
    pub kendall_tau: f64,
    pub whdr: f64,
    pub n_valid: usize,
}

impl MetricReport {
    /// Field-wise mean; `n_valid` is the total over reports.
    pub fn mean(reports: &[MetricReport]) -> Option<MetricReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let avg = |f: &dyn Fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Some(MetricReport {
            rmse: avg(&|r| r.rmse),
            rel: avg(&|r| r.rel),
            log10: avg(&|r| r.log10),
            delta: [avg(&|r| r.delta[0]), avg(&|r| r.delta[1]), avg(&|r| r.delta[2])],
            kendall_tau: avg(&|r| r.kendall_tau),
            whdr: avg(&|r| r.whdr),
            n_valid: reports.iter().map(|r| r.n_valid).sum(),
        })
    }
}

/// Named evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalProtocol {
    pub name: String,
    pub crop: Option<CropBounds>,
    pub whdr: WhdrConfig,
    /// Kendall's tau on at most this many valid pixels (seeded subsample).
    pub kendall_cap: Option<usize>,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self::synthetic()
    }
}

impl EvalProtocol {
    /// No crop; every valid pixel enters every metric.
    pub fn synthetic() -> Self {
        Self {
            name: "synthetic".into(),
            crop: None,
            whdr: WhdrConfig::default(),
            kendall_cap: None,
        }
    }

    /// NYUv2 center crop at 480x640.
    pub fn nyuv2_crop() -> Self {
        Self {
            name: "nyuv2-crop".into(),
            crop: Some(CropBounds::eigen()),
            ..Self::synthetic()
        }
    }

    pub fn by_name(name: &str) -> Result<Self, MetricError> {
        match name {
            "synthetic" => Ok(Self::synthetic()),
            "nyuv2-crop" | "nyuv2" => Ok(Self::nyuv2_crop()),
            _ => Err(MetricError::InvalidProtocol(format!("unknown protocol {name:?}"))),
        }
    }
}

fn crop_map(m: &MetricDepthMap, b: &CropBounds) -> Result<MetricDepthMap, MetricError> {
    Ok(MetricDepthMap {
        data: eigen_center_crop(&m.data, b)?,
        space: m.space,
        valid: eigen_center_crop(&m.valid, b)?,
    })
}

/// All metrics for one original-space prediction.
pub fn evaluate_map(m_hat: &MetricDepthMap, m: &MetricDepthMap, protocol: &EvalProtocol) -> Result<MetricReport, MetricError> {
    let (m_hat, m) = match &protocol.crop {
        Some(b) => (crop_map(m_hat, b)?, crop_map(m, b)?),
        None => (m_hat.clone(), m.clone()),
    };
    let n_valid = paired(&m_hat, &m)?.len();
    let mask = ndarray::Zip::from(&m_hat.valid).and(&m.valid).map_collect(|&a, &b| a && b);
    let tau = match protocol.kendall_cap {
        Some(cap) if n_valid > cap => {
            let (mut a, mut b) = joint_values(&m_hat.data, &m.data, &mask);
            let mut idx: Vec<usize> = (0..a.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(protocol.whdr.seed);
            rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
            idx.truncate(cap);
            idx.sort_unstable();
            a = idx.iter().map(|&i| a[i]).collect();
            b = idx.iter().map(|&i| b[i]).collect();
            if a.len() < 2 {
                return Err(MetricError::TooFewPixels(a.len()));
            }
            pair_counts(&b, &a).tau()
        }
        _ => kendall_tau(&m_hat.data, &m.data, &mask)?,
    };
    Ok(MetricReport {
        rmse: rmse(&m_hat, &m)?,
        rel: rel(&m_hat, &m)?,
        log10: log10(&m_hat, &m)?,
        delta: [delta_k(&m_hat, &m, 1)?, delta_k(&m_hat, &m, 2)?, delta_k(&m_hat, &m, 3)?],
        kendall_tau: tau,
        whdr: whdr(&m_hat.data, &m.data, &mask, &protocol.whdr)?,
        n_valid,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub protocol: String,
    pub per_image: BTreeMap<String, MetricReport>,
    pub mean: MetricReport,
}

impl CorpusReport {
    pub fn from_reports(protocol: &str, per_image: BTreeMap<String, MetricReport>) -> Result<Self, MetricError> {
        let all: Vec<MetricReport> = per_image.values().cloned().collect();
        let mean = MetricReport::mean(&all).ok_or(MetricError::EmptyMask)?;
        Ok(Self { protocol: protocol.to_string(), per_image, mean })
    }

    /// One JSON record per image, then a summary record.
    pub fn to_jsonl(&self) -> String {
        #[derive(Serialize)]
        struct Line<'a> {
            kind: &'a str,
            id: &'a str,
            protocol: &'a str,
            #[serde(flatten)]
            report: &'a MetricReport,
        }
        let mut out = String::new();
        for (id, r) in &self.per_image {
            let line = Line { kind: "image", id, protocol: &self.protocol, report: r };
            out.push_str(&serde_json::to_string(&line).expect("serializable"));
            out.push('\n');
        }
        let line = Line { kind: "corpus", id: "mean", protocol: &self.protocol, report: &self.mean };
        out.push_str(&serde_json::to_string(&line).expect("serializable"));
        out.push('\n');
        out
    }
}

fn raster_files(dir: &Path) -> Result<BTreeMap<String, std::path::PathBuf>, MetricError> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| MetricError::UnreadableFile(format!("{}: {e}", dir.display())))?;
    for entry in entries {
        let path = entry?.path();
        if DepthFormat::from_path(&path).is_ok() {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Evaluates every ground-truth raster in `gt_dir` against the prediction
/// with the same file stem in `pred_dir`. Both hold original-space rasters.
pub fn evaluate_corpus(pred_dir: &Path, gt_dir: &Path, protocol: &EvalProtocol) -> Result<CorpusReport, MetricError> {
    let preds = raster_files(pred_dir)?;
    let gts = raster_files(gt_dir)?;
    let mut per_image = BTreeMap::new();
    for (stem, gt_path) in &gts {
        let pred_path = preds.get(stem).ok_or_else(|| MetricError::MissingPair(stem.clone()))?;
        let gt = load_depth_raster(gt_path, DepthFormat::from_path(gt_path)?)?;
        let pred = load_depth_raster(pred_path, DepthFormat::from_path(pred_path)?)?;
        per_image.insert(stem.clone(), evaluate_map(&pred, &gt, protocol)?);
    }
    CorpusReport::from_reports(&protocol.name, per_image)
}
