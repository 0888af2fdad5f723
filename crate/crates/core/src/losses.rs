//! Training objectives as pure functions.
//!
//! Every loss comes in two forms: a plain value, and `*_with_grad` returning
//! the value together with its gradient with respect to the prediction. The
//! gradient at an exact tie of the absolute value is taken as 0.

use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decomposition::{
    spatial_gradients_raw, DepthSpace, GradientPair, MetricDepthMap, NormalizedDepthMap,
};
use crate::interp;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("no valid pixels to average over")]
    EmptyMask,
    #[error("scale {scale} shrinks {rows}x{cols} below 2 pixels")]
    ScaleTooSmall { scale: f64, rows: usize, cols: usize },
    #[error("both maps must be in inverted space")]
    SpaceMismatch,
    #[error("logarithmic loss needs strictly positive depths")]
    NonPositiveDepth,
    #[error("missing target for {0}")]
    MissingTarget(&'static str),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LossTerm {
    G,
    N,
    Nx,
    Ny,
    M,
    Mx,
    My,
    Mu,
    LogM,
}

impl LossTerm {
    pub const ALL: [LossTerm; 9] = [
        LossTerm::G,
        LossTerm::N,
        LossTerm::Nx,
        LossTerm::Ny,
        LossTerm::M,
        LossTerm::Mx,
        LossTerm::My,
        LossTerm::Mu,
        LossTerm::LogM,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::G => "G",
            LossTerm::N => "N",
            LossTerm::Nx => "Nx",
            LossTerm::Ny => "Ny",
            LossTerm::M => "M",
            LossTerm::Mx => "Mx",
            LossTerm::My => "My",
            LossTerm::Mu => "muM",
            LossTerm::LogM => "logM",
        }
    }

    /// Terms that need a metric depth label.
    pub fn is_metric(self) -> bool {
        matches!(
            self,
            LossTerm::M | LossTerm::Mx | LossTerm::My | LossTerm::Mu | LossTerm::LogM
        )
    }
}

impl fmt::Display for LossTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-term weights, keyed by term name in serialized form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TermWeights {
    #[serde(rename = "G")]
    pub g: f64,
    #[serde(rename = "N")]
    pub n: f64,
    #[serde(rename = "Nx")]
    pub nx: f64,
    #[serde(rename = "Ny")]
    pub ny: f64,
    #[serde(rename = "M")]
    pub m: f64,
    #[serde(rename = "Mx")]
    pub mx: f64,
    #[serde(rename = "My")]
    pub my: f64,
    #[serde(rename = "muM")]
    pub mu: f64,
    #[serde(rename = "logM")]
    pub logm: f64,
}

impl Default for TermWeights {
    fn default() -> Self {
        Self::uniform(1.0)
    }
}

impl TermWeights {
    pub fn uniform(w: f64) -> Self {
        Self {
            g: w,
            n: w,
            nx: w,
            ny: w,
            m: w,
            mx: w,
            my: w,
            mu: w,
            logm: w,
        }
    }

    pub fn get(&self, t: LossTerm) -> f64 {
        match t {
            LossTerm::G => self.g,
            LossTerm::N => self.n,
            LossTerm::Nx => self.nx,
            LossTerm::Ny => self.ny,
            LossTerm::M => self.m,
            LossTerm::Mx => self.mx,
            LossTerm::My => self.my,
            LossTerm::Mu => self.mu,
            LossTerm::LogM => self.logm,
        }
    }

    pub fn set(&mut self, t: LossTerm, w: f64) {
        let slot = match t {
            LossTerm::G => &mut self.g,
            LossTerm::N => &mut self.n,
            LossTerm::Nx => &mut self.nx,
            LossTerm::Ny => &mut self.ny,
            LossTerm::M => &mut self.m,
            LossTerm::Mx => &mut self.mx,
            LossTerm::My => &mut self.my,
            LossTerm::Mu => &mut self.mu,
            LossTerm::LogM => &mut self.logm,
        };
        *slot = w;
    }

    /// Weights that keep only `terms`.
    pub fn only(terms: &[LossTerm]) -> Self {
        let mut w = Self::uniform(0.0);
        for &t in terms {
            w.set(t, 1.0);
        }
        w
    }
}

/// Divisor of the per-scale gradient loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleNormalization {
    /// `T * s^2` with `T` the full-resolution valid count.
    FullResolution,
    /// Valid pixel count of the rescaled target.
    ScaledValid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub gradient_scales: Vec<f64>,
    pub term_weights: TermWeights,
    pub scale_normalization: ScaleNormalization,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gradient_scales: vec![0.5, 0.25, 0.125],
            term_weights: TermWeights::default(),
            scale_normalization: ScaleNormalization::FullResolution,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if self.gradient_scales.is_empty()
            || self.gradient_scales.iter().any(|&s| !(s > 0.0 && s <= 1.0))
        {
            return Err(LossError::InvalidConfig(
                "gradient scales must lie in (0, 1]".into(),
            ));
        }
        let ws: Vec<f64> = LossTerm::ALL.iter().map(|&t| self.term_weights.get(t)).collect();
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(LossError::InvalidConfig("term weights must be finite and >= 0".into()));
        }
        if ws.iter().all(|&w| w == 0.0) {
            return Err(LossError::InvalidConfig("at least one term weight must be > 0".into()));
        }
        Ok(())
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn same_shape(a: (usize, usize), b: (usize, usize)) -> Result<(), LossError> {
    if a == b {
        Ok(())
    } else {
        Err(LossError::ShapeMismatch(a, b))
    }
}

fn count(mask: &Array2<bool>) -> usize {
    mask.iter().filter(|&&v| v).count()
}

/// `sum |pred - target|` over `mask`; adds `scale * sign(residual)` to `grad`.
fn masked_l1(
    pred: &Array2<f64>,
    target: &Array2<f64>,
    mask: &Array2<bool>,
    grad: &mut Array2<f64>,
    scale: f64,
) -> f64 {
    let mut s = 0.0;
    for ((idx, &p), &v) in pred.indexed_iter().zip(mask.iter()) {
        if v {
            let r = p - target[idx];
            s += r.abs();
            grad[idx] += scale * sign(r);
        }
    }
    s
}

fn and(a: &Array2<bool>, b: &Array2<bool>) -> Array2<bool> {
    ndarray::Zip::from(a).and(b).map_collect(|&x, &y| x && y)
}

/// Value and gradients of the gradient-map loss.
pub fn loss_g_with_grad(
    g_hat: &GradientPair,
    g: &GradientPair,
) -> Result<(f64, Array2<f64>, Array2<f64>), LossError> {
    same_shape(g_hat.dims(), g.dims())?;
    let t = g.pixel_count();
    if t == 0 {
        return Err(LossError::EmptyMask);
    }
    let inv = 1.0 / t as f64;
    let mut dx = Array2::zeros(g.dims());
    let mut dy = Array2::zeros(g.dims());
    let sx = masked_l1(&g_hat.gx, &g.gx, &and(&g_hat.valid_x, &g.valid_x), &mut dx, inv);
    let sy = masked_l1(&g_hat.gy, &g.gy, &and(&g_hat.valid_y, &g.valid_y), &mut dy, inv);
    Ok(((sx + sy) * inv, dx, dy))
}

/// `(|G^x_hat - G^x| + |G^y_hat - G^y|) / T` with `T` the target's valid pixel count.
pub fn loss_g(g_hat: &GradientPair, g: &GradientPair) -> Result<f64, LossError> {
    loss_g_with_grad(g_hat, g).map(|r| r.0)
}

fn mean_l1_with_grad(
    pred: &Array2<f64>,
    pred_valid: &Array2<bool>,
    target: &Array2<f64>,
    target_valid: &Array2<bool>,
) -> Result<(f64, Array2<f64>), LossError> {
    same_shape(pred.dim(), target.dim())?;
    let mask = and(pred_valid, target_valid);
    let t = count(&mask);
    if t == 0 {
        return Err(LossError::EmptyMask);
    }
    let inv = 1.0 / t as f64;
    let mut grad = Array2::zeros(pred.dim());
    let s = masked_l1(pred, target, &mask, &mut grad, inv);
    Ok((s * inv, grad))
}

pub fn loss_n_with_grad(
    n_hat: &NormalizedDepthMap,
    n: &NormalizedDepthMap,
) -> Result<(f64, Array2<f64>), LossError> {
    mean_l1_with_grad(&n_hat.data, &n_hat.valid, &n.data, &n.valid)
}

/// Mean absolute normalized-depth error over valid pixels.
pub fn loss_n(n_hat: &NormalizedDepthMap, n: &NormalizedDepthMap) -> Result<f64, LossError> {
    loss_n_with_grad(n_hat, n).map(|r| r.0)
}

/// Horizontal and vertical parts of the multiscale gradient loss.
#[derive(Debug, Clone, PartialEq)]
pub struct GradTerms {
    pub x: f64,
    pub y: f64,
    pub grad_x: Array2<f64>,
    pub grad_y: Array2<f64>,
}

/// Rescaled side length for factor `s`.
pub fn scaled_dim(n: usize, s: f64) -> usize {
    (n as f64 * s).round() as usize
}

pub fn loss_grad_multiscale_parts(
    d_hat: (&Array2<f64>, &Array2<bool>),
    d: (&Array2<f64>, &Array2<bool>),
    scales: &[f64],
    norm: ScaleNormalization,
) -> Result<GradTerms, LossError> {
    let (h, w) = d.0.dim();
    same_shape(d_hat.0.dim(), (h, w))?;
    let t_full = count(d.1);
    if t_full == 0 {
        return Err(LossError::EmptyMask);
    }
    let mut out = GradTerms {
        x: 0.0,
        y: 0.0,
        grad_x: Array2::zeros((h, w)),
        grad_y: Array2::zeros((h, w)),
    };
    for &s in scales {
        let (oh, ow) = (scaled_dim(h, s), scaled_dim(w, s));
        if oh < 2 || ow < 2 {
            return Err(LossError::ScaleTooSmall {
                scale: s,
                rows: oh,
                cols: ow,
            });
        }
        let resize = |a: &Array2<f64>| {
            let src: Vec<f64> = a.iter().copied().collect();
            Array2::from_shape_vec((oh, ow), interp::resize_plane(&src, h, w, oh, ow))
                .expect("resized plane")
        };
        let resize_mask = |m: &Array2<bool>| {
            let src: Vec<bool> = m.iter().copied().collect();
            Array2::from_shape_vec((oh, ow), interp::resize_mask(&src, h, w, oh, ow))
                .expect("resized mask")
        };
        let mask = and(&resize_mask(d.1), &resize_mask(d_hat.1));
        let ps = resize(d_hat.0);
        let ts = resize(d.0);
        let (gp, gt) = match (spatial_gradients_raw(&ps, &mask), spatial_gradients_raw(&ts, &mask)) {
            (Ok(a), Ok(b)) => (a, b),
            _ => unreachable!("scaled maps are at least 2x2"),
        };
        let denom = match norm {
            ScaleNormalization::FullResolution => t_full as f64 * s * s,
            ScaleNormalization::ScaledValid => {
                let c = count(&resize_mask(d.1));
                if c == 0 {
                    continue;
                }
                c as f64
            }
        };
        let inv = 1.0 / denom;
        let mut gsx = Array2::<f64>::zeros((oh, ow));
        let mut gsy = Array2::<f64>::zeros((oh, ow));
        for i in 0..oh {
            for j in 0..ow {
                if gp.valid_x[[i, j]] {
                    let r = gp.gx[[i, j]] - gt.gx[[i, j]];
                    out.x += r.abs() * inv;
                    let g = sign(r) * inv;
                    gsx[[i, j + 1]] += g;
                    gsx[[i, j]] -= g;
                }
                if gp.valid_y[[i, j]] {
                    let r = gp.gy[[i, j]] - gt.gy[[i, j]];
                    out.y += r.abs() * inv;
                    let g = sign(r) * inv;
                    gsy[[i + 1, j]] += g;
                    gsy[[i, j]] -= g;
                }
            }
        }
        for (dst, src) in [(&mut out.grad_x, gsx), (&mut out.grad_y, gsy)] {
            let flat: Vec<f64> = src.iter().copied().collect();
            let back = interp::resize_plane_transpose(&flat, h, w, oh, ow);
            for (d, b) in dst.iter_mut().zip(back) {
                *d += b;
            }
        }
    }
    Ok(out)
}

/// Sum over scales of the gradient-difference loss between bilinearly rescaled maps.
pub fn loss_grad_multiscale(
    d_hat: (&Array2<f64>, &Array2<bool>),
    d: (&Array2<f64>, &Array2<bool>),
    scales: &[f64],
) -> Result<f64, LossError> {
    loss_grad_multiscale_parts(d_hat, d, scales, ScaleNormalization::FullResolution)
        .map(|t| t.x + t.y)
}

fn require_inverted(maps: &[&MetricDepthMap]) -> Result<(), LossError> {
    if maps.iter().all(|m| m.space == DepthSpace::Inverted) {
        Ok(())
    } else {
        Err(LossError::SpaceMismatch)
    }
}

pub fn loss_m_with_grad(
    m_hat: &MetricDepthMap,
    m: &MetricDepthMap,
) -> Result<(f64, Array2<f64>), LossError> {
    require_inverted(&[m_hat, m])?;
    mean_l1_with_grad(&m_hat.data, &m_hat.valid, &m.data, &m.valid)
}

/// Mean absolute inverted-depth error over valid pixels.
pub fn loss_m(m_hat: &MetricDepthMap, m: &MetricDepthMap) -> Result<f64, LossError> {
    loss_m_with_grad(m_hat, m).map(|r| r.0)
}

pub fn loss_mu_with_grad(
    m_hat: &MetricDepthMap,
    mu_target: f64,
) -> Result<(f64, Array2<f64>), LossError> {
    let t = count(&m_hat.valid);
    if t == 0 {
        return Err(LossError::EmptyMask);
    }
    let mean = m_hat.valid_values().sum::<f64>() / t as f64;
    let r = mean - mu_target;
    let g = sign(r) / t as f64;
    let grad = m_hat.valid.mapv(|v| if v { g } else { 0.0 });
    Ok((r.abs(), grad))
}

/// `|mean(m_hat over valid) - mu_target|`.
pub fn loss_mu(m_hat: &MetricDepthMap, mu_target: f64) -> Result<f64, LossError> {
    loss_mu_with_grad(m_hat, mu_target).map(|r| r.0)
}

pub fn loss_logm_with_grad(
    m_hat: &MetricDepthMap,
    m: &MetricDepthMap,
) -> Result<(f64, Array2<f64>), LossError> {
    same_shape(m_hat.data.dim(), m.data.dim())?;
    let mask = and(&m_hat.valid, &m.valid);
    let t = count(&mask);
    if t == 0 {
        return Err(LossError::EmptyMask);
    }
    let inv = 1.0 / t as f64;
    let mut grad = Array2::zeros(m.data.dim());
    let mut s = 0.0;
    for ((idx, &p), &v) in m_hat.data.indexed_iter().zip(mask.iter()) {
        if v {
            let q = m.data[idx];
            if p <= 0.0 || q <= 0.0 {
                return Err(LossError::NonPositiveDepth);
            }
            let r = p.ln() - q.ln();
            s += r.abs();
            grad[idx] = inv * sign(r) / p;
        }
    }
    Ok((s * inv, grad))
}

/// Mean `|ln m_hat - ln m|` over valid pixels.
pub fn loss_logm(m_hat: &MetricDepthMap, m: &MetricDepthMap) -> Result<f64, LossError> {
    loss_logm_with_grad(m_hat, m).map(|r| r.0)
}

/// Supervision for one sample. `m` is present only for metric-labeled samples.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTargets {
    pub g: GradientPair,
    pub n: NormalizedDepthMap,
    /// Inverted-space metric depth.
    pub m: Option<MetricDepthMap>,
}

impl LossTargets {
    /// Mean of the inverted target over its valid pixels.
    pub fn mu(&self) -> Option<f64> {
        let m = self.m.as_ref()?;
        let t = count(&m.valid);
        (t > 0).then(|| m.valid_values().sum::<f64>() / t as f64)
    }
}

/// Predictions handed to [`total_loss`]; any of them may be absent.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossInputs<'a> {
    pub g_hat: Option<&'a GradientPair>,
    pub n_hat: Option<&'a NormalizedDepthMap>,
    /// Inverted-space prediction.
    pub m_hat: Option<&'a MetricDepthMap>,
}

impl<'a> LossInputs<'a> {
    pub fn from_output(out: &'a crate::network::NetworkOutput) -> Self {
        Self {
            g_hat: out.g_hat.as_ref(),
            n_hat: out.n_hat.as_ref(),
            m_hat: out.m_hat.as_ref(),
        }
    }
}

/// Unweighted value of every term; `None` for terms that were not evaluated.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub terms: std::collections::BTreeMap<String, Option<f64>>,
}

impl LossBreakdown {
    pub fn get(&self, t: LossTerm) -> Option<f64> {
        self.terms.get(t.name()).copied().flatten()
    }
}

/// Gradients of the weighted total with respect to each prediction.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OutputGrads {
    pub g: Option<(Array2<f64>, Array2<f64>)>,
    pub n: Option<Array2<f64>>,
    pub m: Option<Array2<f64>>,
}

fn axpy(dst: &mut Option<Array2<f64>>, w: f64, src: &Array2<f64>) {
    match dst {
        Some(d) => d.scaled_add(w, src),
        None => *dst = Some(src * w),
    }
}

/// Weighted sum of the evaluated terms, with gradients.
///
/// A term is evaluated iff its weight is positive, its prediction is present
/// and, for the metric terms, `has_metric_label` holds. Relative-only samples
/// therefore contribute through G and N terms only and their gradient with
/// respect to `m_hat` is absent.
pub fn total_loss_with_grads(
    inputs: LossInputs,
    targets: &LossTargets,
    cfg: &LossConfig,
    has_metric_label: bool,
) -> Result<(LossBreakdown, OutputGrads), LossError> {
    let w = &cfg.term_weights;
    let mut b = LossBreakdown::default();
    let mut grads = OutputGrads::default();
    for t in LossTerm::ALL {
        b.terms.insert(t.name().to_string(), None);
    }
    let record = |b: &mut LossBreakdown, t: LossTerm, v: f64| {
        b.terms.insert(t.name().to_string(), Some(v));
        b.total += w.get(t) * v;
    };
    let on = |t: LossTerm| w.get(t) > 0.0;

    if let Some(g_hat) = inputs.g_hat.filter(|_| on(LossTerm::G)) {
        let (v, dx, dy) = loss_g_with_grad(g_hat, &targets.g)?;
        record(&mut b, LossTerm::G, v);
        grads.g = Some((dx * w.g, dy * w.g));
    }
    if let Some(n_hat) = inputs.n_hat {
        if on(LossTerm::N) {
            let (v, d) = loss_n_with_grad(n_hat, &targets.n)?;
            record(&mut b, LossTerm::N, v);
            axpy(&mut grads.n, w.n, &d);
        }
        if on(LossTerm::Nx) || on(LossTerm::Ny) {
            let p = loss_grad_multiscale_parts(
                (&n_hat.data, &n_hat.valid),
                (&targets.n.data, &targets.n.valid),
                &cfg.gradient_scales,
                cfg.scale_normalization,
            )?;
            if on(LossTerm::Nx) {
                record(&mut b, LossTerm::Nx, p.x);
                axpy(&mut grads.n, w.nx, &p.grad_x);
            }
            if on(LossTerm::Ny) {
                record(&mut b, LossTerm::Ny, p.y);
                axpy(&mut grads.n, w.ny, &p.grad_y);
            }
        }
    }
    if has_metric_label {
        if let Some(m_hat) = inputs.m_hat {
            let m = targets.m.as_ref().ok_or(LossError::MissingTarget("metric depth"))?;
            if on(LossTerm::M) {
                let (v, d) = loss_m_with_grad(m_hat, m)?;
                record(&mut b, LossTerm::M, v);
                axpy(&mut grads.m, w.m, &d);
            }
            if on(LossTerm::Mx) || on(LossTerm::My) {
                require_inverted(&[m_hat, m])?;
                let p = loss_grad_multiscale_parts(
                    (&m_hat.data, &m_hat.valid),
                    (&m.data, &m.valid),
                    &cfg.gradient_scales,
                    cfg.scale_normalization,
                )?;
                if on(LossTerm::Mx) {
                    record(&mut b, LossTerm::Mx, p.x);
                    axpy(&mut grads.m, w.mx, &p.grad_x);
                }
                if on(LossTerm::My) {
                    record(&mut b, LossTerm::My, p.y);
                    axpy(&mut grads.m, w.my, &p.grad_y);
                }
            }
            if on(LossTerm::Mu) {
                let mu = targets.mu().ok_or(LossError::EmptyMask)?;
                let masked = MetricDepthMap {
                    data: m_hat.data.clone(),
                    space: m_hat.space,
                    valid: and(&m_hat.valid, &m.valid),
                };
                let (v, d) = loss_mu_with_grad(&masked, mu)?;
                record(&mut b, LossTerm::Mu, v);
                axpy(&mut grads.m, w.mu, &d);
            }
            if on(LossTerm::LogM) {
                let (v, d) = loss_logm_with_grad(m_hat, m)?;
                record(&mut b, LossTerm::LogM, v);
                axpy(&mut grads.m, w.logm, &d);
            }
        }
    }
    Ok((b, grads))
}

/// Weighted total and per-term breakdown.
pub fn total_loss(
    inputs: LossInputs,
    targets: &LossTargets,
    cfg: &LossConfig,
    has_metric_label: bool,
) -> Result<LossBreakdown, LossError> {
    total_loss_with_grads(inputs, targets, cfg, has_metric_label).map(|r| r.0)
}

#[cfg(test)]
mod tests;
