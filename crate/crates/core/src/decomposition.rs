//! Decomposition of a metric depth map into a normalized depth map, scale
//! statistics and spatial gradients.
//!
//! All functions here are pure and operate on immutable inputs. Maps carry an
//! explicit validity mask; invalid pixels never contribute to statistics and
//! are written as `0.0` in every derived map.
//!
//! Only z-score normalization is provided. Min-max and rank-based
//! normalizations are sensitive to outliers and to homogeneous regions
//! respectively, and are not implemented.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Threshold below which a population standard deviation counts as zero.
pub const DEGENERATE_STD: f64 = 1e-8;

/// Threshold below which the variance of a fitted normalized map counts as zero.
pub const DEGENERATE_VARIANCE: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecompError {
    #[error("negative depth {value} at pixel ({row}, {col})")]
    NegativeDepth { row: usize, col: usize, value: f64 },
    #[error("inverted depth {value} at pixel ({row}, {col}) is outside (0, 1]")]
    OutOfRange { row: usize, col: usize, value: f64 },
    #[error("depth map is degenerate (std {std:e} over {count} valid pixels)")]
    DegenerateMap { std: f64, count: usize },
    #[error("least-squares fit is degenerate (variance {variance:e})")]
    DegenerateFit { variance: f64 },
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("map of shape {rows}x{cols} is too small for spatial gradients")]
    TooSmall { rows: usize, cols: usize },
    #[error("invalid scale statistics: std must be positive, got {0}")]
    InvalidStats(f64),
    #[error("{space:?}-space map required")]
    SpaceMismatch { space: DepthSpace },
}

/// Representation a metric depth map is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthSpace {
    /// Depth in meters, `[0, inf)`.
    Original,
    /// `1 / (d + 1)`, within `(0, 1]`.
    Inverted,
}

/// Read access to a 2-D grid of depth-like values with a validity mask.
pub trait DepthGrid {
    fn values(&self) -> &Array2<f64>;
    fn mask(&self) -> &Array2<bool>;

    fn dims(&self) -> (usize, usize) {
        self.values().dim()
    }

    fn valid_count(&self) -> usize {
        self.mask().iter().filter(|&&v| v).count()
    }
}

/// Per-pixel absolute depth with validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricDepthMap {
    pub data: Array2<f64>,
    pub space: DepthSpace,
    pub valid: Array2<bool>,
}

impl MetricDepthMap {
    /// Builds a map, rejecting mismatched mask shapes.
    pub fn new(
        data: Array2<f64>,
        space: DepthSpace,
        valid: Array2<bool>,
    ) -> Result<Self, DecompError> {
        check_same_shape(data.dim(), valid.dim())?;
        Ok(Self { data, space, valid })
    }

    /// Map with every pixel marked valid.
    pub fn dense(data: Array2<f64>, space: DepthSpace) -> Self {
        let valid = Array2::from_elem(data.dim(), true);
        Self { data, space, valid }
    }

    pub fn require_space(&self, space: DepthSpace) -> Result<(), DecompError> {
        if self.space == space {
            Ok(())
        } else {
            Err(DecompError::SpaceMismatch { space })
        }
    }

    /// Iterator over values at valid pixels, row-major.
    pub fn valid_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.data
            .iter()
            .zip(self.valid.iter())
            .filter(|(_, &v)| v)
            .map(|(&d, _)| d)
    }
}

impl DepthGrid for MetricDepthMap {
    fn values(&self) -> &Array2<f64> {
        &self.data
    }
    fn mask(&self) -> &Array2<bool> {
        &self.valid
    }
}

/// Mean and population standard deviation removed by z-score normalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleStats {
    pub mean: f64,
    pub std: f64,
}

/// Z-score normalized depth.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedDepthMap {
    pub data: Array2<f64>,
    pub valid: Array2<bool>,
    pub origin_stats: Option<ScaleStats>,
    /// Space of the map the statistics were taken from.
    pub source_space: DepthSpace,
}

impl NormalizedDepthMap {
    /// Dense normalized map without known statistics (e.g. a network prediction).
    pub fn dense(data: Array2<f64>) -> Self {
        let valid = Array2::from_elem(data.dim(), true);
        Self {
            data,
            valid,
            origin_stats: None,
            source_space: DepthSpace::Inverted,
        }
    }
}

impl DepthGrid for NormalizedDepthMap {
    fn values(&self) -> &Array2<f64> {
        &self.data
    }
    fn mask(&self) -> &Array2<bool> {
        &self.valid
    }
}

/// Horizontal and vertical forward differences of a map.
///
/// `valid_x[i, j]` holds iff both `(i, j)` and `(i, j + 1)` are valid source
/// pixels; `valid_y` likewise for rows. `pixel_valid` is the source mask and
/// defines the normalizer `T` of the gradient loss.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientPair {
    pub gx: Array2<f64>,
    pub gy: Array2<f64>,
    pub valid_x: Array2<bool>,
    pub valid_y: Array2<bool>,
    pub pixel_valid: Array2<bool>,
}

impl GradientPair {
    /// Pair whose every entry is taken as given, with one mask shared by
    /// both components and the pixel count.
    pub fn from_parts(
        gx: Array2<f64>,
        gy: Array2<f64>,
        valid: Array2<bool>,
    ) -> Result<Self, DecompError> {
        check_same_shape(gx.dim(), gy.dim())?;
        check_same_shape(gx.dim(), valid.dim())?;
        Ok(Self {
            gx,
            gy,
            valid_x: valid.clone(),
            valid_y: valid.clone(),
            pixel_valid: valid,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.gx.dim()
    }

    pub fn pixel_count(&self) -> usize {
        self.pixel_valid.iter().filter(|&&v| v).count()
    }
}

pub(crate) fn check_same_shape(
    expected: (usize, usize),
    actual: (usize, usize),
) -> Result<(), DecompError> {
    if expected == actual {
        Ok(())
    } else {
        Err(DecompError::ShapeMismatch { expected, actual })
    }
}

/// `m = 1 / (m_o + 1)` at valid pixels. Invalid pixels are carried through untouched.
pub fn invert_depth(d: &MetricDepthMap) -> Result<MetricDepthMap, DecompError> {
    d.require_space(DepthSpace::Original)?;
    for ((row, col), &value) in d.data.indexed_iter() {
        if d.valid[[row, col]] && !(value >= 0.0) {
            return Err(DecompError::NegativeDepth { row, col, value });
        }
    }
    let mut data = d.data.clone();
    Zip::from(&mut data).and(&d.valid).for_each(|x, &v| {
        if v {
            *x = 1.0 / (*x + 1.0);
        }
    });
    Ok(MetricDepthMap {
        data,
        space: DepthSpace::Inverted,
        valid: d.valid.clone(),
    })
}

/// `m_o = 1 / m - 1`, the inverse of [`invert_depth`].
pub fn uninvert_depth(m: &MetricDepthMap) -> Result<MetricDepthMap, DecompError> {
    m.require_space(DepthSpace::Inverted)?;
    for ((row, col), &value) in m.data.indexed_iter() {
        if m.valid[[row, col]] && !(value > 0.0 && value <= 1.0) {
            return Err(DecompError::OutOfRange { row, col, value });
        }
    }
    let mut data = m.data.clone();
    Zip::from(&mut data).and(&m.valid).for_each(|x, &v| {
        if v {
            *x = 1.0 / *x - 1.0;
        }
    });
    Ok(MetricDepthMap {
        data,
        space: DepthSpace::Original,
        valid: m.valid.clone(),
    })
}

/// Population mean and standard deviation over the valid pixels of a grid.
pub fn masked_stats(values: &Array2<f64>, mask: &Array2<bool>) -> (f64, f64, usize) {
    let mut count = 0usize;
    let mut sum = 0.0;
    for (&x, &v) in values.iter().zip(mask.iter()) {
        if v {
            count += 1;
            sum += x;
        }
    }
    if count == 0 {
        return (0.0, 0.0, 0);
    }
    let mean = sum / count as f64;
    let mut ss = 0.0;
    for (&x, &v) in values.iter().zip(mask.iter()) {
        if v {
            ss += (x - mean) * (x - mean);
        }
    }
    (mean, (ss / count as f64).sqrt(), count)
}

/// Z-score normalization `N = (M - mean) / std` over valid pixels, with the
/// population standard deviation.
pub fn znormalize(
    d: &MetricDepthMap,
) -> Result<(NormalizedDepthMap, ScaleStats), DecompError> {
    let (mean, std, count) = masked_stats(&d.data, &d.valid);
    if count < 2 || std <= DEGENERATE_STD {
        return Err(DecompError::DegenerateMap { std, count });
    }
    let stats = ScaleStats { mean, std };
    let mut data = Array2::zeros(d.data.dim());
    Zip::from(&mut data)
        .and(&d.data)
        .and(&d.valid)
        .for_each(|n, &m, &v| {
            if v {
                *n = (m - mean) / std;
            }
        });
    Ok((
        NormalizedDepthMap {
            data,
            valid: d.valid.clone(),
            origin_stats: Some(stats),
            source_space: d.space,
        },
        stats,
    ))
}

/// `M = std * N + mean` at valid pixels of `n`.
pub fn reconstruct_direct(
    n: &NormalizedDepthMap,
    stats: &ScaleStats,
) -> Result<MetricDepthMap, DecompError> {
    if !(stats.std > 0.0) {
        return Err(DecompError::InvalidStats(stats.std));
    }
    check_same_shape(n.data.dim(), n.valid.dim())?;
    let mut data = Array2::zeros(n.data.dim());
    Zip::from(&mut data)
        .and(&n.data)
        .and(&n.valid)
        .for_each(|m, &x, &v| {
            if v {
                *m = stats.std * x + stats.mean;
            }
        });
    Ok(MetricDepthMap {
        data,
        space: n.source_space,
        valid: n.valid.clone(),
    })
}

/// Forward differences along columns (`gx`) and rows (`gy`).
///
/// The last column of `gx` and last row of `gy` are zero-padded so both maps
/// stay aligned with the source.
pub fn spatial_gradients<G: DepthGrid + ?Sized>(n: &G) -> Result<GradientPair, DecompError> {
    spatial_gradients_raw(n.values(), n.mask())
}

pub fn spatial_gradients_raw(
    values: &Array2<f64>,
    mask: &Array2<bool>,
) -> Result<GradientPair, DecompError> {
    check_same_shape(values.dim(), mask.dim())?;
    let (rows, cols) = values.dim();
    if rows < 2 || cols < 2 {
        return Err(DecompError::TooSmall { rows, cols });
    }
    let mut gx = Array2::zeros((rows, cols));
    let mut gy = Array2::zeros((rows, cols));
    let mut valid_x = Array2::from_elem((rows, cols), false);
    let mut valid_y = Array2::from_elem((rows, cols), false);
    for i in 0..rows {
        for j in 0..cols {
            if j + 1 < cols && mask[[i, j]] && mask[[i, j + 1]] {
                gx[[i, j]] = values[[i, j + 1]] - values[[i, j]];
                valid_x[[i, j]] = true;
            }
            if i + 1 < rows && mask[[i, j]] && mask[[i + 1, j]] {
                gy[[i, j]] = values[[i + 1, j]] - values[[i, j]];
                valid_y[[i, j]] = true;
            }
        }
    }
    Ok(GradientPair {
        gx,
        gy,
        valid_x,
        valid_y,
        pixel_valid: mask.clone(),
    })
}

/// Closed-form scale and shift minimizing `sum (scale * n_hat + shift - m)^2`
/// over valid pixels. The result is returned as `ScaleStats { std: scale,
/// mean: shift }` so it can be fed straight into [`reconstruct_direct`].
pub fn least_squares_scale_shift(
    n_hat: &Array2<f64>,
    m: &Array2<f64>,
    mask: &Array2<bool>,
) -> Result<ScaleStats, DecompError> {
    check_same_shape(n_hat.dim(), m.dim())?;
    check_same_shape(n_hat.dim(), mask.dim())?;
    let (mean_n, std_n, count) = masked_stats(n_hat, mask);
    let variance = std_n * std_n;
    if count < 2 || variance <= DEGENERATE_VARIANCE {
        return Err(DecompError::DegenerateFit { variance });
    }
    let (mean_m, _, _) = masked_stats(m, mask);
    let mut cov = 0.0;
    Zip::from(n_hat).and(m).and(mask).for_each(|&x, &y, &v| {
        if v {
            cov += (x - mean_n) * (y - mean_m);
        }
    });
    cov /= count as f64;
    let scale = cov / variance;
    Ok(ScaleStats {
        mean: mean_m - scale * mean_n,
        std: scale,
    })
}
