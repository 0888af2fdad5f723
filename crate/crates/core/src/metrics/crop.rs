use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use super::MetricError;

/// Central evaluation window as fractions of a declared resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropBounds {
    /// `(height, width)` the fractions refer to.
    pub eval_size: (usize, usize),
    pub top: f64,
    pub bottom: f64,
    pub left: f64,
    pub right: f64,
}

impl CropBounds {
    /// The standard NYUv2 window: rows 45..471 and columns 41..601 of 480x640.
    pub fn eigen() -> Self {
        Self {
            eval_size: (480, 640),
            top: 45.0 / 480.0,
            bottom: 471.0 / 480.0,
            left: 41.0 / 640.0,
            right: 601.0 / 640.0,
        }
    }

    /// Same fractions at another declared resolution.
    pub fn at(self, eval_size: (usize, usize)) -> Self {
        Self { eval_size, ..self }
    }

    /// Half-open `(rows, cols)` ranges of the window.
    pub fn window(&self) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let (h, w) = self.eval_size;
        let at = |f: f64, n: usize| ((f * n as f64) + 1e-9).floor() as usize;
        (at(self.top, h)..at(self.bottom, h), at(self.left, w)..at(self.right, w))
    }

    pub fn cropped_size(&self) -> (usize, usize) {
        let (r, c) = self.window();
        (r.len(), c.len())
    }
}

/// Crops a map at the declared resolution. A map already at the cropped size
/// is returned unchanged, so cropping is idempotent.
pub fn eigen_center_crop<T: Clone>(map: &Array2<T>, bounds: &CropBounds) -> Result<Array2<T>, MetricError> {
    if map.dim() == bounds.eval_size {
        let (r, c) = bounds.window();
        Ok(map.slice(s![r, c]).to_owned())
    } else if map.dim() == bounds.cropped_size() {
        Ok(map.clone())
    } else {
        Err(MetricError::ShapeMismatch(format!(
            "map {:?} is neither the evaluation size {:?} nor the crop {:?}",
            map.dim(),
            bounds.eval_size,
            bounds.cropped_size()
        )))
    }
}
