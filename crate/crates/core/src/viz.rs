//! Colorized depth images and error maps.
//!
//! Every colorized PNG gets a JSON sidecar (`<stem>.json`) carrying the
//! colormap name and the value range mapped onto it.

use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VizError {
    #[error("no valid pixels to render")]
    EmptyMask,
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("image encoding failed: {0}")]
    Encode(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const COLORMAP: &str = "viridis";

/// Viridis sampled at nine evenly spaced stops.
const VIRIDIS: [[f64; 3]; 9] = [
    [68.0, 1.0, 84.0],
    [71.0, 44.0, 122.0],
    [59.0, 82.0, 139.0],
    [44.0, 114.0, 142.0],
    [33.0, 145.0, 140.0],
    [39.0, 173.0, 129.0],
    [92.0, 200.0, 99.0],
    [170.0, 220.0, 50.0],
    [253.0, 231.0, 37.0],
];

/// Maps `t` in `[0, 1]` onto the colormap.
pub fn viridis(t: f64) -> [u8; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (VIRIDIS.len() - 1) as f64;
    let i = (x.floor() as usize).min(VIRIDIS.len() - 2);
    let f = x - i as f64;
    std::array::from_fn(|c| (VIRIDIS[i][c] * (1.0 - f) + VIRIDIS[i + 1][c] * f).round() as u8)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorizeMeta {
    pub colormap: String,
    pub min: f64,
    pub max: f64,
}

/// Minimum and maximum over valid, finite pixels.
pub fn value_range(data: &Array2<f64>, valid: &Array2<bool>) -> Option<(f64, f64)> {
    data.iter()
        .zip(valid)
        .filter(|(x, &v)| v && x.is_finite())
        .fold(None, |acc, (&x, _)| match acc {
            None => Some((x, x)),
            Some((lo, hi)) => Some((lo.min(x), hi.max(x))),
        })
}

/// RGB rendering of `data` over its own valid range; invalid pixels are black.
pub fn colorize(
    data: &Array2<f64>,
    valid: &Array2<bool>,
) -> Result<(ImageBuffer<Rgb<u8>, Vec<u8>>, ColorizeMeta), VizError> {
    if data.dim() != valid.dim() {
        return Err(VizError::ShapeMismatch(data.dim(), valid.dim()));
    }
    let (lo, hi) = value_range(data, valid).ok_or(VizError::EmptyMask)?;
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (h, w) = data.dim();
    let img = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (i, j) = (y as usize, x as usize);
        if valid[[i, j]] && data[[i, j]].is_finite() {
            Rgb(viridis((data[[i, j]] - lo) / span))
        } else {
            Rgb([0, 0, 0])
        }
    });
    Ok((img, ColorizeMeta { colormap: COLORMAP.into(), min: lo, max: hi }))
}

pub fn sidecar_path(png: &Path) -> PathBuf {
    png.with_extension("json")
}

/// Writes the colorized PNG and its metadata sidecar.
pub fn save_colorized(
    data: &Array2<f64>,
    valid: &Array2<bool>,
    png: &Path,
) -> Result<ColorizeMeta, VizError> {
    let (img, meta) = colorize(data, valid)?;
    img.save_with_format(png, image::ImageFormat::Png)?;
    let json = serde_json::to_string_pretty(&meta).expect("metadata serializes");
    std::fs::write(sidecar_path(png), json)?;
    Ok(meta)
}

/// Grayscale absolute error, scaled so the largest error is white.
/// A perfect prediction renders all black.
pub fn error_map(
    pred: &Array2<f64>,
    gt: &Array2<f64>,
    valid: &Array2<bool>,
) -> Result<(ImageBuffer<Luma<u8>, Vec<u8>>, f64), VizError> {
    if pred.dim() != gt.dim() || pred.dim() != valid.dim() {
        return Err(VizError::ShapeMismatch(pred.dim(), gt.dim()));
    }
    let err = ndarray::Zip::from(pred)
        .and(gt)
        .and(valid)
        .map_collect(|&p, &g, &v| if v { (p - g).abs() } else { 0.0 });
    let max = err.iter().copied().filter(|e| e.is_finite()).fold(0.0, f64::max);
    let (h, w) = err.dim();
    let img = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let e = err[[y as usize, x as usize]];
        let b = if max > 0.0 && e.is_finite() { (e / max * 255.0).round() } else { 0.0 };
        Luma([b as u8])
    });
    Ok((img, max))
}
