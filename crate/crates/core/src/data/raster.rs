//! Depth raster and RGB image files.
//!
//! `png16mm` is a 16-bit grayscale PNG in millimeters with 0 marking invalid
//! pixels. `rawf32` is an 8-byte magic, `u32` width and `u32` height (16 bytes
//! in all) followed by row-major little-endian `f32` values; NaN or 0 marks an
//! invalid pixel.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use image::{ImageBuffer, Luma, Rgb};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::DataError;
use crate::decomposition::{DepthSpace, MetricDepthMap};

pub const RAWF32_MAGIC: [u8; 8] = *b"DDRAWF32";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthFormat {
    Png16mm,
    Rawf32,
}

impl DepthFormat {
    pub fn extension(self) -> &'static str {
        match self {
            DepthFormat::Png16mm => "png",
            DepthFormat::Rawf32 => "f32",
        }
    }

    /// Format implied by a file extension.
    pub fn from_path(path: &Path) -> Result<Self, DataError> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("png") => Ok(DepthFormat::Png16mm),
            Some("f32") | Some("raw") => Ok(DepthFormat::Rawf32),
            other => Err(DataError::UnknownFormat(other.unwrap_or("").to_string())),
        }
    }
}

impl fmt::Display for DepthFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DepthFormat::Png16mm => "png16mm",
            DepthFormat::Rawf32 => "rawf32",
        })
    }
}

impl FromStr for DepthFormat {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "png16mm" => Ok(DepthFormat::Png16mm),
            "rawf32" => Ok(DepthFormat::Rawf32),
            _ => Err(DataError::UnknownFormat(s.to_string())),
        }
    }
}

fn unreadable(path: &Path, e: impl fmt::Display) -> DataError {
    DataError::UnreadableFile(format!("{}: {e}", path.display()))
}

/// Reads an original-space depth map in meters.
pub fn load_depth_raster(path: &Path, format: DepthFormat) -> Result<MetricDepthMap, DataError> {
    match format {
        DepthFormat::Png16mm => {
            let img = image::open(path).map_err(|e| unreadable(path, e))?;
            let img = match img {
                image::DynamicImage::ImageLuma16(b) => b,
                _ => return Err(DataError::BadHeader(format!("{} is not 16-bit grayscale", path.display()))),
            };
            let (w, h) = img.dimensions();
            let mut data = Array2::zeros((h as usize, w as usize));
            let mut valid = Array2::from_elem((h as usize, w as usize), false);
            for (x, y, p) in img.enumerate_pixels() {
                let v = p.0[0];
                if v != 0 {
                    data[[y as usize, x as usize]] = v as f64 / 1000.0;
                    valid[[y as usize, x as usize]] = true;
                }
            }
            Ok(MetricDepthMap { data, space: DepthSpace::Original, valid })
        }
        DepthFormat::Rawf32 => {
            let bytes = fs::read(path).map_err(|e| unreadable(path, e))?;
            decode_rawf32(&bytes).map_err(|e| match e {
                DataError::BadHeader(m) => DataError::BadHeader(format!("{}: {m}", path.display())),
                e => e,
            })
        }
    }
}

pub fn decode_rawf32(bytes: &[u8]) -> Result<MetricDepthMap, DataError> {
    if bytes.len() < 16 || bytes[..8] != RAWF32_MAGIC {
        return Err(DataError::BadHeader("missing rawf32 magic".into()));
    }
    let w = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let h = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() != 4 * w * h {
        return Err(DataError::BadHeader(format!(
            "{w}x{h} header but {} payload bytes",
            body.len()
        )));
    }
    let vals: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let valid = Array2::from_shape_fn((h, w), |(i, j)| {
        let v = vals[i * w + j];
        !v.is_nan() && v != 0.0
    });
    let data = Array2::from_shape_fn((h, w), |(i, j)| {
        if valid[[i, j]] {
            vals[i * w + j] as f64
        } else {
            0.0
        }
    });
    Ok(MetricDepthMap { data, space: DepthSpace::Original, valid })
}

pub fn encode_rawf32(map: &MetricDepthMap) -> Vec<u8> {
    let (h, w) = map.data.dim();
    let mut out = Vec::with_capacity(16 + 4 * h * w);
    out.extend_from_slice(&RAWF32_MAGIC);
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    for (v, &ok) in map.data.iter().zip(map.valid.iter()) {
        let x = if ok { *v as f32 } else { f32::NAN };
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

/// Writes an original-space map. Invalid pixels become the format's sentinel.
pub fn save_depth_raster(map: &MetricDepthMap, path: &Path, format: DepthFormat) -> Result<(), DataError> {
    map.require_space(DepthSpace::Original)?;
    match format {
        DepthFormat::Rawf32 => {
            let mut f = BufWriter::new(fs::File::create(path)?);
            f.write_all(&encode_rawf32(map))?;
            f.flush()?;
        }
        DepthFormat::Png16mm => {
            let (h, w) = map.data.dim();
            let img = ImageBuffer::<Luma<u16>, Vec<u16>>::from_fn(w as u32, h as u32, |x, y| {
                let (i, j) = (y as usize, x as usize);
                let mm = if map.valid[[i, j]] {
                    (map.data[[i, j]] * 1000.0).round().clamp(1.0, u16::MAX as f64) as u16
                } else {
                    0
                };
                Luma([mm])
            });
            img.save_with_format(path, image::ImageFormat::Png)
                .map_err(|e| DataError::Io(std::io::Error::other(e)))?;
        }
    }
    Ok(())
}

/// 8-bit RGB PNG from an `(h, w, 3)` array in `[0, 1]`.
pub fn save_rgb_png(img: &Array3<f64>, path: &Path) -> Result<(), DataError> {
    let (h, w, _) = img.dim();
    let buf = ImageBuffer::<Rgb<u8>, Vec<u8>>::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| (img[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    });
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| DataError::Io(std::io::Error::other(e)))
}

pub fn load_rgb_png(path: &Path) -> Result<Array3<f64>, DataError> {
    let img = image::open(path).map_err(|e| unreadable(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(i, j, c)| {
        img.get_pixel(j as u32, i as u32).0[c] as f64 / 255.0
    }))
}
