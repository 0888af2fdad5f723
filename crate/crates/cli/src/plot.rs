//! Minimal line charts for validation curves.

use depthdecomp::viz::viridis;
use image::{ImageBuffer, Rgb, RgbImage};

pub struct Series {
    pub label: String,
    pub values: Vec<f64>,
}

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn series_color(k: usize, n: usize) -> Rgb<u8> {
    let t = if n > 1 { k as f64 / (n - 1) as f64 } else { 0.0 };
    Rgb(viridis(0.85 * t))
}

/// Label and RGB color of each series, in drawing order.
pub fn legend(series: &[Series]) -> Vec<(String, [u8; 3])> {
    series.iter().enumerate().map(|(k, s)| (s.label.clone(), series_color(k, series.len()).0)).collect()
}

/// One polyline per series over a shared y range, with markers at each point.
/// Colors step through the viridis map in series order.
pub fn line_chart(series: &[Series], width: u32, height: u32) -> RgbImage {
    let mut img = ImageBuffer::from_pixel(width, height, Rgb([255, 255, 255]));
    let margin = 24i64;
    let (w, h) = (width as i64 - 2 * margin, height as i64 - 2 * margin);
    let axis = Rgb([0, 0, 0]);
    draw_line(&mut img, (margin, margin), (margin, margin + h), axis);
    draw_line(&mut img, (margin, margin + h), (margin + w, margin + h), axis);

    let finite = series.iter().flat_map(|s| s.values.iter().copied()).filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return img;
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let n = series.iter().map(|s| s.values.len()).max().unwrap_or(1).max(2);
    for (k, s) in series.iter().enumerate() {
        let color = series_color(k, series.len());
        let pts: Vec<(i64, i64)> = s
            .values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, v)| {
                let x = margin + (i as f64 / (n - 1) as f64 * w as f64).round() as i64;
                let y = margin + h - ((v - lo) / span * h as f64).round() as i64;
                (x, y)
            })
            .collect();
        for p in pts.windows(2) {
            draw_line(&mut img, p[0], p[1], color);
        }
        for &(x, y) in &pts {
            for d in -2..=2 {
                draw_line(&mut img, (x - 2, y + d), (x + 2, y + d), color);
            }
        }
    }
    img
}
