//! Bilinear resampling with half-pixel centers (`align_corners = false`).
//!
//! Source coordinates are `(dst + 0.5) * in / out - 0.5`, clamped below at 0;
//! the upper neighbor is clamped to the last index. Each output sample has at
//! most four contributing inputs, and the adjoint is the exact transpose.

/// Up to two contributing input indices along one axis with their weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub w_lo: f64,
    pub w_hi: f64,
}

impl Tap {
    /// Input indices whose weight is nonzero.
    pub fn support(&self) -> impl Iterator<Item = usize> {
        let lo = (self.w_lo != 0.0).then_some(self.lo);
        let hi = (self.w_hi != 0.0 && self.hi != self.lo).then_some(self.hi);
        lo.into_iter().chain(hi)
    }
}

pub fn taps(input: usize, output: usize) -> Vec<Tap> {
    assert!(input > 0 && output > 0, "bilinear resize of empty axis");
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let w_hi = if hi == lo { 0.0 } else { src - lo as f64 };
            Tap {
                lo,
                hi,
                w_lo: 1.0 - w_hi,
                w_hi,
            }
        })
        .collect()
}

/// Resizes one row-major `h x w` plane into `oh x ow`.
pub fn resize_plane(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let rows = taps(h, oh);
    let cols = taps(w, ow);
    let mut out = vec![0.0; oh * ow];
    resize_plane_into(src, w, &rows, &cols, &mut out);
    out
}

pub(crate) fn resize_plane_into(src: &[f64], w: usize, rows: &[Tap], cols: &[Tap], out: &mut [f64]) {
    let ow = cols.len();
    for (oi, r) in rows.iter().enumerate() {
        let top = &src[r.lo * w..(r.lo + 1) * w];
        let bot = &src[r.hi * w..(r.hi + 1) * w];
        let dst = &mut out[oi * ow..(oi + 1) * ow];
        for (d, c) in dst.iter_mut().zip(cols) {
            let t = c.w_lo * top[c.lo] + c.w_hi * top[c.hi];
            let b = c.w_lo * bot[c.lo] + c.w_hi * bot[c.hi];
            *d = r.w_lo * t + r.w_hi * b;
        }
    }
}

/// Accumulates the adjoint of [`resize_plane`] applied to `grad_out` into `grad_in`.
pub(crate) fn resize_plane_adjoint(
    grad_out: &[f64],
    w: usize,
    rows: &[Tap],
    cols: &[Tap],
    grad_in: &mut [f64],
) {
    let ow = cols.len();
    for (oi, r) in rows.iter().enumerate() {
        for (oj, c) in cols.iter().enumerate() {
            let g = grad_out[oi * ow + oj];
            if g == 0.0 {
                continue;
            }
            grad_in[r.lo * w + c.lo] += g * r.w_lo * c.w_lo;
            grad_in[r.lo * w + c.hi] += g * r.w_lo * c.w_hi;
            grad_in[r.hi * w + c.lo] += g * r.w_hi * c.w_lo;
            grad_in[r.hi * w + c.hi] += g * r.w_hi * c.w_hi;
        }
    }
}

/// Adjoint of [`resize_plane`]: maps an `oh x ow` gradient back to `h x w`.
pub fn resize_plane_transpose(grad_out: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let rows = taps(h, oh);
    let cols = taps(w, ow);
    let mut g = vec![0.0; h * w];
    resize_plane_adjoint(grad_out, w, &rows, &cols, &mut g);
    g
}

/// Downscales a validity mask: an output pixel is valid iff every input
/// pixel with nonzero bilinear weight is valid.
pub fn resize_mask(mask: &[bool], h: usize, w: usize, oh: usize, ow: usize) -> Vec<bool> {
    let rows = taps(h, oh);
    let cols = taps(w, ow);
    let mut out = vec![false; oh * ow];
    for (oi, r) in rows.iter().enumerate() {
        for (oj, c) in cols.iter().enumerate() {
            out[oi * ow + oj] = r
                .support()
                .all(|i| c.support().all(|j| mask[i * w + j]));
        }
    }
    out
}
