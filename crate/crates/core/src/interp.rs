//! Subpixel intensity evaluation.
//!
//! The default scheme is an interpolating cubic B-spline. Coefficients are
//! computed on a copy of the image padded with a point-symmetric extension
//! (`f(-k) = 2 f(0) - f(k)`), which keeps linear intensity ramps exact up to
//! the border, and the padded rows/columns are prefiltered with the usual
//! causal/anti-causal recursion under mirror boundary conditions.

use crate::error::{DicError, Result};
use crate::image::GrayImage;

/// Interpolation scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InterpKind {
    #[default]
    BicubicSpline,
    Bilinear,
}

/// Distance from the image border inside which evaluation is refused.
pub const MARGIN: f64 = 2.0;

/// Width of the point-symmetric extension added on every side before the
/// spline prefilter runs.
pub const SPLINE_PAD: usize = 20;
const POLE: f64 = -0.267_949_192_431_122_7; // sqrt(3) - 2

/// Immutable evaluator for intensity values and first derivatives at real
/// coordinates.
#[derive(Debug, Clone)]
pub struct Interpolant {
    kind: InterpKind,
    width: usize,
    height: usize,
    /// Row stride of `coef`.
    stride: usize,
    /// Offset of original pixel (0, 0) inside `coef`.
    pad: usize,
    coef: Vec<f64>,
}

impl Interpolant {
    pub fn new(img: &GrayImage, kind: InterpKind) -> Result<Self> {
        let (w, h) = (img.width(), img.height());
        match kind {
            InterpKind::Bilinear => {
                Ok(Self { kind, width: w, height: h, stride: w, pad: 0, coef: img.data().to_vec() })
            }
            InterpKind::BicubicSpline => {
                if w < 4 || h < 4 {
                    return Err(DicError::InvalidImage(format!(
                        "bicubic interpolation needs at least 4x4 pixels, got {w}x{h}"
                    )));
                }
                Ok(Self {
                    kind,
                    width: w,
                    height: h,
                    stride: w + 2 * SPLINE_PAD,
                    pad: SPLINE_PAD,
                    coef: spline_coefficients(img),
                })
            }
        }
    }

    pub fn kind(&self) -> InterpKind {
        self.kind
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn in_domain(&self, x: f64, y: f64) -> bool {
        x >= MARGIN && y >= MARGIN && x <= self.width as f64 - 1.0 - MARGIN && y <= self.height as f64 - 1.0 - MARGIN
    }

    pub fn value(&self, x: f64, y: f64) -> Result<f64> {
        if !self.in_domain(x, y) {
            return Err(DicError::OutOfBounds { x, y });
        }
        Ok(self.value_grad_unchecked(x, y).0)
    }

    /// Value and `(d/dx, d/dy)`.
    pub fn value_grad(&self, x: f64, y: f64) -> Result<(f64, f64, f64)> {
        if !self.in_domain(x, y) {
            return Err(DicError::OutOfBounds { x, y });
        }
        Ok(self.value_grad_unchecked(x, y))
    }

    /// Caller guarantees `in_domain(x, y)`.
    #[inline]
    pub fn value_grad_unchecked(&self, x: f64, y: f64) -> (f64, f64, f64) {
        match self.kind {
            InterpKind::BicubicSpline => self.spline_eval(x, y),
            InterpKind::Bilinear => self.bilinear_eval(x, y),
        }
    }

    #[inline]
    fn spline_eval(&self, x: f64, y: f64) -> (f64, f64, f64) {
        let xp = x + self.pad as f64;
        let yp = y + self.pad as f64;
        let ix = xp.floor();
        let iy = yp.floor();
        let (wx, dx) = bspline_weights(xp - ix);
        let (wy, dy) = bspline_weights(yp - iy);
        let base = (iy as usize - 1) * self.stride + ix as usize - 1;
        let mut val = 0.0;
        let mut gx = 0.0;
        let mut gy = 0.0;
        for j in 0..4 {
            let row = &self.coef[base + j * self.stride..base + j * self.stride + 4];
            let mut rv = 0.0;
            let mut rd = 0.0;
            for i in 0..4 {
                rv += wx[i] * row[i];
                rd += dx[i] * row[i];
            }
            val += wy[j] * rv;
            gx += wy[j] * rd;
            gy += dy[j] * rv;
        }
        (val, gx, gy)
    }

    #[inline]
    fn bilinear_eval(&self, x: f64, y: f64) -> (f64, f64, f64) {
        let x0 = (x.floor() as usize).min(self.width - 2);
        let y0 = (y.floor() as usize).min(self.height - 2);
        let tx = x - x0 as f64;
        let ty = y - y0 as f64;
        let i = y0 * self.stride + x0;
        let (a, b) = (self.coef[i], self.coef[i + 1]);
        let (c, d) = (self.coef[i + self.stride], self.coef[i + self.stride + 1]);
        let top = a + (b - a) * tx;
        let bot = c + (d - c) * tx;
        let val = top + (bot - top) * ty;
        let gx = (b - a) * (1.0 - ty) + (d - c) * ty;
        let gy = bot - top;
        (val, gx, gy)
    }
}

/// Cubic B-spline weights and their derivatives for the four taps at offsets
/// -1, 0, 1, 2 relative to `floor(x)`, where `t = x - floor(x)`.
#[inline]
fn bspline_weights(t: f64) -> ([f64; 4], [f64; 4]) {
    let s = 1.0 - t;
    let t2 = t * t;
    let t3 = t2 * t;
    let s2 = s * s;
    let w = [s2 * s / 6.0, 2.0 / 3.0 - t2 + 0.5 * t3, 2.0 / 3.0 - s2 + 0.5 * s2 * s, t3 / 6.0];
    let d = [-0.5 * s2, -2.0 * t + 1.5 * t2, 2.0 * s - 1.5 * s2, 0.5 * t2];
    (w, d)
}

/// Point-symmetric extension about both end samples, applied repeatedly when
/// the pad is wider than the signal so that linear signals stay linear.
fn point_symmetric(v: &[f64], i: isize) -> f64 {
    let n = v.len() as isize;
    if n == 1 {
        v[0]
    } else if i < 0 {
        2.0 * v[0] - point_symmetric(v, -i)
    } else if i >= n {
        2.0 * v[n as usize - 1] - point_symmetric(v, 2 * (n - 1) - i)
    } else {
        v[i as usize]
    }
}

fn spline_coefficients(img: &GrayImage) -> Vec<f64> {
    let (w, h) = (img.width(), img.height());
    let (pw, ph) = (w + 2 * SPLINE_PAD, h + 2 * SPLINE_PAD);
    // Pad rows horizontally.
    let mut rows = vec![0.0; h * pw];
    for y in 0..h {
        let src = &img.data()[y * w..(y + 1) * w];
        let dst = &mut rows[y * pw..(y + 1) * pw];
        for (k, d) in dst.iter_mut().enumerate() {
            *d = point_symmetric(src, k as isize - SPLINE_PAD as isize);
        }
        prefilter(dst);
    }
    // Pad columns vertically and filter them.
    let mut coef = vec![0.0; pw * ph];
    let mut col = vec![0.0; h];
    let mut line = vec![0.0; ph];
    for x in 0..pw {
        for y in 0..h {
            col[y] = rows[y * pw + x];
        }
        for (k, d) in line.iter_mut().enumerate() {
            *d = point_symmetric(&col, k as isize - SPLINE_PAD as isize);
        }
        prefilter(&mut line);
        for y in 0..ph {
            coef[y * pw + x] = line[y];
        }
    }
    coef
}

/// In-place conversion of samples into cubic B-spline coefficients with
/// mirror boundary conditions.
pub(crate) fn prefilter(c: &mut [f64]) {
    let n = c.len();
    if n == 1 {
        return;
    }
    let z = POLE;
    let lambda = (1.0 - z) * (1.0 - 1.0 / z);
    for v in c.iter_mut() {
        *v *= lambda;
    }
    // Exact causal initialization for a mirror-symmetric signal.
    let mut zn = z;
    let iz = 1.0 / z;
    let mut z2n = z.powi(n as i32 - 1);
    let mut sum = c[0] + z2n * c[n - 1];
    z2n = z2n * z2n * iz;
    for v in c.iter().take(n - 1).skip(1) {
        sum += (zn + z2n) * v;
        zn *= z;
        z2n *= iz;
    }
    c[0] = sum / (1.0 - zn * zn);
    for k in 1..n {
        c[k] += z * c[k - 1];
    }
    c[n - 1] = (z / (z * z - 1.0)) * (z * c[n - 2] + c[n - 1]);
    for k in (0..n - 1).rev() {
        c[k] = z * (c[k + 1] - c[k]);
    }
}
