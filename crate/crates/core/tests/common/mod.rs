#![allow(dead_code)]

use dic_core::image::GrayImage;
use dic_core::synthetic::{generate_speckle, render_deformed, Deformation, SpeckleSpec};

/// Fine, dense speckle that textures subsets down to 11 px, without a
/// quality floor.
pub fn speckle(w: usize, h: usize, seed: u64) -> GrayImage {
    let spec = SpeckleSpec {
        width: w,
        height: h,
        count: w * h / 12,
        radius_mean: 1.5,
        radius_spread: 0.4,
        seed,
        mig_floor: 0.0,
        ..SpeckleSpec::default()
    };
    generate_speckle(&spec).unwrap().image
}

/// Vertical crack along `x = xc`: the left flank moves by `left`, the right
/// flank by `right` (pixels, horizontal), scaled by a ramp that is 0 above
/// `tip_y` and reaches 1 at `tip_y + ramp`.
#[derive(Debug, Clone, Copy)]
pub struct SplitShift {
    pub xc: f64,
    pub left: f64,
    pub right: f64,
    pub tip_y: f64,
    pub ramp: f64,
}

impl SplitShift {
    pub fn rigid(xc: f64, left: f64, right: f64) -> Self {
        Self { xc, left, right, tip_y: f64::NEG_INFINITY, ramp: 1.0 }
    }

    fn factor(&self, y: f64) -> f64 {
        ((y - self.tip_y) / self.ramp).clamp(0.0, 1.0)
    }
}

impl Deformation for SplitShift {
    fn displacement(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let f = self.factor(y);
        Some((if x < self.xc { self.left * f } else { self.right * f }, 0.0))
    }

    fn source_of(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let f = self.factor(y);
        let sl = x - self.left * f;
        let sr = x - self.right * f;
        if sl < self.xc {
            Some((sl, y))
        } else if sr >= self.xc {
            Some((sr, y))
        } else {
            None
        }
    }
}

pub fn deform(img: &GrayImage, d: &dyn Deformation) -> GrayImage {
    render_deformed(img, d, 0.95).unwrap().quantized(255.0)
}
