//! Grayscale images, Prewitt gradients and the mean-intensity-gradient
//! speckle quality score.

use std::path::Path;

use image::{DynamicImage, ImageReader};

use crate::error::{DicError, Result};

/// Row-major grayscale image with intensities normalized to `[0, 1]`.
///
/// `code_max` remembers the bit-depth maximum of the source (255 for 8-bit,
/// 65535 for 16-bit) so that scores can be reported in native code values.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
    scale: Option<f64>,
    code_max: f64,
}

impl GrayImage {
    pub const MIN_DIM: usize = 3;

    /// Builds an image from normalized intensities. Values must be finite and
    /// inside `[0, 1]`.
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width < Self::MIN_DIM || height < Self::MIN_DIM {
            return Err(DicError::InvalidImage(format!("{width}x{height} is smaller than the 3x3 minimum")));
        }
        if data.len() != width * height {
            return Err(DicError::InvalidImage(format!(
                "buffer holds {} values, expected {}",
                data.len(),
                width * height
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(DicError::InvalidImage(format!("intensity {bad} outside [0, 1]")));
        }
        Ok(Self { width, height, data, scale: None, code_max: 255.0 })
    }

    /// Builds an image by evaluating `f(x, y)` at every pixel; the result is
    /// clamped into `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let v = f(x, y);
                data.push(if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
            }
        }
        Self::new(width, height, data)
    }

    /// Builds an image from raw integer code values of the given bit depth.
    pub fn from_codes(width: usize, height: usize, codes: &[u16], code_max: u16) -> Result<Self> {
        if code_max == 0 {
            return Err(DicError::InvalidImage("code maximum must be positive".into()));
        }
        let m = f64::from(code_max);
        let data = codes.iter().map(|&c| (f64::from(c) / m).min(1.0)).collect();
        Ok(Self::new(width, height, data)?.with_code_max(m))
    }

    pub fn with_scale(mut self, scale: Option<f64>) -> Self {
        self.scale = scale;
        self
    }

    pub fn with_code_max(mut self, code_max: f64) -> Self {
        self.code_max = code_max;
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Physical size of one pixel in mm, when known.
    pub fn scale(&self) -> Option<f64> {
        self.scale
    }

    pub fn code_max(&self) -> f64 {
        self.code_max
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Rounds every intensity to the nearest code value of `code_max`.
    pub fn quantized(&self, code_max: f64) -> Self {
        let data = self.data.iter().map(|v| (v * code_max).round() / code_max).collect();
        Self { data, code_max, ..self.clone() }
    }

    /// Writes an 8-bit grayscale PNG.
    pub fn save_png8(&self, path: impl AsRef<Path>) -> Result<()> {
        let buf: Vec<u8> = self.data.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, buf)
            .ok_or_else(|| DicError::InvalidImage("buffer size mismatch".into()))?;
        img.save(path.as_ref())
            .map_err(|e| DicError::ImageRead { path: path.as_ref().to_path_buf(), reason: e.to_string() })
    }
}

fn luminance(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Loads a PNG or TIFF file. 8/16-bit gray is taken as is, RGB(A) is
/// converted by luminance, and intensities are divided by the bit-depth
/// maximum.
pub fn load_image(path: impl AsRef<Path>, scale: Option<f64>) -> Result<GrayImage> {
    let path = path.as_ref();
    let read_err = |reason: String| DicError::ImageRead { path: path.to_path_buf(), reason };
    let dynimg = ImageReader::open(path)
        .map_err(|e| read_err(e.to_string()))?
        .with_guessed_format()
        .map_err(|e| read_err(e.to_string()))?
        .decode()
        .map_err(|e| read_err(e.to_string()))?;
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    if w == 0 || h == 0 {
        return Err(DicError::InvalidImage("zero-sized image".into()));
    }
    let (data, code_max): (Vec<f64>, f64) = match dynimg {
        DynamicImage::ImageLuma8(b) => (b.pixels().map(|p| f64::from(p.0[0]) / 255.0).collect(), 255.0),
        DynamicImage::ImageLumaA8(b) => (b.pixels().map(|p| f64::from(p.0[0]) / 255.0).collect(), 255.0),
        DynamicImage::ImageLuma16(b) => (b.pixels().map(|p| f64::from(p.0[0]) / 65535.0).collect(), 65535.0),
        DynamicImage::ImageLumaA16(b) => (b.pixels().map(|p| f64::from(p.0[0]) / 65535.0).collect(), 65535.0),
        DynamicImage::ImageRgb8(b) => {
            (b.pixels().map(|p| luminance(p.0[0].into(), p.0[1].into(), p.0[2].into()) / 255.0).collect(), 255.0)
        }
        DynamicImage::ImageRgba8(b) => {
            (b.pixels().map(|p| luminance(p.0[0].into(), p.0[1].into(), p.0[2].into()) / 255.0).collect(), 255.0)
        }
        DynamicImage::ImageRgb16(b) => {
            (b.pixels().map(|p| luminance(p.0[0].into(), p.0[1].into(), p.0[2].into()) / 65535.0).collect(), 65535.0)
        }
        DynamicImage::ImageRgba16(b) => {
            (b.pixels().map(|p| luminance(p.0[0].into(), p.0[1].into(), p.0[2].into()) / 65535.0).collect(), 65535.0)
        }
        other => {
            return Err(DicError::UnsupportedFormat(format!("{:?} pixels are not 8/16-bit gray or RGB", other.color())))
        }
    };
    let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Ok(GrayImage::new(w, h, data)?.with_code_max(code_max).with_scale(scale))
}

/// Per-pixel intensity derivatives, row-major like the image.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub width: usize,
    pub height: usize,
    pub fx: Vec<f64>,
    pub fy: Vec<f64>,
}

/// Prewitt derivatives normalized by 6, so a unit-slope ramp has derivative
/// 1. Border pixels copy the value of the nearest interior pixel.
pub fn gradients(img: &GrayImage) -> Gradients {
    let (w, h) = (img.width, img.height);
    let d = &img.data;
    let mut fx = vec![0.0; w * h];
    let mut fy = vec![0.0; w * h];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let up = (y - 1) * w;
            let mid = y * w;
            let dn = (y + 1) * w;
            let gx =
                (d[up + x + 1] - d[up + x - 1]) + (d[mid + x + 1] - d[mid + x - 1]) + (d[dn + x + 1] - d[dn + x - 1]);
            let gy = (d[dn + x - 1] - d[up + x - 1]) + (d[dn + x] - d[up + x]) + (d[dn + x + 1] - d[up + x + 1]);
            fx[mid + x] = gx / 6.0;
            fy[mid + x] = gy / 6.0;
        }
    }
    for y in 0..h {
        for x in 0..w {
            if x == 0 || y == 0 || x == w - 1 || y == h - 1 {
                let src = y.clamp(1, h - 2) * w + x.clamp(1, w - 2);
                fx[y * w + x] = fx[src];
                fy[y * w + x] = fy[src];
            }
        }
    }
    Gradients { width: w, height: h, fx, fy }
}

/// Mean intensity gradient of the whole image, in native code values.
pub fn mean_intensity_gradient(img: &GrayImage) -> f64 {
    let g = gradients(img);
    let sum: f64 = g.fx.iter().zip(&g.fy).map(|(a, b)| a.hypot(*b)).sum();
    img.code_max * sum / (img.width * img.height) as f64
}
