//! Ground-truth benchmark generation: speckle patterns, rotation
//! displacement fields, inverse-mapped rendering of deformed frames and the
//! seeding/incremental comparison experiment.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{DicError, Result};
use crate::image::{mean_intensity_gradient, GrayImage};
use crate::interp::{InterpKind, Interpolant};
use crate::rgdic::{
    analyze_sequence_tolerant, mae_report, AnalysisConfig, RoiGrid, SeedSpec, UpdatePolicy, DEFAULT_SEARCH_RADIUS,
};

/// Rigid rotation by `alpha_deg` (counterclockwise positive) about the point
/// `(x0, 0)` on the top image edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationField {
    pub x0: f64,
    pub alpha_deg: f64,
}

impl RotationField {
    pub fn new(x0: f64, alpha_deg: f64) -> Result<Self> {
        if !alpha_deg.is_finite() || !x0.is_finite() {
            return Err(DicError::InvalidArgument("rotation parameters must be finite".into()));
        }
        Ok(Self { x0, alpha_deg })
    }

    /// Displacement `(u_x, u_y)` of the point `(x, y)`.
    pub fn eval(&self, x: f64, y: f64) -> Result<(f64, f64)> {
        eval_rotation(self, x, y)
    }

    /// Position that maps onto `(x, y)` under the rotation.
    pub fn inverse(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.alpha_deg.to_radians().sin_cos();
        let dx = x - self.x0;
        (self.x0 + dx * c - y * s, dx * s + y * c)
    }
}

/// `u_x = sin(α + atan((x−x0)/y))·r + x0 − x`,
/// `u_y = cos(α + atan((x−x0)/y))·r − y`, with `r = |(x−x0, y)|`.
pub fn eval_rotation(field: &RotationField, x: f64, y: f64) -> Result<(f64, f64)> {
    let dx = x - field.x0;
    if y == 0.0 {
        return if dx == 0.0 { Ok((0.0, 0.0)) } else { Err(DicError::UndefinedAngle) };
    }
    if y < 0.0 {
        return Err(DicError::InvalidArgument(format!("rotation field needs y > 0, got {y}")));
    }
    let theta = field.alpha_deg.to_radians() + (dx / y).atan();
    let r = dx.hypot(y);
    Ok((theta.sin() * r + field.x0 - x, theta.cos() * r - y))
}

/// A displacement field that can be rendered by inverse mapping.
pub trait Deformation {
    /// Displacement of the reference point `(x, y)`, if defined there.
    fn displacement(&self, x: f64, y: f64) -> Option<(f64, f64)>;
    /// Reference position of the material seen at deformed pixel `(x, y)`,
    /// or `None` where the deformed image shows no material.
    fn source_of(&self, x: f64, y: f64) -> Option<(f64, f64)>;
}

impl Deformation for RotationField {
    fn displacement(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        self.eval(x, y).ok()
    }

    fn source_of(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        Some(self.inverse(x, y))
    }
}

/// The part of the image right of `x = x0` rotates about `(x0, 0)` while the
/// left part stays fixed, opening a wedge-shaped gap along `x = x0` that
/// grows toward the bottom edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HingedRotation {
    pub rotation: RotationField,
}

impl Deformation for HingedRotation {
    fn displacement(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        if x < self.rotation.x0 {
            Some((0.0, 0.0))
        } else {
            self.rotation.eval(x, y).ok()
        }
    }

    fn source_of(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let s = self.rotation.inverse(x, y);
        if s.0 >= self.rotation.x0 {
            Some(s)
        } else if x < self.rotation.x0 {
            Some((x, y))
        } else {
            None
        }
    }
}

/// Random Gaussian-blob speckle pattern description.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeckleSpec {
    pub width: usize,
    pub height: usize,
    pub count: usize,
    /// Gaussian `1/e` radius of a speckle (pixels).
    pub radius_mean: f64,
    pub radius_spread: f64,
    /// Paint background intensity in `[0, 1]`.
    pub background: f64,
    /// Speckle intensity in `[0, 1]`.
    pub foreground: f64,
    pub seed: u64,
    /// Minimum acceptable mean intensity gradient (8-bit code values).
    pub mig_floor: f64,
    pub max_attempts: usize,
}

impl Default for SpeckleSpec {
    fn default() -> Self {
        Self {
            width: 1024,
            height: 1024,
            count: 8000,
            radius_mean: 3.0,
            radius_spread: 0.75,
            background: 0.95,
            foreground: 0.02,
            seed: 1,
            mig_floor: 20.0,
            max_attempts: 20,
        }
    }
}

/// A generated pattern with its quality score.
#[derive(Debug, Clone)]
pub struct Speckle {
    pub image: GrayImage,
    pub mig: f64,
    /// RNG seed that produced the accepted pattern.
    pub seed: u64,
}

/// Peak ink density of a blob; values above 1 give each speckle a saturated
/// core and a sharper rim than a plain Gaussian.
const INK: f64 = 2.0;

fn render_speckle(spec: &SpeckleSpec, seed: u64) -> Result<GrayImage> {
    let (w, h) = (spec.width, spec.height);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radius = Normal::new(spec.radius_mean, spec.radius_spread.max(0.0))
        .map_err(|e| DicError::InvalidArgument(e.to_string()))?;
    // Transmission of the paint layer: 1 = bare background.
    let mut trans = vec![1.0f64; w * h];
    for _ in 0..spec.count {
        let cx = rng.random::<f64>() * w as f64;
        let cy = rng.random::<f64>() * h as f64;
        let r = radius.sample(&mut rng).max(0.5);
        let reach = 3.0 * r;
        let x_lo = (cx - reach).floor().max(0.0) as usize;
        let x_hi = ((cx + reach).ceil() as usize).min(w - 1);
        let y_lo = (cy - reach).floor().max(0.0) as usize;
        let y_hi = ((cy + reach).ceil() as usize).min(h - 1);
        let inv = 1.0 / (r * r);
        for y in y_lo..=y_hi {
            let dy = y as f64 - cy;
            for x in x_lo..=x_hi {
                let dx = x as f64 - cx;
                let cover = (INK * (-(dx * dx + dy * dy) * inv).exp()).min(1.0);
                trans[y * w + x] *= 1.0 - cover;
            }
        }
    }
    let (bg, fg) = (spec.background, spec.foreground);
    let data = trans.into_iter().map(|t| fg + (bg - fg) * t).collect();
    Ok(GrayImage::new(w, h, data)?.quantized(255.0))
}

/// Renders a speckle pattern as an 8-bit image, drawing new RNG seeds until
/// the mean intensity gradient reaches `mig_floor`. An empty pattern
/// (`count == 0`) is returned as is.
pub fn generate_speckle(spec: &SpeckleSpec) -> Result<Speckle> {
    if spec.width < GrayImage::MIN_DIM || spec.height < GrayImage::MIN_DIM {
        return Err(DicError::InvalidArgument("speckle image too small".into()));
    }
    if !(0.0..=1.0).contains(&spec.background) || !(0.0..=1.0).contains(&spec.foreground) {
        return Err(DicError::InvalidArgument("intensity levels must be in [0, 1]".into()));
    }
    let mut best = 0.0f64;
    for attempt in 0..spec.max_attempts.max(1) {
        let seed = spec.seed.wrapping_add(attempt as u64);
        let image = render_speckle(spec, seed)?;
        let mig = mean_intensity_gradient(&image);
        if spec.count == 0 || mig >= spec.mig_floor {
            return Ok(Speckle { image, mig, seed });
        }
        best = best.max(mig);
    }
    Err(DicError::SpeckleQuality { floor: spec.mig_floor, attempts: spec.max_attempts.max(1), best })
}

/// Inverse-mapped rendering: each deformed pixel samples the reference at
/// its source position with bicubic interpolation; pixels without material
/// or whose source falls outside the reference get `background`.
pub fn render_deformed(reference: &GrayImage, field: &dyn Deformation, background: f64) -> Result<GrayImage> {
    let it = Interpolant::new(reference, InterpKind::BicubicSpline)?;
    let (w, h) = (reference.width(), reference.height());
    GrayImage::from_fn(w, h, |x, y| match field.source_of(x as f64, y as f64) {
        Some((sx, sy))
            if sx.fract() == 0.0
                && sy.fract() == 0.0
                && sx >= 0.0
                && sy >= 0.0
                && (sx as usize) < w
                && (sy as usize) < h =>
        {
            reference.get(sx as usize, sy as usize)
        }
        Some((sx, sy)) if it.in_domain(sx, sy) => it.value_grad_unchecked(sx, sy).0,
        _ => background,
    })
}

/// Seeding/updating strategy compared by the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BenchmarkMode {
    OneSeed,
    MultiSeed,
    IncrementalMultiSeed,
}

impl BenchmarkMode {
    pub const ALL: [BenchmarkMode; 3] =
        [BenchmarkMode::OneSeed, BenchmarkMode::MultiSeed, BenchmarkMode::IncrementalMultiSeed];

    pub fn name(self) -> &'static str {
        match self {
            BenchmarkMode::OneSeed => "one-seed",
            BenchmarkMode::MultiSeed => "multi-seed",
            BenchmarkMode::IncrementalMultiSeed => "incremental-multi-seed",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| DicError::InvalidArgument(format!("unknown benchmark mode '{s}'")))
    }
}

/// Rotation benchmark parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSpec {
    pub speckle: SpeckleSpec,
    pub frames: usize,
    pub alpha_max_deg: f64,
    pub roi_width: usize,
    pub roi_height: usize,
    pub step: usize,
    pub analysis: AnalysisConfig,
    /// Reference update interval of the incremental mode.
    pub update_every: usize,
    pub search_radius: usize,
    /// Quantize rendered frames to 8 bits.
    pub quantize: bool,
    /// Rotation center abscissa; by default midway between the two
    /// correlation-point columns nearest the image center, so that no point
    /// sits exactly on the discontinuity.
    pub hinge_x: Option<f64>,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            speckle: SpeckleSpec::default(),
            frames: 50,
            alpha_max_deg: 15.0,
            roi_width: 640,
            roi_height: 824,
            step: 8,
            analysis: AnalysisConfig::default(),
            update_every: 10,
            search_radius: DEFAULT_SEARCH_RADIUS,
            quantize: true,
            hinge_x: None,
        }
    }
}

/// One row of the benchmark table.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRow {
    pub mode: BenchmarkMode,
    pub frame: usize,
    pub alpha_deg: f64,
    /// Over valid points; NaN when none is valid.
    pub mae_x: f64,
    pub mae_y: f64,
    pub strict_mae_x: f64,
    pub strict_mae_y: f64,
    pub invalid_count: usize,
    pub point_count: usize,
}

/// Rendered frames and ground truth of a benchmark.
pub struct BenchmarkData {
    pub speckle: Speckle,
    /// Frame 0 is the reference.
    pub frames: Vec<GrayImage>,
    pub fields: Vec<HingedRotation>,
    pub grid: RoiGrid,
}

impl BenchmarkSpec {
    pub fn alpha(&self, frame: usize) -> f64 {
        if self.frames == 0 {
            0.0
        } else {
            self.alpha_max_deg * frame as f64 / self.frames as f64
        }
    }

    pub fn hinge_x(&self, grid: &RoiGrid) -> f64 {
        self.hinge_x.unwrap_or_else(|| {
            let center = self.speckle.width as f64 / 2.0;
            let k = ((center - grid.origin_x as f64) / grid.step as f64).floor().max(0.0);
            grid.origin_x as f64 + (k + 0.5) * grid.step as f64
        })
    }

    /// Seed pixels: one a quarter of the ROI width in from each side, an
    /// eighth of the ROI height below its top edge.
    pub fn seed_pixels(&self, grid: &RoiGrid) -> [(f64, f64); 2] {
        let y = (grid.origin_y + grid.height / 8) as f64;
        [((grid.origin_x + grid.width / 4) as f64, y), ((grid.origin_x + 3 * grid.width / 4) as f64, y)]
    }

    pub fn grid(&self) -> Result<RoiGrid> {
        RoiGrid::centered(self.speckle.width, self.speckle.height, self.roi_width, self.roi_height, self.step)
    }

    /// Generates the reference pattern and renders every deformed frame.
    pub fn render(&self) -> Result<BenchmarkData> {
        if self.frames == 0 {
            return Err(DicError::InvalidArgument("benchmark needs at least one frame".into()));
        }
        let speckle = generate_speckle(&self.speckle)?;
        let grid = self.grid()?;
        grid.validate_for(self.speckle.width, self.speckle.height, self.analysis.half_width)?;
        let bg = self.speckle.background;
        let mut frames = vec![speckle.image.clone()];
        let mut fields = vec![];
        for k in 1..=self.frames {
            let field = HingedRotation { rotation: RotationField::new(self.hinge_x(&grid), self.alpha(k))? };
            let img = render_deformed(&speckle.image, &field, bg)?;
            frames.push(if self.quantize { img.quantized(255.0) } else { img });
            fields.push(field);
        }
        Ok(BenchmarkData { speckle, frames, fields, grid })
    }

    /// Runs the requested modes over rendered data.
    pub fn evaluate(&self, data: &BenchmarkData, modes: &[BenchmarkMode]) -> Result<Vec<BenchmarkRow>> {
        let grid = data.grid;
        let seeds_px = self.seed_pixels(&grid);
        let mut rows = Vec::new();
        for &mode in modes {
            let (pixels, incremental): (&[(f64, f64)], bool) = match mode {
                BenchmarkMode::OneSeed => (&seeds_px[..1], false),
                BenchmarkMode::MultiSeed => (&seeds_px[..], false),
                BenchmarkMode::IncrementalMultiSeed => (&seeds_px[..], true),
            };
            let seeds = SeedSpec::from_pixels(&grid, pixels, self.search_radius)?;
            let mut cfg = self.analysis.clone();
            cfg.update = UpdatePolicy::Every(self.update_every);
            let out = analyze_sequence_tolerant(&data.frames, &grid, &seeds, &cfg, incremental)?;
            for (field, truth) in out.fields.iter().zip(&data.fields) {
                let rep = mae_report(field, |x, y| truth.displacement(x, y).unwrap_or((f64::NAN, f64::NAN)));
                rows.push(BenchmarkRow {
                    mode,
                    frame: field.frame(),
                    alpha_deg: self.alpha(field.frame()),
                    mae_x: rep.mae_x.unwrap_or(f64::NAN),
                    mae_y: rep.mae_y.unwrap_or(f64::NAN),
                    strict_mae_x: rep.strict_mae_x,
                    strict_mae_y: rep.strict_mae_y,
                    invalid_count: rep.invalid,
                    point_count: grid.len(),
                });
            }
        }
        Ok(rows)
    }
}

/// Generates the pattern, renders the frames and evaluates every mode.
pub fn run_benchmark(spec: &BenchmarkSpec, modes: &[BenchmarkMode]) -> Result<Vec<BenchmarkRow>> {
    let data = spec.render()?;
    spec.evaluate(&data, modes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rotation_is_identity() {
        let f = RotationField::new(512.0, 0.0).unwrap();
        for &(x, y) in &[(0.0, 1.0), (700.0, 300.0), (512.0, 900.0)] {
            let (u, v) = f.eval(x, y).unwrap();
            assert!(u.abs() < 1e-12 && v.abs() < 1e-12);
        }
    }

    #[test]
    fn quarter_turn_below_center() {
        let f = RotationField::new(40.0, 90.0).unwrap();
        let (u, v) = f.eval(40.0, 100.0).unwrap();
        assert!((u - 100.0).abs() < 1e-12 && (v + 100.0).abs() < 1e-12);
    }

    #[test]
    fn singular_on_top_edge() {
        let f = RotationField::new(10.0, 3.0).unwrap();
        assert_eq!(f.eval(10.0, 0.0).unwrap(), (0.0, 0.0));
        assert!(matches!(f.eval(11.0, 0.0), Err(DicError::UndefinedAngle)));
    }

    #[test]
    fn inverse_undoes_rotation() {
        let f = RotationField::new(100.0, 7.5).unwrap();
        let (x, y) = (160.0, 80.0);
        let (u, v) = f.eval(x, y).unwrap();
        let (sx, sy) = f.inverse(x + u, y + v);
        assert!((sx - x).abs() < 1e-9 && (sy - y).abs() < 1e-9);
    }

    #[test]
    fn hinge_keeps_left_side_still() {
        let h = HingedRotation { rotation: RotationField::new(50.0, 10.0).unwrap() };
        assert_eq!(h.displacement(20.0, 40.0), Some((0.0, 0.0)));
        assert_eq!(h.source_of(20.0, 40.0), Some((20.0, 40.0)));
        // Right next to the hinge line, deep down, is the opened gap.
        assert_eq!(h.source_of(51.0, 90.0), None);
        let (u, _) = h.displacement(60.0, 90.0).unwrap();
        assert!(u > 0.0);
    }

    #[test]
    fn empty_pattern_is_constant() {
        let spec = SpeckleSpec { width: 32, height: 32, count: 0, ..SpeckleSpec::default() };
        let s = generate_speckle(&spec).unwrap();
        assert_eq!(s.mig, 0.0);
        assert!(s.image.data().iter().all(|v| *v == s.image.data()[0]));
    }

    #[test]
    fn same_seed_same_pattern() {
        let spec = SpeckleSpec { width: 96, height: 80, count: 300, mig_floor: 0.0, ..SpeckleSpec::default() };
        let a = generate_speckle(&spec).unwrap();
        let b = generate_speckle(&spec).unwrap();
        assert_eq!(a.image, b.image);
        let c = generate_speckle(&SpeckleSpec { seed: 2, ..spec }).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn default_pattern_meets_floor() {
        let s = generate_speckle(&SpeckleSpec::default()).unwrap();
        assert!(s.mig >= 20.0, "{}", s.mig);
        assert_eq!((s.image.width(), s.image.height()), (1024, 1024));
    }

    #[test]
    fn unreachable_floor_is_error() {
        let spec =
            SpeckleSpec { width: 40, height: 40, count: 2, mig_floor: 1e6, max_attempts: 3, ..SpeckleSpec::default() };
        assert!(matches!(generate_speckle(&spec), Err(DicError::SpeckleQuality { attempts: 3, .. })));
    }

    #[test]
    fn identity_render_is_lossless() {
        let spec = SpeckleSpec { width: 64, height: 64, count: 150, mig_floor: 0.0, ..SpeckleSpec::default() };
        let s = generate_speckle(&spec).unwrap();
        let f = RotationField::new(32.0, 0.0).unwrap();
        let out = render_deformed(&s.image, &f, 0.5).unwrap();
        assert_eq!(out, s.image);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in BenchmarkMode::ALL {
            assert_eq!(BenchmarkMode::parse(m.name()).unwrap(), m);
        }
        assert!(BenchmarkMode::parse("two-seed").is_err());
    }

    #[test]
    fn default_hinge_between_columns() {
        let spec = BenchmarkSpec::default();
        let g = spec.grid().unwrap();
        assert_eq!((g.origin_x, g.origin_y), (192, 100));
        assert_eq!(spec.hinge_x(&g), 516.0);
        assert_eq!(spec.seed_pixels(&g), [(352.0, 203.0), (672.0, 203.0)]);
    }

    #[test]
    fn fifty_frames_in_point_three_degree_steps() {
        let spec = BenchmarkSpec::default();
        let alphas: Vec<f64> = (1..=spec.frames).map(|k| spec.alpha(k)).collect();
        assert_eq!(alphas.len(), 50);
        assert!((alphas[0] - 0.3).abs() < 1e-12);
        assert!((alphas[1] - 0.6).abs() < 1e-12);
        assert!((alphas[49] - 15.0).abs() < 1e-12);
    }
}
