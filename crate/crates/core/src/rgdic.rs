//! Full-field analysis: reliability-guided flood fill from one or more
//! seeds, and incremental reference updating for long sequences.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;

use crate::correlation::{
    initial_guess, refine_against, NrSettings, ReferenceSubset, ShapeOrder, SubsetSpec, WarpVector,
};
use crate::error::{DicError, Result};
use crate::image::GrayImage;
use crate::interp::{InterpKind, Interpolant};

/// Evenly spaced correlation points over a rectangular region of interest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoiGrid {
    pub origin_x: usize,
    pub origin_y: usize,
    pub width: usize,
    pub height: usize,
    pub step: usize,
}

impl RoiGrid {
    pub fn new(origin_x: usize, origin_y: usize, width: usize, height: usize, step: usize) -> Result<Self> {
        if step == 0 {
            return Err(DicError::InvalidGrid("step must be at least 1".into()));
        }
        if width < step || height < step {
            return Err(DicError::InvalidGrid(format!("extent {width}x{height} holds no point at step {step}")));
        }
        Ok(Self { origin_x, origin_y, width, height, step })
    }

    /// A `width x height` region centered in a `image_w x image_h` image.
    pub fn centered(image_w: usize, image_h: usize, width: usize, height: usize, step: usize) -> Result<Self> {
        if width > image_w || height > image_h {
            return Err(DicError::InvalidGrid("ROI larger than the image".into()));
        }
        Self::new((image_w - width) / 2, (image_h - height) / 2, width, height, step)
    }

    pub fn nx(&self) -> usize {
        self.width / self.step
    }

    pub fn ny(&self) -> usize {
        self.height / self.step
    }

    pub fn len(&self) -> usize {
        self.nx() * self.ny()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.nx() + col
    }

    #[inline]
    pub fn row_col(&self, index: usize) -> (usize, usize) {
        (index / self.nx(), index % self.nx())
    }

    /// Pixel position of a grid point.
    #[inline]
    pub fn position(&self, row: usize, col: usize) -> (usize, usize) {
        (self.origin_x + col * self.step, self.origin_y + row * self.step)
    }

    /// Nearest grid point to a pixel position, if the position is inside the
    /// ROI.
    pub fn nearest(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fx = (x - self.origin_x as f64) / self.step as f64;
        let fy = (y - self.origin_y as f64) / self.step as f64;
        if fx < -0.5 || fy < -0.5 {
            return None;
        }
        let (c, r) = (fx.round() as usize, fy.round() as usize);
        (c < self.nx() && r < self.ny()).then_some((r, c))
    }

    /// Checks that every subset of half-width `half_width` fits the image.
    pub fn validate_for(&self, image_w: usize, image_h: usize, half_width: usize) -> Result<()> {
        let (x_max, y_max) = self.position(self.ny() - 1, self.nx() - 1);
        let lo = SubsetSpec::new(self.origin_x as f64, self.origin_y as f64, half_width)?;
        let hi = SubsetSpec::new(x_max as f64, y_max as f64, half_width)?;
        if !lo.fits(image_w, image_h) || !hi.fits(image_w, image_h) {
            return Err(DicError::InvalidGrid(format!(
                "subsets of half-width {half_width} around the ROI ({}, {})..({x_max}, {y_max}) leave the {image_w}x{image_h} image",
                self.origin_x, self.origin_y
            )));
        }
        Ok(())
    }
}

/// A seed grid point and the radius of its integer search.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seed {
    pub row: usize,
    pub col: usize,
    pub search_radius: usize,
}

/// Seed points of a run; at least one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedSpec {
    seeds: Vec<Seed>,
}

impl SeedSpec {
    pub fn new(grid: &RoiGrid, seeds: Vec<Seed>) -> Result<Self> {
        if seeds.is_empty() {
            return Err(DicError::InvalidArgument("at least one seed is required".into()));
        }
        for s in &seeds {
            if s.row >= grid.ny() || s.col >= grid.nx() {
                return Err(DicError::InvalidArgument(format!(
                    "seed ({}, {}) is off the {}x{} grid",
                    s.row,
                    s.col,
                    grid.ny(),
                    grid.nx()
                )));
            }
        }
        Ok(Self { seeds })
    }

    /// Seeds snapped to the nearest grid point of pixel positions.
    pub fn from_pixels(grid: &RoiGrid, pixels: &[(f64, f64)], search_radius: usize) -> Result<Self> {
        let seeds = pixels
            .iter()
            .map(|&(x, y)| {
                grid.nearest(x, y)
                    .map(|(row, col)| Seed { row, col, search_radius })
                    .ok_or_else(|| DicError::InvalidArgument(format!("seed ({x}, {y}) lies outside the ROI")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(grid, seeds)
    }

    pub fn seeds(&self) -> &[Seed] {
        &self.seeds
    }
}

/// When to re-base the reference image in an incremental run.
#[derive(Debug, Clone, PartialEq)]
pub enum UpdatePolicy {
    /// Re-base when the mean seed ZNCC drops below `min_seed_zncc` or more
    /// than `max_invalid_fraction` of the grid fails; the frame is then
    /// re-correlated against the previous frame.
    Trigger { min_seed_zncc: f64, max_invalid_fraction: f64 },
    /// Every `k`-th frame becomes the reference after it is analyzed.
    Every(usize),
    /// The listed frames become the reference after they are analyzed.
    AtFrames(Vec<usize>),
}

impl Default for UpdatePolicy {
    fn default() -> Self {
        UpdatePolicy::Trigger { min_seed_zncc: 0.8, max_invalid_fraction: 0.1 }
    }
}

/// How incremental displacements are chained back to frame 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Composition {
    /// Correlation points follow the material: after a reference update each
    /// point is correlated at its displaced position in the new reference, so
    /// the increment is measured exactly where it is added.
    #[default]
    Tracked,
    /// Fixed grid in every reference; the increment is sampled at the
    /// displaced position by bilinear interpolation.
    Interpolated,
    /// Fixed grid; increments added at the same grid point.
    Literal,
}

/// Parameters of a correlation run.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisConfig {
    pub half_width: usize,
    pub order: ShapeOrder,
    pub interp: InterpKind,
    pub nr: NrSettings,
    /// Points are valid iff converged and ZNCC at least this value.
    pub acceptance_zncc: f64,
    pub update: UpdatePolicy,
    pub composition: Composition,
    /// Worker threads for independent frames; 1 runs everything in order.
    pub workers: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            half_width: 11,
            order: ShapeOrder::First,
            interp: InterpKind::BicubicSpline,
            nr: NrSettings::default(),
            acceptance_zncc: 0.7,
            update: UpdatePolicy::default(),
            composition: Composition::default(),
            workers: 1,
        }
    }
}

/// Default integer search radius for seeds, in pixels.
pub const DEFAULT_SEARCH_RADIUS: usize = 50;

/// How a valid point got its initial guess.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Seed(usize),
    /// Grid index of the already-valid neighbor whose warp was used.
    Neighbor(usize),
}

/// Displacements on a grid, expressed against `reference_frame`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    grid: RoiGrid,
    frame: usize,
    reference_frame: usize,
    time_s: Option<f64>,
    scale: Option<f64>,
    u: Vec<f64>,
    v: Vec<f64>,
    zncc: Vec<f64>,
    valid: Vec<bool>,
    provenance: Vec<Option<Provenance>>,
}

impl DisplacementField {
    /// A field with every point invalid.
    pub fn empty(grid: RoiGrid, frame: usize, reference_frame: usize) -> Self {
        let n = grid.len();
        Self {
            grid,
            frame,
            reference_frame,
            time_s: None,
            scale: None,
            u: vec![f64::NAN; n],
            v: vec![f64::NAN; n],
            zncc: vec![f64::NAN; n],
            valid: vec![false; n],
            provenance: vec![None; n],
        }
    }

    /// Builds a field from optional per-point displacements and correlation
    /// values (row-major).
    pub fn from_values(
        grid: RoiGrid,
        frame: usize,
        reference_frame: usize,
        values: &[Option<(f64, f64)>],
        zncc: &[f64],
    ) -> Result<Self> {
        if values.len() != grid.len() || zncc.len() != grid.len() {
            return Err(DicError::InvalidArgument(format!("expected {} values for the grid", grid.len())));
        }
        let mut f = Self::empty(grid, frame, reference_frame);
        for (i, d) in values.iter().enumerate() {
            f.zncc[i] = zncc[i];
            if let Some((u, v)) = *d {
                f.set_valid(i, u, v, zncc[i], None);
            }
        }
        Ok(f)
    }

    /// Builds a fully valid field from a displacement function of the pixel
    /// position.
    pub fn from_fn(grid: RoiGrid, frame: usize, mut f: impl FnMut(f64, f64) -> (f64, f64)) -> Self {
        let mut out = Self::empty(grid, frame, 0);
        for i in 0..grid.len() {
            let (r, c) = grid.row_col(i);
            let (x, y) = grid.position(r, c);
            let (u, v) = f(x as f64, y as f64);
            out.set_valid(i, u, v, 1.0, None);
        }
        out
    }

    fn set_valid(&mut self, i: usize, u: f64, v: f64, zncc: f64, prov: Option<Provenance>) {
        self.u[i] = u;
        self.v[i] = v;
        self.zncc[i] = zncc;
        self.valid[i] = true;
        self.provenance[i] = prov;
    }

    fn set_invalid(&mut self, i: usize) {
        self.u[i] = f64::NAN;
        self.v[i] = f64::NAN;
        self.valid[i] = false;
        self.provenance[i] = None;
    }

    pub fn grid(&self) -> &RoiGrid {
        &self.grid
    }

    pub fn frame(&self) -> usize {
        self.frame
    }

    pub fn reference_frame(&self) -> usize {
        self.reference_frame
    }

    pub fn time_s(&self) -> Option<f64> {
        self.time_s
    }

    pub fn with_time(mut self, t: Option<f64>) -> Self {
        self.time_s = t;
        self
    }

    pub fn scale(&self) -> Option<f64> {
        self.scale
    }

    pub fn with_scale(mut self, scale: Option<f64>) -> Self {
        self.scale = scale;
        self
    }

    pub fn with_frame(mut self, frame: usize) -> Self {
        self.frame = frame;
        self
    }

    pub fn nx(&self) -> usize {
        self.grid.nx()
    }

    pub fn ny(&self) -> usize {
        self.grid.ny()
    }

    /// `(u, v)` in pixels, or `None` for invalid points.
    #[inline]
    pub fn get(&self, row: usize, col: usize) -> Option<(f64, f64)> {
        self.get_index(self.grid.index(row, col))
    }

    #[inline]
    pub fn get_index(&self, i: usize) -> Option<(f64, f64)> {
        self.valid[i].then(|| (self.u[i], self.v[i]))
    }

    pub fn zncc(&self, row: usize, col: usize) -> f64 {
        self.zncc[self.grid.index(row, col)]
    }

    pub fn zncc_values(&self) -> &[f64] {
        &self.zncc
    }

    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.valid[self.grid.index(row, col)]
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid
    }

    pub fn provenance(&self, i: usize) -> Option<Provenance> {
        self.provenance[i]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn invalid_count(&self) -> usize {
        self.grid.len() - self.valid_count()
    }

    /// Mean ZNCC over valid points.
    pub fn mean_zncc(&self) -> Option<f64> {
        let n = self.valid_count();
        (n > 0).then(|| self.zncc.iter().zip(&self.valid).filter(|(_, v)| **v).map(|(z, _)| z).sum::<f64>() / n as f64)
    }

    /// Bilinear sample at a pixel position; `None` when outside the grid or
    /// when any of the four surrounding points is invalid.
    pub fn sample(&self, x: f64, y: f64) -> Option<(f64, f64, f64)> {
        let g = &self.grid;
        let fx = (x - g.origin_x as f64) / g.step as f64;
        let fy = (y - g.origin_y as f64) / g.step as f64;
        let (nx, ny) = (g.nx(), g.ny());
        if !(fx >= 0.0 && fy >= 0.0 && fx <= (nx - 1) as f64 && fy <= (ny - 1) as f64) {
            return None;
        }
        let c0 = (fx.floor() as usize).min(nx.saturating_sub(2));
        let r0 = (fy.floor() as usize).min(ny.saturating_sub(2));
        let c1 = (c0 + 1).min(nx - 1);
        let r1 = (r0 + 1).min(ny - 1);
        let tx = fx - c0 as f64;
        let ty = fy - r0 as f64;
        let mut acc = (0.0, 0.0);
        let mut zmin = f64::INFINITY;
        for (r, c, wgt) in
            [(r0, c0, (1.0 - tx) * (1.0 - ty)), (r0, c1, tx * (1.0 - ty)), (r1, c0, (1.0 - tx) * ty), (r1, c1, tx * ty)]
        {
            let i = g.index(r, c);
            if wgt == 0.0 {
                continue;
            }
            let (u, v) = self.get_index(i)?;
            acc.0 += wgt * u;
            acc.1 += wgt * v;
            zmin = zmin.min(self.zncc[i]);
        }
        Some((acc.0, acc.1, zmin))
    }
}

/// Entry of the reliability queue: highest ZNCC first, then lowest
/// `(row, col)`.
#[derive(Debug, Clone, Copy)]
struct QueueEntry {
    zncc: f64,
    index: usize,
    warp: WarpVector,
}

impl PartialEq for QueueEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for QueueEntry {}

impl PartialOrd for QueueEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for QueueEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.zncc.total_cmp(&other.zncc).then_with(|| other.index.cmp(&self.index))
    }
}

/// Push/pop log of the reliability queue.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QueueEvent {
    Push { index: usize, zncc: f64 },
    Pop { index: usize, zncc: f64 },
}

/// Correlation points of one frame analysis: subset centers in the
/// reference image (pixels), keyed by grid index.
struct PointSet<'a> {
    grid: &'a RoiGrid,
    /// `None` for points that cannot be correlated (lost material).
    centers: Vec<Option<(f64, f64)>>,
}

impl<'a> PointSet<'a> {
    fn regular(grid: &'a RoiGrid) -> Self {
        let centers = (0..grid.len())
            .map(|i| {
                let (r, c) = grid.row_col(i);
                let (x, y) = grid.position(r, c);
                Some((x as f64, y as f64))
            })
            .collect();
        Self { grid, centers }
    }

    fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> {
        let (r, c) = self.grid.row_col(i);
        let (nx, ny) = (self.grid.nx(), self.grid.ny());
        let cand = [
            (r > 0).then(|| i - nx),
            (c > 0).then(|| i - 1),
            (c + 1 < nx).then(|| i + 1),
            (r + 1 < ny).then(|| i + nx),
        ];
        cand.into_iter().flatten()
    }
}

struct FrameContext<'a> {
    reference: &'a GrayImage,
    ref_interp: Option<Interpolant>,
    def: &'a GrayImage,
    def_interp: Interpolant,
    cfg: &'a AnalysisConfig,
}

impl<'a> FrameContext<'a> {
    fn new(
        reference: &'a GrayImage,
        def: &'a GrayImage,
        cfg: &'a AnalysisConfig,
        subpixel_centers: bool,
    ) -> Result<Self> {
        let ref_interp = if subpixel_centers { Some(Interpolant::new(reference, cfg.interp)?) } else { None };
        Ok(Self { reference, ref_interp, def, def_interp: Interpolant::new(def, cfg.interp)?, cfg })
    }

    fn reference_subset(&self, center: (f64, f64)) -> Result<ReferenceSubset> {
        let spec = SubsetSpec::new(center.0, center.1, self.cfg.half_width)?;
        match &self.ref_interp {
            Some(it) if center.0.fract() != 0.0 || center.1.fract() != 0.0 => {
                ReferenceSubset::from_interpolant(it, &spec)
            }
            _ => ReferenceSubset::from_image(self.reference, &spec),
        }
    }

    /// Refines one point; `None` when it fails acceptance.
    fn correlate(&self, center: (f64, f64), w0: &WarpVector) -> Option<(WarpVector, f64)> {
        let f = self.reference_subset(center).ok()?;
        let r = refine_against(&f, &self.def_interp, w0, &self.cfg.nr).ok()?;
        (r.converged && r.zncc >= self.cfg.acceptance_zncc).then_some((r.warp, r.zncc))
    }

    fn seed_guess(&self, center: (f64, f64), radius: usize) -> Option<WarpVector> {
        let (rx, ry) = (center.0.round(), center.1.round());
        let spec = SubsetSpec::new(rx, ry, self.cfg.half_width).ok()?;
        let g = initial_guess(self.reference, self.def, &spec, radius).ok()?;
        Some(WarpVector::translation(self.cfg.order, g.u as f64, g.v as f64))
    }
}

/// Result of a flood fill, with the seed correlation values.
struct FloodOutput {
    field: DisplacementField,
    seed_zncc: Vec<Option<f64>>,
    events: Vec<QueueEvent>,
}

fn flood_fill(
    ctx: &FrameContext<'_>,
    points: &PointSet<'_>,
    seeds: &SeedSpec,
    frame: usize,
    reference_frame: usize,
    trace: bool,
) -> FloodOutput {
    let grid = *points.grid;
    let n = grid.len();
    let mut field = DisplacementField::empty(grid, frame, reference_frame);
    // Each point gets one attempt, from whichever front reaches it first.
    // Retrying failed points from later neighbors lets a wrong match on a
    // subset straddling a discontinuity spread along the discontinuity.
    let mut computed = vec![false; n];
    let mut heap = BinaryHeap::new();
    let mut events = Vec::new();
    let mut seed_zncc = Vec::with_capacity(seeds.seeds().len());

    for (k, s) in seeds.seeds().iter().enumerate() {
        let i = grid.index(s.row, s.col);
        if computed[i] {
            seed_zncc.push(field.valid[i].then(|| field.zncc[i]));
            continue;
        }
        computed[i] = true;
        let res = points.centers[i].and_then(|c| {
            let w0 = ctx.seed_guess(c, s.search_radius)?;
            ctx.correlate(c, &w0)
        });
        match res {
            Some((w, z)) => {
                field.set_valid(i, w.u(), w.v(), z, Some(Provenance::Seed(k)));
                heap.push(QueueEntry { zncc: z, index: i, warp: w });
                if trace {
                    events.push(QueueEvent::Push { index: i, zncc: z });
                }
                seed_zncc.push(Some(z));
            }
            None => seed_zncc.push(None),
        }
    }

    while let Some(top) = heap.pop() {
        if trace {
            events.push(QueueEvent::Pop { index: top.index, zncc: top.zncc });
        }
        let Some(c_top) = points.centers[top.index] else { continue };
        for j in points.neighbors(top.index) {
            if computed[j] {
                continue;
            }
            computed[j] = true;
            let Some(c) = points.centers[j] else { continue };
            let w0 = top.warp.recentered(c.0 - c_top.0, c.1 - c_top.1);
            if let Some((w, z)) = ctx.correlate(c, &w0) {
                field.set_valid(j, w.u(), w.v(), z, Some(Provenance::Neighbor(top.index)));
                heap.push(QueueEntry { zncc: z, index: j, warp: w });
                if trace {
                    events.push(QueueEvent::Push { index: j, zncc: z });
                }
            }
        }
    }
    FloodOutput { field, seed_zncc, events }
}

fn check_inputs(reference: &GrayImage, def: &GrayImage, grid: &RoiGrid, cfg: &AnalysisConfig) -> Result<()> {
    if reference.width() != def.width() || reference.height() != def.height() {
        return Err(DicError::InvalidArgument("reference and deformed image sizes differ".into()));
    }
    grid.validate_for(reference.width(), reference.height(), cfg.half_width)
}

/// Correlates one deformed image against a reference over the grid.
///
/// Fails with [`DicError::FrameFailure`] when no seed correlates; otherwise
/// points never reached with acceptable ZNCC are left invalid.
pub fn analyze_frame(
    reference: &GrayImage,
    def: &GrayImage,
    grid: &RoiGrid,
    seeds: &SeedSpec,
    cfg: &AnalysisConfig,
) -> Result<DisplacementField> {
    analyze_frame_traced(reference, def, grid, seeds, cfg).map(|(f, _)| f)
}

/// [`analyze_frame`] that also returns the queue push/pop log.
pub fn analyze_frame_traced(
    reference: &GrayImage,
    def: &GrayImage,
    grid: &RoiGrid,
    seeds: &SeedSpec,
    cfg: &AnalysisConfig,
) -> Result<(DisplacementField, Vec<QueueEvent>)> {
    check_inputs(reference, def, grid, cfg)?;
    let ctx = FrameContext::new(reference, def, cfg, false)?;
    let out = flood_fill(&ctx, &PointSet::regular(grid), seeds, 1, 0, true);
    if out.field.valid_count() == 0 {
        return Err(DicError::FrameFailure { frame: 1 });
    }
    Ok((out.field.with_scale(reference.scale()), out.events))
}

/// Reference frames used by an incremental run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct IncrementalChain {
    /// Frames that served as reference, starting with 0, strictly increasing.
    pub references: Vec<usize>,
}

/// Fields of a sequence, each expressed against frame 0.
#[derive(Debug, Clone)]
pub struct SequenceOutput {
    /// One field per deformed frame `1..frames.len()`.
    pub fields: Vec<DisplacementField>,
    /// Frames where every seed failed; their fields are entirely invalid.
    pub failed_frames: Vec<usize>,
    pub chain: IncrementalChain,
}

/// Analyzes `frames[1..]` against `frames[0]`, directly or incrementally.
/// Any frame failure is returned as an error.
pub fn analyze_sequence(
    frames: &[GrayImage],
    grid: &RoiGrid,
    seeds: &SeedSpec,
    cfg: &AnalysisConfig,
    incremental: bool,
) -> Result<SequenceOutput> {
    let out = analyze_sequence_tolerant(frames, grid, seeds, cfg, incremental)?;
    if let Some(&frame) = out.failed_frames.first() {
        return Err(DicError::FrameFailure { frame });
    }
    Ok(out)
}

/// Like [`analyze_sequence`], but frame failures are recorded and the run
/// continues.
pub fn analyze_sequence_tolerant(
    frames: &[GrayImage],
    grid: &RoiGrid,
    seeds: &SeedSpec,
    cfg: &AnalysisConfig,
    incremental: bool,
) -> Result<SequenceOutput> {
    if frames.len() < 2 {
        return Err(DicError::InvalidArgument("a sequence needs at least two frames".into()));
    }
    for f in &frames[1..] {
        check_inputs(&frames[0], f, grid, cfg)?;
    }
    let scale = frames[0].scale();
    if !incremental {
        let run = |i: usize| -> Result<(DisplacementField, bool)> {
            let ctx = FrameContext::new(&frames[0], &frames[i], cfg, false)?;
            let out = flood_fill(&ctx, &PointSet::regular(grid), seeds, i, 0, false);
            let failed = out.field.valid_count() == 0;
            Ok((out.field.with_scale(scale), failed))
        };
        let results: Vec<Result<(DisplacementField, bool)>> = if cfg.workers > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.workers)
                .build()
                .map_err(|e| DicError::InvalidArgument(e.to_string()))?;
            pool.install(|| (1..frames.len()).into_par_iter().map(run).collect())
        } else {
            (1..frames.len()).map(run).collect()
        };
        let mut fields = Vec::with_capacity(frames.len() - 1);
        let mut failed_frames = Vec::new();
        for (k, r) in results.into_iter().enumerate() {
            let (f, failed) = r?;
            if failed {
                failed_frames.push(k + 1);
            }
            fields.push(f);
        }
        return Ok(SequenceOutput { fields, failed_frames, chain: IncrementalChain { references: vec![0] } });
    }
    incremental_run(frames, grid, seeds, cfg)
}

/// Accumulated displacement of each grid point from frame 0 to the current
/// reference; `None` for points lost on the way.
struct Accumulated {
    frame: usize,
    disp: Vec<Option<(f64, f64)>>,
}

fn incremental_run(
    frames: &[GrayImage],
    grid: &RoiGrid,
    seeds: &SeedSpec,
    cfg: &AnalysisConfig,
) -> Result<SequenceOutput> {
    let scale = frames[0].scale();
    let mut acc = Accumulated { frame: 0, disp: vec![Some((0.0, 0.0)); grid.len()] };
    let mut chain = IncrementalChain { references: vec![0] };
    let mut fields = Vec::with_capacity(frames.len() - 1);
    let mut failed_frames = Vec::new();

    for i in 1..frames.len() {
        let (mut composed, mut seed_ok, seed_mean) = correlate_against(frames, grid, seeds, cfg, &acc, i)?;
        if let UpdatePolicy::Trigger { min_seed_zncc, max_invalid_fraction } = cfg.update {
            let invalid_frac = composed.invalid_count() as f64 / grid.len() as f64;
            let fired = !seed_ok || seed_mean < min_seed_zncc || invalid_frac > max_invalid_fraction;
            if fired && i - 1 > acc.frame {
                if let Some(prev) = fields.last() {
                    let candidate = accumulated_from(prev, i - 1);
                    let retry = correlate_against(frames, grid, seeds, cfg, &candidate, i)?;
                    if retry.1 && retry.0.valid_count() >= composed.valid_count() {
                        acc = candidate;
                        chain.references.push(i - 1);
                        (composed, seed_ok) = (retry.0, retry.1);
                    }
                }
            }
        }
        if !seed_ok {
            failed_frames.push(i);
        }
        let update_now = seed_ok
            && match &cfg.update {
                UpdatePolicy::Every(k) => *k > 0 && i % k == 0,
                UpdatePolicy::AtFrames(list) => list.contains(&i),
                UpdatePolicy::Trigger { .. } => false,
            };
        let composed = composed.with_scale(scale);
        if update_now && i + 1 < frames.len() {
            acc = accumulated_from(&composed, i);
            chain.references.push(i);
        }
        fields.push(composed);
    }
    Ok(SequenceOutput { fields, failed_frames, chain })
}

fn accumulated_from(field: &DisplacementField, frame: usize) -> Accumulated {
    Accumulated { frame, disp: (0..field.grid.len()).map(|i| field.get_index(i)).collect() }
}

/// Correlates frame `i` against the accumulated reference and composes the
/// result back to frame 0. Returns the composed field, whether any seed
/// succeeded, and the mean seed ZNCC.
fn correlate_against(
    frames: &[GrayImage],
    grid: &RoiGrid,
    seeds: &SeedSpec,
    cfg: &AnalysisConfig,
    acc: &Accumulated,
    i: usize,
) -> Result<(DisplacementField, bool, f64)> {
    let reference = &frames[acc.frame];
    let tracked = acc.frame > 0 && cfg.composition == Composition::Tracked;
    let ctx = FrameContext::new(reference, &frames[i], cfg, tracked)?;
    let points = if tracked {
        let mut p = PointSet::regular(grid);
        for (k, c) in p.centers.iter_mut().enumerate() {
            *c = match (*c, acc.disp[k]) {
                (Some((x, y)), Some((u, v))) => {
                    let (cx, cy) = (x + u, y + v);
                    SubsetSpec::new(cx, cy, cfg.half_width)
                        .ok()
                        .filter(|s| s.fits(reference.width(), reference.height()))
                        .map(|_| (cx, cy))
                }
                _ => None,
            };
        }
        p
    } else {
        PointSet::regular(grid)
    };
    let out = flood_fill(&ctx, &points, seeds, i, acc.frame, false);
    let ok: Vec<f64> = out.seed_zncc.iter().flatten().copied().collect();
    let seed_ok = !ok.is_empty();
    let seed_mean = if seed_ok { ok.iter().sum::<f64>() / ok.len() as f64 } else { 0.0 };
    if acc.frame == 0 {
        return Ok((out.field, seed_ok, seed_mean));
    }
    let inc = out.field;
    let mut composed = DisplacementField::empty(*grid, i, 0);
    for k in 0..grid.len() {
        let Some((du, dv)) = acc.disp[k] else { continue };
        let step = match cfg.composition {
            Composition::Tracked | Composition::Literal => inc.get_index(k).map(|(a, b)| (a, b, inc.zncc[k])),
            Composition::Interpolated => {
                let (r, c) = grid.row_col(k);
                let (x, y) = grid.position(r, c);
                inc.sample(x as f64 + du, y as f64 + dv)
            }
        };
        if let Some((a, b, z)) = step {
            composed.set_valid(k, du + a, dv + b, z, inc.provenance[k]);
        } else {
            composed.set_invalid(k);
        }
    }
    Ok((composed, seed_ok, seed_mean))
}

/// Mean absolute error of a field against an analytic displacement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaeReport {
    /// Over valid points; `None` when there are none.
    pub mae_x: Option<f64>,
    pub mae_y: Option<f64>,
    /// Invalid points counted at [`STRICT_PENALTY_PX`].
    pub strict_mae_x: f64,
    pub strict_mae_y: f64,
    pub valid: usize,
    pub invalid: usize,
}

/// Error charged per invalid point by the strict MAE.
pub const STRICT_PENALTY_PX: f64 = 10.0;

/// Mean absolute error over valid points, with invalid points reported
/// separately. `truth` maps a reference pixel position to its displacement.
pub fn mae_report(field: &DisplacementField, truth: impl Fn(f64, f64) -> (f64, f64)) -> MaeReport {
    let g = field.grid;
    let (mut sx, mut sy, mut valid) = (0.0, 0.0, 0usize);
    for i in 0..g.len() {
        if let Some((u, v)) = field.get_index(i) {
            let (r, c) = g.row_col(i);
            let (x, y) = g.position(r, c);
            let (tu, tv) = truth(x as f64, y as f64);
            sx += (u - tu).abs();
            sy += (v - tv).abs();
            valid += 1;
        }
    }
    let n = g.len();
    let invalid = n - valid;
    let pen = STRICT_PENALTY_PX * invalid as f64;
    MaeReport {
        mae_x: (valid > 0).then(|| sx / valid as f64),
        mae_y: (valid > 0).then(|| sy / valid as f64),
        strict_mae_x: (sx + pen) / n as f64,
        strict_mae_y: (sy + pen) / n as f64,
        valid,
        invalid,
    }
}

/// `(MAE_x, MAE_y)` over valid points.
pub fn mae(field: &DisplacementField, truth: impl Fn(f64, f64) -> (f64, f64)) -> Result<(f64, f64)> {
    let r = mae_report(field, truth);
    match (r.mae_x, r.mae_y) {
        (Some(x), Some(y)) => Ok((x, y)),
        _ => Err(DicError::NoValidPoints),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate_speckle, SpeckleSpec};

    fn speckle(w: usize, h: usize, seed: u64) -> GrayImage {
        let spec =
            SpeckleSpec { width: w, height: h, count: w * h / 30, seed, mig_floor: 0.0, ..SpeckleSpec::default() };
        generate_speckle(&spec).unwrap().image
    }

    /// `def(x, y) = ref(x - u(x, y), y - v(x, y))`, by spline sampling.
    fn warp_image(img: &GrayImage, disp: impl Fn(f64, f64) -> (f64, f64)) -> GrayImage {
        let it = Interpolant::new(img, InterpKind::BicubicSpline).unwrap();
        GrayImage::from_fn(img.width(), img.height(), |x, y| {
            let (u, v) = disp(x as f64, y as f64);
            let (sx, sy) = (x as f64 - u, y as f64 - v);
            if it.in_domain(sx, sy) {
                it.value(sx, sy).unwrap()
            } else {
                0.5
            }
        })
        .unwrap()
    }

    fn small_cfg() -> AnalysisConfig {
        AnalysisConfig { half_width: 7, ..AnalysisConfig::default() }
    }

    #[test]
    fn grid_geometry() {
        let g = RoiGrid::new(10, 20, 40, 24, 8).unwrap();
        assert_eq!((g.nx(), g.ny(), g.len()), (5, 3, 15));
        assert_eq!(g.position(2, 4), (42, 36));
        assert_eq!(g.row_col(g.index(2, 4)), (2, 4));
        assert_eq!(g.nearest(43.0, 35.0), Some((2, 4)));
        assert_eq!(g.nearest(0.0, 0.0), None);
        assert!(RoiGrid::new(0, 0, 10, 10, 0).is_err());
        let c = RoiGrid::centered(1024, 1024, 640, 824, 8).unwrap();
        assert_eq!((c.origin_x, c.origin_y), (192, 100));
    }

    #[test]
    fn null_deformation_is_exact() {
        let img = speckle(96, 96, 3);
        let g = RoiGrid::new(20, 20, 56, 56, 8).unwrap();
        let seeds = SeedSpec::new(&g, vec![Seed { row: 3, col: 3, search_radius: 5 }]).unwrap();
        let f = analyze_frame(&img, &img, &g, &seeds, &small_cfg()).unwrap();
        assert_eq!(f.valid_count(), g.len());
        for i in 0..g.len() {
            let (u, v) = f.get_index(i).unwrap();
            assert!(u.abs() < 1e-9 && v.abs() < 1e-9);
            assert!(f.zncc_values()[i] > 0.9999);
        }
    }

    #[test]
    fn uniform_shift_recovered() {
        let img = speckle(110, 100, 5);
        let def = warp_image(&img, |_, _| (2.35, -1.6));
        let g = RoiGrid::new(24, 24, 56, 48, 8).unwrap();
        let seeds = SeedSpec::new(&g, vec![Seed { row: 0, col: 0, search_radius: 6 }]).unwrap();
        let f = analyze_frame(&img, &def, &g, &seeds, &small_cfg()).unwrap();
        let (ex, ey) = mae(&f, |_, _| (2.35, -1.6)).unwrap();
        assert_eq!(f.invalid_count(), 0);
        assert!(ex < 0.02 && ey < 0.02, "{ex} {ey}");
    }

    #[test]
    fn queue_pops_in_reliability_order() {
        let img = speckle(100, 100, 7);
        let def = warp_image(&img, |x, y| (0.5 + 0.01 * x, -0.3 + 0.008 * y));
        let g = RoiGrid::new(24, 24, 48, 48, 6).unwrap();
        let seeds = SeedSpec::new(&g, vec![Seed { row: 4, col: 4, search_radius: 4 }]).unwrap();
        let (f, events) = analyze_frame_traced(&img, &def, &g, &seeds, &small_cfg()).unwrap();
        // Replay the log: every pop must be the best pending entry.
        let mut pending: Vec<(f64, usize)> = Vec::new();
        let mut pops = 0;
        for e in &events {
            match *e {
                QueueEvent::Push { index, zncc } => pending.push((zncc, index)),
                QueueEvent::Pop { index, zncc } => {
                    let best = pending.iter().copied().max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1))).unwrap();
                    assert_eq!(best, (zncc, index));
                    pending.retain(|p| *p != best);
                    pops += 1;
                }
            }
        }
        assert!(pending.is_empty());
        assert_eq!(pops, f.valid_count());
    }

    #[test]
    fn provenance_points_to_valid_neighbors() {
        let img = speckle(100, 100, 9);
        let def = warp_image(&img, |_, _| (1.0, 1.0));
        let g = RoiGrid::new(24, 24, 48, 48, 8).unwrap();
        let seeds = SeedSpec::new(&g, vec![Seed { row: 2, col: 2, search_radius: 4 }]).unwrap();
        let f = analyze_frame(&img, &def, &g, &seeds, &small_cfg()).unwrap();
        for i in 0..g.len() {
            match f.provenance(i) {
                Some(Provenance::Seed(0)) => assert_eq!(i, g.index(2, 2)),
                Some(Provenance::Neighbor(j)) => {
                    assert!(f.get_index(j).is_some());
                    let (a, b) = (g.row_col(i), g.row_col(j));
                    assert_eq!(a.0.abs_diff(b.0) + a.1.abs_diff(b.1), 1);
                }
                other => panic!("unexpected provenance {other:?} at {i}"),
            }
        }
    }

    /// Left half still, right half shifted by more than a subset width: one
    /// seed cannot cross, two seeds cover both halves.
    #[test]
    fn split_field_needs_a_seed_per_side() {
        let left = speckle(160, 100, 11);
        let right = speckle(160, 100, 12);
        let shift = 30.0;
        let reference =
            GrayImage::from_fn(160, 100, |x, y| if x < 80 { left.get(x, y) } else { right.get(x, y) }).unwrap();
        let def = GrayImage::from_fn(160, 100, |x, y| {
            let xs = x as isize - shift as isize;
            if x < 80 {
                left.get(x, y)
            } else if xs >= 80 {
                right.get(xs as usize, y)
            } else {
                0.5
            }
        })
        .unwrap();
        let g = RoiGrid::new(16, 20, 96, 56, 8).unwrap();
        let truth = |x: f64, _: f64| if x < 80.0 { (0.0, 0.0) } else { (shift, 0.0) };
        let cfg = small_cfg();
        let one = SeedSpec::new(&g, vec![Seed { row: 3, col: 1, search_radius: 40 }]).unwrap();
        let f1 = analyze_frame(&reference, &def, &g, &one, &cfg).unwrap();
        let two = SeedSpec::from_pixels(&g, &[(24.0, 44.0), (104.0, 44.0)], 40).unwrap();
        let f2 = analyze_frame(&reference, &def, &g, &two, &cfg).unwrap();
        let right_points = (0..g.len()).filter(|&i| g.position(g.row_col(i).0, g.row_col(i).1).0 >= 88).count();
        assert!(f1.invalid_count() >= right_points, "{} < {right_points}", f1.invalid_count());
        assert!(f2.valid_count() > f1.valid_count());
        let r2 = mae_report(&f2, truth);
        assert!(r2.mae_x.unwrap() < 0.05, "{r2:?}");
        for i in 0..g.len() {
            let (r, c) = g.row_col(i);
            if g.position(r, c).0 >= 88 {
                assert!(f2.get_index(i).is_some(), "right point {i} lost");
            }
        }
    }

    #[test]
    fn failed_seed_is_frame_failure() {
        let img = speckle(80, 80, 13);
        let other = speckle(80, 80, 14);
        let g = RoiGrid::new(20, 20, 40, 40, 8).unwrap();
        let seeds = SeedSpec::new(&g, vec![Seed { row: 2, col: 2, search_radius: 2 }]).unwrap();
        let cfg = AnalysisConfig { acceptance_zncc: 0.95, ..small_cfg() };
        assert!(matches!(analyze_frame(&img, &other, &g, &seeds, &cfg), Err(DicError::FrameFailure { .. })));
    }

    #[test]
    fn grid_must_fit_subsets() {
        let img = speckle(60, 60, 15);
        let g = RoiGrid::new(2, 2, 40, 40, 8).unwrap();
        let seeds = SeedSpec::new(&g, vec![Seed { row: 1, col: 1, search_radius: 2 }]).unwrap();
        assert!(matches!(analyze_frame(&img, &img, &g, &seeds, &small_cfg()), Err(DicError::InvalidGrid(_))));
    }

    #[test]
    fn analysis_is_deterministic() {
        let img = speckle(100, 100, 17);
        let def = warp_image(&img, |x, y| (0.02 * (y - 50.0), -0.02 * (x - 50.0)));
        let g = RoiGrid::new(24, 24, 48, 48, 6).unwrap();
        let seeds = SeedSpec::new(&g, vec![Seed { row: 4, col: 4, search_radius: 4 }]).unwrap();
        let a = analyze_frame(&img, &def, &g, &seeds, &small_cfg()).unwrap();
        let b = analyze_frame(&img, &def, &g, &seeds, &small_cfg()).unwrap();
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
    }

    #[test]
    fn incremental_chain_composes_shifts() {
        let img = speckle(120, 100, 19);
        let f1 = warp_image(&img, |_, _| (1.0, 0.0));
        let f2 = warp_image(&img, |_, _| (3.0, 0.0));
        let frames = vec![img, f1, f2];
        let g = RoiGrid::new(30, 26, 48, 48, 8).unwrap();
        let seeds = SeedSpec::new(&g, vec![Seed { row: 2, col: 2, search_radius: 6 }]).unwrap();
        for composition in [Composition::Tracked, Composition::Interpolated, Composition::Literal] {
            let cfg = AnalysisConfig { update: UpdatePolicy::AtFrames(vec![1]), composition, ..small_cfg() };
            let out = analyze_sequence(&frames, &g, &seeds, &cfg, true).unwrap();
            assert_eq!(out.chain.references, vec![0, 1]);
            let last = &out.fields[1];
            assert_eq!(last.reference_frame(), 0);
            let (ex, ey) = mae(last, |_, _| (3.0, 0.0)).unwrap();
            assert!(ex < 0.02 && ey < 0.02, "{composition:?}: {ex} {ey}");
        }
    }

    #[test]
    fn parallel_frames_match_serial() {
        let img = speckle(90, 90, 21);
        let frames: Vec<GrayImage> =
            (0..4).map(|k| warp_image(&img, |_, _| (0.4 * k as f64, -0.25 * k as f64))).collect();
        let g = RoiGrid::new(24, 24, 40, 40, 8).unwrap();
        let seeds = SeedSpec::new(&g, vec![Seed { row: 2, col: 2, search_radius: 4 }]).unwrap();
        let serial = analyze_sequence(&frames, &g, &seeds, &small_cfg(), false).unwrap();
        let cfg = AnalysisConfig { workers: 3, ..small_cfg() };
        let par = analyze_sequence(&frames, &g, &seeds, &cfg, false).unwrap();
        assert_eq!(format!("{:?}", serial.fields), format!("{:?}", par.fields));
    }

    #[test]
    fn mae_examples() {
        let g = RoiGrid::new(0, 0, 16, 16, 4).unwrap();
        let truth = |x: f64, y: f64| (0.01 * x, -0.02 * y);
        let exact = DisplacementField::from_fn(g, 1, truth);
        assert_eq!(mae(&exact, truth).unwrap(), (0.0, 0.0));
        let biased = DisplacementField::from_fn(g, 1, |x, y| (0.01 * x + 0.1, -0.02 * y - 0.2));
        let (ex, ey) = mae(&biased, truth).unwrap();
        assert!((ex - 0.1).abs() < 1e-12 && (ey - 0.2).abs() < 1e-12);

        // Independent double-sum over rows/columns with two invalid points.
        let mut vals = Vec::new();
        for r in 0..g.ny() {
            for c in 0..g.nx() {
                let (x, y) = ((c * 4) as f64, (r * 4) as f64);
                vals.push(((r + c) % 7 != 3).then(|| (x.sin(), y.cos())));
            }
        }
        let f = DisplacementField::from_values(g, 1, 0, &vals, &vec![1.0; g.len()]).unwrap();
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        for r in 0..g.ny() {
            for c in 0..g.nx() {
                if let Some((u, v)) = vals[r * g.nx() + c] {
                    let (tu, tv) = truth((c * 4) as f64, (r * 4) as f64);
                    sx += (u - tu).abs();
                    sy += (v - tv).abs();
                    n += 1.0;
                }
            }
        }
        let rep = mae_report(&f, truth);
        assert!((rep.mae_x.unwrap() - sx / n).abs() < 1e-12);
        assert!((rep.mae_y.unwrap() - sy / n).abs() < 1e-12);
        assert_eq!(rep.invalid, g.len() - n as usize);
        let total = g.len() as f64;
        assert!((rep.strict_mae_x - (sx + 10.0 * rep.invalid as f64) / total).abs() < 1e-12);

        let none = DisplacementField::empty(g, 1, 0);
        assert!(matches!(mae(&none, truth), Err(DicError::NoValidPoints)));
    }

    #[test]
    fn bilinear_field_sampling() {
        let g = RoiGrid::new(10, 10, 32, 32, 8).unwrap();
        let f = DisplacementField::from_fn(g, 1, |x, y| (2.0 * x + 1.0, y - 3.0));
        let (u, v, _) = f.sample(17.0, 29.5).unwrap();
        assert!((u - 35.0).abs() < 1e-12 && (v - 26.5).abs() < 1e-12);
        assert!(f.sample(5.0, 12.0).is_none());
    }
}
