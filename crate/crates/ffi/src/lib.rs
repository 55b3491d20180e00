//! C ABI over `dic-core`.
//!
//! Objects cross the boundary as opaque handles (`DicImage`, `DicConfig`,
//! `DicField`, `DicSequence`, `DicEdges`) that the caller releases with the
//! matching `*_free` function. Every fallible function returns a
//! [`DicStatus`]; on failure [`dic_last_error`] describes the problem. Small
//! results are plain `#[repr(C)]` structs written through out-pointers.
//!
//! Panics never unwind into C: they are caught and reported as
//! `DIC_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use dic_core::correlation::ShapeOrder;
use dic_core::crack::{self, CrackTip, Orientation, TipSearch};
use dic_core::image::{self, GrayImage};
use dic_core::rgdic::{self, AnalysisConfig, Composition, DisplacementField, RoiGrid, SeedSpec, UpdatePolicy};
use dic_core::synthetic::{generate_speckle, SpeckleSpec};
use dic_core::DicError;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DicStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Image = 3,
    Io = 4,
    CorrelationFailed = 5,
    NoTip = 6,
    NoPlateau = 7,
    MissingScale = 8,
    SpeckleQuality = 9,
    Format = 10,
    Panic = 11,
}

impl From<&DicError> for DicStatus {
    fn from(e: &DicError) -> Self {
        match e {
            DicError::ImageRead { .. } | DicError::UnsupportedFormat(_) | DicError::InvalidImage(_) => Self::Image,
            DicError::Io(_) => Self::Io,
            DicError::FrameFailure { .. } | DicError::DegenerateSubset | DicError::NoValidPoints => {
                Self::CorrelationFailed
            }
            DicError::NoTip(_) => Self::NoTip,
            DicError::NoPlateau(_) => Self::NoPlateau,
            DicError::MissingScale => Self::MissingScale,
            DicError::SpeckleQuality { .. } => Self::SpeckleQuality,
            DicError::Format(_) | DicError::Csv(_) => Self::Format,
            _ => Self::InvalidArgument,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

enum Fail {
    Null(&'static str),
    Arg(String),
    Core(DicError),
}

impl From<DicError> for Fail {
    fn from(e: DicError) -> Self {
        Fail::Core(e)
    }
}

type FfiResult = Result<(), Fail>;

fn guard(f: impl FnOnce() -> FfiResult) -> DicStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            DicStatus::Ok
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("{what} must not be NULL"));
            DicStatus::NullPointer
        }
        Ok(Err(Fail::Arg(msg))) => {
            set_error(msg);
            DicStatus::InvalidArgument
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            DicStatus::from(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            DicStatus::Panic
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn as_mut<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail::Null("path"));
    }
    CStr::from_ptr(p).to_str().map(PathBuf::from).map_err(|_| Fail::Arg("path is not valid UTF-8".into()))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> FfiResult {
    if out.is_null() {
        return Err(Fail::Null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn scale_arg(scale: f64) -> Option<f64> {
    (scale > 0.0 && scale.is_finite()).then_some(scale)
}

/// Message of the last failed call on this thread, or NULL after a
/// successful call. Valid until the next call into the library on the same
/// thread.
#[no_mangle]
pub extern "C" fn dic_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dic_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

// ---------------------------------------------------------------------------
// Images

/// Opaque grayscale image.
pub struct DicImage(GrayImage);

/// Builds an image from 8-bit row-major pixels. `scale_mm_per_px <= 0` means
/// no physical scale.
///
/// # Safety
/// `pixels` must point to `width * height` readable bytes; `out` must be a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dic_image_from_u8(
    pixels: *const u8,
    width: usize,
    height: usize,
    scale_mm_per_px: f64,
    out: *mut *mut DicImage,
) -> DicStatus {
    guard(|| {
        let n = width.checked_mul(height).ok_or_else(|| Fail::Arg("image too large".into()))?;
        let px = slice(pixels, n, "pixels")?;
        let codes: Vec<u16> = px.iter().map(|&p| p.into()).collect();
        let img = GrayImage::from_codes(width, height, &codes, 255)?.with_scale(scale_arg(scale_mm_per_px));
        put(out, DicImage(img))
    })
}

/// Builds an image from 16-bit row-major pixels.
///
/// # Safety
/// As [`dic_image_from_u8`], with `width * height` readable `uint16_t`.
#[no_mangle]
pub unsafe extern "C" fn dic_image_from_u16(
    pixels: *const u16,
    width: usize,
    height: usize,
    scale_mm_per_px: f64,
    out: *mut *mut DicImage,
) -> DicStatus {
    guard(|| {
        let n = width.checked_mul(height).ok_or_else(|| Fail::Arg("image too large".into()))?;
        let px = slice(pixels, n, "pixels")?;
        let img = GrayImage::from_codes(width, height, px, u16::MAX)?.with_scale(scale_arg(scale_mm_per_px));
        put(out, DicImage(img))
    })
}

/// Loads a PNG or TIFF file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dic_image_load(
    path: *const c_char,
    scale_mm_per_px: f64,
    out: *mut *mut DicImage,
) -> DicStatus {
    guard(|| {
        let p = path_arg(path)?;
        put(out, DicImage(image::load_image(p, scale_arg(scale_mm_per_px))?))
    })
}

/// Writes an 8-bit PNG.
///
/// # Safety
/// `img` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dic_image_save_png(img: *const DicImage, path: *const c_char) -> DicStatus {
    guard(|| {
        let img = as_ref(img, "img")?;
        img.0.save_png8(path_arg(path)?)?;
        Ok(())
    })
}

/// # Safety
/// `img` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dic_image_free(img: *mut DicImage) {
    if !img.is_null() {
        drop(Box::from_raw(img));
    }
}

/// # Safety
/// `img` must be a live handle; `width` and `height` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn dic_image_size(img: *const DicImage, width: *mut usize, height: *mut usize) -> DicStatus {
    guard(|| {
        let img = as_ref(img, "img")?;
        *as_mut(width, "width")? = img.0.width();
        *as_mut(height, "height")? = img.0.height();
        Ok(())
    })
}

/// Mean intensity gradient in the image's native code values.
///
/// # Safety
/// `img` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dic_image_mig(img: *const DicImage, out: *mut f64) -> DicStatus {
    guard(|| {
        let img = as_ref(img, "img")?;
        *as_mut(out, "out")? = image::mean_intensity_gradient(&img.0);
        Ok(())
    })
}

/// Copies the pixels, row-major, as intensities in `[0, 1]`.
///
/// # Safety
/// `img` must be a live handle; `out` must hold `len >= width * height`
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn dic_image_copy(img: *const DicImage, out: *mut f64, len: usize) -> DicStatus {
    guard(|| {
        let data = as_ref(img, "img")?.0.data();
        if len < data.len() {
            return Err(Fail::Arg(format!("buffer holds {len} values, the image has {}", data.len())));
        }
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        ptr::copy_nonoverlapping(data.as_ptr(), out, data.len());
        Ok(())
    })
}

/// Random speckle pattern with `count` Gaussian blobs of mean radius
/// `radius_px`, regenerated with successive seeds until the mean intensity
/// gradient reaches `mig_floor`. `mig` (may be NULL) receives the achieved
/// value.
///
/// # Safety
/// `out` must be a valid pointer; `mig` NULL or valid.
#[no_mangle]
pub unsafe extern "C" fn dic_speckle_generate(
    width: usize,
    height: usize,
    count: usize,
    radius_px: f64,
    seed: u64,
    mig_floor: f64,
    out: *mut *mut DicImage,
    mig: *mut f64,
) -> DicStatus {
    guard(|| {
        let d = SpeckleSpec::default();
        let spec = SpeckleSpec {
            width,
            height,
            count,
            radius_mean: radius_px,
            radius_spread: d.radius_spread * radius_px / d.radius_mean,
            seed,
            mig_floor,
            ..d
        };
        let s = generate_speckle(&spec)?;
        if let Some(m) = mig.as_mut() {
            *m = s.mig;
        }
        put(out, DicImage(s.image))
    })
}

// ---------------------------------------------------------------------------
// Analysis configuration

/// Region of interest and grid step, in pixels.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DicGrid {
    pub origin_x: usize,
    pub origin_y: usize,
    pub width: usize,
    pub height: usize,
    pub step: usize,
}

impl DicGrid {
    fn to_core(self) -> Result<RoiGrid, Fail> {
        Ok(RoiGrid::new(self.origin_x, self.origin_y, self.width, self.height, self.step)?)
    }

    fn from_core(g: &RoiGrid) -> Self {
        Self { origin_x: g.origin_x, origin_y: g.origin_y, width: g.width, height: g.height, step: g.step }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DicUpdatePolicy {
    /// Re-base on low seed ZNCC or many failed points.
    Trigger = 0,
    /// Re-base every `update_every` frames.
    Every = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DicComposition {
    Tracked = 0,
    Interpolated = 1,
    Literal = 2,
}

/// Opaque analysis settings; created with defaults (subset 23x23,
/// first-order warp, acceptance ZNCC 0.7, trigger-based updating).
pub struct DicConfig {
    cfg: AnalysisConfig,
    search_radius: usize,
}

#[no_mangle]
pub extern "C" fn dic_config_new() -> *mut DicConfig {
    Box::into_raw(Box::new(DicConfig { cfg: AnalysisConfig::default(), search_radius: rgdic::DEFAULT_SEARCH_RADIUS }))
}

/// # Safety
/// `cfg` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dic_config_free(cfg: *mut DicConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Subset half-width `M` (subset `2M+1`) and the shape-function order
/// (1 or 2).
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dic_config_set_subset(cfg: *mut DicConfig, half_width: usize, order: u32) -> DicStatus {
    guard(|| {
        let c = as_mut(cfg, "cfg")?;
        if half_width == 0 {
            return Err(Fail::Arg("half_width must be at least 1".into()));
        }
        c.cfg.order = match order {
            1 => ShapeOrder::First,
            2 => ShapeOrder::Second,
            _ => return Err(Fail::Arg(format!("shape-function order {order} is not 1 or 2"))),
        };
        c.cfg.half_width = half_width;
        Ok(())
    })
}

/// Points with ZNCC below `zncc` are invalid; seeds search `search_radius`
/// pixels for their integer guess.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dic_config_set_acceptance(cfg: *mut DicConfig, zncc: f64, search_radius: usize) -> DicStatus {
    guard(|| {
        let c = as_mut(cfg, "cfg")?;
        if !(zncc > 0.0 && zncc <= 1.0) {
            return Err(Fail::Arg("acceptance ZNCC must be in (0, 1]".into()));
        }
        c.cfg.acceptance_zncc = zncc;
        c.search_radius = search_radius;
        Ok(())
    })
}

/// Reference-update rule for incremental sequences. `update_every` is used
/// by `DIC_UPDATE_POLICY_EVERY`; the thresholds by
/// `DIC_UPDATE_POLICY_TRIGGER`.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dic_config_set_update(
    cfg: *mut DicConfig,
    policy: DicUpdatePolicy,
    update_every: usize,
    min_seed_zncc: f64,
    max_invalid_fraction: f64,
    composition: DicComposition,
) -> DicStatus {
    guard(|| {
        let c = as_mut(cfg, "cfg")?;
        c.cfg.update = match policy {
            DicUpdatePolicy::Every if update_every == 0 => {
                return Err(Fail::Arg("update_every must be at least 1".into()))
            }
            DicUpdatePolicy::Every => UpdatePolicy::Every(update_every),
            DicUpdatePolicy::Trigger => UpdatePolicy::Trigger { min_seed_zncc, max_invalid_fraction },
        };
        c.cfg.composition = match composition {
            DicComposition::Tracked => Composition::Tracked,
            DicComposition::Interpolated => Composition::Interpolated,
            DicComposition::Literal => Composition::Literal,
        };
        Ok(())
    })
}

/// Worker threads for independent frames (1 = fully sequential).
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dic_config_set_workers(cfg: *mut DicConfig, workers: usize) -> DicStatus {
    guard(|| {
        as_mut(cfg, "cfg")?.cfg.workers = workers.max(1);
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// Fields

/// Opaque displacement field.
pub struct DicField(DisplacementField);

/// Opaque sequence of fields, each relative to frame 0.
pub struct DicSequence {
    fields: Vec<DisplacementField>,
    failed: Vec<usize>,
    references: Vec<usize>,
}

unsafe fn seed_spec(grid: &RoiGrid, seeds_xy: *const f64, n_seeds: usize, radius: usize) -> Result<SeedSpec, Fail> {
    let xy = slice(seeds_xy, n_seeds.checked_mul(2).ok_or(Fail::Arg("too many seeds".into()))?, "seeds_xy")?;
    let px: Vec<(f64, f64)> = xy.chunks_exact(2).map(|c| (c[0], c[1])).collect();
    Ok(SeedSpec::from_pixels(grid, &px, radius)?)
}

/// Correlates one deformed image against the reference. `seeds_xy` holds
/// `n_seeds` pixel pairs `(x, y)`.
///
/// # Safety
/// Handles must be live; `seeds_xy` must point to `2 * n_seeds` doubles;
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dic_analyze_frame(
    reference: *const DicImage,
    deformed: *const DicImage,
    grid: DicGrid,
    seeds_xy: *const f64,
    n_seeds: usize,
    cfg: *const DicConfig,
    out: *mut *mut DicField,
) -> DicStatus {
    guard(|| {
        let (r, d, c) = (as_ref(reference, "reference")?, as_ref(deformed, "deformed")?, as_ref(cfg, "cfg")?);
        let g = grid.to_core()?;
        let seeds = seed_spec(&g, seeds_xy, n_seeds, c.search_radius)?;
        put(out, DicField(rgdic::analyze_frame(&r.0, &d.0, &g, &seeds, &c.cfg)?))
    })
}

/// Correlates `frames[1..n]` against `frames[0]`, directly or with
/// reference updating. Frames where every seed fails are recorded (see
/// [`dic_sequence_failed_count`]) rather than aborting the run.
///
/// # Safety
/// `frames` must point to `n_frames` live image handles; otherwise as
/// [`dic_analyze_frame`].
#[no_mangle]
pub unsafe extern "C" fn dic_analyze_sequence(
    frames: *const *const DicImage,
    n_frames: usize,
    grid: DicGrid,
    seeds_xy: *const f64,
    n_seeds: usize,
    cfg: *const DicConfig,
    incremental: bool,
    out: *mut *mut DicSequence,
) -> DicStatus {
    guard(|| {
        let c = as_ref(cfg, "cfg")?;
        let handles = slice(frames, n_frames, "frames")?;
        let images =
            handles.iter().map(|&h| as_ref(h, "frames[i]").map(|i| i.0.clone())).collect::<Result<Vec<_>, _>>()?;
        let g = grid.to_core()?;
        let seeds = seed_spec(&g, seeds_xy, n_seeds, c.search_radius)?;
        let run = rgdic::analyze_sequence_tolerant(&images, &g, &seeds, &c.cfg, incremental)?;
        put(out, DicSequence { fields: run.fields, failed: run.failed_frames, references: run.chain.references })
    })
}

/// # Safety
/// `seq` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dic_sequence_free(seq: *mut DicSequence) {
    if !seq.is_null() {
        drop(Box::from_raw(seq));
    }
}

/// Number of fields (one per deformed frame).
///
/// # Safety
/// `seq` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dic_sequence_len(seq: *const DicSequence) -> usize {
    seq.as_ref().map_or(0, |s| s.fields.len())
}

/// # Safety
/// `seq` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dic_sequence_failed_count(seq: *const DicSequence) -> usize {
    seq.as_ref().map_or(0, |s| s.failed.len())
}

/// Number of frames that served as reference (frame 0 included).
///
/// # Safety
/// `seq` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dic_sequence_reference_count(seq: *const DicSequence) -> usize {
    seq.as_ref().map_or(0, |s| s.references.len())
}

/// Copies field `index` (frame `index + 1`) into a new handle.
///
/// # Safety
/// `seq` must be a live handle; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn dic_sequence_field(
    seq: *const DicSequence,
    index: usize,
    out: *mut *mut DicField,
) -> DicStatus {
    guard(|| {
        let s = as_ref(seq, "seq")?;
        let f =
            s.fields.get(index).ok_or_else(|| Fail::Arg(format!("index {index} out of {} fields", s.fields.len())))?;
        put(out, DicField(f.clone()))
    })
}

/// # Safety
/// `field` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dic_field_free(field: *mut DicField) {
    if !field.is_null() {
        drop(Box::from_raw(field));
    }
}

/// Grid of the field and its point counts.
///
/// # Safety
/// `field` must be a live handle; out-pointers valid.
#[no_mangle]
pub unsafe extern "C" fn dic_field_grid(
    field: *const DicField,
    grid: *mut DicGrid,
    nx: *mut usize,
    ny: *mut usize,
) -> DicStatus {
    guard(|| {
        let f = &as_ref(field, "field")?.0;
        *as_mut(grid, "grid")? = DicGrid::from_core(f.grid());
        *as_mut(nx, "nx")? = f.nx();
        *as_mut(ny, "ny")? = f.ny();
        Ok(())
    })
}

/// Row-major copies of the field: `u`, `v` in pixels (NaN where invalid)
/// and `zncc`. Each array needs `nx * ny` slots; any may be NULL.
///
/// # Safety
/// `field` must be a live handle; non-NULL arrays must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn dic_field_copy(
    field: *const DicField,
    u: *mut f64,
    v: *mut f64,
    zncc: *mut f64,
    len: usize,
) -> DicStatus {
    guard(|| {
        let f = &as_ref(field, "field")?.0;
        let n = f.grid().len();
        if len < n {
            return Err(Fail::Arg(format!("buffers hold {len} values, the field has {n}")));
        }
        for i in 0..n {
            let (a, b) = f.get_index(i).unwrap_or((f64::NAN, f64::NAN));
            if !u.is_null() {
                *u.add(i) = a;
            }
            if !v.is_null() {
                *v.add(i) = b;
            }
            if !zncc.is_null() {
                *zncc.add(i) = f.zncc_values()[i];
            }
        }
        Ok(())
    })
}

/// Number of invalid points.
///
/// # Safety
/// `field` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dic_field_invalid_count(field: *const DicField) -> usize {
    field.as_ref().map_or(0, |f| f.0.invalid_count())
}

/// Sets the physical scale used by the crack functions.
///
/// # Safety
/// `field` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dic_field_set_scale(field: *mut DicField, scale_mm_per_px: f64) -> DicStatus {
    guard(|| {
        let f = as_mut(field, "field")?;
        let s = scale_arg(scale_mm_per_px).ok_or_else(|| Fail::Arg("scale must be positive".into()))?;
        f.0 = f.0.clone().with_scale(Some(s));
        Ok(())
    })
}

/// Writes the field in the DICF binary format.
///
/// # Safety
/// `field` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dic_field_write_dicf(field: *const DicField, path: *const c_char) -> DicStatus {
    guard(|| {
        let f = as_ref(field, "field")?;
        let file = std::fs::File::create(path_arg(path)?).map_err(DicError::from)?;
        dic_core::io::write_dicf(std::io::BufWriter::new(file), &f.0)?;
        Ok(())
    })
}

/// Reads a DICF file, attaching `frame` as the frame number.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn dic_field_read_dicf(path: *const c_char, frame: usize, out: *mut *mut DicField) -> DicStatus {
    guard(|| {
        let file = std::fs::File::open(path_arg(path)?).map_err(DicError::from)?;
        put(out, DicField(dic_core::io::read_dicf(std::io::BufReader::new(file), frame)?))
    })
}

// ---------------------------------------------------------------------------
// Crack analysis

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DicOrientation {
    /// Crack plane along `y`; opening measured in `u`.
    Vertical = 0,
    /// Crack plane along `x`; opening measured in `v`.
    Horizontal = 1,
}

impl From<DicOrientation> for Orientation {
    fn from(o: DicOrientation) -> Self {
        match o {
            DicOrientation::Vertical => Orientation::Vertical,
            DicOrientation::Horizontal => Orientation::Horizontal,
        }
    }
}

impl From<Orientation> for DicOrientation {
    fn from(o: Orientation) -> Self {
        match o {
            Orientation::Vertical => DicOrientation::Vertical,
            Orientation::Horizontal => DicOrientation::Horizontal,
        }
    }
}

/// A crack tip in millimetres.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DicTip {
    pub x_mm: f64,
    pub y_mm: f64,
    pub frame: usize,
    pub spread_mm: f64,
    pub low_confidence: bool,
    pub orientation: DicOrientation,
    /// +1 when the crack extends from the tip toward increasing `y`
    /// (vertical) or `x` (horizontal), -1 otherwise.
    pub side: f64,
}

impl From<&CrackTip> for DicTip {
    fn from(t: &CrackTip) -> Self {
        Self {
            x_mm: t.x_mm,
            y_mm: t.y_mm,
            frame: t.frame,
            spread_mm: t.spread_mm,
            low_confidence: t.low_confidence,
            orientation: t.orientation.into(),
            side: t.side,
        }
    }
}

impl From<&DicTip> for CrackTip {
    fn from(t: &DicTip) -> Self {
        Self {
            x_mm: t.x_mm,
            y_mm: t.y_mm,
            frame: t.frame,
            spread_mm: t.spread_mm,
            low_confidence: t.low_confidence,
            orientation: t.orientation.into(),
            side: t.side,
        }
    }
}

/// One correlation point on a crack flank.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DicEdgePoint {
    pub row: usize,
    pub col: usize,
    pub ref_x_mm: f64,
    pub ref_y_mm: f64,
    pub def_x_mm: f64,
    pub def_y_mm: f64,
}

/// Both flanks of one flagged relative-displacement entry.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DicEdgePair {
    pub rel_row: usize,
    pub rel_col: usize,
    pub opening_mm: f64,
    pub low: DicEdgePoint,
    pub high: DicEdgePoint,
}

fn edge_point(p: &crack::EdgePoint) -> DicEdgePoint {
    DicEdgePoint {
        row: p.row,
        col: p.col,
        ref_x_mm: p.ref_mm.0,
        ref_y_mm: p.ref_mm.1,
        def_x_mm: p.def_mm.0,
        def_y_mm: p.def_mm.1,
    }
}

/// Opaque list of flagged edge pairs.
pub struct DicEdges(Vec<crack::EdgePair>);

/// Flags every neighbor pair whose relative displacement across the crack
/// plane reaches `delta_c_mm`. The field needs a scale.
///
/// # Safety
/// `field` must be a live handle; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn dic_crack_edges(
    field: *const DicField,
    orientation: DicOrientation,
    delta_c_mm: f64,
    out: *mut *mut DicEdges,
) -> DicStatus {
    guard(|| {
        let f = &as_ref(field, "field")?.0;
        let rel = crack::relative_displacement(f, orientation.into(), None)?;
        put(out, DicEdges(crack::detect_crack_edges(&rel, delta_c_mm, f)?))
    })
}

/// # Safety
/// `edges` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dic_edges_free(edges: *mut DicEdges) {
    if !edges.is_null() {
        drop(Box::from_raw(edges));
    }
}

/// # Safety
/// `edges` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dic_edges_len(edges: *const DicEdges) -> usize {
    edges.as_ref().map_or(0, |e| e.0.len())
}

/// # Safety
/// `edges` must be a live handle; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn dic_edges_get(edges: *const DicEdges, index: usize, out: *mut DicEdgePair) -> DicStatus {
    guard(|| {
        let e = as_ref(edges, "edges")?;
        let p = e.0.get(index).ok_or_else(|| Fail::Arg(format!("index {index} out of {}", e.0.len())))?;
        *as_mut(out, "out")? = DicEdgePair {
            rel_row: p.rel_row,
            rel_col: p.rel_col,
            opening_mm: p.opening_mm,
            low: edge_point(&p.low),
            high: edge_point(&p.high),
        };
        Ok(())
    })
}

/// Tip from flagged edges; `side` as in [`DicTip`]. Returns
/// `DIC_STATUS_NO_TIP` when no edge component is large enough.
///
/// # Safety
/// `edges` and `field` must be live handles; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn dic_crack_tip_from_edges(
    edges: *const DicEdges,
    field: *const DicField,
    orientation: DicOrientation,
    side: f64,
    out: *mut DicTip,
) -> DicStatus {
    guard(|| {
        let e = as_ref(edges, "edges")?;
        let f = &as_ref(field, "field")?.0;
        let scale = f.scale().ok_or(DicError::MissingScale)?;
        let step_mm = f.grid().step as f64 * scale;
        let tip = crack::tip_from_edges(&e.0, orientation.into(), side, f.frame(), step_mm)
            .ok_or_else(|| DicError::NoTip("no edge component of sufficient size".into()))?;
        *as_mut(out, "out")? = DicTip::from(&tip);
        Ok(())
    })
}

/// Locates the crack tip from displacement profiles across the crack plane.
///
/// # Safety
/// `field` must be a live handle; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn dic_crack_locate_tip(
    field: *const DicField,
    orientation: DicOrientation,
    out: *mut DicTip,
) -> DicStatus {
    guard(|| {
        let f = &as_ref(field, "field")?.0;
        let tip = crack::locate_crack_tip(f, orientation.into(), &TipSearch::default())?;
        *as_mut(out, "out")? = DicTip::from(&tip);
        Ok(())
    })
}

/// Crack-tip opening displacement probed `lx_mm` across and `ly_mm` behind
/// the tip.
///
/// # Safety
/// `field` must be a live handle; `tip` and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn dic_crack_ctod(
    field: *const DicField,
    tip: *const DicTip,
    lx_mm: f64,
    ly_mm: f64,
    out: *mut f64,
) -> DicStatus {
    guard(|| {
        let f = &as_ref(field, "field")?.0;
        let t = CrackTip::from(as_ref(tip, "tip")?);
        *as_mut(out, "out")? = crack::measure_ctod(f, &t, lx_mm, ly_mm)?;
        Ok(())
    })
}

/// Summary of a CTOD plateau. Ranges are inclusive indices into the probe
/// grids.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DicPlateau {
    pub delta_c_mm: f64,
    pub onset_lx_mm: f64,
    pub onset_ly_mm: f64,
    pub lx_first: usize,
    pub lx_last: usize,
    pub ly_first: usize,
    pub ly_last: usize,
}

/// Critical CTOD from the plateau of CTOD over the probe grid. Returns
/// `DIC_STATUS_NO_PLATEAU` (with the probe values in the error message)
/// when no 3x3 sub-grid qualifies.
///
/// # Safety
/// `field` must be a live handle, `tip` and `out` valid, and the grids must
/// hold `n_lx` and `n_ly` doubles.
#[no_mangle]
pub unsafe extern "C" fn dic_crack_delta_c(
    field: *const DicField,
    tip: *const DicTip,
    lx_mm: *const f64,
    n_lx: usize,
    ly_mm: *const f64,
    n_ly: usize,
    out: *mut DicPlateau,
) -> DicStatus {
    guard(|| {
        let f = &as_ref(field, "field")?.0;
        let t = CrackTip::from(as_ref(tip, "tip")?);
        let p = crack::determine_delta_c(f, &t, slice(lx_mm, n_lx, "lx_mm")?, slice(ly_mm, n_ly, "ly_mm")?)?;
        *as_mut(out, "out")? = DicPlateau {
            delta_c_mm: p.delta_c_mm,
            onset_lx_mm: p.onset_lx_mm,
            onset_ly_mm: p.onset_ly_mm,
            lx_first: p.lx_range.0,
            lx_last: p.lx_range.1,
            ly_first: p.ly_range.0,
            ly_last: p.ly_range.1,
        };
        Ok(())
    })
}

/// Mean tip speed (mm/s) over `n` frames; frames with `located[i] == false`
/// are skipped. Needs at least two located tips.
///
/// # Safety
/// `times_s`, `tips` and `located` must each hold `n` elements; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn dic_crack_mean_speed(
    times_s: *const f64,
    tips: *const DicTip,
    located: *const bool,
    n: usize,
    out: *mut f64,
) -> DicStatus {
    guard(|| {
        let (t, p, l) = (slice(times_s, n, "times_s")?, slice(tips, n, "tips")?, slice(located, n, "located")?);
        let seq: Vec<(f64, Option<CrackTip>)> = (0..n).map(|i| (t[i], l[i].then(|| CrackTip::from(&p[i])))).collect();
        *as_mut(out, "out")? = crack::track_tip_and_speed(&seq)?.mean_speed_mm_s;
        Ok(())
    })
}
