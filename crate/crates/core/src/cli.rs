//! Batch front-end: run configuration, frame discovery and the `mig`,
//! `synth`, `analyze` and `crack` commands.
//!
//! Exit codes: 0 success, 1 I/O failure or MIG below the quality floor,
//! 2 configuration error, 3 correlation failure, 4 no CTOD plateau.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::correlation::{NrSettings, ShapeOrder};
use crate::crack::{
    analyze_crack_sequence, determine_delta_c, locate_crack_tip, resolution_warnings, CrackTip, Orientation, Plateau,
    TipSearch,
};
use crate::error::{DicError, Result};
use crate::image::{load_image, mean_intensity_gradient, GrayImage};
use crate::io;
use crate::rgdic::{
    analyze_sequence_tolerant, AnalysisConfig, Composition, DisplacementField, RoiGrid, SeedSpec, UpdatePolicy,
};
use crate::synthetic::{BenchmarkMode, BenchmarkSpec, SpeckleSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_CORRELATION: i32 = 3;
pub const EXIT_NO_PLATEAU: i32 = 4;

/// Exit code for an error.
pub fn exit_code(e: &DicError) -> i32 {
    match e {
        DicError::Config(_)
        | DicError::InvalidGrid(_)
        | DicError::InvalidArgument(_)
        | DicError::InvalidSubset(_)
        | DicError::MissingScale => EXIT_CONFIG,
        DicError::FrameFailure { .. } => EXIT_CORRELATION,
        DicError::NoPlateau(_) => EXIT_NO_PLATEAU,
        _ => EXIT_FAILURE,
    }
}

fn config_err(key: &str, msg: impl std::fmt::Display) -> DicError {
    DicError::Config(format!("{key}: {msg}"))
}

// ---------------------------------------------------------------------------
// Run configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub roi: RoiConfig,
    #[serde(default)]
    pub correlation: CorrelationConfig,
    #[serde(default)]
    pub incremental: IncrementalConfig,
    #[serde(default)]
    pub physical: PhysicalConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crack: Option<CrackConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub reference: PathBuf,
    /// Directory of PNG/TIFF frames or a glob pattern.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames: Option<String>,
    /// Explicit frame order; replaces `frames`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_list: Option<Vec<PathBuf>>,
    pub output: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoiConfig {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrelationConfig {
    pub half_width: usize,
    pub step: usize,
    pub seeds: Vec<[f64; 2]>,
    pub search_radius: usize,
    pub order: ShapeOrder,
    pub acceptance_zncc: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub workers: usize,
}

impl Default for CorrelationConfig {
    fn default() -> Self {
        let nr = NrSettings::default();
        Self {
            half_width: 11,
            step: 2,
            seeds: Vec::new(),
            search_radius: crate::rgdic::DEFAULT_SEARCH_RADIUS,
            order: ShapeOrder::First,
            acceptance_zncc: 0.7,
            max_iterations: nr.max_iter,
            tolerance: nr.tol,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Trigger,
    Every,
    Frames,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompositionKind {
    Tracked,
    Interpolated,
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IncrementalConfig {
    pub enabled: bool,
    pub policy: PolicyKind,
    pub min_seed_zncc: f64,
    pub max_invalid_fraction: f64,
    pub every: usize,
    pub frames: Vec<usize>,
    pub composition: CompositionKind,
}

impl Default for IncrementalConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            policy: PolicyKind::Trigger,
            min_seed_zncc: 0.8,
            max_invalid_fraction: 0.1,
            every: 10,
            frames: Vec::new(),
            composition: CompositionKind::Tracked,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysicalConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale_mm_per_px: Option<f64>,
    pub fps: f64,
    /// One timestamp per deformed frame; overrides `fps`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timestamps_s: Option<Vec<f64>>,
}

impl Default for PhysicalConfig {
    fn default() -> Self {
        Self { scale_mm_per_px: None, fps: 4.0, timestamps_s: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GrowthDirection {
    #[default]
    Auto,
    Up,
    Down,
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrackConfig {
    pub orientation: Orientation,
    pub grows_toward: GrowthDirection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_c_mm: Option<f64>,
    /// Frame whose field sets `δc`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pre_peak_frame: Option<usize>,
    /// Load history CSV from which the last pre-peak frame is picked.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub load_history: Option<PathBuf>,
    pub lx_mm: Vec<f64>,
    pub ly_mm: Vec<f64>,
    pub overlay: bool,
    pub overlay_radius: usize,
}

impl Default for CrackConfig {
    fn default() -> Self {
        Self {
            orientation: Orientation::Vertical,
            grows_toward: GrowthDirection::Auto,
            delta_c_mm: None,
            pre_peak_frame: None,
            load_history: None,
            lx_mm: Vec::new(),
            ly_mm: Vec::new(),
            overlay: true,
            overlay_radius: 1,
        }
    }
}

pub const CONFIG_HELP: &str = "\
Configuration file (TOML):

  [paths]
  reference   = \"ref.png\"        reference image
  frames      = \"frames/\"        directory of PNG/TIFF frames or a glob such as \"frames/*.tif\"
  frame_list  = [\"a.png\", ...]   explicit frame order (instead of `frames`)
  output      = \"out\"            output directory
  [roi]       x, y, w, h           region of interest in pixels
  [correlation]
  half_width = 11                  subset half-width M (subset 2M+1)
  step = 2                         grid step in pixels
  seeds = [[x, y], ...]            seed pixels, one per partition of the specimen
  search_radius = 50               integer seed search radius
  order = \"first\"                shape function: first | second
  acceptance_zncc = 0.7            points below are invalid
  max_iterations = 50, tolerance = 1e-6
  workers = 1                      threads for independent frames
  [incremental]
  enabled = true
  policy = \"trigger\"             trigger | every | frames
  min_seed_zncc = 0.8, max_invalid_fraction = 0.1   trigger thresholds
  every = 10, frames = [...]       fixed schedules
  composition = \"tracked\"        tracked | interpolated | literal
  [physical]
  scale_mm_per_px = 0.008          required for crack analysis
  fps = 4.0 or timestamps_s = [...]
  [crack]
  orientation = \"vertical\"       vertical | horizontal
  grows_toward = \"auto\"          auto | up | down | left | right
  delta_c_mm = 0.025               or determine it from a field:
  pre_peak_frame = 12              ... given frame index, or
  load_history = \"load.csv\"      ... last frame before the peak (time_s, load_kN, displacement_mm)
  lx_mm = [...], ly_mm = [...]     CTOD probe offsets for the plateau search
  overlay = true, overlay_radius = 1

A run manifest written by `analyze` can be used as the configuration.";

impl RunConfig {
    /// Parses a configuration or a run manifest; relative paths are taken
    /// relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| config_err(&path.display().to_string(), e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| DicError::Config(e.to_string()))?;
        if !table.contains_key("paths") {
            if let Some(toml::Value::Table(inner)) = table.remove("config") {
                table = inner;
            }
        }
        table.try_into().map_err(|e: toml::de::Error| DicError::Config(e.to_string()))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.reference);
        fix(&mut self.paths.output);
        if let Some(list) = &mut self.paths.frame_list {
            list.iter_mut().for_each(fix);
        }
        if let Some(f) = &mut self.paths.frames {
            if Path::new(f.as_str()).is_relative() {
                *f = base.join(f.as_str()).to_string_lossy().into_owned();
            }
        }
        if let Some(c) = &mut self.crack {
            if let Some(p) = &mut c.load_history {
                fix(p);
            }
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| DicError::Config(e.to_string()))
    }

    /// Checks that do not need the images.
    pub fn validate(&self) -> Result<()> {
        let c = &self.correlation;
        match (&self.paths.frames, &self.paths.frame_list) {
            (None, None) => return Err(config_err("paths", "either `frames` or `frame_list` is required")),
            (Some(_), Some(_)) => return Err(config_err("paths", "`frames` and `frame_list` are exclusive")),
            (None, Some(l)) if l.is_empty() => return Err(config_err("paths.frame_list", "is empty")),
            _ => {}
        }
        if c.half_width == 0 {
            return Err(config_err("correlation.half_width", "must be at least 1"));
        }
        if c.step == 0 {
            return Err(config_err("correlation.step", "must be at least 1"));
        }
        if self.roi.w < c.step || self.roi.h < c.step {
            return Err(config_err("roi", "must be at least one step wide and high"));
        }
        if c.seeds.is_empty() {
            return Err(config_err("correlation.seeds", "at least one seed is required"));
        }
        let grid = self.grid()?;
        for (k, s) in c.seeds.iter().enumerate() {
            let (xmax, ymax) = grid.position(grid.ny() - 1, grid.nx() - 1);
            let inside = s[0] >= grid.origin_x as f64
                && s[1] >= grid.origin_y as f64
                && s[0] <= xmax as f64
                && s[1] <= ymax as f64;
            if !inside {
                return Err(config_err(
                    &format!("correlation.seeds[{k}]"),
                    format!("({}, {}) lies outside the ROI", s[0], s[1]),
                ));
            }
        }
        if !(c.acceptance_zncc > 0.0 && c.acceptance_zncc <= 1.0) {
            return Err(config_err("correlation.acceptance_zncc", "must be in (0, 1]"));
        }
        if c.max_iterations == 0 || !(c.tolerance > 0.0) {
            return Err(config_err("correlation", "max_iterations and tolerance must be positive"));
        }
        if c.workers == 0 {
            return Err(config_err("correlation.workers", "must be at least 1"));
        }
        let inc = &self.incremental;
        if inc.enabled {
            match inc.policy {
                PolicyKind::Every if inc.every == 0 => {
                    return Err(config_err("incremental.every", "must be at least 1"))
                }
                PolicyKind::Trigger
                    if !(0.0..=1.0).contains(&inc.min_seed_zncc)
                        || !(0.0..=1.0).contains(&inc.max_invalid_fraction) =>
                {
                    return Err(config_err("incremental", "trigger thresholds must lie in [0, 1]"))
                }
                _ => {}
            }
        }
        let p = &self.physical;
        if let Some(s) = p.scale_mm_per_px {
            if !(s > 0.0 && s.is_finite()) {
                return Err(config_err("physical.scale_mm_per_px", "must be positive"));
            }
        }
        if !(p.fps > 0.0 && p.fps.is_finite()) {
            return Err(config_err("physical.fps", "must be positive"));
        }
        if let Some(ts) = &p.timestamps_s {
            if ts.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(config_err("physical.timestamps_s", "must be strictly increasing"));
            }
        }
        if let Some(cr) = &self.crack {
            if p.scale_mm_per_px.is_none() {
                return Err(config_err("physical.scale_mm_per_px", "is required for crack analysis"));
            }
            let sources =
                cr.delta_c_mm.is_some() as u8 + cr.pre_peak_frame.is_some() as u8 + cr.load_history.is_some() as u8;
            if sources != 1 {
                return Err(config_err("crack", "give exactly one of delta_c_mm, pre_peak_frame or load_history"));
            }
            if let Some(d) = cr.delta_c_mm {
                if !(d > 0.0 && d.is_finite()) {
                    return Err(config_err("crack.delta_c_mm", "must be positive"));
                }
            } else {
                for (key, g) in [("crack.lx_mm", &cr.lx_mm), ("crack.ly_mm", &cr.ly_mm)] {
                    if g.len() < crate::crack::PLATEAU_MIN || g.windows(2).any(|w| !(w[1] > w[0])) {
                        return Err(config_err(
                            key,
                            format!("needs at least {} ascending offsets", crate::crack::PLATEAU_MIN),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<RoiGrid> {
        RoiGrid::new(self.roi.x, self.roi.y, self.roi.w, self.roi.h, self.correlation.step)
            .map_err(|e| config_err("roi", e))
    }

    /// Checks the ROI against the reference image size.
    pub fn validate_for_image(&self, width: usize, height: usize) -> Result<()> {
        self.grid()?.validate_for(width, height, self.correlation.half_width).map_err(|e| config_err("roi", e))
    }

    pub fn analysis_config(&self) -> AnalysisConfig {
        let c = &self.correlation;
        let inc = &self.incremental;
        AnalysisConfig {
            half_width: c.half_width,
            order: c.order,
            nr: NrSettings { tol: c.tolerance, max_iter: c.max_iterations, ..NrSettings::default() },
            acceptance_zncc: c.acceptance_zncc,
            update: match inc.policy {
                PolicyKind::Trigger => UpdatePolicy::Trigger {
                    min_seed_zncc: inc.min_seed_zncc,
                    max_invalid_fraction: inc.max_invalid_fraction,
                },
                PolicyKind::Every => UpdatePolicy::Every(inc.every),
                PolicyKind::Frames => UpdatePolicy::AtFrames(inc.frames.clone()),
            },
            composition: match inc.composition {
                CompositionKind::Tracked => Composition::Tracked,
                CompositionKind::Interpolated => Composition::Interpolated,
                CompositionKind::Literal => Composition::Literal,
            },
            workers: c.workers,
            ..AnalysisConfig::default()
        }
    }

    /// Advisory messages for the measurement setup.
    pub fn warnings(&self) -> Vec<String> {
        resolution_warnings(
            self.physical.scale_mm_per_px.unwrap_or(0.0),
            self.crack.as_ref().and_then(|c| c.delta_c_mm),
            self.correlation.half_width,
            self.correlation.step,
            self.crack.is_some(),
        )
    }

    /// Timestamps of the deformed frames `1..=n`.
    pub fn frame_times(&self, n: usize) -> Result<Vec<f64>> {
        match &self.physical.timestamps_s {
            Some(ts) if ts.len() == n => Ok(ts.clone()),
            Some(ts) => Err(config_err("physical.timestamps_s", format!("{} timestamps for {n} frames", ts.len()))),
            None => Ok((1..=n).map(|k| k as f64 / self.physical.fps).collect()),
        }
    }
}

// ---------------------------------------------------------------------------
// Frame discovery

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "tif" | "tiff"))
        .unwrap_or(false)
}

/// Skeleton of a file name with each digit run replaced by a marker, and the
/// run lengths.
fn digit_signature(name: &str) -> (String, Vec<usize>) {
    let mut skel = String::new();
    let mut runs = Vec::new();
    let mut run = 0;
    for ch in name.chars() {
        if ch.is_ascii_digit() {
            run += 1;
        } else {
            if run > 0 {
                skel.push('#');
                runs.push(run);
                run = 0;
            }
            skel.push(ch);
        }
    }
    if run > 0 {
        skel.push('#');
        runs.push(run);
    }
    (skel, runs)
}

/// Rejects names whose lexicographic order may differ from their numeric
/// order, i.e. numbers that are not zero-padded to a common width.
fn check_unambiguous(paths: &[PathBuf]) -> Result<()> {
    let mut seen: std::collections::HashMap<String, (Vec<usize>, String)> = Default::default();
    for p in paths {
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let (skel, runs) = digit_signature(&name);
        if let Some((other_runs, other)) = seen.get(&skel) {
            if *other_runs != runs {
                return Err(config_err(
                    "paths.frames",
                    format!(
                        "ambiguous frame order ('{other}' vs '{name}' are not zero-padded alike); use paths.frame_list"
                    ),
                ));
            }
        } else {
            seen.insert(skel, (runs, name));
        }
    }
    Ok(())
}

/// Deformed frames in analysis order, excluding the reference image.
pub fn discover_frames(paths: &PathsConfig) -> Result<Vec<PathBuf>> {
    if let Some(list) = &paths.frame_list {
        return Ok(list.clone());
    }
    let spec = paths.frames.as_deref().ok_or_else(|| config_err("paths.frames", "missing"))?;
    let mut found: Vec<PathBuf> = if Path::new(spec).is_dir() {
        fs::read_dir(spec)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_file() && is_image(p)).collect()
    } else {
        glob::glob(spec)
            .map_err(|e| config_err("paths.frames", e))?
            .filter_map(|p| p.ok())
            .filter(|p| p.is_file())
            .collect()
    };
    let reference = fs::canonicalize(&paths.reference).ok();
    found.retain(|p| fs::canonicalize(p).ok() != reference);
    found.sort_by(|a, b| a.file_name().cmp(&b.file_name()).then_with(|| a.cmp(b)));
    if found.is_empty() {
        return Err(config_err("paths.frames", format!("no frames match '{spec}'")));
    }
    check_unambiguous(&found)?;
    Ok(found)
}

// ---------------------------------------------------------------------------
// Commands

#[derive(Debug, Parser)]
#[command(name = "dic", version, about = "Digital image correlation and crack detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the mean intensity gradient of an image.
    Mig {
        /// PNG or TIFF image.
        image: PathBuf,
        /// Quality floor; below it the command warns and exits with 1.
        #[arg(long, default_value_t = 20.0)]
        floor: f64,
    },
    /// Generate the rotation benchmark and tabulate each mode's error.
    Synth(SynthArgs),
    /// Correlate a frame sequence and write displacement fields.
    #[command(after_long_help = CONFIG_HELP)]
    Analyze(ConfigArgs),
    /// Correlate, determine δc if needed, detect crack edges and track the tip.
    #[command(after_long_help = CONFIG_HELP)]
    Crack {
        #[command(flatten)]
        config: ConfigArgs,
        /// Overrides crack.delta_c_mm (and any δc determination).
        #[arg(long)]
        delta_c: Option<f64>,
        /// Read fields written by a previous `analyze` instead of correlating.
        #[arg(long)]
        reuse_fields: bool,
    },
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Deformed frames to render.
    #[arg(long, default_value_t = 50)]
    pub frames: usize,
    /// Final rotation angle in degrees.
    #[arg(long, default_value_t = 15.0)]
    pub alpha_max: f64,
    /// Comma-separated subset of one-seed, multi-seed, incremental-multi-seed.
    #[arg(long, value_delimiter = ',')]
    pub modes: Option<Vec<String>>,
    /// Speckle RNG seed.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Grid step in pixels.
    #[arg(long, default_value_t = 8)]
    pub step: usize,
    /// Reference update interval of the incremental mode.
    #[arg(long, default_value_t = 10)]
    pub update_every: usize,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Skip writing the rendered frames.
    #[arg(long)]
    pub no_images: bool,
    /// Skip the SVG plot.
    #[arg(long)]
    pub no_plot: bool,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Configuration file or run manifest.
    #[arg(long, short)]
    pub config: PathBuf,
    /// Overrides paths.output.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Overrides correlation.workers.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Overrides correlation.step.
    #[arg(long)]
    pub step: Option<usize>,
    /// Overrides correlation.half_width.
    #[arg(long)]
    pub half_width: Option<usize>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(o) = &self.output {
            cfg.paths.output = o.clone();
        }
        if let Some(w) = self.workers {
            cfg.correlation.workers = w;
        }
        if let Some(s) = self.step {
            cfg.correlation.step = s;
        }
        if let Some(m) = self.half_width {
            cfg.correlation.half_width = m;
        }
        Ok(cfg)
    }
}

/// Parses arguments and runs the command; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Mig { image, floor } => cmd_mig(&image, floor),
        Command::Synth(a) => cmd_synth(&a),
        Command::Analyze(a) => a.load().and_then(|cfg| cmd_analyze(&cfg)),
        Command::Crack { config, delta_c, reuse_fields } => config.load().and_then(|mut cfg| {
            if let Some(d) = delta_c {
                let c = cfg.crack.get_or_insert_with(CrackConfig::default);
                c.delta_c_mm = Some(d);
                c.pre_peak_frame = None;
                c.load_history = None;
            }
            cmd_crack(&cfg, reuse_fields)
        }),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn cmd_mig(path: &Path, floor: f64) -> Result<i32> {
    let img = load_image(path, None)?;
    let mig = mean_intensity_gradient(&img);
    println!("{mig:.2}");
    if mig < floor {
        eprintln!("warning: mean intensity gradient {mig:.2} is below the quality floor {floor}");
        return Ok(EXIT_FAILURE);
    }
    Ok(EXIT_OK)
}

pub fn cmd_synth(a: &SynthArgs) -> Result<i32> {
    let modes = match &a.modes {
        None => BenchmarkMode::ALL.to_vec(),
        Some(list) => list.iter().map(|m| BenchmarkMode::parse(m.trim())).collect::<Result<Vec<_>>>()?,
    };
    if a.frames == 0 {
        return Err(config_err("--frames", "must be at least 1"));
    }
    let d = BenchmarkSpec::default();
    let spec = BenchmarkSpec {
        frames: a.frames,
        alpha_max_deg: a.alpha_max,
        speckle: SpeckleSpec { seed: a.seed, ..d.speckle.clone() },
        step: a.step,
        update_every: a.update_every,
        analysis: AnalysisConfig { workers: a.workers.max(1), ..d.analysis.clone() },
        ..d
    };
    let data = spec.render()?;
    fs::create_dir_all(&a.out)?;
    if !a.no_images {
        let dir = a.out.join("frames");
        fs::create_dir_all(&dir)?;
        for (k, f) in data.frames.iter().enumerate() {
            f.save_png8(dir.join(format!("frame_{k:04}.png")))?;
        }
    }
    let rows = spec.evaluate(&data, &modes)?;
    io::write_benchmark_csv(fs::File::create(a.out.join("benchmark.csv"))?, &rows)?;
    if !a.no_plot {
        fs::write(a.out.join("benchmark.svg"), io::benchmark_svg(&rows))?;
    }
    println!("speckle MIG {:.2} (seed {})", data.speckle.mig, data.speckle.seed);
    for m in &modes {
        if let Some(r) = rows.iter().rfind(|r| r.mode == *m) {
            println!(
                "{:<24} frame {:>3}  alpha {:>6.2}  MAE_x {:.4} px  MAE_y {:.4} px  invalid {}",
                m.name(),
                r.frame,
                r.alpha_deg,
                r.mae_x,
                r.mae_y,
                r.invalid_count
            );
        }
    }
    Ok(EXIT_OK)
}

/// Per-frame entry of the run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSummary {
    pub frame: usize,
    pub path: PathBuf,
    pub time_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_zncc: Option<f64>,
    pub valid_count: usize,
    pub invalid_count: usize,
}

/// Written next to the fields; its `config` table is a complete
/// configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub reference_updates: Vec<usize>,
    pub failed_frames: Vec<usize>,
    pub warnings: Vec<String>,
    pub config: RunConfig,
    pub frames: Vec<FrameSummary>,
}

/// Images and fields of one correlated sequence.
pub struct AnalysisRun {
    pub images: Vec<GrayImage>,
    pub frame_paths: Vec<PathBuf>,
    pub times: Vec<f64>,
    pub fields: Vec<DisplacementField>,
    pub reference_updates: Vec<usize>,
    pub failed_frames: Vec<usize>,
}

fn load_sequence(cfg: &RunConfig) -> Result<(Vec<GrayImage>, Vec<PathBuf>, Vec<f64>)> {
    cfg.validate()?;
    let scale = cfg.physical.scale_mm_per_px;
    let reference = load_image(&cfg.paths.reference, scale)?;
    cfg.validate_for_image(reference.width(), reference.height())?;
    let paths = discover_frames(&cfg.paths)?;
    let times = cfg.frame_times(paths.len())?;
    let mut images = vec![reference];
    for p in &paths {
        let img = load_image(p, scale)?;
        if (img.width(), img.height()) != (images[0].width(), images[0].height()) {
            return Err(DicError::InvalidImage(format!("{} differs in size from the reference", p.display())));
        }
        images.push(img);
    }
    Ok((images, paths, times))
}

pub fn run_analysis(cfg: &RunConfig) -> Result<AnalysisRun> {
    let (images, frame_paths, times) = load_sequence(cfg)?;
    let grid = cfg.grid()?;
    let seeds = SeedSpec::from_pixels(
        &grid,
        &cfg.correlation.seeds.iter().map(|s| (s[0], s[1])).collect::<Vec<_>>(),
        cfg.correlation.search_radius,
    )
    .map_err(|e| config_err("correlation.seeds", e))?;
    let out = analyze_sequence_tolerant(&images, &grid, &seeds, &cfg.analysis_config(), cfg.incremental.enabled)?;
    let fields = out.fields.into_iter().zip(&times).map(|(f, &t)| f.with_time(Some(t))).collect();
    Ok(AnalysisRun {
        images,
        frame_paths,
        times,
        fields,
        reference_updates: out.chain.references.into_iter().filter(|&r| r > 0).collect(),
        failed_frames: out.failed_frames,
    })
}

fn print_warnings(w: &[String]) {
    for m in w {
        eprintln!("warning: {m}");
    }
}

fn write_fields(dir: &Path, run: &AnalysisRun) -> Result<()> {
    fs::create_dir_all(dir)?;
    for f in &run.fields {
        let k = f.frame();
        io::write_field_csv(fs::File::create(dir.join(format!("frame_{k:04}.csv")))?, f)?;
        io::write_dicf(std::io::BufWriter::new(fs::File::create(dir.join(format!("frame_{k:04}.dicf")))?), f)?;
    }
    Ok(())
}

pub fn cmd_analyze(cfg: &RunConfig) -> Result<i32> {
    let warnings = cfg.warnings();
    print_warnings(&warnings);
    let run = run_analysis(cfg)?;
    let out = &cfg.paths.output;
    write_fields(&out.join("fields"), &run)?;
    let frames: Vec<FrameSummary> = run
        .fields
        .iter()
        .zip(&run.frame_paths)
        .map(|(f, p)| FrameSummary {
            frame: f.frame(),
            path: p.clone(),
            time_s: f.time_s().unwrap_or(f64::NAN),
            mean_zncc: f.mean_zncc(),
            valid_count: f.valid_count(),
            invalid_count: f.invalid_count(),
        })
        .collect();
    for s in &frames {
        println!(
            "frame {:>4}  valid {:>7}  invalid {:>7}  mean ZNCC {}",
            s.frame,
            s.valid_count,
            s.invalid_count,
            s.mean_zncc.map_or("-".into(), |z| format!("{z:.4}"))
        );
    }
    let manifest = Manifest {
        reference_updates: run.reference_updates.clone(),
        failed_frames: run.failed_frames.clone(),
        warnings,
        config: cfg.clone(),
        frames,
    };
    let text = toml::to_string_pretty(&manifest).map_err(|e| DicError::Config(e.to_string()))?;
    fs::write(out.join("manifest.toml"), text)?;
    if !run.reference_updates.is_empty() {
        println!("reference updated after frames {:?}", run.reference_updates);
    }
    if !run.failed_frames.is_empty() {
        eprintln!("error: every seed failed in frames {:?}", run.failed_frames);
        return Ok(EXIT_CORRELATION);
    }
    Ok(EXIT_OK)
}

fn growth_side(dir: GrowthDirection, orientation: Orientation) -> Option<f64> {
    match (dir, orientation) {
        (GrowthDirection::Auto, _) => None,
        (GrowthDirection::Up, Orientation::Vertical) | (GrowthDirection::Left, Orientation::Horizontal) => Some(1.0),
        (GrowthDirection::Down, Orientation::Vertical) | (GrowthDirection::Right, Orientation::Horizontal) => {
            Some(-1.0)
        }
        _ => None,
    }
}

fn write_plateau(path: &Path, p: &Plateau, lx: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["lx_mm", "ly_mm", "ctod_mm", "in_plateau"])?;
    for (k, probe) in p.probes.iter().enumerate() {
        let (row, col) = (k / lx.len(), k % lx.len());
        let inside = (p.ly_range.0..=p.ly_range.1).contains(&row) && (p.lx_range.0..=p.lx_range.1).contains(&col);
        w.write_record([
            probe.lx_mm.to_string(),
            probe.ly_mm.to_string(),
            if probe.ctod_mm.is_finite() { probe.ctod_mm.to_string() } else { String::new() },
            (inside as u8).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_crack(cfg: &RunConfig, reuse_fields: bool) -> Result<i32> {
    let crack = cfg.crack.clone().ok_or_else(|| config_err("crack", "section is required"))?;
    let scale = cfg.physical.scale_mm_per_px.ok_or(DicError::MissingScale)?;
    print_warnings(&cfg.warnings());
    let out = cfg.paths.output.clone();
    fs::create_dir_all(&out)?;

    let run = if reuse_fields {
        let (images, frame_paths, times) = load_sequence(cfg)?;
        let dir = out.join("fields");
        let fields = (1..images.len())
            .map(|k| {
                let f = fs::File::open(dir.join(format!("frame_{k:04}.dicf")))?;
                Ok(io::read_dicf(std::io::BufReader::new(f), k)?.with_scale(Some(scale)).with_time(Some(times[k - 1])))
            })
            .collect::<Result<Vec<_>>>()?;
        AnalysisRun { images, frame_paths, times, fields, reference_updates: Vec::new(), failed_frames: Vec::new() }
    } else {
        let run = run_analysis(cfg)?;
        write_fields(&out.join("fields"), &run)?;
        run
    };
    if !run.failed_frames.is_empty() {
        eprintln!("warning: every seed failed in frames {:?}", run.failed_frames);
    }

    let mut tip_hint: Option<CrackTip> = None;
    let delta_c = match crack.delta_c_mm {
        Some(d) => d,
        None => {
            let frame = match (crack.pre_peak_frame, &crack.load_history) {
                (Some(k), _) => k,
                (None, Some(p)) => {
                    let history = io::read_load_history(fs::File::open(p)?)?;
                    io::pre_peak_frame(&history, &run.times)? + 1
                }
                (None, None) => unreachable!("validated"),
            };
            let field = run
                .fields
                .get(frame.wrapping_sub(1))
                .ok_or_else(|| config_err("crack.pre_peak_frame", format!("frame {frame} does not exist")))?;
            let tip = locate_crack_tip(field, crack.orientation, &TipSearch::default())?;
            let plateau = determine_delta_c(field, &tip, &crack.lx_mm, &crack.ly_mm)?;
            write_plateau(&out.join("plateau.csv"), &plateau, &crack.lx_mm)?;
            println!(
                "δc = {:.5} mm from frame {frame} (plateau onset at Lx = {} mm, Ly = {} mm)",
                plateau.delta_c_mm, plateau.onset_lx_mm, plateau.onset_ly_mm
            );
            tip_hint = Some(tip);
            plateau.delta_c_mm
        }
    };
    print_warnings(&resolution_warnings(scale, Some(delta_c), 0, 0, false));

    let side = growth_side(crack.grows_toward, crack.orientation)
        .or(tip_hint.map(|t| t.side))
        .or_else(|| {
            run.fields
                .iter()
                .rev()
                .find_map(|f| locate_crack_tip(f, crack.orientation, &TipSearch::default()).ok())
                .map(|t| t.side)
        })
        .unwrap_or(1.0);
    let report = analyze_crack_sequence(&run.fields, &run.times, crack.orientation, side, delta_c)?;

    io::write_crack_csv(fs::File::create(out.join("crack.csv"))?, &report)?;
    let edge_dir = out.join("edges");
    fs::create_dir_all(&edge_dir)?;
    let overlay_dir = out.join("overlays");
    for f in &report.frames {
        io::write_edges_csv(fs::File::create(edge_dir.join(format!("frame_{:04}.csv", f.frame)))?, &f.edges)?;
        if crack.overlay && !f.edges.is_empty() {
            fs::create_dir_all(&overlay_dir)?;
            let img = io::edge_overlay(&run.images[f.frame], &f.edges, scale, crack.overlay_radius);
            io::save_rgb_png(&img, overlay_dir.join(format!("frame_{:04}.png", f.frame)))?;
        }
    }
    if !report.crack_detected() {
        println!("no crack detected (δc = {delta_c} mm)");
        return Ok(EXIT_OK);
    }
    println!("first flagged frame: {}", report.first_flagged_frame().unwrap_or(0));
    match &report.track {
        Some(t) => println!("mean tip speed: {:.4} mm/s over {} located tips", t.mean_speed_mm_s, t.trajectory.len()),
        None => println!("tip located in fewer than two frames; no speed"),
    }
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [paths]
        reference = "ref.png"
        frames = "frames"
        output = "out"
        [roi]
        x = 30
        y = 30
        w = 40
        h = 40
        [correlation]
        seeds = [[40.0, 40.0]]
    "#;

    #[test]
    fn defaults_fill_missing_sections() {
        let c = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.correlation.half_width, 11);
        assert_eq!(c.correlation.step, 2);
        assert!(c.incremental.enabled);
        assert_eq!(c.physical.fps, 4.0);
        assert!(c.crack.is_none());
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = MINIMAL.replace("w = 40", "w = 40\nwidth = 3");
        assert!(matches!(RunConfig::parse(&bad), Err(DicError::Config(_))));
    }

    #[test]
    fn seed_outside_roi_names_the_field() {
        let c = RunConfig::parse(&MINIMAL.replace("[[40.0, 40.0]]", "[[40.0, 40.0], [5.0, 40.0]]")).unwrap();
        let e = c.validate().unwrap_err().to_string();
        assert!(e.contains("correlation.seeds[1]"), "{e}");
    }

    #[test]
    fn roi_must_leave_room_for_subsets() {
        let c = RunConfig::parse(MINIMAL).unwrap();
        c.validate_for_image(100, 100).unwrap();
        assert!(c.validate_for_image(75, 100).is_err());
    }

    #[test]
    fn crack_needs_scale_and_one_delta_source() {
        let mut c = RunConfig::parse(MINIMAL).unwrap();
        c.crack = Some(CrackConfig { delta_c_mm: Some(0.025), ..CrackConfig::default() });
        assert!(c.validate().unwrap_err().to_string().contains("scale_mm_per_px"));
        c.physical.scale_mm_per_px = Some(0.008);
        c.validate().unwrap();
        c.crack.as_mut().unwrap().pre_peak_frame = Some(3);
        assert!(c.validate().is_err());
    }

    #[test]
    fn coarse_step_warns_with_crack_enabled() {
        let mut c = RunConfig::parse(MINIMAL).unwrap();
        c.correlation.step = 12;
        c.correlation.half_width = 11;
        assert!(c.warnings().is_empty());
        c.crack = Some(CrackConfig { delta_c_mm: Some(0.025), ..CrackConfig::default() });
        assert!(c.warnings().iter().any(|w| w.contains("step exceeds 1/6 of subset size")));
    }

    #[test]
    fn config_survives_manifest_echo() {
        let mut c = RunConfig::parse(MINIMAL).unwrap();
        c.crack = Some(CrackConfig { lx_mm: vec![0.1, 0.2, 0.3], pre_peak_frame: Some(2), ..Default::default() });
        c.physical.timestamps_s = Some(vec![0.5, 1.0]);
        let m = Manifest {
            reference_updates: vec![3],
            failed_frames: vec![],
            warnings: vec!["w".into()],
            config: c.clone(),
            frames: vec![FrameSummary {
                frame: 1,
                path: "f1.png".into(),
                time_s: 0.5,
                mean_zncc: None,
                valid_count: 4,
                invalid_count: 0,
            }],
        };
        let text = toml::to_string_pretty(&m).unwrap();
        assert_eq!(RunConfig::parse(&text).unwrap(), c);
        let back: Manifest = toml::from_str(&text).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn unpadded_names_are_ambiguous() {
        let p = |s: &str| PathBuf::from(s);
        assert!(check_unambiguous(&[p("f01.png"), p("f02.png"), p("f10.png")]).is_ok());
        assert!(check_unambiguous(&[p("f1.png"), p("f2.png"), p("f10.png")]).is_err());
    }

    #[test]
    fn growth_direction_maps_to_side() {
        assert_eq!(growth_side(GrowthDirection::Up, Orientation::Vertical), Some(1.0));
        assert_eq!(growth_side(GrowthDirection::Down, Orientation::Vertical), Some(-1.0));
        assert_eq!(growth_side(GrowthDirection::Right, Orientation::Horizontal), Some(-1.0));
        assert_eq!(growth_side(GrowthDirection::Auto, Orientation::Vertical), None);
    }
}
