//! File formats: displacement fields (CSV and the compact DICF binary),
//! benchmark and crack tables, load histories, red edge overlays and a small
//! SVG plot of benchmark errors.
//!
//! Every CSV written here parses back with the matching reader. Grids are
//! rebuilt in normalized form, `width = nx * step`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::crack::{CrackReport, EdgePair, EdgePoint};
use crate::error::{DicError, Result};
use crate::image::GrayImage;
use crate::rgdic::{DisplacementField, RoiGrid};
use crate::synthetic::{BenchmarkMode, BenchmarkRow};

fn opt(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FieldRow {
    frame: usize,
    grid_x: usize,
    grid_y: usize,
    pixel_x: usize,
    pixel_y: usize,
    u_px: Option<f64>,
    v_px: Option<f64>,
    u_mm: Option<f64>,
    v_mm: Option<f64>,
    zncc: Option<f64>,
    valid: u8,
}

/// Writes a field as CSV, one row per grid point in row-major order.
/// Invalid points leave the displacement cells empty; the mm columns are
/// empty when the field has no scale.
pub fn write_field_csv<W: Write>(writer: W, field: &DisplacementField) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let g = field.grid();
    let scale = field.scale();
    for i in 0..g.len() {
        let (r, c) = g.row_col(i);
        let (x, y) = g.position(r, c);
        let d = field.get_index(i);
        let mm = |p: f64| scale.map(|s| p * s);
        w.serialize(FieldRow {
            frame: field.frame(),
            grid_x: c,
            grid_y: r,
            pixel_x: x,
            pixel_y: y,
            u_px: d.map(|d| d.0),
            v_px: d.map(|d| d.1),
            u_mm: d.and_then(|d| mm(d.0)),
            v_mm: d.and_then(|d| mm(d.1)),
            zncc: opt(field.zncc_values()[i]),
            valid: d.is_some() as u8,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Reads every frame of a field CSV, in frame order. The scale is recovered
/// from the mm columns when some displacement is non-zero; reference frame
/// and timestamps are not part of the format.
pub fn read_field_csv<R: Read>(reader: R) -> Result<Vec<DisplacementField>> {
    let mut rd = csv::Reader::from_reader(reader);
    let mut frames: BTreeMap<usize, Vec<FieldRow>> = BTreeMap::new();
    for row in rd.deserialize() {
        let row: FieldRow = row?;
        frames.entry(row.frame).or_default().push(row);
    }
    frames.into_iter().map(|(frame, rows)| field_from_rows(frame, rows)).collect()
}

fn field_from_rows(frame: usize, rows: Vec<FieldRow>) -> Result<DisplacementField> {
    let bad = |m: &str| DicError::Format(format!("frame {frame}: {m}"));
    let nx = rows.iter().map(|r| r.grid_x).max().ok_or_else(|| bad("no rows"))? + 1;
    let ny = rows.iter().map(|r| r.grid_y).max().unwrap_or(0) + 1;
    if rows.len() != nx * ny {
        return Err(bad("grid is not complete"));
    }
    let first = rows.iter().find(|r| r.grid_x == 0 && r.grid_y == 0).ok_or_else(|| bad("missing origin"))?;
    let (ox, oy) = (first.pixel_x, first.pixel_y);
    let step = rows
        .iter()
        .find_map(|r| (r.pixel_x - ox).checked_div(r.grid_x).or_else(|| (r.pixel_y - oy).checked_div(r.grid_y)))
        .unwrap_or(1);
    let grid = RoiGrid::new(ox, oy, nx * step, ny * step, step)?;
    let mut values = vec![None; grid.len()];
    let mut zncc = vec![f64::NAN; grid.len()];
    let mut scale = None;
    for r in &rows {
        if (r.pixel_x, r.pixel_y) != grid.position(r.grid_y, r.grid_x) {
            return Err(bad("pixel positions do not form a regular grid"));
        }
        let i = grid.index(r.grid_y, r.grid_x);
        zncc[i] = r.zncc.unwrap_or(f64::NAN);
        if r.valid != 0 {
            let (u, v) = r.u_px.zip(r.v_px).ok_or_else(|| bad("valid point without displacement"))?;
            values[i] = Some((u, v));
            if scale.is_none() {
                if let Some(um) = r.u_mm.filter(|_| u != 0.0) {
                    scale = Some(um / u);
                } else if let Some(vm) = r.v_mm.filter(|_| v != 0.0) {
                    scale = Some(vm / v);
                }
            }
        }
    }
    Ok(DisplacementField::from_values(grid, frame, 0, &values, &zncc)?.with_scale(scale))
}

pub const DICF_MAGIC: &[u8; 4] = b"DICF";
pub const DICF_VERSION: u8 = 1;
const DICF_HAS_SCALE: u8 = 1;

/// Writes the compact binary form: a 32-byte little-endian header
/// (`"DICF"`, version u8, flags u8, step u16, nx, ny, origin x, origin y as
/// u32, scale f64) followed by `u, v, zncc` as f64 per point in row-major
/// order, NaN marking invalid displacements.
pub fn write_dicf<W: Write>(mut w: W, field: &DisplacementField) -> Result<()> {
    let g = field.grid();
    let step = u16::try_from(g.step).map_err(|_| DicError::Format("step does not fit in u16".into()))?;
    let u32_of = |v: usize| u32::try_from(v).map_err(|_| DicError::Format("grid does not fit in u32".into()));
    let mut h = Vec::with_capacity(32);
    h.extend_from_slice(DICF_MAGIC);
    h.push(DICF_VERSION);
    h.push(if field.scale().is_some() { DICF_HAS_SCALE } else { 0 });
    h.extend_from_slice(&step.to_le_bytes());
    for v in [g.nx(), g.ny(), g.origin_x, g.origin_y] {
        h.extend_from_slice(&u32_of(v)?.to_le_bytes());
    }
    h.extend_from_slice(&field.scale().unwrap_or(0.0).to_le_bytes());
    debug_assert_eq!(h.len(), 32);
    w.write_all(&h)?;
    let mut body = Vec::with_capacity(g.len() * 24);
    for i in 0..g.len() {
        let (u, v) = field.get_index(i).unwrap_or((f64::NAN, f64::NAN));
        for x in [u, v, field.zncc_values()[i]] {
            body.extend_from_slice(&x.to_le_bytes());
        }
    }
    w.write_all(&body)?;
    Ok(())
}

/// Reads a DICF stream written by [`write_dicf`]. The frame number is not
/// stored; pass the one to attach.
pub fn read_dicf<R: Read>(mut r: R, frame: usize) -> Result<DisplacementField> {
    let mut h = [0u8; 32];
    r.read_exact(&mut h)?;
    if &h[0..4] != DICF_MAGIC {
        return Err(DicError::Format("not a DICF stream".into()));
    }
    if h[4] != DICF_VERSION {
        return Err(DicError::Format(format!("unsupported DICF version {}", h[4])));
    }
    let u32_at = |o: usize| u32::from_le_bytes(h[o..o + 4].try_into().unwrap()) as usize;
    let step = u16::from_le_bytes([h[6], h[7]]) as usize;
    let (nx, ny, ox, oy) = (u32_at(8), u32_at(12), u32_at(16), u32_at(20));
    let scale = f64::from_le_bytes(h[24..32].try_into().unwrap());
    let grid = RoiGrid::new(ox, oy, nx * step, ny * step, step)?;
    let mut body = vec![0u8; grid.len() * 24];
    r.read_exact(&mut body)?;
    let f = |k: usize| f64::from_le_bytes(body[k * 8..k * 8 + 8].try_into().unwrap());
    let mut values = Vec::with_capacity(grid.len());
    let mut zncc = Vec::with_capacity(grid.len());
    for i in 0..grid.len() {
        let (u, v) = (f(3 * i), f(3 * i + 1));
        values.push((u.is_finite() && v.is_finite()).then_some((u, v)));
        zncc.push(f(3 * i + 2));
    }
    let scale = (h[5] & DICF_HAS_SCALE != 0).then_some(scale);
    Ok(DisplacementField::from_values(grid, frame, 0, &values, &zncc)?.with_scale(scale))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BenchmarkCsvRow {
    mode: String,
    frame: usize,
    alpha_deg: f64,
    mae_x_px: Option<f64>,
    mae_y_px: Option<f64>,
    invalid_count: usize,
    strict_mae_x_px: f64,
    strict_mae_y_px: f64,
    point_count: usize,
}

/// Writes the per-frame error table. Frames without a valid point leave the
/// MAE cells empty; the strict columns charge invalid points a fixed penalty.
pub fn write_benchmark_csv<W: Write>(writer: W, rows: &[BenchmarkRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(BenchmarkCsvRow {
            mode: r.mode.name().to_string(),
            frame: r.frame,
            alpha_deg: r.alpha_deg,
            mae_x_px: opt(r.mae_x),
            mae_y_px: opt(r.mae_y),
            invalid_count: r.invalid_count,
            strict_mae_x_px: r.strict_mae_x,
            strict_mae_y_px: r.strict_mae_y,
            point_count: r.point_count,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_benchmark_csv<R: Read>(reader: R) -> Result<Vec<BenchmarkRow>> {
    let mut rd = csv::Reader::from_reader(reader);
    rd.deserialize()
        .map(|row| {
            let r: BenchmarkCsvRow = row?;
            Ok(BenchmarkRow {
                mode: BenchmarkMode::parse(&r.mode)?,
                frame: r.frame,
                alpha_deg: r.alpha_deg,
                mae_x: r.mae_x_px.unwrap_or(f64::NAN),
                mae_y: r.mae_y_px.unwrap_or(f64::NAN),
                strict_mae_x: r.strict_mae_x_px,
                strict_mae_y: r.strict_mae_y_px,
                invalid_count: r.invalid_count,
                point_count: r.point_count,
            })
        })
        .collect()
}

/// One line of the crack summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrackRow {
    pub frame: usize,
    pub time_s: f64,
    pub tip_x_mm: Option<f64>,
    pub tip_y_mm: Option<f64>,
    pub n_edge_points: usize,
    /// Speed over the interval ending at this frame's tip.
    pub speed_mm_s: Option<f64>,
}

/// Distinct correlation points taking part in the flagged pairs.
pub fn edge_point_count(edges: &[EdgePair]) -> usize {
    edges.iter().flat_map(|e| [(e.low.row, e.low.col), (e.high.row, e.high.col)]).collect::<BTreeSet<_>>().len()
}

pub fn crack_rows(report: &CrackReport) -> Vec<CrackRow> {
    let mut speeds = BTreeMap::new();
    if let Some(track) = &report.track {
        for (k, s) in track.interval_speeds.iter().enumerate() {
            speeds.insert(track.trajectory[k + 1].0, *s);
        }
    }
    report
        .frames
        .iter()
        .map(|f| CrackRow {
            frame: f.frame,
            time_s: f.time_s,
            tip_x_mm: f.tip.map(|t| t.x_mm),
            tip_y_mm: f.tip.map(|t| t.y_mm),
            n_edge_points: edge_point_count(&f.edges),
            speed_mm_s: speeds.get(&f.frame).copied(),
        })
        .collect()
}

pub fn write_crack_csv<W: Write>(writer: W, report: &CrackReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in crack_rows(report) {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_crack_csv<R: Read>(reader: R) -> Result<Vec<CrackRow>> {
    let mut rd = csv::Reader::from_reader(reader);
    rd.deserialize().map(|r| r.map_err(DicError::from)).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EdgeRow {
    rel_row: usize,
    rel_col: usize,
    opening_mm: f64,
    low_row: usize,
    low_col: usize,
    low_x_mm: f64,
    low_y_mm: f64,
    low_def_x_mm: f64,
    low_def_y_mm: f64,
    high_row: usize,
    high_col: usize,
    high_x_mm: f64,
    high_y_mm: f64,
    high_def_x_mm: f64,
    high_def_y_mm: f64,
}

pub fn write_edges_csv<W: Write>(writer: W, edges: &[EdgePair]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    if edges.is_empty() {
        // Keep the header so that empty frames still parse.
        w.write_record([
            "rel_row",
            "rel_col",
            "opening_mm",
            "low_row",
            "low_col",
            "low_x_mm",
            "low_y_mm",
            "low_def_x_mm",
            "low_def_y_mm",
            "high_row",
            "high_col",
            "high_x_mm",
            "high_y_mm",
            "high_def_x_mm",
            "high_def_y_mm",
        ])?;
    }
    for e in edges {
        w.serialize(EdgeRow {
            rel_row: e.rel_row,
            rel_col: e.rel_col,
            opening_mm: e.opening_mm,
            low_row: e.low.row,
            low_col: e.low.col,
            low_x_mm: e.low.ref_mm.0,
            low_y_mm: e.low.ref_mm.1,
            low_def_x_mm: e.low.def_mm.0,
            low_def_y_mm: e.low.def_mm.1,
            high_row: e.high.row,
            high_col: e.high.col,
            high_x_mm: e.high.ref_mm.0,
            high_y_mm: e.high.ref_mm.1,
            high_def_x_mm: e.high.def_mm.0,
            high_def_y_mm: e.high.def_mm.1,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_edges_csv<R: Read>(reader: R) -> Result<Vec<EdgePair>> {
    let mut rd = csv::Reader::from_reader(reader);
    rd.deserialize()
        .map(|row| {
            let r: EdgeRow = row?;
            Ok(EdgePair {
                rel_row: r.rel_row,
                rel_col: r.rel_col,
                opening_mm: r.opening_mm,
                low: EdgePoint {
                    row: r.low_row,
                    col: r.low_col,
                    ref_mm: (r.low_x_mm, r.low_y_mm),
                    def_mm: (r.low_def_x_mm, r.low_def_y_mm),
                },
                high: EdgePoint {
                    row: r.high_row,
                    col: r.high_col,
                    ref_mm: (r.high_x_mm, r.high_y_mm),
                    def_mm: (r.high_def_x_mm, r.high_def_y_mm),
                },
            })
        })
        .collect()
}

/// One sample of a test machine's load history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoadSample {
    pub time_s: f64,
    #[serde(rename = "load_kN")]
    pub load_kn: f64,
    pub displacement_mm: f64,
}

pub fn read_load_history<R: Read>(reader: R) -> Result<Vec<LoadSample>> {
    let mut rd = csv::Reader::from_reader(reader);
    let rows: Vec<LoadSample> = rd.deserialize().collect::<std::result::Result<_, _>>()?;
    if rows.is_empty() {
        return Err(DicError::Format("load history is empty".into()));
    }
    Ok(rows)
}

/// Index of the last frame captured at or before the peak load (first
/// occurrence of the maximum).
pub fn pre_peak_frame(history: &[LoadSample], frame_times_s: &[f64]) -> Result<usize> {
    let peak = history
        .iter()
        .filter(|s| s.load_kn.is_finite())
        .fold(None::<&LoadSample>, |best, s| match best {
            Some(b) if b.load_kn >= s.load_kn => Some(b),
            _ => Some(s),
        })
        .ok_or_else(|| DicError::Format("load history has no finite load".into()))?;
    frame_times_s
        .iter()
        .rposition(|&t| t <= peak.time_s)
        .ok_or_else(|| DicError::InvalidArgument(format!("no frame precedes the peak load at {} s", peak.time_s)))
}

/// Paints the deformed positions of all edge points red on top of the frame.
/// Each point becomes a `(2 * radius + 1)`-pixel square.
pub fn edge_overlay(frame: &GrayImage, edges: &[EdgePair], scale_mm: f64, radius: usize) -> image::RgbImage {
    let (w, h) = (frame.width(), frame.height());
    let mut img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let g = (frame.get(x as usize, y as usize) * 255.0).round().clamp(0.0, 255.0) as u8;
        image::Rgb([g, g, g])
    });
    let r = radius as i64;
    for p in edges.iter().flat_map(|e| [e.low, e.high]) {
        let cx = (p.def_mm.0 / scale_mm).round() as i64;
        let cy = (p.def_mm.1 / scale_mm).round() as i64;
        for y in cy - r..=cy + r {
            for x in cx - r..=cx + r {
                if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
                    img.put_pixel(x as u32, y as u32, image::Rgb([255, 0, 0]));
                }
            }
        }
    }
    img
}

pub fn save_rgb_png(img: &image::RgbImage, path: impl AsRef<Path>) -> Result<()> {
    img.save(path.as_ref())
        .map_err(|e| DicError::ImageRead { path: path.as_ref().to_path_buf(), reason: e.to_string() })
}

/// MAE_x per frame, one polyline per mode.
pub fn benchmark_svg(rows: &[BenchmarkRow]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 50.0;
    let max_frame = rows.iter().map(|r| r.frame).max().unwrap_or(1).max(1) as f64;
    let max_err = rows.iter().map(|r| r.mae_x).filter(|v| v.is_finite()).fold(0.0f64, f64::max).max(1e-3);
    let px = |f: usize| M + (W - 2.0 * M) * f as f64 / max_frame;
    let py = |e: f64| H - M - (H - 2.0 * M) * e / max_err;
    let colors = ["#d62728", "#1f77b4", "#2ca02c"];
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{M}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">frame</text>\n\
         <text x=\"12\" y=\"{}\" transform=\"rotate(-90 12 {})\" text-anchor=\"middle\">MAE x (px)</text>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{max_err:.3}</text>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"end\">0</text>\n",
        H - M,
        W - M,
        H - M,
        H - M,
        W / 2.0,
        H - 12.0,
        H / 2.0,
        H / 2.0,
        M - 4.0,
        M + 4.0,
        M - 4.0,
        H - M,
    );
    for (k, mode) in BenchmarkMode::ALL.iter().enumerate() {
        let pts: Vec<String> = rows
            .iter()
            .filter(|r| r.mode == *mode && r.mae_x.is_finite())
            .map(|r| format!("{:.1},{:.1}", px(r.frame), py(r.mae_x)))
            .collect();
        if pts.is_empty() {
            continue;
        }
        let c = colors[k % colors.len()];
        s.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{c}\" stroke-width=\"1.5\" points=\"{}\"/>\n\
             <text x=\"{}\" y=\"{}\" fill=\"{c}\">{}</text>\n",
            pts.join(" "),
            M + 10.0,
            M + 16.0 * (k as f64 + 1.0),
            mode.name()
        ));
    }
    s.push_str("</svg>\n");
    s
}
