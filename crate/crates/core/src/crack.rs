//! Crack detection from displacement fields.
//!
//! A crack shows up as a jump of the opening displacement component between
//! neighboring correlation points. Differencing the field with a `[-1, 1]`
//! kernel isolates the jump; entries at or above the critical crack-tip
//! opening displacement `δc` are crack edges. `δc` itself is read from the
//! plateau of the CTOD measured at increasing probe offsets from the tip.
//!
//! Lengths are in millimeters. Vertical cracks open in `u` across `x` and
//! run along `y`; horizontal cracks open in `v` across `y` and run along `x`.

use serde::{Deserialize, Serialize};

use crate::error::{DicError, Result};
use crate::rgdic::DisplacementField;

/// Direction of the crack plane in the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    #[default]
    Vertical,
    Horizontal,
}

fn field_scale(field: &DisplacementField) -> Result<f64> {
    match field.scale() {
        Some(s) if s > 0.0 && s.is_finite() => Ok(s),
        _ => Err(DicError::MissingScale),
    }
}

/// Opening-component differences between neighboring correlation points.
#[derive(Debug, Clone, PartialEq)]
pub struct RelativeDisplacementField {
    orientation: Orientation,
    rows: usize,
    cols: usize,
    scale: f64,
    /// mm; NaN where a contributing point is invalid.
    values: Vec<f64>,
}

impl RelativeDisplacementField {
    pub fn orientation(&self) -> Orientation {
        self.orientation
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        let v = self.values[row * self.cols + col];
        (!v.is_nan()).then_some(v)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Source grid points `(row, col)` on the low and high side of an entry.
    pub fn sources(&self, row: usize, col: usize) -> ((usize, usize), (usize, usize)) {
        match self.orientation {
            Orientation::Vertical => ((row, col), (row, col + 1)),
            Orientation::Horizontal => ((row, col), (row + 1, col)),
        }
    }
}

/// `u[i, j+1] − u[i, j]` (vertical) or `v[i+1, j] − v[i, j]` (horizontal),
/// converted to mm. `scale` overrides the field's own scale.
pub fn relative_displacement(
    field: &DisplacementField,
    orientation: Orientation,
    scale: Option<f64>,
) -> Result<RelativeDisplacementField> {
    let scale = match scale {
        Some(s) if s > 0.0 && s.is_finite() => s,
        Some(_) => return Err(DicError::InvalidArgument("scale must be positive".into())),
        None => field_scale(field)?,
    };
    let (nx, ny) = (field.nx(), field.ny());
    let (rows, cols) = match orientation {
        Orientation::Vertical => (ny, nx.saturating_sub(1)),
        Orientation::Horizontal => (ny.saturating_sub(1), nx),
    };
    let mut values = vec![f64::NAN; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let d = match orientation {
                Orientation::Vertical => field.get(r, c).zip(field.get(r, c + 1)).map(|(a, b)| b.0 - a.0),
                Orientation::Horizontal => field.get(r, c).zip(field.get(r + 1, c)).map(|(a, b)| b.1 - a.1),
            };
            if let Some(d) = d {
                values[r * cols + c] = d * scale;
            }
        }
    }
    Ok(RelativeDisplacementField { orientation, rows, cols, scale, values })
}

/// A located crack tip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrackTip {
    pub x_mm: f64,
    pub y_mm: f64,
    pub frame: usize,
    /// Spread of the per-profile tip estimates (mm); 0 for a single estimate.
    pub spread_mm: f64,
    pub low_confidence: bool,
    pub orientation: Orientation,
    /// `+1` when the crack extends from the tip toward increasing `y`
    /// (vertical) or `x` (horizontal), `-1` otherwise.
    pub side: f64,
}

/// Field values arranged as profiles across the crack plane.
struct Profiles {
    /// Profile count (along the crack plane).
    np: usize,
    /// Points per profile (across the crack plane).
    nq: usize,
    across_mm: Vec<f64>,
    along_mm: Vec<f64>,
    /// Opening component in mm, `[p * nq + q]`.
    val: Vec<Option<f64>>,
    step_mm: f64,
}

impl Profiles {
    fn new(field: &DisplacementField, orientation: Orientation) -> Result<Self> {
        let s = field_scale(field)?;
        let g = field.grid();
        let xs: Vec<f64> = (0..g.nx()).map(|c| g.position(0, c).0 as f64 * s).collect();
        let ys: Vec<f64> = (0..g.ny()).map(|r| g.position(r, 0).1 as f64 * s).collect();
        let comp = |r, c| field.get(r, c).map(|(u, v)| s * if orientation == Orientation::Vertical { u } else { v });
        let (np, nq, across_mm, along_mm) = match orientation {
            Orientation::Vertical => (g.ny(), g.nx(), xs, ys),
            Orientation::Horizontal => (g.nx(), g.ny(), ys, xs),
        };
        let mut val = Vec::with_capacity(np * nq);
        for p in 0..np {
            for q in 0..nq {
                val.push(match orientation {
                    Orientation::Vertical => comp(p, q),
                    Orientation::Horizontal => comp(q, p),
                });
            }
        }
        Ok(Self { np, nq, across_mm, along_mm, val, step_mm: g.step as f64 * s })
    }
}

/// Least-squares line `a + b t`; a constant for a single point.
fn fit_line(pts: &[(f64, f64)]) -> Option<(f64, f64, f64)> {
    let n = pts.len() as f64;
    if pts.is_empty() {
        return None;
    }
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let mv = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let stt: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    let stv: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - mv)).sum();
    let b = if stt > 0.0 { stv / stt } else { 0.0 };
    let a = mv - b * mt;
    let sse: f64 = pts.iter().map(|p| (p.1 - a - b * p.0).powi(2)).sum();
    Some((a, b, sse))
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Tip estimate of one profile.
struct ProfileFit {
    along: f64,
    tip_across: f64,
    opening: f64,
    sse: f64,
    dof: usize,
}

fn fit_profile(pr: &Profiles, p: usize) -> Option<ProfileFit> {
    let pts: Vec<(f64, f64)> = (0..pr.nq).filter_map(|q| pr.val[p * pr.nq + q].map(|v| (pr.across_mm[q], v))).collect();
    if pts.len() < 2 {
        return None;
    }
    let k = (0..pts.len() - 1).max_by(|&a, &b| {
        let ja = (pts[a + 1].1 - pts[a].1).abs();
        let jb = (pts[b + 1].1 - pts[b].1).abs();
        ja.total_cmp(&jb).then(b.cmp(&a))
    })?;
    let (left, right) = pts.split_at(k + 1);
    let (al, bl, sl) = fit_line(left)?;
    let (ar, br, sr) = fit_line(right)?;
    let (x0, u0) = pts[k];
    let (x1, u1) = pts[k + 1];
    // Where the profile crosses the midline between its two flank lines.
    let mid = |x: f64| 0.5 * (al + bl * x + ar + br * x);
    let (d0, d1) = (u0 - mid(x0), u1 - mid(x1));
    let t = if d0 != d1 { (d0 / (d0 - d1)).clamp(0.0, 1.0) } else { 0.5 };
    let tip_across = x0 + t * (x1 - x0);
    let opening = (ar + br * tip_across) - (al + bl * tip_across);
    Some(ProfileFit { along: pr.along_mm[p], tip_across, opening, sse: sl + sr, dof: pts.len().saturating_sub(4) })
}

/// Options of [`locate_crack_tip`].
#[derive(Debug, Clone, PartialEq)]
pub struct TipSearch {
    /// Profile indices (grid rows for vertical cracks) to examine; all when
    /// `None`.
    pub band: Option<std::ops::Range<usize>>,
    /// Openings at or below this value (mm) are not a crack signature.
    pub min_opening_mm: f64,
    /// Signature threshold as a multiple of the flank-fit noise.
    pub noise_factor: f64,
}

impl Default for TipSearch {
    fn default() -> Self {
        Self { band: None, min_opening_mm: 1e-9, noise_factor: 5.0 }
    }
}

/// Locates the crack tip from displacement profiles across the crack plane.
///
/// Each profile's largest jump splits it into two flanks, each fitted with a
/// least-squares line; the tip abscissa is the median of the points where
/// opening profiles cross the midline between their flanks. The tip ordinate
/// comes from extrapolating the opening of the opened profiles to zero,
/// bounded by the last opened and first closed profile.
pub fn locate_crack_tip(field: &DisplacementField, orientation: Orientation, search: &TipSearch) -> Result<CrackTip> {
    let pr = Profiles::new(field, orientation)?;
    let band = search.band.clone().unwrap_or(0..pr.np);
    if band.end > pr.np || band.len() < 3 {
        return Err(DicError::InvalidArgument(format!(
            "tip search needs at least 3 profiles within the {} available",
            pr.np
        )));
    }
    let fits: Vec<Option<ProfileFit>> = band.clone().map(|p| fit_profile(&pr, p)).collect();
    let (sse, dof) = fits.iter().flatten().fold((0.0, 0usize), |a, f| (a.0 + f.sse, a.1 + f.dof));
    let noise = if dof > 0 { (sse / dof as f64).sqrt() } else { 0.0 };
    let threshold = search.min_opening_mm.max(search.noise_factor * noise);
    let opened: Vec<bool> = fits.iter().map(|f| f.as_ref().is_some_and(|f| f.opening.abs() > threshold)).collect();
    if !opened.iter().any(|o| *o) {
        return Err(DicError::NoTip("no profile shows an opening above the noise floor".into()));
    }
    // The crack runs from the band end with more opened profiles.
    let half = opened.len() / 2;
    let low = opened[..half].iter().filter(|o| **o).count();
    let high = opened[opened.len() - half..].iter().filter(|o| **o).count();
    let side = if high >= low { 1.0 } else { -1.0 };
    let order: Vec<usize> = if side > 0.0 { (0..opened.len()).rev().collect() } else { (0..opened.len()).collect() };
    // Walk from the cracked end to the first closed profile.
    let mut run = Vec::new();
    let mut closed = None;
    for &k in &order {
        if opened[k] {
            run.push(k);
        } else if !run.is_empty() {
            closed = Some(k);
            break;
        }
    }
    let mut xs: Vec<f64> = run.iter().map(|&k| fits[k].as_ref().unwrap().tip_across).collect();
    let x_t = median(&mut xs);
    let spread = xs.last().unwrap() - xs.first().unwrap();

    let last_open = fits[*run.last().unwrap()].as_ref().unwrap().along;
    let bound = closed
        .and_then(|k| fits[k].as_ref().map(|f| f.along))
        .unwrap_or_else(|| pr.along_mm[band.clone().nth(*run.last().unwrap()).unwrap()] - side * pr.step_mm);
    let (lo, hi) = if last_open < bound { (last_open, bound) } else { (bound, last_open) };
    let pts: Vec<(f64, f64)> = run.iter().map(|&k| fits[k].as_ref().unwrap()).map(|f| (f.along, f.opening)).collect();
    let y_t = match fit_line(&pts) {
        Some((a, b, _)) if pts.len() >= 2 && b != 0.0 && (-a / b).is_finite() => (-a / b).clamp(lo, hi),
        _ => last_open,
    };
    let (x_mm, y_mm) = match orientation {
        Orientation::Vertical => (x_t, y_t),
        Orientation::Horizontal => (y_t, x_t),
    };
    Ok(CrackTip {
        x_mm,
        y_mm,
        frame: field.frame(),
        spread_mm: spread,
        low_confidence: spread > pr.step_mm,
        orientation,
        side,
    })
}

/// A CTOD measurement at probe offsets `(lx, ly)` from the tip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CtodProbe {
    pub lx_mm: f64,
    pub ly_mm: f64,
    pub ctod_mm: f64,
}

/// Opening between two probe points placed `lx` on either side of the
/// crack plane, `ly` behind the tip into the cracked region. Field values
/// are sampled bilinearly; positive values are openings.
pub fn measure_ctod(field: &DisplacementField, tip: &CrackTip, lx_mm: f64, ly_mm: f64) -> Result<f64> {
    if !(lx_mm > 0.0) || !(ly_mm >= 0.0) {
        return Err(DicError::InvalidArgument("probe offsets need lx > 0 and ly >= 0".into()));
    }
    let s = field_scale(field)?;
    let along = ly_mm * tip.side;
    if !tip.x_mm.is_finite() || !tip.y_mm.is_finite() {
        return Err(DicError::InvalidArgument("tip position is not finite".into()));
    }
    // Probe positions (x, y) in mm on the low and high flank.
    let vertical = tip.orientation == Orientation::Vertical;
    let (a, b) = if vertical {
        ((tip.x_mm - lx_mm, tip.y_mm + along), (tip.x_mm + lx_mm, tip.y_mm + along))
    } else {
        ((tip.x_mm + along, tip.y_mm - lx_mm), (tip.x_mm + along, tip.y_mm + lx_mm))
    };
    let sample = |p: (f64, f64)| {
        field.sample(p.0 / s, p.1 / s).ok_or_else(|| {
            DicError::InvalidArgument(format!("probe ({:.4}, {:.4}) mm is not on valid field data", p.0, p.1))
        })
    };
    let (ua, va, _) = sample(a)?;
    let (ub, vb, _) = sample(b)?;
    Ok(if vertical { (ub - ua) * s } else { (vb - va) * s })
}

/// CTOD values over a probe grid and the plateau found in it.
#[derive(Debug, Clone, PartialEq)]
pub struct Plateau {
    pub delta_c_mm: f64,
    /// Inclusive index ranges into the `lx` and `ly` grids.
    pub lx_range: (usize, usize),
    pub ly_range: (usize, usize),
    pub onset_lx_mm: f64,
    pub onset_ly_mm: f64,
    /// Row-major over `ly` (rows) and `lx` (columns); NaN where a probe
    /// left the valid field.
    pub probes: Vec<CtodProbe>,
}

/// Largest ratio `max / min` accepted inside a plateau.
pub const PLATEAU_RATIO: f64 = 1.05;
/// Minimum plateau extent along each probe axis.
pub const PLATEAU_MIN: usize = 3;

/// Measures the CTOD over every `(lx, ly)` pair and finds the largest
/// rectangular sub-grid of at least 3x3 probes whose values stay within a
/// 5% band; `δc` is their median and the onset is the sub-grid's smallest
/// offsets. Ties in area go to the sub-grid closest to the tip.
pub fn determine_delta_c(
    field: &DisplacementField,
    tip: &CrackTip,
    lx_grid: &[f64],
    ly_grid: &[f64],
) -> Result<Plateau> {
    let ascending = |g: &[f64]| g.windows(2).all(|w| w[0] < w[1]);
    if !ascending(lx_grid) || !ascending(ly_grid) {
        return Err(DicError::InvalidArgument("probe grids must be strictly increasing".into()));
    }
    let (nx, ny) = (lx_grid.len(), ly_grid.len());
    let mut probes = Vec::with_capacity(nx * ny);
    for &ly in ly_grid {
        for &lx in lx_grid {
            let ctod = match measure_ctod(field, tip, lx, ly) {
                Ok(c) => c,
                Err(DicError::MissingScale) => return Err(DicError::MissingScale),
                Err(DicError::InvalidArgument(_)) => f64::NAN,
                Err(e) => return Err(e),
            };
            probes.push(CtodProbe { lx_mm: lx, ly_mm: ly, ctod_mm: ctod });
        }
    }
    let at = |r: usize, c: usize| probes[r * nx + c].ctod_mm;
    // (area, lx index range, ly index range)
    type Rect = (usize, (usize, usize), (usize, usize));
    let mut best: Option<Rect> = None;
    for r0 in 0..ny {
        for c0 in 0..nx {
            for r1 in (r0 + PLATEAU_MIN - 1)..ny {
                for c1 in (c0 + PLATEAU_MIN - 1)..nx {
                    let area = (r1 - r0 + 1) * (c1 - c0 + 1);
                    if best.is_some_and(|b| b.0 >= area) {
                        continue;
                    }
                    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                    for r in r0..=r1 {
                        for c in c0..=c1 {
                            let v = at(r, c);
                            lo = lo.min(v);
                            hi = hi.max(v);
                        }
                    }
                    // min/max skip NaN, so probes off the field are checked apart.
                    let all_finite = (r0..=r1).all(|r| (c0..=c1).all(|c| at(r, c).is_finite()));
                    if all_finite && lo > 0.0 && hi / lo <= PLATEAU_RATIO {
                        best = Some((area, (c0, c1), (r0, r1)));
                    }
                }
            }
        }
    }
    let Some((_, (c0, c1), (r0, r1))) = best else {
        let shown: Vec<String> =
            probes.iter().map(|p| format!("({:.3},{:.3})={:.5}", p.lx_mm, p.ly_mm, p.ctod_mm)).collect();
        return Err(DicError::NoPlateau(format!("probe CTODs (lx,ly)=mm: {}", shown.join(" "))));
    };
    let mut vals: Vec<f64> = (r0..=r1).flat_map(|r| (c0..=c1).map(move |c| (r, c))).map(|(r, c)| at(r, c)).collect();
    Ok(Plateau {
        delta_c_mm: median(&mut vals),
        lx_range: (c0, c1),
        ly_range: (r0, r1),
        onset_lx_mm: lx_grid[c0],
        onset_ly_mm: ly_grid[r0],
        probes,
    })
}

/// A correlation point on one side of a flagged crack entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgePoint {
    pub row: usize,
    pub col: usize,
    /// Reference-image position (mm).
    pub ref_mm: (f64, f64),
    /// Deformed-image position: reference position plus displacement (mm).
    pub def_mm: (f64, f64),
}

/// Both sides of one relative-displacement entry at or above `δc`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgePair {
    pub rel_row: usize,
    pub rel_col: usize,
    pub opening_mm: f64,
    /// Low side: left of a vertical crack, above a horizontal one.
    pub low: EdgePoint,
    pub high: EdgePoint,
}

/// Flags every relative-displacement entry `≥ δc` and returns the two
/// contributing correlation points of each, in row-major order.
pub fn detect_crack_edges(
    rel: &RelativeDisplacementField,
    delta_c_mm: f64,
    field: &DisplacementField,
) -> Result<Vec<EdgePair>> {
    if !(delta_c_mm > 0.0) {
        return Err(DicError::InvalidArgument("δc must be positive".into()));
    }
    let s = rel.scale;
    let g = field.grid();
    let point = |(row, col): (usize, usize)| -> Option<EdgePoint> {
        let (u, v) = field.get(row, col)?;
        let (x, y) = g.position(row, col);
        let (x, y) = (x as f64 * s, y as f64 * s);
        Some(EdgePoint { row, col, ref_mm: (x, y), def_mm: (x + u * s, y + v * s) })
    };
    let mut out = Vec::new();
    for r in 0..rel.rows {
        for c in 0..rel.cols {
            let Some(d) = rel.get(r, c) else { continue };
            if d >= delta_c_mm {
                let (a, b) = rel.sources(r, c);
                if let (Some(low), Some(high)) = (point(a), point(b)) {
                    out.push(EdgePair { rel_row: r, rel_col: c, opening_mm: d, low, high });
                }
            }
        }
    }
    Ok(out)
}

/// Components smaller than this are treated as noise.
pub const MIN_COMPONENT: usize = 3;
/// Points per flank used for the apex construction.
pub const FLANK_POINTS: usize = 5;

/// Crack tip from flagged edges: within the 8-connected flagged component
/// that reaches closest to the uncracked side, a line is fitted through the
/// outermost five low-side and high-side edge points (deformed
/// coordinates) and the tip is their intersection. Short flanks, parallel
/// flanks or an apex far from the edges fall back to the midpoint of the
/// outermost edge pair. `side` is the tip's crack direction (see
/// [`CrackTip::side`]); `None` when no component survives.
pub fn tip_from_edges(
    edges: &[EdgePair],
    orientation: Orientation,
    side: f64,
    frame: usize,
    step_mm: f64,
) -> Option<CrackTip> {
    if edges.is_empty() {
        return None;
    }
    // 8-connected components over (rel_row, rel_col).
    let n = edges.len();
    let mut label = vec![usize::MAX; n];
    let mut comps: Vec<Vec<usize>> = Vec::new();
    for start in 0..n {
        if label[start] != usize::MAX {
            continue;
        }
        let id = comps.len();
        let mut stack = vec![start];
        let mut members = Vec::new();
        label[start] = id;
        while let Some(i) = stack.pop() {
            members.push(i);
            let (r, c) = (edges[i].rel_row as isize, edges[i].rel_col as isize);
            for (j, e) in edges.iter().enumerate() {
                if label[j] == usize::MAX && (e.rel_row as isize - r).abs() <= 1 && (e.rel_col as isize - c).abs() <= 1
                {
                    label[j] = id;
                    stack.push(j);
                }
            }
        }
        comps.push(members);
    }
    // Position along the crack plane, measured toward the tip.
    let along = |e: &EdgePair| {
        let p = e.low.ref_mm;
        -side * if orientation == Orientation::Vertical { p.1 } else { p.0 }
    };
    let comp = comps.into_iter().filter(|c| c.len() >= MIN_COMPONENT).max_by(|a, b| {
        let fa = a.iter().map(|&i| along(&edges[i])).fold(f64::NEG_INFINITY, f64::max);
        let fb = b.iter().map(|&i| along(&edges[i])).fold(f64::NEG_INFINITY, f64::max);
        fa.total_cmp(&fb)
    })?;
    let mut members: Vec<&EdgePair> = comp.iter().map(|&i| &edges[i]).collect();
    members.sort_by(|a, b| along(b).total_cmp(&along(a)).then((a.rel_row, a.rel_col).cmp(&(b.rel_row, b.rel_col))));

    let split = |p: (f64, f64)| match orientation {
        Orientation::Vertical => (p.1, p.0),
        Orientation::Horizontal => (p.0, p.1),
    };
    // Distinct along-plane lines of the component, from the tip end.
    let mut lines: Vec<f64> = Vec::new();
    for e in &members {
        let key = along(e);
        if !lines.contains(&key) {
            lines.push(key);
        }
    }
    let top_pair = members[0];
    let mid = |a: (f64, f64), b: (f64, f64)| (0.5 * (a.0 + b.0), 0.5 * (a.1 + b.1));
    let fallback = mid(top_pair.low.def_mm, top_pair.high.def_mm);

    let apex = if lines.len() >= FLANK_POINTS {
        // Flank lines across = a + b * along_coordinate (deformed).
        let flank = |hi: bool| -> Option<(f64, f64, f64)> {
            let pts: Vec<(f64, f64)> = members
                .iter()
                .filter(|e| lines[..FLANK_POINTS].contains(&along(e)))
                .map(|e| {
                    let p = if hi { e.high.def_mm } else { e.low.def_mm };
                    split(p)
                })
                .collect();
            fit_line(&pts)
        };
        match (flank(false), flank(true)) {
            (Some((al, bl, _)), Some((ah, bh, _))) if (bl - bh).abs() > 1e-9 => {
                let t = (ah - al) / (bl - bh);
                let across = al + bl * t;
                let (t_top, _) = split(fallback);
                if t.is_finite() && (t - t_top).abs() <= 3.0 * step_mm * FLANK_POINTS as f64 {
                    Some(match orientation {
                        Orientation::Vertical => (across, t),
                        Orientation::Horizontal => (t, across),
                    })
                } else {
                    None
                }
            }
            _ => None,
        }
    } else {
        None
    };
    let (x, y) = apex.unwrap_or(fallback);
    Some(CrackTip { x_mm: x, y_mm: y, frame, spread_mm: 0.0, low_confidence: apex.is_none(), orientation, side })
}

/// Tip positions over time and the resulting propagation speed.
#[derive(Debug, Clone, PartialEq)]
pub struct TipTrack {
    /// `(frame, time_s, tip)` for frames with a located tip.
    pub trajectory: Vec<(usize, f64, CrackTip)>,
    /// Speed of each interval between consecutive located tips (mm/s).
    pub interval_speeds: Vec<f64>,
    pub mean_speed_mm_s: f64,
}

/// Speed of tip advance along the crack plane, averaged over the intervals
/// between consecutive located tips.
pub fn track_tip_and_speed(tips: &[(f64, Option<CrackTip>)]) -> Result<TipTrack> {
    let located: Vec<(f64, CrackTip)> = tips.iter().filter_map(|(t, tip)| tip.map(|p| (*t, p))).collect();
    if located.len() < 2 {
        return Err(DicError::NoTip(format!("speed needs two located tips, found {}", located.len())));
    }
    let mut speeds = Vec::with_capacity(located.len() - 1);
    for w in located.windows(2) {
        let ((t0, a), (t1, b)) = (w[0], w[1]);
        if !(t1 > t0) {
            return Err(DicError::InvalidArgument("timestamps must be strictly increasing".into()));
        }
        let d = match a.orientation {
            Orientation::Vertical => b.y_mm - a.y_mm,
            Orientation::Horizontal => b.x_mm - a.x_mm,
        };
        speeds.push(d.abs() / (t1 - t0));
    }
    let mean = speeds.iter().sum::<f64>() / speeds.len() as f64;
    Ok(TipTrack {
        trajectory: located.into_iter().map(|(t, tip)| (tip.frame, t, tip)).collect(),
        interval_speeds: speeds,
        mean_speed_mm_s: mean,
    })
}

/// Crack analysis of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameCrack {
    pub frame: usize,
    pub time_s: f64,
    pub edges: Vec<EdgePair>,
    pub tip: Option<CrackTip>,
}

/// Crack analysis of a sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct CrackReport {
    pub delta_c_mm: f64,
    pub orientation: Orientation,
    pub frames: Vec<FrameCrack>,
    /// `None` when fewer than two frames have a tip.
    pub track: Option<TipTrack>,
}

impl CrackReport {
    pub fn crack_detected(&self) -> bool {
        self.frames.iter().any(|f| !f.edges.is_empty())
    }

    pub fn first_flagged_frame(&self) -> Option<usize> {
        self.frames.iter().find(|f| !f.edges.is_empty()).map(|f| f.frame)
    }
}

/// Edge detection and tip tracking over a sequence of fields with their
/// timestamps. The crack grows toward `-side` (see [`CrackTip::side`]).
pub fn analyze_crack_sequence(
    fields: &[DisplacementField],
    times_s: &[f64],
    orientation: Orientation,
    side: f64,
    delta_c_mm: f64,
) -> Result<CrackReport> {
    if fields.len() != times_s.len() {
        return Err(DicError::InvalidArgument("one timestamp per field is required".into()));
    }
    let mut frames = Vec::with_capacity(fields.len());
    for (f, &t) in fields.iter().zip(times_s) {
        let rel = relative_displacement(f, orientation, None)?;
        let edges = detect_crack_edges(&rel, delta_c_mm, f)?;
        let step_mm = f.grid().step as f64 * rel.scale();
        let tip = tip_from_edges(&edges, orientation, side, f.frame(), step_mm);
        frames.push(FrameCrack { frame: f.frame(), time_s: t, edges, tip });
    }
    let located: Vec<(f64, Option<CrackTip>)> = frames.iter().map(|f| (f.time_s, f.tip)).collect();
    let track = match track_tip_and_speed(&located) {
        Ok(t) => Some(t),
        Err(DicError::NoTip(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(CrackReport { delta_c_mm, orientation, frames, track })
}

/// Advisory messages about the measurement setup: spatial resolution
/// coarser than a third of `δc`, and (with crack analysis) a grid step above
/// a sixth of the subset size.
pub fn resolution_warnings(
    scale_mm: f64,
    delta_c_mm: Option<f64>,
    half_width: usize,
    step: usize,
    crack: bool,
) -> Vec<String> {
    let mut out = Vec::new();
    if let Some(dc) = delta_c_mm {
        if scale_mm > dc / 3.0 {
            out.push(format!("spatial resolution {scale_mm} mm/pixel is coarser than 1/3 of δc ({:.5} mm)", dc / 3.0));
        }
    }
    let subset = 2 * half_width + 1;
    if crack && 6 * step > subset {
        out.push(format!("step exceeds 1/6 of subset size ({step} > {subset}/6)"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rgdic::RoiGrid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const SCALE: f64 = 0.01;

    /// 21 x 21 points, 8 px apart (0.08 mm).
    fn grid() -> RoiGrid {
        RoiGrid::new(40, 40, 168, 168, 8).unwrap()
    }

    fn field(f: impl Fn(f64, f64) -> (f64, f64)) -> DisplacementField {
        // `f` takes and returns mm.
        DisplacementField::from_fn(grid(), 1, |x, y| {
            let (u, v) = f(x * SCALE, y * SCALE);
            (u / SCALE, v / SCALE)
        })
        .with_scale(Some(SCALE))
    }

    /// Right flank opened by `delta` mm below `yt`, split between columns.
    fn rigid_opening(xt: f64, yt: f64, delta: f64) -> DisplacementField {
        field(move |x, y| if x >= xt && y >= yt { (delta, 0.0) } else { (0.0, 0.0) })
    }

    fn col_x(c: usize) -> f64 {
        (40 + 8 * c) as f64 * SCALE
    }

    fn row_y(r: usize) -> f64 {
        (40 + 8 * r) as f64 * SCALE
    }

    #[test]
    fn translation_has_no_relative_displacement() {
        let f = field(|_, _| (0.3, -0.2));
        for o in [Orientation::Vertical, Orientation::Horizontal] {
            let rel = relative_displacement(&f, o, None).unwrap();
            assert!(rel.values().iter().all(|v| v.abs() < 1e-12));
        }
        let rel = relative_displacement(&f, Orientation::Vertical, None).unwrap();
        assert_eq!((rel.rows(), rel.cols()), (21, 20));
        let rel = relative_displacement(&f, Orientation::Horizontal, None).unwrap();
        assert_eq!((rel.rows(), rel.cols()), (20, 21));
    }

    #[test]
    fn step_lands_in_one_column() {
        let xt = col_x(7);
        let f = field(move |x, _| (if x >= xt { 0.05 } else { 0.0 }, 0.0));
        let rel = relative_displacement(&f, Orientation::Vertical, None).unwrap();
        for r in 0..rel.rows() {
            for c in 0..rel.cols() {
                let want = if c == 6 { 0.05 } else { 0.0 };
                assert!((rel.get(r, c).unwrap() - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn random_field_matches_naive_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = grid();
        let vals: Vec<Option<(f64, f64)>> = (0..g.len())
            .map(|_| (rng.random::<f64>() > 0.1).then(|| (rng.random::<f64>() * 4.0 - 2.0, rng.random::<f64>())))
            .collect();
        let f = DisplacementField::from_values(g, 1, 0, &vals, &vec![1.0; g.len()]).unwrap();
        let rel = relative_displacement(&f, Orientation::Horizontal, Some(0.02)).unwrap();
        for r in 0..g.ny() - 1 {
            for c in 0..g.nx() {
                let want = match (vals[r * g.nx() + c], vals[(r + 1) * g.nx() + c]) {
                    (Some(a), Some(b)) => Some((b.1 - a.1) * 0.02),
                    _ => None,
                };
                assert_eq!(rel.get(r, c), want);
            }
        }
    }

    #[test]
    fn scale_is_required() {
        let f = DisplacementField::from_fn(grid(), 1, |_, _| (0.0, 0.0));
        assert!(matches!(relative_displacement(&f, Orientation::Vertical, None), Err(DicError::MissingScale)));
        assert!(relative_displacement(&f, Orientation::Vertical, Some(0.01)).is_ok());
    }

    #[test]
    fn rigid_opening_tip() {
        let (xt, yt) = (0.5 * (col_x(9) + col_x(10)), row_y(8));
        let f = rigid_opening(xt, yt, 0.1);
        let tip = locate_crack_tip(&f, Orientation::Vertical, &TipSearch::default()).unwrap();
        assert!((tip.x_mm - xt).abs() < 1e-9, "{tip:?}");
        assert!((tip.y_mm - yt).abs() <= 0.08 + 1e-9, "{tip:?}");
        assert_eq!(tip.side, 1.0);
        assert!(!tip.low_confidence);
    }

    #[test]
    fn wedge_tip_within_one_step() {
        // Opening grows linearly with distance below the tip.
        let (xt, yt) = (col_x(11) + 0.03, row_y(6) + 0.02);
        let f = field(move |x, y| {
            let open = if y > yt { 0.2 * (y - yt) } else { 0.0 };
            (if x >= xt { 0.5 * open } else { -0.5 * open }, 0.0)
        });
        let tip = locate_crack_tip(&f, Orientation::Vertical, &TipSearch::default()).unwrap();
        assert!((tip.x_mm - xt).abs() <= 0.08, "{tip:?}");
        assert!((tip.y_mm - yt).abs() <= 0.08, "{tip:?}");
    }

    #[test]
    fn crack_from_the_top_is_detected() {
        let (xt, yt) = (0.5 * (col_x(4) + col_x(5)), row_y(12));
        let f = field(move |x, y| if x >= xt && y <= yt { (0.1, 0.0) } else { (0.0, 0.0) });
        let tip = locate_crack_tip(&f, Orientation::Vertical, &TipSearch::default()).unwrap();
        assert_eq!(tip.side, -1.0);
        assert!((tip.y_mm - yt).abs() <= 0.08 + 1e-9);
    }

    #[test]
    fn horizontal_crack_tip() {
        let (xt, yt) = (col_x(6), 0.5 * (row_y(10) + row_y(11)));
        let f = field(move |x, y| if y >= yt && x >= xt { (0.0, 0.1) } else { (0.0, 0.0) });
        let tip = locate_crack_tip(&f, Orientation::Horizontal, &TipSearch::default()).unwrap();
        assert!((tip.y_mm - yt).abs() < 1e-9);
        assert!((tip.x_mm - xt).abs() <= 0.08 + 1e-9);
    }

    #[test]
    fn no_opening_no_tip() {
        let f = field(|_, _| (0.0, 0.0));
        assert!(matches!(locate_crack_tip(&f, Orientation::Vertical, &TipSearch::default()), Err(DicError::NoTip(_))));
        let narrow = TipSearch { band: Some(0..2), ..TipSearch::default() };
        assert!(matches!(
            locate_crack_tip(&rigid_opening(1.0, 1.0, 0.1), Orientation::Vertical, &narrow),
            Err(DicError::InvalidArgument(_))
        ));
    }

    fn tip_at(x: f64, y: f64) -> CrackTip {
        CrackTip {
            x_mm: x,
            y_mm: y,
            frame: 1,
            spread_mm: 0.0,
            low_confidence: false,
            orientation: Orientation::Vertical,
            side: 1.0,
        }
    }

    #[test]
    fn ctod_of_rigid_opening_is_the_opening() {
        let (xt, yt) = (0.5 * (col_x(9) + col_x(10)), row_y(5));
        let f = rigid_opening(xt, yt, 0.1);
        let tip = tip_at(xt, yt);
        for &(lx, ly) in &[(0.05, 0.0), (0.2, 0.3), (0.6, 0.9)] {
            assert!((measure_ctod(&f, &tip, lx, ly).unwrap() - 0.1).abs() < 1e-12);
        }
        assert!(measure_ctod(&f, &tip, 5.0, 0.1).is_err());
        assert!(measure_ctod(&f, &tip, 0.0, 0.1).is_err());
    }

    #[test]
    fn ctod_of_linear_field_grows_with_lx() {
        let f = field(|x, _| (0.004 * x, 0.0));
        let tip = tip_at(col_x(10), row_y(5));
        for lx in [0.1, 0.2, 0.4] {
            let c = measure_ctod(&f, &tip, lx, 0.2).unwrap();
            assert!((c - 2.0 * lx * 0.004).abs() < 1e-12);
        }
    }

    #[test]
    fn ctod_flank_swap_negates() {
        let (xt, yt) = (0.5 * (col_x(9) + col_x(10)), row_y(5));
        let f = rigid_opening(xt, yt, 0.1);
        let flipped = field(move |x, y| if x < xt && y >= yt { (0.1, 0.0) } else { (0.0, 0.0) });
        let tip = tip_at(xt, yt);
        let a = measure_ctod(&f, &tip, 0.3, 0.2).unwrap();
        let b = measure_ctod(&flipped, &tip, 0.3, 0.2).unwrap();
        assert!((a + b).abs() < 1e-12);
    }

    #[test]
    fn rigid_plateau_covers_grid() {
        let (xt, yt) = (0.5 * (col_x(9) + col_x(10)), row_y(4));
        let f = rigid_opening(xt, yt, 0.05);
        let lx: Vec<f64> = (1..=6).map(|k| 0.05 * k as f64).collect();
        let ly: Vec<f64> = (0..5).map(|k| 0.1 * k as f64).collect();
        let p = determine_delta_c(&f, &tip_at(xt, yt), &lx, &ly).unwrap();
        assert!((p.delta_c_mm - 0.05).abs() < 1e-12);
        assert_eq!((p.lx_range, p.ly_range), ((0, 5), (0, 4)));
        assert_eq!((p.onset_lx_mm, p.onset_ly_mm), (0.05, 0.0));
    }

    #[test]
    fn continuous_field_has_no_plateau() {
        let f = field(|x, _| (0.004 * x, 0.0));
        let lx: Vec<f64> = (1..=6).map(|k| 0.05 * k as f64).collect();
        let ly = [0.0, 0.1, 0.2];
        assert!(matches!(determine_delta_c(&f, &tip_at(col_x(10), row_y(5)), &lx, &ly), Err(DicError::NoPlateau(_))));
    }

    #[test]
    fn step_edges_against_threshold() {
        let xt = 0.5 * (col_x(9) + col_x(10));
        let f = field(move |x, _| (if x >= xt { 0.03 } else { 0.0 }, 0.0));
        let rel = relative_displacement(&f, Orientation::Vertical, None).unwrap();
        let edges = detect_crack_edges(&rel, 0.025, &f).unwrap();
        assert_eq!(edges.len(), 21);
        for e in &edges {
            assert_eq!((e.rel_col, e.low.col, e.high.col), (9, 9, 10));
            assert!((e.high.def_mm.0 - e.high.ref_mm.0 - 0.03).abs() < 1e-12);
        }
        let f2 = field(move |x, _| (if x >= xt { 0.02 } else { 0.0 }, 0.0));
        let rel2 = relative_displacement(&f2, Orientation::Vertical, None).unwrap();
        assert!(detect_crack_edges(&rel2, 0.025, &f2).unwrap().is_empty());
        assert!(detect_crack_edges(&rel2, 0.0, &f2).is_err());
    }

    #[test]
    fn wedge_edges_stop_at_threshold() {
        let (xt, yt) = (0.5 * (col_x(9) + col_x(10)), row_y(3));
        let f = field(move |x, y| (if x >= xt && y > yt { 0.1 * (y - yt) } else { 0.0 }, 0.0));
        let rel = relative_displacement(&f, Orientation::Vertical, None).unwrap();
        let dc = 0.05;
        let edges = detect_crack_edges(&rel, dc, &f).unwrap();
        let rows: Vec<usize> = edges.iter().map(|e| e.rel_row).collect();
        let expect: Vec<usize> = (0..21).filter(|&r| 0.1 * (row_y(r) - yt) >= dc - 1e-12).collect();
        assert_eq!(rows, expect);
        // Cutoff where the opening reaches δc.
        let y_cut = yt + dc / 0.1;
        assert!((row_y(rows[0]) - y_cut).abs() <= 0.08);
    }

    #[test]
    fn tip_from_wedge_edges() {
        let (xt, yt) = (0.5 * (col_x(9) + col_x(10)), row_y(3));
        // Flanks open symmetrically; deformed edges form a V whose apex is
        // the tip.
        let f = field(move |x, y| {
            let open = if y > yt { 0.1 * (y - yt) } else { 0.0 };
            (if x >= xt { 0.5 * open } else { -0.5 * open }, 0.0)
        });
        let rel = relative_displacement(&f, Orientation::Vertical, None).unwrap();
        let edges = detect_crack_edges(&rel, 0.02, &f).unwrap();
        let tip = tip_from_edges(&edges, Orientation::Vertical, 1.0, 1, 0.08).unwrap();
        assert!(!tip.low_confidence);
        // The V's apex is where the flanks meet in deformed coordinates.
        let apex_y = yt - (col_x(10) - col_x(9)) / 0.1;
        assert!((tip.x_mm - xt).abs() < 1e-9 && (tip.y_mm - apex_y).abs() < 1e-9, "{tip:?}");
    }

    #[test]
    fn short_component_uses_midpoint() {
        let (xt, yt) = (0.5 * (col_x(9) + col_x(10)), row_y(17));
        let f = rigid_opening(xt, yt, 0.1);
        let rel = relative_displacement(&f, Orientation::Vertical, None).unwrap();
        let edges = detect_crack_edges(&rel, 0.05, &f).unwrap();
        assert_eq!(edges.len(), 4);
        let tip = tip_from_edges(&edges, Orientation::Vertical, 1.0, 1, 0.08).unwrap();
        assert!(tip.low_confidence);
        assert!((tip.y_mm - yt).abs() < 1e-12);
        assert!((tip.x_mm - (col_x(9) + col_x(10) + 0.1) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn tiny_components_are_noise() {
        let f = field(|_, _| (0.0, 0.0));
        let rel = relative_displacement(&f, Orientation::Vertical, None).unwrap();
        assert!(detect_crack_edges(&rel, 0.01, &f).unwrap().is_empty());
        let pt = EdgePoint { row: 0, col: 0, ref_mm: (0.0, 0.0), def_mm: (0.0, 0.0) };
        let lone = [EdgePair { rel_row: 4, rel_col: 4, opening_mm: 1.0, low: pt, high: pt }];
        assert!(tip_from_edges(&lone, Orientation::Vertical, 1.0, 1, 0.08).is_none());
    }

    #[test]
    fn speed_examples() {
        let t0 = tip_at(1.0, 0.0);
        let t1 = tip_at(1.0, 2.0);
        let tr = track_tip_and_speed(&[(0.0, Some(t0)), (1.0, Some(t1))]).unwrap();
        assert!((tr.mean_speed_mm_s - 2.0).abs() < 1e-12);
        let still: Vec<(f64, Option<CrackTip>)> = (0..10).map(|k| (k as f64 * 0.25, Some(t0))).collect();
        assert_eq!(track_tip_and_speed(&still).unwrap().mean_speed_mm_s, 0.0);
        assert!(matches!(track_tip_and_speed(&[(0.0, Some(t0)), (1.0, None)]), Err(DicError::NoTip(_))));
        assert!(track_tip_and_speed(&[(1.0, Some(t0)), (1.0, Some(t1))]).is_err());
    }

    #[test]
    fn setup_warnings() {
        let w = resolution_warnings(0.008, Some(0.025), 11, 12, true);
        assert!(w.iter().any(|m| m.contains("step exceeds 1/6 of subset size")));
        assert!(resolution_warnings(0.008, Some(0.025), 11, 2, true).is_empty());
        assert!(resolution_warnings(0.008, None, 11, 12, false).is_empty());
        let coarse = resolution_warnings(0.01, Some(0.025), 11, 2, true);
        assert_eq!(coarse.len(), 1);
        assert!(coarse[0].contains("1/3 of δc"));
    }
}
