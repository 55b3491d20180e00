//! Single-point subset matching: shape functions, the ZNSSD cost, integer
//! translation search and Newton–Raphson subpixel refinement.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{DicError, Result};
use crate::image::GrayImage;
use crate::interp::Interpolant;

/// Smallest admissible subset half-width.
pub const MIN_HALF_WIDTH: usize = 3;

const DEGENERATE_EPS: f64 = 1e-12;

/// Square subset of `(2M+1) x (2M+1)` pixels around `(x0, y0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubsetSpec {
    pub x0: f64,
    pub y0: f64,
    pub half_width: usize,
}

impl SubsetSpec {
    pub fn new(x0: f64, y0: f64, half_width: usize) -> Result<Self> {
        if half_width < MIN_HALF_WIDTH {
            return Err(DicError::InvalidSubset(format!(
                "half-width {half_width} below the minimum of {MIN_HALF_WIDTH}"
            )));
        }
        if !x0.is_finite() || !y0.is_finite() {
            return Err(DicError::InvalidSubset("non-finite center".into()));
        }
        Ok(Self { x0, y0, half_width })
    }

    pub fn size(&self) -> usize {
        2 * self.half_width + 1
    }

    pub fn len(&self) -> usize {
        self.size() * self.size()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Whether the undeformed subset lies inside the evaluation domain of an
    /// `width x height` image.
    pub fn fits(&self, width: usize, height: usize) -> bool {
        let m = self.half_width as f64 + crate::interp::MARGIN;
        self.x0 - m >= 0.0
            && self.y0 - m >= 0.0
            && self.x0 + m <= width as f64 - 1.0
            && self.y0 + m <= height as f64 - 1.0
    }

    fn offsets(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        let m = self.half_width as i64;
        (-m..=m).flat_map(move |dy| (-m..=m).map(move |dx| (dx as f64, dy as f64)))
    }
}

/// Shape-function order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeOrder {
    #[default]
    First,
    Second,
}

impl ShapeOrder {
    pub fn n_params(self) -> usize {
        match self {
            ShapeOrder::First => 6,
            ShapeOrder::Second => 12,
        }
    }
}

/// Displacement mapping parameters.
///
/// Component layout: `u, v, u_x, u_y, v_x, v_y` followed, for the second
/// order, by `u_xx, u_yy, u_xy, v_xx, v_yy, v_xy`. Unused second-order slots
/// of a first-order warp are kept at zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarpVector {
    order: ShapeOrder,
    p: [f64; 12],
}

impl WarpVector {
    pub fn zero(order: ShapeOrder) -> Self {
        Self { order, p: [0.0; 12] }
    }

    pub fn translation(order: ShapeOrder, u: f64, v: f64) -> Self {
        let mut w = Self::zero(order);
        w.p[0] = u;
        w.p[1] = v;
        w
    }

    /// Builds a warp from its components; `components.len()` must match the
    /// order's parameter count.
    pub fn from_components(order: ShapeOrder, components: &[f64]) -> Result<Self> {
        if components.len() != order.n_params() {
            return Err(DicError::InvalidArgument(format!(
                "{:?}-order warp needs {} components, got {}",
                order,
                order.n_params(),
                components.len()
            )));
        }
        if components.iter().any(|c| !c.is_finite()) {
            return Err(DicError::InvalidArgument("non-finite warp component".into()));
        }
        let mut p = [0.0; 12];
        p[..components.len()].copy_from_slice(components);
        Ok(Self { order, p })
    }

    pub fn order(&self) -> ShapeOrder {
        self.order
    }

    pub fn components(&self) -> &[f64] {
        &self.p[..self.order.n_params()]
    }

    pub fn u(&self) -> f64 {
        self.p[0]
    }

    pub fn v(&self) -> f64 {
        self.p[1]
    }

    /// `(u_x, u_y, v_x, v_y)`.
    pub fn gradient(&self) -> [f64; 4] {
        [self.p[2], self.p[3], self.p[4], self.p[5]]
    }

    pub fn is_finite(&self) -> bool {
        self.p.iter().all(|c| c.is_finite())
    }

    /// Same warp with a different order; second-order terms are dropped when
    /// lowering.
    pub fn with_order(&self, order: ShapeOrder) -> Self {
        let mut p = self.p;
        if order == ShapeOrder::First {
            p[6..].iter_mut().for_each(|c| *c = 0.0);
        }
        Self { order, p }
    }

    /// Displacement `(dx, dy)` of the point at offset `(ox, oy)` from the
    /// subset center.
    #[inline]
    pub fn displacement_at(&self, ox: f64, oy: f64) -> (f64, f64) {
        let p = &self.p;
        let mut du = p[0] + p[2] * ox + p[3] * oy;
        let mut dv = p[1] + p[4] * ox + p[5] * oy;
        if self.order == ShapeOrder::Second {
            du += 0.5 * p[6] * ox * ox + 0.5 * p[7] * oy * oy + p[8] * ox * oy;
            dv += 0.5 * p[9] * ox * ox + 0.5 * p[10] * oy * oy + p[11] * ox * oy;
        }
        (du, dv)
    }

    /// Re-expresses the warp about a center shifted by `(ox, oy)`, so it can
    /// seed a neighboring point.
    pub fn recentered(&self, ox: f64, oy: f64) -> Self {
        let (du, dv) = self.displacement_at(ox, oy);
        let mut w = *self;
        w.p[0] = du;
        w.p[1] = dv;
        if self.order == ShapeOrder::Second {
            let p = &self.p;
            w.p[2] = p[2] + p[6] * ox + p[8] * oy;
            w.p[3] = p[3] + p[7] * oy + p[8] * ox;
            w.p[4] = p[4] + p[9] * ox + p[11] * oy;
            w.p[5] = p[5] + p[10] * oy + p[11] * ox;
        }
        w
    }

    fn add_scaled(&mut self, delta: &[f64], t: f64) {
        for (c, d) in self.p.iter_mut().zip(delta) {
            *c += t * d;
        }
    }
}

/// Maps the subset point at offset `(dx, dy)` into the deformed image.
pub fn warp_point(spec: &SubsetSpec, w: &WarpVector, dx: f64, dy: f64) -> (f64, f64) {
    let (du, dv) = w.displacement_at(dx, dy);
    (spec.x0 + dx + du, spec.y0 + dy + dv)
}

/// Outcome of one subset refinement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchResult {
    pub warp: WarpVector,
    pub znssd: f64,
    pub zncc: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// `C_ZNCC = 1 - 0.5 C_ZNSSD`.
#[inline]
pub fn zncc_from_znssd(c: f64) -> f64 {
    1.0 - 0.5 * c
}

/// Zero-mean, unit-norm reference subset intensities.
#[derive(Debug, Clone)]
pub struct ReferenceSubset {
    spec: SubsetSpec,
    normalized: Vec<f64>,
}

impl ReferenceSubset {
    /// Samples the reference through an interpolant (works for subpixel
    /// centers).
    pub fn from_interpolant(reference: &Interpolant, spec: &SubsetSpec) -> Result<Self> {
        let mut vals = Vec::with_capacity(spec.len());
        for (dx, dy) in spec.offsets() {
            vals.push(reference.value(spec.x0 + dx, spec.y0 + dy)?);
        }
        Self::from_values(*spec, vals)
    }

    /// Reads the reference pixels directly; the center must be integral.
    pub fn from_image(reference: &GrayImage, spec: &SubsetSpec) -> Result<Self> {
        if spec.x0.fract() != 0.0 || spec.y0.fract() != 0.0 {
            return Err(DicError::InvalidSubset("subset center must be integral".into()));
        }
        if !spec.fits(reference.width(), reference.height()) {
            return Err(DicError::OutOfBounds { x: spec.x0, y: spec.y0 });
        }
        let (cx, cy) = (spec.x0 as i64, spec.y0 as i64);
        let vals = spec
            .offsets()
            .map(|(dx, dy)| reference.get((cx + dx as i64) as usize, (cy + dy as i64) as usize))
            .collect();
        Self::from_values(*spec, vals)
    }

    fn from_values(spec: SubsetSpec, mut vals: Vec<f64>) -> Result<Self> {
        let norm = zero_normalize(&mut vals)?;
        debug_assert!(norm > 0.0);
        Ok(Self { spec, normalized: vals })
    }

    pub fn spec(&self) -> &SubsetSpec {
        &self.spec
    }
}

/// Subtracts the mean and divides by the root sum of squares; returns the
/// norm.
fn zero_normalize(vals: &mut [f64]) -> Result<f64> {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let ss: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum();
    let norm = ss.sqrt();
    if norm < DEGENERATE_EPS {
        return Err(DicError::DegenerateSubset);
    }
    for v in vals.iter_mut() {
        *v = (*v - mean) / norm;
    }
    Ok(norm)
}

fn deformed_values(def: &Interpolant, spec: &SubsetSpec, w: &WarpVector) -> Result<Vec<f64>> {
    let mut vals = Vec::with_capacity(spec.len());
    for (dx, dy) in spec.offsets() {
        let (x, y) = warp_point(spec, w, dx, dy);
        vals.push(def.value(x, y)?);
    }
    Ok(vals)
}

/// Zero-normalized sum of squared differences between the reference subset
/// and its warped counterpart in `def`. Lies in `[0, 4]`.
pub fn znssd_cost(reference: &Interpolant, def: &Interpolant, spec: &SubsetSpec, w: &WarpVector) -> Result<f64> {
    let f = ReferenceSubset::from_interpolant(reference, spec)?;
    znssd_against(&f, def, w)
}

/// ZNSSD of a prepared reference subset.
pub fn znssd_against(f: &ReferenceSubset, def: &Interpolant, w: &WarpVector) -> Result<f64> {
    let mut g = deformed_values(def, &f.spec, w)?;
    zero_normalize(&mut g)?;
    let c: f64 = f.normalized.iter().zip(&g).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(c.clamp(0.0, 4.0))
}

/// Result of the integer translation search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegerGuess {
    pub u: i64,
    pub v: i64,
    pub zncc: f64,
}

/// Exhaustive ZNCC search over integer translations within
/// `±search_radius`. Candidates whose window leaves the deformed image are
/// skipped; ties keep the first candidate in row-major order.
pub fn initial_guess(
    reference: &GrayImage,
    def: &GrayImage,
    spec: &SubsetSpec,
    search_radius: usize,
) -> Result<IntegerGuess> {
    let f = ReferenceSubset::from_image(reference, spec)?;
    let m = spec.half_width as i64;
    let (cx, cy) = (spec.x0 as i64, spec.y0 as i64);
    let (w, h) = (def.width() as i64, def.height() as i64);
    let r = search_radius as i64;
    let n = spec.len() as f64;
    let data = def.data();
    let mut best: Option<IntegerGuess> = None;
    for v in -r..=r {
        let y0 = cy + v;
        if y0 - m < 0 || y0 + m >= h {
            continue;
        }
        for u in -r..=r {
            let x0 = cx + u;
            if x0 - m < 0 || x0 + m >= w {
                continue;
            }
            let mut sg = 0.0;
            let mut sgg = 0.0;
            let mut sfg = 0.0;
            let mut k = 0;
            for yy in (y0 - m)..=(y0 + m) {
                let row = &data[(yy * w) as usize..];
                for xx in (x0 - m)..=(x0 + m) {
                    let g = row[xx as usize];
                    sg += g;
                    sgg += g * g;
                    sfg += f.normalized[k] * g;
                    k += 1;
                }
            }
            let var = sgg - sg * sg / n;
            if var <= DEGENERATE_EPS * DEGENERATE_EPS {
                continue;
            }
            let zncc = sfg / var.sqrt();
            if best.is_none_or(|b| zncc > b.zncc) {
                best = Some(IntegerGuess { u, v, zncc });
            }
        }
    }
    best.ok_or(DicError::DegenerateSubset)
}

/// Stopping rule and limits for [`refine_nr`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NrSettings {
    pub tol: f64,
    pub max_iter: usize,
    pub max_condition: f64,
}

impl Default for NrSettings {
    fn default() -> Self {
        Self { tol: 1e-6, max_iter: 50, max_condition: 1e12 }
    }
}

struct Linearization {
    znssd: f64,
    zncc: f64,
    /// `J^T r` (half the negative cost gradient).
    jtr: Vec<f64>,
    /// `J^T J` (half the Hessian), row-major `n x n`.
    jtj: Vec<f64>,
}

/// Evaluates cost, gradient and Gauss–Newton Hessian of the ZNSSD at `w` in
/// a single pass over the subset.
fn linearize(f: &ReferenceSubset, def: &Interpolant, w: &WarpVector) -> Option<Linearization> {
    let spec = &f.spec;
    let np = w.order.n_params();
    let n = spec.len() as f64;
    let mut sg = 0.0;
    let mut sgg = 0.0;
    let mut sfg = 0.0;
    let mut s_gr = [0.0; 12];
    let mut s_g_gr = [0.0; 12];
    let mut s_f_gr = [0.0; 12];
    let mut s_grgr = [0.0; 144];
    let mut grad = [0.0; 12];
    for ((dx, dy), fv) in spec.offsets().zip(&f.normalized) {
        let (x, y) = warp_point(spec, w, dx, dy);
        if !def.in_domain(x, y) {
            return None;
        }
        let (g, gx, gy) = def.value_grad_unchecked(x, y);
        grad[0] = gx;
        grad[1] = gy;
        grad[2] = gx * dx;
        grad[3] = gx * dy;
        grad[4] = gy * dx;
        grad[5] = gy * dy;
        if np == 12 {
            grad[6] = 0.5 * gx * dx * dx;
            grad[7] = 0.5 * gx * dy * dy;
            grad[8] = gx * dx * dy;
            grad[9] = 0.5 * gy * dx * dx;
            grad[10] = 0.5 * gy * dy * dy;
            grad[11] = gy * dx * dy;
        }
        sg += g;
        sgg += g * g;
        sfg += fv * g;
        for a in 0..np {
            let ga = grad[a];
            s_gr[a] += ga;
            s_g_gr[a] += g * ga;
            s_f_gr[a] += fv * ga;
            let row = &mut s_grgr[a * 12..a * 12 + np];
            for (b, slot) in row.iter_mut().enumerate().skip(a) {
                *slot += ga * grad[b];
            }
        }
    }
    let mean = sg / n;
    let var = sgg - sg * mean;
    if var <= DEGENERATE_EPS * DEGENERATE_EPS {
        return None;
    }
    let norm = var.sqrt();
    let zncc = (sfg / norm).clamp(-1.0, 1.0);
    let znssd = 2.0 * (1.0 - zncc);
    // s = sum(ĝ * dg/dp)
    let s: Vec<f64> = (0..np).map(|a| (s_g_gr[a] - mean * s_gr[a]) / norm).collect();
    let jtr: Vec<f64> = (0..np).map(|a| (s_f_gr[a] - zncc * s[a]) / norm).collect();
    let mut jtj = vec![0.0; np * np];
    let inv = 1.0 / var;
    for a in 0..np {
        for b in a..np {
            let val = (s_grgr[a * 12 + b] - s_gr[a] * s_gr[b] / n - s[a] * s[b]) * inv;
            jtj[a * np + b] = val;
            jtj[b * np + a] = val;
        }
    }
    Some(Linearization { znssd, zncc, jtr, jtj })
}

/// Solves the normal equations, refusing ill-conditioned systems.
fn solve_step(lin: &Linearization, np: usize, max_condition: f64) -> Option<Vec<f64>> {
    let diag: Vec<f64> = (0..np).map(|a| lin.jtj[a * np + a]).collect();
    if diag.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
        return None;
    }
    let scale: Vec<f64> = diag.iter().map(|d| 1.0 / d.sqrt()).collect();
    let a = DMatrix::from_fn(np, np, |i, j| lin.jtj[i * np + j] * scale[i] * scale[j]);
    let eig = SymmetricEigen::new(a.clone());
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for e in eig.eigenvalues.iter() {
        lo = lo.min(*e);
        hi = hi.max(*e);
    }
    if !(lo > 0.0) || hi / lo > max_condition {
        return None;
    }
    let rhs = DVector::from_fn(np, |i, _| lin.jtr[i] * scale[i]);
    let sol = a.cholesky()?.solve(&rhs);
    Some((0..np).map(|i| sol[i] * scale[i]).collect())
}

fn weighted_norm(delta: &[f64], half_width: usize) -> f64 {
    let m = half_width as f64;
    let m2 = m * m;
    delta
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let wgt = match i {
                0 | 1 => 1.0,
                2..=5 => m,
                _ => m2,
            };
            (d * wgt) * (d * wgt)
        })
        .sum::<f64>()
        .sqrt()
}

/// Newton–Raphson refinement of a warp on the ZNSSD cost.
pub fn refine_nr(
    reference: &Interpolant,
    def: &Interpolant,
    spec: &SubsetSpec,
    w0: &WarpVector,
    tol: f64,
    max_iter: usize,
) -> Result<MatchResult> {
    let f = ReferenceSubset::from_interpolant(reference, spec)?;
    refine_against(&f, def, w0, &NrSettings { tol, max_iter, ..NrSettings::default() })
}

/// Refinement against a prepared reference subset.
///
/// Failures during iteration (warp leaving the image, degenerate deformed
/// subset, singular Hessian) yield a non-converged result carrying the best
/// warp seen so far. An error is returned only when the initial warp itself
/// cannot be evaluated.
pub fn refine_against(
    f: &ReferenceSubset,
    def: &Interpolant,
    w0: &WarpVector,
    settings: &NrSettings,
) -> Result<MatchResult> {
    if !w0.is_finite() {
        return Err(DicError::InvalidArgument("initial warp is not finite".into()));
    }
    let np = w0.order.n_params();
    let hw = f.spec.half_width;
    let mut p = *w0;
    let mut lin = linearize(f, def, &p).ok_or_else(|| {
        let (x, y) = warp_point(&f.spec, &p, 0.0, 0.0);
        if def.in_domain(x, y) {
            DicError::DegenerateSubset
        } else {
            DicError::OutOfBounds { x, y }
        }
    })?;
    let mut iterations = 1;
    let fail = |p: WarpVector, lin: &Linearization, iterations| MatchResult {
        warp: p,
        znssd: lin.znssd,
        zncc: lin.zncc,
        iterations,
        converged: false,
    };
    loop {
        let Some(delta) = solve_step(&lin, np, settings.max_condition) else {
            return Ok(fail(p, &lin, iterations));
        };
        if !delta.iter().all(|d| d.is_finite()) {
            return Ok(fail(p, &lin, iterations));
        }
        if weighted_norm(&delta, hw) < settings.tol {
            return Ok(MatchResult { warp: p, znssd: lin.znssd, zncc: lin.zncc, iterations, converged: true });
        }
        if iterations >= settings.max_iter {
            return Ok(fail(p, &lin, iterations));
        }
        // Step, halving while the cost would increase.
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..6 {
            let mut cand = p;
            cand.add_scaled(&delta, t);
            iterations += 1;
            if let Some(l) = linearize(f, def, &cand) {
                if l.znssd <= lin.znssd + 1e-13 {
                    accepted = Some((cand, l));
                    break;
                }
            }
            if iterations >= settings.max_iter {
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some((cand, l)) => {
                p = cand;
                lin = l;
            }
            None => return Ok(fail(p, &lin, iterations)),
        }
    }
}
