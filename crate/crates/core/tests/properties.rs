mod common;

use dic_core::correlation::{znssd_cost, ShapeOrder, SubsetSpec, WarpVector};
use dic_core::crack::{detect_crack_edges, relative_displacement, Orientation};
use dic_core::image::{gradients, GrayImage};
use dic_core::interp::{InterpKind, Interpolant};
use dic_core::rgdic::{analyze_frame, AnalysisConfig, DisplacementField, RoiGrid, SeedSpec};
use dic_core::synthetic::RotationField;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise(w: usize, h: usize, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GrayImage::from_fn(w, h, |_, _| rng.random::<f64>()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gradients_are_linear(s1 in any::<u64>(), s2 in any::<u64>(), a in 0.0..0.5f64, b in 0.0..0.5f64) {
        let (i1, i2) = (noise(9, 7, s1), noise(9, 7, s2));
        let mix = GrayImage::from_fn(9, 7, |x, y| a * i1.get(x, y) + b * i2.get(x, y)).unwrap();
        let (g1, g2, gm) = (gradients(&i1), gradients(&i2), gradients(&mix));
        for k in 0..gm.fx.len() {
            prop_assert!((gm.fx[k] - (a * g1.fx[k] + b * g2.fx[k])).abs() < 1e-12);
            prop_assert!((gm.fy[k] - (a * g1.fy[k] + b * g2.fy[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn cost_ignores_gain_and_offset(
        seed in any::<u64>(),
        gain in 0.2..1.0f64,
        offset in 0.0..0.5f64,
        u in -2.0..2.0f64,
        v in -2.0..2.0f64,
    ) {
        prop_assume!(gain + offset <= 1.0);
        let f = noise(40, 40, seed);
        let g = noise(40, 40, seed ^ 0x5a5a);
        let g2 = GrayImage::from_fn(40, 40, |x, y| gain * g.get(x, y) + offset).unwrap();
        let fi = Interpolant::new(&f, InterpKind::BicubicSpline).unwrap();
        let (gi, g2i) = (
            Interpolant::new(&g, InterpKind::BicubicSpline).unwrap(),
            Interpolant::new(&g2, InterpKind::BicubicSpline).unwrap(),
        );
        let spec = SubsetSpec::new(20.0, 20.0, 7).unwrap();
        let w = WarpVector::translation(ShapeOrder::First, u, v);
        let c1 = znssd_cost(&fi, &gi, &spec, &w).unwrap();
        let c2 = znssd_cost(&fi, &g2i, &spec, &w).unwrap();
        prop_assert!((c1 - c2).abs() < 1e-9, "{c1} vs {c2}");
        prop_assert!((0.0..=4.0).contains(&c1));
    }

    #[test]
    fn rotation_is_an_isometry(
        x0 in 0.0..1000.0f64,
        alpha in -30.0..30.0f64,
        p in (0.0..1000.0f64, 1.0..1000.0f64),
        q in (0.0..1000.0f64, 1.0..1000.0f64),
    ) {
        let r = RotationField::new(x0, alpha).unwrap();
        let map = |(x, y): (f64, f64)| {
            let (u, v) = r.eval(x, y).unwrap();
            (x + u, y + v)
        };
        let (pp, qq) = (map(p), map(q));
        let d0 = (p.0 - q.0).hypot(p.1 - q.1);
        let d1 = (pp.0 - qq.0).hypot(pp.1 - qq.1);
        prop_assert!((d0 - d1).abs() < 1e-8 * (1.0 + d0));
        // The center stays put.
        prop_assert_eq!(r.eval(x0, 0.0).unwrap(), (0.0, 0.0));
        let back = r.inverse(pp.0, pp.1);
        prop_assert!((back.0 - p.0).abs() < 1e-8 && (back.1 - p.1).abs() < 1e-8);
    }

    #[test]
    fn rotations_compose(
        x0 in 0.0..1000.0f64,
        a in -20.0..20.0f64,
        b in -20.0..20.0f64,
        p in (0.0..1000.0f64, 200.0..1000.0f64),
    ) {
        let (ra, rb, rab) = (
            RotationField::new(x0, a).unwrap(),
            RotationField::new(x0, b).unwrap(),
            RotationField::new(x0, a + b).unwrap(),
        );
        let (u1, v1) = ra.eval(p.0, p.1).unwrap();
        let mid = (p.0 + u1, p.1 + v1);
        // Composition is only defined while the intermediate point stays
        // below the center line.
        prop_assume!(mid.1 > 1.0);
        let (u2, v2) = rb.eval(mid.0, mid.1).unwrap();
        let (u, v) = rab.eval(p.0, p.1).unwrap();
        prop_assert!((u1 + u2 - u).abs() < 1e-8 && (v1 + v2 - v).abs() < 1e-8);
    }

    #[test]
    fn raising_the_threshold_never_adds_edges(
        seed in any::<u64>(),
        d1 in 0.001..0.05f64,
        d2 in 0.001..0.05f64,
    ) {
        let grid = RoiGrid::new(0, 0, 80, 80, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let field = DisplacementField::from_fn(grid, 1, |_, _| (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)))
            .with_scale(Some(0.01));
        let (lo, hi) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
        for o in [Orientation::Vertical, Orientation::Horizontal] {
            let rel = relative_displacement(&field, o, None).unwrap();
            let e_lo = detect_crack_edges(&rel, lo, &field).unwrap();
            let e_hi = detect_crack_edges(&rel, hi, &field).unwrap();
            prop_assert!(e_hi.len() <= e_lo.len());
            for e in &e_hi {
                prop_assert!(e_lo.iter().any(|f| (f.rel_row, f.rel_col) == (e.rel_row, e.rel_col)));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    /// An integer shift of the whole image is recovered at every point.
    #[test]
    fn rigid_translation_is_recovered(dx in 0usize..6, dy in 0usize..6, seed in 0u64..1000) {
        let img = common::speckle(110, 110, seed);
        let shifted = GrayImage::from_fn(110, 110, |x, y| img.get(x.saturating_sub(dx), y.saturating_sub(dy))).unwrap();
        let grid = RoiGrid::new(30, 30, 50, 50, 10).unwrap();
        let seeds = SeedSpec::from_pixels(&grid, &[(50.0, 50.0)], 10).unwrap();
        let cfg = AnalysisConfig { half_width: 8, ..AnalysisConfig::default() };
        let field = analyze_frame(&img, &shifted, &grid, &seeds, &cfg).unwrap();
        for i in 0..grid.len() {
            let (u, v) = field.get_index(i).expect("every point valid");
            prop_assert!((u - dx as f64).abs() < 0.01 && (v - dy as f64).abs() < 0.01, "point {i}: ({u}, {v})");
        }
    }
}
