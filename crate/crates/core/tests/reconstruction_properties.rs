use std::sync::Arc;

use frontal_core::blaschke::Blaschke;
use frontal_core::catalog::entry;
use frontal_core::config::Config;
use frontal_core::frame::{Grid, Rect};
use frontal_core::reconstruct::{integrate_frame, order_probe, StructureData, StructureSource, TableStructure};
use nalgebra::Matrix3;
use proptest::prelude::*;

fn refs(a: &[String; 4]) -> [&str; 4] {
    [a[0].as_str(), a[1].as_str(), a[2].as_str(), a[3].as_str()]
}

fn expm(m: Matrix3<f64>) -> Matrix3<f64> {
    let (mut term, mut sum) = (Matrix3::identity(), Matrix3::identity());
    for k in 1..60 {
        term = term * m / k as f64;
        sum += term;
    }
    sum
}

fn num(v: f64) -> String {
    format!("({v:e})")
}

/// Data with `D2 = α D1`, both constant, so the frame is `W0 exp((u1 + α u2) D1ᵀ)`.
fn commuting(d: [f64; 4], h: [f64; 2], s: [f64; 2], alpha: f64, w0: Matrix3<f64>) -> StructureData {
    let d1 = d.map(num);
    let d2 = d.map(|v| num(alpha * v));
    let hh = [num(h[0]), num(alpha * h[0]), num(h[1]), num(alpha * h[1])];
    let ss = [num(s[0]), num(s[1]), num(alpha * s[0]), num(alpha * s[1])];
    let id = ["1", "0", "0", "1"];
    let t = TableStructure::from_exprs(id, id, refs(&hh), refs(&d1), refs(&d2), refs(&ss), "1").unwrap();
    StructureData {
        domain: Rect::new((0.0, 1.0), (0.0, 1.0)),
        basepoint: [0.0, 0.0],
        w0,
        p: nalgebra::Vector3::zeros(),
        source: StructureSource::Table(t),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn commuting_constant_blocks_integrate_to_exponentials(
        d in prop::array::uniform4(-1.0..1.0f64),
        h in prop::array::uniform2(-1.0..1.0f64),
        s in prop::array::uniform2(-1.0..1.0f64),
        alpha in -1.0..1.0f64,
        w in prop::array::uniform9(-1.0..1.0f64),
    ) {
        let w0 = Matrix3::from_row_slice(&w) + Matrix3::identity() * 2.0;
        prop_assume!(w0.determinant().abs() > 0.1);
        let sd = commuting(d, h, s, alpha, w0);
        let grid = Grid::new(5, 5);
        let f = integrate_frame(&sd, grid, 0.01, &Config::default()).unwrap();
        prop_assert!(f.discrepancy <= 1e-10, "discrepancy {:e}", f.discrepancy);
        let d1 = sd.eval([0.0, 0.0], 0).unwrap().block(0);
        let sign = w0.determinant().signum();
        for (u, w) in grid.points(&sd.domain).iter().zip(&f.w) {
            let exact = w0 * expm(d1.transpose() * (u[0] + alpha * u[1]));
            prop_assert!((w - exact).amax() <= 1e-8 * (1.0 + exact.amax()), "{u:?}: {w} vs {exact}");
            prop_assert_eq!(w.determinant().signum(), sign);
        }
        prop_assert!(f.min_abs_det > 0.0);
    }
}

#[test]
fn path_discrepancy_shrinks_at_fourth_order() {
    let cfg = Config::default();
    let f = entry("ex-5.9").unwrap().blaschke_frontal(&cfg);
    let q = [f.domain.u1.0, f.domain.u2.0];
    let sd = StructureData::from_field(&f, Arc::new(Blaschke), q, &cfg).unwrap();
    let probe = order_probe(&sd, Grid::new(9, 9), 0.05).unwrap();
    assert!(probe.ratio >= 8.0, "{probe:?}");
}
