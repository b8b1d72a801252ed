//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 2, 3 and 4 compare against closed forms exactly as printed; those
//! forms disagree with the computed fields (a wrong denominator, a flipped
//! curvature sign and a dropped factor), so the suite expects precisely those
//! three to fail and exits non-zero on any other outcome.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use frontal_core::blaschke::{
    blaschke_field, blaschke_jets, blaschke_verify, conormal_verify, equivariance_residual, extension_condition,
    gauss_extension, Blaschke, ExprMetric, Verdict,
};
use frontal_core::catalog::{entry, CatalogEntry};
use frontal_core::config::Config;
use frontal_core::equiaffine::{d_from_gamma, structure_from_field, ConstantField, EquiaffineError, ScaledField, TransversalField};
use frontal_core::expr::{parse, BinOp, Expr, Func, Var};
use frontal_core::frame::{factor_lambda, singular_scan, Frontal, Grid, Rect};
use frontal_core::jets::{fd_jet, mat2_det, Jet};
use frontal_core::reconstruct::{
    affine_align, integrate_frame, order_probe, reconstruct, ReconstructError, StructureData, StructureSource,
    TableStructure,
};
use nalgebra::{Matrix3, Vector3};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

const EXPECTED_FAILURES: [usize; 3] = [2, 3, 4];
const BLASCHKE_ENTRIES: [&str; 4] = ["ex-5.8", "ex-5.9", "ex-5.10", "paraboloid"];

type Outcome = Result<(bool, String), String>;

fn cat(name: &str) -> CatalogEntry {
    entry(name).expect("catalog entry")
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn rel3(got: [f64; 3], want: [f64; 3]) -> f64 {
    let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    (0..3).map(|i| (got[i] - want[i]).abs()).fold(0.0, f64::max) / scale
}

fn random_points(rng: &mut StdRng, r: Rect, n: usize, keep: impl Fn([f64; 2]) -> bool) -> Vec<[f64; 2]> {
    let mut pts = Vec::with_capacity(n);
    while pts.len() < n {
        let u = [rng.random_range(r.u1.0..r.u1.1), rng.random_range(r.u2.0..r.u2.1)];
        if keep(u) {
            pts.push(u);
        }
    }
    pts
}

fn open_square() -> Rect {
    Rect::new((-1.0, 1.0), (-1.0, 1.0))
}

// Closed forms as printed.

fn xi_59_printed(u: [f64; 2]) -> [f64; 3] {
    let v = u[1];
    let d = 4.0 * (v * v + v + 1.0).powf(1.5) * (v + 1.0).powf(1.5);
    [3.0 * v / d, 0.0, (7.0 * v.powi(3) + 4.0) / d]
}

fn xi_59_regrouped(u: [f64; 2]) -> [f64; 3] {
    let v = u[1];
    let d = 4.0 * (v.powi(3) + 1.0).powf(1.5);
    [3.0 * v / d, 0.0, (7.0 * v.powi(3) + 4.0) / d]
}

fn k_59_printed(u: [f64; 2]) -> f64 {
    let (a, v) = (u[0], u[1]);
    let num = (v + 1.0).powi(2) * (v * v - v + 1.0).powi(2);
    let den = v.powi(10) + 2.0 * v.powi(7) + v.powi(6) + v.powi(4) + 2.0 * v.powi(3) + a * a + 1.0;
    num / (den * den)
}

fn xi_58_printed(u: [f64; 2]) -> [f64; 3] {
    let (a, v) = (u[0], u[1]);
    let p = |c: f64, i: i32, j: i32| c * a.powi(i) * v.powi(j);
    let rho = p(54.0, 4, 4) + p(9.0, 2, 5) + p(4.0, 0, 6) + p(54.0, 2, 2) + p(12.0, 0, 3) + 9.0;
    let x1 = p(216.0, 6, 4) - p(189.0, 4, 5) + p(66.0, 2, 6) + p(16.0, 0, 7) + p(324.0, 4, 2) + p(9.0, 2, 3)
        + p(48.0, 0, 4)
        + p(108.0, 2, 0)
        + p(36.0, 0, 1);
    let x2 = (p(216.0, 4, 4) + p(87.0, 2, 5) - p(16.0, 0, 6) + p(252.0, 2, 2) + p(24.0, 0, 3) + 72.0) * v * v;
    let x3 = p(145800.0, 8, 8)
        + p(35721.0, 6, 9)
        + p(25326.0, 4, 10)
        + p(4896.0, 2, 11)
        + p(277020.0, 6, 6)
        + p(896.0, 0, 12)
        + p(114129.0, 4, 7)
        + p(39204.0, 2, 8)
        + p(5088.0, 0, 9)
        + p(179820.0, 4, 4)
        + p(88938.0, 2, 5)
        + p(12096.0, 0, 6)
        + p(48600.0, 2, 2)
        + p(14040.0, 0, 3)
        + 6480.0;
    let s3 = 3f64.sqrt();
    let r = rho.powf(1.75);
    [-3.0 * s3 / 8.0 * x1 / r, 9.0 * s3 / 8.0 * x2 / r, s3 / 240.0 * x3 / r]
}

fn criterion_1(cfg: &Config) -> Outcome {
    let f = cat("ex-5.10").blaschke_frontal(cfg);
    let f = f.with_domain(open_square());
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(err)?;
    let t = Instant::now();
    let field = pool.install(|| blaschke_field(&f, Grid::new(101, 101), cfg)).map_err(err)?;
    let secs = t.elapsed().as_secs_f64();
    let dev = field.max_deviation_from([0.0, 0.0, 1.0]);
    Ok((
        dev <= 1e-6 && secs <= 10.0,
        format!("max |ξ − (0,0,1)| = {dev:.2e} (tol 1e-6) on 101×101, {secs:.2} s on one thread (limit 10 s)"),
    ))
}

fn criterion_2(cfg: &Config, rng: &mut StdRng) -> Outcome {
    let f = cat("ex-5.9").frontal(cfg);
    let pts = random_points(rng, open_square(), 100, |_| true);
    let (mut printed, mut regrouped) = (0.0f64, 0.0f64);
    for &u in &pts {
        let xi = blaschke_jets(&f, u, 0, cfg).map_err(err)?.xi.value();
        printed = printed.max(rel3(xi, xi_59_printed(u)));
        regrouped = regrouped.max(rel3(xi, xi_59_regrouped(u)));
    }
    let mut singular = 0.0f64;
    for k in 0..11 {
        let u = [-0.9 + 0.18 * k as f64, 0.0];
        let xi = blaschke_jets(&f, u, 0, cfg).map_err(err)?.xi.value();
        let want = xi_59_printed(u);
        singular = singular.max((0..3).map(|i| (xi[i] - want[i]).abs()).fold(0.0, f64::max));
    }
    Ok((
        printed <= 1e-6 && singular <= 1e-4,
        format!(
            "100 random points: relative error {printed:.2e} (tol 1e-6); u2 = 0 limits: {singular:.2e} (tol 1e-4); \
             with denominator 4(u2³+1)^(3/2) instead: {regrouped:.2e}"
        ),
    ))
}

fn criterion_3(cfg: &Config, rng: &mut StdRng) -> Outcome {
    let f = cat("ex-5.9").frontal(cfg);
    let pts = random_points(rng, Rect::new((-1.0, 1.0), (-0.9, 0.9)), 100, |u| u[1].abs() > 1e-3);
    let (mut regular, mut flipped) = (0.0f64, 0.0f64);
    for &u in &pts {
        let k = gauss_extension(&f, u, cfg).map_err(err)?.k;
        let want = k_59_printed(u);
        regular = regular.max((k - want).abs() / want.abs());
        flipped = flipped.max((k + want).abs() / want.abs());
    }
    let mut singular = 0.0f64;
    for k in 0..11 {
        let u = [-0.9 + 0.18 * k as f64, 0.0];
        let g = gauss_extension(&f, u, cfg).map_err(err)?;
        let want = k_59_printed(u);
        singular = singular.max((g.k - want).abs() / want.abs());
    }
    Ok((
        regular <= 1e-8 && singular <= 1e-4,
        format!(
            "regular points: relative error {regular:.2e} (tol 1e-8); singular line: {singular:.2e} (tol 1e-4); \
             against the negated form: {flipped:.2e}"
        ),
    ))
}

fn criterion_4(cfg: &Config, rng: &mut StdRng) -> Outcome {
    let e = cat("ex-5.8");
    let f = e.frontal(cfg);
    let pts = random_points(rng, open_square(), 100, |u| u[1].abs() > 1e-3);
    let mut lambda_declared = 0.0f64;
    let mut lambda_factored = 0.0f64;
    for &u in &pts {
        let j = f.jets(u, 3).map_err(err)?;
        let two_u2 = Jet::var(u[1], 1, 3) * 2.0;
        lambda_declared = lambda_declared.max((mat2_det(&j.lambda) - two_u2).max_abs());
        let dx = [j.x.diff(0).map_err(err)?, j.x.diff(1).map_err(err)?];
        let w = (j.w1.truncate(2), j.w2.truncate(2));
        let lam = factor_lambda(&dx, &w.0, &w.1, u, cfg).map_err(err)?;
        lambda_factored = lambda_factored.max((mat2_det(&lam).value() - 2.0 * u[1]).abs());
    }
    let mut comp = [0.0f64; 3];
    for &u in &pts {
        let xi = blaschke_jets(&f, u, 0, cfg).map_err(err)?.xi.value();
        let want = xi_58_printed(u);
        let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..3 {
            comp[i] = comp[i].max((xi[i] - want[i]).abs() / scale);
        }
    }
    let worst = comp.iter().copied().fold(0.0, f64::max);
    Ok((
        lambda_declared == 0.0 && lambda_factored <= 1e-12 && worst <= 1e-6,
        format!(
            "λ_Ω − 2u2: declared jets {lambda_declared:.1e}, factored from Dx {lambda_factored:.1e}; \
             ξ relative error by component {:.2e}, {:.2e}, {:.2e} (tol 1e-6)",
            comp[0], comp[1], comp[2]
        ),
    ))
}

fn criterion_5(cfg: &Config) -> Outcome {
    let mut ok = true;
    let mut parts = vec![];
    for name in BLASCHKE_ENTRIES {
        let f = cat(name).blaschke_frontal(cfg);
        let r = blaschke_verify(&f, &Blaschke, Grid::new(41, 41), cfg).map_err(err)?;
        let vol = r.max_volume_residual.max(r.max_volume_residual_classical);
        ok &= r.max_tau <= 1e-6 && vol <= 1e-6 && r.regular_points > 0;
        parts.push(format!("{name} τ {:.1e} vol {vol:.1e}", r.max_tau));
    }
    Ok((ok, format!("{} (tol 1e-6, 41×41)", parts.join("; "))))
}

fn unimodular(rng: &mut StdRng) -> Matrix3<f64> {
    loop {
        let a = Matrix3::from_fn(|_, _| rng.random_range(-2.0..2.0));
        let d: f64 = a.determinant();
        if d.abs() > 0.3 {
            return a / d.cbrt();
        }
    }
}

fn criterion_6(cfg: &Config, rng: &mut StdRng) -> Outcome {
    let maps: Vec<(Matrix3<f64>, Vector3<f64>)> =
        (0..5).map(|_| (unimodular(rng), Vector3::from_fn(|_, _| rng.random_range(-3.0..3.0)))).collect();
    let mut worst = 0.0f64;
    for name in BLASCHKE_ENTRIES {
        let f = cat(name).blaschke_frontal(cfg);
        let pts = Grid::new(11, 11).points(&f.domain);
        for (a, b) in &maps {
            worst = worst.max(equivariance_residual(&f, *a, *b, &pts, cfg).map_err(err)?);
        }
    }
    Ok((worst <= 1e-6, format!("max |ξ_(Ax+b) − Aξ_x| = {worst:.2e} over 5 maps, 4 entries, 11×11 (tol 1e-6)")))
}

fn criterion_7(cfg: &Config) -> Outcome {
    let mut ok = true;
    let mut worst = 0.0f64;
    let mut parts = vec![];
    for name in BLASCHKE_ENTRIES {
        let f = cat(name).blaschke_frontal(cfg);
        let r = conormal_verify(&f, &Blaschke, Grid::new(21, 21), cfg).map_err(err)?;
        let m = r.pairing.max(r.tangency).max(r.derivative_xi).max(r.derivative_w);
        worst = worst.max(m);
        ok &= m <= 1e-8 && r.immersion_where_nonparabolic && r.regular_points > 0;
        parts.push(format!("{name} σ2 ≥ {:.1e}", r.min_sigma2.unwrap_or(f64::NAN)));
    }
    Ok((ok, format!("identity residuals ≤ {worst:.2e} (tol 1e-8); Dν rank 2: {}", parts.join(", "))))
}

fn criterion_8(cfg: &Config) -> Outcome {
    let t = Instant::now();
    let mut ok = true;
    let mut parts = vec![];
    for name in ["ex-5.9", "ex-5.10"] {
        let f = cat(name).blaschke_frontal(cfg);
        let q = [f.domain.u1.0, f.domain.u2.0];
        let grid = Grid::new(201, 201);
        let sd = StructureData::from_field(&f, Arc::new(Blaschke), q, cfg).map_err(err)?.sample(grid).map_err(err)?;
        let rec = reconstruct(&sd, grid, 1e-3, cfg).map_err(err)?;
        let pts = grid.points(&f.domain);
        let truth = pts.iter().map(|&u| f.jets(u, 0).map(|j| j.x.value())).collect::<Result<Vec<_>, _>>().map_err(err)?;
        let xs: Vec<[f64; 3]> = rec.position.x.iter().map(|v| [v[0], v[1], v[2]]).collect();
        let al = affine_align(&xs, &truth).map_err(err)?;
        let disc = rec.frame.discrepancy.max(rec.position.discrepancy);
        ok &= al.sup_error <= 1e-4 && disc <= 1e-4 && rec.frame.min_abs_det > 0.0;
        parts.push(format!("{name} sup {:.1e} path {disc:.1e}", al.sup_error));
    }
    let f = cat("ex-5.9").blaschke_frontal(cfg);
    let q = [f.domain.u1.0, f.domain.u2.0];
    let sd = StructureData::from_field(&f, Arc::new(Blaschke), q, cfg).map_err(err)?;
    let probe = order_probe(&sd, Grid::new(9, 9), 0.05).map_err(err)?;
    let secs = t.elapsed().as_secs_f64();
    ok &= probe.ratio >= 8.0 && secs <= 60.0;
    Ok((
        ok,
        format!(
            "{} (tol 1e-4, 201×201, step 1e-3); order probe ex-5.9 steps 0.05/0.025: {:.1e} → {:.1e}, ratio {:.1} (≥ 8); {secs:.1} s (limit 60 s)",
            parts.join("; "),
            probe.discrepancy[0],
            probe.discrepancy[1],
            probe.ratio
        ),
    ))
}

fn random_expr(rng: &mut StdRng, depth: usize) -> Expr {
    let bx = Box::new;
    if depth == 0 || rng.random_bool(0.3) {
        return match rng.random_range(0..3) {
            0 => Expr::Const(rng.random_range(-2.0..2.0)),
            1 => Expr::Var(Var::U1),
            _ => Expr::Var(Var::U2),
        };
    }
    match rng.random_range(0..4) {
        0 => Expr::Neg(bx(random_expr(rng, depth - 1))),
        1 => {
            let g = [Func::Sin, Func::Cos, Func::Exp][rng.random_range(0..3)];
            Expr::Func(g, bx(random_expr(rng, depth - 1)))
        }
        2 => {
            let op = [BinOp::Add, BinOp::Sub, BinOp::Mul][rng.random_range(0..3)];
            Expr::Bin(op, bx(random_expr(rng, depth - 1)), bx(random_expr(rng, depth - 1)))
        }
        _ => Expr::Pow(bx(random_expr(rng, depth - 1)), rng.random_range(0..4)),
    }
}

fn criterion_9(cfg: &Config, rng: &mut StdRng) -> Outcome {
    let tol = [0.0, 1e-8, 1e-6, 1e-4];
    let mut worst = [0.0f64; 4];
    for _ in 0..1000 {
        let e = random_expr(rng, 3);
        let parsed = parse(&e.to_string()).map_err(err)?;
        let u = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        for order in 1..=3 {
            let exact = parsed.eval_jet(u, order).map_err(err)?;
            let fd = fd_jet(|a, b| e.eval(a, b, None).unwrap_or(f64::NAN), u, order, cfg.fd_step);
            let scale = 1.0 + exact.max_abs().max(fd.max_abs());
            worst[order] = worst[order].max((exact - fd).max_abs() / scale);
        }
    }
    let jets_ok = (1..=3).all(|k| worst[k] <= tol[k]);

    let mut d_worst = 0.0f64;
    for name in ["ex-5.8", "ex-5.9", "ex-5.10", "paraboloid", "plane"] {
        let e = cat(name);
        let (f, field): (Frontal, Box<dyn TransversalField>) = if name == "plane" {
            (e.frontal(cfg), Box::new(ConstantField([0.3, -0.2, 1.0])))
        } else {
            (e.blaschke_frontal(cfg), Box::new(Blaschke))
        };
        let pts = random_points(rng, f.domain, 50, |u| {
            f.jets(u, 0).map(|j| mat2_det(&j.lambda).value().abs() > 1e-3).unwrap_or(false)
        });
        for u in pts {
            let direct = structure_from_field(&f, field.as_ref(), u, cfg).map_err(err)?;
            let routed = d_from_gamma(&f, field.as_ref(), u, cfg).map_err(err)?;
            for (a, b) in [(direct.d1, routed[0]), (direct.d2, routed[1])] {
                for i in 0..2 {
                    for k in 0..2 {
                        d_worst = d_worst.max((a[i][k] - b[i][k]).abs() / (1.0 + a[i][k].abs()));
                    }
                }
            }
        }
    }
    Ok((
        jets_ok && d_worst <= 1e-8,
        format!(
            "jets vs finite differences on 1000 expressions: {:.1e}/{:.1e}/{:.1e} (tol 1e-8/1e-6/1e-4); \
             D symbols across routes: {d_worst:.1e} (tol 1e-8, 50 points × 5 entries)",
            worst[1], worst[2], worst[3]
        ),
    ))
}

fn criterion_10(cfg: &Config) -> Outcome {
    let mut checked = 0;
    let mut failures = vec![];
    for name in ["ex-5.9", "ex-5.10"] {
        let f = cat(name).frontal(cfg);
        let grid = Grid::new(21, 21);
        let scan = singular_scan(&f, grid, cfg).map_err(err)?;
        let pts = grid.points(&f.domain);
        for [i, j] in scan.singular_nodes {
            let u = pts[j * grid.nx + i];
            for which in [1, 2] {
                let v = extension_condition(&f, which, u, cfg).map_err(err)?;
                checked += 1;
                if v.verdict != Verdict::Extendable {
                    failures.push(format!("{name} {u:?} condition {which}: {:?}", v.verdict));
                }
            }
        }
    }
    let e = |s: [&str; 4]| s.map(|t| parse(t).unwrap());
    let synthetic = ExprMetric { lambda: e(["1", "0", "0", "u2"]), i_omega: e(["1", "0", "0", "1"]), i: e(["u2", "0", "0", "u2^2"]) };
    let v = extension_condition(&synthetic, 1, [0.2, 0.0], cfg).map_err(err)?.verdict;
    Ok((
        failures.is_empty() && checked > 0 && v == Verdict::NotExtendable,
        format!(
            "{checked} conditions at singular nodes, {} not extendable{}; synthetic metric: {v:?}",
            failures.len(),
            failures.first().map(|s| format!(" (first: {s})")).unwrap_or_default()
        ),
    ))
}

fn criterion_11(cfg: &Config) -> Outcome {
    let plane = cat("plane").frontal(cfg);
    let k_vanishes = matches!(blaschke_field(&plane, Grid::new(5, 5), cfg), Err(EquiaffineError::KVanishes { .. }));
    let para = cat("paraboloid").frontal(cfg);
    let twice = ScaledField { inner: Arc::new(Blaschke), factor: 2.0 };
    let r = blaschke_verify(&para, &twice, Grid::new(11, 11), cfg).map_err(err)?;
    let zero = ["0", "0", "0", "0"];
    let id = ["1", "0", "0", "1"];
    let t = TableStructure::from_exprs(id, id, zero, ["0", "u2", "0", "0"], zero, zero, "1").map_err(err)?;
    let sd = StructureData {
        domain: Rect::new((0.0, 1.0), (0.0, 1.0)),
        basepoint: [0.0, 0.0],
        w0: Matrix3::identity(),
        p: Vector3::zeros(),
        source: StructureSource::Table(t),
    };
    let incompatible = matches!(integrate_frame(&sd, Grid::new(6, 6), 0.01, cfg), Err(ReconstructError::CompatibilityViolated { .. }));
    Ok((
        k_vanishes && r.max_volume_residual > 1e-3 && incompatible,
        format!(
            "plane KVanishes: {k_vanishes}; 2ξ volume residual {:.2} (> 1e-3); incompatible data rejected: {incompatible}",
            r.max_volume_residual
        ),
    ))
}

fn main() -> ExitCode {
    let cfg = Config::default();
    let mut rng = StdRng::seed_from_u64(0x5eed_f00d);
    let criteria: Vec<(usize, &str, Box<dyn FnOnce(&Config, &mut StdRng) -> Outcome>)> = vec![
        (1, "constant Blaschke field of the rank-one wave front", Box::new(|c, _| criterion_1(c))),
        (2, "cuspidal edge Blaschke field against its printed closed form", Box::new(criterion_2)),
        (3, "cuspidal edge curvature extension against its printed closed form", Box::new(criterion_3)),
        (4, "cuspidal cross cap λ_Ω and Blaschke field against printed forms", Box::new(criterion_4)),
        (5, "equiaffinity and volume match of catalog Blaschke fields", Box::new(|c, _| criterion_5(c))),
        (6, "equivariance under random unimodular maps", Box::new(criterion_6)),
        (7, "conormal identities and rank", Box::new(|c, _| criterion_7(c))),
        (8, "extract, reconstruct and align", Box::new(|c, _| criterion_8(c))),
        (9, "oracle equivalence of jets and D symbols", Box::new(criterion_9)),
        (10, "extension conditions on singular covers", Box::new(|c, _| criterion_10(c))),
        (11, "negative controls", Box::new(|c, _| criterion_11(c))),
    ];
    let mut failed = BTreeSet::new();
    for (n, title, run) in criteria {
        let t = Instant::now();
        let (pass, detail) = match run(&cfg, &mut rng) {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failed.insert(n);
        }
        let tag = if pass { "PASS" } else { "FAIL" };
        println!("{tag} {n:>2} {title}: {detail} [{:.1} s]", t.elapsed().as_secs_f64());
    }
    let expected: BTreeSet<usize> = EXPECTED_FAILURES.into_iter().collect();
    if failed == expected {
        println!("acceptance: {} passed; failures {:?} are the expected closed-form mismatches", 11 - failed.len(), failed);
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failures {:?} differ from the expected set {:?}", failed, expected);
        ExitCode::FAILURE
    }
}
