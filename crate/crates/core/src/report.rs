//! Run reports and surface exports shared by the command line and the acceptance runner.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blaschke::{blaschke_field, blaschke_verify, conormal_verify, equivariance_residual, Blaschke};
use crate::catalog::CatalogEntry;
use crate::config::Config;
use crate::equiaffine::{
    check_tau_formula, classical_symbols, d_from_gamma, is_regular, parallel_volume_residual, structure_from_field,
    EquiaffineError, NormalField, ScaledField, TransversalField,
};
use crate::frame::{frame_data, nonparabolic_test, singular_scan, wavefront_test, FrameError, Frontal, Grid, Rect};
use crate::reconstruct::{
    affine_align, integrability_residual, reconstruct, ReconstructError, Reconstruction, StructureData,
};

pub const SCHEMA: &str = "frontal-lab/report/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    AtMost,
    AtLeast,
}

/// A number together with the threshold it was judged against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Judged {
    pub value: f64,
    pub tol: f64,
    pub bound: Bound,
    pub holds: bool,
}

impl Judged {
    pub fn at_most(value: f64, tol: f64) -> Judged {
        Judged { value, tol, bound: Bound::AtMost, holds: value <= tol }
    }

    pub fn at_least(value: f64, tol: f64) -> Judged {
        Judged { value, tol, bound: Bound::AtLeast, holds: value >= tol }
    }

    /// A verdict computed elsewhere, reported with its deciding statistic.
    pub fn decided(value: f64, tol: f64, bound: Bound, holds: bool) -> Judged {
        Judged { value, tol, bound, holds }
    }
}

/// Machine-readable outcome of one command.
///
/// `verdicts` describe the surface; `checks` are verifications whose failure
/// makes the run fail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub schema: String,
    pub command: String,
    pub subject: String,
    pub domain: Option<Rect>,
    pub grid: Option<Grid>,
    pub config: Config,
    pub verdicts: BTreeMap<String, Judged>,
    pub checks: BTreeMap<String, Judged>,
    pub counts: BTreeMap<String, usize>,
    pub points: BTreeMap<String, Vec<[f64; 2]>>,
    pub notes: BTreeMap<String, String>,
}

impl ReportDocument {
    pub fn new(command: &str, subject: &str, cfg: &Config) -> ReportDocument {
        ReportDocument {
            schema: SCHEMA.into(),
            command: command.into(),
            subject: subject.into(),
            domain: None,
            grid: None,
            config: cfg.clone(),
            verdicts: BTreeMap::new(),
            checks: BTreeMap::new(),
            counts: BTreeMap::new(),
            points: BTreeMap::new(),
            notes: BTreeMap::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.checks.values().all(|c| c.holds)
    }

    pub fn failed_checks(&self) -> Vec<&str> {
        self.checks.iter().filter(|(_, c)| !c.holds).map(|(k, _)| k.as_str()).collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    fn verdict(&mut self, key: &str, j: Judged) {
        self.verdicts.insert(key.into(), j);
    }

    fn check(&mut self, key: &str, j: Judged) {
        self.checks.insert(key.into(), j);
    }

    fn note(&mut self, key: &str, v: impl Into<String>) {
        self.notes.insert(key.into(), v.into());
    }
}

fn num(v: f64) -> String {
    format!("{v:e}")
}

fn csv(header: &[&str], rows: impl Iterator<Item = Vec<f64>>) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        let line: Vec<String> = r.into_iter().map(num).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// Wavefront OBJ of a grid surface: vertices with `u1` fastest, one quad per cell.
pub fn surface_obj(name: &str, grid: Grid, x: &[[f64; 3]]) -> String {
    assert_eq!(x.len(), grid.len(), "one vertex per grid node");
    let mut out = format!("# {name}\no {name}\n");
    for p in x {
        let _ = writeln!(out, "v {} {} {}", num(p[0]), num(p[1]), num(p[2]));
    }
    for j in 0..grid.ny.saturating_sub(1) {
        for i in 0..grid.nx.saturating_sub(1) {
            let a = j * grid.nx + i + 1;
            let _ = writeln!(out, "f {} {} {} {}", a, a + 1, a + 1 + grid.nx, a + grid.nx);
        }
    }
    out
}

/// `u1,u2,x,y,z,xi1,xi2,xi3` rows.
pub fn field_csv(u: &[[f64; 2]], x: &[[f64; 3]], xi: &[[f64; 3]]) -> String {
    let rows = u.iter().zip(x).zip(xi).map(|((u, x), xi)| vec![u[0], u[1], x[0], x[1], x[2], xi[0], xi[1], xi[2]]);
    csv(&["u1", "u2", "x", "y", "z", "xi1", "xi2", "xi3"], rows)
}

/// Named text artifacts produced alongside a report.
pub type Artifacts = BTreeMap<String, String>;

fn positions(f: &Frontal, pts: &[[f64; 2]]) -> Result<Vec<[f64; 3]>, FrameError> {
    pts.par_iter().map(|&u| Ok(f.jets(u, 0)?.x.value())).collect()
}

/// Frame data, singular cover and the wave-front and non-parabolic verdicts.
pub fn analyze(f: &Frontal, subject: &str, grid: Grid, cfg: &Config) -> Result<(ReportDocument, Artifacts), FrameError> {
    let mut rep = ReportDocument::new("analyze", subject, cfg);
    rep.domain = Some(f.domain);
    rep.grid = Some(grid);
    let pts = grid.points(&f.domain);
    let data = pts.par_iter().map(|&u| frame_data(f, u, cfg)).collect::<Result<Vec<_>, _>>()?;
    let xs = positions(f, &pts)?;
    let scan = singular_scan(f, grid, cfg)?;
    let singular: std::collections::BTreeSet<[usize; 2]> = scan.singular_nodes.iter().copied().collect();
    let full_cells = (0..grid.ny.saturating_sub(1))
        .flat_map(|j| (0..grid.nx.saturating_sub(1)).map(move |i| (i, j)))
        .filter(|&(i, j)| [[i, j], [i + 1, j], [i, j + 1], [i + 1, j + 1]].iter().all(|c| singular.contains(c)))
        .count();
    let xs_axis = grid.u1_values(&f.domain);
    let ys_axis = grid.u2_values(&f.domain);
    rep.points.insert("singular_nodes".into(), scan.singular_nodes.iter().map(|&[i, j]| [xs_axis[i], ys_axis[j]]).collect());
    rep.counts.insert("singular_nodes".into(), scan.singular_nodes.len());
    rep.counts.insert("singular_cells".into(), scan.cells.len());
    rep.verdict("regular_set_dense", Judged::at_most(full_cells as f64, 0.0));
    let wf = wavefront_test(f, grid, cfg)?;
    rep.verdict("wavefront", Judged::decided(wf.min_sigma2, cfg.eps_rank, Bound::AtLeast, wf.is_wavefront));
    rep.counts.insert("wavefront_witnesses".into(), wf.witnesses.len());
    let np = nonparabolic_test(f, grid, cfg)?;
    rep.verdict("non_parabolic", Judged::decided(np.min_abs_k_omega, cfg.eps_k, Bound::AtLeast, np.non_parabolic));
    let rows = data.iter().zip(&xs).map(|(d, x)| {
        vec![
            d.u[0],
            d.u[1],
            x[0],
            x[1],
            x[2],
            d.lambda_omega,
            d.k_omega,
            d.n[0],
            d.n[1],
            d.n[2],
            d.gauss.unwrap_or(f64::NAN),
        ]
    });
    let header = ["u1", "u2", "x", "y", "z", "lambda_omega", "k_omega", "n1", "n2", "n3", "gauss"];
    let mut art = Artifacts::new();
    art.insert("frame.csv".into(), csv(&header, rows));
    art.insert("surface.obj".into(), surface_obj(subject, grid, &xs));
    Ok((rep, art))
}

fn known_xi_error(known: &[crate::expr::Expr; 3], samples: &[([f64; 2], [f64; 3])]) -> Result<f64, EquiaffineError> {
    let mut worst = 0.0f64;
    for (u, xi) in samples {
        let k: Vec<f64> = known.iter().map(|e| e.eval(u[0], u[1], None)).collect::<Result<_, _>>()?;
        let scale = k.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        let err = (0..3).map(|i| (xi[i] - k[i]).abs()).fold(0.0, f64::max) / scale;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// The Blaschke field on a grid, its verification, and the improper-sphere verdict.
pub fn blaschke(
    f: &Frontal,
    entry: Option<&CatalogEntry>,
    subject: &str,
    grid: Grid,
    cfg: &Config,
) -> Result<(ReportDocument, Artifacts), EquiaffineError> {
    let mut rep = ReportDocument::new("blaschke", subject, cfg);
    rep.domain = Some(f.domain);
    rep.grid = Some(grid);
    let field = blaschke_field(f, grid, cfg)?;
    let v = field.verification;
    rep.check("max_tau", Judged::at_most(v.max_tau, v.tol));
    rep.check("volume_residual", Judged::at_most(v.max_volume_residual, v.tol));
    rep.check("volume_residual_classical", Judged::at_most(v.max_volume_residual_classical, v.tol));
    rep.check("limit_spread", Judged::at_most(field.max_spread, cfg.tol_limit));
    rep.counts.insert("regular_points".into(), v.regular_points);
    rep.counts.insert("singular_points".into(), field.samples.iter().filter(|s| s.singular).count());
    let n = field.samples.len() as f64;
    let mean = field.samples.iter().fold([0.0; 3], |m, s| [m[0] + s.xi[0] / n, m[1] + s.xi[1] / n, m[2] + s.xi[2] / n]);
    rep.verdict("improper_affine_sphere", Judged::at_most(field.max_deviation_from(mean), 1e-6));
    rep.note("mean_xi", format!("({}, {}, {})", num(mean[0]), num(mean[1]), num(mean[2])));
    if let Some(e) = entry {
        let regular: Vec<([f64; 2], [f64; 3])> =
            field.samples.iter().filter(|s| !s.singular).map(|s| (s.u, s.xi)).collect();
        if let Some(k) = &e.known.blaschke {
            rep.check("known_xi_relative_error", Judged::at_most(known_xi_error(k, &regular)?, 1e-6));
        }
        if let Some(k) = &e.known.blaschke_printed {
            rep.verdict("printed_xi_agrees", Judged::at_most(known_xi_error(k, &regular)?, 1e-6));
        }
    }
    let u: Vec<[f64; 2]> = field.samples.iter().map(|s| s.u).collect();
    let xs = positions(f, &u)?;
    let xi: Vec<[f64; 3]> = field.samples.iter().map(|s| s.xi).collect();
    let mut art = Artifacts::new();
    art.insert("surface.obj".into(), surface_obj(subject, grid, &xs));
    art.insert("field.csv".into(), field_csv(&u, &xs, &xi));
    Ok((rep, art))
}

/// Frame and position reconstruction, optionally compared with a reference surface.
pub fn reconstruct_run(
    sd: &StructureData,
    reference: Option<&Frontal>,
    subject: &str,
    grid: Grid,
    cfg: &Config,
) -> Result<(ReportDocument, Artifacts, Reconstruction), ReconstructError> {
    let mut rep = ReportDocument::new("reconstruct", subject, cfg);
    rep.domain = Some(sd.domain);
    let rec = reconstruct(sd, grid, cfg.rk4_step, cfg)?;
    let g = rec.frame.grid;
    rep.grid = Some(g);
    let c = rec.frame.compat;
    rep.check("compat_residual", Judged::at_most(c.regular, c.tol));
    rep.verdict("compat_residual_near_singular_set", Judged::at_most(c.singular, c.tol));
    rep.check("frame_path_discrepancy", Judged::at_most(rec.frame.discrepancy, cfg.tol_path));
    rep.check("position_path_discrepancy", Judged::at_most(rec.position.discrepancy, cfg.tol_path));
    let ir = rec.position.integrability;
    rep.check("lambda_h_symmetry", Judged::at_most(ir.sym, ir.tol));
    rep.check("row_identity", Judged::at_most(ir.row, ir.tol));
    rep.verdict("frame_invertible", Judged::decided(rec.frame.min_abs_det, 0.0, Bound::AtLeast, rec.frame.min_abs_det > 0.0));
    let pts = g.points(&sd.domain);
    let xs: Vec<[f64; 3]> = rec.position.x.iter().map(|v| [v[0], v[1], v[2]]).collect();
    if let Some(f) = reference {
        let truth = positions(f, &pts)?;
        let al = affine_align(&xs, &truth)?;
        rep.check("aligned_sup_error", Judged::at_most(al.sup_error, 1e-4));
    }
    let xi: Vec<[f64; 3]> = rec.frame.w.iter().map(|w| [w[(0, 2)], w[(1, 2)], w[(2, 2)]]).collect();
    let mut art = Artifacts::new();
    art.insert("surface.obj".into(), surface_obj(subject, g, &xs));
    art.insert("field.csv".into(), field_csv(&pts, &xs, &xi));
    Ok((rep, art, rec))
}

/// Integrability residuals of structure data without integrating.
pub fn integrability_summary(sd: &StructureData, grid: Grid, cfg: &Config) -> Result<ReportDocument, ReconstructError> {
    let mut rep = ReportDocument::new("integrability", "structure", cfg);
    let r = integrability_residual(sd, grid, cfg)?;
    rep.check("lambda_h_symmetry", Judged::at_most(r.sym, r.tol));
    rep.check("row_identity", Judged::at_most(r.row, r.tol));
    Ok(rep)
}

/// Unimodular maps used by the equivariance check.
pub fn fixed_unimodular_maps() -> [(Matrix3<f64>, Vector3<f64>); 2] {
    let unimodular = |m: Matrix3<f64>| m / m.determinant().cbrt();
    [
        (unimodular(Matrix3::new(1.0, 0.5, 0.0, 0.0, 1.0, 0.3, 0.2, 0.0, 1.0)), Vector3::new(1.0, -2.0, 0.5)),
        (unimodular(Matrix3::new(2.0, 0.0, 0.1, -0.3, 0.7, 0.0, 0.0, 0.4, 1.5)), Vector3::new(0.0, 0.25, -1.0)),
    ]
}

#[derive(Default)]
struct PointResiduals {
    h_formula: f64,
    tau_formula: f64,
    parallel_volume: f64,
    d_cross_path: f64,
    gamma_cross_path: f64,
    h_scaling: f64,
    min_det_h: f64,
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1.0 + b.abs())
}

fn point_residuals(
    f: &Frontal,
    field: &Arc<dyn TransversalField>,
    u: [f64; 2],
    cfg: &Config,
) -> Result<Option<PointResiduals>, EquiaffineError> {
    let st = structure_from_field(f, field.as_ref(), u, cfg)?;
    if !is_regular(st.lambda_omega, cfg) {
        return Ok(None);
    }
    let tf = check_tau_formula(f, field.as_ref(), u, cfg)?;
    let dg = d_from_gamma(f, field.as_ref(), u, cfg)?;
    let cs = classical_symbols(f, field.as_ref(), u, cfg)?;
    let mut d_cross_path = 0.0f64;
    let mut gamma_cross_path = 0.0f64;
    for (k, d) in [st.d1, st.d2].iter().enumerate() {
        for i in 0..2 {
            for j in 0..2 {
                d_cross_path = d_cross_path.max(rel(dg[k][i][j], d[i][j]));
                gamma_cross_path = gamma_cross_path.max(rel(cs.gamma[k][i][j], cs.gamma_direct[k][i][j]));
            }
        }
    }
    let scaled = ScaledField { inner: field.clone(), factor: 2.0 };
    let s2 = structure_from_field(f, &scaled, u, cfg)?;
    let mut h_scaling = 0.0f64;
    for i in 0..2 {
        for j in 0..2 {
            h_scaling = h_scaling.max((2.0 * s2.h[i][j] - st.h[i][j]).abs() / st.h[i][j].abs().max(1e-300).max(1.0));
        }
    }
    let k_omega = crate::frame::FrameJets::compute(f, u, 0, cfg)?.k_omega.value();
    let det_h = st.h[0][0] * st.h[1][1] - st.h[0][1] * st.h[1][0];
    Ok(Some(PointResiduals {
        h_formula: tf.h,
        tau_formula: tf.tau,
        parallel_volume: parallel_volume_residual(f, field.as_ref(), u, cfg)?,
        d_cross_path,
        gamma_cross_path,
        h_scaling,
        min_det_h: if k_omega.abs() > cfg.eps_k { det_h.abs() } else { f64::INFINITY },
    }))
}

/// The invariant suite on one frontal, with the Blaschke field when `K` does not
/// vanish and the unit normal otherwise.
pub fn check(f: &Frontal, subject: &str, grid: Grid, cfg: &Config) -> Result<ReportDocument, EquiaffineError> {
    let mut rep = ReportDocument::new("check", subject, cfg);
    rep.domain = Some(f.domain);
    rep.grid = Some(grid);
    let (field, blaschke): (Arc<dyn TransversalField>, _) = match blaschke_verify(f, &Blaschke, grid, cfg) {
        Ok(v) => (Arc::new(Blaschke), Some(v)),
        Err(EquiaffineError::KVanishes { .. }) => (Arc::new(NormalField(1.0)), None),
        Err(e) => return Err(e),
    };
    rep.note("field", field.label());
    if let Some(v) = blaschke {
        rep.check("blaschke_max_tau", Judged::at_most(v.max_tau, v.tol));
        rep.check("blaschke_volume_residual", Judged::at_most(v.max_volume_residual, v.tol));
        let pts = grid.points(&f.domain);
        let mut worst = 0.0f64;
        for (a, b) in fixed_unimodular_maps() {
            worst = worst.max(equivariance_residual(f, a, b, &pts, cfg)?);
        }
        rep.check("equivariance", Judged::at_most(worst, 1e-6));
    }
    let res = grid
        .points(&f.domain)
        .par_iter()
        .map(|&u| point_residuals(f, &field, u, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let res: Vec<PointResiduals> = res.into_iter().flatten().collect();
    let max = |g: fn(&PointResiduals) -> f64| res.iter().map(g).fold(0.0, f64::max);
    rep.counts.insert("regular_points".into(), res.len());
    rep.check("h_formula", Judged::at_most(max(|r| r.h_formula), 1e-9));
    rep.check("tau_formula", Judged::at_most(max(|r| r.tau_formula), 1e-9));
    rep.check("parallel_volume", Judged::at_most(max(|r| r.parallel_volume), 1e-8));
    rep.check("d_symbols_cross_path", Judged::at_most(max(|r| r.d_cross_path), 1e-8));
    rep.check("levi_civita_cross_path", Judged::at_most(max(|r| r.gamma_cross_path), 1e-8));
    rep.check("h_scaling", Judged::at_most(max(|r| r.h_scaling), 1e-12));
    let min_det_h = res.iter().map(|r| r.min_det_h).fold(f64::INFINITY, f64::min);
    if min_det_h.is_finite() {
        rep.check("det_h_nondegenerate", Judged::at_least(min_det_h, cfg.eps_k));
    }
    let c = conormal_verify(f, field.as_ref(), grid, cfg)?;
    rep.check("conormal_pairing", Judged::at_most(c.pairing, 1e-8));
    rep.check("conormal_tangency", Judged::at_most(c.tangency, 1e-8));
    rep.check("conormal_derivative_xi", Judged::at_most(c.derivative_xi, 1e-8));
    rep.check("conormal_derivative_w", Judged::at_most(c.derivative_w, 1e-8));
    if let Some(s) = c.min_sigma2 {
        rep.check("conormal_immersion", Judged::decided(s, cfg.eps_rank, Bound::AtLeast, c.immersion_where_nonparabolic));
    }
    Ok(rep)
}
