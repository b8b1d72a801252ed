//! Blaschke vector fields of frontals.
//!
//! On the regular part the field is `ξ = φ n + a w1 + b w2` with
//! `φ = |K|^{1/4}` and `(a, b)` solving `II_Ωᵀ (a, b)ᵀ = −∇φ`. Across the
//! singular set every quantity is continued by a [`LimitProbe`], which
//! certifies numerical agreement of directional limits; it never proves
//! smoothness.

use nalgebra::{Matrix3, Matrix3x2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::equiaffine::{
    is_regular, structure_jets, EquiaffineError, StructureJets, TransversalField,
};
use crate::expr::Expr;
use crate::frame::{unit_normal, FrameJets, Frontal, Grid, Rect};
use crate::jets::{jet_len, mat2_det, mat2_diff, mat2_value, Jet, JetError, JetMat2, JetVec3, MAX_ORDER};

/// Direction-wise extrapolation of `lim_{r→0} g(q + r d)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LimitProbe {
    pub directions: usize,
    pub r0: f64,
    pub levels: usize,
    pub tol: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Extendable,
    NotExtendable,
    Indeterminate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionStatus {
    Converged,
    /// Extrapolants disagree by more than the tolerance.
    NotCauchy,
    /// Samples grow geometrically as the radius shrinks.
    Divergent,
    /// The sampled map failed before enough radii were collected.
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionLimit {
    pub angle: f64,
    pub status: DirectionStatus,
    pub limit: Vec<f64>,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitReport {
    pub point: [f64; 2],
    pub verdict: Verdict,
    /// Direction average of the converged limits.
    pub value: Vec<f64>,
    /// Largest relative deviation of a directional limit from the average.
    pub spread: f64,
    pub directions: Vec<DirectionLimit>,
}

impl LimitProbe {
    pub fn from_config(cfg: &Config) -> LimitProbe {
        LimitProbe { directions: cfg.probe_directions, r0: cfg.probe_r0, levels: cfg.probe_levels, tol: cfg.tol_limit }
    }

    pub fn radii(&self) -> Vec<f64> {
        (0..self.levels).map(|k| self.r0 * 0.5f64.powi(k as i32)).collect()
    }

    /// Angles `π/n + 2πk/n`, kept off the coordinate axes and diagonals.
    pub fn angles(&self) -> Vec<f64> {
        let n = self.directions as f64;
        (0..self.directions).map(|k| std::f64::consts::PI * (1.0 + 2.0 * k as f64) / n).collect()
    }

    /// Probes `g` around `q`; the verdict only looks at the first `gate` entries.
    pub fn probe<G, E>(&self, q: [f64; 2], gate: usize, g: G) -> LimitReport
    where
        G: Fn([f64; 2]) -> Result<Vec<f64>, E> + Sync,
    {
        let radii = self.radii();
        let directions: Vec<DirectionLimit> = self
            .angles()
            .into_par_iter()
            .map(|angle| {
                let (s, c) = angle.sin_cos();
                let samples: Vec<Vec<f64>> = radii
                    .iter()
                    .map_while(|r| g([q[0] + r * c, q[1] + r * s]).ok().filter(|v| v.iter().all(|y| y.is_finite())))
                    .collect();
                if samples.len() < 4 {
                    DirectionLimit { angle, status: DirectionStatus::Failed, limit: Vec::new(), error: f64::NAN }
                } else {
                    self.extrapolate(angle, &radii[..samples.len()], &samples, gate)
                }
            })
            .collect();
        self.verdict(q, gate, directions)
    }

    fn extrapolate(&self, angle: f64, radii: &[f64], samples: &[Vec<f64>], gate: usize) -> DirectionLimit {
        let m = samples.len();
        let len = samples[0].len();
        let gate = gate.min(len);
        let gated_norm = |v: &[f64]| v[..gate].iter().fold(0.0f64, |a, b| a.max(b.abs()));
        let tail: Vec<f64> = samples[m - 4..].iter().map(|s| gated_norm(s)).collect();
        if tail[3] > 1.0 && tail.windows(2).all(|w| w[1] > 1.5 * w[0]) {
            return DirectionLimit { angle, status: DirectionStatus::Divergent, limit: samples[m - 1].clone(), error: f64::INFINITY };
        }
        let mut limit = vec![0.0; len];
        let mut error = 0.0f64;
        for i in 0..len {
            let ys: Vec<f64> = samples.iter().map(|s| s[i]).collect();
            let (best, err) = extrapolate_to_zero(radii, &ys);
            limit[i] = best;
            if i < gate {
                error = error.max(err / best.abs().max(1.0));
            }
        }
        let status = if error <= self.tol { DirectionStatus::Converged } else { DirectionStatus::NotCauchy };
        DirectionLimit { angle, status, limit, error }
    }

    fn verdict(&self, q: [f64; 2], gate: usize, directions: Vec<DirectionLimit>) -> LimitReport {
        let usable: Vec<&DirectionLimit> =
            directions.iter().filter(|d| d.status != DirectionStatus::Failed).collect();
        let report = |verdict, value, spread| LimitReport { point: q, verdict, value, spread, directions: directions.clone() };
        if usable.len() < 2 {
            return report(Verdict::Indeterminate, Vec::new(), f64::NAN);
        }
        if usable.iter().any(|d| d.status == DirectionStatus::Divergent) {
            return report(Verdict::NotExtendable, Vec::new(), f64::INFINITY);
        }
        let len = usable[0].limit.len();
        let mut mean = vec![0.0; len];
        for d in &usable {
            for (m, v) in mean.iter_mut().zip(&d.limit) {
                *m += v / usable.len() as f64;
            }
        }
        let gate = gate.min(len);
        let spread = usable
            .iter()
            .flat_map(|d| (0..gate).map(|i| (d.limit[i] - mean[i]).abs() / mean[i].abs().max(1.0)).collect::<Vec<_>>())
            .fold(0.0, f64::max);
        if spread > self.tol {
            return report(Verdict::NotExtendable, mean, spread);
        }
        if usable.iter().any(|d| d.status == DirectionStatus::NotCauchy) {
            return report(Verdict::Indeterminate, mean, spread);
        }
        report(Verdict::Extendable, mean, spread)
    }
}

/// Adaptive polynomial extrapolation to `r = 0`.
///
/// Walks the Neville tableau from the largest radius down and keeps the entry
/// whose neighbours agree best; stops once rounding noise at small radii
/// makes the diagonal worse. Leading radii are dropped when the sequence only
/// settles further in. Returns the estimate and its error.
fn extrapolate_to_zero(r: &[f64], y: &[f64]) -> (f64, f64) {
    (0..r.len().saturating_sub(3))
        .map(|s| neville_best(&r[s..], &y[s..]))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap_or((y[y.len() - 1], f64::INFINITY))
}

fn neville_best(r: &[f64], y: &[f64]) -> (f64, f64) {
    let n = r.len();
    let mut t = vec![vec![0.0; n]; n];
    let mut best = (y[0], f64::INFINITY);
    for i in 0..n {
        t[i][0] = y[i];
        for j in 1..=i {
            t[i][j] = (r[i] * t[i - 1][j - 1] - r[i - j] * t[i][j - 1]) / (r[i] - r[i - j]);
            let err = (t[i][j] - t[i][j - 1]).abs().max((t[i][j] - t[i - 1][j - 1]).abs());
            if err <= best.1 {
                best = (t[i][j], err);
            }
        }
        if i > 1 && (t[i][i] - t[i - 1][i - 1]).abs() >= 2.0 * best.1 {
            break;
        }
    }
    best
}

/// Gaussian curvature at a point, continued across the singular set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussExtension {
    pub k: f64,
    pub singular: bool,
    pub report: Option<LimitReport>,
}

fn gauss_regular(f: &Frontal, u: [f64; 2], cfg: &Config) -> Result<f64, EquiaffineError> {
    let fj = FrameJets::compute(f, u, 0, cfg)?;
    let lam = fj.lambda_det.value();
    if !is_regular(lam, cfg) {
        return Err(EquiaffineError::Frame(crate::frame::FrameError::SingularPoint { point: u }));
    }
    Ok(fj.k_omega.value() / lam)
}

/// `K = K_Ω / λ_Ω` at regular points; a probed limit on the singular set.
pub fn gauss_extension(f: &Frontal, u: [f64; 2], cfg: &Config) -> Result<GaussExtension, EquiaffineError> {
    let fj = FrameJets::compute(f, u, 0, cfg)?;
    let lam = fj.lambda_det.value();
    if is_regular(lam, cfg) {
        return Ok(GaussExtension { k: fj.k_omega.value() / lam, singular: false, report: None });
    }
    let report = LimitProbe::from_config(cfg).probe(u, 1, |p| gauss_regular(f, p, cfg).map(|k| vec![k]));
    match report.verdict {
        Verdict::Extendable => Ok(GaussExtension { k: report.value[0], singular: true, report: Some(report) }),
        Verdict::NotExtendable => Err(EquiaffineError::NotExtendable { point: u, spread: report.spread }),
        Verdict::Indeterminate => Err(EquiaffineError::Indeterminate { point: u }),
    }
}

/// Highest ξ jet order available with [`MAX_ORDER`] jets of the basis.
pub const BLASCHKE_MAX_ORDER: usize = MAX_ORDER - 2;

/// Jets of ξ together with the scalars that built it.
#[derive(Debug, Clone, Copy)]
pub struct BlaschkeJets {
    pub xi: JetVec3,
    pub k: f64,
    pub phi: f64,
    pub a: f64,
    pub b: f64,
    pub singular: bool,
    pub spread: Option<f64>,
}

fn blaschke_regular(f: &Frontal, u: [f64; 2], order: usize, cfg: &Config) -> Result<BlaschkeJets, EquiaffineError> {
    if order > BLASCHKE_MAX_ORDER {
        return Err(JetError::InsufficientOrder { needed: order + 2, carried: MAX_ORDER }.into());
    }
    let fj = FrameJets::compute(f, u, order + 1, cfg)?;
    if !is_regular(fj.lambda_det.value(), cfg) {
        return Err(EquiaffineError::Frame(crate::frame::FrameError::SingularPoint { point: u }));
    }
    let k = fj.k_omega.try_div(&fj.lambda_det)?;
    if !(k.value().abs() > cfg.eps_k) {
        return Err(EquiaffineError::KVanishes { point: u, k: k.value() });
    }
    let phi = k.try_abs()?.try_powf(0.25)?;
    let grad = [-phi.diff(0)?, -phi.diff(1)?];
    let p = fj.ii_omega;
    let det = mat2_det(&p);
    let scale = mat2_value(&p).iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(det.value().abs() > 1e-14 * scale * scale) {
        return Err(EquiaffineError::SingularIIOmega { point: u });
    }
    let inv_det = det.try_recip()?;
    // Solve [[p11, p21], [p12, p22]] (a, b) = grad.
    let a = (p[1][1] * grad[0] - p[1][0] * grad[1]) * inv_det;
    let b = (p[0][0] * grad[1] - p[0][1] * grad[0]) * inv_det;
    let xi = fj.n.scale(phi) + fj.w1.scale(a) + fj.w2.scale(b);
    let xi = xi.truncate(order);
    Ok(BlaschkeJets { xi, k: k.value(), phi: phi.value(), a: a.value(), b: b.value(), singular: false, spread: None })
}

fn flatten(j: &BlaschkeJets, order: usize) -> Vec<f64> {
    let mut v = vec![j.xi.0[0].value(), j.xi.0[1].value(), j.xi.0[2].value(), j.k, j.phi, j.a, j.b];
    for c in &j.xi.0 {
        v.extend_from_slice(&c.coeffs()[..jet_len(order)]);
    }
    v
}

/// Jets of the Blaschke field at `u` up to `order` (at most [`BLASCHKE_MAX_ORDER`]).
pub fn blaschke_jets(f: &Frontal, u: [f64; 2], order: usize, cfg: &Config) -> Result<BlaschkeJets, EquiaffineError> {
    let lam = f.jets(u, 0)?.lambda;
    if is_regular(mat2_det(&lam).value(), cfg) {
        return blaschke_regular(f, u, order, cfg);
    }
    let report = LimitProbe::from_config(cfg)
        .probe(u, 4, |p| blaschke_regular(f, p, order, cfg).map(|j| flatten(&j, order)));
    match report.verdict {
        Verdict::Extendable => {}
        Verdict::Indeterminate => return Err(EquiaffineError::Indeterminate { point: u }),
        Verdict::NotExtendable => {
            return Err(EquiaffineError::NotExtendable { point: u, spread: report.spread });
        }
    }
    let v = &report.value;
    if !(v[3].abs() > cfg.eps_k) {
        return Err(EquiaffineError::KVanishes { point: u, k: v[3] });
    }
    let n = jet_len(order);
    let comp = |i: usize| Jet::from_coeffs(order, &v[7 + i * n..7 + (i + 1) * n]);
    Ok(BlaschkeJets {
        xi: JetVec3([comp(0), comp(1), comp(2)]),
        k: v[3],
        phi: v[4],
        a: v[5],
        b: v[6],
        singular: true,
        spread: Some(report.spread),
    })
}

/// The Blaschke field as a [`TransversalField`].
#[derive(Debug, Clone, Copy, Default)]
pub struct Blaschke;

impl TransversalField for Blaschke {
    fn xi(&self, f: &Frontal, u: [f64; 2], order: usize, cfg: &Config) -> Result<JetVec3, EquiaffineError> {
        Ok(blaschke_jets(f, u, order, cfg)?.xi)
    }

    fn label(&self) -> String {
        "blaschke".into()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlaschkeSample {
    pub u: [f64; 2],
    pub xi: [f64; 3],
    pub k: f64,
    pub phi: f64,
    pub a: f64,
    pub b: f64,
    pub singular: bool,
    pub spread: Option<f64>,
}

/// A Blaschke field sampled on a grid, with its diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlaschkeField {
    pub domain: Rect,
    pub grid: Grid,
    /// Row-major, `u1` fastest.
    pub samples: Vec<BlaschkeSample>,
    pub max_spread: f64,
    pub verification: BlaschkeReport,
}

impl BlaschkeField {
    /// Largest componentwise distance to a constant vector.
    pub fn max_deviation_from(&self, c: [f64; 3]) -> f64 {
        self.samples
            .iter()
            .flat_map(|s| (0..3).map(move |i| (s.xi[i] - c[i]).abs()))
            .fold(0.0, f64::max)
    }

    /// Constant field within `tol`, compared against the grid average.
    pub fn is_constant(&self, tol: f64) -> bool {
        let n = self.samples.len() as f64;
        let mut mean = [0.0; 3];
        for s in &self.samples {
            for i in 0..3 {
                mean[i] += s.xi[i] / n;
            }
        }
        self.max_deviation_from(mean) <= tol
    }
}

/// Samples the field on `grid` over the domain of `f` and verifies it on the regular nodes.
pub fn blaschke_field(f: &Frontal, grid: Grid, cfg: &Config) -> Result<BlaschkeField, EquiaffineError> {
    let samples = grid
        .points(&f.domain)
        .par_iter()
        .map(|&u| {
            let j = blaschke_jets(f, u, 0, cfg)?;
            Ok(BlaschkeSample {
                u,
                xi: j.xi.value(),
                k: j.k,
                phi: j.phi,
                a: j.a,
                b: j.b,
                singular: j.singular,
                spread: j.spread,
            })
        })
        .collect::<Result<Vec<_>, EquiaffineError>>()?;
    let signs: Vec<f64> = samples.iter().map(|s| s.k.signum()).collect();
    if signs.windows(2).any(|w| w[0] != w[1]) {
        let s = samples.iter().min_by(|a, b| a.k.abs().total_cmp(&b.k.abs())).expect("non-empty grid");
        return Err(EquiaffineError::KVanishes { point: s.u, k: s.k });
    }
    let max_spread = samples.iter().filter_map(|s| s.spread).fold(0.0, f64::max);
    let verification = blaschke_verify(f, &Blaschke, grid, cfg)?;
    Ok(BlaschkeField { domain: f.domain, grid, samples, max_spread, verification })
}

/// Equiaffinity and volume normalisation of a candidate field on the regular nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlaschkeReport {
    pub max_tau: f64,
    /// `max |θ(w1, w2) |⟨ξ, n⟩| / sqrt(|K| det I_Ω) − 1|`.
    pub max_volume_residual: f64,
    /// The same ratio in the basis `(x_{u1}, x_{u2})`.
    pub max_volume_residual_classical: f64,
    pub tol: f64,
    pub equiaffine: bool,
    pub volume_match: bool,
    pub regular_points: usize,
}

#[derive(Debug, Clone, Copy)]
struct PointCheck {
    tau: f64,
    volume: f64,
    volume_classical: f64,
}

fn verify_point(
    f: &Frontal,
    field: &dyn TransversalField,
    u: [f64; 2],
    cfg: &Config,
) -> Result<Option<PointCheck>, EquiaffineError> {
    let st = structure_jets(f, field, u, 0, cfg)?;
    let lam = mat2_det(&st.lambda).value();
    if !is_regular(lam, cfg) {
        return Ok(None);
    }
    let w = [Vector3::from(st.w[0].value()), Vector3::from(st.w[1].value())];
    let det_i = w[0].norm_squared() * w[1].norm_squared() - w[0].dot(&w[1]).powi(2);
    let k = gauss_regular(f, u, cfg)?;
    let theta = st.theta.value().abs();
    let phi = Vector3::from(st.xi.value()).dot(&Vector3::from(st.n.value())).abs();
    let volume = (theta * phi / (k.abs() * det_i).sqrt() - 1.0).abs();
    let det_h = mat2_det(&st.h).value().abs();
    let volume_classical = (lam.abs().sqrt() * theta / det_h.sqrt() - 1.0).abs();
    let tau = st.tau[0].value().abs().max(st.tau[1].value().abs());
    Ok(Some(PointCheck { tau, volume, volume_classical }))
}

/// Checks `τ = 0` and the volume condition `θ = ω_c` at the regular grid nodes.
pub fn blaschke_verify(
    f: &Frontal,
    field: &dyn TransversalField,
    grid: Grid,
    cfg: &Config,
) -> Result<BlaschkeReport, EquiaffineError> {
    let checks = grid
        .points(&f.domain)
        .par_iter()
        .map(|&u| verify_point(f, field, u, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let checks: Vec<PointCheck> = checks.into_iter().flatten().collect();
    let max = |g: fn(&PointCheck) -> f64| checks.iter().map(g).fold(0.0, f64::max);
    let (max_tau, vol, vol_c) = (max(|c| c.tau), max(|c| c.volume), max(|c| c.volume_classical));
    let tol = 1e-6;
    Ok(BlaschkeReport {
        max_tau,
        max_volume_residual: vol,
        max_volume_residual_classical: vol_c,
        tol,
        equiaffine: max_tau <= tol,
        volume_match: vol <= tol && vol_c <= tol,
        regular_points: checks.len(),
    })
}

/// Jets of `Λ`, `I_Ω` and the first fundamental form `I`.
#[derive(Debug, Clone, Copy)]
pub struct MetricJets {
    pub lambda: JetMat2,
    pub i_omega: JetMat2,
    pub i: JetMat2,
}

/// Metric data sufficient for the extension conditions of the connection.
pub trait MetricSource: Send + Sync {
    fn metric(&self, u: [f64; 2], order: usize) -> Result<MetricJets, EquiaffineError>;
}

impl MetricSource for Frontal {
    fn metric(&self, u: [f64; 2], order: usize) -> Result<MetricJets, EquiaffineError> {
        let j = self.jets(u, order + 1)?;
        let (w1, w2) = (j.w1.truncate(order), j.w2.truncate(order));
        let dx = [j.x.diff(0)?, j.x.diff(1)?];
        Ok(MetricJets {
            lambda: [[j.lambda[0][0].truncate(order), j.lambda[0][1].truncate(order)], [
                j.lambda[1][0].truncate(order),
                j.lambda[1][1].truncate(order),
            ]],
            i_omega: [[w1.dot(&w1), w1.dot(&w2)], [w2.dot(&w1), w2.dot(&w2)]],
            i: [[dx[0].dot(&dx[0]), dx[0].dot(&dx[1])], [dx[1].dot(&dx[0]), dx[1].dot(&dx[1])]],
        })
    }
}

/// Metric data given by expressions, each 2×2 row-major.
#[derive(Debug, Clone)]
pub struct ExprMetric {
    pub lambda: [Expr; 4],
    pub i_omega: [Expr; 4],
    pub i: [Expr; 4],
}

impl MetricSource for ExprMetric {
    fn metric(&self, u: [f64; 2], order: usize) -> Result<MetricJets, EquiaffineError> {
        Ok(MetricJets {
            lambda: crate::frame::eval4(&self.lambda, u, order)?,
            i_omega: crate::frame::eval4(&self.i_omega, u, order)?,
            i: crate::frame::eval4(&self.i, u, order)?,
        })
    }
}

/// `G_k`: the membership expression whose quotient by `λ_Ω` must extend smoothly.
///
/// For `k = 1` this is `Λ_(1)u1 I_Ω Λ_(2)ᵀ − Λ_(1) I_Ω Λ_(2)u1ᵀ + E_u2 − F_u1`;
/// `k = 2` differentiates in `u2` and ends with `F_u2 − G_u1`.
pub fn g_expression(src: &dyn MetricSource, which: usize, u: [f64; 2]) -> Result<(f64, f64), EquiaffineError> {
    let m = src.metric(u, 1)?;
    let k = which - 1;
    let l = mat2_value(&m.lambda);
    let dl = mat2_value(&mat2_diff(&m.lambda, k)?);
    let io = mat2_value(&m.i_omega);
    let bil = |a: [f64; 2], b: [f64; 2]| {
        (0..2).map(|i| (0..2).map(|j| a[i] * io[i][j] * b[j]).sum::<f64>()).sum::<f64>()
    };
    let metric_term = match which {
        1 => m.i[0][0].d(1) - m.i[0][1].d(0),
        _ => m.i[0][1].d(1) - m.i[1][1].d(0),
    };
    let g = bil(dl[0], l[1]) - bil(l[0], dl[1]) + metric_term;
    Ok((g, l[0][0] * l[1][1] - l[0][1] * l[1][0]))
}

/// `ω_k = G_k / λ_Ω`, evaluated directly at regular points.
pub fn omega_regular(src: &dyn MetricSource, which: usize, u: [f64; 2], cfg: &Config) -> Result<f64, EquiaffineError> {
    let (g, lam) = g_expression(src, which, u)?;
    if !is_regular(lam, cfg) {
        return Err(EquiaffineError::Frame(crate::frame::FrameError::SingularPoint { point: u }));
    }
    Ok(g / lam)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtensionVerdict {
    pub which: usize,
    pub point: [f64; 2],
    pub verdict: Verdict,
    /// The value of `ω_k` at the point when it extends.
    pub omega: Option<f64>,
    pub report: Option<LimitReport>,
}

/// Decides whether `G_k / λ_Ω` extends across the singular set at `u`.
pub fn extension_condition(
    src: &dyn MetricSource,
    which: usize,
    u: [f64; 2],
    cfg: &Config,
) -> Result<ExtensionVerdict, EquiaffineError> {
    assert!(which == 1 || which == 2, "extension condition index must be 1 or 2");
    let (g, lam) = g_expression(src, which, u)?;
    if is_regular(lam, cfg) {
        return Ok(ExtensionVerdict { which, point: u, verdict: Verdict::Extendable, omega: Some(g / lam), report: None });
    }
    let report = LimitProbe::from_config(cfg).probe(u, 1, |p| omega_regular(src, which, p, cfg).map(|w| vec![w]));
    match report.verdict {
        Verdict::Indeterminate => Err(EquiaffineError::Indeterminate { point: u }),
        v => Ok(ExtensionVerdict {
            which,
            point: u,
            verdict: v,
            omega: (v == Verdict::Extendable).then(|| report.value[0]),
            report: Some(report),
        }),
    }
}

/// The printed regular-part Blaschke field of the rank-one wave-front family
/// built from `h` with `h_u1u1 + c h_u2u2 = 0`.
pub fn rank1_closed_form(h: &Expr, c: &Expr, u: [f64; 2]) -> Result<[f64; 3], EquiaffineError> {
    let hj = h.eval_jet(u, 2)?;
    let cj = c.eval_jet(u, 1)?;
    let (h1, h11, h12) = (hj.coeff(1, 0), hj.coeff(2, 0), hj.coeff(1, 1));
    let (cv, c1, c2) = (cj.value(), cj.d(0), cj.d(1));
    if h11 == 0.0 {
        return Err(JetError::DivisionByZeroValue.into());
    }
    if !(cv > 0.0) {
        return Err(JetError::Domain("c^(3/4)").into());
    }
    let den = cv.powf(0.75) * h11;
    let u2 = u[1];
    Ok([
        -0.25 * c1 / den,
        -0.25 * (c2 * h11 - c1 * h12) / den,
        0.25 * (-u2 * c2 * h11 + u2 * c1 * h12 + 4.0 * cv * h11 - c1 * h1) / den,
    ])
}

/// `ν = n / ⟨n, ξ⟩`, carrying the jet order requested for `ξ`.
pub fn conormal(
    f: &Frontal,
    field: &dyn TransversalField,
    u: [f64; 2],
    order: usize,
    cfg: &Config,
) -> Result<JetVec3, EquiaffineError> {
    let j = f.jets(u, order)?;
    let n = unit_normal(&j.w1, &j.w2, u, cfg)?;
    let xi = field.xi(f, u, order, cfg)?;
    let d = n.dot(&xi);
    if d.value() == 0.0 {
        return Err(EquiaffineError::NotTransversal { point: u, theta: 0.0 });
    }
    Ok(n.scale(d.recip()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConormalReport {
    /// `max |⟨ν, ξ⟩ − 1|`.
    pub pairing: f64,
    /// `max |⟨ν, w_i⟩|`.
    pub tangency: f64,
    /// `max |⟨ν_{u_i}, ξ⟩|`.
    pub derivative_xi: f64,
    /// `max |⟨ν_{u_i}, w_j⟩ + h_ji|`.
    pub derivative_w: f64,
    /// Smallest second singular value of `Dν` over non-parabolic nodes.
    pub min_sigma2: Option<f64>,
    /// Smallest second singular value of `Dν` over all checked nodes.
    pub min_sigma2_all: f64,
    pub nonparabolic_nodes: usize,
    pub regular_points: usize,
    pub immersion_where_nonparabolic: bool,
}

struct ConormalPoint {
    pairing: f64,
    tangency: f64,
    derivative_xi: f64,
    derivative_w: f64,
    sigma2: f64,
    nonparabolic: bool,
}

fn conormal_point(
    f: &Frontal,
    field: &dyn TransversalField,
    u: [f64; 2],
    cfg: &Config,
) -> Result<Option<ConormalPoint>, EquiaffineError> {
    let st: StructureJets = structure_jets(f, field, u, 0, cfg)?;
    if !is_regular(mat2_det(&st.lambda).value(), cfg) {
        return Ok(None);
    }
    let nu = conormal(f, field, u, 1, cfg)?;
    let xi = Vector3::from(st.xi.value());
    let w = [Vector3::from(st.w[0].value()), Vector3::from(st.w[1].value())];
    let nv = Vector3::from(nu.value());
    let dnu = [Vector3::from(nu.diff(0)?.value()), Vector3::from(nu.diff(1)?.value())];
    let h = mat2_value(&st.h);
    let mut derivative_w = 0.0f64;
    for i in 0..2 {
        for j in 0..2 {
            derivative_w = derivative_w.max((dnu[i].dot(&w[j]) + h[j][i]).abs());
        }
    }
    let sigma2 = Matrix3x2::from_columns(&dnu).singular_values().min();
    let k_omega = FrameJets::compute(f, u, 0, cfg)?.k_omega.value();
    Ok(Some(ConormalPoint {
        pairing: (nv.dot(&xi) - 1.0).abs(),
        tangency: nv.dot(&w[0]).abs().max(nv.dot(&w[1]).abs()),
        derivative_xi: dnu[0].dot(&xi).abs().max(dnu[1].dot(&xi).abs()),
        derivative_w,
        sigma2,
        nonparabolic: k_omega.abs() > cfg.eps_k,
    }))
}

/// Conormal identities and the rank of `Dν` at the regular grid nodes.
pub fn conormal_verify(
    f: &Frontal,
    field: &dyn TransversalField,
    grid: Grid,
    cfg: &Config,
) -> Result<ConormalReport, EquiaffineError> {
    let pts = grid
        .points(&f.domain)
        .par_iter()
        .map(|&u| conormal_point(f, field, u, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let pts: Vec<ConormalPoint> = pts.into_iter().flatten().collect();
    let max = |g: fn(&ConormalPoint) -> f64| pts.iter().map(g).fold(0.0, f64::max);
    let np: Vec<f64> = pts.iter().filter(|p| p.nonparabolic).map(|p| p.sigma2).collect();
    let min_sigma2 = np.iter().copied().reduce(f64::min);
    Ok(ConormalReport {
        pairing: max(|p| p.pairing),
        tangency: max(|p| p.tangency),
        derivative_xi: max(|p| p.derivative_xi),
        derivative_w: max(|p| p.derivative_w),
        min_sigma2,
        min_sigma2_all: pts.iter().map(|p| p.sigma2).fold(f64::INFINITY, f64::min),
        nonparabolic_nodes: np.len(),
        regular_points: pts.len(),
        immersion_where_nonparabolic: min_sigma2.is_none_or(|s| s > cfg.eps_rank),
    })
}

/// Largest `|ξ_y(u) − A ξ_x(u)|` over `points`, where `y = A x + b` and `det A = 1`.
pub fn equivariance_residual(
    f: &Frontal,
    a: Matrix3<f64>,
    b: Vector3<f64>,
    points: &[[f64; 2]],
    cfg: &Config,
) -> Result<f64, EquiaffineError> {
    let g = f.affine_image(a, b);
    let r = points
        .par_iter()
        .map(|&u| {
            let xi = Vector3::from(blaschke_jets(f, u, 0, cfg)?.xi.value());
            let yi = Vector3::from(blaschke_jets(&g, u, 0, cfg)?.xi.value());
            Ok((yi - a * xi).amax())
        })
        .collect::<Result<Vec<f64>, EquiaffineError>>()?;
    Ok(r.into_iter().fold(0.0, f64::max))
}
