//! Equiaffine structure `(h, D, S, τ)` induced by a transversal field.
//!
//! Every symbol is obtained by decomposing derivatives in the basis
//! `(w1, w2, ξ)`:
//!
//! ```text
//! (w_i)_{u_j} = D¹_{ij} w1 + D²_{ij} w2 + h_{ij} ξ
//! ξ_{u_j}     = −S¹_j w1 − S²_j w2 + τ_j ξ
//! ```

use std::sync::Arc;

use nalgebra::{Matrix2, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::Config;
use crate::expr::{Expr, ExprError};
use crate::frame::{from_na, norm3, to_na, unit_normal, FrameError, FrameJets, Frontal, Grid};
use crate::jets::{mat2_value, Jet, JetError, JetMat2, JetVec3};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EquiaffineError {
    #[error("field is not transversal at ({}, {}): det(w1 w2 ξ) = {theta:e}", point[0], point[1])]
    NotTransversal { point: [f64; 2], theta: f64 },
    #[error("Gaussian curvature vanishes at ({}, {}): K = {k:e}", point[0], point[1])]
    KVanishes { point: [f64; 2], k: f64 },
    #[error("no smooth extension at ({}, {}): directional limits spread {spread:e}", point[0], point[1])]
    NotExtendable { point: [f64; 2], spread: f64 },
    #[error("limit at ({}, {}) is indeterminate: directional sequences do not settle", point[0], point[1])]
    Indeterminate { point: [f64; 2] },
    #[error("II_Ω block is singular at the regular point ({}, {})", point[0], point[1])]
    SingularIIOmega { point: [f64; 2] },
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Jet(#[from] JetError),
}

impl EquiaffineError {
    fn singular(point: [f64; 2]) -> Self {
        EquiaffineError::Frame(FrameError::SingularPoint { point })
    }
}

/// `|λ_Ω|` large enough for formulas that invert Λ.
pub fn is_regular(lambda_det: f64, cfg: &Config) -> bool {
    lambda_det.abs() > cfg.eps_probe
}

/// A vector field along a frontal, evaluated as jets.
pub trait TransversalField: Send + Sync {
    fn xi(&self, f: &Frontal, u: [f64; 2], order: usize, cfg: &Config) -> Result<JetVec3, EquiaffineError>;

    fn label(&self) -> String;
}

/// A constant vector.
#[derive(Debug, Clone, Copy)]
pub struct ConstantField(pub [f64; 3]);

impl TransversalField for ConstantField {
    fn xi(&self, _: &Frontal, _: [f64; 2], order: usize, _: &Config) -> Result<JetVec3, EquiaffineError> {
        Ok(JetVec3::constant(self.0, order))
    }

    fn label(&self) -> String {
        format!("constant {:?}", self.0)
    }
}

/// Componentwise expressions in `u1`, `u2`.
#[derive(Debug, Clone)]
pub struct ExprField(pub [Expr; 3]);

impl TransversalField for ExprField {
    fn xi(&self, _: &Frontal, u: [f64; 2], order: usize, _: &Config) -> Result<JetVec3, EquiaffineError> {
        let c = |i: usize| self.0[i].eval_jet(u, order);
        Ok(JetVec3([c(0)?, c(1)?, c(2)?]))
    }

    fn label(&self) -> String {
        format!("({}, {}, {})", self.0[0], self.0[1], self.0[2])
    }
}

/// A constant multiple of the unit normal.
#[derive(Debug, Clone, Copy)]
pub struct NormalField(pub f64);

impl TransversalField for NormalField {
    fn xi(&self, f: &Frontal, u: [f64; 2], order: usize, cfg: &Config) -> Result<JetVec3, EquiaffineError> {
        let j = f.jets(u, order)?;
        Ok(unit_normal(&j.w1, &j.w2, u, cfg)? * self.0)
    }

    fn label(&self) -> String {
        format!("{} n", self.0)
    }
}

/// `ξ = φ n + ã w1 + b̃ w2`.
#[derive(Debug, Clone)]
pub struct SplitField {
    pub phi: Expr,
    pub a: Expr,
    pub b: Expr,
}

impl TransversalField for SplitField {
    fn xi(&self, f: &Frontal, u: [f64; 2], order: usize, cfg: &Config) -> Result<JetVec3, EquiaffineError> {
        let j = f.jets(u, order)?;
        let n = unit_normal(&j.w1, &j.w2, u, cfg)?;
        let (phi, a, b) = (self.phi.eval_jet(u, order)?, self.a.eval_jet(u, order)?, self.b.eval_jet(u, order)?);
        Ok(n.scale(phi) + j.w1.scale(a) + j.w2.scale(b))
    }

    fn label(&self) -> String {
        format!("{} n + {} w1 + {} w2", self.phi, self.a, self.b)
    }
}

/// A constant multiple of another field.
#[derive(Clone)]
pub struct ScaledField {
    pub inner: Arc<dyn TransversalField>,
    pub factor: f64,
}

impl TransversalField for ScaledField {
    fn xi(&self, f: &Frontal, u: [f64; 2], order: usize, cfg: &Config) -> Result<JetVec3, EquiaffineError> {
        Ok(self.inner.xi(f, u, order, cfg)? * self.factor)
    }

    fn label(&self) -> String {
        format!("{} · [{}]", self.factor, self.inner.label())
    }
}

/// Structure symbols as jets of the requested order.
#[derive(Debug, Clone, Copy)]
pub struct StructureJets {
    pub u: [f64; 2],
    pub x: JetVec3,
    pub w: [JetVec3; 2],
    pub xi: JetVec3,
    pub n: JetVec3,
    pub lambda: JetMat2,
    /// `θ = det(w1 w2 ξ)`.
    pub theta: Jet,
    pub h: JetMat2,
    /// `d[j][i][k] = D^{k+1}_{i, j+1}`: coefficients of `(w_i)_{u_j}`.
    pub d: [JetMat2; 2],
    /// `s[j][k] = S^{k+1}_{j+1}`.
    pub s: JetMat2,
    pub tau: [Jet; 2],
}

/// Plain-number structure symbols plus decomposition residuals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquiaffineStructure {
    pub u: [f64; 2],
    pub h: [[f64; 2]; 2],
    pub d1: [[f64; 2]; 2],
    pub d2: [[f64; 2]; 2],
    pub s: [[f64; 2]; 2],
    pub tau: [f64; 2],
    pub theta: f64,
    pub lambda_omega: f64,
    /// Largest `|(w_i)_{u_j} − (D¹ w1 + D² w2 + h ξ)|`.
    pub residual_w: f64,
    /// Largest `|ξ_{u_j} + S¹ w1 + S² w2 − τ ξ|`.
    pub residual_xi: f64,
}

fn decompose(v: &JetVec3, w1: &JetVec3, w2: &JetVec3, xi: &JetVec3, inv_theta: &Jet) -> [Jet; 3] {
    [
        JetVec3::triple(v, w2, xi) * *inv_theta,
        JetVec3::triple(w1, v, xi) * *inv_theta,
        JetVec3::triple(w1, w2, v) * *inv_theta,
    ]
}

/// Solves the six 3×3 systems with matrix `(w1 w2 ξ)` at `u`.
pub fn structure_jets(
    f: &Frontal,
    field: &dyn TransversalField,
    u: [f64; 2],
    order: usize,
    cfg: &Config,
) -> Result<StructureJets, EquiaffineError> {
    let fj = f.jets(u, order + 1)?;
    let xi_full = field.xi(f, u, order + 1, cfg)?;
    if xi_full.order() < order + 1 {
        return Err(JetError::InsufficientOrder { needed: order + 1, carried: xi_full.order() }.into());
    }
    let n = unit_normal(&fj.w1, &fj.w2, u, cfg)?;
    let (w1, w2, xi) = (fj.w1.truncate(order), fj.w2.truncate(order), xi_full.truncate(order));
    let theta = JetVec3::triple(&w1, &w2, &xi);
    let scale = norm3(w1.value()) * norm3(w2.value()) * norm3(xi.value());
    if !(theta.value().abs() > cfg.eps_rank * scale) {
        return Err(EquiaffineError::NotTransversal { point: u, theta: theta.value() });
    }
    let inv = theta.try_recip()?;
    let zero = Jet::constant(0.0, order);
    let mut h = [[zero; 2]; 2];
    let mut d = [[[zero; 2]; 2]; 2];
    let mut s = [[zero; 2]; 2];
    let mut tau = [zero; 2];
    let ws = [fj.w1, fj.w2];
    for j in 0..2 {
        for i in 0..2 {
            let c = decompose(&ws[i].diff(j)?, &w1, &w2, &xi, &inv);
            d[j][i] = [c[0], c[1]];
            h[i][j] = c[2];
        }
        let c = decompose(&xi_full.diff(j)?, &w1, &w2, &xi, &inv);
        s[j] = [-c[0], -c[1]];
        tau[j] = c[2];
    }
    Ok(StructureJets {
        u,
        x: fj.x,
        w: [fj.w1, fj.w2],
        xi: xi_full,
        n,
        lambda: fj.lambda,
        theta,
        h,
        d,
        s,
        tau,
    })
}

impl StructureJets {
    pub fn values(&self) -> Result<EquiaffineStructure, EquiaffineError> {
        let w = [Vector3::from(self.w[0].value()), Vector3::from(self.w[1].value())];
        let xi = Vector3::from(self.xi.value());
        let h = mat2_value(&self.h);
        let d = [mat2_value(&self.d[0]), mat2_value(&self.d[1])];
        let s = mat2_value(&self.s);
        let tau = [self.tau[0].value(), self.tau[1].value()];
        let mut residual_w = 0.0f64;
        let mut residual_xi = 0.0f64;
        for j in 0..2 {
            for i in 0..2 {
                let dv = Vector3::from(self.w[i].diff(j)?.value());
                let r = dv - (w[0] * d[j][i][0] + w[1] * d[j][i][1] + xi * h[i][j]);
                residual_w = residual_w.max(r.amax() / (1.0 + dv.amax()));
            }
            let dxi = Vector3::from(self.xi.diff(j)?.value());
            let r = dxi + w[0] * s[j][0] + w[1] * s[j][1] - xi * tau[j];
            residual_xi = residual_xi.max(r.amax() / (1.0 + dxi.amax()));
        }
        Ok(EquiaffineStructure {
            u: self.u,
            h,
            d1: d[0],
            d2: d[1],
            s,
            tau,
            theta: self.theta.value(),
            lambda_omega: crate::jets::mat2_det(&self.lambda).value(),
            residual_w,
            residual_xi,
        })
    }
}

pub fn structure_from_field(
    f: &Frontal,
    field: &dyn TransversalField,
    u: [f64; 2],
    cfg: &Config,
) -> Result<EquiaffineStructure, EquiaffineError> {
    structure_jets(f, field, u, 0, cfg)?.values()
}

/// Structures at every grid node, in row-major order.
pub fn structure_grid(
    f: &Frontal,
    field: &dyn TransversalField,
    grid: Grid,
    cfg: &Config,
) -> Result<Vec<EquiaffineStructure>, EquiaffineError> {
    grid.points(&f.domain).par_iter().map(|&u| structure_from_field(f, field, u, cfg)).collect()
}

/// True when every `|τ_i|` is within `tol`; also returns the largest `|τ_i|`.
pub fn is_equiaffine(samples: &[EquiaffineStructure], tol: f64) -> (bool, f64) {
    let m = samples.iter().flat_map(|s| s.tau).fold(0.0, |m: f64, t| m.max(t.abs()));
    (m <= tol, m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauFormulaResiduals {
    /// `max |h_ij − p_ij / φ|`.
    pub h: f64,
    /// `max |τ_i − (ã p_{1i} + b̃ p_{2i} + φ_{u_i}) / φ|`.
    pub tau: f64,
}

/// Split `ξ = φ n + ã w1 + b̃ w2` of a field, as jets.
#[derive(Debug, Clone, Copy)]
pub struct Split {
    pub phi: Jet,
    pub a: Jet,
    pub b: Jet,
}

pub fn split_of(fj: &FrameJets, xi: &JetVec3) -> Result<Split, EquiaffineError> {
    let phi = xi.dot(&fj.n);
    let z = *xi - fj.n.scale(phi);
    let r = [z.dot(&fj.w1), z.dot(&fj.w2)];
    let g = crate::jets::mat2_try_inv(&fj.i_omega)?;
    Ok(Split { phi, a: g[0][0] * r[0] + g[0][1] * r[1], b: g[1][0] * r[0] + g[1][1] * r[1] })
}

/// Compares the solved `h`, `τ` with their expressions through the split of ξ.
pub fn check_tau_formula(
    f: &Frontal,
    field: &dyn TransversalField,
    u: [f64; 2],
    cfg: &Config,
) -> Result<TauFormulaResiduals, EquiaffineError> {
    let st = structure_from_field(f, field, u, cfg)?;
    let fj = FrameJets::compute(f, u, 0, cfg)?;
    let split = split_of(&fj, &field.xi(f, u, 1, cfg)?)?;
    let phi = split.phi.value();
    if phi == 0.0 {
        return Err(EquiaffineError::NotTransversal { point: u, theta: 0.0 });
    }
    let p = mat2_value(&fj.ii_omega);
    let (a, b) = (split.a.value(), split.b.value());
    let mut r = TauFormulaResiduals { h: 0.0, tau: 0.0 };
    for i in 0..2 {
        for j in 0..2 {
            r.h = r.h.max((st.h[i][j] - p[i][j] / phi).abs());
        }
        let predicted = (a * p[0][i] + b * p[1][i] + split.phi.d(i)) / phi;
        r.tau = r.tau.max((st.tau[i] - predicted).abs());
    }
    Ok(r)
}

/// `max_k |θ_{u_k} − (D¹_{1k} + D²_{2k} + τ_k) θ|` at one regular point.
pub fn parallel_volume_residual(
    f: &Frontal,
    field: &dyn TransversalField,
    u: [f64; 2],
    cfg: &Config,
) -> Result<f64, EquiaffineError> {
    let st = structure_jets(f, field, u, 1, cfg)?;
    if !is_regular(crate::jets::mat2_det(&st.lambda).value(), cfg) {
        return Err(EquiaffineError::singular(u));
    }
    let theta = st.theta.value();
    let mut worst = 0.0f64;
    for k in 0..2 {
        let conn = st.d[k][0][0].value() + st.d[k][1][1].value() + st.tau[k].value();
        worst = worst.max((st.theta.d(k) - conn * theta).abs());
    }
    Ok(worst)
}

/// Largest parallel-volume residual over the regular grid nodes.
pub fn parallel_volume_check(
    f: &Frontal,
    field: &dyn TransversalField,
    grid: Grid,
    cfg: &Config,
) -> Result<f64, EquiaffineError> {
    let r = grid
        .points(&f.domain)
        .par_iter()
        .map(|&u| match parallel_volume_residual(f, field, u, cfg) {
            Err(EquiaffineError::Frame(FrameError::SingularPoint { .. })) => Ok(0.0),
            other => other,
        })
        .collect::<Result<Vec<f64>, _>>()?;
    Ok(r.into_iter().fold(0.0, f64::max))
}

/// Classical connection data on the regular part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassicalSymbols {
    /// Levi-Civita matrices `Γ_j` from `(½ I_{u_j} + ½ A_j) I⁻¹`.
    pub gamma: [[[f64; 2]; 2]; 2],
    /// `Γ_j` computed directly as `(Dx_{u_j}ᵀ Dx) I⁻¹`.
    pub gamma_direct: [[[f64; 2]; 2]; 2],
    /// Induced connection `Γ̃_j` in the basis `(x_{u1}, x_{u2})`.
    pub gamma_tilde: [[[f64; 2]; 2]; 2],
    /// Affine fundamental form `c = II / φ`.
    pub c: [[f64; 2]; 2],
    /// `b` with `S = b Λ`.
    pub b: [[f64; 2]; 2],
    /// Classical split `ξ = φ n + a x_{u1} + b x_{u2}`.
    pub phi: f64,
    pub a: f64,
    pub b_coef: f64,
}

pub fn classical_symbols(
    f: &Frontal,
    field: &dyn TransversalField,
    u: [f64; 2],
    cfg: &Config,
) -> Result<ClassicalSymbols, EquiaffineError> {
    let j = f.jets(u, 2)?;
    let lam = mat2_value(&j.lambda);
    if !is_regular(lam[0][0] * lam[1][1] - lam[0][1] * lam[1][0], cfg) {
        return Err(EquiaffineError::singular(u));
    }
    let n = Vector3::from(unit_normal(&j.w1, &j.w2, u, cfg)?.value());
    let dx = [j.x.diff(0)?, j.x.diff(1)?];
    let first = |a: usize, b: usize| dx[a].dot(&dx[b]);
    let (e, fm, g) = (first(0, 0), first(0, 1), first(1, 1));
    let i_mat = Matrix2::new(e.value(), fm.value(), fm.value(), g.value());
    let i_inv = i_mat.try_inverse().ok_or(EquiaffineError::singular(u))?;
    let a1 = e.d(1) - fm.d(0);
    let a2 = fm.d(1) - g.d(0);
    let di = |k: usize| Matrix2::new(e.d(k), fm.d(k), fm.d(k), g.d(k));
    let gamma = [
        (di(0) * 0.5 + Matrix2::new(0.0, -a1, a1, 0.0) * 0.5) * i_inv,
        (di(1) * 0.5 + Matrix2::new(0.0, -a2, a2, 0.0) * 0.5) * i_inv,
    ];
    let dxv = [Vector3::from(dx[0].value()), Vector3::from(dx[1].value())];
    let second = |a: usize, b: usize| -> Result<Vector3<f64>, JetError> { Ok(Vector3::from(dx[a].diff(b)?.value())) };
    let mut gamma_direct = [Matrix2::zeros(); 2];
    let mut ii = Matrix2::zeros();
    for k in 0..2 {
        let mut m = Matrix2::zeros();
        for a in 0..2 {
            for b in 0..2 {
                m[(a, b)] = second(a, k)?.dot(&dxv[b]);
            }
            ii[(a, k)] = second(a, k)?.dot(&n);
        }
        gamma_direct[k] = m * i_inv;
    }
    let xi = Vector3::from(field.xi(f, u, 0, cfg)?.value());
    let phi = xi.dot(&n);
    if phi == 0.0 {
        return Err(EquiaffineError::NotTransversal { point: u, theta: 0.0 });
    }
    let z = xi - n * phi;
    let ab = i_inv * Vector2::new(z.dot(&dxv[0]), z.dot(&dxv[1]));
    let (a, b) = (ab[0], ab[1]);
    let (ee, ff, gg) = (ii[(0, 0)], ii[(0, 1)], ii[(1, 1)]);
    let gamma_tilde = [
        gamma[0] - Matrix2::new(a * ee, b * ee, a * ff, b * ff) / phi,
        gamma[1] - Matrix2::new(a * ff, b * ff, a * gg, b * gg) / phi,
    ];
    let st = structure_from_field(f, field, u, cfg)?;
    let lam_inv = to_na(lam).try_inverse().ok_or(EquiaffineError::singular(u))?;
    Ok(ClassicalSymbols {
        gamma: gamma.map(from_na),
        gamma_direct: gamma_direct.map(from_na),
        gamma_tilde: gamma_tilde.map(from_na),
        c: from_na(ii / phi),
        b: from_na(to_na(st.s) * lam_inv),
        phi,
        a,
        b_coef: b,
    })
}

/// `D_j = Λ⁻¹(Γ̃_j Λ − Λ_{u_j})` on the regular part.
pub fn d_from_gamma(
    f: &Frontal,
    field: &dyn TransversalField,
    u: [f64; 2],
    cfg: &Config,
) -> Result<[[[f64; 2]; 2]; 2], EquiaffineError> {
    let cs = classical_symbols(f, field, u, cfg)?;
    let lj = f.jets(u, 1)?.lambda;
    let lam = to_na(mat2_value(&lj));
    let lam_inv = lam.try_inverse().ok_or(EquiaffineError::singular(u))?;
    let mut out = [[[0.0; 2]; 2]; 2];
    for k in 0..2 {
        let dl = to_na(mat2_value(&crate::jets::mat2_diff(&lj, k)?));
        out[k] = from_na(lam_inv * (to_na(cs.gamma_tilde[k]) * lam - dl));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;
    use crate::frame::{ExprFrontal, Origin, Rect};

    fn exprs<const N: usize>(s: [&str; N]) -> [Expr; N] {
        s.map(|t| parse(t).unwrap())
    }

    fn frontal(x: [&str; 3], w1: [&str; 3], w2: [&str; 3]) -> Frontal {
        let src = ExprFrontal { x: exprs(x), w1: exprs(w1), w2: exprs(w2), lambda: None, cfg: Config::default() };
        Frontal::new("t", Rect::new((-1.0, 1.0), (-0.9, 0.9)), Origin::User, Arc::new(src))
    }

    fn plane() -> Frontal {
        frontal(["u1", "u2", "0"], ["1", "0", "0"], ["0", "1", "0"])
    }

    fn ex59() -> Frontal {
        frontal(["u1", "2/5*u2^5 + u2^2", "u1*u2^2"], ["1", "0", "u2^2"], ["0", "u2^3 + 1", "u1"])
    }

    fn ex510() -> Frontal {
        frontal(
            ["u1", "12*u1^2*u2 - 4*u2^3", "u1^4 + 6*u1^2*u2^2 - 3*u2^4"],
            ["1", "24*u1*u2", "4*u1^3 + 12*u1*u2^2"],
            ["0", "1", "u2"],
        )
    }

    fn paraboloid() -> Frontal {
        frontal(["u1", "u2", "(u1^2 + u2^2)/2"], ["1", "0", "u1"], ["0", "1", "u2"])
    }

    const E3: ConstantField = ConstantField([0.0, 0.0, 1.0]);

    fn max_abs(m: &[[f64; 2]; 2]) -> f64 {
        m.iter().flatten().fold(0.0, |a: f64, b| a.max(b.abs()))
    }

    #[test]
    fn plane_with_vertical_field() {
        let cfg = Config::default();
        let s = structure_from_field(&plane(), &E3, [0.3, -0.2], &cfg).unwrap();
        assert_eq!((max_abs(&s.h), max_abs(&s.d1), max_abs(&s.d2), max_abs(&s.s)), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(s.tau, [0.0, 0.0]);
    }

    #[test]
    fn normal_field_recovers_ii_omega() {
        let cfg = Config::default();
        for u in [[0.3, 0.4], [-0.5, -0.2], [0.2, 0.0]] {
            let s = structure_from_field(&ex59(), &NormalField(1.0), u, &cfg).unwrap();
            let p = mat2_value(&FrameJets::compute(&ex59(), u, 0, &cfg).unwrap().ii_omega);
            for i in 0..2 {
                for j in 0..2 {
                    assert!((s.h[i][j] - p[i][j]).abs() < 1e-12);
                }
            }
            assert!(s.tau.iter().all(|t| t.abs() < 1e-12));
            assert!(s.residual_w < 1e-12 && s.residual_xi < 1e-12);
        }
    }

    #[test]
    fn constant_field_is_equiaffine() {
        let cfg = Config::default();
        let f = ex510();
        let samples = structure_grid(&f, &E3, Grid::new(9, 9), &cfg).unwrap();
        assert_eq!(is_equiaffine(&samples, 1e-12), (true, 0.0));
    }

    #[test]
    fn tau_formula_holds_for_assorted_fields() {
        let cfg = Config::default();
        let split = SplitField { phi: parse("2 + u1*u2").unwrap(), a: parse("u1^2").unwrap(), b: parse("sin(u2)").unwrap() };
        let fields: Vec<Box<dyn TransversalField>> =
            vec![Box::new(NormalField(1.0)), Box::new(NormalField(2.0)), Box::new(E3), Box::new(split)];
        for field in &fields {
            for u in [[0.3, 0.4], [-0.6, 0.7], [0.1, -0.3]] {
                let r = check_tau_formula(&ex59(), field.as_ref(), u, &cfg).unwrap();
                assert!(r.h < 1e-10 && r.tau < 1e-10, "{}: {r:?}", field.label());
            }
        }
    }

    #[test]
    fn h_scales_inversely() {
        let cfg = Config::default();
        let split = SplitField { phi: parse("1 + u1^2").unwrap(), a: parse("u2").unwrap(), b: parse("u1").unwrap() };
        let scaled = ScaledField { inner: Arc::new(split.clone()), factor: 3.0 };
        let u = [0.2, 0.5];
        let a = structure_from_field(&ex59(), &split, u, &cfg).unwrap();
        let b = structure_from_field(&ex59(), &scaled, u, &cfg).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((b.h[i][j] * 3.0 - a.h[i][j]).abs() <= 1e-12 * (1.0 + a.h[i][j].abs()));
            }
        }
    }

    #[test]
    fn parallel_volume_identity() {
        let cfg = Config::default();
        let g = Grid::new(7, 7);
        assert!(parallel_volume_check(&ex510(), &E3, g, &cfg).unwrap() < 1e-9);
        assert!(parallel_volume_check(&plane(), &NormalField(2.0), g, &cfg).unwrap() < 1e-12);
        let wobbly = ExprField(exprs(["u1*u2", "1 + u2^2", "2 + sin(u1)"]));
        assert!(parallel_volume_check(&paraboloid(), &wobbly, g, &cfg).unwrap() < 1e-9);
        let s = structure_from_field(&paraboloid(), &wobbly, [0.3, 0.2], &cfg).unwrap();
        assert!(s.tau[0].abs() + s.tau[1].abs() > 1e-3);
    }

    #[test]
    fn classical_symbols_examples() {
        let cfg = Config::default();
        let cs = classical_symbols(&plane(), &E3, [0.2, 0.1], &cfg).unwrap();
        assert!(cs.gamma.iter().chain(&cs.gamma_tilde).all(|m| max_abs(m) == 0.0) && max_abs(&cs.c) == 0.0);
        let cs = classical_symbols(&paraboloid(), &NormalField(1.0), [0.0, 0.0], &cfg).unwrap();
        assert!(max_abs(&[[cs.c[0][0] - 1.0, cs.c[0][1]], [cs.c[1][0], cs.c[1][1] - 1.0]]) < 1e-14);
        let u = [0.5, 0.1];
        let cs = classical_symbols(&ex510(), &E3, u, &cfg).unwrap();
        let fd = crate::frame::frame_data(&ex510(), u, &cfg).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((cs.c[i][j] - fd.ii[i][j] / cs.phi).abs() < 1e-9);
                for k in 0..2 {
                    assert!((cs.gamma[k][i][j] - cs.gamma_direct[k][i][j]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn d_symbols_agree_across_routes() {
        let cfg = Config::default();
        let cases: Vec<(Frontal, Box<dyn TransversalField>, [f64; 2])> = vec![
            (plane(), Box::new(E3), [0.1, 0.2]),
            (ex510(), Box::new(E3), [0.5, 0.1]),
            (ex59(), Box::new(NormalField(1.0)), [0.3, 0.4]),
            (paraboloid(), Box::new(ExprField(exprs(["u1", "u2^2", "3"]))), [0.4, -0.6]),
        ];
        for (f, field, u) in &cases {
            let direct = structure_from_field(f, field.as_ref(), *u, &cfg).unwrap();
            let routed = d_from_gamma(f, field.as_ref(), *u, &cfg).unwrap();
            for (a, b) in [(direct.d1, routed[0]), (direct.d2, routed[1])] {
                for i in 0..2 {
                    for k in 0..2 {
                        assert!((a[i][k] - b[i][k]).abs() < 1e-8 * (1.0 + a[i][k].abs()), "{a:?} vs {b:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn singular_points_are_refused() {
        let cfg = Config::default();
        assert!(matches!(
            classical_symbols(&ex59(), &E3, [0.3, 0.0], &cfg),
            Err(EquiaffineError::Frame(FrameError::SingularPoint { .. }))
        ));
    }

    #[test]
    fn tangent_field_is_not_transversal() {
        let cfg = Config::default();
        let r = structure_from_field(&plane(), &ConstantField([1.0, 0.0, 0.0]), [0.0, 0.0], &cfg);
        assert!(matches!(r, Err(EquiaffineError::NotTransversal { .. })));
    }
}
