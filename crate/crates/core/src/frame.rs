//! Frontals, their moving-basis decomposition and the per-point frame matrices.

use std::fmt;
use std::sync::Arc;

use nalgebra::{Matrix2, Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::Config;
use crate::expr::{Expr, ExprError};
use crate::jets::{
    mat2_det, mat2_mul, mat2_transpose, mat2_try_inv, mat2_value, Jet, JetError, JetMat2, JetVec3, MAX_ORDER,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FrameError {
    #[error("Ω is not a tangent moving basis of x at ({}, {}): residual {residual:e}", point[0], point[1])]
    NotAFrontal { point: [f64; 2], residual: f64 },
    #[error("moving basis is degenerate at ({}, {})", point[0], point[1])]
    DegenerateBasis { point: [f64; 2] },
    #[error("singular point ({}, {}) where a regular point is required", point[0], point[1])]
    SingularPoint { point: [f64; 2] },
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Jet(#[from] JetError),
}

/// Closed parameter rectangle `[u1.0, u1.1] × [u2.0, u2.1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub u1: (f64, f64),
    pub u2: (f64, f64),
}

impl Rect {
    pub fn new(u1: (f64, f64), u2: (f64, f64)) -> Rect {
        Rect { u1, u2 }
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        (self.u1.0..=self.u1.1).contains(&p[0]) && (self.u2.0..=self.u2.1).contains(&p[1])
    }

    pub fn diameter(&self) -> f64 {
        (self.u1.1 - self.u1.0).hypot(self.u2.1 - self.u2.0)
    }
}

/// Node counts of a uniform grid including the rectangle's edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub nx: usize,
    pub ny: usize,
}

impl Grid {
    pub fn new(nx: usize, ny: usize) -> Grid {
        Grid { nx, ny }
    }

    pub fn u1_values(&self, r: &Rect) -> Vec<f64> {
        axis_values(r.u1, self.nx)
    }

    pub fn u2_values(&self, r: &Rect) -> Vec<f64> {
        axis_values(r.u2, self.ny)
    }

    /// Grid nodes in row-major order: `u1` varies fastest.
    pub fn points(&self, r: &Rect) -> Vec<[f64; 2]> {
        let xs = self.u1_values(r);
        self.u2_values(r).into_iter().flat_map(|v| xs.iter().map(move |&u| [u, v])).collect()
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Default for Grid {
    fn default() -> Self {
        Grid::new(101, 101)
    }
}

fn axis_values((a, b): (f64, f64), n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![0.5 * (a + b)],
        _ => (0..n).map(|i| if i + 1 == n { b } else { a + (b - a) * i as f64 / (n - 1) as f64 }).collect(),
    }
}

/// Jets of the parametrization, the moving basis and the factor Λ at one point.
#[derive(Debug, Clone, Copy)]
pub struct FrontalJets {
    pub x: JetVec3,
    pub w1: JetVec3,
    pub w2: JetVec3,
    /// Row `i` holds the coefficients of `x_{u_i}` in the basis `(w1, w2)`.
    pub lambda: JetMat2,
}

/// Anything that can produce jets of `x`, `Ω` and `Λ` at a parameter point.
pub trait FrontalSource: Send + Sync {
    fn eval(&self, u: [f64; 2], order: usize) -> Result<FrontalJets, FrameError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Catalog,
    User,
}

/// A parametrized frontal with its tangent moving basis.
#[derive(Clone)]
pub struct Frontal {
    pub name: String,
    pub domain: Rect,
    pub origin: Origin,
    source: Arc<dyn FrontalSource>,
}

impl fmt::Debug for Frontal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Frontal").field("name", &self.name).field("domain", &self.domain).finish()
    }
}

impl Frontal {
    pub fn new(name: impl Into<String>, domain: Rect, origin: Origin, source: Arc<dyn FrontalSource>) -> Frontal {
        Frontal { name: name.into(), domain, origin, source }
    }

    pub fn jets(&self, u: [f64; 2], order: usize) -> Result<FrontalJets, FrameError> {
        self.source.eval(u, order.min(MAX_ORDER))
    }

    pub fn source(&self) -> Arc<dyn FrontalSource> {
        self.source.clone()
    }

    pub fn with_domain(&self, domain: Rect) -> Frontal {
        Frontal { domain, ..self.clone() }
    }

    /// The image under `x ↦ A x + b`.
    pub fn affine_image(&self, a: Matrix3<f64>, b: Vector3<f64>) -> Frontal {
        let src = AffineImage { inner: self.source.clone(), a, b };
        Frontal { name: format!("{}∘affine", self.name), source: Arc::new(src), ..self.clone() }
    }

    /// Replaces Ω by `Ω B` and Λ by `Λ B⁻ᵀ`; `b` holds B row-major.
    pub fn change_basis(&self, b: [Expr; 4]) -> Frontal {
        let src = BasisChange { inner: self.source.clone(), b };
        Frontal { name: format!("{}∘basis", self.name), source: Arc::new(src), ..self.clone() }
    }

    /// Checks the rank of Ω and the decomposition residual at every grid node.
    pub fn validate(&self, grid: Grid, cfg: &Config) -> Result<(), FrameError> {
        grid.points(&self.domain).par_iter().try_for_each(|&u| {
            let j = self.jets(u, 1)?;
            check_rank(&j.w1, &j.w2, u, cfg)?;
            let dx = [j.x.diff(0)?, j.x.diff(1)?];
            let residual = decomposition_residual(&dx, &j.w1, &j.w2, &j.lambda);
            if residual > cfg.eps_dec {
                return Err(FrameError::NotAFrontal { point: u, residual });
            }
            Ok(())
        })
    }
}

fn decomposition_residual(dx: &[JetVec3; 2], w1: &JetVec3, w2: &JetVec3, lambda: &JetMat2) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..2 {
        let d = dx[i].value();
        let scale = 1.0 + d.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let (a, b) = (w1.value(), w2.value());
        for k in 0..3 {
            let r = d[k] - lambda[i][0].value() * a[k] - lambda[i][1].value() * b[k];
            worst = worst.max(r.abs() / scale);
        }
    }
    worst
}

fn check_rank(w1: &JetVec3, w2: &JetVec3, u: [f64; 2], cfg: &Config) -> Result<(), FrameError> {
    let g = gram(w1, w2);
    let scale = g[0][0].max(g[1][1]);
    if !(smallest_eig_sym(g) > (cfg.eps_rank * cfg.eps_rank) * scale) || !(scale > 0.0) {
        return Err(FrameError::DegenerateBasis { point: u });
    }
    Ok(())
}

fn gram(w1: &JetVec3, w2: &JetVec3) -> [[f64; 2]; 2] {
    let (a, b) = (Vector3::from(w1.value()), Vector3::from(w2.value()));
    [[a.dot(&a), a.dot(&b)], [a.dot(&b), b.dot(&b)]]
}

fn smallest_eig_sym(g: [[f64; 2]; 2]) -> f64 {
    let tr = g[0][0] + g[1][1];
    let det = g[0][0] * g[1][1] - g[0][1] * g[1][0];
    let disc = (0.25 * tr * tr - det).max(0.0).sqrt();
    let big = 0.5 * tr + disc;
    if big > 0.0 {
        det / big
    } else {
        0.0
    }
}

/// Λ with `Dx = ΩΛᵀ`, i.e. `Λ = (DxᵀΩ)(ΩᵀΩ)⁻¹`.
pub fn factor_lambda(
    dx: &[JetVec3; 2],
    w1: &JetVec3,
    w2: &JetVec3,
    u: [f64; 2],
    cfg: &Config,
) -> Result<JetMat2, FrameError> {
    check_rank(w1, w2, u, cfg)?;
    let g = [[w1.dot(w1), w1.dot(w2)], [w2.dot(w1), w2.dot(w2)]];
    let r = [[dx[0].dot(w1), dx[0].dot(w2)], [dx[1].dot(w1), dx[1].dot(w2)]];
    let lambda = mat2_mul(&r, &mat2_try_inv(&g)?);
    let residual = decomposition_residual(dx, w1, w2, &lambda);
    if residual > cfg.eps_dec {
        return Err(FrameError::NotAFrontal { point: u, residual });
    }
    Ok(lambda)
}

/// `n = w1 × w2 / ‖w1 × w2‖`.
pub fn unit_normal(w1: &JetVec3, w2: &JetVec3, u: [f64; 2], cfg: &Config) -> Result<JetVec3, FrameError> {
    let c = w1.cross(w2);
    let scale = norm3(w1.value()) * norm3(w2.value());
    if !(norm3(c.value()) > cfg.eps_rank * scale) {
        return Err(FrameError::DegenerateBasis { point: u });
    }
    Ok(c.try_normalize()?)
}

pub(crate) fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// A frontal given by expressions for `x`, `w1`, `w2` and optionally Λ.
#[derive(Debug, Clone)]
pub struct ExprFrontal {
    pub x: [Expr; 3],
    pub w1: [Expr; 3],
    pub w2: [Expr; 3],
    /// Row-major Λ; factored from `Dx` and Ω when absent.
    pub lambda: Option<[Expr; 4]>,
    pub cfg: Config,
}

fn eval3(e: &[Expr; 3], u: [f64; 2], order: usize) -> Result<JetVec3, ExprError> {
    Ok(JetVec3([e[0].eval_jet(u, order)?, e[1].eval_jet(u, order)?, e[2].eval_jet(u, order)?]))
}

pub(crate) fn eval4(e: &[Expr; 4], u: [f64; 2], order: usize) -> Result<JetMat2, ExprError> {
    Ok([
        [e[0].eval_jet(u, order)?, e[1].eval_jet(u, order)?],
        [e[2].eval_jet(u, order)?, e[3].eval_jet(u, order)?],
    ])
}

impl FrontalSource for ExprFrontal {
    fn eval(&self, u: [f64; 2], order: usize) -> Result<FrontalJets, FrameError> {
        let w1 = eval3(&self.w1, u, order)?;
        let w2 = eval3(&self.w2, u, order)?;
        match &self.lambda {
            Some(l) => Ok(FrontalJets { x: eval3(&self.x, u, order)?, w1, w2, lambda: eval4(l, u, order)? }),
            None => {
                let x = eval3(&self.x, u, (order + 1).min(MAX_ORDER))?;
                let dx = [x.diff(0)?, x.diff(1)?];
                let lambda = factor_lambda(&dx, &w1, &w2, u, &self.cfg)?;
                Ok(FrontalJets { x: x.truncate(order), w1, w2, lambda })
            }
        }
    }
}

struct AffineImage {
    inner: Arc<dyn FrontalSource>,
    a: Matrix3<f64>,
    b: Vector3<f64>,
}

fn apply_linear(a: &Matrix3<f64>, v: &JetVec3) -> JetVec3 {
    let row = |i: usize| v.0[0] * a[(i, 0)] + v.0[1] * a[(i, 1)] + v.0[2] * a[(i, 2)];
    JetVec3([row(0), row(1), row(2)])
}

impl FrontalSource for AffineImage {
    fn eval(&self, u: [f64; 2], order: usize) -> Result<FrontalJets, FrameError> {
        let j = self.inner.eval(u, order)?;
        let mut x = apply_linear(&self.a, &j.x);
        for k in 0..3 {
            x.0[k] = x.0[k] + self.b[k];
        }
        Ok(FrontalJets { x, w1: apply_linear(&self.a, &j.w1), w2: apply_linear(&self.a, &j.w2), lambda: j.lambda })
    }
}

struct BasisChange {
    inner: Arc<dyn FrontalSource>,
    b: [Expr; 4],
}

impl FrontalSource for BasisChange {
    fn eval(&self, u: [f64; 2], order: usize) -> Result<FrontalJets, FrameError> {
        let j = self.inner.eval(u, order)?;
        let b = eval4(&self.b, u, order)?;
        let comb = |c0: Jet, c1: Jet| JetVec3([0, 1, 2].map(|k| j.w1.0[k] * c0 + j.w2.0[k] * c1));
        let w1 = comb(b[0][0], b[1][0]);
        let w2 = comb(b[0][1], b[1][1]);
        let b_inv_t = mat2_transpose(&mat2_try_inv(&b).map_err(|_| FrameError::DegenerateBasis { point: u })?);
        Ok(FrontalJets { x: j.x, w1, w2, lambda: mat2_mul(&j.lambda, &b_inv_t) })
    }
}

/// Jet-level frame quantities at a point.
#[derive(Debug, Clone, Copy)]
pub struct FrameJets {
    pub u: [f64; 2],
    pub x: JetVec3,
    pub w1: JetVec3,
    pub w2: JetVec3,
    pub n: JetVec3,
    pub lambda: JetMat2,
    pub lambda_det: Jet,
    pub i_omega: JetMat2,
    /// `p_ij = ⟨(w_i)_{u_j}, n⟩`, one order below the basis.
    pub ii_omega: JetMat2,
    pub k_omega: Jet,
}

impl FrameJets {
    pub fn compute(f: &Frontal, u: [f64; 2], order: usize, cfg: &Config) -> Result<FrameJets, FrameError> {
        FrameJets::from_jets(f.jets(u, order + 1)?, u, cfg)
    }

    pub fn from_jets(j: FrontalJets, u: [f64; 2], cfg: &Config) -> Result<FrameJets, FrameError> {
        let n = unit_normal(&j.w1, &j.w2, u, cfg)?;
        let w = [j.w1, j.w2];
        let i_omega = [[w[0].dot(&w[0]), w[0].dot(&w[1])], [w[1].dot(&w[0]), w[1].dot(&w[1])]];
        let mut ii = [[Jet::constant(0.0, 0); 2]; 2];
        for (i, wi) in w.iter().enumerate() {
            for (jj, slot) in ii[i].iter_mut().enumerate() {
                *slot = wi.diff(jj)?.dot(&n);
            }
        }
        let k_omega = mat2_det(&ii).try_div(&mat2_det(&i_omega))?;
        Ok(FrameJets {
            u,
            x: j.x,
            w1: j.w1,
            w2: j.w2,
            n,
            lambda: j.lambda,
            lambda_det: mat2_det(&j.lambda),
            i_omega,
            ii_omega: ii,
            k_omega,
        })
    }

    /// `II_Ω = −Ωᵀ Dn`, computed from derivatives of the unit normal.
    pub fn ii_omega_from_normal(&self) -> Result<JetMat2, FrameError> {
        let dn = [self.n.diff(0)?, self.n.diff(1)?];
        let w = [self.w1, self.w2];
        Ok([[-w[0].dot(&dn[0]), -w[0].dot(&dn[1])], [-w[1].dot(&dn[0]), -w[1].dot(&dn[1])]])
    }

    /// `T_j = (Ω_{u_j}ᵀ Ω) I_Ω⁻¹`.
    pub fn t_matrix(&self, axis: usize) -> Result<JetMat2, FrameError> {
        let w = [self.w1, self.w2];
        let dw = [w[0].diff(axis)?, w[1].diff(axis)?];
        let m = [[dw[0].dot(&w[0]), dw[0].dot(&w[1])], [dw[1].dot(&w[0]), dw[1].dot(&w[1])]];
        Ok(mat2_mul(&m, &mat2_try_inv(&self.i_omega)?))
    }

    pub fn is_regular(&self, cfg: &Config) -> bool {
        self.lambda_det.value().abs() > cfg.eps_sing
    }
}

/// Per-point frame data in plain numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameData {
    pub u: [f64; 2],
    pub i_omega: [[f64; 2]; 2],
    pub ii_omega: [[f64; 2]; 2],
    pub mu_omega: [[f64; 2]; 2],
    pub t1: [[f64; 2]; 2],
    pub t2: [[f64; 2]; 2],
    pub lambda: [[f64; 2]; 2],
    pub lambda_omega: f64,
    pub k_omega: f64,
    pub n: [f64; 3],
    /// Classical first fundamental form `DxᵀDx`.
    pub i: [[f64; 2]; 2],
    /// Classical second fundamental form `⟨x_{u_i u_j}, n⟩`.
    pub ii: [[f64; 2]; 2],
    /// False where `λ_Ω` vanishes; `i`, `ii` are then rank-deficient.
    pub regular: bool,
    /// Gaussian curvature `K_Ω / λ_Ω` at regular points.
    pub gauss: Option<f64>,
}

pub fn frame_data(f: &Frontal, u: [f64; 2], cfg: &Config) -> Result<FrameData, FrameError> {
    let fj = FrameJets::compute(f, u, 1, cfg)?;
    let x2 = f.jets(u, 2)?.x;
    let dx = [x2.diff(0)?, x2.diff(1)?];
    let n = Vector3::from(fj.n.value());
    let mut i = [[0.0; 2]; 2];
    let mut ii = [[0.0; 2]; 2];
    for a in 0..2 {
        for b in 0..2 {
            i[a][b] = Vector3::from(dx[a].value()).dot(&Vector3::from(dx[b].value()));
            ii[a][b] = Vector3::from(dx[a].diff(b)?.value()).dot(&n);
        }
    }
    let io = to_na(mat2_value(&fj.i_omega));
    let iio = to_na(mat2_value(&fj.ii_omega));
    let io_inv = io.try_inverse().ok_or(FrameError::DegenerateBasis { point: u })?;
    let mu = -iio.transpose() * io_inv;
    let lambda_omega = fj.lambda_det.value();
    let regular = fj.is_regular(cfg);
    let k_omega = fj.k_omega.value();
    Ok(FrameData {
        u,
        i_omega: from_na(io),
        ii_omega: from_na(iio),
        mu_omega: from_na(mu),
        t1: mat2_value(&fj.t_matrix(0)?),
        t2: mat2_value(&fj.t_matrix(1)?),
        lambda: mat2_value(&fj.lambda),
        lambda_omega,
        k_omega,
        n: fj.n.value(),
        i,
        ii,
        regular,
        gauss: regular.then(|| k_omega / lambda_omega),
    })
}

pub fn to_na(m: [[f64; 2]; 2]) -> Matrix2<f64> {
    Matrix2::new(m[0][0], m[0][1], m[1][0], m[1][1])
}

pub fn from_na(m: Matrix2<f64>) -> [[f64; 2]; 2] {
    [[m[(0, 0)], m[(0, 1)]], [m[(1, 0)], m[(1, 1)]]]
}

/// Grid cover of the singular set `λ_Ω = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingularScan {
    pub grid: Grid,
    /// `λ_Ω` at the nodes, row-major.
    pub lambda_omega: Vec<f64>,
    /// Nodes with `|λ_Ω| < eps_sing`, as `[i, j]` indices.
    pub singular_nodes: Vec<[usize; 2]>,
    /// Cells (lower-left node index) where `λ_Ω` changes sign or nearly vanishes.
    pub cells: Vec<[usize; 2]>,
    /// No cell has all four corners singular: the regular set looks dense.
    pub regular_dense: bool,
}

pub fn singular_scan(f: &Frontal, grid: Grid, cfg: &Config) -> Result<SingularScan, FrameError> {
    let lam: Vec<f64> = grid
        .points(&f.domain)
        .par_iter()
        .map(|&u| Ok(mat2_det(&f.jets(u, 0)?.lambda).value()))
        .collect::<Result<_, FrameError>>()?;
    let at = |i: usize, j: usize| lam[j * grid.nx + i];
    let small = |v: f64| v.abs() < cfg.eps_sing;
    let mut singular_nodes = vec![];
    for j in 0..grid.ny {
        for i in 0..grid.nx {
            if small(at(i, j)) {
                singular_nodes.push([i, j]);
            }
        }
    }
    let mut cells = vec![];
    let mut regular_dense = true;
    for j in 0..grid.ny.saturating_sub(1) {
        for i in 0..grid.nx.saturating_sub(1) {
            let c = [at(i, j), at(i + 1, j), at(i, j + 1), at(i + 1, j + 1)];
            let pos = c.iter().any(|&v| v > 0.0 && !small(v));
            let neg = c.iter().any(|&v| v < 0.0 && !small(v));
            let near = c.iter().filter(|&&v| small(v)).count();
            if (pos && neg) || near > 0 {
                cells.push([i, j]);
            }
            if near == 4 {
                regular_dense = false;
            }
        }
    }
    Ok(SingularScan { grid, lambda_omega: lam, singular_nodes, cells, regular_dense })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WavefrontReport {
    pub is_wavefront: bool,
    /// Points where `(x, n)` fails to be an immersion.
    pub witnesses: Vec<[f64; 2]>,
    pub min_sigma2: f64,
}

/// Tests whether `(x, n)` is an immersion at every grid node.
pub fn wavefront_test(f: &Frontal, grid: Grid, cfg: &Config) -> Result<WavefrontReport, FrameError> {
    let sig: Vec<([f64; 2], f64, f64)> = grid
        .points(&f.domain)
        .par_iter()
        .map(|&u| {
            let fj = FrameJets::compute(f, u, 0, cfg)?;
            let cols: Vec<[f64; 6]> = (0..2)
                .map(|k| {
                    let dx = fj.x.diff(k)?.value();
                    let dn = fj.n.diff(k)?.value();
                    Ok([dx[0], dx[1], dx[2], dn[0], dn[1], dn[2]])
                })
                .collect::<Result<_, FrameError>>()?;
            let dot = |a: &[f64; 6], b: &[f64; 6]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            let g = [[dot(&cols[0], &cols[0]), dot(&cols[0], &cols[1])], [dot(&cols[1], &cols[0]), dot(&cols[1], &cols[1])]];
            let scale = g[0][0].max(g[1][1]).sqrt();
            Ok((u, smallest_eig_sym(g).max(0.0).sqrt(), scale))
        })
        .collect::<Result<_, FrameError>>()?;
    let witnesses: Vec<[f64; 2]> =
        sig.iter().filter(|(_, s, scale)| !(*s > cfg.eps_rank * scale.max(1.0))).map(|(u, _, _)| *u).collect();
    Ok(WavefrontReport {
        is_wavefront: witnesses.is_empty(),
        witnesses,
        min_sigma2: sig.iter().map(|s| s.1).fold(f64::INFINITY, f64::min),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonParabolicReport {
    pub non_parabolic: bool,
    pub min_abs_k_omega: f64,
}

pub fn nonparabolic_test(f: &Frontal, grid: Grid, cfg: &Config) -> Result<NonParabolicReport, FrameError> {
    let m = grid
        .points(&f.domain)
        .par_iter()
        .map(|&u| Ok(FrameJets::compute(f, u, 0, cfg)?.k_omega.value().abs()))
        .collect::<Result<Vec<f64>, FrameError>>()?
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    Ok(NonParabolicReport { non_parabolic: m > cfg.eps_k, min_abs_k_omega: m })
}
