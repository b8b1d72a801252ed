//! Rebuilding a frontal and its transversal field from structure data.
//!
//! The frame `W = (w1 w2 ξ)` solves `W_{u1} = W D1ᵀ`, `W_{u2} = W D2ᵀ`, and the
//! position solves `x_{u_k} = λ_{k1} w1 + λ_{k2} w2`. Both are integrated along a
//! spine through the base point and then along the transverse lines; the
//! opposite order is always run as an audit.

use std::sync::Arc;

use nalgebra::{DMatrix, Matrix2, Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blaschke::{extension_condition, MetricSource, Verdict};
use crate::config::Config;
use crate::equiaffine::{is_regular, split_of, structure_jets, EquiaffineError, TransversalField};
use crate::expr::{parse, Expr, ExprError};
use crate::frame::{from_na, to_na, FrameError, FrameJets, Frontal, Grid, Rect};
use crate::jets::{mat2_det, mat2_diff, mat2_mul, mat2_try_inv, mat2_value, Jet, JetError, JetMat2};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReconstructError {
    #[error("extension condition {which} fails at ({}, {}): ω_{which} has no smooth extension", point[0], point[1])]
    ConditionFailed { which: usize, point: [f64; 2] },
    #[error("structure data are not compatible: residual {residual:e}, path discrepancy {discrepancy:e} (tolerances {tol_residual:e}, {tol_path:e})")]
    CompatibilityViolated { residual: f64, discrepancy: f64, tol_residual: f64, tol_path: f64 },
    #[error("integrability fails: Λh asymmetry {sym:e}, row identity {row:e}, path discrepancy {discrepancy:e}")]
    IntegrabilityViolated { sym: f64, row: f64, discrepancy: f64 },
    #[error("frame degenerates at ({}, {}): det W = {det:e}", point[0], point[1])]
    FrameDegenerate { point: [f64; 2], det: f64 },
    #[error("affine metric degenerates at ({}, {})", point[0], point[1])]
    DegenerateMetric { point: [f64; 2] },
    #[error("points are coplanar; affine map is not determined")]
    RankDeficient,
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Equiaffine(#[from] EquiaffineError),
}

impl From<FrameError> for ReconstructError {
    fn from(e: FrameError) -> Self {
        ReconstructError::Equiaffine(e.into())
    }
}

impl From<ExprError> for ReconstructError {
    fn from(e: ExprError) -> Self {
        ReconstructError::Equiaffine(e.into())
    }
}

impl From<JetError> for ReconstructError {
    fn from(e: JetError) -> Self {
        ReconstructError::Equiaffine(e.into())
    }
}

/// Structure data at one point, as jets.
#[derive(Debug, Clone, Copy)]
pub struct StructurePoint {
    pub lambda: JetMat2,
    pub i_omega: JetMat2,
    /// `h[i][j]`: ξ-coefficient of `(w_i)_{u_j}`.
    pub h: JetMat2,
    /// `d[j][i][k]`: `w_{k+1}`-coefficient of `(w_i)_{u_j}`.
    pub d: [JetMat2; 2],
    /// `s[j][k] = S^{k+1}_{j+1}`.
    pub s: JetMat2,
    pub phi: Jet,
}

impl StructurePoint {
    fn block_with(&self, j: usize, v: impl Fn(&Jet) -> f64) -> Matrix3<f64> {
        let (d, h, s) = (&self.d[j], &self.h, &self.s);
        Matrix3::new(
            v(&d[0][0]),
            v(&d[0][1]),
            v(&h[0][j]),
            v(&d[1][0]),
            v(&d[1][1]),
            v(&h[1][j]),
            -v(&s[j][0]),
            -v(&s[j][1]),
            0.0,
        )
    }

    /// The 3×3 block `D_j` (0-based `j`) with rows `(D¹ D² h)` and `(−S¹ −S² 0)`.
    pub fn block(&self, j: usize) -> Matrix3<f64> {
        self.block_with(j, Jet::value)
    }

    /// `∂_{u_axis}` of the block `D_j`; needs order-1 jets.
    pub fn block_derivative(&self, j: usize, axis: usize) -> Matrix3<f64> {
        self.block_with(j, |x| x.d(axis))
    }

    pub fn lambda_det(&self) -> f64 {
        mat2_det(&self.lambda).value()
    }
}

/// One entry of tabulated structure data: expressions or grid samples.
#[derive(Debug, Clone)]
pub enum Entry {
    Expr(Vec<Expr>),
    Grid(Sampled),
}

/// Node values on a uniform grid, interpolated with bicubic Catmull–Rom splines.
///
/// At grid nodes first derivatives come from fourth-order differences.
#[derive(Debug, Clone, PartialEq)]
pub struct Sampled {
    pub domain: Rect,
    pub grid: Grid,
    pub ncomp: usize,
    /// `values[(j * nx + i) * ncomp + c]`.
    pub values: Vec<f64>,
}

fn fd4(f: impl Fn(usize) -> f64, i: usize, n: usize, h: f64) -> f64 {
    let d = if i >= 2 && i + 2 < n {
        f(i - 2) - 8.0 * f(i - 1) + 8.0 * f(i + 1) - f(i + 2)
    } else if i == 0 {
        -25.0 * f(0) + 48.0 * f(1) - 36.0 * f(2) + 16.0 * f(3) - 3.0 * f(4)
    } else if i == 1 {
        -3.0 * f(0) - 10.0 * f(1) + 18.0 * f(2) - 6.0 * f(3) + f(4)
    } else if i + 1 == n {
        25.0 * f(n - 1) - 48.0 * f(n - 2) + 36.0 * f(n - 3) - 16.0 * f(n - 4) + 3.0 * f(n - 5)
    } else {
        3.0 * f(n - 1) + 10.0 * f(n - 2) - 18.0 * f(n - 3) + 6.0 * f(n - 4) - f(n - 5)
    };
    d / (12.0 * h)
}

/// Catmull–Rom weights and their `t`-derivatives for nodes `c−1 .. c+2`.
fn cr_weights(t: f64) -> ([f64; 4], [f64; 4]) {
    let (t2, t3) = (t * t, t * t * t);
    (
        [
            0.5 * (-t + 2.0 * t2 - t3),
            0.5 * (2.0 - 5.0 * t2 + 3.0 * t3),
            0.5 * (t + 4.0 * t2 - 3.0 * t3),
            0.5 * (-t2 + t3),
        ],
        [
            0.5 * (-1.0 + 4.0 * t - 3.0 * t2),
            0.5 * (-10.0 * t + 9.0 * t2),
            0.5 * (1.0 + 8.0 * t - 9.0 * t2),
            0.5 * (-2.0 * t + 3.0 * t2),
        ],
    )
}

/// Node weights for one axis, folding the quadratic ghost nodes into the edge.
fn axis_weights(x: f64, (a, b): (f64, f64), n: usize) -> (Vec<(usize, f64, f64)>, f64) {
    let h = (b - a) / (n - 1) as f64;
    let s = ((x - a) / h).clamp(0.0, (n - 1) as f64);
    let c = (s.floor() as usize).min(n - 2);
    let (w, dw) = cr_weights(s - c as f64);
    let mut out: Vec<(usize, f64, f64)> = Vec::with_capacity(6);
    let mut add = |i: usize, w: f64, dw: f64| match out.iter_mut().find(|e| e.0 == i) {
        Some(e) => {
            e.1 += w;
            e.2 += dw;
        }
        None => out.push((i, w, dw)),
    };
    for k in 0..4 {
        let node = c as isize + k as isize - 1;
        if node < 0 {
            add(0, 3.0 * w[k], 3.0 * dw[k]);
            add(1, -3.0 * w[k], -3.0 * dw[k]);
            add(2, w[k], dw[k]);
        } else if node as usize >= n {
            add(n - 1, 3.0 * w[k], 3.0 * dw[k]);
            add(n - 2, -3.0 * w[k], -3.0 * dw[k]);
            add(n - 3, w[k], dw[k]);
        } else {
            add(node as usize, w[k], dw[k]);
        }
    }
    (out, h)
}

fn node_index(x: f64, (a, b): (f64, f64), n: usize) -> Option<usize> {
    let s = (x - a) / (b - a) * (n - 1) as f64;
    let r = s.round();
    ((s - r).abs() < 1e-9 && r >= 0.0 && r <= (n - 1) as f64).then_some(r as usize)
}

impl Sampled {
    pub fn new(domain: Rect, grid: Grid, ncomp: usize, values: Vec<f64>) -> Result<Sampled, ReconstructError> {
        if grid.nx < 5 || grid.ny < 5 {
            return Err(ReconstructError::Input(format!("sampled grids need at least 5×5 nodes, got {}×{}", grid.nx, grid.ny)));
        }
        if values.len() != grid.len() * ncomp {
            return Err(ReconstructError::Input(format!(
                "expected {} values for a {}×{} grid with {ncomp} components, got {}",
                grid.len() * ncomp,
                grid.nx,
                grid.ny,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ReconstructError::Input("sampled values must be finite".into()));
        }
        Ok(Sampled { domain, grid, ncomp, values })
    }

    fn at(&self, i: usize, j: usize, c: usize) -> f64 {
        self.values[(j * self.grid.nx + i) * self.ncomp + c]
    }

    /// Jets of order 0 or 1 for every component at `u`.
    pub fn eval(&self, u: [f64; 2], order: usize) -> Result<Vec<Jet>, ReconstructError> {
        if order > 1 {
            return Err(JetError::InsufficientOrder { needed: order, carried: 1 }.into());
        }
        let (nx, ny) = (self.grid.nx, self.grid.ny);
        let (d1, d2) = (self.domain.u1, self.domain.u2);
        if let (Some(i), Some(j)) = (node_index(u[0], d1, nx), node_index(u[1], d2, ny)) {
            let (h1, h2) = ((d1.1 - d1.0) / (nx - 1) as f64, (d2.1 - d2.0) / (ny - 1) as f64);
            return Ok((0..self.ncomp)
                .map(|c| {
                    let v = self.at(i, j, c);
                    if order == 0 {
                        Jet::constant(v, 0)
                    } else {
                        let g1 = fd4(|k| self.at(k, j, c), i, nx, h1);
                        let g2 = fd4(|k| self.at(i, k, c), j, ny, h2);
                        Jet::from_coeffs(1, &[v, g1, g2])
                    }
                })
                .collect());
        }
        let (wx, hx) = axis_weights(u[0], d1, nx);
        let (wy, hy) = axis_weights(u[1], d2, ny);
        let mut acc = vec![[0.0f64; 3]; self.ncomp];
        for &(j, vy, dvy) in &wy {
            for &(i, vx, dvx) in &wx {
                for (c, a) in acc.iter_mut().enumerate() {
                    let f = self.at(i, j, c);
                    a[0] += vx * vy * f;
                    a[1] += dvx * vy * f;
                    a[2] += vx * dvy * f;
                }
            }
        }
        Ok(acc
            .into_iter()
            .map(|a| if order == 0 { Jet::constant(a[0], 0) } else { Jet::from_coeffs(1, &[a[0], a[1] / hx, a[2] / hy]) })
            .collect())
    }
}

impl Entry {
    fn ncomp(&self) -> usize {
        match self {
            Entry::Expr(e) => e.len(),
            Entry::Grid(s) => s.ncomp,
        }
    }

    fn eval(&self, u: [f64; 2], order: usize) -> Result<Vec<Jet>, ReconstructError> {
        match self {
            Entry::Expr(es) => es.iter().map(|e| Ok(e.eval_jet(u, order)?)).collect(),
            Entry::Grid(s) => s.eval(u, order),
        }
    }

    fn parse(items: &[&str]) -> Result<Entry, ReconstructError> {
        Ok(Entry::Expr(items.iter().map(|s| parse(s)).collect::<Result<_, _>>()?))
    }
}

/// Tabulated structure data: `Λ`, `I_Ω`, `h`, `D1`, `D2`, `S` (2×2, row-major) and `φ`.
#[derive(Debug, Clone)]
pub struct TableStructure {
    pub lambda: Entry,
    pub i_omega: Entry,
    pub h: Entry,
    pub d1: Entry,
    pub d2: Entry,
    pub s: Entry,
    pub phi: Entry,
}

fn mat(v: &[Jet]) -> JetMat2 {
    [[v[0], v[1]], [v[2], v[3]]]
}

impl TableStructure {
    /// All entries given as expression strings.
    pub fn from_exprs(
        lambda: [&str; 4],
        i_omega: [&str; 4],
        h: [&str; 4],
        d1: [&str; 4],
        d2: [&str; 4],
        s: [&str; 4],
        phi: &str,
    ) -> Result<TableStructure, ReconstructError> {
        Ok(TableStructure {
            lambda: Entry::parse(&lambda)?,
            i_omega: Entry::parse(&i_omega)?,
            h: Entry::parse(&h)?,
            d1: Entry::parse(&d1)?,
            d2: Entry::parse(&d2)?,
            s: Entry::parse(&s)?,
            phi: Entry::parse(&[phi])?,
        })
    }

    fn entries(&self) -> [(&'static str, &Entry, usize); 7] {
        [
            ("Lambda", &self.lambda, 4),
            ("I_Omega", &self.i_omega, 4),
            ("h", &self.h, 4),
            ("D1", &self.d1, 4),
            ("D2", &self.d2, 4),
            ("S", &self.s, 4),
            ("phi", &self.phi, 1),
        ]
    }

    fn eval(&self, u: [f64; 2], order: usize) -> Result<StructurePoint, ReconstructError> {
        Ok(StructurePoint {
            lambda: mat(&self.lambda.eval(u, order)?),
            i_omega: mat(&self.i_omega.eval(u, order)?),
            h: mat(&self.h.eval(u, order)?),
            d: [mat(&self.d1.eval(u, order)?), mat(&self.d2.eval(u, order)?)],
            s: mat(&self.s.eval(u, order)?),
            phi: self.phi.eval(u, order)?[0],
        })
    }

    fn native_grid(&self) -> Result<Option<(Grid, Rect)>, ReconstructError> {
        let mut found: Option<(Grid, Rect)> = None;
        for (name, e, n) in self.entries() {
            if e.ncomp() != n {
                return Err(ReconstructError::Input(format!("entry {name} needs {n} components, got {}", e.ncomp())));
            }
            if let Entry::Grid(s) = e {
                match found {
                    None => found = Some((s.grid, s.domain)),
                    Some((g, r)) if g == s.grid && r == s.domain => {}
                    Some(_) => return Err(ReconstructError::Input(format!("entry {name} is sampled on a different grid"))),
                }
            }
        }
        Ok(found)
    }
}

/// Structure data computed on demand from a frontal and a transversal field.
#[derive(Clone)]
pub struct FieldStructure {
    pub frontal: Frontal,
    pub field: Arc<dyn TransversalField>,
    pub cfg: Config,
}

impl FieldStructure {
    fn eval(&self, u: [f64; 2], order: usize) -> Result<StructurePoint, ReconstructError> {
        let sj = structure_jets(&self.frontal, self.field.as_ref(), u, order, &self.cfg)?;
        let (w1, w2) = (sj.w[0].truncate(order), sj.w[1].truncate(order));
        let l = &sj.lambda;
        let t = |j: &Jet| j.truncate(order);
        Ok(StructurePoint {
            lambda: [[t(&l[0][0]), t(&l[0][1])], [t(&l[1][0]), t(&l[1][1])]],
            i_omega: [[w1.dot(&w1), w1.dot(&w2)], [w2.dot(&w1), w2.dot(&w2)]],
            h: sj.h,
            d: sj.d,
            s: sj.s,
            phi: sj.xi.truncate(order).dot(&sj.n.truncate(order)),
        })
    }
}

#[derive(Clone)]
pub enum StructureSource {
    Table(TableStructure),
    Field(FieldStructure),
}

/// Structure data together with the initial conditions `W(q) = W0`, `x(q) = p`.
#[derive(Clone)]
pub struct StructureData {
    pub domain: Rect,
    pub basepoint: [f64; 2],
    /// Columns are `v1, v2, v3`.
    pub w0: Matrix3<f64>,
    pub p: Vector3<f64>,
    pub source: StructureSource,
}

impl StructureData {
    pub fn eval(&self, u: [f64; 2], order: usize) -> Result<StructurePoint, ReconstructError> {
        match &self.source {
            StructureSource::Table(t) => t.eval(u, order),
            StructureSource::Field(f) => f.eval(u, order),
        }
    }

    /// The grid the data live on, if sampled; otherwise `requested`.
    pub fn grid_for(&self, requested: Grid) -> Result<Grid, ReconstructError> {
        match &self.source {
            StructureSource::Table(t) => match t.native_grid()? {
                Some((g, r)) if r == self.domain => Ok(g),
                Some(_) => Err(ReconstructError::Input("sampled entries must cover the structure domain".into())),
                None => Ok(requested),
            },
            StructureSource::Field(_) => Ok(requested),
        }
    }

    /// Builds data from `f` and `field`, with `W0 = (w1 w2 ξ)(q)` and `p = x(q)`.
    pub fn from_field(
        f: &Frontal,
        field: Arc<dyn TransversalField>,
        basepoint: [f64; 2],
        cfg: &Config,
    ) -> Result<StructureData, ReconstructError> {
        let j = f.jets(basepoint, 0)?;
        let xi = field.xi(f, basepoint, 0, cfg)?.value();
        let (w1, w2) = (j.w1.value(), j.w2.value());
        let w0 = Matrix3::from_columns(&[w1.into(), w2.into(), xi.into()]);
        Ok(StructureData {
            domain: f.domain,
            basepoint,
            w0,
            p: j.x.value().into(),
            source: StructureSource::Field(FieldStructure { frontal: f.clone(), field, cfg: cfg.clone() }),
        })
    }

    /// Tabulates the data on `grid`; the result no longer refers to the frontal.
    pub fn sample(&self, grid: Grid) -> Result<StructureData, ReconstructError> {
        let pts = grid.points(&self.domain);
        let nodes: Vec<StructurePoint> = pts.par_iter().map(|&u| self.eval(u, 0)).collect::<Result<_, _>>()?;
        let take = |f: &dyn Fn(&StructurePoint) -> Vec<f64>, n: usize| -> Result<Entry, ReconstructError> {
            let values = nodes.iter().flat_map(f).collect();
            Ok(Entry::Grid(Sampled::new(self.domain, grid, n, values)?))
        };
        let m = |m: &JetMat2| vec![m[0][0].value(), m[0][1].value(), m[1][0].value(), m[1][1].value()];
        let table = TableStructure {
            lambda: take(&|p| m(&p.lambda), 4)?,
            i_omega: take(&|p| m(&p.i_omega), 4)?,
            h: take(&|p| m(&p.h), 4)?,
            d1: take(&|p| m(&p.d[0]), 4)?,
            d2: take(&|p| m(&p.d[1]), 4)?,
            s: take(&|p| m(&p.s), 4)?,
            phi: take(&|p| vec![p.phi.value()], 1)?,
        };
        Ok(StructureData { source: StructureSource::Table(table), ..self.clone() })
    }

    fn base_index(&self, grid: Grid) -> Result<(usize, usize), ReconstructError> {
        match (
            node_index(self.basepoint[0], self.domain.u1, grid.nx),
            node_index(self.basepoint[1], self.domain.u2, grid.ny),
        ) {
            (Some(i), Some(j)) => Ok((i, j)),
            _ => Err(ReconstructError::Input(format!(
                "base point ({}, {}) is not a node of the {}×{} grid",
                self.basepoint[0], self.basepoint[1], grid.nx, grid.ny
            ))),
        }
    }
}

/// Flatness residual `D1_{u2} − D2_{u1} + [D1, D2]` over the grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompatResidual {
    /// Largest Frobenius norm over regular nodes; for sampled data, only
    /// nodes whose difference stencils avoid the singular set count.
    pub regular: f64,
    /// Largest Frobenius norm over the remaining nodes (reported, not gated).
    pub singular: f64,
    /// Largest `‖D_j‖` over the grid.
    pub d_scale: f64,
    /// `tol_compat · max(1, d_scale)`.
    pub tol: f64,
}

fn node_points(sd: &StructureData, grid: Grid, order: usize) -> Result<Vec<([f64; 2], StructurePoint)>, ReconstructError> {
    grid.points(&sd.domain).par_iter().map(|&u| Ok((u, sd.eval(u, order)?))).collect()
}

pub fn compat_residual(sd: &StructureData, grid: Grid, cfg: &Config) -> Result<CompatResidual, ReconstructError> {
    let grid = sd.grid_for(grid)?;
    let pts = node_points(sd, grid, 1)?;
    let singular_node: Vec<bool> = pts.iter().map(|(_, p)| !is_regular(p.lambda_det(), cfg)).collect();
    let sampled = matches!(&sd.source, StructureSource::Table(t) if t.native_grid()?.is_some());
    let (mut regular, mut singular, mut d_scale) = (0.0f64, 0.0f64, 0.0f64);
    for (idx, (_, p)) in pts.iter().enumerate() {
        let (d1, d2) = (p.block(0), p.block(1));
        let r = p.block_derivative(0, 1) - p.block_derivative(1, 0) + d1 * d2 - d2 * d1;
        d_scale = d_scale.max(d1.norm()).max(d2.norm());
        let gated = if sampled { !stencil_touches(grid, idx, &singular_node) } else { !singular_node[idx] };
        if gated {
            regular = regular.max(r.norm());
        } else {
            singular = singular.max(r.norm());
        }
    }
    Ok(CompatResidual { regular, singular, d_scale, tol: cfg.tol_compat * d_scale.max(1.0) })
}

/// Whether the five-point stencils of node `idx` reach a flagged node.
fn stencil_touches(grid: Grid, idx: usize, flagged: &[bool]) -> bool {
    let (i, j) = ((idx % grid.nx) as isize, (idx / grid.nx) as isize);
    let hit = |a: isize, b: isize| {
        a >= 0 && b >= 0 && (a as usize) < grid.nx && (b as usize) < grid.ny && flagged[b as usize * grid.nx + a as usize]
    };
    (-2..=2).any(|k| hit(i + k, j) || hit(i, j + k))
}

/// Residuals of the two integrability conditions of the position system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegrabilityResidual {
    /// Largest `|(Λh)₁₂ − (Λh)₂₁|` over regular nodes.
    pub sym: f64,
    /// Largest deviation of `(0 1)(Λ D1 + Λ_{u1}) = (1 0)(Λ D2 + Λ_{u2})` over regular nodes.
    pub row: f64,
    pub singular_sym: f64,
    pub singular_row: f64,
    pub tol: f64,
}

pub fn integrability_residual(
    sd: &StructureData,
    grid: Grid,
    cfg: &Config,
) -> Result<IntegrabilityResidual, ReconstructError> {
    let grid = sd.grid_for(grid)?;
    let pts = node_points(sd, grid, 1)?;
    let mut out = IntegrabilityResidual { sym: 0.0, row: 0.0, singular_sym: 0.0, singular_row: 0.0, tol: 0.0 };
    let mut scale = 0.0f64;
    for (_, p) in &pts {
        let lam = to_na(mat2_value(&p.lambda));
        let lh = lam * to_na(mat2_value(&p.h));
        let sym = (lh[(0, 1)] - lh[(1, 0)]).abs();
        let m1 = lam * to_na(mat2_value(&p.d[0])) + to_na(mat2_value(&mat2_diff(&p.lambda, 0)?));
        let m2 = lam * to_na(mat2_value(&p.d[1])) + to_na(mat2_value(&mat2_diff(&p.lambda, 1)?));
        let row = (m1[(1, 0)] - m2[(0, 0)]).abs().max((m1[(1, 1)] - m2[(0, 1)]).abs());
        scale = scale.max(m1.amax()).max(m2.amax()).max(lh.amax());
        if is_regular(p.lambda_det(), cfg) {
            out.sym = out.sym.max(sym);
            out.row = out.row.max(row);
        } else {
            out.singular_sym = out.singular_sym.max(sym);
            out.singular_row = out.singular_row.max(row);
        }
    }
    out.tol = cfg.tol_compat * scale.max(1.0);
    Ok(out)
}

/// `h`, `ã`, `b̃` of the split `ξ = φ n + ã w1 + b̃ w2` at a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitValues {
    pub h: [[f64; 2]; 2],
    pub a: f64,
    pub b: f64,
}

/// Split values of a transversal field along a frontal.
pub fn field_split(f: &Frontal, field: &dyn TransversalField, u: [f64; 2], cfg: &Config) -> Result<SplitValues, ReconstructError> {
    let sj = structure_jets(f, field, u, 0, cfg)?;
    let fj = FrameJets::compute(f, u, 0, cfg)?;
    let sp = split_of(&fj, &sj.xi.truncate(0))?;
    Ok(SplitValues { h: mat2_value(&sj.h), a: sp.a.value(), b: sp.b.value() })
}

/// The smooth extension of `D_k` across the singular set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtendedD {
    pub which: usize,
    pub point: [f64; 2],
    pub d: [[f64; 2]; 2],
    /// The certificate `ω_k` used in the construction.
    pub omega: f64,
}

/// `D_k = ½(I_{Ω,u_k} + [[0, −ω_k], [ω_k, 0]]) I_Ω⁻¹ − X_k` with rows `X_k[i] = (ã h_{ik}, b̃ h_{ik})`.
pub fn extend_d(
    metric: &dyn MetricSource,
    split: &dyn Fn([f64; 2]) -> Result<SplitValues, ReconstructError>,
    which: usize,
    u: [f64; 2],
    cfg: &Config,
) -> Result<ExtendedD, ReconstructError> {
    let v = extension_condition(metric, which, u, cfg)?;
    let omega = match (v.verdict, v.omega) {
        (Verdict::Extendable, Some(w)) => w,
        _ => return Err(ReconstructError::ConditionFailed { which, point: u }),
    };
    let k = which - 1;
    let m = metric.metric(u, 1)?;
    let io = to_na(mat2_value(&m.i_omega));
    let dio = to_na(mat2_value(&mat2_diff(&m.i_omega, k)?));
    let inv = io.try_inverse().ok_or(ReconstructError::DegenerateMetric { point: u })?;
    let sv = split(u)?;
    let x = Matrix2::new(sv.a * sv.h[0][k], sv.b * sv.h[0][k], sv.a * sv.h[1][k], sv.b * sv.h[1][k]);
    let d = (dio + Matrix2::new(0.0, -omega, omega, 0.0)) * 0.5 * inv - x;
    Ok(ExtendedD { which, point: u, d: from_na(d), omega })
}

fn substeps(spacing: f64, step: f64) -> usize {
    ((spacing.abs() / step) - 1e-9).ceil().max(1.0) as usize
}

/// RK4 for `W' = W D_axis(u)ᵀ` along a grid line, from node `start` to both ends.
fn frame_line(
    sd: &StructureData,
    coords: &[f64],
    at: impl Fn(f64) -> [f64; 2],
    axis: usize,
    start: usize,
    w_start: Matrix3<f64>,
    step: f64,
) -> Result<Vec<Matrix3<f64>>, ReconstructError> {
    let n = coords.len();
    let mut out = vec![Matrix3::zeros(); n];
    out[start] = w_start;
    let d = |t: f64| -> Result<Matrix3<f64>, ReconstructError> { Ok(sd.eval(at(t), 0)?.block(axis).transpose()) };
    for dir in [1isize, -1] {
        let mut w = w_start;
        let mut i = start as isize;
        while (0..n as isize).contains(&(i + dir)) {
            let (t0, t1) = (coords[i as usize], coords[(i + dir) as usize]);
            let m = substeps(t1 - t0, step);
            let h = (t1 - t0) / m as f64;
            let mut dt = d(t0)?;
            for s in 0..m {
                let t = t0 + h * s as f64;
                let dm = d(t + 0.5 * h)?;
                let de = if s + 1 == m { d(t1)? } else { d(t + h)? };
                let k1 = w * dt;
                let k2 = (w + k1 * (0.5 * h)) * dm;
                let k3 = (w + k2 * (0.5 * h)) * dm;
                let k4 = (w + k3 * h) * de;
                w += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
                dt = de;
            }
            i += dir;
            out[i as usize] = w;
        }
    }
    Ok(out)
}

/// Frames on the grid (row-major) integrated first along `first_axis` through the base.
fn frame_sweep(
    sd: &StructureData,
    grid: Grid,
    base: (usize, usize),
    step: f64,
    first_axis: usize,
) -> Result<Vec<Matrix3<f64>>, ReconstructError> {
    let xs = grid.u1_values(&sd.domain);
    let ys = grid.u2_values(&sd.domain);
    let (bx, by) = (xs[base.0], ys[base.1]);
    let mut out = vec![Matrix3::zeros(); grid.len()];
    if first_axis == 1 {
        let spine = frame_line(sd, &ys, |t| [bx, t], 1, base.1, sd.w0, step)?;
        let rows: Vec<Vec<Matrix3<f64>>> = (0..grid.ny)
            .into_par_iter()
            .map(|j| frame_line(sd, &xs, |t| [t, ys[j]], 0, base.0, spine[j], step))
            .collect::<Result<_, _>>()?;
        for (j, row) in rows.into_iter().enumerate() {
            out[j * grid.nx..(j + 1) * grid.nx].copy_from_slice(&row);
        }
    } else {
        let spine = frame_line(sd, &xs, |t| [t, by], 0, base.0, sd.w0, step)?;
        let cols: Vec<Vec<Matrix3<f64>>> = (0..grid.nx)
            .into_par_iter()
            .map(|i| frame_line(sd, &ys, |t| [xs[i], t], 1, base.1, spine[i], step))
            .collect::<Result<_, _>>()?;
        for (i, col) in cols.into_iter().enumerate() {
            for (j, w) in col.into_iter().enumerate() {
                out[j * grid.nx + i] = w;
            }
        }
    }
    Ok(out)
}

fn max_diff<const R: usize, const C: usize>(
    a: &[nalgebra::SMatrix<f64, R, C>],
    b: &[nalgebra::SMatrix<f64, R, C>],
) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max)
}

/// Integrated frame field with its audit.
#[derive(Debug, Clone)]
pub struct FrameField {
    pub domain: Rect,
    pub grid: Grid,
    pub base: (usize, usize),
    pub step: f64,
    /// Row-major frames `W = (w1 w2 ξ)`.
    pub w: Vec<Matrix3<f64>>,
    /// Largest entrywise difference between the two integration orders.
    pub discrepancy: f64,
    pub compat: CompatResidual,
    pub min_abs_det: f64,
}

/// Discrepancy between the two integration orders, without any gating.
pub fn path_discrepancy(sd: &StructureData, grid: Grid, step: f64) -> Result<f64, ReconstructError> {
    let grid = sd.grid_for(grid)?;
    let base = sd.base_index(grid)?;
    let a = frame_sweep(sd, grid, base, step, 1)?;
    let b = frame_sweep(sd, grid, base, step, 0)?;
    Ok(max_diff(&a, &b))
}

/// Path discrepancies at `step` and `step / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrderProbe {
    pub step: f64,
    pub discrepancy: [f64; 2],
    pub ratio: f64,
}

pub fn order_probe(sd: &StructureData, grid: Grid, step: f64) -> Result<OrderProbe, ReconstructError> {
    let a = path_discrepancy(sd, grid, step)?;
    let b = path_discrepancy(sd, grid, 0.5 * step)?;
    Ok(OrderProbe { step, discrepancy: [a, b], ratio: a / b })
}

pub fn integrate_frame(sd: &StructureData, grid: Grid, step: f64, cfg: &Config) -> Result<FrameField, ReconstructError> {
    let grid = sd.grid_for(grid)?;
    let base = sd.base_index(grid)?;
    let compat = compat_residual(sd, grid, cfg)?;
    if compat.regular > compat.tol {
        return Err(ReconstructError::CompatibilityViolated {
            residual: compat.regular,
            discrepancy: f64::NAN,
            tol_residual: compat.tol,
            tol_path: cfg.tol_path,
        });
    }
    let w = frame_sweep(sd, grid, base, step, 1)?;
    let audit = frame_sweep(sd, grid, base, step, 0)?;
    let discrepancy = max_diff(&w, &audit);
    if !(discrepancy <= cfg.tol_path) {
        return Err(ReconstructError::CompatibilityViolated {
            residual: compat.regular,
            discrepancy,
            tol_residual: compat.tol,
            tol_path: cfg.tol_path,
        });
    }
    let det0 = sd.w0.determinant();
    let pts = grid.points(&sd.domain);
    let mut min_abs_det = f64::INFINITY;
    for (u, m) in pts.iter().zip(&w) {
        let det = m.determinant();
        let scale = m.column(0).norm() * m.column(1).norm() * m.column(2).norm();
        if det.signum() != det0.signum() || !(det.abs() > cfg.eps_rank * scale) {
            return Err(ReconstructError::FrameDegenerate { point: *u, det });
        }
        min_abs_det = min_abs_det.min(det.abs());
    }
    Ok(FrameField { domain: sd.domain, grid, base, step, w, discrepancy, compat, min_abs_det })
}

/// Four-point Gauss–Legendre nodes and weights on `[0, 1]`.
fn gl4() -> [(f64, f64); 4] {
    let a = (3.0 / 7.0 - 2.0 / 7.0 * (6.0f64 / 5.0).sqrt()).sqrt();
    let b = (3.0 / 7.0 + 2.0 / 7.0 * (6.0f64 / 5.0).sqrt()).sqrt();
    let wa = (18.0 + 30.0f64.sqrt()) / 36.0;
    let wb = (18.0 - 30.0f64.sqrt()) / 36.0;
    [(-b, wb), (-a, wa), (a, wa), (b, wb)].map(|(x, w)| (0.5 * (x + 1.0), 0.5 * w))
}

/// Integrates `x_{u_axis} = W (λ_{axis,1}, λ_{axis,2}, 0)ᵀ` along a grid line,
/// with `W` Hermite-interpolated from node values and `W_{u_axis} = W D_axisᵀ`.
fn position_line(
    sd: &StructureData,
    coords: &[f64],
    at: impl Fn(f64) -> [f64; 2],
    axis: usize,
    w: &[Matrix3<f64>],
    start: usize,
    x_start: Vector3<f64>,
) -> Result<Vec<Vector3<f64>>, ReconstructError> {
    let n = coords.len();
    let dw: Vec<Matrix3<f64>> =
        (0..n).map(|i| Ok(w[i] * sd.eval(at(coords[i]), 0)?.block(axis).transpose())).collect::<Result<_, ReconstructError>>()?;
    let mut out = vec![Vector3::zeros(); n];
    out[start] = x_start;
    let q = gl4();
    for dir in [1isize, -1] {
        let mut x = x_start;
        let mut i = start as isize;
        while (0..n as isize).contains(&(i + dir)) {
            let (a, b) = (i as usize, (i + dir) as usize);
            let h = coords[b] - coords[a];
            for &(s, wt) in &q {
                let (s2, s3) = (s * s, s * s * s);
                let wm = w[a] * (2.0 * s3 - 3.0 * s2 + 1.0)
                    + dw[a] * (h * (s3 - 2.0 * s2 + s))
                    + w[b] * (-2.0 * s3 + 3.0 * s2)
                    + dw[b] * (h * (s3 - s2));
                let lam = mat2_value(&sd.eval(at(coords[a] + s * h), 0)?.lambda);
                x += wm * Vector3::new(lam[axis][0], lam[axis][1], 0.0) * (wt * h);
            }
            i += dir;
            out[i as usize] = x;
        }
    }
    Ok(out)
}

fn position_sweep(
    sd: &StructureData,
    frame: &FrameField,
    first_axis: usize,
) -> Result<Vec<Vector3<f64>>, ReconstructError> {
    let grid = frame.grid;
    let xs = grid.u1_values(&sd.domain);
    let ys = grid.u2_values(&sd.domain);
    let (bi, bj) = frame.base;
    let row = |j: usize| -> Vec<Matrix3<f64>> { frame.w[j * grid.nx..(j + 1) * grid.nx].to_vec() };
    let col = |i: usize| -> Vec<Matrix3<f64>> { (0..grid.ny).map(|j| frame.w[j * grid.nx + i]).collect() };
    let mut out = vec![Vector3::zeros(); grid.len()];
    if first_axis == 1 {
        let spine = position_line(sd, &ys, |t| [xs[bi], t], 1, &col(bi), bj, sd.p)?;
        let rows: Vec<Vec<Vector3<f64>>> = (0..grid.ny)
            .into_par_iter()
            .map(|j| position_line(sd, &xs, |t| [t, ys[j]], 0, &row(j), bi, spine[j]))
            .collect::<Result<_, _>>()?;
        for (j, r) in rows.into_iter().enumerate() {
            out[j * grid.nx..(j + 1) * grid.nx].copy_from_slice(&r);
        }
    } else {
        let spine = position_line(sd, &xs, |t| [t, ys[bj]], 0, &row(bj), bi, sd.p)?;
        let cols: Vec<Vec<Vector3<f64>>> = (0..grid.nx)
            .into_par_iter()
            .map(|i| position_line(sd, &ys, |t| [xs[i], t], 1, &col(i), bj, spine[i]))
            .collect::<Result<_, _>>()?;
        for (i, c) in cols.into_iter().enumerate() {
            for (j, x) in c.into_iter().enumerate() {
                out[j * grid.nx + i] = x;
            }
        }
    }
    Ok(out)
}

/// Integrated positions with their audit.
#[derive(Debug, Clone)]
pub struct PositionField {
    pub x: Vec<Vector3<f64>>,
    pub discrepancy: f64,
    pub integrability: IntegrabilityResidual,
}

pub fn integrate_position(sd: &StructureData, frame: &FrameField, cfg: &Config) -> Result<PositionField, ReconstructError> {
    let integrability = integrability_residual(sd, frame.grid, cfg)?;
    let x = position_sweep(sd, frame, 1)?;
    let audit = position_sweep(sd, frame, 0)?;
    let discrepancy = max_diff(&x, &audit);
    if integrability.sym > integrability.tol || integrability.row > integrability.tol || !(discrepancy <= cfg.tol_path) {
        return Err(ReconstructError::IntegrabilityViolated { sym: integrability.sym, row: integrability.row, discrepancy });
    }
    Ok(PositionField { x, discrepancy, integrability })
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub frame: FrameField,
    pub position: PositionField,
}

/// Frame and position integration in one call.
pub fn reconstruct(sd: &StructureData, grid: Grid, step: f64, cfg: &Config) -> Result<Reconstruction, ReconstructError> {
    let frame = integrate_frame(sd, grid, step, cfg)?;
    let position = integrate_position(sd, &frame, cfg)?;
    Ok(Reconstruction { frame, position })
}

/// Residual of `∂_k √|det c| = (Γ̃¹_{k1} + Γ̃²_{k2}) √|det c|` with `c = Λh`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApolarityReport {
    pub max_residual: f64,
    pub regular_points: usize,
}

pub fn apolarity_check(sd: &StructureData, grid: Grid, cfg: &Config) -> Result<ApolarityReport, ReconstructError> {
    let grid = sd.grid_for(grid)?;
    let pts = node_points(sd, grid, 1)?;
    let mut max_residual = 0.0f64;
    let mut regular_points = 0;
    for (u, p) in &pts {
        if !is_regular(p.lambda_det(), cfg) {
            continue;
        }
        regular_points += 1;
        let det_c = mat2_det(&mat2_mul(&p.lambda, &p.h));
        if !(det_c.value().abs() > cfg.eps_k) {
            return Err(ReconstructError::DegenerateMetric { point: *u });
        }
        let vol = det_c.try_abs()?.try_sqrt()?;
        let inv = mat2_try_inv(&p.lambda)?;
        for k in 0..2 {
            let dl = mat2_diff(&p.lambda, k)?;
            let ld = mat2_mul(&p.lambda, &p.d[k]);
            let g = mat2_mul(&[[ld[0][0] + dl[0][0], ld[0][1] + dl[0][1]], [ld[1][0] + dl[1][0], ld[1][1] + dl[1][1]]], &inv);
            let trace = g[0][0].value() + g[1][1].value();
            max_residual = max_residual.max((vol.d(k) - trace * vol.value()).abs());
        }
    }
    Ok(ApolarityReport { max_residual, regular_points })
}

/// Least-squares affine map with `L x + a ≈ y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub l: [[f64; 3]; 3],
    pub a: [f64; 3],
    pub sup_error: f64,
}

pub fn affine_align(x: &[[f64; 3]], y: &[[f64; 3]]) -> Result<Alignment, ReconstructError> {
    if x.len() != y.len() || x.len() < 4 {
        return Err(ReconstructError::Input(format!("alignment needs matching point sets of at least 4, got {} and {}", x.len(), y.len())));
    }
    let n = x.len();
    let mean = x.iter().fold([0.0; 3], |m, p| [m[0] + p[0], m[1] + p[1], m[2] + p[2]]).map(|s| s / n as f64);
    let centered = DMatrix::from_fn(n, 3, |r, c| x[r][c] - mean[c]);
    let sv = centered.clone().svd(false, false).singular_values;
    if !(sv.min() > 1e-10 * sv.max()) {
        return Err(ReconstructError::RankDeficient);
    }
    let a_mat = DMatrix::from_fn(n, 4, |r, c| if c < 3 { x[r][c] - mean[c] } else { 1.0 });
    let y_mat = DMatrix::from_fn(n, 3, |r, c| y[r][c]);
    let sol = a_mat.svd(true, true).solve(&y_mat, 1e-14).map_err(|e| ReconstructError::Input(e.to_string()))?;
    let mut l = [[0.0; 3]; 3];
    for (r, row) in l.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = sol[(c, r)];
        }
    }
    let lm = Matrix3::from_fn(|r, c| l[r][c]);
    let shift = Vector3::new(sol[(3, 0)], sol[(3, 1)], sol[(3, 2)]) - lm * Vector3::from(mean);
    let sup_error = x
        .iter()
        .zip(y)
        .map(|(p, q)| (lm * Vector3::from(*p) + shift - Vector3::from(*q)).norm())
        .fold(0.0, f64::max);
    Ok(Alignment { l, a: shift.into(), sup_error })
}

/// Serialized form of an entry: `{"expr": [...]}` or `{"grid": {...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum EntryFile {
    Expr(Vec<String>),
    Grid(GridFile),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridFile {
    pub nx: usize,
    pub ny: usize,
    /// Node-major, `u1` fastest; each node lists its components in row-major order.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntriesFile {
    #[serde(rename = "Lambda")]
    pub lambda: EntryFile,
    #[serde(rename = "I_Omega")]
    pub i_omega: EntryFile,
    pub h: EntryFile,
    #[serde(rename = "D1")]
    pub d1: EntryFile,
    #[serde(rename = "D2")]
    pub d2: EntryFile,
    #[serde(rename = "S")]
    pub s: EntryFile,
    pub phi: EntryFile,
}

/// On-disk structure data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructureFile {
    pub domain: Rect,
    pub basepoint: [f64; 2],
    /// Row-major; the columns are `v1, v2, v3`.
    #[serde(rename = "W0")]
    pub w0: [[f64; 3]; 3],
    pub p: [f64; 3],
    pub entries: EntriesFile,
}

impl StructureFile {
    pub fn from_json(text: &str) -> Result<StructureFile, ReconstructError> {
        serde_json::from_str(text).map_err(|e| ReconstructError::Input(format!("invalid structure file: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("structure files serialize")
    }

    pub fn into_data(self) -> Result<StructureData, ReconstructError> {
        let domain = self.domain;
        if !(domain.u1.0 < domain.u1.1 && domain.u2.0 < domain.u2.1) {
            return Err(ReconstructError::Input("domain must be a non-empty rectangle".into()));
        }
        let entry = |e: EntryFile, n: usize| -> Result<Entry, ReconstructError> {
            match e {
                EntryFile::Expr(v) => {
                    if v.len() != n {
                        return Err(ReconstructError::Input(format!("expected {n} expressions, got {}", v.len())));
                    }
                    Ok(Entry::Expr(v.iter().map(|s| parse(s)).collect::<Result<_, _>>()?))
                }
                EntryFile::Grid(g) => Ok(Entry::Grid(Sampled::new(domain, Grid::new(g.nx, g.ny), n, g.values)?)),
            }
        };
        let e = self.entries;
        let table = TableStructure {
            lambda: entry(e.lambda, 4)?,
            i_omega: entry(e.i_omega, 4)?,
            h: entry(e.h, 4)?,
            d1: entry(e.d1, 4)?,
            d2: entry(e.d2, 4)?,
            s: entry(e.s, 4)?,
            phi: entry(e.phi, 1)?,
        };
        table.native_grid()?;
        let w0 = Matrix3::from_fn(|r, c| self.w0[r][c]);
        if !(w0.determinant().abs() > 0.0) {
            return Err(ReconstructError::Input("W0 must be invertible".into()));
        }
        Ok(StructureData {
            domain,
            basepoint: self.basepoint,
            w0,
            p: self.p.into(),
            source: StructureSource::Table(table),
        })
    }

    /// File form of tabulated data; field-backed data must be sampled first.
    pub fn from_data(sd: &StructureData) -> Result<StructureFile, ReconstructError> {
        let StructureSource::Table(t) = &sd.source else {
            return Err(ReconstructError::Input("sample field-backed structure data before saving".into()));
        };
        let conv = |e: &Entry| match e {
            Entry::Expr(v) => EntryFile::Expr(v.iter().map(|x| x.to_string()).collect()),
            Entry::Grid(s) => EntryFile::Grid(GridFile { nx: s.grid.nx, ny: s.grid.ny, values: s.values.clone() }),
        };
        Ok(StructureFile {
            domain: sd.domain,
            basepoint: sd.basepoint,
            w0: [0, 1, 2].map(|r| [0, 1, 2].map(|c| sd.w0[(r, c)])),
            p: sd.p.into(),
            entries: EntriesFile {
                lambda: conv(&t.lambda),
                i_omega: conv(&t.i_omega),
                h: conv(&t.h),
                d1: conv(&t.d1),
                d2: conv(&t.d2),
                s: conv(&t.s),
                phi: conv(&t.phi),
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blaschke::{Blaschke, ExprMetric};
    use crate::catalog;
    use crate::equiaffine::{d_from_gamma, ConstantField, ScaledField};

    fn cfg() -> Config {
        Config::default()
    }

    fn table_data(t: TableStructure, domain: Rect) -> StructureData {
        StructureData {
            domain,
            basepoint: [domain.u1.0, domain.u2.0],
            w0: Matrix3::identity(),
            p: Vector3::zeros(),
            source: StructureSource::Table(t),
        }
    }

    fn unit() -> Rect {
        Rect::new((0.0, 1.0), (0.0, 1.0))
    }

    const ID: [&str; 4] = ["1", "0", "0", "1"];
    const ZERO: [&str; 4] = ["0", "0", "0", "0"];

    fn flat() -> StructureData {
        table_data(TableStructure::from_exprs(ID, ID, ZERO, ZERO, ZERO, ZERO, "1").unwrap(), unit())
    }

    fn blaschke_data(name: &str, grid: Grid) -> (Frontal, StructureData) {
        let e = catalog::entry(name).unwrap();
        let f = e.blaschke_frontal(&cfg());
        let q = [f.domain.u1.0, f.domain.u2.0];
        let sd = StructureData::from_field(&f, Arc::new(Blaschke), q, &cfg()).unwrap().sample(grid).unwrap();
        (f, sd)
    }

    #[test]
    fn catmull_rom_reproduces_quadratics() {
        let r = Rect::new((-1.0, 1.0), (0.0, 2.0));
        let g = Grid::new(7, 6);
        let f = |u: [f64; 2]| 1.0 + 2.0 * u[0] - u[1] + 0.5 * u[0] * u[0] + u[0] * u[1] - 3.0 * u[1] * u[1];
        let values = g.points(&r).iter().map(|&u| f(u)).collect();
        let s = Sampled::new(r, g, 1, values).unwrap();
        for u in [[0.13, 0.77], [-0.99, 1.999], [0.5, 0.2], [1.0, 2.0]] {
            let j = s.eval(u, 1).unwrap()[0];
            assert!((j.value() - f(u)).abs() < 1e-12);
            assert!((j.d(0) - (2.0 + u[0] + u[1])).abs() < 1e-11);
            assert!((j.d(1) - (-1.0 + u[0] - 6.0 * u[1])).abs() < 1e-11);
        }
    }

    #[test]
    fn node_derivatives_are_fourth_order() {
        let r = Rect::new((0.0, 1.0), (0.0, 1.0));
        let err = |n: usize| {
            let g = Grid::new(n, n);
            let values = g.points(&r).iter().map(|u| (2.0 * u[0]).sin() * u[1].exp()).collect();
            let s = Sampled::new(r, g, 1, values).unwrap();
            g.points(&r)
                .iter()
                .map(|&u| (s.eval(u, 1).unwrap()[0].d(0) - 2.0 * (2.0 * u[0]).cos() * u[1].exp()).abs())
                .fold(0.0, f64::max)
        };
        let (a, b) = (err(11), err(21));
        assert!(a / b > 12.0, "{a} {b}");
    }

    #[test]
    fn zero_blocks_are_compatible() {
        let r = compat_residual(&flat(), Grid::new(5, 5), &cfg()).unwrap();
        assert_eq!(r.regular, 0.0);
    }

    #[test]
    fn compat_residual_is_the_derivative_of_a_lone_entry() {
        let t = TableStructure::from_exprs(ID, ID, ZERO, ["0", "u2^2", "0", "0"], ZERO, ZERO, "1").unwrap();
        let sd = table_data(t, unit());
        let r = compat_residual(&sd, Grid::new(5, 5), &cfg()).unwrap();
        assert!((r.regular - 2.0).abs() < 1e-14);
        assert!(matches!(integrate_frame(&sd, Grid::new(5, 5), 0.01, &cfg()), Err(ReconstructError::CompatibilityViolated { .. })));
    }

    #[test]
    fn flat_frame_is_constant() {
        let rec = reconstruct(&flat(), Grid::new(6, 6), 0.05, &cfg()).unwrap();
        assert!(rec.frame.w.iter().all(|w| (w - Matrix3::identity()).amax() == 0.0));
        let pts = Grid::new(6, 6).points(&unit());
        for (u, x) in pts.iter().zip(&rec.position.x) {
            assert!((x - Vector3::new(u[0], u[1], 0.0)).amax() < 1e-14);
        }
    }

    fn expm(m: Matrix3<f64>) -> Matrix3<f64> {
        let (mut term, mut sum) = (Matrix3::identity(), Matrix3::identity());
        for k in 1..40 {
            term = term * m / k as f64;
            sum += term;
        }
        sum
    }

    #[test]
    fn constant_blocks_give_matrix_exponentials() {
        let t = TableStructure::from_exprs(ID, ID, ["0.7", "0", "0.2", "0"], ["0.1", "-0.4", "0.3", "0"], ZERO, ["0.5", "0.2", "0", "0"], "1")
            .unwrap();
        let sd = StructureData { w0: Matrix3::new(1.0, 0.2, 0.0, 0.0, 1.0, 0.3, 0.1, 0.0, 1.0), ..table_data(t, unit()) };
        let d1 = sd.eval([0.0, 0.0], 0).unwrap().block(0);
        let f = integrate_frame(&sd, Grid::new(5, 5), 0.01, &cfg()).unwrap();
        let xs = Grid::new(5, 5).u1_values(&unit());
        for (i, u1) in xs.iter().enumerate() {
            let exact = sd.w0 * expm(d1.transpose() * *u1);
            for j in 0..5 {
                assert!((f.w[j * 5 + i] - exact).amax() < 1e-9);
            }
        }
    }

    #[test]
    fn singular_lambda_frame_is_lifted_from_the_plane() {
        let t = TableStructure::from_exprs(["1", "0", "0", "2*u2"], ID, ZERO, ZERO, ZERO, ZERO, "1").unwrap();
        let mut sd = table_data(t, Rect::new((-1.0, 1.0), (-1.0, 1.0)));
        sd.p = Vector3::new(-1.0, 1.0, 0.0);
        let g = Grid::new(9, 9);
        let rec = reconstruct(&sd, g, 0.05, &cfg()).unwrap();
        for (u, x) in g.points(&sd.domain).iter().zip(&rec.position.x) {
            assert!((x - Vector3::new(u[0], u[1] * u[1], 0.0)).amax() < 1e-13);
        }
    }

    #[test]
    fn asymmetric_h_breaks_integrability() {
        let t = TableStructure::from_exprs(ID, ID, ["0", "0.3", "0", "0"], ZERO, ZERO, ZERO, "1").unwrap();
        let sd = table_data(t, unit());
        let r = integrability_residual(&sd, Grid::new(5, 5), &cfg()).unwrap();
        assert!((r.sym - 0.3).abs() < 1e-15 && r.row == 0.0);
        let t = TableStructure::from_exprs(["2", "0", "0", "1"], ID, ["0", "0.3", "0", "0"], ZERO, ZERO, ZERO, "1").unwrap();
        let r = integrability_residual(&table_data(t, unit()), Grid::new(5, 5), &cfg()).unwrap();
        assert!((r.sym - 0.6).abs() < 1e-15);
    }

    #[test]
    fn plane_data_integrable() {
        let r = integrability_residual(&flat(), Grid::new(5, 5), &cfg()).unwrap();
        assert_eq!((r.sym, r.row), (0.0, 0.0));
    }

    #[test]
    fn extracted_structures_are_compatible_and_integrable() {
        for name in ["ex-5.9", "ex-5.10"] {
            let e = catalog::entry(name).unwrap();
            let f = e.blaschke_frontal(&cfg());
            let sd = StructureData::from_field(&f, Arc::new(Blaschke), [f.domain.u1.0, f.domain.u2.0], &cfg()).unwrap();
            let g = Grid::new(11, 11);
            let c = compat_residual(&sd, g, &cfg()).unwrap();
            assert!(c.regular < 1e-7 && c.singular < 1e-5, "{name}: {c:?}");
            let r = integrability_residual(&sd, g, &cfg()).unwrap();
            assert!(r.sym < 1e-8 && r.row < 1e-8, "{name}: {r:?}");
        }
    }

    fn partial(j: &Jet, a: usize, b: usize) -> f64 {
        let fact = |n: usize| (1..=n).product::<usize>() as f64;
        j.coeff(a, b) * fact(a) * fact(b)
    }

    fn lifted(m: [[f64; 2]; 2], corner: f64) -> Matrix3<f64> {
        Matrix3::new(m[0][0], m[0][1], 0.0, m[1][0], m[1][1], 0.0, 0.0, 0.0, corner)
    }

    #[test]
    fn gamma_flatness_and_d_flatness_vanish_together() {
        let e = catalog::entry("ex-5.9").unwrap();
        let f = e.blaschke_frontal(&cfg());
        let fs = FieldStructure { frontal: f.clone(), field: Arc::new(Blaschke), cfg: cfg() };
        for u in [[0.3, 0.4], [-0.6, -0.5], [0.1, 0.55]] {
            let lam = f.jets(u, 2).unwrap().lambda;
            let ax = |a: usize, b: usize| lifted(std::array::from_fn(|r| std::array::from_fn(|c| partial(&lam[r][c], a, b))), 0.0);
            let lt = lifted(mat2_value(&lam), 1.0);
            let lt_k = [ax(1, 0), ax(0, 1)];
            let lt_jk = |j: usize, k: usize| ax(usize::from(j == 0) + usize::from(k == 0), usize::from(j == 1) + usize::from(k == 1));
            let inv = lt.try_inverse().unwrap();
            let p = fs.eval(u, 1).unwrap();
            let gamma = |j: usize| (lt * p.block(j) + lt_k[j]) * inv;
            let dgamma = |j: usize, k: usize| {
                (lt_k[k] * p.block(j) + lt * p.block_derivative(j, k) + lt_jk(j, k)) * inv - gamma(j) * lt_k[k] * inv
            };
            let (g1, g2) = (gamma(0), gamma(1));
            let flat_gamma = (dgamma(0, 1) - dgamma(1, 0) + g1 * g2 - g2 * g1).amax();
            let (b1, b2) = (p.block(0), p.block(1));
            let flat_d = (p.block_derivative(0, 1) - p.block_derivative(1, 0) + b1 * b2 - b2 * b1).amax();
            assert!(flat_gamma < 1e-8 && flat_d < 1e-8, "{flat_gamma} {flat_d}");
            let skew = Matrix3::new(0.0, 0.3, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
            let bent = |j: usize| (lt * (p.block(j) + skew * (j as f64)) + lt_k[j]) * inv;
            let (c1, c2) = (bent(0), bent(1));
            let broken = (dgamma(0, 1) - dgamma(1, 0) + c1 * c2 - c2 * c1).amax();
            assert!(broken > 1e-3, "{broken}");
        }
    }

    #[test]
    fn extended_d_matches_direct_solve() {
        let e = catalog::entry("ex-5.10").unwrap();
        let f = e.frontal(&cfg());
        let split = |u: [f64; 2]| field_split(&f, &Blaschke, u, &cfg());
        let mut worst = 0.0f64;
        for u in Grid::new(9, 9).points(&f.domain) {
            let direct = structure_jets(&f, &Blaschke, u, 0, &cfg()).unwrap();
            for which in [1, 2] {
                let ext = extend_d(&f, &split, which, u, &cfg()).unwrap();
                let m = mat2_value(&direct.d[which - 1]);
                for i in 0..2 {
                    for k in 0..2 {
                        worst = worst.max((ext.d[i][k] - m[i][k]).abs());
                    }
                }
            }
        }
        assert!(worst < 1e-7, "{worst}");
    }

    #[test]
    fn extended_d_with_identity_lambda() {
        let e = catalog::entry("paraboloid").unwrap();
        let f = e.frontal(&cfg());
        let split = |u: [f64; 2]| field_split(&f, &Blaschke, u, &cfg());
        for u in [[0.2, -0.3], [0.7, 0.1]] {
            let gamma = d_from_gamma(&f, &Blaschke, u, &cfg()).unwrap();
            for which in [1, 2] {
                let ext = extend_d(&f, &split, which, u, &cfg()).unwrap();
                for i in 0..2 {
                    for k in 0..2 {
                        assert!((ext.d[i][k] - gamma[which - 1][i][k]).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn extended_d_fails_on_the_synthetic_metric() {
        let m = ExprMetric {
            lambda: ["1", "0", "0", "u2"].map(|s| parse(s).unwrap()),
            i_omega: ID.map(|s| parse(s).unwrap()),
            i: ["u2", "0", "0", "u2^2"].map(|s| parse(s).unwrap()),
        };
        let split = |_: [f64; 2]| Ok(SplitValues { h: [[0.0; 2]; 2], a: 0.0, b: 0.0 });
        let r = extend_d(&m, &split, 1, [0.3, 0.0], &cfg());
        assert!(matches!(r, Err(ReconstructError::ConditionFailed { which: 1, .. })), "{r:?}");
    }

    #[test]
    fn apolarity_of_blaschke_structures() {
        for (name, tol) in [("paraboloid", 1e-8), ("ex-5.10", 1e-6)] {
            let e = catalog::entry(name).unwrap();
            let f = e.frontal(&cfg());
            let sd = StructureData::from_field(&f, Arc::new(Blaschke), [0.0, 0.0], &cfg()).unwrap();
            let r = apolarity_check(&sd, Grid::new(8, 8), &cfg()).unwrap();
            assert!(r.max_residual < tol && r.regular_points > 0, "{name}: {r:?}");
        }
    }

    #[test]
    fn apolarity_is_blind_to_rescaling_but_not_to_other_fields() {
        let e = catalog::entry("ex-5.10").unwrap();
        let f = e.frontal(&cfg());
        let doubled = Arc::new(ScaledField { inner: Arc::new(Blaschke), factor: 2.0 });
        let sd = StructureData::from_field(&f, doubled, [0.0, 0.0], &cfg()).unwrap();
        assert!(apolarity_check(&sd, Grid::new(8, 8), &cfg()).unwrap().max_residual < 1e-6);
        let e = catalog::entry("ex-5.9").unwrap();
        let f = e.frontal(&cfg());
        let sd = StructureData::from_field(&f, Arc::new(ConstantField([0.0, 0.0, 1.0])), [0.0, 0.5], &cfg()).unwrap();
        assert!(apolarity_check(&sd, Grid::new(8, 8), &cfg()).unwrap().max_residual > 1e-3);
    }

    #[test]
    fn align_identity_and_exact_maps() {
        let pts: Vec<[f64; 3]> = Grid::new(4, 4)
            .points(&unit())
            .iter()
            .map(|u| [u[0], u[1], u[0] * u[0] + 0.3 * u[1] * u[1] * u[1]])
            .collect();
        let r = affine_align(&pts, &pts).unwrap();
        assert!(r.sup_error < 1e-12 && (Matrix3::from_fn(|i, j| r.l[i][j]) - Matrix3::identity()).amax() < 1e-12);
        let a: Matrix3<f64> = Matrix3::new(2.0, 1.0, 0.0, 0.5, 1.0, 0.3, 0.0, -1.0, 0.8);
        let a = a / a.determinant().cbrt();
        let b = Vector3::new(0.3, -2.0, 1.5);
        let y: Vec<[f64; 3]> = pts.iter().map(|p| (a * Vector3::from(*p) + b).into()).collect();
        let r = affine_align(&pts, &y).unwrap();
        assert!((Matrix3::from_fn(|i, j| r.l[i][j]) - a).amax() < 1e-10 && (Vector3::from(r.a) - b).amax() < 1e-10);
        let planar: Vec<[f64; 3]> = pts.iter().map(|p| [p[0], p[1], 0.0]).collect();
        assert_eq!(affine_align(&planar, &planar), Err(ReconstructError::RankDeficient));
    }

    #[test]
    fn structure_file_round_trip() {
        let (_, sd) = blaschke_data("paraboloid", Grid::new(6, 5));
        let file = StructureFile::from_data(&sd).unwrap();
        let back = StructureFile::from_json(&file.to_json()).unwrap();
        assert_eq!(back, file);
        let sd2 = back.into_data().unwrap();
        let (a, b) = (sd.eval([0.31, -0.2], 1).unwrap(), sd2.eval([0.31, -0.2], 1).unwrap());
        assert_eq!(a.block(0), b.block(0));
        let text = r#"{"domain": {"u1": [0, 1], "u2": [0, 1]}, "basepoint": [0, 0],
            "W0": [[1,0,0],[0,1,0],[0,0,1]], "p": [0,0,0],
            "entries": {"Lambda": {"expr": ["1","0","0","1"]}, "I_Omega": {"expr": ["1","0","0","1"]},
            "h": {"expr": ["0","0","0","0"]}, "D1": {"expr": ["0","0","0","0"]}, "D2": {"expr": ["0","0","0","0"]},
            "S": {"expr": ["0","0","0","0"]}, "phi": {"expr": ["1"]}}}"#;
        StructureFile::from_json(text).unwrap().into_data().unwrap();
        assert!(StructureFile::from_json(&text.replace("\"phi\": {\"expr\": [\"1\"]}", "\"phi\": {\"expr\": [\"1\", \"2\"]}"))
            .unwrap()
            .into_data()
            .is_err());
    }

    #[test]
    fn sampled_round_trip_recovers_the_rank_one_front() {
        let (f, sd) = blaschke_data("ex-5.10", Grid::new(61, 61));
        let rec = reconstruct(&sd, Grid::new(61, 61), 1e-2, &cfg()).unwrap();
        let truth: Vec<[f64; 3]> = rec.frame.grid.points(&f.domain).iter().map(|&u| f.jets(u, 0).unwrap().x.value()).collect();
        let xs: Vec<[f64; 3]> = rec.position.x.iter().map(|v| (*v).into()).collect();
        let al = affine_align(&xs, &truth).unwrap();
        assert!(al.sup_error < 1e-4, "{al:?}");
    }

    #[test]
    fn coarse_sampling_of_the_cuspidal_edge_is_rejected() {
        let (_, sd) = blaschke_data("ex-5.9", Grid::new(41, 41));
        assert!(matches!(reconstruct(&sd, Grid::new(41, 41), 1e-2, &cfg()), Err(ReconstructError::CompatibilityViolated { .. })));
    }
}
