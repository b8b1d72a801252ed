//! Truncated Taylor jets in two variables.
//!
//! A [`Jet`] stores the raw partial derivatives `∂^{i+j} f / ∂u1^i ∂u2^j` of a
//! scalar quantity at a base point, for all `i + j <= order`. Arithmetic
//! between jets of different orders truncates to the smaller order.

use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};
use std::sync::{Arc, OnceLock, RwLock};
use std::collections::HashMap;

use thiserror::Error;

/// Highest derivative order a jet can carry.
pub const MAX_ORDER: usize = 4;
const MAX_LEN: usize = (MAX_ORDER + 1) * (MAX_ORDER + 2) / 2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum JetError {
    #[error("division by a jet whose value is zero")]
    DivisionByZeroValue,
    #[error("operation needs jet order {needed}, only {carried} carried")]
    InsufficientOrder { needed: usize, carried: usize },
    #[error("requested jet order {0} exceeds the supported maximum {MAX_ORDER}")]
    OrderTooHigh(usize),
    #[error("{0} is not differentiable at the base point")]
    Domain(&'static str),
    #[error("quadrature did not converge with {nodes} nodes (last change {change:e})")]
    QuadratureNonConvergent { nodes: usize, change: f64 },
}

/// Number of coefficients carried by a jet of the given order.
pub const fn jet_len(order: usize) -> usize {
    (order + 1) * (order + 2) / 2
}

/// Position of the multi-index `(i, j)` in the coefficient array.
#[inline]
pub const fn index(i: usize, j: usize) -> usize {
    let k = i + j;
    k * (k + 1) / 2 + j
}

struct Tables {
    /// `(i, j)` for every storage slot.
    multi: [(usize, usize); MAX_LEN],
    /// `i! j!` for every storage slot.
    fact: [f64; MAX_LEN],
    binom: [[f64; MAX_ORDER + 1]; MAX_ORDER + 1],
}

fn tables() -> &'static Tables {
    static T: OnceLock<Tables> = OnceLock::new();
    T.get_or_init(|| {
        let mut multi = [(0, 0); MAX_LEN];
        let mut fact = [1.0; MAX_LEN];
        let f = |n: usize| (1..=n).map(|k| k as f64).product::<f64>();
        for k in 0..=MAX_ORDER {
            for j in 0..=k {
                let i = k - j;
                multi[index(i, j)] = (i, j);
                fact[index(i, j)] = f(i) * f(j);
            }
        }
        let mut binom = [[0.0; MAX_ORDER + 1]; MAX_ORDER + 1];
        for n in 0..=MAX_ORDER {
            binom[n][0] = 1.0;
            for k in 1..=n {
                binom[n][k] = binom[n - 1][k - 1] + if k < n { binom[n - 1][k] } else { 0.0 };
            }
        }
        Tables { multi, fact, binom }
    })
}

/// A truncated two-variable Taylor jet holding raw partial derivatives.
#[derive(Clone, Copy, PartialEq)]
pub struct Jet {
    order: u8,
    c: [f64; MAX_LEN],
}

impl std::fmt::Debug for Jet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Jet{}{:?}", self.order, self.coeffs())
    }
}

impl Jet {
    fn zeroed(order: usize) -> Jet {
        assert!(order <= MAX_ORDER, "jet order {order} exceeds {MAX_ORDER}");
        Jet { order: order as u8, c: [0.0; MAX_LEN] }
    }

    pub fn constant(value: f64, order: usize) -> Jet {
        let mut j = Jet::zeroed(order);
        j.c[0] = value;
        j
    }

    /// The coordinate function `u1` (axis 0) or `u2` (axis 1) at `value`.
    pub fn var(value: f64, axis: usize, order: usize) -> Jet {
        let mut j = Jet::constant(value, order);
        if order >= 1 {
            j.c[if axis == 0 { index(1, 0) } else { index(0, 1) }] = 1.0;
        }
        j
    }

    /// Builds a jet from raw partials in storage order (see [`index`]).
    pub fn from_coeffs(order: usize, coeffs: &[f64]) -> Jet {
        let mut j = Jet::zeroed(order);
        let n = jet_len(order);
        assert_eq!(coeffs.len(), n, "expected {n} coefficients for order {order}");
        j.c[..n].copy_from_slice(coeffs);
        j
    }

    pub fn order(&self) -> usize {
        self.order as usize
    }

    pub fn value(&self) -> f64 {
        self.c[0]
    }

    /// `∂^{i+j} f / ∂u1^i ∂u2^j`; zero beyond the carried order.
    pub fn coeff(&self, i: usize, j: usize) -> f64 {
        if i + j > self.order() {
            0.0
        } else {
            self.c[index(i, j)]
        }
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.c[..jet_len(self.order())]
    }

    /// First partial derivative along `axis`, shortcut for `coeff`.
    pub fn d(&self, axis: usize) -> f64 {
        if axis == 0 {
            self.coeff(1, 0)
        } else {
            self.coeff(0, 1)
        }
    }

    pub fn truncate(&self, order: usize) -> Jet {
        let order = order.min(self.order());
        let mut j = Jet::zeroed(order);
        let n = jet_len(order);
        j.c[..n].copy_from_slice(&self.c[..n]);
        j
    }

    pub fn max_abs(&self) -> f64 {
        self.coeffs().iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs().iter().all(|v| v.is_finite())
    }

    /// Partial derivative along `axis` as a jet one order lower.
    pub fn diff(&self, axis: usize) -> Result<Jet, JetError> {
        if self.order == 0 {
            return Err(JetError::InsufficientOrder { needed: 1, carried: 0 });
        }
        let t = tables();
        let order = self.order() - 1;
        let mut r = Jet::zeroed(order);
        for s in 0..jet_len(order) {
            let (i, j) = t.multi[s];
            r.c[s] = if axis == 0 { self.c[index(i + 1, j)] } else { self.c[index(i, j + 1)] };
        }
        Ok(r)
    }

    fn to_taylor(self) -> [f64; MAX_LEN] {
        let t = tables();
        let mut out = [0.0; MAX_LEN];
        for s in 0..jet_len(self.order()) {
            out[s] = self.c[s] / t.fact[s];
        }
        out
    }

    fn from_taylor(order: usize, tc: &[f64; MAX_LEN]) -> Jet {
        let t = tables();
        let mut j = Jet::zeroed(order);
        for s in 0..jet_len(order) {
            j.c[s] = tc[s] * t.fact[s];
        }
        j
    }

    /// `g ∘ self`, where `derivs[k]` is the k-th derivative of `g` at `self.value()`.
    pub fn compose(&self, derivs: &[f64]) -> Jet {
        let order = self.order();
        assert!(derivs.len() > order, "compose needs {} derivatives", order + 1);
        let mut delta = self.to_taylor();
        delta[0] = 0.0;
        let mut acc = [0.0; MAX_LEN];
        acc[0] = derivs[0];
        let mut power = [0.0; MAX_LEN];
        power[0] = 1.0;
        let mut kfact = 1.0;
        for (k, dk) in derivs.iter().enumerate().take(order + 1).skip(1) {
            power = taylor_mul(&power, &delta, order);
            kfact *= k as f64;
            let w = dk / kfact;
            for s in 0..jet_len(order) {
                acc[s] += w * power[s];
            }
        }
        Jet::from_taylor(order, &acc)
    }

    pub fn try_recip(&self) -> Result<Jet, JetError> {
        let x = self.value();
        if x == 0.0 {
            return Err(JetError::DivisionByZeroValue);
        }
        let mut d = [0.0; MAX_ORDER + 1];
        let mut fact = 1.0;
        for (k, dk) in d.iter_mut().enumerate() {
            if k > 0 {
                fact *= k as f64;
            }
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            *dk = sign * fact / x.powi(k as i32 + 1);
        }
        Ok(self.compose(&d))
    }

    pub fn recip(&self) -> Jet {
        self.try_recip().unwrap_or_else(|_| self.nan_like())
    }

    pub fn try_div(&self, rhs: &Jet) -> Result<Jet, JetError> {
        Ok(*self * rhs.try_recip()?)
    }

    fn nan_like(&self) -> Jet {
        let mut j = Jet::zeroed(self.order());
        for v in j.c.iter_mut().take(jet_len(self.order())) {
            *v = f64::NAN;
        }
        j
    }

    /// `self^p` for real `p`; needs a positive value unless only order 0 is carried.
    pub fn try_powf(&self, p: f64) -> Result<Jet, JetError> {
        let x = self.value();
        if x < 0.0 || (x == 0.0 && self.order() > 0) {
            return Err(JetError::Domain("real power"));
        }
        let mut d = [0.0; MAX_ORDER + 1];
        let mut coef = 1.0;
        for (k, dk) in d.iter_mut().enumerate() {
            *dk = coef * x.powf(p - k as f64);
            coef *= p - k as f64;
        }
        Ok(self.compose(&d))
    }

    pub fn powi(&self, n: i32) -> Result<Jet, JetError> {
        if n < 0 {
            return self.try_recip()?.powi(-n);
        }
        let x = self.value();
        let mut d = [0.0; MAX_ORDER + 1];
        let mut coef = 1.0;
        for (k, dk) in d.iter_mut().enumerate() {
            let e = n - k as i32;
            *dk = if coef == 0.0 { 0.0 } else { coef * x.powi(e) };
            coef *= e as f64;
        }
        Ok(self.compose(&d))
    }

    pub fn try_sqrt(&self) -> Result<Jet, JetError> {
        if self.value() == 0.0 && self.order() == 0 {
            return Ok(*self);
        }
        self.try_powf(0.5)
    }

    pub fn try_abs(&self) -> Result<Jet, JetError> {
        let x = self.value();
        if x == 0.0 && self.order() > 0 {
            return Err(JetError::Domain("abs"));
        }
        Ok(if x < 0.0 { -*self } else { *self })
    }

    pub fn try_ln(&self) -> Result<Jet, JetError> {
        let x = self.value();
        if x <= 0.0 {
            return Err(JetError::Domain("ln"));
        }
        let mut d = [0.0; MAX_ORDER + 1];
        d[0] = x.ln();
        let mut fact = 1.0;
        for k in 1..=MAX_ORDER {
            let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
            d[k] = sign * fact / x.powi(k as i32);
            fact *= k as f64;
        }
        Ok(self.compose(&d))
    }

    pub fn exp(&self) -> Jet {
        let e = self.value().exp();
        self.compose(&[e; MAX_ORDER + 1])
    }

    pub fn sin(&self) -> Jet {
        let (s, c) = self.value().sin_cos();
        self.compose(&[s, c, -s, -c, s])
    }

    pub fn cos(&self) -> Jet {
        let (s, c) = self.value().sin_cos();
        self.compose(&[c, -s, -c, s, c])
    }
}

fn taylor_mul(a: &[f64; MAX_LEN], b: &[f64; MAX_LEN], order: usize) -> [f64; MAX_LEN] {
    let t = tables();
    let mut r = [0.0; MAX_LEN];
    for s in 0..jet_len(order) {
        let (i, j) = t.multi[s];
        let mut acc = 0.0;
        for a1 in 0..=i {
            for b1 in 0..=j {
                acc += a[index(a1, b1)] * b[index(i - a1, j - b1)];
            }
        }
        r[s] = acc;
    }
    r
}

impl Add for Jet {
    type Output = Jet;
    fn add(self, rhs: Jet) -> Jet {
        let order = self.order().min(rhs.order());
        let mut r = Jet::zeroed(order);
        for s in 0..jet_len(order) {
            r.c[s] = self.c[s] + rhs.c[s];
        }
        r
    }
}

impl Sub for Jet {
    type Output = Jet;
    fn sub(self, rhs: Jet) -> Jet {
        self + (-rhs)
    }
}

impl Neg for Jet {
    type Output = Jet;
    fn neg(mut self) -> Jet {
        for v in self.c.iter_mut() {
            *v = -*v;
        }
        self
    }
}

impl Mul for Jet {
    type Output = Jet;
    /// Leibniz rule on raw partials.
    fn mul(self, rhs: Jet) -> Jet {
        let order = self.order().min(rhs.order());
        let t = tables();
        let mut r = Jet::zeroed(order);
        for s in 0..jet_len(order) {
            let (i, j) = t.multi[s];
            let mut acc = 0.0;
            for a in 0..=i {
                for b in 0..=j {
                    acc += t.binom[i][a] * t.binom[j][b] * self.c[index(a, b)] * rhs.c[index(i - a, j - b)];
                }
            }
            r.c[s] = acc;
        }
        r
    }
}

impl Div for Jet {
    type Output = Jet;
    /// Division by a zero-valued jet yields NaN coefficients; use [`Jet::try_div`] to detect it.
    #[allow(clippy::suspicious_arithmetic_impl)]
    fn div(self, rhs: Jet) -> Jet {
        self * rhs.recip()
    }
}

impl Add<f64> for Jet {
    type Output = Jet;
    fn add(mut self, rhs: f64) -> Jet {
        self.c[0] += rhs;
        self
    }
}

impl Sub<f64> for Jet {
    type Output = Jet;
    fn sub(mut self, rhs: f64) -> Jet {
        self.c[0] -= rhs;
        self
    }
}

impl Mul<f64> for Jet {
    type Output = Jet;
    fn mul(mut self, rhs: f64) -> Jet {
        for v in self.c.iter_mut() {
            *v *= rhs;
        }
        self
    }
}

impl Div<f64> for Jet {
    type Output = Jet;
    fn div(self, rhs: f64) -> Jet {
        self * (1.0 / rhs)
    }
}

impl Mul<Jet> for f64 {
    type Output = Jet;
    fn mul(self, rhs: Jet) -> Jet {
        rhs * self
    }
}

impl Add<Jet> for f64 {
    type Output = Jet;
    fn add(self, rhs: Jet) -> Jet {
        rhs + self
    }
}

impl Sub<Jet> for f64 {
    type Output = Jet;
    fn sub(self, rhs: Jet) -> Jet {
        -rhs + self
    }
}

impl AddAssign for Jet {
    fn add_assign(&mut self, rhs: Jet) {
        *self = *self + rhs;
    }
}

impl SubAssign for Jet {
    fn sub_assign(&mut self, rhs: Jet) {
        *self = *self - rhs;
    }
}

impl MulAssign for Jet {
    fn mul_assign(&mut self, rhs: Jet) {
        *self = *self * rhs;
    }
}

/// Three jets sharing a base point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JetVec3(pub [Jet; 3]);

impl JetVec3 {
    pub fn constant(v: [f64; 3], order: usize) -> JetVec3 {
        JetVec3(v.map(|x| Jet::constant(x, order)))
    }

    pub fn order(&self) -> usize {
        self.0.iter().map(Jet::order).min().unwrap_or(0)
    }

    pub fn value(&self) -> [f64; 3] {
        self.0.map(|j| j.value())
    }

    pub fn diff(&self, axis: usize) -> Result<JetVec3, JetError> {
        Ok(JetVec3([self.0[0].diff(axis)?, self.0[1].diff(axis)?, self.0[2].diff(axis)?]))
    }

    pub fn truncate(&self, order: usize) -> JetVec3 {
        JetVec3(self.0.map(|j| j.truncate(order)))
    }

    pub fn dot(&self, o: &JetVec3) -> Jet {
        self.0[0] * o.0[0] + self.0[1] * o.0[1] + self.0[2] * o.0[2]
    }

    pub fn cross(&self, o: &JetVec3) -> JetVec3 {
        let [a0, a1, a2] = self.0;
        let [b0, b1, b2] = o.0;
        JetVec3([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0])
    }

    pub fn scale(&self, s: Jet) -> JetVec3 {
        JetVec3(self.0.map(|j| j * s))
    }

    pub fn try_norm(&self) -> Result<Jet, JetError> {
        self.dot(self).try_sqrt()
    }

    pub fn try_normalize(&self) -> Result<JetVec3, JetError> {
        let inv = self.try_norm()?.try_recip()?;
        Ok(self.scale(inv))
    }

    /// `det(a, b, c)` as the triple product `a · (b × c)`.
    pub fn triple(a: &JetVec3, b: &JetVec3, c: &JetVec3) -> Jet {
        a.dot(&b.cross(c))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(Jet::is_finite)
    }
}

impl Add for JetVec3 {
    type Output = JetVec3;
    fn add(self, o: JetVec3) -> JetVec3 {
        JetVec3([self.0[0] + o.0[0], self.0[1] + o.0[1], self.0[2] + o.0[2]])
    }
}

impl Sub for JetVec3 {
    type Output = JetVec3;
    fn sub(self, o: JetVec3) -> JetVec3 {
        JetVec3([self.0[0] - o.0[0], self.0[1] - o.0[1], self.0[2] - o.0[2]])
    }
}

impl Neg for JetVec3 {
    type Output = JetVec3;
    fn neg(self) -> JetVec3 {
        JetVec3(self.0.map(|j| -j))
    }
}

impl Mul<f64> for JetVec3 {
    type Output = JetVec3;
    fn mul(self, s: f64) -> JetVec3 {
        JetVec3(self.0.map(|j| j * s))
    }
}

/// A 2×2 matrix of jets, `m[row][col]`.
pub type JetMat2 = [[Jet; 2]; 2];

pub fn mat2_constant(m: [[f64; 2]; 2], order: usize) -> JetMat2 {
    m.map(|r| r.map(|v| Jet::constant(v, order)))
}

pub fn mat2_value(m: &JetMat2) -> [[f64; 2]; 2] {
    m.map(|r| r.map(|v| v.value()))
}

pub fn mat2_det(m: &JetMat2) -> Jet {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

pub fn mat2_mul(a: &JetMat2, b: &JetMat2) -> JetMat2 {
    let e = |i: usize, j: usize| a[i][0] * b[0][j] + a[i][1] * b[1][j];
    [[e(0, 0), e(0, 1)], [e(1, 0), e(1, 1)]]
}

pub fn mat2_transpose(m: &JetMat2) -> JetMat2 {
    [[m[0][0], m[1][0]], [m[0][1], m[1][1]]]
}

pub fn mat2_try_inv(m: &JetMat2) -> Result<JetMat2, JetError> {
    let inv = mat2_det(m).try_recip()?;
    Ok([[m[1][1] * inv, -m[0][1] * inv], [-m[1][0] * inv, m[0][0] * inv]])
}

pub fn mat2_diff(m: &JetMat2, axis: usize) -> Result<JetMat2, JetError> {
    Ok([
        [m[0][0].diff(axis)?, m[0][1].diff(axis)?],
        [m[1][0].diff(axis)?, m[1][1].diff(axis)?],
    ])
}

/// Central-difference estimate of all partials up to `order`.
///
/// Each partial uses a tensor-product central stencil of spacing `step`
/// (error O(step²)), improved by one Richardson level against `step / 2`.
pub fn fd_jet<F: Fn(f64, f64) -> f64>(f: F, point: [f64; 2], order: usize, step: f64) -> Jet {
    let order = order.min(MAX_ORDER);
    let raw = |h: f64| {
        let mut j = Jet::zeroed(order);
        for s in 0..jet_len(order) {
            let (a, b) = tables().multi[s];
            let wa = central_stencil(a);
            let wb = central_stencil(b);
            let mut acc = 0.0;
            for &(oa, ca) in wa {
                for &(ob, cb) in wb {
                    acc += ca * cb * f(point[0] + oa * h, point[1] + ob * h);
                }
            }
            j.c[s] = acc / h.powi((a + b) as i32);
        }
        j
    };
    let coarse = raw(step);
    let fine = raw(step / 2.0);
    (fine * 4.0 - coarse) / 3.0
}

/// Offsets and weights of the second-order central stencil for the n-th derivative.
fn central_stencil(n: usize) -> &'static [(f64, f64)] {
    match n {
        0 => &[(0.0, 1.0)],
        1 => &[(1.0, 0.5), (-1.0, -0.5)],
        2 => &[(1.0, 1.0), (0.0, -2.0), (-1.0, 1.0)],
        3 => &[(2.0, 0.5), (1.0, -1.0), (-1.0, 1.0), (-2.0, -0.5)],
        _ => &[(2.0, 1.0), (1.0, -4.0), (0.0, 6.0), (-1.0, -4.0), (-2.0, 1.0)],
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureOptions {
    pub nodes: usize,
    pub max_nodes: usize,
    /// Relative change between successive node doublings accepted as converged.
    pub tol: f64,
}

impl Default for QuadratureOptions {
    fn default() -> Self {
        QuadratureOptions { nodes: 32, max_nodes: 512, tol: 1e-11 }
    }
}

/// Gauss–Legendre nodes and weights on [-1, 1], cached per node count.
pub fn gauss_legendre(n: usize) -> Arc<Vec<(f64, f64)>> {
    static CACHE: OnceLock<RwLock<HashMap<usize, Arc<Vec<(f64, f64)>>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(v) = cache.read().expect("quadrature cache poisoned").get(&n) {
        return v.clone();
    }
    let mut nodes = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 0 { 1.0 } else { p1 };
            let pn1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pn1) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes.push((x, 2.0 / ((1.0 - x * x) * dp * dp)));
    }
    let v = Arc::new(nodes);
    cache.write().expect("quadrature cache poisoned").insert(n, v.clone());
    v
}

/// `∫_lower^upper f(t) dt` as a jet in the base-point variables.
///
/// The integral is rewritten as `(s - a) ∫_0^1 f(a + (s - a)τ) dτ` with
/// `s = upper`, so `f` receives `t` as a jet and both the moving endpoint and
/// any parameters captured by `f` are differentiated exactly.
pub fn integrate_jet<F, E>(f: F, lower: f64, upper: &Jet, opts: &QuadratureOptions) -> Result<Jet, E>
where
    F: Fn(&Jet) -> Result<Jet, E>,
    E: From<JetError>,
{
    let len = *upper - lower;
    let rule = |n: usize| -> Result<Jet, E> {
        let mut acc: Option<Jet> = None;
        for &(x, w) in gauss_legendre(n).iter() {
            let tau = 0.5 * (x + 1.0);
            let t = len * tau + lower;
            let v = f(&t)? * (0.5 * w);
            acc = Some(match acc {
                Some(a) => a + v,
                None => v,
            });
        }
        Ok(acc.map(|a| a * len).unwrap_or_else(|| Jet::constant(0.0, upper.order())))
    };
    let mut n = opts.nodes.max(1);
    let mut prev = rule(n)?;
    loop {
        let next_n = n * 2;
        if next_n > opts.max_nodes.max(opts.nodes) {
            return Err(JetError::QuadratureNonConvergent { nodes: n, change: f64::NAN }.into());
        }
        let next = rule(next_n)?;
        let change = (next - prev).max_abs();
        if change <= opts.tol * (1.0 + next.max_abs()) {
            return Ok(next);
        }
        if next_n * 2 > opts.max_nodes {
            return Err(JetError::QuadratureNonConvergent { nodes: next_n, change }.into());
        }
        prev = next;
        n = next_n;
    }
}
