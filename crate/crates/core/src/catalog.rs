//! Named example frontals and the three generator families.
//!
//! Expression entries carry closed-form answers in two flavours: `printed`
//! as published, and the verified value used by the tests when the two
//! differ.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::expr::{parse, Expr, ExprError, JetEnv, Var};
use crate::frame::{ExprFrontal, FrameError, FrontalJets, FrontalSource, Frontal, Grid, Origin, Rect};
use crate::jets::{integrate_jet, Jet, JetVec3, QuadratureOptions, MAX_ORDER};

/// Closed-form answers attached to an entry.
#[derive(Debug, Clone, Default)]
pub struct KnownAnswers {
    pub lambda_omega: Option<Expr>,
    pub gauss_printed: Option<Expr>,
    pub gauss: Option<Expr>,
    pub blaschke_printed: Option<[Expr; 3]>,
    pub blaschke: Option<[Expr; 3]>,
}

/// How an entry's frontal is built.
#[derive(Debug, Clone)]
pub enum Recipe {
    Expressions { x: [Expr; 3], w1: [Expr; 3], w2: [Expr; 3], lambda: [Expr; 4] },
    /// Rank-one wave front from `h` with `h_u1u1 + c h_u2u2 = 0`.
    Rank1 { h: Expr, c: Expr },
    /// Rank-one frontal with extendable normal curvature from `b`, `h`, `l(t)`, `r(t)`.
    Representation { b: Expr, h: Expr, l: Expr, r: Expr },
    /// Non-parabolic frontal from `a`, `b` with `a_u2 = b_u1`.
    NonParabolic { a: Expr, b: Expr },
}

#[derive(Debug, Clone)]
pub struct CatalogEntry {
    pub name: String,
    pub summary: String,
    pub recipe: Recipe,
    pub domain: Rect,
    /// Where the Blaschke field exists (non-vanishing curvature).
    pub blaschke_domain: Rect,
    pub known: KnownAnswers,
}

#[derive(Debug, thiserror::Error)]
pub enum CatalogError {
    #[error("unknown catalog entry '{0}'")]
    Unknown(String),
    #[error("generator '{generator}' needs parameter '{param}'")]
    MissingParameter { generator: String, param: &'static str },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Frame(#[from] FrameError),
}

fn e(s: &str) -> Expr {
    parse(s).unwrap_or_else(|err| panic!("built-in expression '{s}': {err}"))
}

fn e3(s: [&str; 3]) -> [Expr; 3] {
    s.map(e)
}

fn e4(s: [&str; 4]) -> [Expr; 4] {
    s.map(e)
}

fn square() -> Rect {
    Rect::new((-1.0, 1.0), (-1.0, 1.0))
}

fn cuspidal_cross_cap() -> CatalogEntry {
    let rho = "(54*u1^4*u2^4 + 9*u1^2*u2^5 + 4*u2^6 + 54*u1^2*u2^2 + 12*u2^3 + 9)";
    let rho74 = format!("({rho}*sqrt({rho})*sqrt(sqrt({rho})))");
    let p1 = "(216*u1^6*u2^4 - 189*u1^4*u2^5 + 66*u1^2*u2^6 + 16*u2^7 + 324*u1^4*u2^2 + 9*u1^2*u2^3 + 48*u2^4 + 108*u1^2 + 36*u2)";
    let p2 = "((216*u1^4*u2^4 + 87*u1^2*u2^5 - 16*u2^6 + 252*u1^2*u2^2 + 24*u2^3 + 72)*u2^2)";
    let p3 = "(145800*u1^8*u2^8 + 35721*u1^6*u2^9 + 25326*u1^4*u2^10 + 4896*u1^2*u2^11 + 277020*u1^6*u2^6 + 896*u2^12 \
              + 114129*u1^4*u2^7 + 39204*u1^2*u2^8 + 5088*u2^9 + 179820*u1^4*u2^4 + 88938*u1^2*u2^5 + 12096*u2^6 \
              + 48600*u1^2*u2^2 + 14040*u2^3 + 6480)";
    let mu = "(2025*u1^4*u2^8 + 720*u1^2*u2^9 + 900*u1^6*u2^4 + 64*u2^10 + 1200*u1^4*u2^5 + 3100*u1^2*u2^6 \
              + 480*u2^7 + 1800*u1^4*u2^2 + 1200*u1^2*u2^3 + 900*u2^4 + 900*u1^2 + 900)";
    let c1 = format!("-3*sqrt(3)/8*{p1}/{rho74}");
    let c2 = format!("9*sqrt(3)/8*{p2}/{rho74}");
    let c2_fixed = format!("-u1*9*sqrt(3)/8*{p2}/{rho74}");
    let c3 = format!("sqrt(3)/240*{p3}/{rho74}");
    CatalogEntry {
        name: "ex-5.8".into(),
        summary: "cuspidal cross cap type frontal, singular along u2 = 0".into(),
        recipe: Recipe::Expressions {
            x: e3(["u1", "u2^2", "4/15*u1*u2^5 + 1/2*u1^3*u2^4 + u1*u2^2"]),
            w1: e3(["1", "0", "u2^2*(4/15*u2^3 + 3/2*u1^2*u2^2 + 1)"]),
            w2: e3(["0", "1", "1/3*u1*(3*u1^2*u2^2 + 2*u2^3 + 3)"]),
            lambda: e4(["1", "0", "0", "2*u2"]),
        },
        domain: Rect::new((-1.0, 1.0), (-4.0, 4.0)),
        blaschke_domain: square(),
        known: KnownAnswers {
            lambda_omega: Some(e("2*u2")),
            gauss_printed: Some(e(&format!("90000*{rho}/{mu}^2"))),
            gauss: Some(e(&format!("-90000*{rho}/{mu}^2"))),
            blaschke_printed: Some([e(&c1), e(&c2), e(&c3)]),
            blaschke: Some([e(&c1), e(&c2_fixed), e(&c3)]),
        },
    }
}

fn cuspidal_edge() -> CatalogEntry {
    let den = "(u2^10 + 2*u2^7 + u2^6 + u2^4 + 2*u2^3 + u1^2 + 1)";
    let num = "(u2 + 1)^2*(u2^2 - u2 + 1)^2";
    let printed_den = "(4*(u2^2 + u2 + 1)*sqrt(u2^2 + u2 + 1)*(u2 + 1)*sqrt(u2 + 1))";
    let den_fixed = "(4*(u2^3 + 1)*sqrt(u2^3 + 1))";
    CatalogEntry {
        name: "ex-5.9".into(),
        summary: "frontal with cuspidal edge along u2 = 0".into(),
        recipe: Recipe::Expressions {
            x: e3(["u1", "2/5*u2^5 + u2^2", "u1*u2^2"]),
            w1: e3(["1", "0", "u2^2"]),
            w2: e3(["0", "u2^3 + 1", "u1"]),
            lambda: e4(["1", "0", "0", "2*u2"]),
        },
        domain: Rect::new((-1.0, 1.0), (-0.9, 0.9)),
        blaschke_domain: Rect::new((-1.0, 1.0), (-0.6, 0.6)),
        known: KnownAnswers {
            lambda_omega: Some(e("2*u2")),
            gauss_printed: Some(e(&format!("{num}/{den}^2"))),
            gauss: Some(e(&format!("-{num}/{den}^2"))),
            blaschke_printed: Some([
                e(&format!("3*u2/{printed_den}")),
                e("0"),
                e(&format!("(7*u2^3 + 4)/{printed_den}")),
            ]),
            blaschke: Some([e(&format!("3*u2/{den_fixed}")), e("0"), e(&format!("(7*u2^3 + 4)/{den_fixed}"))]),
        },
    }
}

fn rank1_improper_sphere() -> CatalogEntry {
    let den = "(16*u1^6 - 96*u1^4*u2^2 + 144*u1^2*u2^4 + u2^2 + 1)";
    CatalogEntry {
        name: "ex-5.10".into(),
        summary: "rank-one wave front, improper affine sphere, singular on u2 = ±u1".into(),
        recipe: Recipe::Expressions {
            x: e3(["u1", "12*u1^2*u2 - 4*u2^3", "u1^4 + 6*u1^2*u2^2 - 3*u2^4"]),
            w1: e3(["1", "24*u1*u2", "4*u1^3 + 12*u1*u2^2"]),
            w2: e3(["0", "1", "u2"]),
            lambda: e4(["1", "0", "0", "12*u1^2 - 12*u2^2"]),
        },
        domain: square(),
        blaschke_domain: square(),
        known: KnownAnswers {
            lambda_omega: Some(e("12*u1^2 - 12*u2^2")),
            gauss_printed: Some(e(&format!("-1/{den}^2"))),
            gauss: Some(e(&format!("1/{den}^2"))),
            blaschke_printed: Some(e3(["0", "0", "1"])),
            blaschke: Some(e3(["0", "0", "1"])),
        },
    }
}

fn paraboloid() -> CatalogEntry {
    CatalogEntry {
        name: "paraboloid".into(),
        summary: "elliptic paraboloid, regular improper affine sphere".into(),
        recipe: Recipe::Expressions {
            x: e3(["u1", "u2", "(u1^2 + u2^2)/2"]),
            w1: e3(["1", "0", "u1"]),
            w2: e3(["0", "1", "u2"]),
            lambda: e4(["1", "0", "0", "1"]),
        },
        domain: square(),
        blaschke_domain: square(),
        known: KnownAnswers {
            lambda_omega: Some(e("1")),
            gauss: Some(e("1/(1 + u1^2 + u2^2)^2")),
            blaschke: Some(e3(["0", "0", "1"])),
            ..KnownAnswers::default()
        },
    }
}

fn plane() -> CatalogEntry {
    CatalogEntry {
        name: "plane".into(),
        summary: "coordinate plane, parabolic everywhere".into(),
        recipe: Recipe::Expressions {
            x: e3(["u1", "u2", "0"]),
            w1: e3(["1", "0", "0"]),
            w2: e3(["0", "1", "0"]),
            lambda: e4(["1", "0", "0", "1"]),
        },
        domain: square(),
        blaschke_domain: square(),
        known: KnownAnswers { lambda_omega: Some(e("1")), gauss: Some(e("0")), ..KnownAnswers::default() },
    }
}

/// All fixed entries, in listing order.
pub fn entries() -> Vec<CatalogEntry> {
    vec![cuspidal_cross_cap(), cuspidal_edge(), rank1_improper_sphere(), paraboloid(), plane()]
}

pub fn entry(name: &str) -> Result<CatalogEntry, CatalogError> {
    entries().into_iter().find(|e| e.name == name).ok_or_else(|| CatalogError::Unknown(name.into()))
}

/// Names accepted by [`generate`].
pub const GENERATORS: [&str; 3] = ["gen-rank1-wavefront", "gen-representation", "gen-nonparabolic"];

fn param(params: &BTreeMap<String, String>, generator: &str, key: &'static str) -> Result<Expr, CatalogError> {
    let s = params
        .get(key)
        .ok_or_else(|| CatalogError::MissingParameter { generator: generator.into(), param: key })?;
    Ok(parse(s)?)
}

/// Builds a generator entry; `params` maps parameter names to expressions.
pub fn generate(generator: &str, params: &BTreeMap<String, String>, domain: Option<Rect>) -> Result<CatalogEntry, CatalogError> {
    let domain = domain.unwrap_or_else(square);
    let p = |k| param(params, generator, k);
    let (recipe, summary, known) = match generator {
        "gen-rank1-wavefront" => {
            let (h, c) = (p("h")?, p("c")?);
            check_rank1_pde(&h, &c, domain)?;
            let known = rank1_known(&h, &c);
            (Recipe::Rank1 { h, c }, "rank-one wave front from h, c".to_string(), known)
        }
        "gen-representation" => {
            let r = params.get("r").map(|s| parse(s)).transpose()?.unwrap_or(Expr::Const(0.0));
            let l = params.get("l").map(|s| parse(s)).transpose()?.unwrap_or(Expr::Const(1.0));
            let (b, h) = (p("b")?, p("h")?);
            let known = KnownAnswers { lambda_omega: Some(b.derivative(Var::U2)), ..KnownAnswers::default() };
            (Recipe::Representation { b, h, l, r }, "rank-one frontal from b, h, l, r".to_string(), known)
        }
        "gen-nonparabolic" => {
            let (a, b) = (p("a")?, p("b")?);
            check_symmetric(&a, &b, domain)?;
            let lam = Expr::Bin(
                crate::expr::BinOp::Sub,
                Box::new(Expr::Bin(crate::expr::BinOp::Mul, Box::new(a.derivative(Var::U1)), Box::new(b.derivative(Var::U2)))),
                Box::new(Expr::Bin(crate::expr::BinOp::Mul, Box::new(b.derivative(Var::U1)), Box::new(a.derivative(Var::U2)))),
            );
            let known = KnownAnswers { lambda_omega: Some(lam), ..KnownAnswers::default() };
            (Recipe::NonParabolic { a, b }, "non-parabolic frontal from a, b".to_string(), known)
        }
        other => return Err(CatalogError::Unknown(other.into())),
    };
    Ok(CatalogEntry { name: generator.into(), summary, recipe, domain, blaschke_domain: domain, known })
}

fn check_rank1_pde(h: &Expr, c: &Expr, domain: Rect) -> Result<(), CatalogError> {
    let h11 = h.derivative(Var::U1).derivative(Var::U1);
    let h22 = h.derivative(Var::U2).derivative(Var::U2);
    for u in Grid::new(11, 11).points(&domain) {
        let (a, b, cv) = (h11.eval(u[0], u[1], None)?, h22.eval(u[0], u[1], None)?, c.eval(u[0], u[1], None)?);
        if (a + cv * b).abs() > 1e-9 * (1.0 + a.abs() + (cv * b).abs()) {
            return Err(CatalogError::Invalid(format!(
                "h_u1u1 + c h_u2u2 = {:e} at ({}, {}); h must solve the PDE",
                a + cv * b,
                u[0],
                u[1]
            )));
        }
    }
    Ok(())
}

fn check_symmetric(a: &Expr, b: &Expr, domain: Rect) -> Result<(), CatalogError> {
    let (a2, b1) = (a.derivative(Var::U2), b.derivative(Var::U1));
    for u in Grid::new(11, 11).points(&domain) {
        let d = a2.eval(u[0], u[1], None)? - b1.eval(u[0], u[1], None)?;
        if d.abs() > 1e-9 {
            return Err(CatalogError::Invalid(format!("a_u2 - b_u1 = {d:e} at ({}, {}); need a_u2 = b_u1", u[0], u[1])));
        }
    }
    Ok(())
}

fn rank1_known(h: &Expr, c: &Expr) -> KnownAnswers {
    let (hu1, hu2) = (h.derivative(Var::U1), h.derivative(Var::U2));
    let (h11, h12, h22) = (hu1.derivative(Var::U1), hu1.derivative(Var::U2), hu2.derivative(Var::U2));
    let (c1, c2) = (c.derivative(Var::U1), c.derivative(Var::U2));
    let den = format!("(sqrt({c})*sqrt(sqrt({c}))*{h11})");
    let xi = [
        format!("-1/4*{c1}/{den}"),
        format!("-1/4*({c2}*{h11} - {c1}*{h12})/{den}"),
        format!("1/4*(-u2*{c2}*{h11} + u2*{c1}*{h12} + 4*{c}*{h11} - {c1}*{hu1})/{den}"),
    ];
    let q = format!("(1 + {hu1}^2 + u2^2)^2");
    KnownAnswers {
        lambda_omega: Some(e(&format!("-{h22}"))),
        gauss_printed: Some(e(&format!("-{c}/{q}"))),
        gauss: Some(e(&format!("{c}/{q}"))),
        blaschke_printed: Some(xi.clone().map(|s| e(&s))),
        blaschke: Some(xi.map(|s| e(&s))),
    }
}

impl CatalogEntry {
    /// The frontal, checked for rank and decomposition on an 11×11 grid.
    pub fn load(&self, cfg: &Config) -> Result<Frontal, CatalogError> {
        let f = self.frontal(cfg);
        f.validate(Grid::new(11, 11), cfg)?;
        Ok(f)
    }

    /// The frontal without load-time validation.
    pub fn frontal(&self, cfg: &Config) -> Frontal {
        let q = cfg.quadrature();
        let source: Arc<dyn FrontalSource> = match &self.recipe {
            Recipe::Expressions { x, w1, w2, lambda } => Arc::new(ExprFrontal {
                x: x.clone(),
                w1: w1.clone(),
                w2: w2.clone(),
                lambda: Some(lambda.clone()),
                cfg: cfg.clone(),
            }),
            Recipe::Rank1 { h, .. } => Arc::new(Rank1Source::new(h, q)),
            Recipe::Representation { b, h, l, r } => Arc::new(RepresentationSource::new(b, h, l, r, q)),
            Recipe::NonParabolic { a, b } => Arc::new(NonParabolicSource::new(a, b, q)),
        };
        Frontal::new(self.name.clone(), self.domain, Origin::Catalog, source)
    }

    /// The frontal restricted to its Blaschke domain.
    pub fn blaschke_frontal(&self, cfg: &Config) -> Frontal {
        self.frontal(cfg).with_domain(self.blaschke_domain)
    }

    pub fn describe(&self) -> EntryDescription {
        let mut definition = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            definition.insert(k.to_string(), v);
        };
        let v3 = |v: &[Expr; 3]| format!("({}, {}, {})", v[0], v[1], v[2]);
        match &self.recipe {
            Recipe::Expressions { x, w1, w2, lambda } => {
                put("x", v3(x));
                put("w1", v3(w1));
                put("w2", v3(w2));
                put("Lambda", format!("[[{}, {}], [{}, {}]]", lambda[0], lambda[1], lambda[2], lambda[3]));
            }
            Recipe::Rank1 { h, c } => {
                put("h", h.to_string());
                put("c", c.to_string());
            }
            Recipe::Representation { b, h, l, r } => {
                put("b", b.to_string());
                put("h", h.to_string());
                put("l", l.to_string());
                put("r", r.to_string());
            }
            Recipe::NonParabolic { a, b } => {
                put("a", a.to_string());
                put("b", b.to_string());
            }
        }
        let mut known = BTreeMap::new();
        let k = &self.known;
        for (name, v) in [("lambda_omega", &k.lambda_omega), ("gauss", &k.gauss), ("gauss_printed", &k.gauss_printed)] {
            if let Some(v) = v {
                known.insert(name.to_string(), v.to_string());
            }
        }
        for (name, v) in [("blaschke", &k.blaschke), ("blaschke_printed", &k.blaschke_printed)] {
            if let Some(v) = v {
                known.insert(name.to_string(), v3(v));
            }
        }
        EntryDescription {
            name: self.name.clone(),
            summary: self.summary.clone(),
            domain: self.domain,
            blaschke_domain: self.blaschke_domain,
            definition,
            known,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryDescription {
    pub name: String,
    pub summary: String,
    pub domain: Rect,
    pub blaschke_domain: Rect,
    pub definition: BTreeMap<String, String>,
    pub known: BTreeMap<String, String>,
}

fn env(u1: Jet, u2: Jet) -> JetEnv {
    JetEnv { u1, u2, t: None }
}

fn coords(u: [f64; 2], order: usize) -> (Jet, Jet) {
    (Jet::var(u[0], 0, order), Jet::var(u[1], 1, order))
}

fn vec3(a: Jet, b: Jet, c: Jet) -> JetVec3 {
    JetVec3([a, b, c])
}

/// `y = (u1, −h_u2, ∫₀^{u1} (h_u1 − u2 h_u2u1)(t, u2) dt − ∫₀^{u2} t h_u2u2(0, t) dt)`.
struct Rank1Source {
    hu1: Expr,
    hu2: Expr,
    hu2u1: Expr,
    hu2u2: Expr,
    quad: QuadratureOptions,
}

impl Rank1Source {
    fn new(h: &Expr, quad: QuadratureOptions) -> Rank1Source {
        let hu2 = h.derivative(Var::U2);
        Rank1Source {
            hu1: h.derivative(Var::U1),
            hu2u1: hu2.derivative(Var::U1),
            hu2u2: hu2.derivative(Var::U2),
            hu2,
            quad,
        }
    }
}

impl FrontalSource for Rank1Source {
    fn eval(&self, u: [f64; 2], order: usize) -> Result<FrontalJets, FrameError> {
        let (u1, u2) = coords(u, order);
        let i1 = integrate_jet(
            |t: &Jet| -> Result<Jet, ExprError> {
                let en = env(*t, u2);
                Ok(self.hu1.eval_jets(&en)? - u2 * self.hu2u1.eval_jets(&en)?)
            },
            0.0,
            &u1,
            &self.quad,
        )?;
        let zero = Jet::constant(0.0, order);
        let i2 = integrate_jet(|t: &Jet| Ok::<_, ExprError>(*t * self.hu2u2.eval_jets(&env(zero, *t))?), 0.0, &u2, &self.quad)?;
        let here = env(u1, u2);
        let one = Jet::constant(1.0, order);
        Ok(FrontalJets {
            x: vec3(u1, -self.hu2.eval_jets(&here)?, i1 - i2),
            w1: vec3(one, zero, self.hu1.eval_jets(&here)?),
            w2: vec3(zero, one, u2),
            lambda: [[one, -self.hu2u1.eval_jets(&here)?], [zero, -self.hu2u2.eval_jets(&here)?]],
        })
    }
}

/// `y = (u1, b, z)` with `z` the four-term iterated integral in `b`, `h`, `l`, `r`.
///
/// Integration by parts turns each iterated integral into a single one:
/// with `H(u1, s) = ∫₀^s h b_u2 dt` and `L(s) = ∫₀^s l`,
/// `z = H b − ∫₀^{u2} h b b_u2 dt + L (b − b(u1, 0)) + L b(u1, 0) − ∫₀^{u1} l(t) b(t, 0) dt + ∫₀^{u1} (u1 − t) r(t) dt`.
struct RepresentationSource {
    b: Expr,
    bu1: Expr,
    bu2: Expr,
    h: Expr,
    l: Expr,
    r: Expr,
    quad: QuadratureOptions,
}

impl RepresentationSource {
    fn new(b: &Expr, h: &Expr, l: &Expr, r: &Expr, quad: QuadratureOptions) -> RepresentationSource {
        RepresentationSource {
            b: b.clone(),
            bu1: b.derivative(Var::U1),
            bu2: b.derivative(Var::U2),
            h: h.clone(),
            l: l.clone(),
            r: r.clone(),
            quad,
        }
    }

    /// `(z, H + L)` as jets of the given order.
    fn parts(&self, u: [f64; 2], order: usize) -> Result<(Jet, Jet), ExprError> {
        let (u1, u2) = coords(u, order);
        let zero = Jet::constant(0.0, order);
        let of_t = |e: &Expr, t: &Jet| e.eval_jets(&JetEnv { u1: *t, u2: *t, t: Some(*t) });
        let hh = integrate_jet(|t: &Jet| Ok::<_, ExprError>(self.h.eval_jets(&env(u1, *t))? * self.bu2.eval_jets(&env(u1, *t))?), 0.0, &u2, &self.quad)?;
        let hbb = integrate_jet(
            |t: &Jet| {
                let en = env(u1, *t);
                Ok::<_, ExprError>(self.h.eval_jets(&en)? * self.b.eval_jets(&en)? * self.bu2.eval_jets(&en)?)
            },
            0.0,
            &u2,
            &self.quad,
        )?;
        let ll = integrate_jet(|t: &Jet| of_t(&self.l, t), 0.0, &u1, &self.quad)?;
        let lb0 = integrate_jet(|t: &Jet| Ok::<_, ExprError>(of_t(&self.l, t)? * self.b.eval_jets(&env(*t, zero))?), 0.0, &u1, &self.quad)?;
        let rr = integrate_jet(|t: &Jet| Ok::<_, ExprError>((u1 - *t) * of_t(&self.r, t)?), 0.0, &u1, &self.quad)?;
        let b = self.b.eval_jets(&env(u1, u2))?;
        let z = hh * b - hbb + ll * b - lb0 + rr;
        Ok((z, hh + ll))
    }
}

impl FrontalSource for RepresentationSource {
    fn eval(&self, u: [f64; 2], order: usize) -> Result<FrontalJets, FrameError> {
        let (u1, u2) = coords(u, order);
        let (z_hi, _) = self.parts(u, (order + 1).min(MAX_ORDER))?;
        let (_, w23) = self.parts(u, order)?;
        let here = env(u1, u2);
        let (bu1, bu2) = (self.bu1.eval_jets(&here)?, self.bu2.eval_jets(&here)?);
        let (zero, one) = (Jet::constant(0.0, order), Jet::constant(1.0, order));
        Ok(FrontalJets {
            x: vec3(u1, self.b.eval_jets(&here)?, z_hi.truncate(order)),
            w1: vec3(one, zero, z_hi.diff(0)?.truncate(order) - bu1 * w23),
            w2: vec3(zero, one, w23),
            lambda: [[one, bu1], [zero, bu2]],
        })
    }
}

/// `y = (a, b, ∫₀^{u1} (t a_u1 + u2 b_u1)(t, u2) dt + ∫₀^{u2} t b_u2(0, t) dt)`.
struct NonParabolicSource {
    a: Expr,
    b: Expr,
    au1: Expr,
    au2: Expr,
    bu1: Expr,
    bu2: Expr,
    quad: QuadratureOptions,
}

impl NonParabolicSource {
    fn new(a: &Expr, b: &Expr, quad: QuadratureOptions) -> NonParabolicSource {
        NonParabolicSource {
            a: a.clone(),
            b: b.clone(),
            au1: a.derivative(Var::U1),
            au2: a.derivative(Var::U2),
            bu1: b.derivative(Var::U1),
            bu2: b.derivative(Var::U2),
            quad,
        }
    }
}

impl FrontalSource for NonParabolicSource {
    fn eval(&self, u: [f64; 2], order: usize) -> Result<FrontalJets, FrameError> {
        let (u1, u2) = coords(u, order);
        let zero = Jet::constant(0.0, order);
        let i1 = integrate_jet(
            |t: &Jet| {
                let en = env(*t, u2);
                Ok::<_, ExprError>(*t * self.au1.eval_jets(&en)? + u2 * self.bu1.eval_jets(&en)?)
            },
            0.0,
            &u1,
            &self.quad,
        )?;
        let i2 = integrate_jet(|t: &Jet| Ok::<_, ExprError>(*t * self.bu2.eval_jets(&env(zero, *t))?), 0.0, &u2, &self.quad)?;
        let here = env(u1, u2);
        let one = Jet::constant(1.0, order);
        Ok(FrontalJets {
            x: vec3(self.a.eval_jets(&here)?, self.b.eval_jets(&here)?, i1 + i2),
            w1: vec3(one, zero, u1),
            w2: vec3(zero, one, u2),
            lambda: [
                [self.au1.eval_jets(&here)?, self.bu1.eval_jets(&here)?],
                [self.au2.eval_jets(&here)?, self.bu2.eval_jets(&here)?],
            ],
        })
    }
}

/// A user frontal as JSON: expressions for `x`, Ω and optionally Λ (row-major).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrontalFile {
    #[serde(default = "user_name")]
    pub name: String,
    pub domain: Rect,
    pub x: [String; 3],
    pub w1: [String; 3],
    pub w2: [String; 3],
    #[serde(default, rename = "Lambda")]
    pub lambda: Option<[String; 4]>,
}

fn user_name() -> String {
    "user".into()
}

impl FrontalFile {
    pub fn from_json(text: &str) -> Result<FrontalFile, CatalogError> {
        serde_json::from_str(text).map_err(|e| CatalogError::Invalid(format!("frontal file: {e}")))
    }

    /// Parses the expressions, probes `abs` signs and validates the decomposition.
    pub fn load(&self, cfg: &Config) -> Result<Frontal, CatalogError> {
        let (u1, u2) = (self.domain.u1, self.domain.u2);
        if !(u1.0 < u1.1 && u2.0 < u2.1) {
            return Err(CatalogError::Invalid("domain bounds must be increasing".into()));
        }
        let p = |s: &String| -> Result<Expr, CatalogError> {
            let e = parse(s)?;
            e.check_abs_sign(u1, u2)?;
            Ok(e)
        };
        let p3 = |v: &[String; 3]| -> Result<[Expr; 3], CatalogError> { Ok([p(&v[0])?, p(&v[1])?, p(&v[2])?]) };
        let lambda = match &self.lambda {
            Some(l) => Some([p(&l[0])?, p(&l[1])?, p(&l[2])?, p(&l[3])?]),
            None => None,
        };
        let src = ExprFrontal { x: p3(&self.x)?, w1: p3(&self.w1)?, w2: p3(&self.w2)?, lambda, cfg: cfg.clone() };
        let f = Frontal::new(self.name.clone(), self.domain, Origin::User, Arc::new(src));
        f.validate(Grid::new(11, 11), cfg)?;
        Ok(f)
    }
}
