use frontal_core::expr::{parse, BinOp, Expr, ExprError, Func, JetEnv, Var};
use frontal_core::jets::{fd_jet, integrate_jet, jet_len, Jet, JetError, QuadratureOptions, MAX_ORDER};
use proptest::prelude::*;

fn jet(order: usize) -> impl Strategy<Value = Jet> {
    prop::collection::vec(-2.0..2.0f64, jet_len(order)).prop_map(move |c| Jet::from_coeffs(order, &c))
}

fn triple() -> impl Strategy<Value = (Jet, Jet, Jet)> {
    (0..=MAX_ORDER).prop_flat_map(|n| (jet(n), jet(n), jet(n)))
}

fn close(a: Jet, b: Jet, tol: f64) -> Result<(), TestCaseError> {
    let scale = 1.0 + a.max_abs().max(b.max_abs());
    let err = (a - b).max_abs();
    prop_assert!(err <= tol * scale, "{a:?} vs {b:?}: {err:e}");
    Ok(())
}

fn bx(e: Expr) -> Box<Expr> {
    Box::new(e)
}

/// Smooth expressions in `u1`, `u2`: polynomials, sin, cos and exp.
fn smooth_expr() -> impl Strategy<Value = Expr> {
    let leaf = prop_oneof![
        (-2.0..2.0f64).prop_map(Expr::Const),
        Just(Expr::Var(Var::U1)),
        Just(Expr::Var(Var::U2)),
    ];
    leaf.prop_recursive(3, 16, 2, |inner| {
        prop_oneof![
            inner.clone().prop_map(|a| Expr::Neg(bx(a))),
            (prop_oneof![Just(Func::Sin), Just(Func::Cos), Just(Func::Exp)], inner.clone())
                .prop_map(|(g, a)| Expr::Func(g, bx(a))),
            (prop_oneof![Just(BinOp::Add), Just(BinOp::Sub), Just(BinOp::Mul)], inner.clone(), inner.clone())
                .prop_map(|(op, a, b)| Expr::Bin(op, bx(a), bx(b))),
            (inner, 0..4i32).prop_map(|(a, n)| Expr::Pow(bx(a), n)),
        ]
    })
}

/// Any tree the grammar can express, including `t`, division, roots and negative powers.
fn any_expr() -> impl Strategy<Value = Expr> {
    let leaf = prop_oneof![
        any::<f64>().prop_filter("finite", |v| v.is_finite()).prop_map(Expr::Const),
        Just(Expr::Var(Var::U1)),
        Just(Expr::Var(Var::U2)),
        Just(Expr::Var(Var::T)),
    ];
    leaf.prop_recursive(4, 24, 2, |inner| {
        let func = prop_oneof![Just(Func::Sin), Just(Func::Cos), Just(Func::Exp), Just(Func::Sqrt), Just(Func::Abs)];
        let op = prop_oneof![Just(BinOp::Add), Just(BinOp::Sub), Just(BinOp::Mul), Just(BinOp::Div)];
        prop_oneof![
            inner.clone().prop_map(|a| Expr::Neg(bx(a))),
            (func, inner.clone()).prop_map(|(g, a)| Expr::Func(g, bx(a))),
            (op, inner.clone(), inner.clone()).prop_map(|(op, a, b)| Expr::Bin(op, bx(a), bx(b))),
            (inner, -4..6i32).prop_map(|(a, n)| Expr::Pow(bx(a), n)),
        ]
    })
}

/// Independent scalar evaluator over the AST.
fn plain(e: &Expr, u: [f64; 2]) -> f64 {
    match e {
        Expr::Const(v) => *v,
        Expr::Var(Var::U1) => u[0],
        Expr::Var(Var::U2) => u[1],
        Expr::Var(Var::T) => unreachable!(),
        Expr::Neg(a) => -plain(a, u),
        Expr::Func(g, a) => {
            let x = plain(a, u);
            match g {
                Func::Sin => x.sin(),
                Func::Cos => x.cos(),
                Func::Exp => x.exp(),
                Func::Sqrt => x.sqrt(),
                Func::Abs => x.abs(),
            }
        }
        Expr::Bin(op, a, b) => {
            let (x, y) = (plain(a, u), plain(b, u));
            match op {
                BinOp::Add => x + y,
                BinOp::Sub => x - y,
                BinOp::Mul => x * y,
                BinOp::Div => x / y,
            }
        }
        Expr::Pow(a, n) => plain(a, u).powi(*n),
    }
}

proptest! {
    #[test]
    fn multiplication_is_associative((a, b, c) in triple()) {
        close((a * b) * c, a * (b * c), 1e-12)?;
    }

    #[test]
    fn multiplication_distributes((a, b, c) in triple()) {
        close(a * (b + c), a * b + a * c, 1e-12)?;
        close((a + b) * c, a * c + b * c, 1e-12)?;
    }

    #[test]
    fn addition_and_multiplication_commute((a, b, _c) in triple()) {
        close(a * b, b * a, 1e-15)?;
        close(a + b, b + a, 0.0)?;
    }

    #[test]
    fn product_rule_holds_coefficientwise(
        (f, g) in (1..=MAX_ORDER).prop_flat_map(|n| (jet(n), jet(n))),
        axis in 0..2usize,
    ) {
        let lhs = (f * g).diff(axis).unwrap();
        let rhs = f.diff(axis).unwrap() * g + f * g.diff(axis).unwrap();
        prop_assert_eq!(lhs.order(), rhs.order());
        close(lhs, rhs, 1e-13)?;
    }

    #[test]
    fn printed_trees_parse_back(e in any_expr()) {
        let text = e.to_string();
        prop_assert_eq!(parse(&text).unwrap(), e, "{}", text);
    }

    #[test]
    fn order_zero_jet_equals_plain_evaluation(e in smooth_expr(), u1 in -1.0..1.0f64, u2 in -1.0..1.0f64) {
        let j = e.eval_jet([u1, u2], 0).unwrap().value();
        let p = plain(&e, [u1, u2]);
        prop_assert!((j - p).abs() <= 1e-14 * (1.0 + p.abs()), "{e}: {j} vs {p}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn parsed_jets_match_finite_differences(
        e in smooth_expr(),
        u1 in -1.0..1.0f64,
        u2 in -1.0..1.0f64,
        order in 1..=3usize,
    ) {
        let parsed = parse(&e.to_string()).unwrap();
        let exact = parsed.eval_jet([u1, u2], order).unwrap();
        let fd = fd_jet(|a, b| plain(&e, [a, b]), [u1, u2], order, 1e-3);
        let tol = [0.0, 1e-8, 1e-6, 1e-4][order];
        close(exact, fd, tol)?;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn integral_of_a_derivative_is_the_endpoint_difference(
        e in smooth_expr(),
        lower in -1.0..1.0f64,
        s in -1.0..1.0f64,
        u2 in -1.0..1.0f64,
        order in 0..=3usize,
    ) {
        // F(t, u2) with u1 replaced by t; the integrand is ∂F/∂t.
        let with_t = parse(&e.to_string().replace("u1", "t")).unwrap();
        let dt = with_t.derivative(Var::T);
        let u2j = Jet::var(u2, 1, order);
        let env = |t: &Jet| JetEnv { u1: Jet::constant(0.0, order), u2: u2j, t: Some(*t) };
        let upper = Jet::var(s, 0, order);
        let got = integrate_jet(
            |t: &Jet| dt.eval_jets(&env(t)),
            lower,
            &upper,
            &QuadratureOptions::default(),
        );
        let got = match got {
            Ok(j) => j,
            Err(ExprError::Jet(JetError::QuadratureNonConvergent { .. })) => return Err(TestCaseError::reject("stiff integrand")),
            Err(other) => panic!("{other}"),
        };
        let want = with_t.eval_jets(&env(&upper)).unwrap() - with_t.eval_jets(&env(&Jet::constant(lower, order))).unwrap();
        close(got, want, 1e-9)?;
    }
}
