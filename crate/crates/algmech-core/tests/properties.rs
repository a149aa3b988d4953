//! Property tests for the expression layer: print/parse round trips,
//! forward-mode derivatives against central finite differences, and exact
//! Hessian symmetry, over randomly generated smooth expressions.

use algmech_core::calculus::expr::{self, Expr, Func};
use algmech_core::calculus::{Field, Shape, Signature};
use proptest::prelude::*;

fn sig5() -> Signature {
    Signature::new(&[("x", 2), ("y", 3)]).unwrap()
}

/// Random smooth expressions in 5 slots. Division and square roots are
/// guarded so every generated tree is finite and C^infinity on all of R^5.
fn expr_strategy() -> impl Strategy<Value = Expr> {
    let leaf = prop_oneof![
        (-1.5f64..1.5).prop_map(expr::num),
        (0usize..5).prop_map(expr::var),
    ];
    leaf.prop_recursive(3, 24, 2, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone()).prop_map(|(a, b)| expr::add(a, b)),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| expr::sub(a, b)),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| expr::mul(a, b)),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| {
                expr::div(a, expr::add(expr::num(1.7), expr::mul(b.clone(), b)))
            }),
            inner.clone().prop_map(expr::neg),
            inner.clone().prop_map(|a| expr::call(Func::Sin, a)),
            inner.clone().prop_map(|a| expr::call(Func::Cos, a)),
            inner.clone().prop_map(|a| {
                expr::call(Func::Sqrt, expr::add(expr::num(1.3), expr::mul(a.clone(), a)))
            }),
            (inner, 2i32..=3).prop_map(|(a, k)| expr::powi(a, k)),
        ]
    })
}

fn point_strategy() -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-1.2f64..1.2, 5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn print_then_parse_recovers_the_tree(e in expr_strategy(), p in point_strategy()) {
        // Parsing is left-associative, so chains print without parens and
        // only parser-shaped trees round-trip structurally. One pass
        // through the parser normalizes; after that print/parse must be
        // the identity, and the normalized tree must evaluate like the
        // original.
        let sig = sig5();
        let normalized = expr::parse(&expr::print(&e, &sig), &sig).unwrap();
        let printed = expr::print(&normalized, &sig);
        let reparsed = expr::parse(&printed, &sig).unwrap();
        prop_assert_eq!(&reparsed, &normalized, "printed form: {}", printed);

        let f0 = Field::from_exprs(sig.clone(), Shape::Scalar, vec![e]).unwrap();
        let f1 = Field::from_exprs(sig, Shape::Scalar, vec![normalized]).unwrap();
        let (v0, v1) = (f0.scalar(&p).unwrap(), f1.scalar(&p).unwrap());
        prop_assert!(
            (v0 - v1).abs() <= 1e-12 * v0.abs().max(1.0),
            "evaluation changed: {} vs {}", v0, v1
        );
    }

    #[test]
    fn forward_derivatives_match_finite_differences(
        e in expr_strategy(),
        p in point_strategy(),
    ) {
        let field = Field::from_exprs(sig5(), Shape::Scalar, vec![e]).unwrap();
        let jac = field.jacobian(&p).unwrap();
        let h0 = f64::EPSILON.cbrt();
        for slot in 0..5 {
            let h = h0 * p[slot].abs().max(1.0);
            let mut q = p.clone();
            q[slot] = p[slot] + h;
            let fp = field.scalar(&q).unwrap();
            q[slot] = p[slot] - h;
            let fm = field.scalar(&q).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let ad = jac[(0, slot)];
            let scale = 1.0f64.max(ad.abs()).max(fp.abs()).max(fm.abs());
            prop_assert!(
                (ad - fd).abs() <= 1e-6 * scale,
                "slot {}: ad {} vs fd {} (scale {})",
                slot, ad, fd, scale
            );
        }
    }

    #[test]
    fn hessians_are_exactly_symmetric(
        e in expr_strategy(),
        p in point_strategy(),
    ) {
        let field = Field::from_exprs(sig5(), Shape::Scalar, vec![e]).unwrap();
        let hess = &field.hessian(&p).unwrap()[0];
        for i in 0..5 {
            for j in 0..i {
                prop_assert_eq!(
                    hess[(i, j)].to_bits(),
                    hess[(j, i)].to_bits(),
                    "asymmetric at ({}, {}): {} vs {}",
                    i, j, hess[(i, j)], hess[(j, i)]
                );
            }
        }
    }
}

/// The remaining primitives (exp, log, tan) at points where they are
/// smooth, against the same finite-difference yardstick.
#[test]
fn transcendental_primitives_match_finite_differences() {
    let sig = Signature::new(&[("x", 1)]).unwrap();
    for src in ["exp(0.7*x1)", "log(2.0 + x1^2)", "tan(0.4*x1)", "sqrt(1.5 + x1^4)"] {
        let field = Field::parse(sig.clone(), Shape::Scalar, &[src]).unwrap();
        for p in [-0.9, -0.3, 0.2, 0.8] {
            let ad = field.jacobian(&[p]).unwrap()[(0, 0)];
            let h = f64::EPSILON.cbrt() * p.abs().max(1.0);
            let fd = (field.scalar(&[p + h]).unwrap() - field.scalar(&[p - h]).unwrap())
                / (2.0 * h);
            assert!(
                (ad - fd).abs() <= 1e-6 * ad.abs().max(1.0),
                "{src} at {p}: ad {ad} vs fd {fd}"
            );
        }
    }
}
