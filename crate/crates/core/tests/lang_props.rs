use eduction_core::lang::pretty::{expr_to_source, geer_to_source, program_to_source};
use eduction_core::lang::random::{random_program, Shape};
use eduction_core::lang::{compile, parse_program, tokenize, BinOp, Expr};
use eduction_core::Value;
use proptest::prelude::*;

fn name() -> impl Strategy<Value = String> {
    prop::sample::select(vec!["a", "b", "fact", "x_1"]).prop_map(str::to_owned)
}

fn dim() -> impl Strategy<Value = String> {
    prop::sample::select(vec!["d", "t", "space"]).prop_map(str::to_owned)
}

fn leaf() -> impl Strategy<Value = Expr> {
    prop_oneof![
        (0..=i64::MAX).prop_map(Expr::int),
        (0.0..1e6f64).prop_map(|x| Expr::Literal(Value::Float(x))),
        name().prop_map(Expr::Ident),
        dim().prop_map(Expr::HashDim),
    ]
}

/// Expressions of depth at most 6.
fn expr() -> impl Strategy<Value = Expr> {
    leaf().prop_recursive(5, 64, 3, |inner| {
        prop_oneof![
            (prop::sample::select(BinOp::ALL.to_vec()), inner.clone(), inner.clone())
                .prop_map(|(op, l, r)| Expr::binary(op, l, r)),
            inner.clone().prop_map(|e| Expr::Neg(Box::new(e))),
            (inner.clone(), inner.clone(), inner.clone()).prop_map(|(c, t, e)| Expr::if_(c, t, e)),
            (inner.clone(), dim(), inner.clone()).prop_map(|(e, d, t)| Expr::at(e, &d, t)),
            (name(), prop::collection::vec(inner, 0..3)).prop_map(|(n, args)| Expr::Call(n, args)),
        ]
    })
}

fn reparse(src: &str) -> Expr {
    parse_program(&tokenize(src).unwrap()).unwrap().root
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 2000, ..ProptestConfig::default() })]

    #[test]
    fn printed_expressions_reparse_identically(e in expr()) {
        prop_assert!(e.depth() <= 6);
        prop_assert_eq!(reparse(&expr_to_source(&e)), e);
    }

    #[test]
    fn printed_programs_reparse_identically(seed in any::<u64>()) {
        let p = random_program(seed, &Shape { max_depth: 6, ..Shape::default() });
        let src = program_to_source(&p);
        prop_assert_eq!(parse_program(&tokenize(&src).unwrap()).unwrap(), p);
    }

    #[test]
    fn analysis_is_idempotent(seed in any::<u64>()) {
        let p = random_program(seed, &Shape::default());
        let g = compile(&program_to_source(&p), "p").unwrap();
        let again = compile(&geer_to_source(&g), "p").unwrap();
        prop_assert_eq!(g.dictionary.keys().collect::<Vec<_>>(), again.dictionary.keys().collect::<Vec<_>>());
        prop_assert_eq!(&g.dimensions, &again.dimensions);
        prop_assert_eq!(&g.dictionary, &again.dictionary);
    }

    #[test]
    fn digest_ignores_layout_only(seed in any::<u64>(), pad in "[ \n\t]{1,4}") {
        let src = program_to_source(&random_program(seed, &Shape::default()));
        let spaced = src.replace(' ', &pad) + "\n// trailing note\n";
        let a = compile(&src, "p").unwrap();
        let b = compile(&spaced, "p").unwrap();
        prop_assert_eq!(&a.source_digest, &b.source_digest);
        let changed = compile(&format!("({src_root}) + 0 where{rest}",
            src_root = src.split(" where").next().unwrap(),
            rest = src.split_once(" where").map_or("", |(_, r)| r)), "p");
        if let Ok(c) = changed {
            prop_assert_ne!(&a.source_digest, &c.source_digest);
        }
    }
}

#[test]
fn literal_change_changes_digest() {
    let a = compile("1 + 2", "p").unwrap();
    let b = compile("1 + 3", "p").unwrap();
    let c = compile("1  +  2 // same", "p").unwrap();
    assert_ne!(a.source_digest, b.source_digest);
    assert_eq!(a.source_digest, c.source_digest);
}
