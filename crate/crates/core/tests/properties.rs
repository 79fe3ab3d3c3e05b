//! Property tests: grammar round-trips and pooling algebra.

use estilab_core::impute::pool;
use estilab_core::model::{Arm, IceCause, IceKind};
use estilab_core::plan::{
    parse_spec, serialize_spec, EstimandSpec, IceStrategy, MethodKind, MethodSpec, Population,
    StrategyKey,
};
use proptest::prelude::*;

fn arb_strategy() -> impl Strategy<Value = IceStrategy> {
    prop_oneof![
        Just(IceStrategy::Cdh),
        Just(IceStrategy::Nth),
        Just(IceStrategy::Pth),
        Just(IceStrategy::TreatmentPolicy),
        Just(IceStrategy::Dtr),
    ]
}

fn arb_cause() -> impl Strategy<Value = IceCause> {
    prop::sample::select(IceCause::ALL.to_vec())
}

fn arb_method() -> impl Strategy<Value = MethodSpec> {
    (0..6usize, arb_cause(), prop::option::of(-4.0..4.0f64), prop::bool::ANY).prop_map(
        |(k, donor, delta, exp_ref)| {
            let kind = [
                MethodKind::Mar,
                MethodKind::ReturnToBaseline,
                MethodKind::RetrievedDropout,
                MethodKind::JumpToReference,
                MethodKind::CopyReference,
                MethodKind::SpecialPattern,
            ][k];
            let mut m = MethodSpec::of(kind);
            if kind == MethodKind::SpecialPattern {
                m.donor = Some(donor);
            }
            if matches!(kind, MethodKind::JumpToReference | MethodKind::CopyReference) && exp_ref {
                m.reference = Arm::Experimental;
            }
            m.delta = delta;
            m
        },
    )
}

fn arb_spec() -> impl Strategy<Value = EstimandSpec> {
    let strategies = prop::collection::vec(arb_strategy(), 6);
    let methods = prop::collection::vec(arb_method(), 6);
    let population = prop_oneof![
        Just(Population::AllRandomized),
        (-2.0..2.0f64).prop_map(|c| Population::PrincipalStratum { threshold: c }),
        (prop::option::of(-2.0..0.0f64), prop::option::of(0.0..2.0f64))
            .prop_filter("at least one bound", |(a, b)| a.is_some() || b.is_some())
            .prop_map(|(min, max)| Population::BaselineSubset { min, max }),
    ];
    (strategies, methods, population, prop::bool::ANY, -2.0..2.0f64, "[a-z][a-z0-9-]{0,12}")
        .prop_map(|(strats, methods, population, pragmatic, death_delta, name)| {
            let mut spec = EstimandSpec {
                name,
                population,
                pragmatic,
                death_delta,
                ..EstimandSpec::default()
            };
            for (cause, (s, m)) in IceCause::ALL.into_iter().zip(strats.into_iter().zip(methods)) {
                spec.strategies.insert(StrategyKey::Cause(cause), s);
                spec.imputation.insert(StrategyKey::Cause(cause), m);
            }
            spec.regimen_kinds.insert(IceKind::ProlongedInterruption);
            spec
        })
}

proptest! {
    #[test]
    fn grammar_round_trips(spec in arb_spec()) {
        let text = serialize_spec(&spec);
        let parsed = parse_spec(&text).expect("serialized specs parse");
        prop_assert_eq!(parsed, spec);
    }

    #[test]
    fn pooling_invariants(
        estimates in prop::collection::vec((-5.0..5.0f64, 0.0..4.0f64), 2..25),
        complete_df in 1.0..2000.0f64,
    ) {
        let p = pool(&estimates, complete_df).unwrap();
        prop_assert!(p.between_var >= 0.0);
        prop_assert!(p.total_var >= p.within_var);
        prop_assert!(p.df > 0.0);
        prop_assert!(p.ci_lower <= p.point && p.point <= p.ci_upper);
        let mid = 0.5 * (p.ci_lower + p.ci_upper);
        prop_assert!((mid - p.point).abs() < 1e-9 * (1.0 + p.point.abs()));
    }
}
