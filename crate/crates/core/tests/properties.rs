//! Property tests over randomly generated network specs.

use proptest::prelude::*;

use lrf_core::architectures::{
    build_dilnet, build_hgnet, build_recnet, build_standard, build_tdnn,
};
use lrf_core::netgraph::{count_params, parse_spec, serialize_spec, LayerKind, NetworkSpec};

fn arb_spec() -> impl Strategy<Value = NetworkSpec> {
    let odd_width = prop_oneof![Just(1usize), Just(3), Just(5), Just(7)];
    let channels = 1usize..10;
    let classes = 2usize..6;

    let standard = (odd_width.clone(), 1usize..6, channels.clone(), classes.clone())
        .prop_map(|(w, l, c, k)| build_standard(w, l, c, k).unwrap());
    let dilnet = (
        prop_oneof![Just(3usize), Just(5)],
        prop::collection::vec(1usize..9, 1..4),
        channels.clone(),
        classes.clone(),
    )
        .prop_map(|(w, d, c, k)| build_dilnet(w, &d, c, k).unwrap());
    let tdnn = (
        prop::collection::vec((0u64..4, 0u64..4), 1..4),
        channels.clone(),
        classes.clone(),
    )
        .prop_map(|(ctx, c, k)| build_tdnn(&ctx, c, k).unwrap());
    let recnet = (
        1usize..5,
        1usize..4,
        prop_oneof![Just(3usize), Just(5)],
        channels.clone(),
        classes.clone(),
    )
        .prop_map(|(r, n, w, c, k)| build_recnet(r, n, w, c, k).unwrap());
    let hgnet = (
        1usize..3,
        prop_oneof![Just(3usize), Just(5)],
        1usize..4,
        channels,
        classes,
    )
        .prop_map(|(s, w, l, c, k)| build_hgnet(s, w, l, c, k).unwrap());

    prop_oneof![standard, dilnet, tdnn, recnet, hgnet]
}

/// Extra free-form metadata exercises string escaping in the codec.
fn arb_meta_entry() -> impl Strategy<Value = (String, String)> {
    ("[a-z_]{1,12}", "\\PC{0,24}")
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// serialize . parse is the identity on normalized documents, and the
    /// canonical text is a fixed point of parse-then-serialize.
    #[test]
    fn serialize_parse_round_trip(spec in arb_spec(), extra in prop::collection::vec(arb_meta_entry(), 0..3)) {
        let mut spec = spec;
        for (k, v) in extra {
            spec.meta.insert(format!("x_{k}"), v);
        }
        let doc = serialize_spec(&spec);
        let parsed = parse_spec(&doc).unwrap();
        prop_assert_eq!(&parsed, &spec);
        prop_assert_eq!(serialize_spec(&parsed), doc);
    }

    /// The shared-kernel parameter mass of a recursive net does not depend
    /// on the recursion depth: totals differ only by the per-application
    /// mixing scalars (one per weighted-sum source).
    #[test]
    fn recnet_count_invariant_under_recursion_depth(
        n in 1usize..4,
        w in prop_oneof![Just(3usize), Just(5)],
        c in 1usize..10,
        k in 2usize..6,
        r_a in 1usize..6,
        r_b in 1usize..6,
    ) {
        let scalars = |spec: &NetworkSpec| -> u64 {
            spec.layers
                .iter()
                .map(|l| match &l.kind {
                    LayerKind::WeightedSum { sources, .. } => sources.len() as u64,
                    _ => 0,
                })
                .sum()
        };
        let a = build_recnet(r_a, n, w, c, k).unwrap();
        let b = build_recnet(r_b, n, w, c, k).unwrap();
        prop_assert_eq!(
            count_params(&a) - scalars(&a),
            count_params(&b) - scalars(&b)
        );
        prop_assert_eq!(scalars(&a), (n * r_a) as u64);
        prop_assert_eq!(scalars(&b), (n * r_b) as u64);
    }

    /// Budget matching never silently violates its tolerance.
    #[test]
    fn match_budget_respects_tolerance(
        budget in 2_000u64..60_000,
        spec in arb_spec(),
    ) {
        match lrf_core::netgraph::match_budget(&spec, budget, 0.05) {
            Ok(matched) => {
                let count = count_params(&matched);
                let allowed = (0.05 * budget as f64).floor() as u64;
                prop_assert!(count >= budget - allowed && count <= budget + allowed,
                    "count {} outside {} +/- {}", count, budget, allowed);
            }
            Err(_) => {} // infeasible or unmatchable is a legal outcome
        }
    }
}
