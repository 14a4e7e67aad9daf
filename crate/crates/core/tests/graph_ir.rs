use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stp::arch::{ArchSpace, ArchSpec, LayerMask, StructMask, WidthGrid};
use stp::graph::{
    build_graph, estimate_cost, estimate_cost_with, extract_dependency_groups, interpret, CostConfig, GraphError, Params,
};
use stp::models::{resnet50_cifar, toy_cnn};
use stp::tensor::Tensor;

const MLP: &str = "stpgraph v1
0 input shape=4
1 linear from=0 in=4 out=3 bias=1 stage=0.0
2 relu from=1
3 linear from=2 in=3 out=2 bias=1 stage=1.0
4 output from=3
";

#[test]
fn mlp_spec_has_five_nodes_two_prunable() {
    let g = build_graph(MLP).unwrap();
    assert_eq!(g.nodes().len(), 5);
    assert_eq!(g.prunable_layers().count(), 2);
}

#[test]
fn linear_cost_by_hand() {
    let g = build_graph(
        "stpgraph v1
0 input shape=4
1 linear from=0 in=4 out=3 bias=1 fixed
2 output from=1
",
    )
    .unwrap();
    let r = estimate_cost(&g, &[2, 4], None).unwrap();
    assert_eq!(r.params, 15);
    assert_eq!(r.flops, 2 * (2 * 4 * 3) + 2 * 3);
}

#[test]
fn conv_cost_by_hand() {
    let g = build_graph(
        "stpgraph v1
0 input shape=2x8x8
1 conv2d from=0 in=2 out=4 k=3 stride=1 pad=1 fixed
2 output from=1
",
    )
    .unwrap();
    let r = estimate_cost(&g, &[1, 2, 8, 8], None).unwrap();
    assert_eq!(r.params, 72);
    assert_eq!(r.flops, 2 * (8 * 8 * 4 * 2 * 9));
}

#[test]
fn empty_graph_costs_nothing() {
    let g = build_graph("stpgraph v1\n0 input shape=3\n1 output from=0\n").unwrap();
    let r = estimate_cost(&g, &[1, 3], None).unwrap();
    assert_eq!((r.flops, r.params), (0, 0));
}

#[test]
fn totals_are_sums_of_nodes() {
    let g = resnet50_cifar();
    let r = estimate_cost(&g, &[1, 3, 32, 32], None).unwrap();
    assert_eq!(r.flops, r.per_node.values().map(|c| c.flops).sum::<u64>());
    assert_eq!(r.params, r.per_node.values().map(|c| c.params).sum::<u64>());
    assert_eq!(r.per_node.len(), g.nodes().len());
}

#[test]
fn cost_report_json_keys() {
    let g = build_graph(MLP).unwrap();
    let r = estimate_cost(&g, &[1, 4], None).unwrap();
    let v: serde_json::Value = serde_json::to_value(&r).unwrap();
    assert!(v.get("flops").is_some() && v.get("params").is_some() && v.get("per_node").is_some());
}

#[test]
fn elementwise_flag_only_adds() {
    let g = toy_cnn();
    let (plain, _) = estimate_cost_with(&g, &[1, 1, 8, 8], None, CostConfig::default()).unwrap();
    let (counted, _) = estimate_cost_with(&g, &[1, 1, 8, 8], None, CostConfig { count_elementwise: true }).unwrap();
    assert!(counted.flops > plain.flops);
    assert_eq!(counted.params, plain.params);
}

#[test]
fn proxy_work_is_independent_of_spatial_size() {
    let g = toy_cnn();
    let (_, small) = estimate_cost_with(&g, &[1, 1, 8, 8], None, CostConfig::default()).unwrap();
    let (_, large) = estimate_cost_with(&g, &[64, 1, 512, 512], None, CostConfig::default()).unwrap();
    assert_eq!(small.handler_calls, large.handler_calls);
    assert_eq!(small.handler_calls, g.nodes().len() as u64);
}

#[test]
fn wrong_proxy_channels_are_rejected() {
    let g = toy_cnn();
    assert!(matches!(estimate_cost(&g, &[1, 3, 8, 8], None), Err(GraphError::Shape { .. })));
}

#[test]
fn full_arch_ratio_is_exactly_one() {
    let g = resnet50_cifar();
    let space = ArchSpace::new(&g, WidthGrid::default()).unwrap();
    assert_eq!(space.flops_ratio(&space.full_arch()).unwrap(), 1.0);
    assert_eq!(space.params_ratio(&space.full_arch()).unwrap(), 1.0);
}

#[test]
fn resnet50_anchor_rows() {
    let g = resnet50_cifar();
    let rows = [
        ("((2, 3, 5, 2), (0.3, 0.3, 0.3, 0.7))", 0.1488),
        ("((1, 3, 6, 2), (0.3, 0.3, 0.3, 0.7))", 0.1469),
        ("((1, 2, 5, 2), (0.5, 0.3, 0.3, 0.7))", 0.1522),
        ("((2, 3, 4, 2), (0.3, 0.3, 0.3, 0.7))", 0.1489),
        ("((2, 2, 6, 2), (0.3, 0.3, 0.3, 0.7))", 0.1523),
    ];
    for (text, expected) in rows {
        let arch: ArchSpec = text.parse().unwrap();
        let ratio = stp::graph::flops_ratio(&g, &arch, &[1, 3, 32, 32]).unwrap();
        assert!((ratio - expected).abs() <= 0.015, "{text}: {ratio}");
    }
    let arch: ArchSpec = "((2, 3, 4, 2), (0.3, 0.3, 0.3, 0.7))".parse().unwrap();
    let p = stp::graph::params_ratio(&g, &arch, &[1, 3, 32, 32]).unwrap();
    assert!((p - 0.2194).abs() <= 0.015, "{p}");
}

fn mlp_params() -> (stp::graph::CompGraph, Params) {
    let g = build_graph(MLP).unwrap();
    let params = Params::init(&g, &mut ChaCha8Rng::seed_from_u64(3));
    (g, params)
}

#[test]
fn identity_mask_matches_unmasked() {
    let (g, params) = mlp_params();
    let x = Tensor::randn(&[5, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    let a = interpret(&g, &params, &x, None, false).unwrap().output;
    let b = interpret(&g, &params, &x, Some(&StructMask::full(&g)), false).unwrap().output;
    assert_eq!(a, b);
}

#[test]
fn half_width_linear_matches_hand_sliced_layer() {
    let g = build_graph(
        "stpgraph v1
0 input shape=3
1 linear from=0 in=3 out=4 bias=1 stage=0.0
2 output from=1
",
    )
    .unwrap();
    let params = Params::init(&g, &mut ChaCha8Rng::seed_from_u64(9));
    let x = Tensor::randn(&[6, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
    let mask = StructMask::from_layers(BTreeMap::from([(1, LayerMask { kept: true, channels: 2 })]));
    let out = interpret(&g, &params, &x, Some(&mask), false).unwrap().output;
    assert_eq!(out.shape(), &[6, 2]);
    let lp = &params.layers[&1];
    for n in 0..6 {
        for o in 0..2 {
            let mut v = lp.bias.as_ref().unwrap().data()[o];
            for i in 0..3 {
                v += lp.weight.data()[o * 3 + i] * x.data()[n * 3 + i];
            }
            assert!((out.data()[n * 2 + o] - v).abs() <= 1e-6);
        }
    }
}

#[test]
fn skipped_block_leaves_shortcut() {
    let g = build_graph(
        "stpgraph v1
0 input shape=2x4x4
1 conv2d from=0 in=2 out=2 k=3 pad=1 stage=0.0
2 relu from=1
3 conv2d from=2 in=2 out=2 k=3 pad=1 stage=0.1
4 relu from=3
5 conv2d from=4 in=2 out=2 k=3 pad=1 stage=0.1
6 add from=5,2
7 output from=6
",
    )
    .unwrap();
    let params = Params::init(&g, &mut ChaCha8Rng::seed_from_u64(4));
    let x = Tensor::randn(&[2, 2, 4, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(5));
    let arch: ArchSpec = "((1,), (1.0,))".parse().unwrap();
    let mask = arch.to_mask(&g).unwrap();
    let out = interpret(&g, &params, &x, Some(&mask), false).unwrap().output;
    // With the block gone the output is the first unit's relu.
    let prefix = build_graph(
        "stpgraph v1
0 input shape=2x4x4
1 conv2d from=0 in=2 out=2 k=3 pad=1 stage=0.0
2 relu from=1
3 output from=2
",
    )
    .unwrap();
    let mut p2 = Params::default();
    p2.layers.insert(1, params.layers[&1].clone());
    let expected = interpret(&prefix, &p2, &x, None, false).unwrap().output;
    assert!(out.max_abs_diff(&expected) <= 1e-12);
}

#[test]
fn masked_parameters_get_zero_gradient() {
    let g = toy_cnn();
    let params = Params::init(&g, &mut ChaCha8Rng::seed_from_u64(6));
    let x = Tensor::randn(&[3, 1, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(7));
    let arch: ArchSpec = "((1, 2, 1), (0.5, 0.3, 0.7))".parse().unwrap();
    let mask = arch.to_mask(&g).unwrap();
    let mut rec = interpret(&g, &params, &x, Some(&mask), true).unwrap().recording.unwrap();
    let loss = rec.tape.cross_entropy(rec.output, &[0, 1, 2]).unwrap();
    let grads = rec.tape.backward(loss).unwrap();
    for node in g.prunable_layers() {
        let (w, _) = rec.params.layers[&node.id];
        let gw = grads.get(w).cloned().unwrap_or_else(|| Tensor::zeros(params.layers[&node.id].weight.shape()));
        let lm = mask.layer(node.id).unwrap();
        let shape = gw.shape().to_vec();
        let per_out: usize = shape[1..].iter().product();
        for o in 0..shape[0] {
            if !lm.kept || o >= lm.channels {
                assert!(gw.data()[o * per_out..(o + 1) * per_out].iter().all(|v| *v == 0.0), "layer {} row {o}", node.id);
            }
        }
    }
}

#[test]
fn add_over_concat_is_rejected() {
    let g = build_graph(
        "stpgraph v1
0 input shape=1x4x4
1 conv2d from=0 in=1 out=2 k=1 stage=0.0
2 conv2d from=0 in=1 out=2 k=1 stage=0.0
3 concat from=1,2
4 conv2d from=0 in=1 out=4 k=1 stage=0.0
5 add from=3,4
6 output from=5
",
    )
    .unwrap();
    assert!(matches!(extract_dependency_groups(&g), Err(GraphError::Dependency { .. })));
}

#[test]
fn concat_consumer_reads_per_producer_spans() {
    let g = build_graph(
        "stpgraph v1
0 input shape=1x4x4
1 conv2d from=0 in=1 out=4 k=1 stage=0.0
2 conv2d from=0 in=1 out=4 k=1 stage=0.0
3 concat from=1,2
4 conv2d from=3 in=8 out=3 k=1 stage=1.0
5 output from=4
",
    )
    .unwrap();
    let params = Params::init(&g, &mut ChaCha8Rng::seed_from_u64(11));
    let x = Tensor::randn(&[2, 1, 4, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(12));
    let arch: ArchSpec = "((1, 1), (0.5, 1.0))".parse().unwrap();
    let mask = arch.to_mask(&g).unwrap();
    let out = interpret(&g, &params, &x, Some(&mask), false).unwrap().output;
    // Zeroing the dropped producer channels in the dense network must agree.
    let mut zeroed = params.clone();
    for id in [1, 2] {
        let lp = zeroed.layers.get_mut(&id).unwrap();
        for v in &mut lp.weight.data_mut()[2..] {
            *v = 0.0;
        }
    }
    let dense = interpret(&g, &zeroed, &x, None, false).unwrap().output;
    assert!(out.max_abs_diff(&dense) <= 1e-12);
}

fn toy_space_arch() -> impl Strategy<Value = ArchSpec> {
    let grid = WidthGrid::default().ratios().to_vec();
    let w = proptest::sample::select(grid);
    (proptest::collection::vec(1usize..=2, 3), proptest::collection::vec(w, 3)).prop_map(|(depths, widths)| ArchSpec { depths, widths })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn wider_never_costs_less(a in toy_space_arch(), stage in 0usize..3) {
        let g = toy_cnn();
        let space = ArchSpace::new(&g, WidthGrid::default()).unwrap();
        let grid = WidthGrid::default().ratios().to_vec();
        let pos = grid.iter().position(|w| *w == a.widths[stage]).unwrap();
        prop_assume!(pos + 1 < grid.len());
        let mut wider = a.clone();
        wider.widths[stage] = grid[pos + 1];
        let (c0, c1) = (space.cost(&a).unwrap(), space.cost(&wider).unwrap());
        prop_assert!(c1.flops >= c0.flops && c1.params >= c0.params);
    }

    #[test]
    fn group_consistent_masks_never_shape_error(a in toy_space_arch(), seed in 0u64..1000) {
        let g = toy_cnn();
        let params = Params::init(&g, &mut ChaCha8Rng::seed_from_u64(seed));
        let x = Tensor::randn(&[1, 1, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(seed + 1));
        let mask = a.to_mask(&g).unwrap();
        prop_assert!(interpret(&g, &params, &x, Some(&mask), false).is_ok());
    }

    #[test]
    fn groups_partition_prunable_layers(a in toy_space_arch()) {
        let g = toy_cnn();
        let groups = extract_dependency_groups(&g).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for grp in &groups {
            for m in &grp.members {
                prop_assert!(seen.insert(*m));
            }
        }
        prop_assert_eq!(seen.len(), g.prunable_layers().count());
        let mask = a.to_mask(&g).unwrap();
        for grp in &groups {
            let counts: std::collections::BTreeSet<_> = grp.members.iter().map(|m| mask.layer(*m).unwrap().channels).collect();
            prop_assert_eq!(counts.len(), 1);
        }
    }
}
