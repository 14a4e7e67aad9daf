use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stp::arch::{contains, ArchError, ArchSpace, ArchSpec, WidthGrid};
use stp::models::{resnet50_cifar, toy_cnn};

fn arch(s: &str) -> ArchSpec {
    s.parse().unwrap()
}

#[test]
fn full_arch_keeps_everything() {
    let g = toy_cnn();
    let mask = ArchSpec::full(&g).to_mask(&g).unwrap();
    for node in g.prunable_layers() {
        let lm = mask.layer(node.id).unwrap();
        assert!(lm.kept);
        assert_eq!(Some(lm.channels), node.op.out_channels());
    }
}

#[test]
fn depth_keeps_earliest_blocks() {
    let g = resnet50_cifar();
    let mask = arch("((2, 4, 6, 3), (1.0, 1.0, 1.0, 1.0))").to_mask(&g).unwrap();
    for (u, unit) in g.stages()[0].units.iter().enumerate() {
        for id in unit {
            assert_eq!(mask.layer(*id).unwrap().kept, u < 2);
        }
    }
}

#[test]
fn width_half_keeps_prefix_of_four() {
    let g = stp::graph::build_graph(
        "stpgraph v1
0 input shape=2
1 linear from=0 in=2 out=4 stage=0.0
2 output from=1
",
    )
    .unwrap();
    let mask = arch("((1,), (0.5,))").to_mask(&g).unwrap();
    assert_eq!(mask.layer(1).unwrap().channels, 2);
}

#[test]
fn stage_mismatch_is_reported() {
    let g = toy_cnn();
    assert!(matches!(
        arch("((1, 1), (0.5, 0.5))").to_mask(&g),
        Err(ArchError::StageMismatch { expected: 3, got: 2 })
    ));
    assert!(matches!(arch("((3, 1, 1), (0.5, 0.5, 0.5))").to_mask(&g), Err(ArchError::Depth { .. })));
}

#[test]
fn contains_examples() {
    let g = toy_cnn();
    let a = arch("((1, 2, 1), (0.5, 0.7, 0.3))");
    assert!(contains(&a, &a, &g).unwrap());
    assert!(contains(&ArchSpec::full(&g), &a, &g).unwrap());
    assert!(!contains(&arch("((1, 2, 1), (0.3, 0.7, 0.3))"), &arch("((1, 2, 1), (0.5, 0.7, 0.3))"), &g).unwrap());
    assert!(contains(&arch("((1, 2, 1), (0.5, 0.7, 0.3))"), &arch("((1, 2, 1), (0.3, 0.7, 0.3))"), &g).unwrap());
    assert!(!contains(&arch("((1, 2, 1), (0.5, 0.7, 0.3))"), &arch("((1, 2, 2), (0.3, 0.7, 0.3))"), &g).unwrap());
}

#[test]
fn full_target_returns_full_arch() {
    let g = toy_cnn();
    let space = ArchSpace::new(&g, WidthGrid::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(space.sample(1.0, 0.5, &mut rng).unwrap(), space.full_arch());
}

#[test]
fn resnet50_samples_stay_in_band() {
    let g = resnet50_cifar();
    let space = ArchSpace::new(&g, WidthGrid::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let a = space.sample(0.15, 0.03, &mut rng).unwrap();
        let r = space.flops_ratio(&a).unwrap();
        assert!((0.1455..=0.1545).contains(&r), "{a} -> {r}");
    }
}

#[test]
fn sampling_is_seed_deterministic() {
    let g = toy_cnn();
    let space = ArchSpace::new(&g, WidthGrid::default()).unwrap();
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..10).map(|_| space.sample(0.3, 0.1, &mut rng).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(draw(5), draw(5));
}

#[test]
fn infeasible_target_reports_nearest() {
    let g = toy_cnn();
    let space = ArchSpace::new(&g, WidthGrid::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    match space.sample_capped(0.0001, 0.03, 2000, &mut rng) {
        Err(ArchError::Infeasible { nearest, attempts, .. }) => {
            assert_eq!(attempts, 2000);
            assert!(nearest > 0.0001);
        }
        other => panic!("expected infeasible, got {other:?}"),
    }
}

#[test]
fn full_arch_is_a_mutation_fixed_point() {
    let g = toy_cnn();
    let space = ArchSpace::new(&g, WidthGrid::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let full = space.full_arch();
    for _ in 0..100 {
        assert_eq!(space.mutate_expand(&full, &mut rng), full);
    }
}

#[test]
fn mutation_always_contains_input() {
    let g = resnet50_cifar();
    let space = ArchSpace::new(&g, WidthGrid::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10_000 {
        let a = space.draw(&mut rng);
        let m = space.mutate_expand(&a, &mut rng);
        assert!(space.contains(&m, &a).unwrap(), "{m} does not contain {a}");
    }
}

#[test]
fn mutation_containment_exhaustive_on_toy() {
    let g = toy_cnn();
    let space = ArchSpace::new(&g, WidthGrid::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for a in space.enumerate() {
        for _ in 0..20 {
            let m = space.mutate_expand(&a, &mut rng);
            assert!(space.contains(&m, &a).unwrap());
        }
    }
}

#[test]
fn mutated_width_frequencies_are_uniform() {
    let g = toy_cnn();
    let space = ArchSpace::new(&g, WidthGrid::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = arch("((1, 1, 1), (0.5, 0.5, 0.5))");
    let n = 100_000;
    let mut counts = [0usize; 4];
    for _ in 0..n {
        let m = space.mutate_expand(&a, &mut rng);
        let idx = [0.5, 0.7, 0.9, 1.0].iter().position(|w| *w == m.widths[0]).expect("width from grid, at least 0.5");
        counts[idx] += 1;
    }
    for c in counts {
        let f = c as f64 / n as f64;
        assert!((f - 0.25).abs() <= 0.02, "{counts:?}");
    }
}

#[test]
fn distinct_rounded_archs_give_distinct_masks() {
    let g = toy_cnn();
    let space = ArchSpace::new(&g, WidthGrid::default()).unwrap();
    let all = space.enumerate();
    assert_eq!(all.len(), 2 * 2 * 2 * 5 * 5 * 5);
    // Stage channel widths are 8, 16 and 32; round half up by hand.
    let rounded = |a: &ArchSpec| {
        let c: Vec<usize> = [8.0, 16.0, 32.0].iter().zip(&a.widths).map(|(c, w)| ((c * w) + 0.5f64).floor() as usize).collect();
        (a.depths.clone(), c)
    };
    for i in 0..all.len() {
        for j in i + 1..all.len() {
            let same = space.mask(&all[i]).unwrap() == space.mask(&all[j]).unwrap();
            assert_eq!(same, rounded(&all[i]) == rounded(&all[j]), "{} vs {}", all[i], all[j]);
        }
    }
}

fn toy_arch() -> impl Strategy<Value = ArchSpec> {
    let w = proptest::sample::select(WidthGrid::default().ratios().to_vec());
    (proptest::collection::vec(1usize..=2, 3), proptest::collection::vec(w, 3)).prop_map(|(depths, widths)| ArchSpec { depths, widths })
}

proptest! {
    #[test]
    fn contains_is_a_partial_order(a in toy_arch(), b in toy_arch(), c in toy_arch()) {
        let g = toy_cnn();
        let (ma, mb, mc) = (a.to_mask(&g).unwrap(), b.to_mask(&g).unwrap(), c.to_mask(&g).unwrap());
        prop_assert!(ma.contains(&ma));
        if ma.contains(&mb) && mb.contains(&ma) {
            prop_assert_eq!(&ma, &mb);
        }
        if ma.contains(&mb) && mb.contains(&mc) {
            prop_assert!(ma.contains(&mc));
        }
    }

    #[test]
    fn nested_tuple_round_trip(a in toy_arch()) {
        let text = a.to_string();
        prop_assert_eq!(text.parse::<ArchSpec>().unwrap(), a);
    }

    #[test]
    fn samples_lie_in_band(seed in 0u64..10_000, r in 0.2f64..0.9) {
        let g = toy_cnn();
        let space = ArchSpace::new(&g, WidthGrid::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if let Ok(a) = space.sample_capped(r, 0.1, 5000, &mut rng) {
            let ratio = space.flops_ratio(&a).unwrap();
            prop_assert!(ratio >= r * 0.9 && ratio <= r * 1.1);
        }
    }
}
