use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stp::arch::{ArchSpace, ArchSpec, WidthGrid};
use stp::autodiff::{OptimState, Tape};
use stp::data::Dataset;
use stp::graph::{bind_params, Params};
use stp::models::{mlp, toy_cnn};
use stp::pool::shrink_count;
use stp::tensor::Tensor;
use stp::trainer::*;

fn cfg(extra: &str) -> TrainConfig {
    let base = "model = mlp\ndataset = gaussian\nshape = 64\nsamples = 400\nT_total = 40\nk = 10\nT_shr = 30\nN_p = 4\nr = 0.5\nband = 0.1\nbatch_size = 16\n";
    let mut raw = RawConfig::parse(base).unwrap();
    for line in extra.lines().filter(|l| !l.trim().is_empty()) {
        raw.set(line).unwrap();
    }
    TrainConfig::from_raw(&raw).unwrap()
}

fn train_set(c: &TrainConfig) -> Dataset {
    load_data(&c.data).unwrap().0
}

#[test]
fn zero_betas_match_plain_cross_entropy() {
    let c = cfg("T_total=1\nk=1\nT_shr=1\nbeta1=0\nbeta2=0");
    let g = mlp(64, 32, 10);
    let data = train_set(&c);
    let stp = run_stp_on(&c, &g, &data).unwrap();
    let plain = run_suppressed_on(&c, &g, &data, &stp.final_arch, 0.0).unwrap();
    assert_eq!(stp.main, plain.main);
}

#[test]
fn outside_support_only_cross_entropy_flows() {
    let g = toy_cnn();
    let space = ArchSpace::new(&g, WidthGrid::default()).unwrap();
    let params = Params::init(&g, &mut ChaCha8Rng::seed_from_u64(1));
    let x = Tensor::randn(&[6, 1, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
    let y = [0, 1, 2, 3, 4, 5];
    let target: ArchSpec = "((1, 1, 1), (0.3, 0.5, 0.3))".parse().unwrap();
    let support: ArchSpec = "((1, 2, 1), (0.5, 0.5, 0.7))".parse().unwrap();
    let outside = drop_masks(&g, &extract_pruned(&g, &params, &support).unwrap().kept);
    let flags: Vec<&Vec<bool>> = outside.values().flat_map(|(w, b)| std::iter::once(w).chain(b.as_ref())).collect();
    let grads = |b1, b2| stp_gradients(&space, &params, (&x, &y), &target, std::slice::from_ref(&support), b1, b2).unwrap().grads;
    let ce = grads(0.0, 0.0);
    let mut inside_differs = false;
    for (b1, b2) in [(1.0, 0.0), (0.0, 1.0), (1.0, 1.0)] {
        let full = grads(b1, b2);
        for ((gf, gc), out) in full.iter().zip(&ce).zip(&flags) {
            for ((a, b), o) in gf.data().iter().zip(gc.data()).zip(out.iter()) {
                if *o {
                    assert!((a - b).abs() <= 1e-12, "outside-support gradient changed: {a} vs {b}");
                } else if (a - b).abs() > 1e-9 {
                    inside_differs = true;
                }
            }
        }
    }
    assert!(inside_differs, "distillation never reached the support");
}

#[test]
fn recorded_total_is_the_weighted_sum() {
    let c = cfg("beta1=0.7\nbeta2=1.9\nn_support=2");
    let run = run_stp(&c).unwrap();
    for r in &run.log {
        assert!((r.l_total - (r.l_ce + 0.7 * r.l_sts + 1.9 * r.l_sme)).abs() <= 1e-12, "{r:?}");
    }
}

#[test]
fn pool_shrinks_by_one_every_k() {
    let (k, n_p) = (5u64, 6usize);
    let t = k * (n_p as u64 - 1);
    let c = cfg(&format!("T_total={t}\nT_shr={t}\nk={k}\nN_p={n_p}\nband=0.3"));
    assert_eq!(shrink_count(k, n_p as u64, t), 1);
    let run = run_stp(&c).unwrap();
    for r in &run.log {
        let expected = n_p - (r.t / k) as usize;
        assert_eq!(r.pool_size, expected, "t = {}", r.t);
    }
    assert_eq!(run.log.last().unwrap().pool_size, 1);
}

#[test]
fn runs_are_deterministic_and_end_in_band() {
    let c = cfg("");
    let a = run_stp(&c).unwrap();
    let b = run_stp(&c).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.final_arch, b.final_arch);
    assert_eq!(a.main, b.main);
    let g = mlp(64, 32, 10);
    let r = ArchSpace::new(&g, WidthGrid::default()).unwrap().flops_ratio(&a.final_arch).unwrap();
    assert!((0.45..=0.55).contains(&r), "{r}");
    assert_eq!(a.pool_snapshots.last().unwrap().pool.len(), 1);
}

#[test]
fn suppressed_run_shrinks_dropped_norm_below_standard() {
    let c = cfg("T_total=200\nk=10\nT_shr=100");
    let g = mlp(64, 32, 10);
    let data = train_set(&c);
    let arch: ArchSpec = "((1, 1), (0.5, 1.0))".parse().unwrap();
    let std = run_suppressed_on(&c, &g, &data, &arch, 0.0).unwrap();
    let sup = run_suppressed_on(&c, &g, &data, &arch, 0.1).unwrap();
    assert!(sup.log.last().unwrap().dropped_norm < std.log.last().unwrap().dropped_norm);
    assert!(std.log.iter().all(|r| r.penalty == 0.0));
}

fn penalty_fixture() -> (stp::graph::CompGraph, Params, DropMasks) {
    let g = mlp(6, 4, 3);
    let p = Params::init(&g, &mut ChaCha8Rng::seed_from_u64(7));
    let arch: ArchSpec = "((1, 1), (0.5, 1.0))".parse().unwrap();
    let drops = drop_masks(&g, &extract_pruned(&g, &p, &arch).unwrap().kept);
    (g, p, drops)
}

#[test]
fn penalty_only_decay_has_closed_form() {
    let (_, p0, drops) = penalty_fixture();
    let (lr, lambda, steps) = (0.1, 0.5, 25);
    let mut p = p0.clone();
    let mut opt = OptimState::new(lr, 0.0, 0.0).unwrap();
    let buffers = opt.buffer_count();
    for _ in 0..steps {
        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, &p, true);
        let loss = suppression_penalty(&mut tape, &bound, &drops, lambda).unwrap().unwrap();
        let mut grads = tape.backward(loss).unwrap();
        let g: Vec<Tensor> = bound
            .vars()
            .iter()
            .zip(p.tensors())
            .map(|(v, t)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        opt.step(&mut p.tensors_mut(), &g, lr).unwrap();
    }
    assert!(opt.buffer_count() >= buffers);
    let factor = (1.0 - lr * lambda).powi(steps);
    let flags: Vec<&Vec<bool>> = drops.values().flat_map(|(w, b)| std::iter::once(w).chain(b.as_ref())).collect();
    for ((t0, t1), f) in p0.tensors().iter().zip(p.tensors()).zip(flags) {
        for ((a, b), d) in t0.data().iter().zip(t1.data()).zip(f) {
            let want = if *d { a * factor } else { *a };
            assert!((b - want).abs() <= 1e-12 * a.abs().max(1.0), "{b} vs {want}");
        }
    }
}

#[test]
fn penalty_gradient_is_lambda_theta_on_dropped() {
    let (_, p, drops) = penalty_fixture();
    let lambda = 0.3;
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, &p, true);
    let loss = suppression_penalty(&mut tape, &bound, &drops, lambda).unwrap().unwrap();
    let mut grads = tape.backward(loss).unwrap();
    let flags: Vec<&Vec<bool>> = drops.values().flat_map(|(w, b)| std::iter::once(w).chain(b.as_ref())).collect();
    for ((v, t), f) in bound.vars().iter().zip(p.tensors()).zip(flags) {
        let g = grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape()));
        for ((gv, tv), d) in g.data().iter().zip(t.data()).zip(f) {
            let want = if *d { lambda * tv } else { 0.0 };
            assert!((gv - want).abs() <= 1e-15, "{gv} vs {want}");
        }
    }
    assert!(suppression_penalty(&mut Tape::new(), &bound, &drops, 0.0).unwrap().is_none());
}

#[test]
fn optimizer_state_size_is_constant_over_a_run() {
    let c = cfg("");
    let g = mlp(64, 32, 10);
    let data = train_set(&c);
    let space = ArchSpace::new(&g, WidthGrid::default()).unwrap();
    let mut arch_rng = stream_rng(c.seed, STREAM_ARCH);
    let archs = stp::pool::init_pool(c.n_p, &space, c.target, c.band, &mut arch_rng).unwrap();
    let mut pool = stp::pool::Pool::new(archs, c.alpha, c.k, c.t_shr).unwrap();
    let mut params = Params::init(&g, &mut stream_rng(c.seed, STREAM_INIT));
    let mut opt = OptimState::new(c.lr, c.momentum, c.weight_decay).unwrap();
    let mut batcher = stp::data::Batcher::new(data.len(), c.batch_size, 3);
    let mut counts = Vec::new();
    for t in 1..=c.t_total {
        let (x, y) = batcher.next_batch(&data);
        train_step(&space, &mut params, &mut opt, &mut pool, (&x, &y), &c, &mut arch_rng, t).unwrap();
        counts.push(opt.buffer_count());
    }
    assert!(counts.iter().all(|n| *n == counts[0]), "{counts:?}");
    assert_eq!(counts[0], params.tensors().len());
}

#[test]
fn non_finite_loss_aborts_with_step() {
    let c = cfg("lr=1e300\nmomentum=0");
    match run_stp(&c) {
        Err(TrainError::NonFinite { t, .. }) => assert!(t >= 1),
        other => panic!("expected a non-finite abort, got {:?}", other.map(|r| r.final_arch)),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn teacher_receives_no_gradient(seed in 0u64..1000) {
        let g = mlp(5, 4, 3);
        let space = ArchSpace::new(&g, WidthGrid::default()).unwrap();
        let params = Params::init(&g, &mut ChaCha8Rng::seed_from_u64(seed));
        let x = Tensor::randn(&[4, 5], 1.0, &mut ChaCha8Rng::seed_from_u64(seed + 1));
        let y = [0, 1, 2, 0];
        let full = space.full_arch();
        // With target = support = full arch the student equals the teacher,
        // so every distillation gradient must vanish.
        let a = stp_gradients(&space, &params, (&x, &y), &full, std::slice::from_ref(&full), 1.0, 1.0).unwrap();
        let b = stp_gradients(&space, &params, (&x, &y), &full, std::slice::from_ref(&full), 0.0, 0.0).unwrap();
        for (ga, gb) in a.grads.iter().zip(&b.grads) {
            prop_assert!(ga.max_abs_diff(gb) <= 1e-12);
        }
    }
}
