//! Every backward rule against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stp::autodiff::{Tape, Var};
use stp::tensor::Tensor;

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;
const TRIALS: usize = 100;

/// Relative error with a small absolute floor so exact zeros compare cleanly.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Builds a scalar from `inputs` on a fresh tape. Non-scalar outputs are
/// reduced with a sum of squares.
type Build = dyn Fn(&mut Tape, &[Var]) -> Var;

fn scalar_of(tape: &mut Tape, out: Var) -> Var {
    if tape.value(out).numel() == 1 && tape.value(out).shape().is_empty() {
        out
    } else {
        let mask = vec![true; tape.value(out).numel()];
        tape.masked_sq_sum(out, &mask).unwrap()
    }
}

fn eval(build: &Build, inputs: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let s = scalar_of(&mut tape, out);
    tape.value(s).item()
}

/// Max relative error between analytic and numeric gradients over all inputs.
fn check(build: &Build, inputs: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let s = scalar_of(&mut tape, out);
    let grads = tape.backward(s).unwrap();
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= H;
            let numeric = (eval(build, &plus) - eval(build, &minus)) / (2.0 * H);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    worst
}

/// Uniform entries in [-1, 1] kept away from zero (ReLU kink).
fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

fn run_kind(name: &str, mut make: impl FnMut(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<Build>)) {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ name.len() as u64);
    let mut worst: f64 = 0.0;
    for _ in 0..TRIALS {
        let (inputs, build) = make(&mut rng);
        worst = worst.max(check(build.as_ref(), &inputs));
    }
    println!("{name:<16} max rel err {worst:.3e}");
    assert!(worst <= TOL, "{name}: max relative error {worst:e} exceeds {TOL:e}");
}

#[test]
fn matmul_grad() {
    run_kind("matmul", |rng| {
        let (m, k, n) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
        (
            vec![rand_t(&[m, k], rng), rand_t(&[k, n], rng)],
            Box::new(|t: &mut Tape, v: &[Var]| t.matmul(v[0], v[1]).unwrap()),
        )
    });
}

#[test]
fn linear_grad() {
    run_kind("linear", |rng| {
        let (n, i, o) = (rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..4));
        (
            vec![rand_t(&[n, i], rng), rand_t(&[o, i], rng), rand_t(&[o], rng)],
            Box::new(|t: &mut Tape, v: &[Var]| t.linear(v[0], v[1], Some(v[2])).unwrap()),
        )
    });
}

#[test]
fn conv2d_grad() {
    run_kind("conv2d", |rng| {
        let n = rng.random_range(1..3);
        let c = rng.random_range(1..3);
        let o = rng.random_range(1..3);
        let k = [1, 3][rng.random_range(0..2)];
        let stride = rng.random_range(1..3);
        let pad = if k == 3 { rng.random_range(0..2) } else { 0 };
        let hw = rng.random_range(3..6);
        let with_bias = rng.random_bool(0.5);
        let mut inputs = vec![rand_t(&[n, c, hw, hw], rng), rand_t(&[o, c, k, k], rng)];
        if with_bias {
            inputs.push(rand_t(&[o], rng));
        }
        (
            inputs,
            Box::new(move |t: &mut Tape, v: &[Var]| {
                t.conv2d(v[0], v[1], v.get(2).copied(), stride, pad).unwrap()
            }),
        )
    });
}

#[test]
fn add_and_scale_grad() {
    run_kind("add", |rng| {
        let shape = [rng.random_range(1..3), rng.random_range(1..4)];
        (
            vec![rand_t(&shape, rng), rand_t(&shape, rng), rand_t(&shape, rng)],
            Box::new(|t: &mut Tape, v: &[Var]| {
                let s = t.add(v).unwrap();
                t.scale(s, -0.7)
            }),
        )
    });
}

#[test]
fn relu_grad() {
    run_kind("relu", |rng| {
        let shape = [rng.random_range(1..3), rng.random_range(1..6)];
        (vec![rand_t(&shape, rng)], Box::new(|t: &mut Tape, v: &[Var]| t.relu(v[0])))
    });
}

#[test]
fn sigmoid_grad() {
    run_kind("sigmoid", |rng| {
        let shape = [rng.random_range(1..3), rng.random_range(1..6)];
        (vec![rand_t(&shape, rng)], Box::new(|t: &mut Tape, v: &[Var]| t.sigmoid(v[0])))
    });
}

#[test]
fn flatten_and_pool_grad() {
    run_kind("global_pool", |rng| {
        let shape = [rng.random_range(1..3), rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4)];
        (
            vec![rand_t(&shape, rng)],
            Box::new(|t: &mut Tape, v: &[Var]| {
                let p = t.global_avg_pool(v[0]).unwrap();
                let s = t.sigmoid(p);
                t.flatten(s)
            }),
        )
    });
}

#[test]
fn max_pool_grad() {
    run_kind("max_pool", |rng| {
        let shape = [rng.random_range(1..3), rng.random_range(1..3), 4, 4];
        let (k, s, p) = [(2, 2, 0), (3, 2, 1), (3, 1, 1)][rng.random_range(0..3)];
        (
            vec![rand_t(&shape, rng)],
            Box::new(move |t: &mut Tape, v: &[Var]| t.max_pool2d(v[0], k, s, p).unwrap()),
        )
    });
}

#[test]
fn concat_grad() {
    run_kind("concat", |rng| {
        let n = rng.random_range(1..3);
        let (c1, c2) = (rng.random_range(1..3), rng.random_range(1..4));
        (
            vec![rand_t(&[n, c1, 2, 2], rng), rand_t(&[n, c2, 2, 2], rng)],
            Box::new(|t: &mut Tape, v: &[Var]| {
                let c = t.concat(v).unwrap();
                t.sigmoid(c)
            }),
        )
    });
}

#[test]
fn slice_grad() {
    run_kind("slice_weight", |rng| {
        let (o, i) = (rng.random_range(2..5), rng.random_range(2..5));
        let keep = rng.random_range(1..=o);
        let in_idx: Vec<usize> = (0..i).filter(|_| rng.random_bool(0.6)).collect();
        let in_idx = if in_idx.is_empty() { vec![0] } else { in_idx };
        (
            vec![rand_t(&[o, i, 3], rng), rand_t(&[o], rng)],
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let w = t.slice_weight(v[0], keep, &in_idx);
                let b = t.slice_prefix(v[1], keep);
                let wf = t.flatten(w);
                let wf = t.sigmoid(wf);
                let bb = t.sigmoid(b);
                let s1 = t.masked_sq_sum(wf, &vec![true; keep * in_idx.len() * 3]).unwrap();
                let s2 = t.masked_sq_sum(bb, &vec![true; keep]).unwrap();
                t.add(&[s1, s2]).unwrap()
            }),
        )
    });
}

#[test]
fn cross_entropy_grad() {
    run_kind("cross_entropy", |rng| {
        let (b, k) = (rng.random_range(1..4), rng.random_range(2..6));
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
        (
            vec![rand_t(&[b, k], rng)],
            Box::new(move |t: &mut Tape, v: &[Var]| t.cross_entropy(v[0], &labels).unwrap()),
        )
    });
}

#[test]
fn normalized_kl_grad() {
    run_kind("normalized_kl", |rng| {
        let (b, k) = (rng.random_range(1..4), rng.random_range(2..6));
        let teacher = rand_t(&[b, k], rng);
        (
            vec![rand_t(&[b, k], rng)],
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let tc = t.constant(teacher.clone());
                t.normalized_kl(tc, v[0]).unwrap()
            }),
        )
    });
}

#[test]
fn masked_sq_sum_grad() {
    run_kind("masked_sq_sum", |rng| {
        let n = rng.random_range(1..8);
        let mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        (
            vec![rand_t(&[n], rng)],
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let s = t.sigmoid(v[0]);
                t.masked_sq_sum(s, &mask).unwrap()
            }),
        )
    });
}

#[test]
fn teacher_gradient_is_identically_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..TRIALS {
        let mut tape = Tape::new();
        let t = tape.param(rand_t(&[2, 4], &mut rng));
        let s = tape.param(rand_t(&[2, 4], &mut rng));
        let l = tape.normalized_kl(t, s).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(t).is_none_or(|g| g.data().iter().all(|v| *v == 0.0)));
    }
}
