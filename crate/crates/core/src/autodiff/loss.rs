//! Classification and distillation losses over `[B, K]` logits.
//!
//! These are the value-level kernels; [`super::Tape`] wraps them with
//! gradient recording.

use crate::tensor::Tensor;

use super::kernels::dims2;
use super::AutodiffError;

/// Norms below this are treated as zero by [`normalized_probs`].
pub const ZERO_NORM: f64 = 1e-12;

fn check_classes(logits: &Tensor) -> Result<(usize, usize), AutodiffError> {
    let (b, k) = dims2(logits, "logits")?;
    if k < 2 {
        return Err(AutodiffError::Shape(format!("need at least 2 classes, got {k}")));
    }
    Ok((b, k))
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Row-wise softmax.
pub fn softmax(logits: &Tensor) -> Result<Tensor, AutodiffError> {
    let (b, k) = dims2(logits, "logits")?;
    let mut out = vec![0.0; b * k];
    for i in 0..b {
        softmax_row(logits.row(i), &mut out[i * k..(i + 1) * k]);
    }
    Ok(Tensor::new(vec![b, k], out))
}

/// Mean cross-entropy; also returns the softmax probabilities for backward.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor), AutodiffError> {
    let (b, k) = check_classes(logits)?;
    if labels.len() != b {
        return Err(AutodiffError::Shape(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(AutodiffError::LabelOutOfRange { label: bad, classes: k });
    }
    let probs = softmax(logits)?;
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    Ok((total / b as f64, probs))
}

pub fn cross_entropy_backward(probs: &Tensor, labels: &[usize], upstream: f64) -> Tensor {
    let (b, k) = (probs.shape()[0], probs.shape()[1]);
    let mut g = probs.data().to_vec();
    for (i, &y) in labels.iter().enumerate() {
        g[i * k + y] -= 1.0;
    }
    let scale = upstream / b as f64;
    for v in &mut g {
        *v *= scale;
    }
    Tensor::new(vec![b, k], g)
}

/// Softmax of each logit row divided by its L2 norm. Rows with norm below
/// [`ZERO_NORM`] map to the uniform distribution.
pub fn normalized_probs(logits: &Tensor) -> Result<Tensor, AutodiffError> {
    let (b, k) = check_classes(logits)?;
    let mut out = vec![0.0; b * k];
    let mut scaled = vec![0.0; k];
    for i in 0..b {
        let row = logits.row(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dst = &mut out[i * k..(i + 1) * k];
        if norm < ZERO_NORM {
            dst.fill(1.0 / k as f64);
            continue;
        }
        for (s, v) in scaled.iter_mut().zip(row) {
            *s = v / norm;
        }
        softmax_row(&scaled, dst);
    }
    Ok(Tensor::new(vec![b, k], out))
}

/// Batch-mean `KL(p̂_teacher ‖ p̂_student)` over normalized probabilities.
///
/// Returns the loss and both probability tables for the backward pass.
pub fn normalized_kl(teacher: &Tensor, student: &Tensor) -> Result<(f64, Tensor, Tensor), AutodiffError> {
    if teacher.shape() != student.shape() {
        return Err(AutodiffError::Shape(format!(
            "teacher {:?} and student {:?} logits differ in shape",
            teacher.shape(),
            student.shape()
        )));
    }
    let pt = normalized_probs(teacher)?;
    let ps = normalized_probs(student)?;
    let (b, _) = dims2(teacher, "logits")?;
    let mut total = 0.0;
    for (t, s) in pt.data().iter().zip(ps.data()) {
        if *t > 0.0 {
            total += t * (t.ln() - s.ln());
        }
    }
    Ok((total / b as f64, pt, ps))
}

/// Gradient of [`normalized_kl`] with respect to the student logits.
///
/// With `u = z/‖z‖`, `∂L/∂u = p̂_s − p̂_t` and
/// `∂u/∂z = (I − u uᵀ)/‖z‖`.
pub fn normalized_kl_backward(student: &Tensor, pt: &Tensor, ps: &Tensor, upstream: f64) -> Tensor {
    let (b, k) = (student.shape()[0], student.shape()[1]);
    let mut g = vec![0.0; b * k];
    let scale = upstream / b as f64;
    for i in 0..b {
        let z = student.row(i);
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < ZERO_NORM {
            continue;
        }
        let gu: Vec<f64> = ps.row(i).iter().zip(pt.row(i)).map(|(s, t)| s - t).collect();
        let dot: f64 = gu.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() / (norm * norm);
        for j in 0..k {
            g[i * k + j] = scale * (gu[j] - dot * z[j]) / norm;
        }
    }
    Tensor::new(vec![b, k], g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, v: &[f64]) -> Tensor {
        Tensor::new(vec![rows, v.len() / rows], v.to_vec())
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let (l, _) = cross_entropy(&Tensor::zeros(&[1, 10]), &[3]).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_true_class_is_near_zero() {
        let mut z = vec![0.0; 5];
        z[2] = 50.0;
        let (l, _) = cross_entropy(&t(1, &z), &[2]).unwrap();
        assert!((0.0..=1e-9).contains(&l));
    }

    #[test]
    fn batch_mean_matches_scalar_oracle() {
        let z = [0.3, -1.2, 2.0, 0.5, 0.5, -0.7];
        let labels = [2, 0];
        let oracle = |row: &[f64], y: usize| {
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            -(row[y].exp() / s).ln()
        };
        let expected = (oracle(&z[0..3], 2) + oracle(&z[3..6], 0)) / 2.0;
        let (l, _) = cross_entropy(&t(2, &z), &labels).unwrap();
        assert!((l - expected).abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let err = cross_entropy(&Tensor::zeros(&[1, 3]), &[3]).unwrap_err();
        assert!(matches!(err, AutodiffError::LabelOutOfRange { label: 3, classes: 3 }));
    }

    #[test]
    fn zero_logits_hit_uniform_guard() {
        let p = normalized_probs(&t(1, &[0.0, 0.0])).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
    }

    #[test]
    fn three_four_example() {
        // exponents 0.6 and 0.8: p = (1, e^0.2) / (1 + e^0.2)
        let e = 0.2f64.exp();
        let oracle = [1.0 / (1.0 + e), e / (1.0 + e)];
        let p = normalized_probs(&t(1, &[3.0, 4.0])).unwrap();
        assert!((p.data()[0] - 0.4502).abs() < 1e-4);
        assert!((p.data()[1] - 0.5498).abs() < 1e-4);
        assert!((p.data()[0] - oracle[0]).abs() < 1e-15);
    }

    #[test]
    fn kl_of_swapped_pair() {
        // Hand evaluation: KL((a,b) ‖ (b,a)) = (b − a)·ln(b/a) with a = 1/(1+e^0.2).
        let a = 1.0 / (1.0 + 0.2f64.exp());
        let b = 1.0 - a;
        let oracle = a * (a / b).ln() + b * (b / a).ln();
        let (kl, _, _) = normalized_kl(&t(1, &[3.0, 4.0]), &t(1, &[4.0, 3.0])).unwrap();
        assert!((kl - oracle).abs() < 1e-14);
        assert!((kl - 0.0199).abs() < 1e-3);
    }

    #[test]
    fn kl_self_is_zero() {
        let z = t(2, &[1.0, -2.0, 0.5, 3.0, 3.0, 3.0]);
        let (kl, _, _) = normalized_kl(&z, &z).unwrap();
        assert!(kl.abs() < 1e-12);
    }
}
