use crate::tensor::Tensor;

use super::kernels::{self, ConvGeom};
use super::loss;
use super::AutodiffError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// Copy of another value that blocks gradient flow.
    Detached,
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cols: Vec<f64> },
    Add(Vec<Var>),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Reshape(Var),
    GlobalAvgPool(Var),
    MaxPool { x: Var, argmax: Vec<usize> },
    Concat(Vec<Var>),
    SliceWeight { w: Var, out_keep: usize, in_idx: Vec<usize> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Tensor },
    NormalizedKl { student: Var, pt: Tensor, ps: Tensor },
    MaskedSqSum { x: Var, mask: Vec<bool> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode recording of a computation.
///
/// Every operation appends a node; [`Tape::backward`] walks the nodes in
/// exact reverse order. A tape is single-use and confined to one thread.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.push(value, Op::Detached, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, AutodiffError> {
        let out = kernels::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var, AutodiffError> {
        let geom = ConvGeom { stride, pad };
        let (out, cols) = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), geom)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Conv2d { x, w, b, geom, cols }, rg))
    }

    pub fn add(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let (first, rest) = parts
            .split_first()
            .ok_or_else(|| AutodiffError::Shape("add of zero operands".into()))?;
        let mut out = self.value(*first).clone();
        for p in rest {
            let v = self.value(*p);
            if v.shape() != out.shape() {
                return Err(AutodiffError::Shape(format!(
                    "add operands differ: {:?} vs {:?}",
                    out.shape(),
                    v.shape()
                )));
            }
            out.add_assign(v);
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(out, Op::Add(parts.to_vec()), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let mut out = self.value(x).clone();
        out.scale(factor);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, factor), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a.max(0.0)).collect());
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| kernels::sigmoid(*a)).collect());
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    /// Flattens all axes after the first.
    pub fn flatten(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = v.shape().first().copied().unwrap_or(1);
        let rest = v.numel() / n.max(1);
        let out = v.clone().reshaped(vec![n, rest]);
        let rg = self.rg(x);
        self.push(out, Op::Reshape(x), rg)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let out = kernels::global_avg_pool(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::GlobalAvgPool(x), rg))
    }

    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var, AutodiffError> {
        let (out, argmax) = kernels::max_pool2d(self.value(x), kernel, ConvGeom { stride, pad })?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::MaxPool { x, argmax }, rg))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let values: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let out = kernels::concat_channels(&values)?;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    /// Weight sub-block `[..out_keep, in_idx, ...]` of a `[O, I, ...]` tensor.
    pub fn slice_weight(&mut self, w: Var, out_keep: usize, in_idx: &[usize]) -> Var {
        let out = kernels::slice_weight(self.value(w), out_keep, in_idx);
        let rg = self.rg(w);
        self.push(out, Op::SliceWeight { w, out_keep, in_idx: in_idx.to_vec() }, rg)
    }

    /// Prefix of a 1-d tensor (bias slicing).
    pub fn slice_prefix(&mut self, b: Var, keep: usize) -> Var {
        let full = self.value(b).numel();
        // A 1-d vector viewed as [O, 1].
        let w = self.value(b).clone().reshaped(vec![full, 1]);
        let mut out = kernels::slice_weight(&w, keep, &[0]);
        out = out.reshaped(vec![keep]);
        let rg = self.rg(b);
        self.push(out, Op::SliceWeight { w: b, out_keep: keep, in_idx: vec![0] }, rg)
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, AutodiffError> {
        let (l, probs) = loss::cross_entropy(self.value(logits), labels)?;
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(l), Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, rg))
    }

    /// Normalized-KL distillation loss. The teacher side never receives
    /// gradient, whatever its recording state.
    pub fn normalized_kl(&mut self, teacher: Var, student: Var) -> Result<Var, AutodiffError> {
        let (l, pt, ps) = loss::normalized_kl(self.value(teacher), self.value(student))?;
        let rg = self.rg(student);
        Ok(self.push(Tensor::scalar(l), Op::NormalizedKl { student, pt, ps }, rg))
    }

    /// Sum of squares of the entries where `mask` is true.
    pub fn masked_sq_sum(&mut self, x: Var, mask: &[bool]) -> Result<Var, AutodiffError> {
        let v = self.value(x);
        if mask.len() != v.numel() {
            return Err(AutodiffError::Shape(format!(
                "mask of {} entries for a tensor of {}",
                mask.len(),
                v.numel()
            )));
        }
        let s = v.data().iter().zip(mask).filter(|(_, m)| **m).map(|(a, _)| a * a).sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::MaskedSqSum { x, mask: mask.to_vec() }, rg))
    }

    /// Gradients of the scalar `loss` with respect to every recorded value
    /// that requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        if self.value(loss).numel() != 1 {
            return Err(AutodiffError::Shape(format!(
                "backward needs a scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf | Op::Detached => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                let mut da = vec![0.0; m * k];
                kernels::gemm_nt_acc(g.data(), bv.data(), &mut da, m, n, k);
                let mut db = vec![0.0; k * n];
                kernels::gemm_tn_acc(av.data(), g.data(), &mut db, m, k, n);
                self.accumulate(grads, *a, Tensor::new(vec![m, k], da));
                self.accumulate(grads, *b, Tensor::new(vec![k, n], db));
            }
            Op::Linear { x, w, b } => {
                let (dx, dw, db) = kernels::linear_backward(self.value(*x), self.value(*w), b.is_some(), g);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
                if let (Some(b), Some(db)) = (b, db) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let (dx, dw, db) =
                    kernels::conv2d_backward(self.value(*x).shape(), self.value(*w), cols, b.is_some(), *geom, g);
                if self.rg(*x) {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, dw);
                if let (Some(b), Some(db)) = (b, db) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(parts) => {
                for p in parts {
                    self.accumulate(grads, *p, g.clone());
                }
            }
            Op::Scale(x, f) => {
                let mut d = g.clone();
                d.scale(*f);
                self.accumulate(grads, *x, d);
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let d = xv.data().iter().zip(g.data()).map(|(a, g)| if *a > 0.0 { *g } else { 0.0 }).collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d));
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let d = y.data().iter().zip(g.data()).map(|(s, g)| g * s * (1.0 - s)).collect();
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), d));
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.clone().reshaped(shape));
            }
            Op::GlobalAvgPool(x) => {
                let xv = self.value(*x);
                let area = xv.shape()[2] * xv.shape()[3];
                let mut d = Vec::with_capacity(xv.numel());
                for gv in g.data() {
                    d.extend(std::iter::repeat_n(gv / area as f64, area));
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d));
            }
            Op::MaxPool { x, argmax } => {
                let mut d = Tensor::zeros(self.value(*x).shape());
                let dd = d.data_mut();
                for (gv, &i) in g.data().iter().zip(argmax) {
                    if i != usize::MAX {
                        dd[i] += gv;
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Concat(parts) => {
                let n = g.shape()[0];
                let inner: usize = g.shape()[2..].iter().product();
                let total_c = g.shape()[1];
                let mut offset = 0;
                for p in parts {
                    let shape = self.value(*p).shape().to_vec();
                    let c = shape[1];
                    let mut d = Vec::with_capacity(n * c * inner);
                    for s in 0..n {
                        let start = (s * total_c + offset) * inner;
                        d.extend_from_slice(&g.data()[start..start + c * inner]);
                    }
                    offset += c;
                    self.accumulate(grads, *p, Tensor::new(shape, d));
                }
            }
            Op::SliceWeight { w, out_keep, in_idx } => {
                let full_shape = self.value(*w).shape().to_vec();
                if full_shape.len() == 1 {
                    let g2 = g.clone().reshaped(vec![*out_keep, 1]);
                    let d = kernels::slice_weight_backward(&[full_shape[0], 1], *out_keep, in_idx, &g2);
                    self.accumulate(grads, *w, d.reshaped(full_shape));
                } else {
                    let d = kernels::slice_weight_backward(&full_shape, *out_keep, in_idx, g);
                    self.accumulate(grads, *w, d);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let d = loss::cross_entropy_backward(probs, labels, g.item());
                self.accumulate(grads, *logits, d);
            }
            Op::NormalizedKl { student, pt, ps } => {
                let d = loss::normalized_kl_backward(self.value(*student), pt, ps, g.item());
                self.accumulate(grads, *student, d);
            }
            Op::MaskedSqSum { x, mask } => {
                let xv = self.value(*x);
                let gs = g.item();
                let d = xv.data().iter().zip(mask).map(|(a, m)| if *m { 2.0 * a * gs } else { 0.0 }).collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_backward_is_one_to_each() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::new(vec![1, 2], vec![1.0, 2.0]));
        let b = tape.param(Tensor::new(vec![1, 2], vec![3.0, 4.0]));
        let s = tape.add(&[a, b]).unwrap();
        // Probe with a fixed weight so the upstream gradient is all ones.
        let ones = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 1.0]));
        let l = tape.linear(s, ones, None).unwrap();
        let grads = tape.backward(l).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn relu_identity_on_nonnegative() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3], vec![0.0, 1.5, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn teacher_side_gets_no_gradient() {
        let mut tape = Tape::new();
        let t = tape.param(Tensor::new(vec![1, 3], vec![0.1, 0.7, -0.3]));
        let s = tape.param(Tensor::new(vec![1, 3], vec![0.4, -0.2, 0.9]));
        let l = tape.normalized_kl(t, s).unwrap();
        let grads = tape.backward(l).unwrap();
        assert!(grads.get(t).is_none());
        assert!(grads.get(s).unwrap().data().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn detached_values_stop_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![1, 2], vec![1.0, -1.0]));
        let d = tape.detach(x);
        let l = tape.cross_entropy(d, &[0]).unwrap();
        let grads = tape.backward(l).unwrap();
        assert!(grads.get(x).is_none());
    }
}
