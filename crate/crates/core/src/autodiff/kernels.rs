//! Forward and backward kernels for every node kind.
//!
//! All kernels are plain functions over row-major slices. Reduction order is
//! fixed, so results are bit-reproducible.

use crate::tensor::Tensor;

use super::AutodiffError;

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub(crate) fn gemm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, AutodiffError> {
    let (m, k) = dims2(a, "matmul lhs")?;
    let (k2, n) = dims2(b, "matmul rhs")?;
    if k != k2 {
        return Err(AutodiffError::Shape(format!(
            "matmul inner dims differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm_acc(a.data(), b.data(), &mut out, m, k, n);
    Ok(Tensor::new(vec![m, n], out))
}

pub(crate) fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize), AutodiffError> {
    match t.shape() {
        [a, b] => Ok((*a, *b)),
        s => Err(AutodiffError::Shape(format!("{what}: expected 2-d tensor, got {s:?}"))),
    }
}

pub(crate) fn dims4(t: &Tensor, what: &str) -> Result<[usize; 4], AutodiffError> {
    match t.shape() {
        [a, b, c, d] => Ok([*a, *b, *c, *d]),
        s => Err(AutodiffError::Shape(format!("{what}: expected 4-d tensor, got {s:?}"))),
    }
}

/// `y = x · wᵀ + b` with `x: [N, I]`, `w: [O, I]`, `b: [O]`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor, AutodiffError> {
    let (n, i) = dims2(x, "linear input")?;
    let (o, wi) = dims2(w, "linear weight")?;
    if i != wi {
        return Err(AutodiffError::Shape(format!(
            "linear expects {wi} input features, got {i}"
        )));
    }
    let mut out = vec![0.0; n * o];
    if let Some(b) = b {
        if b.numel() != o {
            return Err(AutodiffError::Shape(format!("linear bias has {} entries, expected {o}", b.numel())));
        }
        for r in 0..n {
            out[r * o..(r + 1) * o].copy_from_slice(b.data());
        }
    }
    gemm_nt_acc(x.data(), w.data(), &mut out, n, i, o);
    Ok(Tensor::new(vec![n, o], out))
}

/// Returns `(dx, dw, db)` for [`linear`].
pub fn linear_backward(
    x: &Tensor,
    w: &Tensor,
    has_bias: bool,
    gy: &Tensor,
) -> (Tensor, Tensor, Option<Tensor>) {
    let (n, i) = (x.shape()[0], x.shape()[1]);
    let o = w.shape()[0];
    let mut dx = vec![0.0; n * i];
    gemm_acc(gy.data(), w.data(), &mut dx, n, o, i);
    let mut dw = vec![0.0; o * i];
    gemm_tn_acc(gy.data(), x.data(), &mut dw, n, o, i);
    let db = has_bias.then(|| {
        let mut db = vec![0.0; o];
        for r in 0..n {
            for (d, g) in db.iter_mut().zip(gy.row(r)) {
                *d += g;
            }
        }
        Tensor::new(vec![o], db)
    });
    (Tensor::new(vec![n, i], dx), Tensor::new(w.shape().to_vec(), dw), db)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    geom: ConvGeom,
    ho: usize,
    wo: usize,
    cols: &mut [f64],
    ld: usize,
    off: usize,
) {
    let p = ho * wo;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let dst = &mut cols[row * ld + off..row * ld + off + p];
                for oy in 0..ho {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    for ox in 0..wo {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        dst[oy * wo + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            x[(ci * h + iy as usize) * w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_acc(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    geom: ConvGeom,
    ho: usize,
    wo: usize,
    dx: &mut [f64],
    ld: usize,
    off: usize,
) {
    let p = ho * wo;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let src = &cols[row * ld + off..row * ld + off + p];
                for oy in 0..ho {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        dx[(ci * h + iy as usize) * w + ix as usize] += src[oy * wo + ox];
                    }
                }
            }
        }
    }
}

/// 2-d convolution. `x: [N, C, H, W]`, `w: [O, C, kh, kw]`.
///
/// Returns the output together with the unfolded input columns, which the
/// backward pass reuses.
pub fn conv2d(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    geom: ConvGeom,
) -> Result<(Tensor, Vec<f64>), AutodiffError> {
    let [n, c, h, wd] = dims4(x, "conv2d input")?;
    let [o, wc, kh, kw] = dims4(w, "conv2d weight")?;
    if c != wc {
        return Err(AutodiffError::Shape(format!(
            "conv2d expects {wc} input channels, got {c}"
        )));
    }
    let (ho, wo) = match (
        conv_out_size(h, kh, geom.stride, geom.pad),
        conv_out_size(wd, kw, geom.stride, geom.pad),
    ) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(AutodiffError::Shape(format!(
                "conv2d kernel {kh}x{kw} does not fit input {h}x{wd} with padding {}",
                geom.pad
            )))
        }
    };
    let ck = c * kh * kw;
    let p = ho * wo;
    let np = n * p;
    // One column block per sample: cols is [ck, n·p].
    let mut cols = vec![0.0; ck * np];
    for s in 0..n {
        im2col(&x.data()[s * c * h * wd..(s + 1) * c * h * wd], c, h, wd, kh, kw, geom, ho, wo, &mut cols, np, s * p);
    }
    let mut tmp = vec![0.0; o * np];
    gemm_acc(w.data(), &cols, &mut tmp, o, ck, np);
    let mut out = vec![0.0; n * o * p];
    for oc in 0..o {
        let bv = b.map_or(0.0, |b| b.data()[oc]);
        for s in 0..n {
            let src = &tmp[oc * np + s * p..oc * np + (s + 1) * p];
            for (d, v) in out[(s * o + oc) * p..(s * o + oc + 1) * p].iter_mut().zip(src) {
                *d = v + bv;
            }
        }
    }
    Ok((Tensor::new(vec![n, o, ho, wo], out), cols))
}

pub fn conv2d_backward(
    x_shape: &[usize],
    w: &Tensor,
    cols: &[f64],
    has_bias: bool,
    geom: ConvGeom,
    gy: &Tensor,
) -> (Tensor, Tensor, Option<Tensor>) {
    let (n, c, h, wd) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (ho, wo) = (gy.shape()[2], gy.shape()[3]);
    let ck = c * kh * kw;
    let p = ho * wo;
    let np = n * p;
    let mut gt = vec![0.0; o * np];
    for s in 0..n {
        for oc in 0..o {
            gt[oc * np + s * p..oc * np + (s + 1) * p].copy_from_slice(&gy.data()[(s * o + oc) * p..(s * o + oc + 1) * p]);
        }
    }
    let mut dw = vec![0.0; o * ck];
    gemm_nt_acc(&gt, cols, &mut dw, o, np, ck);
    let mut dcols = vec![0.0; ck * np];
    gemm_tn_acc(w.data(), &gt, &mut dcols, o, ck, np);
    let mut dx = vec![0.0; n * c * h * wd];
    for s in 0..n {
        col2im_acc(&dcols, c, h, wd, kh, kw, geom, ho, wo, &mut dx[s * c * h * wd..(s + 1) * c * h * wd], np, s * p);
    }
    let db: Vec<f64> = (0..o).map(|oc| gt[oc * np..(oc + 1) * np].iter().sum()).collect();
    (
        Tensor::new(x_shape.to_vec(), dx),
        Tensor::new(w.shape().to_vec(), dw),
        has_bias.then(|| Tensor::new(vec![o], db)),
    )
}

/// Max pooling; returns the output and the flat input index chosen per output.
pub fn max_pool2d(x: &Tensor, kernel: usize, geom: ConvGeom) -> Result<(Tensor, Vec<usize>), AutodiffError> {
    let [n, c, h, w] = dims4(x, "max_pool input")?;
    let (ho, wo) = match (
        conv_out_size(h, kernel, geom.stride, geom.pad),
        conv_out_size(w, kernel, geom.stride, geom.pad),
    ) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(AutodiffError::Shape(format!("max_pool window {kernel} does not fit {h}x{w}"))),
    };
    let mut out = vec![0.0; n * c * ho * wo];
    let mut arg = vec![0usize; out.len()];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for ky in 0..kernel {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if x.data()[idx] > best {
                            best = x.data()[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (plane * ho + oy) * wo + ox;
                out[o] = best;
                arg[o] = best_idx;
            }
        }
    }
    Ok((Tensor::new(vec![n, c, ho, wo], out), arg))
}

pub fn global_avg_pool(x: &Tensor) -> Result<Tensor, AutodiffError> {
    let [n, c, h, w] = dims4(x, "global_pool input")?;
    let area = (h * w) as f64;
    let data = x
        .data()
        .chunks(h * w)
        .map(|plane| plane.iter().sum::<f64>() / area)
        .collect();
    Ok(Tensor::new(vec![n, c, 1, 1], data))
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Concatenation along axis 1 of tensors that agree on every other axis.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor, AutodiffError> {
    let first = parts
        .first()
        .ok_or_else(|| AutodiffError::Shape("concat of zero tensors".into()))?;
    let n = first.shape()[0];
    let inner: usize = first.shape()[2..].iter().product();
    let mut channels = 0;
    for p in parts {
        if p.shape().len() != first.shape().len() || p.shape()[0] != n || p.shape()[2..] != first.shape()[2..] {
            return Err(AutodiffError::Shape(format!(
                "concat operands disagree: {:?} vs {:?}",
                first.shape(),
                p.shape()
            )));
        }
        channels += p.shape()[1];
    }
    let mut out = Vec::with_capacity(n * channels * inner);
    for s in 0..n {
        for p in parts {
            let c = p.shape()[1];
            out.extend_from_slice(&p.data()[s * c * inner..(s + 1) * c * inner]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[1] = channels;
    Ok(Tensor::new(shape, out))
}

/// Gathers a sub-block of a weight laid out as `[O, I, rest...]`: the first
/// `out_keep` rows and the input columns listed in `in_idx`.
pub fn slice_weight(w: &Tensor, out_keep: usize, in_idx: &[usize]) -> Tensor {
    let shape = w.shape();
    let full_in = shape[1];
    let rest: usize = shape[2..].iter().product();
    let mut data = Vec::with_capacity(out_keep * in_idx.len() * rest);
    for o in 0..out_keep {
        for &i in in_idx {
            let start = (o * full_in + i) * rest;
            data.extend_from_slice(&w.data()[start..start + rest]);
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape[0] = out_keep;
    new_shape[1] = in_idx.len();
    Tensor::new(new_shape, data)
}

pub fn slice_weight_backward(full_shape: &[usize], out_keep: usize, in_idx: &[usize], g: &Tensor) -> Tensor {
    let full_in = full_shape[1];
    let rest: usize = full_shape[2..].iter().product();
    let mut full = Tensor::zeros(full_shape);
    let dst = full.data_mut();
    let src = g.data();
    let mut k = 0;
    for o in 0..out_keep {
        for &i in in_idx {
            let start = (o * full_in + i) * rest;
            for r in 0..rest {
                dst[start + r] += src[k];
                k += 1;
            }
        }
    }
    full
}
