//! Forward kernels shared by the tape and the plain-tensor API.

use crate::error::{Error, Result};
use crate::numerics::tensor::numel;
use crate::numerics::{Real, Tensor};

/// Layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

pub(crate) fn gelu_scalar<T: Real>(x: T) -> T {
    let half = T::c(0.5);
    half * x * (T::one() + (x * T::c(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// d/dx GELU(x) = Phi(x) + x * phi(x).
pub(crate) fn gelu_derivative<T: Real>(x: T) -> T {
    let cdf = T::c(0.5) * (T::one() + (x * T::c(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::c(0.5)).act_exp() * T::c(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

pub(crate) fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).act_exp())
    } else {
        let e = x.act_exp();
        e / (T::one() + e)
    }
}

/// Exact (erf-based) Gaussian error linear unit, elementwise.
pub fn gelu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::from_parts_unchecked(
        x.shape().to_vec(),
        x.data().iter().map(|&v| gelu_scalar(v)).collect(),
    )
}

/// Splits a shape around `axis` into (outer, axis length, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let len = shape[axis];
    let inner = numel(&shape[axis + 1..]);
    (outer, len, inner)
}

pub(crate) fn softmax_lastaxis<T: Real>(data: &[T], len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for (row, dst) in data.chunks(len).zip(out.chunks_mut(len)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (o, &v) in dst.iter_mut().zip(row) {
            *o = (v - max).act_exp();
            sum = sum + *o;
        }
        for o in dst.iter_mut() {
            *o = *o / sum;
        }
    }
    out
}

/// Softmax along `axis`, stabilized by subtracting the per-slice maximum.
pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.ndim() {
        return Err(Error::Shape(format!("softmax axis {axis} out of range for {:?}", x.shape())));
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    let mut buf = vec![T::zero(); len];
    for o in 0..outer {
        for i in 0..inner {
            for a in 0..len {
                buf[a] = src[(o * len + a) * inner + i];
            }
            let sm = softmax_lastaxis(&buf, len);
            for a in 0..len {
                out[(o * len + a) * inner + i] = sm[a];
            }
        }
    }
    Ok(Tensor::from_parts_unchecked(x.shape().to_vec(), out))
}

/// Normalized rows plus the per-row mean and reciprocal standard deviation.
pub(crate) struct LayerNormOut<T> {
    pub y: Vec<T>,
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn layer_norm_rows<T: Real>(x: &[T], d: usize, gamma: &[T], beta: &[T]) -> LayerNormOut<T> {
    let rows = x.len() / d;
    let eps = T::c(LAYER_NORM_EPS);
    let dn = T::from_usize(d).unwrap();
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[r * d + j] = h;
            y[r * d + j] = gamma[j] * h + beta[j];
        }
    }
    LayerNormOut { y, xhat, rstd }
}

/// Layer normalization over the last axis with population variance.
pub fn layer_norm<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<Tensor<T>> {
    let d = *x.shape().last().ok_or_else(|| Error::Shape("layer_norm on a scalar".into()))?;
    if gamma.numel() != d || beta.numel() != d {
        return Err(Error::Shape(format!(
            "layer_norm affine parameters must have length {d}, got {} and {}",
            gamma.numel(),
            beta.numel()
        )));
    }
    let out = layer_norm_rows(x.data(), d, gamma.data(), beta.data());
    Ok(Tensor::from_parts_unchecked(x.shape().to_vec(), out.y))
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(Error::Shape(format!("cannot broadcast {a:?} with {b:?}")));
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out` (zero along broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    let trimmed: Vec<usize> = small.iter().copied().skip_while(|&d| d == 1).collect();
    trimmed.len() <= big.len() && big[big.len() - trimmed.len()..] == trimmed[..]
}

/// Applies `f` elementwise over the broadcast of `a` and `b`.
pub(crate) fn broadcast_binary<T: Real>(
    a: &[T],
    a_shape: &[usize],
    b: &[T],
    b_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Result<(Vec<T>, Vec<usize>)> {
    let out_shape = broadcast_shape(a_shape, b_shape)?;
    let n = numel(&out_shape);
    if a.len() == n && b.len() == n {
        return Ok((a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(), out_shape));
    }
    if a.len() == n && is_suffix(b_shape, &out_shape) {
        let bl = b.len();
        let out = a.iter().enumerate().map(|(i, &x)| f(x, b[i % bl])).collect();
        return Ok((out, out_shape));
    }
    if b.len() == n && is_suffix(a_shape, &out_shape) {
        let al = a.len();
        let out = b.iter().enumerate().map(|(i, &y)| f(a[i % al], y)).collect();
        return Ok((out, out_shape));
    }
    let sa = broadcast_strides(a_shape, &out_shape);
    let sb = broadcast_strides(b_shape, &out_shape);
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let (mut oa, mut ob) = (0usize, 0usize);
    for _ in 0..n {
        out.push(f(a[oa], b[ob]));
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            oa -= sa[ax] * out_shape[ax];
            ob -= sb[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Ok((out, out_shape))
}

/// Sums `g` (shaped `out_shape`) down to `target` under broadcasting rules.
pub(crate) fn reduce_to_shape<T: Real>(g: &[T], out_shape: &[usize], target: &[usize]) -> Vec<T> {
    let tn = numel(target);
    if tn == g.len() {
        return g.to_vec();
    }
    let mut acc = vec![T::zero(); tn];
    if is_suffix(target, out_shape) {
        for (i, &v) in g.iter().enumerate() {
            acc[i % tn] = acc[i % tn] + v;
        }
        return acc;
    }
    let st = broadcast_strides(target, out_shape);
    let mut idx = vec![0usize; out_shape.len()];
    let mut ot = 0usize;
    for &v in g {
        acc[ot] = acc[ot] + v;
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            ot += st[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            ot -= st[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    acc
}

/// Transposes `data` so that output axis `i` is input axis `axes[i]`.
pub(crate) fn permute<T: Real>(data: &[T], shape: &[usize], axes: &[usize]) -> (Vec<T>, Vec<usize>) {
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if nd == 0 {
        return (data.to_vec(), out_shape);
    }
    // Innermost axis copied in a tight loop.
    let last = nd - 1;
    let inner_len = out_shape[last];
    let inner_stride = strides[last];
    let mut idx = vec![0usize; last];
    let mut off = 0usize;
    for _ in 0..n / inner_len {
        if inner_stride == 1 {
            out.extend_from_slice(&data[off..off + inner_len]);
        } else {
            out.extend((0..inner_len).map(|j| data[off + j * inner_stride]));
        }
        for ax in (0..last).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}
