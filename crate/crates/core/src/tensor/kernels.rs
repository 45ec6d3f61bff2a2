//! Raw numeric kernels shared by the forward and backward passes.

use super::numel_of;

/// Strided view of a matrix inside a flat buffer.
#[derive(Clone, Copy)]
pub(crate) struct MatView {
    pub offset: usize,
    pub rs: isize,
    pub cs: isize,
}

impl MatView {
    /// Row-major `rows x cols` block at `offset`, optionally read transposed.
    pub fn row_major(offset: usize, cols: usize, transposed: bool) -> Self {
        if transposed {
            MatView { offset, rs: 1, cs: cols as isize }
        } else {
            MatView { offset, rs: cols as isize, cs: 1 }
        }
    }
}

/// `c = alpha * a * b + beta * c` for an `m x k` by `k x n` product.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    av: MatView,
    b: &[f64],
    bv: MatView,
    beta: f64,
    c: &mut [f64],
    cv: MatView,
) {
    if m == 0 || n == 0 {
        return;
    }
    let extent = |v: MatView, rows: usize, cols: usize| v.offset + (rows - 1) * v.rs as usize + (cols - 1) * v.cs as usize;
    if k > 0 {
        assert!(extent(av, m, k) < a.len());
        assert!(extent(bv, k, n) < b.len());
    }
    assert!(extent(cv, m, n) < c.len());
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is uniquely borrowed so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.offset),
            av.rs,
            av.cs,
            b.as_ptr().add(bv.offset),
            bv.rs,
            bv.cs,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs,
            cv.cs,
        );
    }
}

/// NumPy-style broadcast of two shapes, aligned on trailing axes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` expressed in the index space of `out`, zero on
/// broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let o = i + rank - shape.len();
        strides[o] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

/// For every flat output index, the flat indices into `a` and `b`.
pub(crate) fn broadcast_pairs(a: &[usize], b: &[usize], out: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n = numel_of(out);
    if a == out && b == out {
        (0..n).for_each(|i| f(i, i, i));
    } else if a == out && is_suffix(b, out) {
        let nb = numel_of(b);
        for base in (0..n).step_by(nb) {
            (0..nb).for_each(|j| f(base + j, base + j, j));
        }
    } else if b == out && is_suffix(a, out) {
        let na = numel_of(a);
        for base in (0..n).step_by(na) {
            (0..na).for_each(|j| f(base + j, j, base + j));
        }
    } else {
        let sa = broadcast_strides(a, out);
        let sb = broadcast_strides(b, out);
        let rank = out.len();
        let mut idx = vec![0usize; rank];
        let (mut ia, mut ib) = (0usize, 0usize);
        for i in 0..n {
            f(i, ia, ib);
            for d in (0..rank).rev() {
                idx[d] += 1;
                ia += sa[d];
                ib += sb[d];
                if idx[d] < out[d] {
                    break;
                }
                ia -= sa[d] * out[d];
                ib -= sb[d] * out[d];
                idx[d] = 0;
            }
        }
    }
}

/// Sums a gradient of shape `out` down to the broadcast input shape `input`.
pub(crate) fn reduce_to_shape(grad: &[f64], out: &[usize], input: &[usize]) -> Vec<f64> {
    if out == input {
        return grad.to_vec();
    }
    let mut acc = vec![0.0; numel_of(input)];
    if is_suffix(input, out) {
        let ni = acc.len();
        for chunk in grad.chunks_exact(ni) {
            acc.iter_mut().zip(chunk).for_each(|(a, g)| *a += g);
        }
    } else {
        broadcast_pairs(input, input, out, |o, ia, _| acc[ia] += grad[o]);
    }
    acc
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel_of(&shape[..axis]);
    let inner = numel_of(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_axis(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; x.len()];
    if inner == 1 {
        for (row, o) in x.chunks_exact(len).zip(out.chunks_exact_mut(len)) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut sum = 0.0;
            for (e, &v) in o.iter_mut().zip(row) {
                *e = (v - max).exp();
                sum += *e;
            }
            let inv = 1.0 / sum;
            o.iter_mut().for_each(|e| *e *= inv);
        }
        return out;
    }
    for o in 0..outer {
        for j in 0..inner {
            let base = o * len * inner + j;
            let mut max = f64::NEG_INFINITY;
            for i in 0..len {
                max = max.max(x[base + i * inner]);
            }
            let mut sum = 0.0;
            for i in 0..len {
                let e = (x[base + i * inner] - max).exp();
                out[base + i * inner] = e;
                sum += e;
            }
            for i in 0..len {
                out[base + i * inner] /= sum;
            }
        }
    }
    out
}

pub(crate) fn log_softmax_axis(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for j in 0..inner {
            let base = o * len * inner + j;
            let mut max = f64::NEG_INFINITY;
            for i in 0..len {
                max = max.max(x[base + i * inner]);
            }
            let mut sum = 0.0;
            for i in 0..len {
                sum += (x[base + i * inner] - max).exp();
            }
            let lse = max + sum.ln();
            for i in 0..len {
                out[base + i * inner] = x[base + i * inner] - lse;
            }
        }
    }
    out
}

/// Copies `src` (shape `shape`) into a new buffer with axes permuted by `perm`.
pub(crate) fn permute(src: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = src.len();
    let mut out = Vec::with_capacity(n);
    if rank == 0 {
        out.extend_from_slice(src);
        return out;
    }
    let last = rank - 1;
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    while out.len() < n {
        let s = strides[last];
        for i in 0..out_shape[last] {
            out.push(src[base + i * s]);
        }
        // advance every axis except the innermost
        let mut d = last;
        loop {
            if d == 0 {
                break;
            }
            d -= 1;
            idx[d] += 1;
            base += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-form GELU.
/// `tanh` through a single `exp`; the absolute error stays near 1e-16.
fn fast_tanh(u: f64) -> f64 {
    if u.abs() > 20.0 {
        return u.signum();
    }
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

pub(crate) fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + fast_tanh(u))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = fast_tanh(u);
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
