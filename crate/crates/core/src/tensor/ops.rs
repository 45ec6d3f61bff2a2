use super::kernels::{self, MatView};
use super::tape::{Op, Tape};
use super::{numel_of, Tensor, Var};
use crate::error::{Error, Result};

impl<'t> Var<'t> {
    fn same_tape(&self, other: &Var<'t>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes cannot be combined");
    }

    fn binary(self, rhs: Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64, op: fn(usize, usize) -> Op) -> Result<Var<'t>> {
        self.same_tape(&rhs);
        let (a, b) = (self.value(), rhs.value());
        let out_shape = kernels::broadcast_shape(a.shape(), b.shape()).ok_or_else(|| Error::shape(name, a.shape(), b.shape()))?;
        let mut out = vec![0.0; numel_of(&out_shape)];
        let (ad, bd) = (a.data(), b.data());
        kernels::broadcast_pairs(a.shape(), b.shape(), &out_shape, |o, ia, ib| {
            out[o] = f(ad[ia], bd[ib]);
        });
        Ok(self.tape.push(Tensor::from_parts(out_shape, out), op(self.id, rhs.id), &[self.id, rhs.id]))
    }

    fn unary(self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let value = self.value().map(f);
        self.tape.push(value, op, &[self.id])
    }

    /// Broadcasting element-wise sum.
    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn div(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "div", |a, b| a / b, Op::Div)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(|x| c * x, Op::Scale(self.id, c))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(|x| x + c, Op::AddScalar(self.id))
    }

    pub fn square(self) -> Var<'t> {
        self.mul(self).expect("square of a var always conforms")
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, Op::Exp(self.id))
    }

    pub fn log(self) -> Var<'t> {
        self.unary(f64::ln, Op::Log(self.id))
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(f64::sqrt, Op::Sqrt(self.id))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, Op::Tanh(self.id))
    }

    /// Smooth activation used inside every network.
    pub fn gelu(self) -> Var<'t> {
        self.unary(kernels::gelu, Op::Gelu(self.id))
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| x.max(0.0), Op::Relu(self.id))
    }

    /// Sum of all elements as a rank-0 var.
    pub fn sum(self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Var<'t> {
        let v = self.value();
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.tape.push(Tensor::scalar(s), Op::Mean(self.id), &[self.id])
    }

    fn check_axis(&self, name: &'static str, axis: usize) -> Result<Vec<usize>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::invalid(name, format!("axis {axis} out of range for shape {shape:?}")));
        }
        Ok(shape)
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let shape = self.check_axis("sum_axis", axis)?;
        let (outer, len, inner) = kernels::axis_split(&shape, axis);
        let v = self.value();
        let x = v.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..len {
                let src = &x[(o * len + i) * inner..(o * len + i + 1) * inner];
                for (acc, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += s;
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        Ok(self.tape.push(Tensor::from_parts(out_shape, out), Op::SumAxis { x: self.id, axis }, &[self.id]))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let len = self.check_axis("mean_axis", axis)?[axis];
        Ok(self.sum_axis(axis)?.scale(1.0 / len as f64))
    }

    /// Softmax along `axis`; the axis maximum is subtracted before `exp`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let shape = self.check_axis("softmax", axis)?;
        let v = self.value();
        if let Some(index) = v.data().iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: "softmax", index });
        }
        let out = kernels::softmax_axis(v.data(), &shape, axis);
        Ok(self.tape.push(Tensor::from_parts(shape, out), Op::Softmax { x: self.id, axis }, &[self.id]))
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'t>> {
        let shape = self.check_axis("log_softmax", axis)?;
        let v = self.value();
        if let Some(index) = v.data().iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: "log_softmax", index });
        }
        let out = kernels::log_softmax_axis(v.data(), &shape, axis);
        Ok(self.tape.push(Tensor::from_parts(shape, out), Op::LogSoftmax { x: self.id, axis }, &[self.id]))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
        self.same_tape(&gain);
        self.same_tape(&bias);
        let shape = self.shape();
        let d = *shape.last().unwrap_or(&0);
        if d < 2 {
            return Err(Error::invalid("layer_norm", format!("last axis extent {d} < 2")));
        }
        if eps <= 0.0 {
            return Err(Error::invalid("layer_norm", "eps must be positive"));
        }
        let (g, b) = (gain.value(), bias.value());
        if g.shape() != [d] || b.shape() != [d] {
            return Err(Error::shape("layer_norm", &shape, g.shape()));
        }
        let v = self.value();
        let x = v.data();
        let rows = x.len() / d;
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for k in 0..d {
                let h = (row[k] - mean) * rs;
                xhat[r * d + k] = h;
                out[r * d + k] = h * g.data()[k] + b.data()[k];
            }
        }
        Ok(self.tape.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm { x: self.id, gain: gain.id, bias: bias.id, xhat, rstd },
            &[self.id, gain.id, bias.id],
        ))
    }

    /// Mean Huber penalty of the residual: `0.5 d^2` inside `delta`,
    /// `delta (|d| - delta/2)` outside.
    pub fn huber(self, delta: f64) -> Result<Var<'t>> {
        if delta <= 0.0 {
            return Err(Error::invalid("huber", "delta must be positive"));
        }
        let v = self.value();
        let total: f64 = v.data().iter().map(|&d| if d.abs() <= delta { 0.5 * d * d } else { delta * (d.abs() - 0.5 * delta) }).sum();
        Ok(self.tape.push(Tensor::scalar(total / v.numel() as f64), Op::Huber { x: self.id, delta }, &[self.id]))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(vars: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = vars.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = first.check_axis("concat", axis)?;
        let values: Vec<Tensor> = vars.iter().map(|v| v.value()).collect();
        for (v, t) in vars.iter().zip(&values) {
            first.same_tape(v);
            let s = t.shape();
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", &base, s));
            }
        }
        let outer = numel_of(&base[..axis]);
        let inner = numel_of(&base[axis + 1..]);
        let total_axis: usize = values.iter().map(|t| t.shape()[axis]).sum();
        let mut out = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for t in &values {
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total_axis;
        let ids: Vec<usize> = vars.iter().map(|v| v.id).collect();
        Ok(first.tape.push(Tensor::from_parts(shape, out), Op::Concat { inputs: ids.clone(), axis }, &ids))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let shape = self.check_axis("slice", axis)?;
        if len == 0 || start + len > shape[axis] {
            return Err(Error::invalid("slice", format!("range {start}..{} outside axis {axis} of {shape:?}", start + len)));
        }
        let (outer, dim, inner) = kernels::axis_split(&shape, axis);
        let v = self.value();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.tape.push(Tensor::from_parts(out_shape, out), Op::Slice { x: self.id, axis, start }, &[self.id]))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value().reshape(shape.to_vec())?;
        Ok(self.tape.push(value, Op::Reshape(self.id), &[self.id]))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len() && perm.iter().all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::invalid("permute", format!("{perm:?} is not a permutation of {shape:?}")));
        }
        let v = self.value();
        let out = kernels::permute(v.data(), &shape, perm);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        Ok(self.tape.push(Tensor::from_parts(out_shape, out), Op::Permute { x: self.id, perm: perm.to_vec() }, &[self.id]))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'t>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(Error::invalid("transpose", "rank < 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    /// Gathers entries along `axis`; indices may repeat.
    pub fn index_select(self, axis: usize, indices: &[usize]) -> Result<Var<'t>> {
        let shape = self.check_axis("index_select", axis)?;
        if indices.is_empty() {
            return Err(Error::invalid("index_select", "empty index list"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[axis]) {
            return Err(Error::invalid("index_select", format!("index {bad} out of range for axis {axis} of {shape:?}")));
        }
        let (outer, dim, inner) = kernels::axis_split(&shape, axis);
        let v = self.value();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * dim + i) * inner;
                out.extend_from_slice(&v.data()[base..base + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = indices.len();
        Ok(self.tape.push(Tensor::from_parts(out_shape, out), Op::IndexSelect { x: self.id, axis, indices: indices.to_vec() }, &[self.id]))
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.matmul_ex(rhs, false, false)
    }

    /// `self * rhs^T` on the last two axes.
    pub fn matmul_nt(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.matmul_ex(rhs, false, true)
    }

    /// `self^T * rhs` on the last two axes.
    pub fn matmul_tn(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.matmul_ex(rhs, true, false)
    }

    /// Matrix product on the last two axes with optional transposes.
    ///
    /// A rank-2 right operand is shared by every leading batch of the left
    /// operand; otherwise both operands must carry identical batch axes.
    pub fn matmul_ex(self, rhs: Var<'t>, ta: bool, tb: bool) -> Result<Var<'t>> {
        self.same_tape(&rhs);
        let (a, b) = (self.value(), rhs.value());
        let geo = MatmulGeometry::new(a.shape(), b.shape(), ta, tb)?;
        let mut out = vec![0.0; geo.batch * geo.m * geo.n];
        geo.forward(a.data(), b.data(), &mut out);
        Ok(self.tape.push(Tensor::from_parts(geo.out_shape.clone(), out), Op::MatMul { a: self.id, b: rhs.id, ta, tb }, &[self.id, rhs.id]))
    }

    /// Euclidean norm over the last axis, which is removed.
    pub fn norm_last(self) -> Result<Var<'t>> {
        let shape = self.shape();
        let k = *shape.last().ok_or_else(|| Error::invalid("norm_last", "rank-0 input"))?;
        let v = self.value();
        let out: Vec<f64> = v.data().chunks(k).map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
        let out_shape = shape[..shape.len() - 1].to_vec();
        Ok(self.tape.push(Tensor::from_parts(out_shape, out), Op::NormLast(self.id), &[self.id]))
    }
}

/// Operand layout of a (possibly batched) matrix product.
pub(crate) struct MatmulGeometry {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub ta: bool,
    pub tb: bool,
    pub shared_rhs: bool,
    pub a_cols: usize,
    pub b_cols: usize,
    pub out_shape: Vec<usize>,
}

impl MatmulGeometry {
    pub fn new(a: &[usize], b: &[usize], ta: bool, tb: bool) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::shape("matmul", a, b));
        }
        let (ar, ac) = (a[a.len() - 2], a[a.len() - 1]);
        let (br, bc) = (b[b.len() - 2], b[b.len() - 1]);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (kb, n) = if tb { (bc, br) } else { (br, bc) };
        let batch_dims = &a[..a.len() - 2];
        let shared_rhs = b.len() == 2;
        if k != kb || (!shared_rhs && b[..b.len() - 2] != *batch_dims) {
            return Err(Error::shape("matmul", a, b));
        }
        let mut out_shape = batch_dims.to_vec();
        out_shape.extend([m, n]);
        Ok(MatmulGeometry { batch: numel_of(batch_dims), m, k, n, ta, tb, shared_rhs, a_cols: ac, b_cols: bc, out_shape })
    }

    fn a_stride(&self) -> usize {
        self.m * self.k
    }

    fn b_stride(&self) -> usize {
        if self.shared_rhs {
            0
        } else {
            self.k * self.n
        }
    }

    pub fn forward(&self, a: &[f64], b: &[f64], out: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if self.shared_rhs && !self.ta {
            kernels::gemm(
                self.batch * m,
                k,
                n,
                1.0,
                a,
                MatView::row_major(0, self.a_cols, false),
                b,
                MatView::row_major(0, self.b_cols, self.tb),
                0.0,
                out,
                MatView::row_major(0, n, false),
            );
            return;
        }
        for bi in 0..self.batch {
            kernels::gemm(
                m,
                k,
                n,
                1.0,
                a,
                MatView::row_major(bi * self.a_stride(), self.a_cols, self.ta),
                b,
                MatView::row_major(bi * self.b_stride(), self.b_cols, self.tb),
                0.0,
                out,
                MatView::row_major(bi * m * n, n, false),
            );
        }
    }

    /// Accumulates `dA` for `C = op(A) op(B)` given `dC`.
    pub fn grad_a(&self, b: &[f64], dc: &[f64], da: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        // dop(A) = dC op(B)^T, stored back through the transpose flag of A.
        if self.shared_rhs && !self.ta {
            kernels::gemm(
                self.batch * m,
                n,
                k,
                1.0,
                dc,
                MatView::row_major(0, n, false),
                b,
                MatView::row_major(0, self.b_cols, !self.tb),
                1.0,
                da,
                MatView::row_major(0, self.a_cols, false),
            );
            return;
        }
        for bi in 0..self.batch {
            kernels::gemm(
                m,
                n,
                k,
                1.0,
                dc,
                MatView::row_major(bi * m * n, n, false),
                b,
                MatView::row_major(bi * self.b_stride(), self.b_cols, !self.tb),
                1.0,
                da,
                MatView::row_major(bi * self.a_stride(), self.a_cols, self.ta),
            );
        }
    }

    /// Accumulates `dB` for `C = op(A) op(B)` given `dC`.
    pub fn grad_b(&self, a: &[f64], dc: &[f64], db: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        // dop(B) = op(A)^T dC
        if self.shared_rhs && !self.ta {
            kernels::gemm(
                k,
                self.batch * m,
                n,
                1.0,
                a,
                MatView::row_major(0, self.a_cols, true),
                dc,
                MatView::row_major(0, n, false),
                1.0,
                db,
                MatView::row_major(0, self.b_cols, self.tb),
            );
            return;
        }
        for bi in 0..self.batch {
            kernels::gemm(
                k,
                m,
                n,
                1.0,
                a,
                MatView::row_major(bi * self.a_stride(), self.a_cols, !self.ta),
                dc,
                MatView::row_major(bi * m * n, n, false),
                1.0,
                db,
                MatView::row_major(bi * self.b_stride(), self.b_cols, self.tb),
            );
        }
    }
}

/// Primitive kinds exposed through [`apply_primitive`].
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    MatMul,
    Add,
    Mul,
    Scale(f64),
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Transpose,
    Gelu,
    Relu,
    Sum,
    Mean,
}

/// Applies one primitive by kind to the given inputs.
pub fn apply_primitive<'t>(tape: &'t Tape, kind: &Primitive, inputs: &[Var<'t>]) -> Result<Var<'t>> {
    let arity = match kind {
        Primitive::MatMul | Primitive::Add | Primitive::Mul => 2,
        Primitive::Concat { .. } => inputs.len().max(1),
        _ => 1,
    };
    if inputs.len() != arity {
        return Err(Error::invalid("apply_primitive", format!("{kind:?} takes {arity} inputs, got {}", inputs.len())));
    }
    for v in inputs {
        assert!(std::ptr::eq(v.tape, tape), "input from a different tape");
    }
    let x = inputs[0];
    match kind {
        Primitive::MatMul => x.matmul(inputs[1]),
        Primitive::Add => x.add(inputs[1]),
        Primitive::Mul => x.mul(inputs[1]),
        Primitive::Scale(c) => Ok(x.scale(*c)),
        Primitive::Concat { axis } => Var::concat(inputs, *axis),
        Primitive::Slice { axis, start, len } => x.slice(*axis, *start, *len),
        Primitive::Transpose => x.transpose(),
        Primitive::Gelu => Ok(x.gelu()),
        Primitive::Relu => Ok(x.relu()),
        Primitive::Sum => Ok(x.sum()),
        Primitive::Mean => Ok(x.mean()),
    }
}
