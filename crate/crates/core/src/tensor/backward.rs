use super::kernels;
use super::ops::MatmulGeometry;
use super::tape::{Node, Op, Tape};
use super::{numel_of, Tensor, Var};
use crate::error::{Error, Result};

/// Gradients of a scalar with respect to every node on a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient for `v`, zero when `v` does not influence the output.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(self.shapes[v.id].clone()))
    }
}

struct Acc {
    grads: Vec<Option<Vec<f64>>>,
}

impl Acc {
    fn slot(&mut self, nodes: &[Node], id: usize) -> Option<&mut Vec<f64>> {
        if !nodes[id].requires_grad {
            return None;
        }
        let n = nodes[id].value.numel();
        Some(self.grads[id].get_or_insert_with(|| vec![0.0; n]))
    }

    fn add(&mut self, nodes: &[Node], id: usize, delta: &[f64]) {
        if !nodes[id].requires_grad {
            return;
        }
        match &mut self.grads[id] {
            Some(g) => g.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
            empty => *empty = Some(delta.to_vec()),
        }
    }
}

impl Tape {
    /// Reverse pass from a scalar `output`.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        assert!(std::ptr::eq(output.tape, self), "output var belongs to another tape");
        let nodes = self.nodes.borrow();
        let out_node = &nodes[output.id];
        if out_node.value.numel() != 1 {
            return Err(Error::invalid("backward", format!("output must be scalar, got shape {:?}", out_node.value.shape())));
        }
        let mut acc = Acc { grads: vec![None; nodes.len()] };
        if out_node.requires_grad {
            acc.grads[output.id] = Some(vec![1.0]);
        }
        for id in (0..=output.id).rev() {
            let Some(g) = acc.grads[id].take() else { continue };
            backprop_node(&nodes, id, &g, &mut acc);
            acc.grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads =
            acc.grads.into_iter().zip(nodes.iter()).map(|(g, n)| g.map(|g| Tensor::from_parts(n.value.shape().to_vec(), g))).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn unary_grad(nodes: &[Node], acc: &mut Acc, x: usize, g: &[f64], f: impl Fn(usize) -> f64) {
    if let Some(gx) = acc.slot(nodes, x) {
        for (i, (a, gi)) in gx.iter_mut().zip(g).enumerate() {
            *a += gi * f(i);
        }
    }
}

fn backprop_node(nodes: &[Node], id: usize, g: &[f64], acc: &mut Acc) {
    let node = &nodes[id];
    let out = node.value.data();
    let out_shape = node.value.shape();
    let val = |i: usize| nodes[i].value.data();
    let shape = |i: usize| nodes[i].value.shape();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if nodes[*a].requires_grad {
                if shape(*a) == out_shape {
                    acc.add(nodes, *a, g);
                } else {
                    acc.add(nodes, *a, &kernels::reduce_to_shape(g, out_shape, shape(*a)));
                }
            }
            if nodes[*b].requires_grad {
                let mut r = kernels::reduce_to_shape(g, out_shape, shape(*b));
                if sign < 0.0 {
                    r.iter_mut().for_each(|x| *x = -*x);
                }
                acc.add(nodes, *b, &r);
            }
        }
        Op::Mul(a, b) | Op::Div(a, b) => {
            let is_div = matches!(node.op, Op::Div(..));
            let (ad, bd) = (val(*a), val(*b));
            let mut ga = nodes[*a].requires_grad.then(|| vec![0.0; ad.len()]);
            let mut gb = nodes[*b].requires_grad.then(|| vec![0.0; bd.len()]);
            kernels::broadcast_pairs(shape(*a), shape(*b), out_shape, |o, ia, ib| {
                if is_div {
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] += g[o] / bd[ib];
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] -= g[o] * ad[ia] / (bd[ib] * bd[ib]);
                    }
                } else {
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] += g[o] * bd[ib];
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] += g[o] * ad[ia];
                    }
                }
            });
            if let Some(ga) = ga {
                acc.add(nodes, *a, &ga);
            }
            if let Some(gb) = gb {
                acc.add(nodes, *b, &gb);
            }
        }
        Op::Scale(x, c) => unary_grad(nodes, acc, *x, g, |_| *c),
        Op::AddScalar(x) | Op::Reshape(x) => acc.add(nodes, *x, g),
        Op::Exp(x) => unary_grad(nodes, acc, *x, g, |i| out[i]),
        Op::Log(x) => {
            let xd = val(*x);
            unary_grad(nodes, acc, *x, g, |i| 1.0 / xd[i])
        }
        Op::Sqrt(x) => unary_grad(nodes, acc, *x, g, |i| 0.5 / out[i]),
        Op::Tanh(x) => unary_grad(nodes, acc, *x, g, |i| 1.0 - out[i] * out[i]),
        Op::Gelu(x) => {
            let xd = val(*x);
            unary_grad(nodes, acc, *x, g, |i| kernels::gelu_grad(xd[i]))
        }
        Op::Relu(x) => {
            let xd = val(*x);
            unary_grad(nodes, acc, *x, g, |i| if xd[i] > 0.0 { 1.0 } else { 0.0 })
        }
        Op::Sum(x) => {
            if let Some(gx) = acc.slot(nodes, *x) {
                gx.iter_mut().for_each(|a| *a += g[0]);
            }
        }
        Op::Mean(x) => {
            let n = val(*x).len() as f64;
            if let Some(gx) = acc.slot(nodes, *x) {
                gx.iter_mut().for_each(|a| *a += g[0] / n);
            }
        }
        Op::SumAxis { x, axis } => {
            let (outer, len, inner) = kernels::axis_split(shape(*x), *axis);
            if let Some(gx) = acc.slot(nodes, *x) {
                for o in 0..outer {
                    for i in 0..len {
                        let dst = &mut gx[(o * len + i) * inner..(o * len + i + 1) * inner];
                        for (d, s) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *d += s;
                        }
                    }
                }
            }
        }
        Op::Softmax { x, axis } => {
            let (outer, len, inner) = kernels::axis_split(out_shape, *axis);
            if let Some(gx) = acc.slot(nodes, *x) {
                for o in 0..outer {
                    for j in 0..inner {
                        let base = o * len * inner + j;
                        let dot: f64 = (0..len).map(|i| g[base + i * inner] * out[base + i * inner]).sum();
                        for i in 0..len {
                            let k = base + i * inner;
                            gx[k] += out[k] * (g[k] - dot);
                        }
                    }
                }
            }
        }
        Op::LogSoftmax { x, axis } => {
            let (outer, len, inner) = kernels::axis_split(out_shape, *axis);
            if let Some(gx) = acc.slot(nodes, *x) {
                for o in 0..outer {
                    for j in 0..inner {
                        let base = o * len * inner + j;
                        let total: f64 = (0..len).map(|i| g[base + i * inner]).sum();
                        for i in 0..len {
                            let k = base + i * inner;
                            gx[k] += g[k] - out[k].exp() * total;
                        }
                    }
                }
            }
        }
        Op::LayerNorm { x, gain, bias, xhat, rstd } => {
            let d = *out_shape.last().expect("layer_norm rank >= 1");
            let gd = val(*gain);
            if nodes[*x].requires_grad {
                let mut gx = vec![0.0; g.len()];
                for (r, &rs) in rstd.iter().enumerate() {
                    let span = r * d..(r + 1) * d;
                    let (gr, hr) = (&g[span.clone()], &xhat[span.clone()]);
                    let dh: Vec<f64> = gr.iter().zip(gd).map(|(a, b)| a * b).collect();
                    let mean_dh = dh.iter().sum::<f64>() / d as f64;
                    let mean_dhh = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for k in 0..d {
                        gx[r * d + k] = rs * (dh[k] - mean_dh - hr[k] * mean_dhh);
                    }
                }
                acc.add(nodes, *x, &gx);
            }
            if nodes[*gain].requires_grad {
                let mut gg = vec![0.0; d];
                for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                    for k in 0..d {
                        gg[k] += gr[k] * hr[k];
                    }
                }
                acc.add(nodes, *gain, &gg);
            }
            if nodes[*bias].requires_grad {
                let gb = kernels::reduce_to_shape(g, out_shape, &[d]);
                acc.add(nodes, *bias, &gb);
            }
        }
        Op::Huber { x, delta } => {
            let xd = val(*x);
            let n = xd.len() as f64;
            if let Some(gx) = acc.slot(nodes, *x) {
                for (a, &d) in gx.iter_mut().zip(xd) {
                    *a += g[0] * d.clamp(-delta, *delta) / n;
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let outer = numel_of(&out_shape[..*axis]);
            let inner = numel_of(&out_shape[axis + 1..]);
            let total = out_shape[*axis] * inner;
            let mut offset = 0;
            for &inp in inputs {
                let chunk = shape(inp)[*axis] * inner;
                if nodes[inp].requires_grad {
                    let mut gi = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        gi.extend_from_slice(&g[o * total + offset..o * total + offset + chunk]);
                    }
                    acc.add(nodes, inp, &gi);
                }
                offset += chunk;
            }
        }
        Op::Slice { x, axis, start } => {
            let (outer, dim, inner) = kernels::axis_split(shape(*x), *axis);
            let len = out_shape[*axis];
            if let Some(gx) = acc.slot(nodes, *x) {
                for o in 0..outer {
                    let dst = (o * dim + start) * inner;
                    let src = o * len * inner;
                    for k in 0..len * inner {
                        gx[dst + k] += g[src + k];
                    }
                }
            }
        }
        Op::Permute { x, perm } if nodes[*x].requires_grad => {
            let inv = kernels::inverse_permutation(perm);
            let back = kernels::permute(g, out_shape, &inv);
            acc.add(nodes, *x, &back);
        }
        Op::IndexSelect { x, axis, indices } => {
            let (outer, dim, inner) = kernels::axis_split(shape(*x), *axis);
            if let Some(gx) = acc.slot(nodes, *x) {
                for o in 0..outer {
                    for (j, &i) in indices.iter().enumerate() {
                        let dst = (o * dim + i) * inner;
                        let src = (o * indices.len() + j) * inner;
                        for k in 0..inner {
                            gx[dst + k] += g[src + k];
                        }
                    }
                }
            }
        }
        Op::MatMul { a, b, ta, tb } => {
            let geo = MatmulGeometry::new(shape(*a), shape(*b), *ta, *tb).expect("geometry validated in forward");
            if nodes[*a].requires_grad {
                let bd = val(*b);
                let ga = acc.slot(nodes, *a).expect("requires grad");
                geo.grad_a(bd, g, ga);
            }
            if nodes[*b].requires_grad {
                let ad = val(*a);
                let gb = acc.slot(nodes, *b).expect("requires grad");
                geo.grad_b(ad, g, gb);
            }
        }
        Op::Permute { .. } => {}
        Op::NormLast(x) => {
            let xd = val(*x);
            let k = *shape(*x).last().expect("rank >= 1");
            if let Some(gx) = acc.slot(nodes, *x) {
                for (r, &nrm) in out.iter().enumerate() {
                    if nrm > 0.0 {
                        for c in 0..k {
                            gx[r * k + c] += g[r] * xd[r * k + c] / nrm;
                        }
                    }
                }
            }
        }
    }
}
