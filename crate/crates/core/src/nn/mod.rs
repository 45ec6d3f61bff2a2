//! Parameter storage and the small set of layers shared by both networks.

mod checkpoint;
mod optim;

pub use checkpoint::Checkpoint;
pub use optim::{Adam, AdamConfig};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::shape("ParamStore::set", self.values[id.0].shape(), value.shape()));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    /// Puts every parameter on `tape`, tracked when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        let vars = self.values.iter().map(|v| if trainable { tape.var(v.clone()) } else { tape.constant(v.clone()) }).collect();
        Bound { vars }
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        self.names.iter().cloned().zip(self.values.iter().cloned()).collect()
    }

    /// Replaces all values from a named list, which must match names and
    /// shapes in order.
    pub fn load_named(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        if named.len() != self.values.len() {
            return Err(Error::Checkpoint(format!("expected {} parameter tensors, found {}", self.values.len(), named.len())));
        }
        for (i, (name, t)) in named.iter().enumerate() {
            if *name != self.names[i] || t.shape() != self.values[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {i}: expected `{}` {:?}, found `{name}` {:?}",
                    self.names[i],
                    self.values[i].shape(),
                    t.shape()
                )));
            }
        }
        for (slot, (_, t)) in self.values.iter_mut().zip(named) {
            *slot = t.clone();
        }
        Ok(())
    }
}

/// Parameters of a [`ParamStore`] placed on one tape.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    /// Substitutes `v` for one parameter.
    pub fn replace(&mut self, id: ParamId, v: Var<'t>) {
        self.vars[id.0] = v;
    }

    /// Gradient for every parameter, in store order.
    pub fn grads(&self, g: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| g.wrt(v)).collect()
    }
}

/// Uniform draw in `[-bound, bound]`.
pub fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive extents")
}

/// Affine map over the last axis: `x W + b` with `W` stored `in x out`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = store.add(format!("{name}.w"), uniform(&[fan_in, fan_out], bound, rng));
        let b = store.add(format!("{name}.b"), uniform(&[fan_out], bound, rng));
        Linear { w, b, fan_in, fan_out }
    }

    /// Zero weight and zero bias.
    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros([fan_in, fan_out]));
        let b = store.add(format!("{name}.b"), Tensor::zeros([fan_out]));
        Linear { w, b, fan_in, fan_out }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(p.get(self.w))?.add(p.get(self.b))
    }

    /// Bias-free variant of [`Linear::forward`].
    pub fn forward_no_bias<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(p.get(self.w))
    }
}

/// Layer norm with learnable gain and bias.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full([dim], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([dim])),
            eps: 1e-5,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(p.get(self.gain), p.get(self.bias), self.eps)
    }
}

/// Two linear layers with a GELU in between.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, hidden: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Mlp {
            l1: Linear::new(store, &format!("{name}.l1"), fan_in, hidden, rng),
            l2: Linear::new(store, &format!("{name}.l2"), hidden, fan_out, rng),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.l1.forward(p, x)?.gelu();
        self.l2.forward(p, h)
    }
}

/// Multi-head scaled dot-product self-attention over the second-to-last
/// axis of a `[..., N, D]` input.
#[derive(Debug, Clone, Copy)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::invalid("SelfAttention", format!("width {dim} not divisible by {heads} heads")));
        }
        Ok(SelfAttention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let (out, _) = self.forward_with_weights(p, x)?;
        Ok(out)
    }

    /// Output plus the attention weights `[B, heads, N, N]`.
    pub fn forward_with_weights<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let shape = x.shape();
        if shape.len() < 2 {
            return Err(Error::invalid("SelfAttention", "input must be at least [N, D]"));
        }
        let (n, d) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let b: usize = shape[..shape.len() - 2].iter().product();
        let h = self.heads;
        let dh = d / h;
        let split = |t: Var<'t>| -> Result<Var<'t>> { t.reshape(&[b, n, h, dh])?.permute(&[0, 2, 1, 3]) };
        let q = split(self.q.forward(p, x)?)?;
        let k = split(self.k.forward(p, x)?)?;
        let v = split(self.v.forward(p, x)?)?;
        let weights = q.matmul_nt(k)?.scale(1.0 / (dh as f64).sqrt()).softmax(3)?;
        let merged = weights.matmul(v)?.permute(&[0, 2, 1, 3])?.reshape(&shape)?;
        Ok((self.o.forward(p, merged)?, weights))
    }
}

/// Pre-norm transformer block: attention then feed-forward, each residual.
#[derive(Debug, Clone, Copy)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: SelfAttention,
    pub ln2: LayerNorm,
    pub ffn: Mlp,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, ffn_hidden: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(TransformerBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: SelfAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            ffn: Mlp::new(store, &format!("{name}.ffn"), dim, ffn_hidden, dim, rng),
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let x = x.add(self.attn.forward(p, self.ln1.forward(p, x)?)?)?;
        x.add(self.ffn.forward(p, self.ln2.forward(p, x)?)?)
    }
}
