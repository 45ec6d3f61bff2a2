use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::hagt::tokenize_hagt;
use super::scene::SceneBatch;
use crate::body::{BodyParams, NUM_BETAS, NUM_JOINTS, ROT6D_IDENTITY};
use crate::error::{Error, Result};
use crate::hierarchy::{expand_to_joints, Level, PartitionTable};
use crate::nn::{Bound, LayerNorm, Linear, Mlp, ParamStore, TransformerBlock};
use crate::tensor::{Tape, Tensor, Var};

/// Which token pipeline feeds the regression head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RopeVariant {
    /// All four levels, ISL and ICL.
    Full,
    /// Indep tokens projected straight into the per-joint head, no attention.
    IndepOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RopeConfig {
    pub channels: usize,
    pub width: usize,
    pub heads: usize,
    pub isl_layers: usize,
    pub icl_dim: usize,
    pub head_hidden: usize,
    /// Adds each level's expanded ISL tokens to its ICL output.
    pub icl_residual: bool,
    pub variant: RopeVariant,
}

impl Default for RopeConfig {
    fn default() -> Self {
        RopeConfig {
            channels: 64,
            width: 128,
            heads: 8,
            isl_layers: 2,
            icl_dim: 128,
            head_hidden: 256,
            icl_residual: true,
            variant: RopeVariant::Full,
        }
    }
}

impl RopeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.width == 0 || self.icl_dim == 0 || self.head_hidden == 0 {
            return Err(Error::invalid("RopeConfig", "sizes must be positive"));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::invalid("RopeConfig", format!("width {} not divisible by {} heads", self.width, self.heads)));
        }
        if self.icl_residual && self.icl_dim != self.width {
            return Err(Error::invalid("RopeConfig", "the ICL residual needs icl_dim == width"));
        }
        Ok(())
    }

    fn levels(&self) -> &'static [Level] {
        match self.variant {
            RopeVariant::Full => &Level::ALL,
            RopeVariant::IndepOnly => &[Level::Indep],
        }
    }
}

/// The three part levels that carry per-joint structure, in ICL order.
pub const PART_LEVELS: [Level; 3] = [Level::Indep, Level::Inter, Level::FulCo];

#[derive(Debug, Clone)]
pub struct IslStage {
    pub proj: Linear,
    pub blocks: Vec<TransformerBlock>,
}

#[derive(Debug, Clone, Copy)]
pub struct IclProjection {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

#[derive(Debug, Clone, Copy)]
pub struct RegressionHead {
    pub norm: LayerNorm,
    pub theta: Mlp,
    pub beta: Mlp,
    pub cam: Mlp,
}

#[derive(Debug, Clone)]
pub struct RopeNet {
    pub config: RopeConfig,
    /// 1x1 convolutions to `J_x + 1` logits, background first, indexed by
    /// position in the variant's level list.
    pub att_conv: Vec<Linear>,
    pub isl: Vec<IslStage>,
    pub icl: Vec<IclProjection>,
    pub indep_proj: Option<Linear>,
    pub head: RegressionHead,
}

/// Everything one forward pass produces, for losses and diagnostics.
#[derive(Debug, Clone)]
pub struct RopeForward<'t> {
    /// `[B, 24, 6]`.
    pub theta: Var<'t>,
    /// `[B, 10]`.
    pub beta: Var<'t>,
    /// `[B, 3]`.
    pub cam: Var<'t>,
    /// Per level in use: `[B, H, W, J_x + 1]`, background first.
    pub logits: Vec<(Level, Var<'t>)>,
    /// Per level in use: spatial weights `[B, H*W, J_x]`.
    pub spatial: Vec<Var<'t>>,
    /// ISL attention weights, `[B, heads, J_x, J_x]` per block.
    pub isl_weights: Vec<Var<'t>>,
    /// ICL weights `[B, 24, 24]` for the Indep, Inter and FulCo outputs.
    pub icl_weights: Vec<Var<'t>>,
}

impl RopeNet {
    pub fn new(config: RopeConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let (c, w, d, hid) = (config.channels, config.width, config.icl_dim, config.head_hidden);
        let att_conv =
            config.levels().iter().map(|l| Linear::new(store, &format!("rope.att.{}", l.name()), c, l.part_count() + 1, rng)).collect();
        let (isl, icl, indep_proj, mix) = match config.variant {
            RopeVariant::Full => {
                let isl = PART_LEVELS
                    .iter()
                    .map(|l| {
                        let name = format!("rope.isl.{}", l.name());
                        Ok(IslStage {
                            proj: Linear::new(store, &format!("{name}.proj"), 2 * c, w, rng),
                            blocks: (0..config.isl_layers)
                                .map(|i| TransformerBlock::new(store, &format!("{name}.block{i}"), w, config.heads, 2 * w, rng))
                                .collect::<Result<_>>()?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let icl = PART_LEVELS
                    .iter()
                    .map(|l| {
                        let name = format!("rope.icl.{}", l.name());
                        IclProjection {
                            q: Linear::new(store, &format!("{name}.q"), w, d, rng),
                            k: Linear::new(store, &format!("{name}.k"), w, d, rng),
                            v: Linear::new(store, &format!("{name}.v"), w, d, rng),
                        }
                    })
                    .collect();
                (isl, icl, None, 3 * d)
            }
            RopeVariant::IndepOnly => (vec![], vec![], Some(Linear::new(store, "rope.indep.proj", c, w, rng)), w),
        };
        let head = RegressionHead {
            norm: LayerNorm::new(store, "rope.head.norm", mix),
            theta: Mlp::new(store, "rope.head.theta", mix, hid, 6, rng),
            beta: Mlp::new(store, "rope.head.beta", mix, hid, NUM_BETAS, rng),
            cam: Mlp::new(store, "rope.head.cam", mix, hid, 3, rng),
        };
        store.set(head.theta.l2.b, Tensor::vector(ROT6D_IDENTITY.to_vec()))?;
        store.set(head.cam.l2.b, Tensor::vector(vec![0.5, 0.5, 0.0]))?;
        Ok(RopeNet { config, att_conv, isl, icl, indep_proj, head })
    }

    pub fn levels(&self) -> &'static [Level] {
        self.config.levels()
    }

    /// Scene logits plus the learned 1x1 convolution, with a background
    /// channel prepended: `[B, H, W, J_x + 1]`.
    pub fn level_logits<'t>(&self, p: &Bound<'t>, slot: usize, att: Var<'t>, feat: Var<'t>) -> Result<Var<'t>> {
        let s = att.shape();
        let bg = att.tape().constant(Tensor::zeros([s[0], s[1], s[2], 1]));
        self.att_conv[slot].forward(p, feat)?.add(Var::concat(&[bg, att], 3)?)
    }

    /// Refines Indep, Inter and FulCo tokens `[B, J_x, C]` with the shared
    /// WhoBo token `[B, 1, C]`; returns `[B, J_x, width]` per level and the
    /// attention weights of every block.
    pub fn isl_forward<'t>(&self, p: &Bound<'t>, tokens: &[Var<'t>], whobo: Var<'t>) -> Result<(Vec<Var<'t>>, Vec<Var<'t>>)> {
        if self.isl.len() != 3 || tokens.len() != 3 {
            return Err(Error::invalid("isl_forward", "needs the full variant and three token sets"));
        }
        let mut out = vec![];
        let mut weights = vec![];
        for (stage, &t) in self.isl.iter().zip(tokens) {
            let j = t.shape()[1];
            let shared = whobo.index_select(1, &vec![0; j])?;
            let mut h = stage.proj.forward(p, Var::concat(&[t, shared], 2)?)?;
            for b in &stage.blocks {
                let (a, w) = b.attn.forward_with_weights(p, b.ln1.forward(p, h)?)?;
                let x = h.add(a)?;
                h = x.add(b.ffn.forward(p, b.ln2.forward(p, x)?)?)?;
                weights.push(w);
            }
            out.push(h);
        }
        Ok((out, weights))
    }

    /// Rotated cross-attention over the three levels expanded to 24 rows.
    /// Returns the attended Indep, Inter and FulCo matrices `[B, 24, d]`
    /// and their weights `[B, 24, 24]`.
    pub fn icl_forward<'t>(&self, p: &Bound<'t>, table: &PartitionTable, refined: &[Var<'t>]) -> Result<(Vec<Var<'t>>, Vec<Var<'t>>)> {
        if self.icl.len() != 3 || refined.len() != 3 {
            return Err(Error::invalid("icl_forward", "needs the full variant and three token sets"));
        }
        let rows: Vec<Var<'t>> = PART_LEVELS.iter().zip(refined).map(|(&l, &f)| expand_to_joints(f, l, table)).collect::<Result<_>>()?;
        let proj = |i: usize, which: usize| -> Result<Var<'t>> {
            let pr = &self.icl[i];
            let lin = [pr.q, pr.k, pr.v][which];
            lin.forward(p, rows[i])
        };
        let scale = 1.0 / (self.config.icl_dim as f64).sqrt();
        let (mut out, mut weights) = (vec![], vec![]);
        // (query level, key level) for each output level, as printed
        for (target, (qi, ki)) in [(0, (2, 1)), (1, (0, 2)), (2, (1, 0))] {
            let w = proj(qi, 0)?.matmul_nt(proj(ki, 1)?)?.scale(scale).softmax(2)?;
            let mut o = w.matmul(proj(target, 2)?)?;
            if self.config.icl_residual {
                o = o.add(rows[target])?;
            }
            out.push(o);
            weights.push(w);
        }
        Ok((out, weights))
    }

    /// Per-joint mix -> `θ [B, 24, 6]`; pooled mix -> `β [B, 10]`, `cam [B, 3]`.
    pub fn regress_params<'t>(&self, p: &Bound<'t>, parts: &[Var<'t>]) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
        let mix = self.head.norm.forward(p, Var::concat(parts, 2)?)?;
        let s = mix.shape();
        let theta = self.head.theta.forward(p, mix)?;
        let pooled = mix.mean_axis(1)?.reshape(&[s[0], s[2]])?;
        Ok((theta, self.head.beta.forward(p, pooled)?, self.head.cam.forward(p, pooled)?))
    }

    /// `att[x]: [B, H, W, J_x]`, `feat[x]: [B, H, W, C]`, indexed by
    /// [`Level::index`]. Levels the variant does not use are ignored.
    pub fn forward<'t>(&self, p: &Bound<'t>, table: &PartitionTable, att: &[Var<'t>; 4], feat: &[Var<'t>; 4]) -> Result<RopeForward<'t>> {
        let mut logits = vec![];
        let mut spatial = vec![];
        let mut tokens = vec![];
        for (slot, &level) in self.levels().iter().enumerate() {
            let fs = feat[level.index()].shape();
            if fs.len() != 4 || fs[3] != self.config.channels {
                return Err(Error::shape("rope forward", &[0, 0, 0, self.config.channels], &fs));
            }
            let l = self.level_logits(p, slot, att[level.index()], feat[level.index()])?;
            let parts = l.slice(3, 1, level.part_count())?;
            let (t, w) = tokenize_hagt(parts, feat[level.index()])?;
            logits.push((level, l));
            spatial.push(w);
            tokens.push(t);
        }
        let (parts, isl_weights, icl_weights) = match self.config.variant {
            RopeVariant::Full => {
                let (refined, isl_w) = self.isl_forward(p, &tokens[..3], tokens[3])?;
                let (attended, icl_w) = self.icl_forward(p, table, &refined)?;
                (attended, isl_w, icl_w)
            }
            RopeVariant::IndepOnly => {
                let proj = self.indep_proj.as_ref().expect("indep variant has a projection");
                (vec![proj.forward(p, tokens[0])?], vec![], vec![])
            }
        };
        let (theta, beta, cam) = self.regress_params(p, &parts)?;
        Ok(RopeForward { theta, beta, cam, logits, spatial, isl_weights, icl_weights })
    }

    /// Inference on a batch of scenes.
    pub fn predict(&self, store: &ParamStore, table: &PartitionTable, batch: &SceneBatch) -> Result<Vec<BodyParams>> {
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let att = batch.att.clone().map(|t| tape.constant(t));
        let feat = batch.feat.clone().map(|t| tape.constant(t));
        let out = self.forward(&p, table, &att, &feat)?;
        let (theta, beta, cam) = (out.theta.value(), out.beta.value(), out.cam.value());
        (0..batch.len())
            .map(|b| {
                Ok(BodyParams {
                    theta: Tensor::new(vec![NUM_JOINTS, 6], theta.data()[b * NUM_JOINTS * 6..(b + 1) * NUM_JOINTS * 6].to_vec())?,
                    beta: Tensor::new(vec![NUM_BETAS], beta.data()[b * NUM_BETAS..(b + 1) * NUM_BETAS].to_vec())?,
                    cam: Tensor::new(vec![3], cam.data()[b * 3..(b + 1) * 3].to_vec())?,
                })
            })
            .collect()
    }
}

/// Builds a network with weights drawn from `seed`.
pub fn init_rope(config: RopeConfig, seed: u64) -> Result<(RopeNet, ParamStore)> {
    let mut store = ParamStore::new();
    let net = RopeNet::new(config, &mut store, &mut ChaCha8Rng::seed_from_u64(seed))?;
    Ok((net, store))
}

#[cfg(test)]
mod tests {
    use rand_distr::{Distribution, StandardNormal};

    use super::*;
    use crate::body::rot6d_to_rotmat;
    use crate::hierarchy::default_partition;
    use crate::tensor::grad_check_multi;

    fn small(variant: RopeVariant) -> RopeConfig {
        RopeConfig { channels: 8, width: 16, heads: 2, icl_dim: 16, head_hidden: 12, variant, ..RopeConfig::default() }
    }

    fn randn(seed: u64, shape: &[usize]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
    }

    fn inputs(seed: u64, b: usize, h: usize, c: usize) -> ([Tensor; 4], [Tensor; 4]) {
        let att = Level::ALL.map(|l| randn(seed + l.index() as u64, &[b, h, h, l.part_count()]));
        let feat = Level::ALL.map(|l| randn(seed + 10 + l.index() as u64, &[b, h, h, c]));
        (att, feat)
    }

    #[test]
    fn output_shapes() {
        let table = default_partition();
        for variant in [RopeVariant::Full, RopeVariant::IndepOnly] {
            let (net, store) = init_rope(small(variant), 0).unwrap();
            let (att, feat) = inputs(0, 2, 4, 8);
            let tape = Tape::new();
            let p = store.bind(&tape, false);
            let out = net.forward(&p, &table, &att.map(|t| tape.constant(t)), &feat.map(|t| tape.constant(t))).unwrap();
            assert_eq!(out.theta.shape(), vec![2, 24, 6]);
            assert_eq!(out.beta.shape(), vec![2, 10]);
            assert_eq!(out.cam.shape(), vec![2, 3]);
            for (level, l) in &out.logits {
                assert_eq!(l.shape(), vec![2, 4, 4, level.part_count() + 1]);
            }
            let n_icl = if variant == RopeVariant::Full { 3 } else { 0 };
            assert_eq!(out.icl_weights.len(), n_icl);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let table = default_partition();
        let (net, store) = init_rope(small(RopeVariant::Full), 1).unwrap();
        let (att, feat) = inputs(1, 2, 5, 8);
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let out = net.forward(&p, &table, &att.map(|t| tape.constant(t)), &feat.map(|t| tape.constant(t))).unwrap();
        let check = |w: &Tensor, axis_len: usize, stride: usize| {
            // rows along the last axis unless a stride is given
            let d = w.data();
            if stride == 1 {
                for row in d.chunks(axis_len) {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            } else {
                let outer = d.len() / (axis_len * stride);
                for o in 0..outer {
                    for j in 0..stride {
                        let s: f64 = (0..axis_len).map(|i| d[o * axis_len * stride + i * stride + j]).sum();
                        assert!((s - 1.0).abs() < 1e-12);
                    }
                }
            }
        };
        for w in out.isl_weights.iter().chain(&out.icl_weights) {
            let v = w.value();
            check(&v, *v.shape().last().unwrap(), 1);
        }
        for w in &out.spatial {
            let v = w.value();
            check(&v, v.shape()[1], v.shape()[2]);
        }
    }

    #[test]
    fn single_token_isl_is_a_per_token_path() {
        let (net, store) = init_rope(small(RopeVariant::Full), 2).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let tok: Vec<Var> = (0..3).map(|i| tape.constant(randn(20 + i, &[1, 1, 8]))).collect();
        let who = tape.constant(randn(30, &[1, 1, 8]));
        let (out, weights) = net.isl_forward(&p, &tok, who).unwrap();
        assert!(weights.iter().all(|w| w.value().data().iter().all(|&x| x == 1.0)));
        let stage = &net.isl[1];
        let mut h = stage.proj.forward(&p, Var::concat(&[tok[1], who], 2).unwrap()).unwrap();
        for b in &stage.blocks {
            let v = b.attn.v.forward(&p, b.ln1.forward(&p, h).unwrap()).unwrap();
            let x = h.add(b.attn.o.forward(&p, v).unwrap()).unwrap();
            h = x.add(b.ffn.forward(&p, b.ln2.forward(&p, x).unwrap()).unwrap()).unwrap();
        }
        assert!(out[1].value().max_abs_diff(&h.value()) < 1e-12);
    }

    #[test]
    fn whobo_token_matters() {
        let (net, store) = init_rope(small(RopeVariant::Full), 3).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let tok: Vec<Var> = [24, 11, 6].iter().enumerate().map(|(i, &j)| tape.constant(randn(40 + i as u64, &[1, j, 8]))).collect();
        let (a, _) = net.isl_forward(&p, &tok, tape.constant(randn(50, &[1, 1, 8]))).unwrap();
        let (b, _) = net.isl_forward(&p, &tok, tape.constant(Tensor::zeros([1, 1, 8]))).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.shape()[2], 16);
            assert!(x.value().max_abs_diff(&y.value()) > 0.0);
        }
    }

    #[test]
    fn identical_rows_give_value_rows() {
        let table = default_partition();
        let cfg = RopeConfig { icl_residual: false, ..small(RopeVariant::Full) };
        let (net, store) = init_rope(cfg, 4).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let row = randn(60, &[1, 1, 16]);
        let rep = |j: usize| tape.constant(Tensor::new(vec![1, j, 16], row.data().repeat(j)).unwrap());
        let (out, _) = net.icl_forward(&p, &table, &[rep(24), rep(11), rep(6)]).unwrap();
        for (i, o) in out.iter().enumerate() {
            let v = net.icl[i].v.forward(&p, tape.constant(row.clone())).unwrap().value();
            assert_eq!(o.shape(), vec![1, 24, 16]);
            for j in 0..24 {
                for k in 0..16 {
                    assert!((o.value().at(&[0, j, k]) - v.at(&[0, 0, k])).abs() < 1e-12);
                }
            }
        }
    }

    /// Relabels joints by `perm` everywhere: tables, Indep tokens and the
    /// Indep logit channels. The θ rows must follow the same relabeling.
    #[test]
    fn joint_relabeling_permutes_theta_rows() {
        let table = default_partition();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut perm: Vec<usize> = (0..24).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut rng);
        let permuted = table.permuted(&perm).unwrap();
        let (net, mut store) = init_rope(small(RopeVariant::Full), 5).unwrap();
        let (att, feat) = inputs(5, 1, 4, 8);

        let theta = |store: &ParamStore, table: &PartitionTable, att: &[Tensor; 4]| {
            let tape = Tape::new();
            let p = store.bind(&tape, false);
            let out = net.forward(&p, table, &att.clone().map(|t| tape.constant(t)), &feat.clone().map(|t| tape.constant(t))).unwrap();
            out.theta.value()
        };
        let base = theta(&store, &table, &att);

        // channel j of the Indep inputs moves to perm[j]
        let move_cols = |t: &Tensor, offset: usize| -> Tensor {
            let w = *t.shape().last().unwrap();
            let mut d = t.to_vec();
            for (row_in, row_out) in t.data().chunks(w).zip(d.chunks_mut(w)) {
                for j in 0..24 {
                    row_out[offset + perm[j]] = row_in[offset + j];
                }
            }
            Tensor::new(t.shape().to_vec(), d).unwrap()
        };
        let mut att_p = att.clone();
        att_p[0] = move_cols(&att[0], 0);
        let conv = net.att_conv[0];
        let (w, b) = (store.get(conv.w).clone(), store.get(conv.b).clone());
        store.set(conv.w, move_cols(&w, 1)).unwrap();
        store.set(conv.b, move_cols(&b.reshape([1, 25]).unwrap(), 1).reshape([25]).unwrap()).unwrap();
        let moved = theta(&store, &permuted, &att_p);
        for j in 0..24 {
            for k in 0..6 {
                assert!((moved.at(&[0, perm[j], k]) - base.at(&[0, j, k])).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn bias_only_head_decodes_to_identity() {
        let (net, mut store) = init_rope(small(RopeVariant::Full), 6).unwrap();
        store.set(net.head.theta.l2.w, Tensor::zeros([12, 6])).unwrap();
        let table = default_partition();
        let (att, feat) = inputs(6, 2, 4, 8);
        let params = net.predict(&store, &table, &SceneBatch { att, feat }).unwrap();
        for p in &params {
            for r in p.theta.data().chunks(6) {
                assert_eq!(r, ROT6D_IDENTITY);
                assert!((rot6d_to_rotmat(r).unwrap() - nalgebra::Matrix3::identity()).norm() < 1e-15);
            }
        }
    }

    #[test]
    fn outputs_are_differentiable_in_the_logits() {
        let table = default_partition();
        let (net, store) = init_rope(small(RopeVariant::Full), 7).unwrap();
        let (att, feat) = inputs(7, 1, 3, 8);
        let probe = randn(70, &[1, 24, 6]);
        let report = grad_check_multi(
            |tape, xs| {
                let p = store.bind(tape, false);
                let a = [xs[0], xs[1], xs[2], xs[3]];
                let out = net.forward(&p, &table, &a, &feat.clone().map(|t| tape.constant(t)))?;
                Ok(out.theta.mul(tape.constant(probe.clone()))?.sum().add(out.cam.sum())?.add(out.beta.sum())?)
            },
            &att,
            1e-6,
        )
        .unwrap();
        assert!(report.passes(1e-5), "{report:?}");
    }

    #[test]
    fn residual_requires_matching_width() {
        let cfg = RopeConfig { icl_residual: true, icl_dim: 8, ..small(RopeVariant::Full) };
        assert!(cfg.validate().is_err());
        assert!(RopeConfig { heads: 3, ..small(RopeVariant::Full) }.validate().is_err());
    }
}
