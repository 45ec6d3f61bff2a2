use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{rope_loss, LabelBatch, RopeLossConfig};
use super::model::{RopeConfig, RopeNet};
use super::scene::{FeatureScene, SceneBatch, SceneLabels};
use crate::body::diff::body_forward;
use crate::body::{BodyParams, BodyTemplate};
use crate::camera::PartMask;
use crate::error::{Error, Result};
use crate::hierarchy::PartitionTable;
use crate::nn::{Adam, AdamConfig, Checkpoint, ParamStore};
use crate::synth::{apply_occluder, OccluderMode, Rect};
use crate::tensor::{Tape, Tensor};

/// Random zero-filled square occluders applied to training scenes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OcclusionAugment {
    /// Probability that a sample is occluded.
    pub prob: f64,
    /// Side of the square as a fraction of the image side.
    pub side: f64,
}

impl Default for OcclusionAugment {
    fn default() -> Self {
        OcclusionAugment { prob: 0.0, side: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RopeTrainConfig {
    pub model: RopeConfig,
    pub loss: RopeLossConfig,
    pub lr: f64,
    pub batch: usize,
    pub clip_norm: Option<f64>,
    pub occlusion: OcclusionAugment,
    pub seed: u64,
}

impl Default for RopeTrainConfig {
    fn default() -> Self {
        RopeTrainConfig {
            model: RopeConfig::default(),
            loss: RopeLossConfig::default(),
            lr: 1e-3,
            batch: 16,
            clip_norm: Some(1.0),
            occlusion: OcclusionAugment::default(),
            seed: 0,
        }
    }
}

impl RopeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch == 0 || !(self.lr >= 0.0) {
            return Err(Error::invalid("RopeTrainConfig", "batch must be positive and lr non-negative"));
        }
        if !(0.0..=1.0).contains(&self.occlusion.prob) || !(0.0..=1.0).contains(&self.occlusion.side) {
            return Err(Error::invalid("RopeTrainConfig", "occlusion prob and side must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Scenes and labels of one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeDataset {
    pub scenes: Vec<FeatureScene>,
    pub labels: Vec<SceneLabels>,
}

impl RopeDataset {
    pub fn new(pairs: Vec<(FeatureScene, SceneLabels)>) -> Result<Self> {
        let (scenes, labels): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let first = scenes.first().ok_or_else(|| Error::invalid("RopeDataset", "empty dataset"))?;
        for (i, s) in scenes.iter().enumerate() {
            s.validate()?;
            if s.feat[0].shape() != first.feat[0].shape() {
                return Err(Error::invalid(
                    "RopeDataset",
                    format!("scene {i} has shape {:?}, expected {:?}", s.feat[0].shape(), first.feat[0].shape()),
                ));
            }
        }
        Ok(RopeDataset { scenes, labels })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn labels(&self, idx: &[usize]) -> Result<LabelBatch> {
        LabelBatch::new(&idx.iter().map(|&i| &self.labels[i]).collect::<Vec<_>>())
    }

    pub fn scenes(&self, idx: &[usize]) -> Result<SceneBatch> {
        SceneBatch::new(&idx.iter().map(|&i| &self.scenes[i]).collect::<Vec<_>>())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RopeLossRecord {
    pub step: usize,
    pub total: f64,
    pub smpl: f64,
    pub j3d: f64,
    pub j2d: f64,
    pub att: f64,
}

pub fn rope_loss_csv(records: &[RopeLossRecord]) -> String {
    let mut out = String::from("step,total,smpl,3d,2d,att\n");
    for r in records {
        let _ = writeln!(out, "{},{},{},{},{},{}", r.step, r.total, r.smpl, r.j3d, r.j2d, r.att);
    }
    out
}

pub fn write_rope_loss_csv(path: &Path, records: &[RopeLossRecord]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, rope_loss_csv(records)).map_err(|e| Error::io(path, e))
}

/// Running minimum of a loss history.
pub fn monotone_curve(values: &[f64]) -> Vec<f64> {
    values
        .iter()
        .scan(f64::INFINITY, |m, &v| {
            *m = m.min(v);
            Some(*m)
        })
        .collect()
}

/// Per-pixel argmax over the class axis of `[H, W, K]` logits.
pub fn argmax_mask(logits: &Tensor) -> Result<PartMask> {
    let s = logits.shape();
    if s.len() != 3 || s[2] == 0 {
        return Err(Error::shape("argmax_mask", &[0, 0, 1], s));
    }
    let labels = logits
        .data()
        .chunks(s[2])
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best as u16
        })
        .collect();
    Ok(PartMask { h: s[0], w: s[1], labels })
}

/// Mean IoU over the non-background labels present in either mask; 1 when
/// both are all background.
pub fn mask_iou(pred: &PartMask, gt: &PartMask) -> Result<f64> {
    if (pred.h, pred.w) != (gt.h, gt.w) {
        return Err(Error::shape("mask_iou", &[gt.h, gt.w], &[pred.h, pred.w]));
    }
    let classes = pred.max_label().max(gt.max_label()) as usize;
    let mut inter = vec![0usize; classes + 1];
    let mut union = vec![0usize; classes + 1];
    for (&a, &b) in pred.labels.iter().zip(&gt.labels) {
        if a == b {
            inter[a as usize] += 1;
            union[a as usize] += 1;
        } else {
            union[a as usize] += 1;
            union[b as usize] += 1;
        }
    }
    let ious: Vec<f64> = (1..=classes).filter(|&c| union[c] > 0).map(|c| inter[c] as f64 / union[c] as f64).collect();
    Ok(if ious.is_empty() { 1.0 } else { ious.iter().sum::<f64>() / ious.len() as f64 })
}

const CHECKPOINT_KIND: &str = "rope_net";

pub struct RopeTrainer {
    pub config: RopeTrainConfig,
    pub model: RopeNet,
    pub store: ParamStore,
    pub table: PartitionTable,
    pub template: BodyTemplate,
    pub curve: Vec<RopeLossRecord>,
    adam: Adam,
    step: usize,
}

impl RopeTrainer {
    pub fn new(config: RopeTrainConfig, table: PartitionTable, template: BodyTemplate) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let model = RopeNet::new(config.model.clone(), &mut store, &mut rng)?;
        let adam = Adam::new(AdamConfig { lr: config.lr, clip_norm: config.clip_norm, ..AdamConfig::default() }, &store);
        Ok(RopeTrainer { config, model, store, table, template, curve: vec![], adam, step: 0 })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Passes over the data completed before the current step.
    pub fn epoch(&self, data: &RopeDataset) -> usize {
        self.step * self.config.batch / data.len()
    }

    fn step_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.step as u64 + 1);
        rng
    }

    fn occlude(&self, scene: &FeatureScene, rng: &mut ChaCha8Rng) -> Result<FeatureScene> {
        let aug = self.config.occlusion;
        if aug.prob == 0.0 || !rng.random_bool(aug.prob) {
            return Ok(scene.clone());
        }
        let (h, w) = (scene.height(), scene.width());
        let (sh, sw) = (((h as f64 * aug.side).round() as usize).min(h), ((w as f64 * aug.side).round() as usize).min(w));
        let rect = Rect { top: rng.random_range(0..=h - sh), left: rng.random_range(0..=w - sw), height: sh, width: sw };
        apply_occluder(scene, rect, OccluderMode::Zero)
    }

    /// One optimizer update on a batch drawn from `data`.
    pub fn train_step(&mut self, data: &RopeDataset) -> Result<RopeLossRecord> {
        let mut rng = self.step_rng();
        let idx: Vec<usize> = (0..self.config.batch).map(|_| rng.random_range(0..data.len())).collect();
        let scenes = idx.iter().map(|&i| self.occlude(&data.scenes[i], &mut rng)).collect::<Result<Vec<_>>>()?;
        let batch = SceneBatch::new(&scenes.iter().collect::<Vec<_>>())?;
        let labels = data.labels(&idx)?;
        let epoch = self.epoch(data);

        let tape = Tape::new();
        let p = self.store.bind(&tape, true);
        let evaluated = self
            .model
            .forward(&p, &self.table, &batch.att.clone().map(|t| tape.constant(t)), &batch.feat.clone().map(|t| tape.constant(t)))
            .and_then(|out| rope_loss(&out, &labels, &self.template, epoch, &self.config.loss));
        let loss = match evaluated {
            Ok(l) if l.total.value().item().is_finite() => l,
            Ok(l) => return Err(self.divergence(&scenes, &idx, l.total.value().item())),
            Err(Error::NonFinite { .. }) => return Err(self.divergence(&scenes, &idx, f64::NAN)),
            Err(e) => return Err(e),
        };
        let record = RopeLossRecord {
            step: self.step,
            total: loss.total.value().item(),
            smpl: loss.smpl.value().item(),
            j3d: loss.j3d.value().item(),
            j2d: loss.j2d.value().item(),
            att: loss.att.value().item(),
        };
        let grads = p.grads(&tape.backward(loss.total)?);
        self.adam.step(&mut self.store, &grads)?;
        self.step += 1;
        self.curve.push(record);
        Ok(record)
    }

    /// Reevaluates the batch one sample at a time to name the first that
    /// fails to produce finite outputs.
    fn divergence(&self, scenes: &[FeatureScene], idx: &[usize], loss: f64) -> Error {
        let bad = scenes.iter().position(|s| self.predict(&[s]).map_or(true, |p| p.iter().any(|b| b.validate().is_err()))).unwrap_or(0);
        Error::Divergence { step: self.step, batch: idx[bad], loss }
    }

    pub fn train(&mut self, data: &RopeDataset, steps: usize, mut on_step: impl FnMut(&RopeLossRecord)) -> Result<()> {
        for _ in 0..steps {
            let r = self.train_step(data)?;
            on_step(&r);
        }
        Ok(())
    }

    pub fn predict(&self, scenes: &[&FeatureScene]) -> Result<Vec<BodyParams>> {
        self.model.predict(&self.store, &self.table, &SceneBatch::new(scenes)?)
    }

    /// Predicted joints `[B, 24, 3]`.
    pub fn predict_joints(&self, scenes: &[&FeatureScene]) -> Result<Tensor> {
        let batch = SceneBatch::new(scenes)?;
        let tape = Tape::new();
        let p = self.store.bind(&tape, false);
        let out = self.model.forward(&p, &self.table, &batch.att.map(|t| tape.constant(t)), &batch.feat.map(|t| tape.constant(t)))?;
        Ok(body_forward(&self.template, out.theta, out.beta)?.joints.value())
    }

    /// Argmax part masks per scene for the levels the model uses, indexed
    /// like [`RopeNet::levels`].
    pub fn predict_masks(&self, scenes: &[&FeatureScene]) -> Result<Vec<Vec<PartMask>>> {
        let batch = SceneBatch::new(scenes)?;
        let tape = Tape::new();
        let p = self.store.bind(&tape, false);
        let out = self.model.forward(&p, &self.table, &batch.att.map(|t| tape.constant(t)), &batch.feat.map(|t| tape.constant(t)))?;
        let mut masks = vec![vec![]; scenes.len()];
        for (_, l) in &out.logits {
            let v = l.value();
            let s = v.shape();
            let per = s[1] * s[2] * s[3];
            for (b, m) in masks.iter_mut().enumerate() {
                m.push(argmax_mask(&Tensor::new(s[1..].to_vec(), v.data()[b * per..(b + 1) * per].to_vec())?)?);
            }
        }
        Ok(masks)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(serde_json::json!({
            "kind": CHECKPOINT_KIND,
            "config": self.config,
            "table": self.table,
            "step": self.step,
            "curve": self.curve,
        }));
        ck.extend("model.", self.store.named());
        let (_, m, v) = self.adam.state(&self.store);
        ck.extend("adam.m.", m.into_iter().enumerate().map(|(i, t)| (i.to_string(), t)));
        ck.extend("adam.v.", v.into_iter().enumerate().map(|(i, t)| (i.to_string(), t)));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, template: BodyTemplate) -> Result<Self> {
        if ck.meta["kind"] != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!("expected a {CHECKPOINT_KIND} checkpoint, found {}", ck.meta["kind"])));
        }
        let config: RopeTrainConfig = serde_json::from_value(ck.meta["config"].clone())?;
        let table: PartitionTable = serde_json::from_value(ck.meta["table"].clone())?;
        let mut tr = RopeTrainer::new(config, table, template)?;
        tr.store.load_named(&ck.section("model."))?;
        tr.step = serde_json::from_value(ck.meta["step"].clone())?;
        tr.curve = serde_json::from_value(ck.meta["curve"].clone())?;
        let moments = |prefix: &str| -> Vec<Tensor> {
            let mut named = ck.section(prefix);
            named.sort_by_key(|(n, _)| n.parse::<usize>().unwrap_or(usize::MAX));
            named.into_iter().map(|(_, t)| t).collect()
        };
        tr.adam.restore(tr.step as u64, &moments("adam.m."), &moments("adam.v."))?;
        Ok(tr)
    }
}
