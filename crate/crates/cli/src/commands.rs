use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ropetp_core::body::{BodyParams, BodyTemplate};
use ropetp_core::diffusion::{write_loss_csv, MotionSequence, TrajDataset, TrajTrainer};
use ropetp_core::metrics::{mpjpe, mpvpe, occlusion_sensitivity_map, pa_mpjpe, w_mpjpe, wa_mpjpe, world_protocol};
use ropetp_core::nn::Checkpoint;
use ropetp_core::rope::{write_rope_loss_csv, FeatureScene, RopeDataset, RopeTrainer, RopeVariant, SceneLabels};
use ropetp_core::synth::{
    apply_occluder, gen_locomotion, load_motion, load_scenes, save_motion, save_scenes, GaitSpec, OccluderMode, SceneRecord,
};
use ropetp_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::gradcheck::{report_csv, run_suite, standard_cases};
use crate::{io_err, write_file, CliError, CliResult, Manifest};

pub const MOTION_TRAIN: &str = "motion_train.jsonl";
pub const MOTION_TEST: &str = "motion_test.jsonl";
pub const SCENES_TRAIN: &str = "scenes_train.jsonl";
pub const SCENES_TEST: &str = "scenes_test.jsonl";

/// Predictions are scored in chunks of this many scenes.
const PREDICT_CHUNK: usize = 50;

fn template(cfg: &RunConfig) -> CliResult<BodyTemplate> {
    Ok(BodyTemplate::procedural(cfg.template_vertices)?)
}

fn prepare_out(cfg: &RunConfig) -> CliResult<&Path> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out).map_err(io_err(&cfg.out))?;
    Ok(&cfg.out)
}

fn input(cfg: &RunConfig, name: &str) -> CliResult<PathBuf> {
    let path = cfg.input_dir().join(name);
    if !path.exists() {
        return Err(CliError::Validation(format!("{} is missing", path.display())));
    }
    Ok(path)
}

pub fn gait_seed(seed: u64, index: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(index)
}

fn motion_set(cfg: &RunConfig, body: &BodyTemplate, range: std::ops::Range<usize>) -> CliResult<Vec<MotionSequence>> {
    range.map(|i| Ok(gen_locomotion(&GaitSpec::random(gait_seed(cfg.seed, i as u64), cfg.gen.frames, cfg.gen.fps), body)?)).collect()
}

/// Writes the motion and scene datasets. Held-out items continue the
/// training index sequence.
pub fn gen_data(cfg: &RunConfig) -> CliResult<()> {
    let out = prepare_out(cfg)?;
    let body = template(cfg)?;
    let g = &cfg.gen;
    save_motion(&out.join(MOTION_TRAIN), &motion_set(cfg, &body, 0..g.sequences)?)?;
    save_motion(&out.join(MOTION_TEST), &motion_set(cfg, &body, g.sequences..g.sequences + g.held_out_sequences)?)?;
    let scenes = |r: std::ops::Range<usize>| -> Vec<SceneRecord> {
        r.map(|i| SceneRecord::sample(&g.scene, cfg.seed, i as u64, &cfg.partition)).collect()
    };
    save_scenes(&out.join(SCENES_TRAIN), &scenes(0..g.scenes))?;
    save_scenes(&out.join(SCENES_TEST), &scenes(g.scenes..g.scenes + g.held_out_scenes))?;
    Manifest::record(out, "gen-data", &cfg.hash(), &[MOTION_TRAIN, MOTION_TEST, SCENES_TRAIN, SCENES_TEST])
}

pub fn traj_tag(cfg: &RunConfig) -> &'static str {
    if cfg.traj.train.conditioned {
        "traj"
    } else {
        "traj_uncond"
    }
}

pub fn rope_tag(cfg: &RunConfig) -> &'static str {
    match cfg.rope.train.model.variant {
        RopeVariant::Full => "rope",
        RopeVariant::IndepOnly => "rope_indep",
    }
}

fn resume_check<T: PartialEq + Serialize>(stored: &T, wanted: &T, path: &Path) -> CliResult<()> {
    if stored != wanted {
        return Err(CliError::Validation(format!(
            "{} was trained with a different configuration: {}",
            path.display(),
            serde_json::to_string(stored).unwrap_or_default()
        )));
    }
    Ok(())
}

/// Trains the trajectory denoiser up to `traj.steps` updates in total.
pub fn train_traj(cfg: &RunConfig, resume: bool) -> CliResult<()> {
    let out = prepare_out(cfg)?;
    let data = TrajDataset::new(&load_motion(&input(cfg, MOTION_TRAIN)?)?, cfg.traj.train.foot_target, cfg.traj.train.v_thresh)?;
    let tag = traj_tag(cfg);
    let ckpt = format!("{tag}.ckpt");
    let mut trainer = if resume {
        let path = out.join(&ckpt);
        let t = TrajTrainer::from_checkpoint(&Checkpoint::load(&path)?)?;
        resume_check(&t.config, &cfg.traj.train, &path)?;
        t
    } else {
        TrajTrainer::new(cfg.traj.train.clone())?
    };
    let remaining = cfg.traj.steps.saturating_sub(trainer.steps_taken());
    trainer.train(&data, remaining, |_| {})?;
    let csv = format!("{tag}_loss.csv");
    trainer.checkpoint().save(&out.join(&ckpt))?;
    write_loss_csv(&out.join(&csv), &trainer.curve)?;
    Manifest::record(out, &format!("train-{tag}"), &cfg.hash(), &[&ckpt, &csv])
}

fn load_rope_data(path: &Path, body: &BodyTemplate, cfg: &RunConfig) -> CliResult<Vec<(FeatureScene, SceneLabels)>> {
    load_scenes(path)?.iter().map(|r| Ok(r.materialize(body, &cfg.partition)?)).collect()
}

pub fn train_rope(cfg: &RunConfig, resume: bool) -> CliResult<()> {
    let out = prepare_out(cfg)?;
    let body = template(cfg)?;
    let data = RopeDataset::new(load_rope_data(&input(cfg, SCENES_TRAIN)?, &body, cfg)?)?;
    let tag = rope_tag(cfg);
    let ckpt = format!("{tag}.ckpt");
    let mut trainer = if resume {
        let path = out.join(&ckpt);
        let t = RopeTrainer::from_checkpoint(&Checkpoint::load(&path)?, body)?;
        resume_check(&t.config, &cfg.rope.train, &path)?;
        t
    } else {
        RopeTrainer::new(cfg.rope.train.clone(), cfg.partition.clone(), body)?
    };
    let remaining = cfg.rope.steps.saturating_sub(trainer.steps_taken());
    trainer.train(&data, remaining, |_| {})?;
    let csv = format!("{tag}_loss.csv");
    trainer.checkpoint().save(&out.join(&ckpt))?;
    write_rope_loss_csv(&out.join(&csv), &trainer.curve)?;
    Manifest::record(out, &format!("train-{tag}"), &cfg.hash(), &[&ckpt, &csv])
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> CliResult<()> {
    let mut buf = Vec::new();
    for it in items {
        serde_json::to_writer(&mut buf, it).expect("record serializes");
        buf.push(b'\n');
    }
    write_file(path, buf)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let de = &mut serde_json::Deserializer::from_str(l);
            serde_path_to_error::deserialize(de).map_err(|e| {
                CliError::Core(ropetp_core::Error::Schema { line: n + 1, path: e.path().to_string(), msg: e.inner().to_string() })
            })
        })
        .collect()
}

fn stack(parts: &[Tensor]) -> CliResult<Tensor> {
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(parts.first().map_or(&[][..], |t| t.shape()));
    let data = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Ok(Tensor::new(shape, data)?)
}

fn rope_predict(trainer: &RopeTrainer, scenes: &[FeatureScene]) -> CliResult<Vec<BodyParams>> {
    let mut out = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(PREDICT_CHUNK) {
        out.extend(trainer.predict(&chunk.iter().collect::<Vec<_>>())?);
    }
    Ok(out)
}

/// Held-out trajectories and body parameters from every trained model in
/// the input directory.
///
/// Writes `<tag>_samples.jsonl` per trajectory model, and per regression
/// model `<tag>_pred.jsonl` plus `<tag>_pred_occluded.jsonl`, the latter
/// scene-major over `sample.occluders`.
pub fn sample(cfg: &RunConfig) -> CliResult<()> {
    let out = prepare_out(cfg)?;
    let mut written: Vec<String> = vec![];
    let trajs: Vec<&str> = ["traj", "traj_uncond"].into_iter().filter(|t| cfg.input_dir().join(format!("{t}.ckpt")).exists()).collect();
    if !trajs.is_empty() {
        let test = load_motion(&input(cfg, MOTION_TEST)?)?;
        let joints = stack(&test.iter().map(|s| s.p.clone()).collect::<Vec<_>>())?;
        for tag in trajs {
            let trainer = TrajTrainer::from_checkpoint(&Checkpoint::load(&input(cfg, &format!("{tag}.ckpt"))?)?)?;
            let r = trainer.sample(&joints, cfg.sample.ddim_steps, cfg.seed)?;
            let (n, f) = (test.len(), test.first().map_or(0, |s| s.frames()));
            let seqs = test
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    MotionSequence::new(s.fps, Tensor::new(vec![f, 3], r.data()[i * f * 3..(i + 1) * f * 3].to_vec())?, s.p.clone(), None)
                })
                .collect::<ropetp_core::Result<Vec<_>>>()?;
            debug_assert_eq!(seqs.len(), n);
            let name = format!("{tag}_samples.jsonl");
            save_motion(&out.join(&name), &seqs)?;
            written.push(name);
        }
    }
    let ropes: Vec<&str> = ["rope", "rope_indep"].into_iter().filter(|t| cfg.input_dir().join(format!("{t}.ckpt")).exists()).collect();
    if !ropes.is_empty() {
        let body = template(cfg)?;
        let scenes: Vec<FeatureScene> = load_rope_data(&input(cfg, SCENES_TEST)?, &body, cfg)?.into_iter().map(|(s, _)| s).collect();
        let occluded = scenes
            .iter()
            .flat_map(|s| cfg.sample.occluders.iter().map(move |&r| apply_occluder(s, r, OccluderMode::Zero)))
            .collect::<ropetp_core::Result<Vec<_>>>()?;
        for tag in ropes {
            let trainer = RopeTrainer::from_checkpoint(&Checkpoint::load(&input(cfg, &format!("{tag}.ckpt"))?)?, body.clone())?;
            for (suffix, set) in [("pred", &scenes), ("pred_occluded", &occluded)] {
                let name = format!("{tag}_{suffix}.jsonl");
                write_jsonl(&out.join(&name), &rope_predict(&trainer, set)?)?;
                written.push(name);
            }
        }
    }
    if written.is_empty() {
        return Err(CliError::Validation(format!("no checkpoints found in {}", cfg.input_dir().display())));
    }
    let names: Vec<&str> = written.iter().map(String::as_str).collect();
    Manifest::record(out, "sample", &cfg.hash(), &names)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajMetrics {
    pub w_mpjpe: f64,
    pub wa_mpjpe: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RopeMetrics {
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub mpvpe: f64,
    /// Mean MPJPE over every occluder placement, when available.
    pub occluded_mpjpe: Option<f64>,
    pub degradation: Option<f64>,
    pub relative_degradation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub protocol: serde_json::Value,
    /// Keyed by model tag; `mean_baseline` is the training-set mean root path.
    pub trajectory: std::collections::BTreeMap<String, TrajMetrics>,
    pub regression: std::collections::BTreeMap<String, RopeMetrics>,
}

impl EvalReport {
    pub fn load(dir: &Path) -> CliResult<Self> {
        let path = dir.join("eval.json");
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("config_hash,model,metric,value\n");
        for (m, t) in &self.trajectory {
            let _ = writeln!(s, "{},{m},w_mpjpe,{}", self.config_hash, t.w_mpjpe);
            let _ = writeln!(s, "{},{m},wa_mpjpe,{}", self.config_hash, t.wa_mpjpe);
        }
        for (m, r) in &self.regression {
            let mut row = |k: &str, v: Option<f64>| {
                if let Some(v) = v {
                    let _ = writeln!(s, "{},{m},{k},{v}", self.config_hash);
                }
            };
            row("mpjpe", Some(r.mpjpe));
            row("pa_mpjpe", Some(r.pa_mpjpe));
            row("mpvpe", Some(r.mpvpe));
            row("occluded_mpjpe", r.occluded_mpjpe);
            row("degradation", r.degradation);
            row("relative_degradation", r.relative_degradation);
        }
        s
    }
}

fn traj_metrics(pred: &[Tensor], gt: &[Tensor]) -> CliResult<TrajMetrics> {
    if pred.len() != gt.len() || gt.is_empty() {
        return Err(CliError::Validation(format!("{} trajectories for {} held-out sequences", pred.len(), gt.len())));
    }
    let (mut w, mut wa) = (0.0, 0.0);
    for (p, g) in pred.iter().zip(gt) {
        w += w_mpjpe(p, g)?.mm;
        wa += wa_mpjpe(p, g)?.mm;
    }
    let n = gt.len() as f64;
    Ok(TrajMetrics { w_mpjpe: w / n, wa_mpjpe: wa / n })
}

fn body_points(body: &BodyTemplate, params: &[BodyParams]) -> CliResult<(Tensor, Tensor)> {
    let outs = params.iter().map(|p| body.forward_params(p)).collect::<ropetp_core::Result<Vec<_>>>()?;
    let joints = stack(&outs.iter().map(|o| o.joints.clone()).collect::<Vec<_>>())?;
    let verts = stack(&outs.iter().map(|o| o.vertices.clone()).collect::<Vec<_>>())?;
    Ok((joints, verts))
}

/// Scores every prediction file in the input directory against the
/// held-out ground truth.
pub fn eval(cfg: &RunConfig) -> CliResult<EvalReport> {
    let out = prepare_out(cfg)?;
    let dir = cfg.input_dir();
    let mut report =
        EvalReport { config_hash: cfg.hash(), protocol: world_protocol(), trajectory: Default::default(), regression: Default::default() };
    let traj_files: Vec<&str> = ["traj", "traj_uncond"].into_iter().filter(|t| dir.join(format!("{t}_samples.jsonl")).exists()).collect();
    if !traj_files.is_empty() {
        let test = load_motion(&input(cfg, MOTION_TEST)?)?;
        let gt: Vec<Tensor> = test.iter().map(MotionSequence::world_joints).collect();
        for tag in traj_files {
            let pred: Vec<Tensor> =
                load_motion(&dir.join(format!("{tag}_samples.jsonl")))?.iter().map(MotionSequence::world_joints).collect();
            report.trajectory.insert(tag.into(), traj_metrics(&pred, &gt)?);
        }
        if dir.join(MOTION_TRAIN).exists() {
            let train = TrajDataset::new(&load_motion(&dir.join(MOTION_TRAIN))?, cfg.traj.train.foot_target, cfg.traj.train.v_thresh)?;
            let mean = train.mean_trajectory();
            let pred = test
                .iter()
                .map(|s| Ok(MotionSequence::new(s.fps, mean.clone(), s.p.clone(), None)?.world_joints()))
                .collect::<CliResult<Vec<_>>>()?;
            report.trajectory.insert("mean_baseline".into(), traj_metrics(&pred, &gt)?);
        }
    }
    let rope_files: Vec<&str> = ["rope", "rope_indep"].into_iter().filter(|t| dir.join(format!("{t}_pred.jsonl")).exists()).collect();
    if !rope_files.is_empty() {
        let body = template(cfg)?;
        let records = load_scenes(&input(cfg, SCENES_TEST)?)?;
        let gt: Vec<BodyParams> = records.into_iter().map(|r| r.params).collect();
        let (gt_j, gt_v) = body_points(&body, &gt)?;
        for tag in rope_files {
            let pred: Vec<BodyParams> = read_jsonl(&dir.join(format!("{tag}_pred.jsonl")))?;
            if pred.len() != gt.len() {
                return Err(CliError::Validation(format!("{tag}: {} predictions for {} scenes", pred.len(), gt.len())));
            }
            let (pj, pv) = body_points(&body, &pred)?;
            let clean = mpjpe(&pj, &gt_j)?;
            let mut m = RopeMetrics {
                mpjpe: clean,
                pa_mpjpe: pa_mpjpe(&pj, &gt_j)?,
                mpvpe: mpvpe(&pv, &gt_v)?,
                occluded_mpjpe: None,
                degradation: None,
                relative_degradation: None,
            };
            let occ_path = dir.join(format!("{tag}_pred_occluded.jsonl"));
            if occ_path.exists() {
                let occ: Vec<BodyParams> = read_jsonl(&occ_path)?;
                if gt.is_empty() || !occ.len().is_multiple_of(gt.len()) || occ.is_empty() {
                    return Err(CliError::Validation(format!("{tag}: {} occluded predictions for {} scenes", occ.len(), gt.len())));
                }
                let k = occ.len() / gt.len();
                let (oj, _) = body_points(&body, &occ)?;
                let gt_rep = stack(&(0..occ.len()).map(|i| body_row(&gt_j, i / k)).collect::<Vec<_>>())?;
                let o = mpjpe(&oj, &gt_rep)?;
                m.occluded_mpjpe = Some(o);
                m.degradation = Some(o - clean);
                m.relative_degradation = Some(if clean > 0.0 { (o - clean) / clean } else { 0.0 });
            }
            report.regression.insert(tag.into(), m);
        }
    }
    if report.trajectory.is_empty() && report.regression.is_empty() {
        return Err(CliError::Validation(format!("no predictions found in {}", dir.display())));
    }
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    write_file(&out.join("eval.json"), json)?;
    write_file(&out.join("eval.csv"), report.to_csv())?;
    Manifest::record(out, "eval", &cfg.hash(), &["eval.json", "eval.csv"])?;
    Ok(report)
}

fn body_row(t: &Tensor, i: usize) -> Tensor {
    let per: usize = t.shape()[1..].iter().product();
    Tensor::new(t.shape()[1..].to_vec(), t.data()[i * per..(i + 1) * per].to_vec()).expect("row shape")
}

/// Worst-joint error map of the trained network over one held-out scene.
pub fn occmap(cfg: &RunConfig) -> CliResult<()> {
    let out = prepare_out(cfg)?;
    let body = template(cfg)?;
    let records = load_scenes(&input(cfg, SCENES_TEST)?)?;
    let rec = records
        .get(cfg.occmap.scene)
        .ok_or_else(|| CliError::Validation(format!("occmap.scene {} is out of range ({} scenes)", cfg.occmap.scene, records.len())))?;
    let (scene, labels) = rec.materialize(&body, &cfg.partition)?;
    let trainer = RopeTrainer::from_checkpoint(&Checkpoint::load(&input(cfg, "rope.ckpt")?)?, body)?;
    let [oh, ow] = cfg.occmap.occluder;
    let grid = occlusion_sensitivity_map(
        |s| Ok(body_row(&trainer.predict_joints(&[s])?, 0)),
        &scene,
        &labels.joints3d,
        (oh, ow),
        cfg.occmap.stride,
    )?;
    let report = serde_json::json!({
        "config_hash": cfg.hash(),
        "scene": cfg.occmap.scene,
        "occluder": cfg.occmap.occluder,
        "stride": cfg.occmap.stride,
        "units": "mm",
        "grid": grid,
    });
    write_file(&out.join("occmap.json"), serde_json::to_string_pretty(&report).expect("report serializes") + "\n")?;
    write_file(&out.join("occmap.grid.json"), grid.to_json() + "\n")?;
    write_file(&out.join("occmap.csv"), grid.to_csv())?;
    Manifest::record(out, "occmap", &cfg.hash(), &["occmap.json", "occmap.grid.json", "occmap.csv"])
}

pub const GRADCHECK_POINTS: usize = 10;
pub const GRADCHECK_TOL: f64 = 1e-5;

/// Finite-difference check of every differentiable op; fails if any op
/// exceeds the tolerance.
pub fn gradcheck(out: &Path, seed: u64, log: &mut dyn std::io::Write) -> CliResult<()> {
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let results = run_suite(&standard_cases(), GRADCHECK_POINTS, seed, GRADCHECK_TOL);
    let csv = report_csv(&results);
    write_file(&out.join("gradcheck.csv"), &csv)?;
    let _ = log.write_all(csv.as_bytes());
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if !failed.is_empty() {
        return Err(CliError::Failed(format!("gradient check failed for {}", failed.join(", "))));
    }
    Ok(())
}
