use std::path::{Path, PathBuf};

use ropetp_core::diffusion::{DenoiserConfig, TrajTrainConfig};
use ropetp_core::hierarchy::{default_partition, PartitionTable};
use ropetp_core::rope::{OcclusionAugment, RopeTrainConfig};
use ropetp_core::synth::{Rect, SceneSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub sequences: usize,
    pub held_out_sequences: usize,
    pub frames: usize,
    pub fps: f64,
    pub scenes: usize,
    pub held_out_scenes: usize,
    pub scene: SceneSpec,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            sequences: 2000,
            held_out_sequences: 200,
            frames: 60,
            fps: 30.0,
            scenes: 2000,
            held_out_scenes: 200,
            scene: SceneSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajRun {
    pub steps: usize,
    pub train: TrajTrainConfig,
}

impl Default for TrajRun {
    fn default() -> Self {
        TrajRun {
            steps: 600,
            train: TrajTrainConfig {
                denoiser: DenoiserConfig { layers: 4, ..DenoiserConfig::default() },
                lr: 1e-3,
                batch: 32,
                ..TrajTrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RopeRun {
    pub steps: usize,
    pub train: RopeTrainConfig,
}

impl Default for RopeRun {
    fn default() -> Self {
        RopeRun {
            steps: 1500,
            train: RopeTrainConfig { occlusion: OcclusionAugment { prob: 0.5, side: 0.5 }, ..RopeTrainConfig::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleRun {
    pub ddim_steps: usize,
    /// Placements scored for the occluded regression metrics.
    pub occluders: Vec<Rect>,
}

impl Default for SampleRun {
    fn default() -> Self {
        SampleRun { ddim_steps: 100, occluders: quadrant_occluders(16, 16) }
    }
}

/// The four quadrants of an `h x w` image.
pub fn quadrant_occluders(h: usize, w: usize) -> Vec<Rect> {
    let (hh, hw) = (h / 2, w / 2);
    [(0, 0), (0, hw), (hh, 0), (hh, hw)].into_iter().map(|(top, left)| Rect { top, left, height: hh, width: hw }).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OccmapRun {
    /// Occluder height and width in pixels.
    pub occluder: [usize; 2],
    pub stride: usize,
    /// Held-out scene to probe.
    pub scene: usize,
}

impl Default for OccmapRun {
    fn default() -> Self {
        OccmapRun { occluder: [8, 8], stride: 2, scene: 0 }
    }
}

/// One experiment: every command reads the sections it needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Drives every generator and trainer; nested seeds are overwritten.
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Datasets and checkpoints are read from here; defaults to `out`.
    #[serde(default)]
    pub input: Option<PathBuf>,
    #[serde(default = "default_vertices")]
    pub template_vertices: usize,
    #[serde(default = "default_partition")]
    pub partition: PartitionTable,
    #[serde(default)]
    pub gen: GenConfig,
    #[serde(default)]
    pub traj: TrajRun,
    #[serde(default)]
    pub rope: RopeRun,
    #[serde(default)]
    pub sample: SampleRun,
    #[serde(default)]
    pub occmap: OccmapRun,
}

fn default_out() -> PathBuf {
    PathBuf::from("run")
}

fn default_vertices() -> usize {
    1536
}

impl RunConfig {
    pub fn with_seed(seed: u64) -> Self {
        let mut c = RunConfig {
            seed,
            out: default_out(),
            input: None,
            template_vertices: default_vertices(),
            partition: default_partition(),
            gen: GenConfig::default(),
            traj: TrajRun::default(),
            rope: RopeRun::default(),
            sample: SampleRun::default(),
            occmap: OccmapRun::default(),
        };
        c.sync_seeds();
        c
    }

    /// Parses TOML, or JSON when the path ends in `.json`.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let json = path.extension().is_some_and(|e| e == "json");
        let mut c = if json { Self::from_json(&text) } else { Self::from_toml(&text) }
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        if let Some(dir) = path.parent() {
            c.resolve_relative(dir);
        }
        Ok(c)
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        Self::from_value(toml::from_str(text).map_err(|e| e.to_string())?)
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        Self::from_value(serde_json::from_str(text).map_err(|e| e.to_string())?)
    }

    /// Layers `user` over the defaults, table by table.
    fn from_value(user: serde_json::Value) -> Result<Self, String> {
        if user.get("seed").is_none() {
            return Err("missing field `seed`".into());
        }
        let mut merged = serde_json::to_value(RunConfig::with_seed(0)).expect("config serializes");
        merge(&mut merged, user);
        let mut c: RunConfig = serde_path_to_error::deserialize(merged).map_err(|e| e.to_string())?;
        c.sync_seeds();
        Ok(c)
    }

    fn resolve_relative(&mut self, base: &Path) {
        if self.out.is_relative() {
            self.out = base.join(&self.out);
        }
        if let Some(i) = self.input.as_mut().filter(|i| i.is_relative()) {
            *i = base.join(&*i);
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.sync_seeds();
    }

    fn sync_seeds(&mut self) {
        self.traj.train.seed = self.seed;
        self.rope.train.seed = self.seed;
        self.gen.scene.seed = self.seed;
    }

    pub fn input_dir(&self) -> &Path {
        self.input.as_deref().unwrap_or(&self.out)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |e: ropetp_core::Error| CliError::Validation(e.to_string());
        self.traj.train.validate().map_err(bad)?;
        self.rope.train.validate().map_err(bad)?;
        self.gen.scene.validate().map_err(bad)?;
        if let Some(i) = &self.input {
            if !i.is_dir() {
                return Err(CliError::Validation(format!("input directory {} does not exist", i.display())));
            }
        }
        if self.gen.frames < 2 || self.gen.sequences == 0 || self.gen.scenes == 0 {
            return Err(CliError::Validation("gen needs at least one sequence of two frames and one scene".into()));
        }
        let (h, w) = (self.gen.scene.h, self.gen.scene.w);
        if let Some(r) = self.sample.occluders.iter().find(|r| r.top + r.height > h || r.left + r.width > w) {
            return Err(CliError::Validation(format!("occluder {r:?} does not fit a {h}x{w} scene")));
        }
        if self.rope.train.model.channels != self.gen.scene.c {
            return Err(CliError::Validation(format!(
                "rope channels {} differ from scene channels {}",
                self.rope.train.model.channels, self.gen.scene.c
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, directories excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        c.input = None;
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_mandatory() {
        assert!(RunConfig::from_toml("out = \"x\"").unwrap_err().contains("seed"));
        assert!(RunConfig::from_json("{}").is_err());
    }

    #[test]
    fn unknown_fields_name_their_path() {
        let err = RunConfig::from_toml("seed = 1\n[traj]\nstep = 3\n").unwrap_err();
        assert!(err.contains("traj"), "{err}");
    }

    #[test]
    fn toml_and_json_agree() {
        let t = RunConfig::from_toml("seed = 4\n[traj]\nsteps = 7\n[traj.train]\nlr = 0.5\n").unwrap();
        let j = RunConfig::from_json(r#"{"seed": 4, "traj": {"steps": 7, "train": {"lr": 0.5}}}"#).unwrap();
        assert_eq!(t, j);
        assert_eq!(t.hash(), j.hash());
        assert_eq!(t.traj.train.seed, 4);
        assert_eq!(t.traj.train.batch, TrajRun::default().train.batch);
        assert_eq!(t.traj.train.denoiser.layers, 4);
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::with_seed(1);
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.set_seed(2);
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        let mut c = a.clone();
        c.out = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), c.hash());
    }

    #[test]
    fn validation_catches_missing_input() {
        let mut c = RunConfig::with_seed(0);
        c.validate().unwrap();
        c.input = Some(PathBuf::from("/definitely/not/here"));
        assert!(c.validate().is_err());
    }
}
