//! JSON-lines datasets: one record per line, each with a mandatory
//! `version` field.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::SceneRecord;
use crate::body::NUM_JOINTS;
use crate::diffusion::MotionSequence;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MotionLine {
    version: u32,
    fps: f64,
    r: Vec<[f64; 3]>,
    p: Vec<Vec<[f64; 3]>>,
    contacts: Option<Vec<[bool; 2]>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneLine {
    version: u32,
    #[serde(flatten)]
    record: SceneRecord,
}

fn schema(line: usize, path: impl Into<String>, msg: impl Into<String>) -> Error {
    Error::Schema { line, path: path.into(), msg: msg.into() }
}

fn write_lines<T: Serialize>(path: &Path, items: impl Iterator<Item = T>) -> Result<()> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, &item)?;
        out.push(b'\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

fn parse_lines<T: DeserializeOwned>(text: &str, version: impl Fn(&T) -> u32) -> Result<Vec<(usize, T)>> {
    let mut out = vec![];
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let de = &mut serde_json::Deserializer::from_str(line);
        let item: T = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            schema(n, path, e.into_inner().to_string())
        })?;
        if version(&item) != SCHEMA_VERSION {
            return Err(schema(n, "version", format!("expected {SCHEMA_VERSION}, found {}", version(&item))));
        }
        out.push((n, item));
    }
    Ok(out)
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn motion_to_jsonl(seqs: &[MotionSequence]) -> Result<String> {
    let mut out = String::new();
    for m in seqs {
        out.push_str(&serde_json::to_string(&motion_line(m))?);
        out.push('\n');
    }
    Ok(out)
}

fn motion_line(m: &MotionSequence) -> MotionLine {
    MotionLine {
        version: SCHEMA_VERSION,
        fps: m.fps,
        r: m.r.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
        p: m.p.data().chunks(NUM_JOINTS * 3).map(|f| f.chunks(3).map(|c| [c[0], c[1], c[2]]).collect()).collect(),
        contacts: m.contacts.clone(),
    }
}

pub fn motion_from_jsonl(text: &str) -> Result<Vec<MotionSequence>> {
    parse_lines::<MotionLine>(text, |l| l.version)?
        .into_iter()
        .map(|(n, l)| {
            let frames = l.r.len();
            if frames < 2 {
                return Err(schema(n, "r", format!("at least two frames are needed, found {frames}")));
            }
            if l.p.len() != frames {
                return Err(schema(n, "p", format!("expected {frames} frames, found {}", l.p.len())));
            }
            if let Some(f) = l.p.iter().position(|row| row.len() != NUM_JOINTS) {
                return Err(schema(n, format!("p[{f}]"), format!("expected {NUM_JOINTS} joints, found {}", l.p[f].len())));
            }
            if let Some(c) = &l.contacts {
                if c.len() != frames - 1 {
                    return Err(schema(n, "contacts", format!("expected {} rows, found {}", frames - 1, c.len())));
                }
            }
            let r = Tensor::new(vec![frames, 3], l.r.concat())?;
            let p = Tensor::new(vec![frames, NUM_JOINTS, 3], l.p.concat().concat())?;
            MotionSequence::new(l.fps, r, p, l.contacts).map_err(|e| schema(n, "", e.to_string()))
        })
        .collect()
}

pub fn save_motion(path: &Path, seqs: &[MotionSequence]) -> Result<()> {
    write_lines(path, seqs.iter().map(motion_line))
}

pub fn load_motion(path: &Path) -> Result<Vec<MotionSequence>> {
    motion_from_jsonl(&read(path)?)
}

pub fn save_scenes(path: &Path, records: &[SceneRecord]) -> Result<()> {
    write_lines(path, records.iter().map(|r| SceneLine { version: SCHEMA_VERSION, record: r.clone() }))
}

pub fn scenes_from_jsonl(text: &str) -> Result<Vec<SceneRecord>> {
    parse_lines::<SceneLine>(text, |l| l.version)?
        .into_iter()
        .map(|(n, l)| {
            l.record.spec.validate().map_err(|e| schema(n, "spec", e.to_string()))?;
            l.record.params.validate().map_err(|e| schema(n, "params", e.to_string()))?;
            Ok(l.record)
        })
        .collect()
}

pub fn load_scenes(path: &Path) -> Result<Vec<SceneRecord>> {
    scenes_from_jsonl(&read(path)?)
}
