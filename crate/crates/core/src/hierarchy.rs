//! The four body-hierarchy levels and their joint-to-part tables.

use serde::{Deserialize, Serialize};

use crate::body::NUM_JOINTS;
use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Level {
    Indep,
    Inter,
    FulCo,
    WhoBo,
}

impl Level {
    pub const ALL: [Level; 4] = [Level::Indep, Level::Inter, Level::FulCo, Level::WhoBo];

    pub fn part_count(self) -> usize {
        match self {
            Level::Indep => 24,
            Level::Inter => 11,
            Level::FulCo => 6,
            Level::WhoBo => 1,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Level::Indep => "indep",
            Level::Inter => "inter",
            Level::FulCo => "fulco",
            Level::WhoBo => "whobo",
        }
    }
}

/// Inter level: head+neck, upper torso, pelvis+hips, left upper arm, left
/// forearm+hand, right upper arm, right forearm+hand, left thigh, left
/// shank+foot, right thigh, right shank+foot.
pub const DEFAULT_INTER: [usize; NUM_JOINTS] = [2, 2, 2, 1, 7, 9, 1, 8, 10, 1, 8, 10, 0, 1, 1, 0, 3, 5, 3, 5, 4, 6, 4, 6];

/// FulCo level: head+neck, torso (spine chain and collars), left arm, right
/// arm, left leg, right leg.
pub const DEFAULT_FULCO: [usize; NUM_JOINTS] = [1, 4, 5, 1, 4, 5, 1, 4, 5, 1, 4, 5, 0, 1, 1, 0, 2, 3, 2, 3, 2, 3, 2, 3];

/// Joint-to-part maps. Indep is always the identity and WhoBo the constant
/// map; Inter and FulCo are configurable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawTable")]
pub struct PartitionTable {
    inter: Vec<usize>,
    fulco: Vec<usize>,
}

#[derive(Deserialize)]
struct RawTable {
    inter: Vec<usize>,
    fulco: Vec<usize>,
}

impl TryFrom<RawTable> for PartitionTable {
    type Error = Error;
    fn try_from(raw: RawTable) -> Result<Self> {
        PartitionTable::new(raw.inter, raw.fulco)
    }
}

fn check_map(level: Level, map: &[usize]) -> Result<()> {
    let parts = level.part_count();
    if map.len() != NUM_JOINTS {
        return Err(Error::invalid("PartitionTable", format!("{} map has {} entries, expected {NUM_JOINTS}", level.name(), map.len())));
    }
    if let Some(j) = map.iter().position(|&p| p >= parts) {
        return Err(Error::invalid(
            "PartitionTable",
            format!("{} map sends joint {j} to part {} (only {parts} parts)", level.name(), map[j]),
        ));
    }
    for p in 0..parts {
        if !map.contains(&p) {
            return Err(Error::invalid("PartitionTable", format!("{} part {p} has no joints", level.name())));
        }
    }
    Ok(())
}

impl Default for PartitionTable {
    fn default() -> Self {
        default_partition()
    }
}

pub fn default_partition() -> PartitionTable {
    PartitionTable::new(DEFAULT_INTER.to_vec(), DEFAULT_FULCO.to_vec()).expect("default tables are valid")
}

impl PartitionTable {
    pub fn new(inter: Vec<usize>, fulco: Vec<usize>) -> Result<Self> {
        check_map(Level::Inter, &inter)?;
        check_map(Level::FulCo, &fulco)?;
        Ok(PartitionTable { inter, fulco })
    }

    /// Part of joint `j` at `level`.
    pub fn part_of(&self, level: Level, j: usize) -> usize {
        match level {
            Level::Indep => j,
            Level::Inter => self.inter[j],
            Level::FulCo => self.fulco[j],
            Level::WhoBo => 0,
        }
    }

    pub fn map(&self, level: Level) -> Vec<usize> {
        (0..NUM_JOINTS).map(|j| self.part_of(level, j)).collect()
    }

    /// Joints of every part at `level`, in increasing joint order.
    pub fn members(&self, level: Level) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]; level.part_count()];
        for j in 0..NUM_JOINTS {
            out[self.part_of(level, j)].push(j);
        }
        out
    }

    /// Same table with joint indices relabelled: new joint `perm[j]` takes
    /// the part of old joint `j`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let mut inter = vec![0; NUM_JOINTS];
        let mut fulco = vec![0; NUM_JOINTS];
        for j in 0..NUM_JOINTS {
            inter[perm[j]] = self.inter[j];
            fulco[perm[j]] = self.fulco[j];
        }
        PartitionTable::new(inter, fulco)
    }
}

/// Row `j` of the output is the token of the part containing joint `j`.
/// Works on `[..., P, C]` with `P` the level's part count.
pub fn expand_to_joints<'t>(tokens: Var<'t>, level: Level, table: &PartitionTable) -> Result<Var<'t>> {
    let shape = tokens.shape();
    if shape.len() < 2 || shape[shape.len() - 2] != level.part_count() {
        return Err(Error::shape("expand_to_joints", &[level.part_count(), 0], &shape));
    }
    tokens.index_select(shape.len() - 2, &table.map(level))
}

/// Plain-tensor form of [`expand_to_joints`] for `[P, C]` tokens.
pub fn expand_tensor(tokens: &Tensor, level: Level, table: &PartitionTable) -> Result<Tensor> {
    let tape = crate::tensor::Tape::new();
    Ok(expand_to_joints(tape.constant(tokens.clone()), level, table)?.value())
}

/// Mean of joint rows per part: `[24, C] -> [P, C]`.
pub fn mean_pool(rows: &Tensor, level: Level, table: &PartitionTable) -> Result<Tensor> {
    if rows.rank() != 2 || rows.shape()[0] != NUM_JOINTS {
        return Err(Error::shape("mean_pool", &[NUM_JOINTS, 0], rows.shape()));
    }
    let c = rows.shape()[1];
    let members = table.members(level);
    let mut out = Vec::with_capacity(members.len() * c);
    for m in &members {
        for k in 0..c {
            out.push(m.iter().map(|&j| rows.data()[j * c + k]).sum::<f64>() / m.len() as f64);
        }
    }
    Tensor::new(vec![members.len(), c], out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Reducer {
    Mean,
    Max,
}

/// Reduces 24 per-joint values to one value per part.
pub fn pool_joint_errors(values: &[f64], level: Level, table: &PartitionTable, reducer: Reducer) -> Result<Vec<f64>> {
    if values.len() != NUM_JOINTS {
        return Err(Error::shape("pool_joint_errors", &[NUM_JOINTS], &[values.len()]));
    }
    Ok(table
        .members(level)
        .iter()
        .map(|m| {
            let it = m.iter().map(|&j| values[j]);
            match reducer {
                Reducer::Mean => it.sum::<f64>() / m.len() as f64,
                Reducer::Max => it.fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect())
}
