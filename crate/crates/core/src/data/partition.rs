use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::Instance;
use crate::error::{Error, Result};
use crate::numerics::{shuffle, SeededRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Heterogeneity {
    /// Adjacent chunks of each type's instances ordered by task.
    High,
    /// Chunks of each type's instances after shuffling within the type.
    Medium,
    /// Chunks of the whole dataset after one global shuffle.
    Low,
}

impl Heterogeneity {
    pub fn name(&self) -> &'static str {
        match self {
            Self::High => "high",
            Self::Medium => "medium",
            Self::Low => "low",
        }
    }
}

impl std::str::FromStr for Heterogeneity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "high" => Ok(Self::High),
            "medium" => Ok(Self::Medium),
            "low" => Ok(Self::Low),
            other => Err(Error::Config(format!("unknown heterogeneity {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub client_id: u32,
    pub train: Vec<Instance>,
    pub eval: Vec<Instance>,
}

impl ClientDataset {
    pub fn instances(&self) -> impl Iterator<Item = &Instance> {
        self.train.iter().chain(&self.eval)
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.eval.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub clients: Vec<ClientDataset>,
    /// Instances left over after the last full chunk (per type, or globally
    /// in low mode).
    pub dropped: usize,
}

/// Cuts `instances` into clients of `chunk_size` following `mode`, then
/// splits each client into train/eval with `train_fraction` of it (rounded,
/// at least one instance) used for training. Client ids start at `first_id`.
pub fn partition(
    instances: Vec<Instance>,
    mode: Heterogeneity,
    chunk_size: usize,
    train_fraction: f64,
    first_id: u32,
    rng: &mut SeededRng,
) -> Result<Partition> {
    if chunk_size == 0 {
        return Err(Error::Config("chunk size must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::Config(format!("train fraction {train_fraction} outside [0, 1]")));
    }
    if instances.len() < chunk_size {
        return Err(Error::Insufficient {
            needed: chunk_size,
            available: instances.len(),
        });
    }

    let mut chunks: Vec<Vec<Instance>> = Vec::new();
    let mut dropped = 0;
    match mode {
        Heterogeneity::High | Heterogeneity::Medium => {
            let mut by_type: BTreeMap<u32, Vec<Instance>> = BTreeMap::new();
            for inst in instances {
                by_type.entry(inst.task_type_id).or_default().push(inst);
            }
            for (&task_type, group) in &by_type {
                if group.len() < chunk_size {
                    return Err(Error::ChunkTooLarge {
                        chunk_size,
                        count: group.len(),
                        task_type,
                    });
                }
            }
            for (_, mut group) in by_type {
                if mode == Heterogeneity::High {
                    group.sort_by_key(|inst| inst.task_id);
                } else {
                    shuffle(rng, &mut group);
                }
                dropped += cut(group, chunk_size, &mut chunks);
            }
        }
        Heterogeneity::Low => {
            let mut all = instances;
            shuffle(rng, &mut all);
            dropped += cut(all, chunk_size, &mut chunks);
        }
    }

    let clients = chunks
        .into_iter()
        .zip(first_id..)
        .map(|(mut chunk, client_id)| {
            shuffle(rng, &mut chunk);
            let n_train = ((chunk.len() as f64 * train_fraction).round() as usize).clamp(1, chunk.len());
            let eval = chunk.split_off(n_train);
            ClientDataset { client_id, train: chunk, eval }
        })
        .collect();
    Ok(Partition { clients, dropped })
}

fn cut(items: Vec<Instance>, chunk_size: usize, out: &mut Vec<Vec<Instance>>) -> usize {
    let full = items.len() / chunk_size * chunk_size;
    let dropped = items.len() - full;
    let mut it = items.into_iter().take(full).peekable();
    while it.peek().is_some() {
        out.push(it.by_ref().take(chunk_size).collect());
    }
    dropped
}
