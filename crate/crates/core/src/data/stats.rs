//! Per-client composition statistics and metadata divergence.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::partition::ClientDataset;
use crate::backbone::Instance;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub n_clients: usize,
    pub instances: MeanStd,
    pub tasks: MeanStd,
    pub task_types: MeanStd,
}

pub fn dataset_stats(clients: &[ClientDataset]) -> Result<StatsReport> {
    if clients.is_empty() {
        return Err(Error::Empty("client list"));
    }
    let per_client = |f: &dyn Fn(&ClientDataset) -> usize| {
        MeanStd::of(&clients.iter().map(|c| f(c) as f64).collect::<Vec<_>>())
    };
    Ok(StatsReport {
        n_clients: clients.len(),
        instances: per_client(&|c| c.len()),
        tasks: per_client(&|c| c.instances().map(|x| x.task_id).collect::<BTreeSet<_>>().len()),
        task_types: per_client(&|c| {
            c.instances().map(|x| x.task_type_id).collect::<BTreeSet<_>>().len()
        }),
    })
}

/// Categorical metadata attached to every instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Task,
    TaskType,
}

impl Category {
    pub fn of(&self, inst: &Instance) -> u64 {
        u64::from(match self {
            Category::Task => inst.task_id,
            Category::TaskType => inst.task_type_id,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Category::Task => "task",
            Category::TaskType => "task_type",
        }
    }
}

pub type Counts = BTreeMap<u64, usize>;

pub fn category_counts<'a>(
    instances: impl IntoIterator<Item = &'a Instance>,
    select: impl Fn(&Instance) -> u64,
) -> Counts {
    let mut counts = Counts::new();
    for inst in instances {
        *counts.entry(select(inst)).or_default() += 1;
    }
    counts
}

/// `KL(p ‖ q)` in nats between two count tables, each smoothed by adding
/// `eps` to every category in the union of their supports and renormalising.
pub fn kl_divergence(p: &Counts, q: &Counts, eps: f64) -> Result<f64> {
    if !(eps >= 0.0) {
        return Err(Error::Config("smoothing eps must be nonnegative".into()));
    }
    let support: BTreeSet<u64> = p.keys().chain(q.keys()).copied().collect();
    let k = support.len() as f64;
    let np = p.values().sum::<usize>() as f64 + eps * k;
    let nq = q.values().sum::<usize>() as f64 + eps * k;
    let mut kl = 0.0;
    for c in support {
        let pc = (p.get(&c).copied().unwrap_or(0) as f64 + eps) / np;
        let qc = (q.get(&c).copied().unwrap_or(0) as f64 + eps) / nq;
        if pc == 0.0 {
            continue;
        }
        if qc == 0.0 {
            return Err(Error::UnsmoothedKl(c));
        }
        kl += pc * (pc / qc).ln();
    }
    Ok(kl.max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlReport {
    /// `(client_id, KL)` in client order.
    pub per_client: Vec<(u32, f64)>,
    pub mean: f64,
}

/// Divergence of each client's category distribution from the pooled one.
pub fn kl_heterogeneity(
    clients: &[ClientDataset],
    select: impl Fn(&Instance) -> u64 + Copy,
    eps: f64,
) -> Result<KlReport> {
    if clients.is_empty() {
        return Err(Error::Empty("client list"));
    }
    if let Some(c) = clients.iter().find(|c| c.is_empty()) {
        return Err(Error::Config(format!("client {} has no instances", c.client_id)));
    }
    let global = category_counts(clients.iter().flat_map(ClientDataset::instances), select);
    let per_client = clients
        .iter()
        .map(|c| Ok((c.client_id, kl_divergence(&category_counts(c.instances(), select), &global, eps)?)))
        .collect::<Result<Vec<_>>>()?;
    let mean = per_client.iter().map(|(_, kl)| kl).sum::<f64>() / per_client.len() as f64;
    Ok(KlReport { per_client, mean })
}
