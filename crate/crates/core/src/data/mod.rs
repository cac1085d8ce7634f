//! Federated datasets built from a synthetic task hierarchy
//! (task type → task → instance).

mod partition;
mod stats;
mod universe;

pub use partition::{partition, ClientDataset, Heterogeneity, Partition};
pub use stats::{
    category_counts, dataset_stats, kl_divergence, kl_heterogeneity, Category, Counts, KlReport,
    MeanStd, StatsReport,
};
pub use universe::{generate_instances, generate_universe, TaskUniverse, UniverseConfig};

use serde::{Deserialize, Serialize};

use crate::backbone::{FrozenBackbone, Instance};
use crate::error::{Error, Result};
use crate::numerics::{sample_without_replacement, shuffle, SeededRng};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub universe: UniverseConfig,
    pub per_task: usize,
    pub input_len: usize,
    pub heterogeneity: Heterogeneity,
    pub chunk_size: usize,
    pub train_fraction: f64,
    /// Task types held out for validation clients.
    pub val_types: usize,
    /// Task types held out for test clients.
    pub test_types: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            universe: UniverseConfig::default(),
            per_task: 48,
            input_len: 6,
            heterogeneity: Heterogeneity::High,
            chunk_size: 48,
            train_fraction: 2.0 / 3.0,
            val_types: 1,
            test_types: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FederatedDataset {
    pub train_clients: Vec<ClientDataset>,
    pub val_clients: Vec<ClientDataset>,
    pub test_clients: Vec<ClientDataset>,
    pub heterogeneity: Heterogeneity,
    pub universe_seed: u64,
}

/// Which federated dataset a client belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FederatedDataset {
    pub fn split(&self, split: Split) -> &[ClientDataset] {
        match split {
            Split::Train => &self.train_clients,
            Split::Val => &self.val_clients,
            Split::Test => &self.test_clients,
        }
    }

    pub fn split_mut(&mut self, split: Split) -> &mut Vec<ClientDataset> {
        match split {
            Split::Train => &mut self.train_clients,
            Split::Val => &mut self.val_clients,
            Split::Test => &mut self.test_clients,
        }
    }

    pub fn all_clients(&self) -> impl Iterator<Item = (Split, &ClientDataset)> {
        [Split::Train, Split::Val, Split::Test]
            .into_iter()
            .flat_map(move |s| self.split(s).iter().map(move |c| (s, c)))
    }
}

/// Dataset plus the bookkeeping produced while building it.
#[derive(Clone, Debug, PartialEq)]
pub struct BuiltDataset {
    pub dataset: FederatedDataset,
    pub train_types: Vec<u32>,
    pub val_types: Vec<u32>,
    pub test_types: Vec<u32>,
    pub dropped: [usize; 3],
}

/// Generates every split from the universe: validation and test clients
/// come from disjoint, randomly chosen held-out task types; training clients
/// from the remaining types.
pub fn build_federated<S: Scalar>(
    rng: &SeededRng,
    universe: &TaskUniverse<S>,
    b: &FrozenBackbone<S>,
    cfg: &DatasetConfig,
) -> Result<BuiltDataset> {
    let n_types = universe.config().num_types;
    if cfg.val_types + cfg.test_types >= n_types {
        return Err(Error::Config(format!(
            "{} validation + {} test types leave no training types out of {n_types}",
            cfg.val_types, cfg.test_types
        )));
    }
    if cfg.val_types == 0 || cfg.test_types == 0 {
        return Err(Error::Config("validation and test need at least one task type each".into()));
    }
    let mut types: Vec<u32> = (0..n_types as u32).collect();
    shuffle(&mut rng.substream("type_split"), &mut types);
    let mut val_types = types[..cfg.val_types].to_vec();
    let mut test_types = types[cfg.val_types..cfg.val_types + cfg.test_types].to_vec();
    let mut train_types = types[cfg.val_types + cfg.test_types..].to_vec();
    for t in [&mut val_types, &mut test_types, &mut train_types] {
        t.sort_unstable();
    }

    let mut dataset = FederatedDataset {
        train_clients: vec![],
        val_clients: vec![],
        test_clients: vec![],
        heterogeneity: cfg.heterogeneity,
        universe_seed: rng.seed(),
    };
    let mut dropped = [0; 3];
    let mut next_id = 0u32;
    let groups = [(Split::Train, &train_types), (Split::Val, &val_types), (Split::Test, &test_types)];
    for (i, (split, group)) in groups.into_iter().enumerate() {
        let mut instances = Vec::new();
        for &g in group.iter() {
            let mut sub = rng.substream_indexed("instances", u64::from(g));
            instances.extend(universe.instances_for_type(&mut sub, b, g, cfg.per_task, cfg.input_len)?);
        }
        let mut part_rng = rng.substream_indexed("partition", i as u64);
        let part = partition(
            instances,
            cfg.heterogeneity,
            cfg.chunk_size,
            cfg.train_fraction,
            next_id,
            &mut part_rng,
        )?;
        next_id += part.clients.len() as u32;
        dropped[i] = part.dropped;
        *dataset.split_mut(split) = part.clients;
    }
    Ok(BuiltDataset {
        dataset,
        train_types,
        val_types,
        test_types,
        dropped,
    })
}

/// Uniform sample of `size` instances from the union of the clients' eval
/// sets, returned in union order.
pub fn build_global_eval(clients: &[ClientDataset], size: usize, rng: &mut SeededRng) -> Result<Vec<Instance>> {
    let pool: Vec<&Instance> = clients.iter().flat_map(|c| &c.eval).collect();
    if pool.len() < size {
        return Err(Error::Insufficient {
            needed: size,
            available: pool.len(),
        });
    }
    let mut picked = sample_without_replacement(rng, pool.len(), size)?;
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| pool[i].clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneDims;

    fn setup() -> (FrozenBackbone<f64>, TaskUniverse<f64>, DatasetConfig) {
        let dims = BackboneDims { e: 8, v: 24, h: 8, t_max: 4, l_max: 6, k: 3 };
        let b = FrozenBackbone::init(&mut SeededRng::new(1), dims).unwrap();
        let cfg = DatasetConfig {
            universe: UniverseConfig { num_types: 5, tasks_per_type: 3, t_gen: 2, ..Default::default() },
            per_task: 8,
            input_len: 4,
            chunk_size: 6,
            ..Default::default()
        };
        let u = generate_universe(&mut SeededRng::new(2), cfg.universe, 8).unwrap();
        (b, u, cfg)
    }

    #[test]
    fn splits_use_disjoint_types() {
        let (b, u, cfg) = setup();
        let built = build_federated(&SeededRng::new(3), &u, &b, &cfg).unwrap();
        assert_eq!(built.train_types.len(), 3);
        let types_in = |cs: &[ClientDataset]| {
            cs.iter()
                .flat_map(|c| c.instances().map(|x| x.task_type_id))
                .collect::<std::collections::BTreeSet<_>>()
        };
        let d = &built.dataset;
        assert_eq!(types_in(&d.train_clients).into_iter().collect::<Vec<_>>(), built.train_types);
        assert_eq!(types_in(&d.val_clients).into_iter().collect::<Vec<_>>(), built.val_types);
        assert_eq!(types_in(&d.test_clients).into_iter().collect::<Vec<_>>(), built.test_types);
        // 24 instances per type, chunk 6 → 4 clients per type.
        assert_eq!(d.train_clients.len(), 12);
        assert_eq!(d.val_clients.len(), 4);
        let ids: Vec<u32> = d.all_clients().map(|(_, c)| c.client_id).collect();
        assert_eq!(ids, (0..20).collect::<Vec<_>>());
        for (_, c) in d.all_clients() {
            assert_eq!((c.train.len(), c.eval.len()), (4, 2));
            for x in c.instances() {
                assert_eq!(u.task_type_of(x.task_id), x.task_type_id);
            }
        }
    }

    #[test]
    fn build_is_deterministic() {
        let (b, u, cfg) = setup();
        let a = build_federated(&SeededRng::new(3), &u, &b, &cfg).unwrap();
        assert_eq!(a, build_federated(&SeededRng::new(3), &u, &b, &cfg).unwrap());
    }

    #[test]
    fn too_many_held_out_types() {
        let (b, u, mut cfg) = setup();
        cfg.val_types = 2;
        cfg.test_types = 3;
        assert!(build_federated(&SeededRng::new(3), &u, &b, &cfg).is_err());
    }

    #[test]
    fn global_eval_sampling() {
        let (b, u, cfg) = setup();
        let d = build_federated(&SeededRng::new(3), &u, &b, &cfg).unwrap().dataset;
        let union: Vec<Instance> = d.test_clients.iter().flat_map(|c| c.eval.clone()).collect();
        let full = build_global_eval(&d.test_clients, union.len(), &mut SeededRng::new(4)).unwrap();
        assert_eq!(full, union);
        let a = build_global_eval(&d.test_clients, 5, &mut SeededRng::new(4)).unwrap();
        let again = build_global_eval(&d.test_clients, 5, &mut SeededRng::new(4)).unwrap();
        assert_eq!(a, again);
        assert!(a.iter().all(|x| union.contains(x)));
        assert!(matches!(
            build_global_eval(&d.test_clients, union.len() + 1, &mut SeededRng::new(4)),
            Err(Error::Insufficient { .. })
        ));
    }
}
