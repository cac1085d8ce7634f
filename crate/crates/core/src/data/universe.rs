//! Synthetic task universe: task types with centroids, tasks scattered
//! around them, and a fixed generative rule mapping inputs to targets.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{argmax, FrozenBackbone, Instance, TokenId, EOS};
use crate::error::{Error, Result};
use crate::numerics::{dot, gaussian_matrix, gaussian_vec, Matrix, SeededRng};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UniverseConfig {
    pub num_types: usize,
    pub tasks_per_type: usize,
    /// Target length before the trailing EOS.
    pub t_gen: usize,
    pub sigma_between: f64,
    pub sigma_within: f64,
    /// Scale of the input-dependent term in the generative rule.
    pub input_gain: f64,
    /// Scale of the per-position offsets.
    pub position_scale: f64,
}

impl Default for UniverseConfig {
    fn default() -> Self {
        Self {
            num_types: 8,
            tasks_per_type: 8,
            t_gen: 3,
            sigma_between: 1.5,
            sigma_within: 0.5,
            input_gain: 1.0,
            position_scale: 1.0,
        }
    }
}

impl UniverseConfig {
    pub fn num_tasks(&self) -> usize {
        self.num_types * self.tasks_per_type
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskUniverse<S> {
    config: UniverseConfig,
    type_centroids: Vec<Vec<S>>,
    // Indexed by global task id `type * tasks_per_type + local`.
    task_vectors: Vec<Vec<S>>,
    gen_matrix: Matrix<S>,
    gen_offsets: Matrix<S>,
}

pub fn generate_universe<S: Scalar>(
    rng: &mut SeededRng,
    config: UniverseConfig,
    e: usize,
) -> Result<TaskUniverse<S>> {
    if config.num_types == 0 || config.tasks_per_type == 0 {
        return Err(Error::Config("universe needs at least one type and one task per type".into()));
    }
    if config.t_gen == 0 || e == 0 {
        return Err(Error::Config("target length and embedding dim must be at least 1".into()));
    }
    if !(config.sigma_between >= 0.0 && config.sigma_within >= 0.0) {
        return Err(Error::Config("universe spreads must be nonnegative".into()));
    }
    if config.sigma_within > config.sigma_between {
        log::warn!(
            "sigma_within {} exceeds sigma_between {}; task types will blur together",
            config.sigma_within,
            config.sigma_between
        );
    }
    let type_centroids: Vec<Vec<S>> = (0..config.num_types)
        .map(|_| gaussian_vec(rng, e, config.sigma_between))
        .collect();
    let task_vectors = type_centroids
        .iter()
        .flat_map(|mu| {
            (0..config.tasks_per_type)
                .map(|_| {
                    let noise: Vec<S> = gaussian_vec(rng, e, config.sigma_within);
                    mu.iter().zip(noise).map(|(&m, n)| m + n).collect()
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let gen_matrix = gaussian_matrix(rng, e, e, config.input_gain / (e as f64).sqrt());
    let gen_offsets = gaussian_matrix(rng, e, config.t_gen, config.position_scale);
    Ok(TaskUniverse {
        config,
        type_centroids,
        task_vectors,
        gen_matrix,
        gen_offsets,
    })
}

impl<S: Scalar> TaskUniverse<S> {
    pub fn config(&self) -> &UniverseConfig {
        &self.config
    }

    pub fn embedding_dim(&self) -> usize {
        self.gen_matrix.rows()
    }

    pub fn type_centroids(&self) -> &[Vec<S>] {
        &self.type_centroids
    }

    pub fn task_vectors(&self) -> &[Vec<S>] {
        &self.task_vectors
    }

    pub fn task_vector(&self, task_id: u32) -> &[S] {
        &self.task_vectors[task_id as usize]
    }

    pub fn task_type_of(&self, task_id: u32) -> u32 {
        task_id / self.config.tasks_per_type as u32
    }

    pub fn tasks_of_type(&self, task_type: u32) -> std::ops::Range<u32> {
        let n = self.config.tasks_per_type as u32;
        task_type * n..(task_type + 1) * n
    }

    fn check_wiring(&self, b: &FrozenBackbone<S>, input_len: usize) -> Result<()> {
        let dims = b.dims();
        if dims.e != self.embedding_dim() {
            return Err(Error::Config(format!(
                "universe embedding dim {} does not match backbone {}",
                self.embedding_dim(),
                dims.e
            )));
        }
        if self.config.t_gen >= dims.t_max {
            return Err(Error::Config(format!(
                "target length {} plus EOS does not fit in {} output positions",
                self.config.t_gen, dims.t_max
            )));
        }
        if input_len == 0 || input_len > dims.l_max {
            return Err(Error::Config(format!(
                "input length {input_len} must lie in 1..={}",
                dims.l_max
            )));
        }
        Ok(())
    }

    /// Target (with trailing EOS) that task `task_id` assigns to `input`.
    pub fn target_for(&self, b: &FrozenBackbone<S>, task_id: u32, input: &[TokenId]) -> Vec<TokenId> {
        let emb = &b.params().embeddings;
        let e = self.embedding_dim();
        let inv_len = S::of(1.0 / input.len() as f64);
        let pooled: Vec<S> = (0..e)
            .map(|r| input.iter().fold(S::zero(), |acc, &t| acc + emb.get(r, t as usize)) * inv_len)
            .collect();
        let shifted = self.gen_matrix.matvec(&pooled);
        let task = self.task_vector(task_id);
        let mut target: Vec<TokenId> = (0..self.config.t_gen)
            .map(|s| {
                let query: Vec<S> = (0..e)
                    .map(|r| (shifted[r] + task[r] + self.gen_offsets.get(r, s)).tanh())
                    .collect();
                // EOS only ever terminates, so it is excluded from the argmax.
                let scores: Vec<S> = (1..b.dims().v).map(|c| dot(&emb.col(c), &query)).collect();
                (argmax(&scores) + 1) as TokenId
            })
            .collect();
        target.push(EOS);
        target
    }

    /// `per_task` instances for every task of one type.
    pub fn instances_for_type(
        &self,
        rng: &mut SeededRng,
        b: &FrozenBackbone<S>,
        task_type: u32,
        per_task: usize,
        input_len: usize,
    ) -> Result<Vec<Instance>> {
        self.check_wiring(b, input_len)?;
        if task_type as usize >= self.config.num_types {
            return Err(Error::Config(format!("no task type {task_type}")));
        }
        let v = b.dims().v as TokenId;
        let mut out = Vec::with_capacity(per_task * self.config.tasks_per_type);
        for task_id in self.tasks_of_type(task_type) {
            for _ in 0..per_task {
                let input: Vec<TokenId> = (0..input_len).map(|_| rng.random_range(1..v)).collect();
                let target = self.target_for(b, task_id, &input);
                out.push(Instance {
                    input,
                    targets: vec![target],
                    task_id,
                    task_type_id: task_type,
                });
            }
        }
        Ok(out)
    }
}

/// Every task's instances, ordered by task type then task. Each type draws
/// from its own substream so subsets of types can be regenerated alone.
pub fn generate_instances<S: Scalar>(
    rng: &SeededRng,
    u: &TaskUniverse<S>,
    b: &FrozenBackbone<S>,
    per_task: usize,
    input_len: usize,
) -> Result<Vec<Instance>> {
    let mut all = Vec::new();
    for g in 0..u.config().num_types as u32 {
        let mut sub = rng.substream_indexed("instances", u64::from(g));
        all.extend(u.instances_for_type(&mut sub, b, g, per_task, input_len)?);
    }
    Ok(all)
}
