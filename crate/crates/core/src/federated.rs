//! Round-based federated training of a shared prompt.
//!
//! Generalized FedAvg treats the negated mean client delta as a
//! pseudo-gradient for a server optimizer; FedSGD sends one gradient per
//! client instead; the centralized baseline trains on the pooled data.
//! Client work inside a round runs in parallel, but deltas are always
//! reduced in ascending client-id order so results do not depend on the
//! schedule.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Example, FrozenBackbone, Instance, Prompt};
use crate::data::ClientDataset;
use crate::error::{Error, Result};
use crate::eval::{score_set, Metric};
use crate::numerics::{sample_without_replacement, shuffle, Matrix, SeededRng};
use crate::optim::{AdamConfig, OptimizerConfig, OptimizerState, SgdConfig};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    FedavgAdam,
    FedavgSgd,
    Fedsgd,
    FedsgdLb,
    Centralized,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Self::FedavgAdam => "fedavg_adam",
            Self::FedavgSgd => "fedavg_sgd",
            Self::Fedsgd => "fedsgd",
            Self::FedsgdLb => "fedsgd_lb",
            Self::Centralized => "centralized",
        }
    }

    pub fn is_fedavg(&self) -> bool {
        matches!(self, Self::FedavgAdam | Self::FedavgSgd)
    }

    pub fn is_fedsgd(&self) -> bool {
        matches!(self, Self::Fedsgd | Self::FedsgdLb)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedConfig {
    pub algorithm: Algorithm,
    pub rounds: usize,
    pub clients_per_round: usize,
    /// Optimizer steps per client per round (FedAvg only).
    pub local_steps: usize,
    pub client_batch: usize,
    pub server_opt: OptimizerConfig,
    pub client_opt: OptimizerConfig,
    pub eval_every: usize,
    /// Batch size of the centralized baseline.
    pub centralized_batch: usize,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::FedavgAdam,
            rounds: 100,
            clients_per_round: 8,
            local_steps: 4,
            client_batch: 8,
            server_opt: OptimizerConfig::Adam(AdamConfig::with_lr(0.1)),
            client_opt: OptimizerConfig::Adam(AdamConfig::with_lr(0.1)),
            eval_every: 10,
            centralized_batch: 64,
        }
    }
}

impl FedConfig {
    /// Round and batch budget of the full-size experiments.
    pub fn full_scale(algorithm: Algorithm) -> Self {
        let base = Self {
            algorithm,
            rounds: 300,
            clients_per_round: 32,
            local_steps: 16,
            client_batch: 32,
            centralized_batch: 1024,
            ..Self::default()
        };
        match algorithm {
            Algorithm::FedavgAdam => base,
            Algorithm::FedavgSgd => Self {
                client_opt: OptimizerConfig::Sgd(SgdConfig { lr: 10.0 }),
                ..base
            },
            Algorithm::Fedsgd => Self { rounds: 4800, local_steps: 1, ..base },
            Algorithm::FedsgdLb => Self { local_steps: 1, client_batch: 512, ..base },
            Algorithm::Centralized => Self { rounds: 4800, ..base },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        self.server_opt.validate()?;
        self.client_opt.validate()?;
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1".into());
        }
        match self.algorithm {
            Algorithm::Centralized => {
                if self.centralized_batch == 0 {
                    return bad("centralized batch must be at least 1".into());
                }
                return Ok(());
            }
            Algorithm::FedavgAdam if !matches!(self.client_opt, OptimizerConfig::Adam(_)) => {
                return bad("fedavg_adam needs an adam client optimizer".into())
            }
            Algorithm::FedavgSgd if !matches!(self.client_opt, OptimizerConfig::Sgd(_)) => {
                return bad("fedavg_sgd needs an sgd client optimizer".into())
            }
            a if a.is_fedavg() && self.local_steps == 0 => {
                return bad("fedavg needs at least one local step".into())
            }
            a if a.is_fedsgd() && self.local_steps != 1 => {
                return bad(format!("fedsgd takes exactly one local step, got {}", self.local_steps))
            }
            _ => {}
        }
        if self.clients_per_round == 0 {
            return bad("clients_per_round must be at least 1".into());
        }
        if self.client_batch == 0 {
            return bad("client batch must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    /// 1-based round index.
    pub round: usize,
    pub prompt_norm: f64,
    pub mean_client_grad_norm: f64,
    pub delta_norm: f64,
    pub val_score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainResult<S> {
    pub final_prompt: Prompt<S>,
    pub best_prompt: Prompt<S>,
    pub best_val_score: f64,
    /// Round at which the best prompt was recorded; 0 is the initial prompt.
    pub best_round: usize,
    /// Validation score of the initial prompt.
    pub init_val_score: f64,
    pub reports: Vec<RoundReport>,
}

/// Epoch-style minibatches: a shuffled pass over the indices, reshuffled
/// whenever fewer than a full batch remain.
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
    rng: SeededRng,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, rng: SeededRng) -> Self {
        let mut s = Self {
            order: (0..n).collect(),
            cursor: 0,
            batch: batch.min(n).max(1),
            rng,
        };
        shuffle(&mut s.rng, &mut s.order);
        s
    }

    pub fn next_batch(&mut self) -> &[usize] {
        if self.cursor + self.batch > self.order.len() {
            shuffle(&mut self.rng, &mut self.order);
            self.cursor = 0;
        }
        let start = self.cursor;
        self.cursor += self.batch;
        &self.order[start..self.cursor]
    }
}

pub fn examples<'a>(instances: &'a [Instance], idx: &[usize]) -> Vec<Example<'a>> {
    idx.iter().map(|&i| instances[i].example()).collect()
}

/// Local-training recipe for one client round.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalTraining {
    pub optimizer: OptimizerConfig,
    pub steps: usize,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate<S> {
    pub client_id: u32,
    /// `P_local_end − P_global`
    pub delta: Matrix<S>,
    /// Mean Frobenius norm of the local gradients (0 with no steps).
    pub mean_grad_norm: f64,
}

pub fn client_update<S: Scalar>(
    b: &FrozenBackbone<S>,
    p_global: &Prompt<S>,
    client: &ClientDataset,
    local: &LocalTraining,
    rng: SeededRng,
) -> Result<ClientUpdate<S>> {
    client_update_in(b, p_global, client, local, rng, &mut None)
}

/// [`client_update`] using `scratch` as the optimizer-state buffer. The
/// buffer is overwritten with a fresh state before the first step, so
/// whatever it held before has no influence on the result.
pub fn client_update_in<S: Scalar>(
    b: &FrozenBackbone<S>,
    p_global: &Prompt<S>,
    client: &ClientDataset,
    local: &LocalTraining,
    rng: SeededRng,
    scratch: &mut Option<OptimizerState<S>>,
) -> Result<ClientUpdate<S>> {
    if client.train.is_empty() {
        return Err(Error::Empty("client training set"));
    }
    let opt = scratch.insert(local.optimizer.fresh(p_global.shape())?);
    let mut p = p_global.clone();
    let mut sampler = BatchSampler::new(client.train.len(), local.batch_size, rng);
    let mut norm_sum = 0.0;
    for _ in 0..local.steps {
        let batch = examples(&client.train, sampler.next_batch());
        let g = b.grad_prompt(&p, &batch)?;
        norm_sum += g.frobenius_norm().to_f64_lossy();
        opt.step(p.matrix_mut(), &g)?;
    }
    if !p.matrix().is_finite() {
        return Err(Error::NonFinite("client prompt"));
    }
    Ok(ClientUpdate {
        client_id: client.client_id,
        delta: p.matrix().sub(p_global.matrix())?,
        mean_grad_norm: if local.steps == 0 { 0.0 } else { norm_sum / local.steps as f64 },
    })
}

/// One client's gradient of the global prompt on a single batch.
pub fn client_gradient<S: Scalar>(
    b: &FrozenBackbone<S>,
    p_global: &Prompt<S>,
    client: &ClientDataset,
    batch_size: usize,
    rng: SeededRng,
) -> Result<Matrix<S>> {
    if client.train.is_empty() {
        return Err(Error::Empty("client training set"));
    }
    let mut sampler = BatchSampler::new(client.train.len(), batch_size, rng);
    let batch = examples(&client.train, sampler.next_batch());
    b.grad_prompt(p_global, &batch)
}

// Sums matrices in the given order; callers pass them sorted by client id.
fn ordered_mean<S: Scalar>(items: &[Matrix<S>]) -> Result<Matrix<S>> {
    let first = items.first().ok_or(Error::Empty("client list"))?;
    let mut acc = Matrix::zeros(first.rows(), first.cols());
    for m in items {
        acc.axpy(S::one(), m)?;
    }
    Ok(acc.scale(S::one() / S::of(items.len() as f64)))
}

fn apply_server_step<S: Scalar>(
    server: &mut OptimizerState<S>,
    p: &mut Prompt<S>,
    pseudo_grad: &Matrix<S>,
    round: usize,
    mean_client_grad_norm: f64,
) -> Result<RoundReport> {
    let before = p.matrix().clone();
    server.step(p.matrix_mut(), pseudo_grad)?;
    if !p.matrix().is_finite() {
        return Err(Error::NonFinite("global prompt"));
    }
    Ok(RoundReport {
        round,
        prompt_norm: p.matrix().frobenius_norm().to_f64_lossy(),
        mean_client_grad_norm,
        delta_norm: p.matrix().sub(&before)?.frobenius_norm().to_f64_lossy(),
        val_score: None,
    })
}

fn batching_stream(root: &SeededRng, round: usize, client_id: u32) -> SeededRng {
    root.substream("batching")
        .substream_indexed("round", round as u64)
        .substream_indexed("client", u64::from(client_id))
}

fn sorted_by_id<'c>(clients: &[&'c ClientDataset]) -> Vec<&'c ClientDataset> {
    let mut sorted = clients.to_vec();
    sorted.sort_by_key(|c| c.client_id);
    sorted
}

/// Generalized FedAvg round: server step on `−mean(delta)`.
pub fn fedavg_round<S: Scalar>(
    b: &FrozenBackbone<S>,
    server: &mut OptimizerState<S>,
    p: &mut Prompt<S>,
    sampled: &[&ClientDataset],
    local: &LocalTraining,
    round: usize,
    rng: &SeededRng,
) -> Result<RoundReport> {
    let sampled = sorted_by_id(sampled);
    let updates: Vec<ClientUpdate<S>> = sampled
        .par_iter()
        .map(|c| client_update(b, p, c, local, batching_stream(rng, round, c.client_id)))
        .collect::<Result<_>>()?;
    aggregate_fedavg(server, p, &updates, round)
}

fn aggregate_fedavg<S: Scalar>(
    server: &mut OptimizerState<S>,
    p: &mut Prompt<S>,
    updates: &[ClientUpdate<S>],
    round: usize,
) -> Result<RoundReport> {
    debug_assert!(updates.windows(2).all(|w| w[0].client_id < w[1].client_id));
    let deltas: Vec<Matrix<S>> = updates.iter().map(|u| u.delta.clone()).collect();
    let pseudo_grad = ordered_mean(&deltas)?.scale(-S::one());
    let grad_norm = updates.iter().map(|u| u.mean_grad_norm).sum::<f64>() / updates.len() as f64;
    apply_server_step(server, p, &pseudo_grad, round, grad_norm)
}

/// FedSGD round: each client returns one gradient of the global prompt on a
/// batch of `batch_size` instances; the server steps on their mean.
pub fn fedsgd_round<S: Scalar>(
    b: &FrozenBackbone<S>,
    server: &mut OptimizerState<S>,
    p: &mut Prompt<S>,
    sampled: &[&ClientDataset],
    batch_size: usize,
    round: usize,
    rng: &SeededRng,
) -> Result<RoundReport> {
    let sampled = sorted_by_id(sampled);
    let grads: Vec<Matrix<S>> = sampled
        .par_iter()
        .map(|c| client_gradient(b, p, c, batch_size, batching_stream(rng, round, c.client_id)))
        .collect::<Result<_>>()?;
    let grad_norm = grads
        .iter()
        .map(|g| g.frobenius_norm().to_f64_lossy())
        .sum::<f64>()
        / grads.len() as f64;
    let mean = ordered_mean(&grads)?;
    apply_server_step(server, p, &mean, round, grad_norm)
}

/// Steppable training loop holding the global prompt and server state.
pub struct Trainer<'a, S> {
    backbone: &'a FrozenBackbone<S>,
    clients: &'a [ClientDataset],
    cfg: FedConfig,
    rng: SeededRng,
    server: OptimizerState<S>,
    prompt: Prompt<S>,
    round: usize,
    // One optimizer-state buffer per training client, reused across rounds
    // like device memory; reset at the start of every client round.
    scratch: Vec<Option<OptimizerState<S>>>,
    pooled: Vec<Instance>,
    central_sampler: Option<BatchSampler>,
}

impl<'a, S: Scalar> Trainer<'a, S> {
    pub fn new(
        backbone: &'a FrozenBackbone<S>,
        clients: &'a [ClientDataset],
        init: Prompt<S>,
        cfg: FedConfig,
        rng: &SeededRng,
    ) -> Result<Self> {
        cfg.validate()?;
        init.matrix().ensure_shape(backbone.dims().prompt_shape())?;
        if clients.iter().any(|c| c.train.is_empty()) {
            return Err(Error::Empty("client training set"));
        }
        let (pooled, central_sampler) = if cfg.algorithm == Algorithm::Centralized {
            let pooled: Vec<Instance> = clients.iter().flat_map(|c| c.train.iter().cloned()).collect();
            if pooled.is_empty() {
                return Err(Error::Empty("pooled training set"));
            }
            let sampler = BatchSampler::new(pooled.len(), cfg.centralized_batch, rng.substream("batching"));
            (pooled, Some(sampler))
        } else {
            if clients.len() < cfg.clients_per_round {
                return Err(Error::Config(format!(
                    "{} clients per round requested but only {} training clients",
                    cfg.clients_per_round,
                    clients.len()
                )));
            }
            (Vec::new(), None)
        };
        Ok(Self {
            backbone,
            clients,
            server: cfg.server_opt.fresh(init.shape())?,
            prompt: init,
            round: 0,
            scratch: vec![None; clients.len()],
            rng: rng.clone(),
            cfg,
            pooled,
            central_sampler,
        })
    }

    pub fn prompt(&self) -> &Prompt<S> {
        &self.prompt
    }

    pub fn rounds_done(&self) -> usize {
        self.round
    }

    pub fn server_state(&self) -> &OptimizerState<S> {
        &self.server
    }

    pub fn server_state_mut(&mut self) -> &mut OptimizerState<S> {
        &mut self.server
    }

    /// The optimizer buffer of training client `index`, for fault injection.
    pub fn client_scratch_mut(&mut self, index: usize) -> &mut Option<OptimizerState<S>> {
        &mut self.scratch[index]
    }

    /// Training-client indices participating in `round` (1-based), ascending.
    pub fn sampled_indices(&self, round: usize) -> Result<Vec<usize>> {
        let mut rng = self.rng.substream("sampling").substream_indexed("round", round as u64);
        let mut idx = sample_without_replacement(&mut rng, self.clients.len(), self.cfg.clients_per_round)?;
        idx.sort_by_key(|&i| self.clients[i].client_id);
        Ok(idx)
    }

    /// Runs the next round; validation is left to the caller.
    pub fn step(&mut self) -> Result<RoundReport> {
        let round = self.round + 1;
        let report = match self.cfg.algorithm {
            Algorithm::Centralized => self.centralized_step(round)?,
            a if a.is_fedsgd() => {
                let sampled: Vec<&ClientDataset> =
                    self.sampled_indices(round)?.into_iter().map(|i| &self.clients[i]).collect();
                fedsgd_round(
                    self.backbone,
                    &mut self.server,
                    &mut self.prompt,
                    &sampled,
                    self.cfg.client_batch,
                    round,
                    &self.rng,
                )?
            }
            _ => self.fedavg_step(round)?,
        };
        self.round = round;
        Ok(report)
    }

    fn fedavg_step(&mut self, round: usize) -> Result<RoundReport> {
        let selected = self.sampled_indices(round)?;
        let mut mask = vec![false; self.clients.len()];
        for &i in &selected {
            mask[i] = true;
        }
        let local = LocalTraining {
            optimizer: self.cfg.client_opt,
            steps: self.cfg.local_steps,
            batch_size: self.cfg.client_batch,
        };
        let (b, p, rng, clients) = (self.backbone, &self.prompt, &self.rng, self.clients);
        let mut updates: Vec<ClientUpdate<S>> = self
            .scratch
            .par_iter_mut()
            .enumerate()
            .filter(|(i, _)| mask[*i])
            .map(|(i, slot)| {
                let c = &clients[i];
                client_update_in(b, p, c, &local, batching_stream(rng, round, c.client_id), slot)
            })
            .collect::<Result<_>>()?;
        updates.sort_by_key(|u| u.client_id);
        aggregate_fedavg(&mut self.server, &mut self.prompt, &updates, round)
    }

    fn centralized_step(&mut self, round: usize) -> Result<RoundReport> {
        let sampler = self.central_sampler.as_mut().expect("centralized sampler");
        let batch = examples(&self.pooled, sampler.next_batch());
        let g = self.backbone.grad_prompt(&self.prompt, &batch)?;
        let norm = g.frobenius_norm().to_f64_lossy();
        apply_server_step(&mut self.server, &mut self.prompt, &g, round, norm)
    }

    pub fn into_prompt(self) -> Prompt<S> {
        self.prompt
    }
}

/// Full stage-one run: trains for `cfg.rounds` rounds, scoring the prompt on
/// `global_val` before training, every `eval_every` rounds, and after the
/// last round, and keeps the best-scoring prompt (earliest on ties).
pub fn train<S: Scalar>(
    b: &FrozenBackbone<S>,
    clients: &[ClientDataset],
    init: Prompt<S>,
    cfg: &FedConfig,
    global_val: &[Instance],
    metric: Metric,
    rng: &SeededRng,
) -> Result<TrainResult<S>> {
    if global_val.is_empty() {
        return Err(Error::Empty("global validation set"));
    }
    let mut trainer = Trainer::new(b, clients, init.clone(), *cfg, rng)?;
    let init_val_score = score_set(b, &init, global_val, metric)?;
    let (mut best_prompt, mut best_val_score, mut best_round) = (init, init_val_score, 0);
    let mut reports = Vec::with_capacity(cfg.rounds);
    for round in 1..=cfg.rounds {
        let mut report = trainer.step()?;
        if round % cfg.eval_every == 0 || round == cfg.rounds {
            let score = score_set(b, trainer.prompt(), global_val, metric)?;
            report.val_score = Some(score);
            if score > best_val_score {
                best_val_score = score;
                best_prompt = trainer.prompt().clone();
                best_round = round;
            }
        }
        log::debug!(
            "round {round}: |P| {:.4} |g| {:.4} |dP| {:.4} val {:?}",
            report.prompt_norm,
            report.mean_client_grad_norm,
            report.delta_norm,
            report.val_score
        );
        reports.push(report);
    }
    Ok(TrainResult {
        final_prompt: trainer.into_prompt(),
        best_prompt,
        best_val_score,
        best_round,
        init_val_score,
        reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::SgdConfig;

    #[test]
    fn sampler_covers_each_epoch_once() {
        let mut s = BatchSampler::new(10, 3, SeededRng::new(1));
        let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next_batch().to_vec()).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        // Only one index is left, so the next batch starts a fresh pass.
        assert_eq!(s.next_batch().len(), 3);
        assert_eq!(BatchSampler::new(2, 5, SeededRng::new(1)).next_batch().len(), 2);
    }

    #[test]
    fn config_validation() {
        assert!(FedConfig::default().validate().is_ok());
        let sgd = OptimizerConfig::Sgd(SgdConfig { lr: 1.0 });
        let bad = [
            FedConfig { client_opt: sgd, ..Default::default() },
            FedConfig { algorithm: Algorithm::FedavgSgd, ..Default::default() },
            FedConfig { algorithm: Algorithm::Fedsgd, local_steps: 2, ..Default::default() },
            FedConfig { local_steps: 0, ..Default::default() },
            FedConfig { clients_per_round: 0, ..Default::default() },
            FedConfig { eval_every: 0, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
        for a in [Algorithm::FedavgAdam, Algorithm::FedavgSgd, Algorithm::Fedsgd, Algorithm::FedsgdLb, Algorithm::Centralized] {
            assert!(FedConfig::full_scale(a).validate().is_ok(), "{a:?}");
        }
    }

    #[test]
    fn zero_local_steps_leave_the_prompt() {
        use crate::backbone::{BackboneDims, Instance};
        let dims = BackboneDims { e: 3, v: 5, h: 3, t_max: 2, l_max: 2, k: 2 };
        let b = FrozenBackbone::<f64>::init(&mut SeededRng::new(0), dims).unwrap();
        let inst = Instance { input: vec![1, 2], targets: vec![vec![3, 0]], task_id: 0, task_type_id: 0 };
        let client = ClientDataset { client_id: 4, train: vec![inst], eval: vec![] };
        let p = Prompt::new(Matrix::from_fn(3, 2, |i, j| (i + j) as f64)).unwrap();
        let local = LocalTraining { optimizer: OptimizerConfig::Adam(Default::default()), steps: 0, batch_size: 1 };
        let u = client_update(&b, &p, &client, &local, SeededRng::new(1)).unwrap();
        assert_eq!(u.delta, Matrix::zeros(3, 2));
        assert_eq!((u.client_id, u.mean_grad_norm), (4, 0.0));
        let empty = ClientDataset { train: vec![], ..client };
        assert!(client_update(&b, &p, &empty, &local, SeededRng::new(1)).is_err());
    }
}
