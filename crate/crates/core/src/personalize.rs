//! Stage two: each client fine-tunes the global prompt on its own data,
//! optionally anchored to the global prompt, with frozen prompt tokens, and
//! evaluated against interpolated and genie-selected prompts.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Example, FrozenBackbone, Instance, Prompt};
use crate::data::ClientDataset;
use crate::error::{Error, Result};
use crate::eval::{aggregate_curve, mean, score_each, score_set, Metric, TradeoffCurve, TrajectoryPoint};
use crate::federated::examples;
use crate::numerics::{shuffle, Matrix, SeededRng};
use crate::optim::{AdamConfig, OptimizerConfig};
use crate::scalar::Scalar;

/// Prompt token positions (columns) held fixed during personalization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Freeze {
    #[default]
    None,
    First { q: usize },
    Last { q: usize },
}

impl Freeze {
    pub fn frozen_columns(&self, k: usize) -> std::ops::Range<usize> {
        match *self {
            Freeze::None => 0..0,
            Freeze::First { q } => 0..q.min(k),
            Freeze::Last { q } => k.saturating_sub(q)..k,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PersonalizeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Strength of the `λ/2 ‖P − P_glob‖²` anchor.
    pub lambda: f64,
    pub freeze: Freeze,
    pub eval_every: usize,
}

impl Default for PersonalizeConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            optimizer: OptimizerConfig::Adam(AdamConfig::with_lr(0.01)),
            lambda: 0.0,
            freeze: Freeze::None,
            eval_every: 1,
        }
    }
}

impl PersonalizeConfig {
    pub fn validate(&self, k: usize) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size and eval_every must be at least 1".into()));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if let Freeze::First { q } | Freeze::Last { q } = self.freeze {
            if q >= k {
                return Err(Error::Config(format!("cannot freeze {q} of {k} prompt tokens")));
            }
        }
        Ok(())
    }
}

/// Loss plus the anchor term `λ/2 ‖p − p_glob‖_F²`.
pub fn regularized_loss<S: Scalar>(
    b: &FrozenBackbone<S>,
    p: &Prompt<S>,
    p_glob: &Prompt<S>,
    batch: &[Example<'_>],
    lambda: f64,
) -> Result<S> {
    let diff = p.matrix().sub(p_glob.matrix())?;
    let sq = diff.frobenius_norm().powi(2);
    Ok(b.forward_loss(p, batch)? + S::of(lambda / 2.0) * sq)
}

pub fn regularized_grad<S: Scalar>(
    b: &FrozenBackbone<S>,
    p: &Prompt<S>,
    p_glob: &Prompt<S>,
    batch: &[Example<'_>],
    lambda: f64,
) -> Result<Matrix<S>> {
    let diff = p.matrix().sub(p_glob.matrix())?;
    let mut g = b.grad_prompt(p, batch)?;
    if lambda != 0.0 {
        g.axpy(S::of(lambda), &diff)?;
    }
    Ok(g)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientTrajectory<S> {
    pub client_id: u32,
    /// Starts with the pre-personalization scores at epoch 0.
    pub points: Vec<TrajectoryPoint>,
    pub final_prompt: Prompt<S>,
}

pub fn personalize_client<S: Scalar>(
    b: &FrozenBackbone<S>,
    p_glob: &Prompt<S>,
    client: &ClientDataset,
    global_eval: &[Instance],
    cfg: &PersonalizeConfig,
    metric: Metric,
    rng: SeededRng,
) -> Result<ClientTrajectory<S>> {
    personalize_with(b, p_glob, client, cfg, rng, |epoch, p| {
        Ok(TrajectoryPoint {
            epoch,
            local_score: score_set(b, p, &client.eval, metric)?,
            global_score: score_set(b, p, global_eval, metric)?,
        })
    })
}

/// Training loop shared by the scored and unscored entry points; `record`
/// is called at epoch 0, every `eval_every` epochs, and after the last one.
fn personalize_with<S: Scalar>(
    b: &FrozenBackbone<S>,
    p_glob: &Prompt<S>,
    client: &ClientDataset,
    cfg: &PersonalizeConfig,
    mut rng: SeededRng,
    mut record: impl FnMut(usize, &Prompt<S>) -> Result<TrajectoryPoint>,
) -> Result<ClientTrajectory<S>> {
    let k = b.dims().k;
    cfg.validate(k)?;
    if client.train.is_empty() {
        return Err(Error::Empty("client training set"));
    }
    let frozen = cfg.freeze.frozen_columns(k);
    let mut opt = cfg.optimizer.fresh(p_glob.shape())?;
    let mut p = p_glob.clone();
    let mut points = vec![record(0, &p)?];
    let mut order: Vec<usize> = (0..client.train.len()).collect();
    for epoch in 1..=cfg.epochs {
        shuffle(&mut rng, &mut order);
        for idx in order.chunks(cfg.batch_size) {
            let batch = examples(&client.train, idx);
            let mut g = regularized_grad(b, &p, p_glob, &batch, cfg.lambda)?;
            if frozen.is_empty() {
                opt.step(p.matrix_mut(), &g)?;
                continue;
            }
            let zeros = vec![S::zero(); g.rows()];
            let kept: Vec<Vec<S>> = frozen.clone().map(|j| p.matrix().col(j)).collect();
            for j in frozen.clone() {
                g.set_col(j, &zeros);
            }
            opt.step(p.matrix_mut(), &g)?;
            // Restoring makes frozen columns bit-exact even under weight decay.
            for (j, col) in frozen.clone().zip(&kept) {
                p.matrix_mut().set_col(j, col);
            }
        }
        if !p.matrix().is_finite() {
            return Err(Error::NonFinite("personalized prompt"));
        }
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            points.push(record(epoch, &p)?);
        }
    }
    Ok(ClientTrajectory {
        client_id: client.client_id,
        points,
        final_prompt: p,
    })
}

/// `alpha · p_personal + (1 − alpha) · p_glob`
pub fn model_average<S: Scalar>(p_glob: &Prompt<S>, p_personal: &Prompt<S>, alpha: f64) -> Result<Prompt<S>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    let a = S::of(alpha);
    let m = p_personal
        .matrix()
        .zip_with(p_glob.matrix(), |pp, pg| a * pp + (S::one() - a) * pg)?;
    Prompt::new(m)
}

/// Mean scores of the global prompt, the personalized prompt, and the
/// per-instance better of the two.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenieScores {
    pub global_prompt: f64,
    pub personal_prompt: f64,
    pub genie: f64,
}

pub fn genie_from_scores(global: &[f64], personal: &[f64]) -> GenieScores {
    let best: Vec<f64> = global.iter().zip(personal).map(|(&g, &p)| g.max(p)).collect();
    GenieScores {
        global_prompt: mean(global),
        personal_prompt: mean(personal),
        genie: mean(&best),
    }
}

pub fn genie_scores<S: Scalar>(
    b: &FrozenBackbone<S>,
    p_glob: &Prompt<S>,
    p_personal: &Prompt<S>,
    eval_set: &[Instance],
    metric: Metric,
) -> Result<GenieScores> {
    if eval_set.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let global = score_each(b, p_glob, eval_set, metric)?;
    let personal = score_each(b, p_personal, eval_set, metric)?;
    Ok(genie_from_scores(&global, &personal))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaPoint {
    pub alpha: f64,
    pub mean_local: f64,
    pub mean_global: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenieRow {
    pub client_id: u32,
    pub local: GenieScores,
    pub global: GenieScores,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult<S> {
    /// Sorted by client id.
    pub trajectories: Vec<ClientTrajectory<S>>,
    pub curve: TradeoffCurve,
    pub model_averaging: Vec<AlphaPoint>,
    pub genie: Vec<GenieRow>,
}

/// The `α ∈ {0, 0.1, …, 1}` interpolation grid.
pub fn default_alpha_grid() -> Vec<f64> {
    (0..=10).map(|i| f64::from(i) / 10.0).collect()
}

struct ClientOutcome<S> {
    trajectory: ClientTrajectory<S>,
    // (local, global) per alpha
    averaged: Vec<(f64, f64)>,
    genie: GenieRow,
}

/// Personalizes every client from `p_glob` and collects trajectories, the
/// model-averaging curve over `alpha_grid`, and genie scores.
#[allow(clippy::too_many_arguments)]
pub fn run_suite<S: Scalar>(
    b: &FrozenBackbone<S>,
    p_glob: &Prompt<S>,
    clients: &[ClientDataset],
    global_eval: &[Instance],
    cfg: &PersonalizeConfig,
    alpha_grid: &[f64],
    metric: Metric,
    rng: &SeededRng,
) -> Result<SuiteResult<S>> {
    if clients.is_empty() {
        return Err(Error::Empty("client list"));
    }
    if let Some(&a) = alpha_grid.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::Config(format!("alpha {a} outside [0, 1]")));
    }
    if clients.iter().any(|c| c.eval.is_empty()) || global_eval.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let mut sorted: Vec<&ClientDataset> = clients.iter().collect();
    sorted.sort_by_key(|c| c.client_id);
    // The global prompt's global score is shared by every client.
    let glob_on_global = score_each(b, p_glob, global_eval, metric)?;
    let glob_global_mean = mean(&glob_on_global);

    let outcomes: Vec<ClientOutcome<S>> = sorted
        .par_iter()
        .map(|client| {
            let client_rng = rng.substream_indexed("personalize", u64::from(client.client_id));
            let trajectory = personalize_with(b, p_glob, client, cfg, client_rng, |epoch, p| {
                let global_score = if epoch == 0 {
                    glob_global_mean
                } else {
                    score_set(b, p, global_eval, metric)?
                };
                Ok(TrajectoryPoint {
                    epoch,
                    local_score: score_set(b, p, &client.eval, metric)?,
                    global_score,
                })
            })?;
            let personal = &trajectory.final_prompt;
            let averaged = alpha_grid
                .iter()
                .map(|&alpha| {
                    let p = model_average(p_glob, personal, alpha)?;
                    Ok((score_set(b, &p, &client.eval, metric)?, score_set(b, &p, global_eval, metric)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let local = genie_from_scores(
                &score_each(b, p_glob, &client.eval, metric)?,
                &score_each(b, personal, &client.eval, metric)?,
            );
            let global = genie_from_scores(&glob_on_global, &score_each(b, personal, global_eval, metric)?);
            Ok(ClientOutcome {
                genie: GenieRow { client_id: client.client_id, local, global },
                trajectory,
                averaged,
            })
        })
        .collect::<Result<_>>()?;

    let curve = aggregate_curve(outcomes.iter().map(|o| o.trajectory.points.as_slice()))?;
    let model_averaging = alpha_grid
        .iter()
        .enumerate()
        .map(|(i, &alpha)| {
            let local: Vec<f64> = outcomes.iter().map(|o| o.averaged[i].0).collect();
            let global: Vec<f64> = outcomes.iter().map(|o| o.averaged[i].1).collect();
            AlphaPoint { alpha, mean_local: mean(&local), mean_global: mean(&global) }
        })
        .collect();
    let genie = outcomes.iter().map(|o| o.genie).collect();
    Ok(SuiteResult {
        trajectories: outcomes.into_iter().map(|o| o.trajectory).collect(),
        curve,
        model_averaging,
        genie,
    })
}
