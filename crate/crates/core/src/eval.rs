//! Sequence scoring and cross-client aggregation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{FrozenBackbone, Instance, Prompt, TokenId, EOS};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Metric {
    /// LCS F-measure; `beta = 1` weighs precision and recall equally.
    RougeL { beta: f64 },
    Exact,
}

impl Default for Metric {
    fn default() -> Self {
        Metric::RougeL { beta: 1.0 }
    }
}

impl Metric {
    pub fn score(&self, hypothesis: &[TokenId], reference: &[TokenId]) -> f64 {
        match *self {
            Metric::RougeL { beta } => rouge_l_beta(hypothesis, reference, beta),
            Metric::Exact => f64::from(u8::from(hypothesis == reference)),
        }
    }
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 over token sequences.
pub fn rouge_l(hypothesis: &[TokenId], reference: &[TokenId]) -> f64 {
    rouge_l_beta(hypothesis, reference, 1.0)
}

pub fn rouge_l_beta(hypothesis: &[TokenId], reference: &[TokenId], beta: f64) -> f64 {
    if hypothesis.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(hypothesis, reference);
    if lcs == 0 {
        return 0.0;
    }
    let precision = lcs as f64 / hypothesis.len() as f64;
    let recall = lcs as f64 / reference.len() as f64;
    let b2 = beta * beta;
    ((1.0 + b2) * precision * recall / (recall + b2 * precision)).clamp(0.0, 1.0)
}

fn strip_eos(target: &[TokenId]) -> &[TokenId] {
    match target.split_last() {
        Some((&EOS, rest)) => rest,
        _ => target,
    }
}

/// Best score of an already decoded output over the instance's targets.
pub fn score_output(output: &[TokenId], inst: &Instance, metric: Metric) -> f64 {
    inst.targets
        .iter()
        .map(|t| metric.score(output, strip_eos(t)))
        .fold(0.0, f64::max)
}

pub fn score_instance<S: Scalar>(
    b: &FrozenBackbone<S>,
    p: &Prompt<S>,
    inst: &Instance,
    metric: Metric,
) -> Result<f64> {
    let output = b.decode(p, &inst.input)?;
    Ok(score_output(&output, inst, metric))
}

/// Per-instance scores, in instance order.
pub fn score_each<S: Scalar>(
    b: &FrozenBackbone<S>,
    p: &Prompt<S>,
    instances: &[Instance],
    metric: Metric,
) -> Result<Vec<f64>> {
    instances
        .par_iter()
        .map(|inst| score_instance(b, p, inst, metric))
        .collect()
}

pub fn score_set<S: Scalar>(
    b: &FrozenBackbone<S>,
    p: &Prompt<S>,
    instances: &[Instance],
    metric: Metric,
) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    Ok(mean(&score_each(b, p, instances, metric)?))
}

/// Sequential left-to-right mean; NaN for an empty slice.
pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Empirical quantile `q ∈ [0, 1]` with linear interpolation between order
/// statistics (rank `q · (n − 1)`).
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub epoch: usize,
    pub local_score: f64,
    pub global_score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub mean_local: f64,
    pub mean_global: f64,
    pub p10_local: f64,
    pub p90_local: f64,
    pub p10_global: f64,
    pub p90_global: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TradeoffCurve {
    pub points: Vec<CurvePoint>,
}

/// Mean and 10th/90th percentiles across clients at each evaluation epoch.
pub fn aggregate_curve<'a>(
    trajectories: impl IntoIterator<Item = &'a [TrajectoryPoint]>,
) -> Result<TradeoffCurve> {
    let trajectories: Vec<&[TrajectoryPoint]> = trajectories.into_iter().collect();
    let first = *trajectories.first().ok_or(Error::Empty("trajectory list"))?;
    let same_epochs = trajectories.iter().all(|t| {
        t.len() == first.len() && t.iter().zip(first).all(|(a, b)| a.epoch == b.epoch)
    });
    if !same_epochs {
        return Err(Error::MismatchedEpochs);
    }
    let points = (0..first.len())
        .map(|i| {
            let local: Vec<f64> = trajectories.iter().map(|t| t[i].local_score).collect();
            let global: Vec<f64> = trajectories.iter().map(|t| t[i].global_score).collect();
            CurvePoint {
                epoch: first[i].epoch,
                mean_local: mean(&local),
                mean_global: mean(&global),
                p10_local: percentile(&local, 0.1),
                p90_local: percentile(&local, 0.9),
                p10_global: percentile(&global, 0.1),
                p90_global: percentile(&global, 0.9),
            }
        })
        .collect();
    Ok(TradeoffCurve { points })
}
