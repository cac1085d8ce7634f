//! Frozen reference model that a soft prompt is tuned against.
//!
//! The prompt columns and the embedded input tokens are mean-pooled with
//! fixed positive weights into a single vector `z`. Each output position `t`
//! then reads `u_t = W2 · tanh(W1 z + b1 + c_t) + b2` as vocabulary logits.
//! Only the prompt is trainable; every other parameter is fixed at
//! construction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gaussian_matrix, sample_without_replacement, Matrix, SeededRng};
use crate::scalar::Scalar;

pub type TokenId = u32;

/// End-of-sequence token.
pub const EOS: TokenId = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneDims {
    /// Embedding dimension.
    pub e: usize,
    /// Vocabulary size, including EOS.
    pub v: usize,
    /// Hidden width.
    pub h: usize,
    /// Output positions.
    pub t_max: usize,
    /// Maximum input length.
    pub l_max: usize,
    /// Prompt length in tokens.
    pub k: usize,
}

impl BackboneDims {
    pub fn validate(&self) -> Result<()> {
        let BackboneDims { e, v, h, t_max, l_max, k } = *self;
        if [e, v, h, t_max, l_max, k].contains(&0) {
            return Err(Error::Config("backbone dimensions must be at least 1".into()));
        }
        if v < 2 {
            return Err(Error::Config("vocabulary needs at least one token besides EOS".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let BackboneDims { e, v, h, t_max, l_max, k } = *self;
        e * v + h * e + h + v * h + v + h * t_max + (k + l_max)
    }

    pub fn prompt_shape(&self) -> (usize, usize) {
        (self.e, self.k)
    }
}

/// Raw backbone weights; used to build rigged backbones in tests and tools.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams<S> {
    /// Token embeddings, `e × v`.
    pub embeddings: Matrix<S>,
    /// `h × e`
    pub w1: Matrix<S>,
    pub b1: Vec<S>,
    /// `v × h`
    pub w2: Matrix<S>,
    pub b2: Vec<S>,
    /// Per-output-position offsets, `h × t_max`.
    pub offsets: Matrix<S>,
    /// Pooling weights over `k + l_max` positions, all positive.
    pub omega: Vec<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrozenBackbone<S> {
    dims: BackboneDims,
    params: BackboneParams<S>,
}

/// Soft prompt: an `e × k` matrix whose columns act as virtual token embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct Prompt<S>(Matrix<S>);

impl<S: Scalar> Prompt<S> {
    pub fn new(m: Matrix<S>) -> Result<Self> {
        if !m.is_finite() {
            return Err(Error::NonFinite("prompt"));
        }
        Ok(Self(m))
    }

    pub fn zeros(dims: &BackboneDims) -> Self {
        Self(Matrix::zeros(dims.e, dims.k))
    }

    pub fn matrix(&self) -> &Matrix<S> {
        &self.0
    }

    pub fn matrix_mut(&mut self) -> &mut Matrix<S> {
        &mut self.0
    }

    pub fn into_matrix(self) -> Matrix<S> {
        self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }
}

/// One query with its acceptable answers, tagged with task metadata.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Instance {
    pub input: Vec<TokenId>,
    pub targets: Vec<Vec<TokenId>>,
    pub task_id: u32,
    pub task_type_id: u32,
}

impl Instance {
    /// The target used for training: the first one.
    pub fn example(&self) -> Example<'_> {
        Example {
            input: &self.input,
            target: &self.targets[0],
        }
    }

    /// Checks token ranges, lengths, and EOS placement against `dims`.
    pub fn validate(&self, dims: &BackboneDims) -> Result<()> {
        check_input(&self.input, dims)?;
        if self.targets.is_empty() {
            return Err(Error::InvalidInstance("no targets".into()));
        }
        for t in &self.targets {
            check_target(t, dims)?;
            match t.iter().position(|&x| x == EOS) {
                Some(i) if i + 1 == t.len() => {}
                _ => {
                    return Err(Error::InvalidInstance(
                        "target must end with EOS and contain it only once".into(),
                    ))
                }
            }
        }
        Ok(())
    }
}

/// An (input, target) pair as consumed by the loss.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub input: &'a [TokenId],
    pub target: &'a [TokenId],
}

fn check_tokens(tokens: &[TokenId], vocab: usize) -> Result<()> {
    match tokens.iter().find(|&&t| t as usize >= vocab) {
        Some(&token) => Err(Error::TokenOutOfRange { token, vocab }),
        None => Ok(()),
    }
}

fn check_input(input: &[TokenId], dims: &BackboneDims) -> Result<()> {
    if input.is_empty() {
        return Err(Error::Empty("input"));
    }
    if input.len() > dims.l_max {
        return Err(Error::InputTooLong {
            len: input.len(),
            max: dims.l_max,
        });
    }
    check_tokens(input, dims.v)
}

fn check_target(target: &[TokenId], dims: &BackboneDims) -> Result<()> {
    if target.is_empty() {
        return Err(Error::Empty("target"));
    }
    if target.len() > dims.t_max {
        return Err(Error::TargetTooLong {
            len: target.len(),
            max: dims.t_max,
        });
    }
    check_tokens(target, dims.v)
}

// Per-example activations retained for the backward pass.
struct Activations<S> {
    pooling: Vec<S>,
    // W1 z + b1, shared by every output position.
    base: Vec<S>,
}

impl<S: Scalar> FrozenBackbone<S> {
    pub fn init(rng: &mut SeededRng, dims: BackboneDims) -> Result<Self> {
        dims.validate()?;
        let BackboneDims { e, v, h, t_max, l_max, k } = dims;
        let embeddings = gaussian_matrix(rng, e, v, 1.0);
        let w1 = gaussian_matrix(rng, h, e, 1.0 / (e as f64).sqrt());
        let w2 = gaussian_matrix(rng, v, h, 1.0 / (h as f64).sqrt());
        let offsets = gaussian_matrix(rng, h, t_max, 1.0);
        let omega = (0..k + l_max)
            .map(|_| S::of((1.0 + 0.1 * rng.standard_normal()).abs().max(0.1)))
            .collect();
        Self::from_params(
            dims,
            BackboneParams {
                embeddings,
                w1,
                b1: vec![S::zero(); h],
                w2,
                b2: vec![S::zero(); v],
                offsets,
                omega,
            },
        )
    }

    pub fn from_params(dims: BackboneDims, params: BackboneParams<S>) -> Result<Self> {
        dims.validate()?;
        let BackboneDims { e, v, h, t_max, l_max, k } = dims;
        params.embeddings.ensure_shape((e, v))?;
        params.w1.ensure_shape((h, e))?;
        params.w2.ensure_shape((v, h))?;
        params.offsets.ensure_shape((h, t_max))?;
        let vec_len = |name: &str, got: usize, want: usize| {
            if got == want {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} has length {got}, expected {want}")))
            }
        };
        vec_len("b1", params.b1.len(), h)?;
        vec_len("b2", params.b2.len(), v)?;
        vec_len("omega", params.omega.len(), k + l_max)?;
        if params.omega.iter().any(|&w| !(w > S::zero()) || !w.is_finite()) {
            return Err(Error::Config("pooling weights must be positive and finite".into()));
        }
        let finite = [&params.embeddings, &params.w1, &params.w2, &params.offsets]
            .iter()
            .all(|m| m.is_finite())
            && params.b1.iter().chain(&params.b2).all(|x| x.is_finite());
        if !finite {
            return Err(Error::NonFinite("backbone parameters"));
        }
        Ok(Self { dims, params })
    }

    pub fn dims(&self) -> &BackboneDims {
        &self.dims
    }

    pub fn params(&self) -> &BackboneParams<S> {
        &self.params
    }

    pub fn into_params(self) -> BackboneParams<S> {
        self.params
    }

    pub fn param_count(&self) -> usize {
        self.dims.param_count()
    }

    fn check_prompt(&self, p: &Prompt<S>) -> Result<()> {
        p.matrix().ensure_shape(self.dims.prompt_shape())
    }

    /// Normalised pooling weights for an input of `len` tokens.
    pub fn pooling_weights(&self, len: usize) -> Vec<S> {
        let active = &self.params.omega[..self.dims.k + len];
        let total: S = active.iter().copied().sum();
        active.iter().map(|&w| w / total).collect()
    }

    fn activations(&self, p: &Prompt<S>, input: &[TokenId]) -> Activations<S> {
        let k = self.dims.k;
        let pooling = self.pooling_weights(input.len());
        let pm = p.matrix();
        let e = &self.params.embeddings;
        let z: Vec<S> = (0..self.dims.e)
            .map(|r| {
                let from_prompt = (0..k).fold(S::zero(), |acc, j| acc + pooling[j] * pm.get(r, j));
                input
                    .iter()
                    .enumerate()
                    .fold(from_prompt, |acc, (i, &tok)| acc + pooling[k + i] * e.get(r, tok as usize))
            })
            .collect();
        let mut base = self.params.w1.matvec(&z);
        for (b, &bias) in base.iter_mut().zip(&self.params.b1) {
            *b += bias;
        }
        Activations { pooling, base }
    }

    fn hidden(&self, base: &[S], t: usize) -> Vec<S> {
        let offsets = &self.params.offsets;
        base.iter()
            .enumerate()
            .map(|(r, &x)| (x + offsets.get(r, t)).tanh())
            .collect()
    }

    fn logits(&self, hidden: &[S]) -> Vec<S> {
        let mut u = self.params.w2.matvec(hidden);
        for (x, &bias) in u.iter_mut().zip(&self.params.b2) {
            *x += bias;
        }
        u
    }

    fn check_batch(&self, batch: &[Example<'_>]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        for ex in batch {
            check_input(ex.input, &self.dims)?;
            check_target(ex.target, &self.dims)?;
        }
        Ok(())
    }

    /// Mean over the batch of the summed token negative log-likelihood.
    pub fn forward_loss(&self, p: &Prompt<S>, batch: &[Example<'_>]) -> Result<S> {
        self.loss_impl(p, batch, false).map(|(loss, _)| loss)
    }

    /// Gradient of [`forward_loss`](Self::forward_loss) with respect to the prompt.
    pub fn grad_prompt(&self, p: &Prompt<S>, batch: &[Example<'_>]) -> Result<Matrix<S>> {
        self.loss_and_grad(p, batch).map(|(_, g)| g)
    }

    pub fn loss_and_grad(&self, p: &Prompt<S>, batch: &[Example<'_>]) -> Result<(S, Matrix<S>)> {
        self.loss_impl(p, batch, true)
            .map(|(loss, g)| (loss, g.expect("gradient requested")))
    }

    fn loss_impl(
        &self,
        p: &Prompt<S>,
        batch: &[Example<'_>],
        with_grad: bool,
    ) -> Result<(S, Option<Matrix<S>>)> {
        self.check_prompt(p)?;
        self.check_batch(batch)?;
        let (e, k) = self.dims.prompt_shape();
        let n = S::of(batch.len() as f64);
        let mut total = S::zero();
        let mut grad = with_grad.then(|| Matrix::zeros(e, k));

        for ex in batch {
            let act = self.activations(p, ex.input);
            let mut dz_pre = vec![S::zero(); self.dims.h];
            for (t, &y) in ex.target.iter().enumerate() {
                let a = self.hidden(&act.base, t);
                let u = self.logits(&a);
                let max = u.iter().copied().fold(S::neg_infinity(), S::max);
                let exp: Vec<S> = u.iter().map(|&x| (x - max).exp()).collect();
                let sum: S = exp.iter().copied().sum();
                total += sum.ln() + max - u[y as usize];
                if with_grad {
                    let mut residual: Vec<S> = exp.iter().map(|&x| x / sum).collect();
                    residual[y as usize] -= S::one();
                    let da = self.params.w2.matvec_t(&residual);
                    for ((acc, &g), &ai) in dz_pre.iter_mut().zip(&da).zip(&a) {
                        *acc += (S::one() - ai * ai) * g;
                    }
                }
            }
            if let Some(grad) = grad.as_mut() {
                let dz = self.params.w1.matvec_t(&dz_pre);
                for (r, &dzr) in dz.iter().enumerate().take(e) {
                    for j in 0..k {
                        let cur = grad.get(r, j);
                        grad.set(r, j, cur + act.pooling[j] * dzr / n);
                    }
                }
            }
        }
        Ok((total / n, grad))
    }

    /// Greedy decoding: argmax per output position, lowest id on ties,
    /// stopping before the first EOS.
    pub fn decode(&self, p: &Prompt<S>, input: &[TokenId]) -> Result<Vec<TokenId>> {
        self.check_prompt(p)?;
        check_input(input, &self.dims)?;
        let act = self.activations(p, input);
        let mut out = Vec::with_capacity(self.dims.t_max);
        for t in 0..self.dims.t_max {
            let u = self.logits(&self.hidden(&act.base, t));
            let token = argmax(&u) as TokenId;
            if token == EOS {
                break;
            }
            out.push(token);
        }
        Ok(out)
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax<S: Scalar>(values: &[S]) -> usize {
    let mut best = 0;
    for (i, &x) in values.iter().enumerate().skip(1) {
        if x > values[best] {
            best = i;
        }
    }
    best
}

pub fn init_prompt_gaussian<S: Scalar>(rng: &mut SeededRng, dims: &BackboneDims, std: f64) -> Prompt<S> {
    Prompt(gaussian_matrix(rng, dims.e, dims.k, std))
}

/// Prompt whose columns are `k` distinct token embeddings.
pub fn init_prompt_word<S: Scalar>(rng: &mut SeededRng, b: &FrozenBackbone<S>) -> Result<Prompt<S>> {
    let BackboneDims { e, v, k, .. } = *b.dims();
    let cols = sample_without_replacement(rng, v, k)?;
    let emb = &b.params().embeddings;
    Ok(Prompt(Matrix::from_fn(e, k, |r, j| emb.get(r, cols[j]))))
}
