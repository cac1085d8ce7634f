//! Plain SGD and Adam over prompt-shaped matrices.
//!
//! States are constructed fresh through [`OptimizerConfig::fresh`]; the
//! federated engine does this for every client on every round, which is
//! what makes clients stateless.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled: applied to the parameters after the adaptive update.
    pub weight_decay: f64,
    pub bias_correction: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            beta1: 0.99,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            bias_correction: true,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("adam lr must be positive, got {}", self.lr)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("adam eps must be positive, got {}", self.eps)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("adam {name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("sgd lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Adam(AdamConfig),
    Sgd(SgdConfig),
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Adam(c) => c.validate(),
            Self::Sgd(c) => c.validate(),
        }
    }

    pub fn lr(&self) -> f64 {
        match self {
            Self::Adam(c) => c.lr,
            Self::Sgd(c) => c.lr,
        }
    }

    pub fn with_lr(self, lr: f64) -> Self {
        match self {
            Self::Adam(c) => Self::Adam(AdamConfig { lr, ..c }),
            Self::Sgd(_) => Self::Sgd(SgdConfig { lr }),
        }
    }

    pub fn fresh<S: Scalar>(&self, shape: (usize, usize)) -> Result<OptimizerState<S>> {
        Ok(match self {
            Self::Adam(c) => OptimizerState::Adam(AdamState::fresh(*c, shape)?),
            Self::Sgd(c) => OptimizerState::Sgd(SgdState::new(*c)?),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    config: AdamConfig,
    m: Matrix<S>,
    v: Matrix<S>,
    t: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn fresh(config: AdamConfig, (rows, cols): (usize, usize)) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
            t: 0,
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn first_moment(&self) -> &Matrix<S> {
        &self.m
    }

    pub fn second_moment(&self) -> &Matrix<S> {
        &self.v
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Direct access to the accumulators, for fault-injection tests.
    pub fn raw_parts_mut(&mut self) -> (&mut Matrix<S>, &mut Matrix<S>, &mut u64) {
        (&mut self.m, &mut self.v, &mut self.t)
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut Matrix<S>, grad: &Matrix<S>) -> Result<()> {
        params.ensure_shape(self.m.shape())?;
        grad.ensure_shape(self.m.shape())?;
        let c = &self.config;
        let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
        let (lr, eps) = (S::of(c.lr), S::of(c.eps));
        let one = S::one();
        self.t += 1;
        let t = i32::try_from(self.t).unwrap_or(i32::MAX);
        let (corr1, corr2) = if c.bias_correction {
            (one - b1.powi(t), one - b2.powi(t))
        } else {
            (one, one)
        };
        let decay = one - lr * S::of(c.weight_decay);
        let it = params
            .as_mut_slice()
            .iter_mut()
            .zip(grad.as_slice())
            .zip(self.m.as_mut_slice().iter_mut().zip(self.v.as_mut_slice()));
        for ((p, &g), (m, v)) in it {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / corr1;
            let v_hat = *v / corr2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
            if c.weight_decay != 0.0 {
                *p *= decay;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdState {
    config: SgdConfig,
}

impl SgdState {
    pub fn new(config: SgdConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn step<S: Scalar>(&self, params: &mut Matrix<S>, grad: &Matrix<S>) -> Result<()> {
        params.axpy(-S::of(self.config.lr), grad)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum OptimizerState<S> {
    Adam(AdamState<S>),
    Sgd(SgdState),
}

impl<S: Scalar> OptimizerState<S> {
    pub fn step(&mut self, params: &mut Matrix<S>, grad: &Matrix<S>) -> Result<()> {
        match self {
            Self::Adam(s) => s.step(params, grad),
            Self::Sgd(s) => s.step(params, grad),
        }
    }
}
