//! Run configuration: every knob of a run, loadable from TOML.

use std::fmt;
use std::path::Path;

use fedprompt::backbone::BackboneDims;
use fedprompt::data::{DatasetConfig, UniverseConfig};
use fedprompt::eval::Metric;
use fedprompt::federated::FedConfig;
use fedprompt::personalize::{default_alpha_grid, PersonalizeConfig};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Invalid or unreadable configuration (exit code 1).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

impl From<fedprompt::Error> for ConfigError {
    fn from(e: fedprompt::Error) -> Self {
        ConfigError(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PromptInit {
    Gaussian { std: f64 },
    /// Columns copied from distinct vocabulary embeddings.
    Word,
}

/// Learning-rate grids for `sweep`; the cross product is run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub server_lr: Vec<f64>,
    pub client_lr: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            server_lr: vec![0.01, 0.1, 1.0, 10.0],
            client_lr: vec![0.1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_name: String,
    #[serde(serialize_with = "ser_seed", deserialize_with = "de_seed")]
    pub seed: u64,
    pub backbone: BackboneDims,
    pub dataset: DatasetConfig,
    pub init: PromptInit,
    /// Instances sampled from validation clients for checkpoint selection.
    pub global_val_size: usize,
    /// Instances sampled from test clients for the global score.
    pub global_eval_size: usize,
    /// Smoothing added to category frequencies in the KL report.
    pub kl_eps: f64,
    pub federated: FedConfig,
    pub personalize: PersonalizeConfig,
    /// Personalize only the first `n` test clients.
    pub personalize_clients: Option<usize>,
    pub alpha_grid: Vec<f64>,
    pub metric: Metric,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_name: "default".into(),
            seed: 0,
            backbone: BackboneDims { e: 16, v: 32, h: 32, t_max: 4, l_max: 6, k: 4 },
            dataset: DatasetConfig {
                universe: UniverseConfig {
                    num_types: 12,
                    tasks_per_type: 4,
                    t_gen: 3,
                    sigma_between: 1.0,
                    sigma_within: 0.5,
                    input_gain: 0.5,
                    position_scale: 1.5,
                },
                per_task: 24,
                input_len: 6,
                chunk_size: 24,
                val_types: 1,
                test_types: 4,
                ..Default::default()
            },
            init: PromptInit::Gaussian { std: 0.5 },
            global_val_size: 32,
            global_eval_size: 128,
            kl_eps: 1e-9,
            federated: FedConfig::default(),
            personalize: PersonalizeConfig::default(),
            personalize_clients: None,
            alpha_grid: default_alpha_grid(),
            metric: Metric::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("reading {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| ConfigError(format!("{}: {}", path.display(), e.0)))
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is always representable in TOML")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError(msg));
        if self.run_name.is_empty() || self.run_name.contains(['/', '\\']) || self.run_name.starts_with('.') {
            return bad(format!("run_name {:?} is not a plain directory name", self.run_name));
        }
        self.backbone.validate()?;
        let u = &self.dataset.universe;
        if u.num_types == 0 || u.tasks_per_type == 0 {
            return bad("universe needs at least one type and one task per type".into());
        }
        if u.t_gen == 0 || u.t_gen >= self.backbone.t_max {
            return bad(format!("t_gen {} must be in 1..t_max ({})", u.t_gen, self.backbone.t_max));
        }
        if self.dataset.input_len == 0 || self.dataset.input_len > self.backbone.l_max {
            return bad(format!(
                "input_len {} must be in 1..={} (l_max)",
                self.dataset.input_len, self.backbone.l_max
            ));
        }
        if self.dataset.chunk_size == 0 || self.dataset.per_task == 0 {
            return bad("chunk_size and per_task must be positive".into());
        }
        if !(self.dataset.train_fraction > 0.0 && self.dataset.train_fraction < 1.0) {
            return bad("train_fraction must be in (0, 1)".into());
        }
        if let PromptInit::Gaussian { std } = self.init {
            if !(std >= 0.0 && std.is_finite()) {
                return bad("init std must be a nonnegative number".into());
            }
        }
        if self.global_val_size == 0 || self.global_eval_size == 0 {
            return bad("global evaluation set sizes must be positive".into());
        }
        if !(self.kl_eps >= 0.0 && self.kl_eps.is_finite()) {
            return bad("kl_eps must be a nonnegative number".into());
        }
        self.federated.validate()?;
        self.personalize.validate(self.backbone.k)?;
        if self.personalize_clients == Some(0) {
            return bad("personalize_clients must be positive".into());
        }
        if self.alpha_grid.is_empty() || self.alpha_grid.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return bad("alpha_grid must be nonempty with values in [0, 1]".into());
        }
        if let Metric::RougeL { beta } = self.metric {
            if !(beta > 0.0 && beta.is_finite()) {
                return bad("ROUGE-L beta must be positive".into());
            }
        }
        Ok(())
    }
}

// TOML integers are signed 64-bit; larger seeds are written as strings.
fn ser_seed<Se: Serializer>(seed: &u64, s: Se) -> Result<Se::Ok, Se::Error> {
    match i64::try_from(*seed) {
        Ok(v) => s.serialize_i64(v),
        Err(_) => s.serialize_str(&seed.to_string()),
    }
}

fn de_seed<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Int(u64),
        Str(String),
    }
    match Raw::deserialize(d)? {
        Raw::Int(v) => Ok(v),
        Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
    }
}
