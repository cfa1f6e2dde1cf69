//! Experiment description read from TOML.
//!
//! Every section and key is optional and falls back to the desk defaults;
//! unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{BobaParams, Rule};
use crate::attacks::{Attack, MinOptVariant};
use crate::datagen::{PartitionScheme, PartitionSpec};
use crate::fedsim::{LocalVariant, Model, Schedule};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid value for `{field}`: {message}")]
    Field { field: &'static str, message: String },
}

fn field(field: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Field { field, message: message.into() }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub task: TaskConfig,
    pub partition: PartitionConfig,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub aggregator: AggregatorConfig,
    pub attack: AttackConfig,
    pub seeds: SeedConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub classes: usize,
    pub dim: usize,
    /// Training samples per class, pooled over honest clients.
    pub per_class: usize,
    pub separation: f64,
    /// Server-held samples per class.
    pub server_per_class: usize,
    pub test_per_class: usize,
    /// Held-out samples per class for the expected-gradient oracle.
    pub oracle_per_class: usize,
    /// Optional training CSV (`f0,...,label`); replaces the synthetic task.
    pub dataset: Option<PathBuf>,
    /// Optional test CSV used together with `dataset`.
    pub test_dataset: Option<PathBuf>,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            dim: 20,
            per_class: 200,
            separation: 3.0,
            server_per_class: 20,
            test_per_class: 200,
            oracle_per_class: 2000,
            dataset: None,
            test_dataset: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionKind {
    Pathological,
    Step,
    Dirichlet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub scheme: PartitionKind,
    pub honest: usize,
    /// Shards per client for the pathological scheme.
    pub shards: usize,
    /// Major/minor ratio (step) or concentration (Dirichlet).
    pub alpha: f64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self { scheme: PartitionKind::Pathological, honest: 20, shards: 2, alpha: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Softmax,
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocalKind {
    Fedsgd,
    Fedavg,
    Fedprox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub hidden: usize,
    pub local: LocalKind,
    pub epochs: usize,
    pub prox_mu: f64,
    /// Standard deviation of Gaussian noise added to every uploaded
    /// gradient, honest and server alike.
    pub noise_std: f64,
    /// Minibatch size for local gradients; 0 means full batch.
    pub batch_size: usize,
    /// Fraction of honest clients taking part in each round.
    pub participation: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Softmax,
            hidden: 32,
            local: LocalKind::Fedsgd,
            epochs: 1,
            prox_mu: 0.01,
            noise_std: 0.0,
            batch_size: 0,
            participation: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub eta: f64,
    pub rounds: usize,
    /// First round at which the learning rate decays.
    pub decay_start: usize,
    /// Rounds between decays; 0 disables decay.
    pub decay_interval: usize,
    pub decay_rate: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { eta: 0.5, rounds: 200, decay_start: 0, decay_interval: 0, decay_rate: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregatorConfig {
    /// Rule name, e.g. `boba`, `krum`, `b-mkrum`.
    pub rule: String,
    pub f: usize,
    pub p_min: f64,
    pub max_alternations: usize,
    pub es_cap: u64,
    /// Bucket size for `b-*` rules.
    pub bucket_size: usize,
    pub geomed_tol: f64,
    pub geomed_max_iter: usize,
    /// Rule of the same-seed, attack-free run used for the recall drop;
    /// `none` skips it.
    pub mrd_reference: String,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        Self {
            rule: "boba".into(),
            f: 4,
            p_min: -0.5,
            max_alternations: 50,
            es_cap: 200_000,
            bucket_size: 2,
            geomed_tol: 1e-8,
            geomed_max_iter: 1000,
            mrd_reference: "average".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// `none` or one of the six attack names.
    pub kind: String,
    pub byzantine: usize,
    pub gamma: f64,
    pub variance: f64,
    pub gamma_init: f64,
    pub tau: f64,
    pub mimic_target: Option<usize>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            kind: "none".into(),
            byzantine: 3,
            gamma: 10.0,
            variance: 200.0,
            gamma_init: 10.0,
            tau: 1e-5,
            mimic_target: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedConfig {
    pub master: u64,
}

impl SimConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: SimConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let t = &self.task;
        if t.classes < 2 {
            return Err(field("task.classes", "must be at least 2"));
        }
        if t.dataset.is_none() {
            if t.dim + 1 < t.classes {
                return Err(field("task.dim", format!("must be at least classes − 1 = {}", t.classes - 1)));
            }
            if t.per_class == 0 || t.test_per_class == 0 {
                return Err(field("task.per_class", "sample counts must be positive"));
            }
            if !(t.separation >= 0.0 && t.separation.is_finite()) {
                return Err(field("task.separation", "must be finite and non-negative"));
            }
        } else if t.test_dataset.is_none() {
            return Err(field("task.test_dataset", "required when task.dataset is set"));
        }
        if t.server_per_class == 0 {
            return Err(field("task.server_per_class", "must be positive"));
        }
        if t.oracle_per_class == 0 {
            return Err(field("task.oracle_per_class", "must be positive"));
        }
        self.partition_spec().validate().map_err(|e| field("partition", e.to_string()))?;
        let m = &self.model;
        if m.kind == ModelKind::Mlp && m.hidden == 0 {
            return Err(field("model.hidden", "must be positive"));
        }
        if m.local != LocalKind::Fedsgd && m.epochs == 0 {
            return Err(field("model.epochs", "must be at least 1"));
        }
        if !(m.prox_mu >= 0.0 && m.prox_mu.is_finite()) {
            return Err(field("model.prox_mu", "must be finite and non-negative"));
        }
        if !(m.noise_std >= 0.0 && m.noise_std.is_finite()) {
            return Err(field("model.noise_std", "must be finite and non-negative"));
        }
        if !(m.participation > 0.0 && m.participation <= 1.0) {
            return Err(field("model.participation", "must lie in (0, 1]"));
        }
        let s = &self.schedule;
        if !(s.eta > 0.0 && s.eta.is_finite()) {
            return Err(field("schedule.eta", "must be positive"));
        }
        if s.rounds == 0 {
            return Err(field("schedule.rounds", "must be positive"));
        }
        if !(s.decay_rate > 0.0 && s.decay_rate <= 1.0) {
            return Err(field("schedule.decay_rate", "must lie in (0, 1]"));
        }
        let a = &self.aggregator;
        self.rule()?;
        if a.mrd_reference != "none" {
            a.mrd_reference
                .parse::<Rule>()
                .map_err(|e| field("aggregator.mrd_reference", e.to_string()))?;
        }
        let n = self.partition.honest + self.attack.byzantine;
        if a.f >= n {
            return Err(field("aggregator.f", format!("must be below the client count {n}")));
        }
        self.attack()?;
        if self.attack.kind != "none" && self.attack.byzantine == 0 {
            return Err(field("attack.byzantine", "must be positive when an attack is set"));
        }
        if let Some(t) = self.attack.mimic_target {
            if t >= self.partition.honest {
                return Err(field("attack.mimic_target", format!("must be below honest = {}", self.partition.honest)));
            }
        }
        Ok(())
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        let p = &self.partition;
        let scheme = match p.scheme {
            PartitionKind::Pathological => PartitionScheme::Pathological { shards: p.shards },
            PartitionKind::Step => PartitionScheme::Step { alpha: p.alpha },
            PartitionKind::Dirichlet => PartitionScheme::Dirichlet { alpha: p.alpha },
        };
        PartitionSpec { scheme, honest_count: p.honest, seed: self.seeds.master }
    }

    /// The configured rule with its parameters applied.
    pub fn rule(&self) -> Result<Rule, ConfigError> {
        let a = &self.aggregator;
        let rule: Rule = a.rule.parse().map_err(|e: crate::aggregation::UnknownRule| field("aggregator.rule", e.to_string()))?;
        if !(a.p_min <= 0.0) {
            return Err(field("aggregator.p_min", "must be ≤ 0"));
        }
        if a.max_alternations == 0 {
            return Err(field("aggregator.max_alternations", "must be positive"));
        }
        if a.bucket_size == 0 {
            return Err(field("aggregator.bucket_size", "must be positive"));
        }
        if !(a.geomed_tol > 0.0) || a.geomed_max_iter == 0 {
            return Err(field("aggregator.geomed_tol", "tolerance and iteration cap must be positive"));
        }
        Ok(self.configure_rule(rule))
    }

    fn configure_rule(&self, rule: Rule) -> Rule {
        let a = &self.aggregator;
        let params = BobaParams { p_min: a.p_min, max_alternations: a.max_alternations };
        match rule {
            Rule::Boba(_) => Rule::Boba(params),
            Rule::BobaEs { .. } => Rule::BobaEs { params, cap: a.es_cap as u128 },
            Rule::GeoMed { .. } => Rule::GeoMed { tol: a.geomed_tol, max_iter: a.geomed_max_iter },
            Rule::Bucketing { inner, seed, .. } => {
                Rule::Bucketing { size: a.bucket_size, inner: Box::new(self.configure_rule(*inner)), seed }
            }
            other => other,
        }
    }

    /// Reference rule for the recall drop, if any.
    pub fn mrd_reference(&self) -> Option<Rule> {
        let name = &self.aggregator.mrd_reference;
        (name != "none").then(|| self.configure_rule(name.parse().expect("validated")))
    }

    /// The configured attack, `None` for `kind = "none"`.
    pub fn attack(&self) -> Result<Option<Attack>, ConfigError> {
        let a = &self.attack;
        if a.kind == "none" {
            return Ok(None);
        }
        let base: Attack = a.kind.parse().map_err(|e: crate::attacks::UnknownAttack| field("attack.kind", e.to_string()))?;
        let attack = match base {
            Attack::Gauss { .. } => Attack::Gauss { variance: a.variance },
            Attack::Ipm { .. } => Attack::Ipm { gamma: a.gamma },
            Attack::Lie => Attack::Lie,
            Attack::Mimic { .. } => Attack::Mimic { target: a.mimic_target },
            Attack::MinOpt { variant, .. } => Attack::MinOpt { variant, gamma_init: a.gamma_init, tau: a.tau },
        };
        attack.validate().map_err(|e| field("attack", e.to_string()))?;
        if let Attack::MinOpt { variant: MinOptVariant::MinMax | MinOptVariant::MinSum, .. } = attack {
            if self.partition.honest < 2 {
                return Err(field("partition.honest", "min-max/min-sum attacks need at least 2 honest clients"));
            }
        }
        Ok(Some(attack))
    }

    /// Name written to CSV rows.
    pub fn attack_name(&self) -> &str {
        &self.attack.kind
    }

    pub fn model(&self) -> Model {
        match self.model.kind {
            ModelKind::Softmax => Model::Softmax { dim: self.task.dim, classes: self.task.classes },
            ModelKind::Mlp => Model::Mlp { dim: self.task.dim, hidden: self.model.hidden, classes: self.task.classes },
        }
    }

    pub fn local_variant(&self) -> LocalVariant {
        match self.model.local {
            LocalKind::Fedsgd => LocalVariant::FedSgd,
            LocalKind::Fedavg => LocalVariant::FedAvg { epochs: self.model.epochs },
            LocalKind::Fedprox => LocalVariant::FedProx { epochs: self.model.epochs, mu: self.model.prox_mu },
        }
    }

    pub fn schedule(&self) -> Schedule {
        let s = &self.schedule;
        Schedule {
            eta: s.eta,
            rounds: s.rounds,
            decay_start: s.decay_start,
            decay_interval: s.decay_interval,
            decay_rate: s.decay_rate,
        }
    }
}
