use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::offpolicy::TrustRegionConfig;
use crate::pgr::{MissingGroupRule, MlPgrThresholds};
use crate::synth::GenConfig;

pub const CONFIG_VERSION: u32 = 1;

/// Everything a run depends on besides the data. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub agent: AgentConfig,
    #[serde(default)]
    pub head: HeadConfig,
    #[serde(default)]
    pub offpolicy: OffPolicyConfig,
    #[serde(default)]
    pub termination: TerminationConfig,
    #[serde(default)]
    pub temporal: TemporalConfig,
    #[serde(default)]
    pub pgr: PgrConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            dataset: DatasetConfig::default(),
            agent: AgentConfig::default(),
            head: HeadConfig::default(),
            offpolicy: OffPolicyConfig::default(),
            termination: TerminationConfig::default(),
            temporal: TemporalConfig::default(),
            pgr: PgrConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// A SETF file; when absent the data is generated from `generate`.
    pub path: Option<PathBuf>,
    pub generate: GenConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    pub episodes: u64,
    pub gamma: f64,
    /// Weight of the `max(0, 1 − a)` reward term.
    pub lambda: f64,
    /// Learning rates are drawn log-uniformly from this range unless fixed below.
    pub lr_range: [f64; 2],
    pub lr_policy: Option<f64>,
    pub lr_value: Option<f64>,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            episodes: 2000,
            gamma: 0.999,
            lambda: 0.1,
            lr_range: [1e-4, 10f64.powf(-3.3)],
            lr_policy: None,
            lr_value: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    /// Plain gradient-descent rate of the per-episode head step; 0 freezes
    /// the head after warmup.
    pub lr: f64,
    /// Steps on mean-pooled training sets before the first episode.
    pub warmup_steps: u64,
    pub warmup_lr: f64,
    pub warmup_batch: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            warmup_steps: 500,
            warmup_lr: 0.05,
            warmup_batch: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OffPolicyConfig {
    pub enabled: bool,
    pub xi: f64,
    pub alpha: f64,
    pub c: f64,
    pub capacity: usize,
    pub batch: usize,
    /// Replay steps after each episode's on-policy step.
    pub replay_ratio: usize,
}

impl Default for OffPolicyConfig {
    fn default() -> Self {
        let tr = TrustRegionConfig::default();
        Self {
            enabled: false,
            xi: tr.xi,
            alpha: tr.alpha,
            c: tr.c,
            capacity: 5000,
            batch: 16,
            replay_ratio: 2,
        }
    }
}

impl OffPolicyConfig {
    pub fn trust_region(&self) -> TrustRegionConfig {
        TrustRegionConfig {
            xi: self.xi,
            alpha: self.alpha,
            c: self.c,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TerminationConfig {
    #[default]
    FullTraversal,
    Softmax { threshold: f64 },
}

impl TerminationConfig {
    pub fn to_env(self) -> crate::env::Termination {
        match self {
            TerminationConfig::FullTraversal => crate::env::Termination::FullTraversal,
            TerminationConfig::Softmax { threshold } => crate::env::Termination::Softmax(threshold),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemporalConfig {
    pub enabled: bool,
    pub steps: u64,
    pub lr: f64,
    pub batch: usize,
}

impl Default for TemporalConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            steps: 500,
            lr: 1e-3,
            batch: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PgrMode {
    #[default]
    None,
    ParameterFree,
    MetricLearning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PgrConfig {
    pub mode: PgrMode,
    pub beta: f64,
    pub phi: f64,
    pub missing_group: MissingGroupRule,
    pub steps: u64,
    pub lr: f64,
    pub batch: usize,
}

impl Default for PgrConfig {
    fn default() -> Self {
        let th = MlPgrThresholds::default();
        Self {
            mode: PgrMode::None,
            beta: th.beta,
            phi: th.phi,
            missing_group: MissingGroupRule::Drop,
            steps: 500,
            lr: 1e-3,
            batch: 8,
        }
    }
}

impl PgrConfig {
    pub fn thresholds(&self) -> MlPgrThresholds {
        MlPgrThresholds {
            beta: self.beta,
            phi: self.phi,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    #[default]
    Verify,
    ClosedId,
    OpenId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    Meanpool,
    Maxpool,
    #[default]
    Dac,
    DacBinary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub protocol: Protocol,
    pub baseline: Baseline,
    pub far: Vec<f64>,
    pub fpir: Vec<f64>,
    pub ranks: Vec<usize>,
    /// Share of probe identities removed from the gallery in open-set runs.
    pub open_set_fraction: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::Verify,
            baseline: Baseline::Dac,
            far: vec![0.001, 0.01, 0.1],
            fpir: vec![0.01, 0.1],
            ranks: vec![1, 5, 10],
            open_set_fraction: 0.2,
        }
    }
}

fn cfg(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| cfg(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(cfg(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.dataset.path.is_none() {
            self.dataset.generate.validate()?;
        }
        let a = &self.agent;
        if !(0.0..1.0).contains(&a.gamma) {
            return Err(cfg(format!("gamma = {} outside [0, 1)", a.gamma)));
        }
        if !(a.lambda >= 0.0 && a.lambda.is_finite()) {
            return Err(cfg(format!("lambda = {} must be >= 0", a.lambda)));
        }
        let [lo, hi] = a.lr_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(cfg(format!("lr_range [{lo}, {hi}] must be positive and ordered")));
        }
        for lr in [a.lr_policy, a.lr_value].into_iter().flatten() {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(cfg(format!("learning rate {lr} must be >= 0")));
            }
        }
        let h = &self.head;
        if [h.lr, h.warmup_lr].iter().any(|lr| !(*lr >= 0.0 && lr.is_finite())) || h.warmup_batch == 0 {
            return Err(cfg("head learning rates must be >= 0 and warmup_batch positive"));
        }
        if let TerminationConfig::Softmax { threshold } = self.termination {
            if !(threshold > 0.0 && threshold <= 1.0) {
                return Err(cfg(format!("termination threshold {threshold} outside (0, 1]")));
            }
            if self.eval.protocol == Protocol::OpenId {
                return Err(cfg(
                    "softmax termination cannot be used with open-set identification",
                ));
            }
        }
        let o = &self.offpolicy;
        o.trust_region().validate()?;
        if o.capacity == 0 || o.batch == 0 {
            return Err(cfg("replay capacity and batch must be positive"));
        }
        if self.temporal.batch == 0 || self.pgr.batch == 0 {
            return Err(cfg("temporal and pgr batches must be positive"));
        }
        self.pgr.thresholds().validate()?;
        let e = &self.eval;
        if e.far.iter().chain(&e.fpir).any(|&r| !(r > 0.0 && r < 1.0)) {
            return Err(cfg("far and fpir values must lie in (0, 1)"));
        }
        if e.ranks.contains(&0) {
            return Err(cfg("ranks start at 1"));
        }
        if !(e.open_set_fraction > 0.0 && e.open_set_fraction < 1.0) {
            return Err(cfg("open_set_fraction must lie in (0, 1)"));
        }
        Ok(())
    }
}
