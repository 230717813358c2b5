//! Configured experiments: a trainable model, its checkpoint format, the
//! staged training passes and evaluation protocols.

mod config;
mod evaluate;
mod train;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agent::{AgentOptimizer, AgentParams};
use crate::codec::{Reader, Writer};
use crate::env::RewardHead;
use crate::error::{Error, Result};
use crate::nn::{Adam, DenseNet};
use crate::offpolicy::{AveragePolicy, ReplayPool};
use crate::synth::{self, FeatureSetCollection, Split};
use crate::temporal::{SetPartition, TempConvNet};

pub use config::*;
pub use evaluate::{evaluate, EvalOptions, EvalReport};
pub use train::{EpisodeMetrics, MetricsLog, Phase};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SETC";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Loads the configured dataset, or generates it.
pub fn load_dataset(config: &ExperimentConfig) -> Result<FeatureSetCollection> {
    match &config.dataset.path {
        Some(p) => synth::read_features(p),
        None => synth::generate(&config.dataset.generate),
    }
}

/// One set with its items converted to `f64`.
#[derive(Debug, Clone)]
pub struct PreparedSet {
    pub set_id: u64,
    pub identity: u32,
    pub split: Split,
    pub features: Vec<Vec<f64>>,
    pub yaws: Vec<f64>,
    pub duplicate_of: Vec<Option<u32>>,
    pub quality: Vec<f32>,
    pub partition: SetPartition,
}

pub fn prepare(collection: &FeatureSetCollection) -> Vec<PreparedSet> {
    collection
        .sets()
        .iter()
        .map(|s| PreparedSet {
            set_id: s.set_id,
            identity: s.identity,
            split: s.split,
            features: s.features(),
            yaws: s.yaws(),
            duplicate_of: s.items.iter().map(|r| r.duplicate_of).collect(),
            quality: s.items.iter().map(|r| r.quality_sigma).collect(),
            partition: SetPartition::of(s),
        })
        .collect()
}

/// The items the agent sees: every item, or with a temporal net, the stills
/// plus one attention-pooled pseudo-item per video segment.
#[derive(Debug, Clone)]
pub struct Units {
    pub features: Vec<Vec<f64>>,
    pub yaws: Vec<f64>,
    /// `(item index, share)` pairs making up each unit.
    pub members: Vec<Vec<(usize, f64)>>,
}

impl PreparedSet {
    pub fn units(&self, temporal: Option<&TempConvNet>) -> Result<Units> {
        let Some(net) = temporal else {
            return Ok(Units {
                features: self.features.clone(),
                yaws: self.yaws.clone(),
                members: (0..self.features.len()).map(|i| vec![(i, 1.0)]).collect(),
            });
        };
        let p = &self.partition;
        let mut u = Units {
            features: Vec::with_capacity(p.num_units()),
            yaws: Vec::with_capacity(p.num_units()),
            members: Vec::with_capacity(p.num_units()),
        };
        for &i in &p.stills {
            u.features.push(self.features[i].clone());
            u.yaws.push(self.yaws[i]);
            u.members.push(vec![(i, 1.0)]);
        }
        for (_, idx) in &p.segments {
            let frames: Vec<Vec<f64>> = idx.iter().map(|&i| self.features[i].clone()).collect();
            let w = net.attention(&frames)?;
            u.features.push(crate::temporal::weighted_sum(&frames, &w));
            u.yaws.push(idx.iter().zip(&w).map(|(&i, a)| a * self.yaws[i]).sum());
            u.members.push(idx.iter().copied().zip(w).collect());
        }
        Ok(u)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalState {
    pub net: TempConvNet,
    pub opt: Adam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlPgrState {
    pub embedder: DenseNet,
    pub head: RewardHead,
    pub embedder_opt: Adam,
    pub head_opt: Adam,
}

/// How far each training phase has run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Progress {
    pub warmup_done: bool,
    pub episodes: u64,
    pub temporal_steps: u64,
    pub pgr_steps: u64,
}

/// Every piece of trainable state plus the RNG, so a resumed run continues
/// exactly where the saved one stopped.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ExperimentConfig,
    config_text: String,
    /// Training identity of each head class.
    pub classes: Vec<u32>,
    pub head: RewardHead,
    pub agent: AgentParams,
    pub optimizer: AgentOptimizer,
    pub average: AveragePolicy,
    pub pool: ReplayPool,
    pub temporal: Option<TemporalState>,
    pub pgr: Option<MlPgrState>,
    pub pose_axis: Option<Vec<f64>>,
    pub lr_policy: f64,
    pub lr_value: f64,
    pub progress: Progress,
    rng: ChaCha8Rng,
}

fn log_uniform<R: Rng + ?Sized>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        return lo;
    }
    rng.gen_range(lo.ln()..hi.ln()).exp()
}

impl Model {
    pub fn init(config: ExperimentConfig, data: &FeatureSetCollection) -> Result<Self> {
        config.validate()?;
        let mut classes: Vec<u32> = data.sets_in(Split::Train).iter().map(|s| s.identity).collect();
        classes.sort_unstable();
        classes.dedup();
        if classes.is_empty() {
            return Err(Error::invalid("dataset has no training sets"));
        }
        let d = data.embed_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let head = RewardHead::new(d, classes.len(), config.agent.lambda, &mut rng)?;
        let agent = AgentParams::new(d, config.agent.gamma, &mut rng)?;
        let lr_policy = match config.agent.lr_policy {
            Some(v) => v,
            None => log_uniform(&mut rng, config.agent.lr_range),
        };
        let lr_value = match config.agent.lr_value {
            Some(v) => v,
            None => log_uniform(&mut rng, config.agent.lr_range),
        };
        let temporal = if config.temporal.enabled {
            let net = TempConvNet::new(d, &mut rng)?;
            let opt = Adam::new(net.num_params());
            Some(TemporalState { net, opt })
        } else {
            None
        };
        let pgr = if config.pgr.mode == PgrMode::MetricLearning {
            let embedder = crate::pgr::identity_embedder(d)?;
            let head = RewardHead::new(d, classes.len(), 0.0, &mut rng)?;
            Some(MlPgrState {
                embedder_opt: Adam::new(embedder.num_params()),
                head_opt: Adam::new(head.net.num_params()),
                embedder,
                head,
            })
        } else {
            None
        };
        let pose_axis = if config.pgr.mode == PgrMode::ParameterFree {
            synth::estimate_pose_axis(data)
        } else {
            None
        };
        log::info!(
            "model: d = {d}, {} classes, lr_policy = {lr_policy:.3e}, lr_value = {lr_value:.3e}",
            classes.len()
        );
        Ok(Self {
            config_text: config.to_toml(),
            optimizer: AgentOptimizer::new(&agent),
            average: AveragePolicy::from_params(&agent),
            pool: ReplayPool::new(config.offpolicy.capacity)?,
            config,
            classes,
            head,
            agent,
            temporal,
            pgr,
            pose_axis,
            lr_policy,
            lr_value,
            progress: Progress::default(),
            rng,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.head.embed_dim()
    }

    pub fn class_of(&self, identity: u32) -> Option<usize> {
        self.classes.binary_search(&identity).ok()
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn temporal_net(&self) -> Option<&TempConvNet> {
        self.temporal.as_ref().map(|t| &t.net)
    }

    /// Changes the total episode target, e.g. to extend a resumed run.
    pub fn set_episode_target(&mut self, episodes: u64) {
        self.config.agent.episodes = episodes;
        self.config_text = self.config.to_toml();
    }

    /// Estimates the pose axis from yaw metadata if the model has none.
    pub fn ensure_pose_axis(&mut self, data: &FeatureSetCollection) {
        if self.pose_axis.is_none() {
            self.pose_axis = synth::estimate_pose_axis(data);
        }
    }

    /// Parameter counts per component, in checkpoint order.
    pub fn parameter_counts(&self) -> Vec<(&'static str, usize)> {
        let mut out = vec![
            ("head", self.head.net.num_params()),
            ("trunk", self.agent.trunk.num_params()),
            ("policy", self.agent.policy.num_params()),
            ("value", self.agent.value.num_params()),
        ];
        if let Some(t) = &self.temporal {
            out.push(("temporal", t.net.num_params()));
        }
        if let Some(p) = &self.pgr {
            out.push(("pgr_embedder", p.embedder.num_params()));
            out.push(("pgr_head", p.head.net.num_params()));
        }
        out
    }

    pub fn config_text(&self) -> &str {
        &self.config_text
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u16(CHECKPOINT_VERSION);
        w.str(&self.config_text);
        w.u64(self.classes.len() as u64);
        for &c in &self.classes {
            w.u32(c);
        }
        self.head.net.encode(&mut w);
        w.f64(self.head.lambda);
        self.agent.encode(&mut w);
        self.optimizer.encode(&mut w);
        self.average.encode(&mut w);
        self.pool.encode(&mut w);
        match &self.temporal {
            None => w.u8(0),
            Some(t) => {
                w.u8(1);
                t.net.encode(&mut w);
                t.opt.encode(&mut w);
            }
        }
        match &self.pgr {
            None => w.u8(0),
            Some(p) => {
                w.u8(1);
                p.embedder.encode(&mut w);
                p.head.net.encode(&mut w);
                p.embedder_opt.encode(&mut w);
                p.head_opt.encode(&mut w);
            }
        }
        match &self.pose_axis {
            None => w.u8(0),
            Some(u) => {
                w.u8(1);
                w.f64s(u);
            }
        }
        w.f64(self.lr_policy);
        w.f64(self.lr_value);
        w.u8(self.progress.warmup_done as u8);
        w.u64(self.progress.episodes);
        w.u64(self.progress.temporal_steps);
        w.u64(self.progress.pgr_steps);
        w.bytes(&self.rng.get_seed());
        w.u64(self.rng.get_stream());
        w.u128(self.rng.get_word_pos());
        w.into_bytes()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format(0, "not a checkpoint (bad magic)"));
        }
        let at = r.offset();
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(at, format!("unsupported checkpoint version {version}")));
        }
        let config_text = r.str()?;
        let config = ExperimentConfig::from_toml(&config_text)?;
        let n = r.len_prefix(4)?;
        let classes = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let head = RewardHead::from_net(DenseNet::decode(&mut r)?, r.f64()?)?;
        let agent = AgentParams::decode(&mut r)?;
        let optimizer = AgentOptimizer::decode(&mut r)?;
        let average = AveragePolicy::decode(&mut r)?;
        let pool = ReplayPool::decode(&mut r)?;
        let temporal = match flag(&mut r)? {
            false => None,
            true => Some(TemporalState {
                net: TempConvNet::decode(&mut r)?,
                opt: Adam::decode(&mut r)?,
            }),
        };
        let pgr = match flag(&mut r)? {
            false => None,
            true => Some(MlPgrState {
                embedder: DenseNet::decode(&mut r)?,
                head: RewardHead::from_net(DenseNet::decode(&mut r)?, 0.0)?,
                embedder_opt: Adam::decode(&mut r)?,
                head_opt: Adam::decode(&mut r)?,
            }),
        };
        let pose_axis = match flag(&mut r)? {
            false => None,
            true => Some(r.f64s()?),
        };
        let lr_policy = r.f64()?;
        let lr_value = r.f64()?;
        let progress = Progress {
            warmup_done: flag(&mut r)?,
            episodes: r.u64()?,
            temporal_steps: r.u64()?,
            pgr_steps: r.u64()?,
        };
        let mut seed = [0u8; 32];
        seed.copy_from_slice(r.take(32)?);
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(r.u64()?);
        rng.set_word_pos(r.u128()?);
        r.expect_end()?;

        let d = head.embed_dim();
        if agent.state_dim() != 2 * d || head.num_classes() != classes.len() {
            return Err(Error::format(0, "checkpoint components disagree on dimensions"));
        }
        Ok(Self {
            config,
            config_text,
            classes,
            head,
            agent,
            optimizer,
            average,
            pool,
            temporal,
            pgr,
            pose_axis,
            lr_policy,
            lr_value,
            progress,
            rng,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.encode())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

fn flag(r: &mut Reader<'_>) -> Result<bool> {
    let at = r.offset();
    match r.u8()? {
        0 => Ok(false),
        1 => Ok(true),
        v => Err(Error::format(at, format!("bad flag byte {v}"))),
    }
}
