use std::fs::{File, OpenOptions};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{Model, PreparedSet};
use crate::agent::{a2c_update, rollout, ActionMode};
use crate::env::{mean, train_reward_head, EpisodeState};
use crate::error::{Error, Result};
use crate::offpolicy::replay_train_step;
use crate::pgr::{ml_pgr_gradient, PgrPair, PgrSet};
use crate::synth::Split;
use crate::temporal::train_temporal_adam;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Rl,
    Temporal,
    Mlpgr,
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rl" => Ok(Phase::Rl),
            "temporal" => Ok(Phase::Temporal),
            "mlpgr" => Ok(Phase::Mlpgr),
            other => Err(Error::Config(format!(
                "unknown phase {other:?} (expected rl, temporal or mlpgr)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeMetrics {
    /// 1-based index over the whole run, including resumed parts.
    pub episode: u64,
    pub reward: f64,
    pub mean_abs_td: f64,
    /// Mean KL between average and current policy over the replay steps; 0
    /// when off-policy training is disabled.
    pub mean_kl: f64,
    pub visited: usize,
    /// Head loss on the mean-pooled set minus loss on the final aggregate.
    pub loss_gain: f64,
}

/// Per-episode CSV log. Opening an existing file appends to it.
pub struct MetricsLog {
    writer: csv::Writer<File>,
}

impl MetricsLog {
    pub const HEADER: [&'static str; 4] = ["episode", "reward", "mean_abs_td", "mean_kl"];

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let fresh = file.metadata()?.len() == 0;
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if fresh {
            writer.write_record(Self::HEADER).map_err(csv_err)?;
            writer.flush()?;
        }
        Ok(Self { writer })
    }

    pub fn record(&mut self, m: &EpisodeMetrics) -> Result<()> {
        // `{}` on f64 prints the shortest string that parses back exactly
        self.writer
            .write_record([
                m.episode.to_string(),
                m.reward.to_string(),
                m.mean_abs_td.to_string(),
                m.mean_kl.to_string(),
            ])
            .map_err(csv_err)?;
        self.writer.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

pub(super) struct TrainItem {
    pub units: Vec<Vec<f64>>,
    pub label: usize,
}

impl Model {
    fn train_items(&self, data: &[PreparedSet], temporal: bool) -> Result<Vec<TrainItem>> {
        let net = if temporal { self.temporal_net() } else { None };
        let mut out = Vec::new();
        for s in data.iter().filter(|s| s.split == Split::Train) {
            let Some(label) = self.class_of(s.identity) else { continue };
            out.push(TrainItem {
                units: s.units(net)?.features,
                label,
            });
        }
        if out.is_empty() {
            return Err(Error::invalid("no training sets match the model's classes"));
        }
        Ok(out)
    }

    /// Fits the head on mean-pooled training sets. Runs once per model.
    pub fn warmup_head(&mut self, data: &[PreparedSet]) -> Result<()> {
        if self.progress.warmup_done {
            return Ok(());
        }
        let items = self.train_items(data, false)?;
        let means: Vec<(Vec<f64>, usize)> = items.iter().map(|t| (mean(&t.units), t.label)).collect();
        let hc = self.config.head.clone();
        for _ in 0..hc.warmup_steps {
            let batch: Vec<(Vec<f64>, usize)> = (0..hc.warmup_batch)
                .map(|_| means[self.rng.gen_range(0..means.len())].clone())
                .collect();
            self.head = train_reward_head(&self.head, &batch, hc.warmup_lr)?;
        }
        self.progress.warmup_done = true;
        Ok(())
    }

    /// Runs a training phase to the step count in the config, resuming from
    /// wherever a previous call stopped.
    pub fn train_phase(
        &mut self,
        phase: Phase,
        data: &[PreparedSet],
        mut on_episode: impl FnMut(&EpisodeMetrics) -> Result<()>,
    ) -> Result<()> {
        match phase {
            Phase::Rl => {
                let until = self.config.agent.episodes;
                self.train_rl(data, until, &mut on_episode)
            }
            Phase::Temporal => self.train_temporal(data, self.config.temporal.steps),
            Phase::Mlpgr => self.train_mlpgr(data, self.config.pgr.steps),
        }
    }

    /// Trains the agent until `until` episodes have been run in total.
    pub fn train_rl(
        &mut self,
        data: &[PreparedSet],
        until: u64,
        mut on_episode: impl FnMut(&EpisodeMetrics) -> Result<()>,
    ) -> Result<()> {
        if self.progress.episodes >= until {
            return Ok(());
        }
        self.warmup_head(data)?;
        let items = self.train_items(data, true)?;
        while self.progress.episodes < until {
            let m = self.run_episode(&items)?;
            on_episode(&m)?;
        }
        Ok(())
    }

    fn run_episode(&mut self, items: &[TrainItem]) -> Result<EpisodeMetrics> {
        let item = &items[self.rng.gen_range(0..items.len())];
        let state = EpisodeState::shuffled(item.units.clone(), &mut self.rng)?;
        let termination = self.config.termination.to_env();
        let ro = rollout(
            &self.agent,
            &self.head,
            state,
            item.label,
            termination,
            ActionMode::Sample,
            &mut self.rng,
        )?;
        if self.config.offpolicy.enabled {
            self.pool.push(ro.trajectory.clone());
        }
        if self.config.head.lr > 0.0 {
            let batch = [(ro.aggregate.clone(), item.label), (mean(&item.units), item.label)];
            self.head = train_reward_head(&self.head, &batch, self.config.head.lr)?;
        }
        let diag = a2c_update(
            &mut self.agent,
            &mut self.optimizer,
            &ro.trajectory,
            self.lr_policy,
            self.lr_value,
        )?;

        let mut mean_kl = 0.0;
        let off = &self.config.offpolicy;
        if off.enabled {
            let tr = off.trust_region();
            for _ in 0..off.replay_ratio {
                let d = replay_train_step(
                    &mut self.agent,
                    &mut self.optimizer,
                    &mut self.average,
                    &self.pool,
                    &tr,
                    off.batch,
                    self.lr_policy,
                    self.lr_value,
                    &mut self.rng,
                )?;
                mean_kl += d.mean_kl / off.replay_ratio as f64;
            }
        }
        self.progress.episodes += 1;
        let m = EpisodeMetrics {
            episode: self.progress.episodes,
            reward: ro.trajectory.total_reward(),
            mean_abs_td: diag.mean_abs_td,
            mean_kl,
            visited: ro.visited,
            loss_gain: ro.initial_loss - ro.final_loss,
        };
        log::debug!("episode {}: reward {:.4}", m.episode, m.reward);
        Ok(m)
    }

    /// Supervised training of the temporal attention net with the head held
    /// fixed.
    pub fn train_temporal(&mut self, data: &[PreparedSet], until: u64) -> Result<()> {
        if self.temporal.is_none() {
            return Err(Error::Config("temporal phase requested but temporal.enabled is false".into()));
        }
        self.warmup_head(data)?;
        let mut segments: Vec<(Vec<Vec<f64>>, usize)> = Vec::new();
        for s in data.iter().filter(|s| s.split == Split::Train) {
            let Some(label) = self.class_of(s.identity) else { continue };
            for frames in s.partition.segment_frames(&s.features) {
                segments.push((frames, label));
            }
        }
        if segments.is_empty() {
            return Err(Error::invalid("no video segments among the training sets"));
        }
        let (batch_size, lr) = (self.config.temporal.batch, self.config.temporal.lr);
        while self.progress.temporal_steps < until {
            let batch: Vec<_> = segments.choose_multiple(&mut self.rng, batch_size).cloned().collect();
            let t = self.temporal.as_mut().expect("checked above");
            let loss = train_temporal_adam(&mut t.net, &mut t.opt, &self.head, &batch, lr)?;
            self.progress.temporal_steps += 1;
            log::debug!("temporal step {}: loss {loss:.4}", self.progress.temporal_steps);
        }
        Ok(())
    }

    /// Trains the metric-learning pose embedder on random same/different
    /// identity pairs of training sets.
    pub fn train_mlpgr(&mut self, data: &[PreparedSet], until: u64) -> Result<()> {
        if self.pgr.is_none() {
            return Err(Error::Config("mlpgr phase requested but pgr.mode is not metric-learning".into()));
        }
        let sets: Vec<PgrSet> = data
            .iter()
            .filter(|s| s.split == Split::Train)
            .filter_map(|s| {
                self.class_of(s.identity).map(|label| PgrSet {
                    features: s.features.clone(),
                    yaws: s.yaws.clone(),
                    label,
                })
            })
            .collect();
        if sets.len() < 2 {
            return Err(Error::invalid("metric learning needs at least two training sets"));
        }
        let th = self.config.pgr.thresholds();
        let rule = self.config.pgr.missing_group;
        let (batch_size, lr) = (self.config.pgr.batch, self.config.pgr.lr);
        while self.progress.pgr_steps < until {
            let batch: Vec<PgrPair> = (0..batch_size).map(|_| self.draw_pair(&sets)).collect();
            let state = self.pgr.as_mut().expect("checked above");
            let (loss, mut ge, mut gh) =
                ml_pgr_gradient(&state.embedder, &state.head, &batch, &th, rule)?;
            ge.scale(-1.0);
            gh.scale(-1.0);
            state.embedder_opt.ascend_net(&mut state.embedder, &ge, lr);
            state.head_opt.ascend_net(&mut state.head.net, &gh, lr);
            self.progress.pgr_steps += 1;
            log::debug!("mlpgr step {}: loss {loss:.4}", self.progress.pgr_steps);
        }
        Ok(())
    }

    fn draw_pair(&mut self, sets: &[PgrSet]) -> PgrPair {
        let i = self.rng.gen_range(0..sets.len());
        let want_same = self.rng.gen_bool(0.5);
        let candidates: Vec<usize> = (0..sets.len())
            .filter(|&j| j != i && (sets[j].label == sets[i].label) == want_same)
            .collect();
        let j = match candidates.choose(&mut self.rng) {
            Some(&j) => j,
            None => (i + 1) % sets.len(),
        };
        PgrPair {
            probe: sets[i].clone(),
            gallery: sets[j].clone(),
        }
    }
}
