use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::{Baseline, Model, PgrMode, PreparedSet, Protocol, TerminationConfig, Units};
use crate::agent::{assign_weights, ActionMode};
use crate::env::{aggregate_floored, max_pool, mean, EpisodeState};
use crate::error::{Error, Result};
use crate::eval::{
    closed_set_accuracy, cmc_curve, roc_curve, tar_at_far, tpir_at_fpir, write_cmc, write_roc,
    write_weight_traces, IdentificationRun, ProbeScores, RocPoint, ScoredPair, WeightTraceRow,
};
use crate::pgr::{
    ml_pgr_distance, pf_pgr_distance, pose_split, probe_centroids_by_assignment, CentroidTriple,
    PoseRepresentation,
};
use crate::synth::Split;

const OPEN_SET_SALT: u64 = 0x006f_7065_6e5f_6964;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub protocol: Protocol,
    pub baseline: Baseline,
    pub pgr: PgrMode,
    /// Softmax early stopping threshold; only honored for closed-set runs.
    pub early_stop: Option<f64>,
}

impl EvalOptions {
    pub fn from_model(model: &Model) -> Self {
        let c = &model.config;
        Self {
            protocol: c.eval.protocol,
            baseline: c.eval.baseline,
            pgr: c.pgr.mode,
            early_stop: match c.termination {
                TerminationConfig::Softmax { threshold } => Some(threshold),
                TerminationConfig::FullTraversal => None,
            },
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub baseline: Baseline,
    pub pgr: PgrMode,
    pub probes: usize,
    pub gallery: usize,
    pub metrics: BTreeMap<String, f64>,
    #[serde(skip)]
    pub roc: Vec<RocPoint>,
    #[serde(skip)]
    pub cmc: Vec<(usize, f64)>,
    #[serde(skip)]
    pub weights: Vec<WeightTraceRow>,
}

impl EvalReport {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Writes `summary.json`, `weights.csv`, and `roc.csv` or `cmc.csv`
    /// depending on the protocol.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("summary.json"), self.summary_json() + "\n")?;
        write_weight_traces(&self.weights, BufWriter::new(File::create(dir.join("weights.csv"))?))?;
        if !self.roc.is_empty() {
            write_roc(&self.roc, BufWriter::new(File::create(dir.join("roc.csv"))?))?;
        }
        if !self.cmc.is_empty() {
            write_cmc(&self.cmc, BufWriter::new(File::create(dir.join("cmc.csv"))?))?;
        }
        Ok(())
    }
}

struct Rep {
    set_id: u64,
    identity: u32,
    units: Units,
    weights: Vec<f64>,
    aggregate: Vec<f64>,
    visited: usize,
    pose: Option<PoseRepresentation>,
    embedded: Option<(Vec<Vec<f64>>, Vec<f64>)>,
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("SETPOOL_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("SETPOOL_THREADS = {v:?} is not a count")))?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::Config(e.to_string()))
}

fn represent(model: &Model, set: &PreparedSet, opts: &EvalOptions) -> Result<Rep> {
    let units = set.units(model.temporal_net())?;
    let n = units.features.len();
    let (weights, visited, aggregate) = match opts.baseline {
        Baseline::Meanpool => (vec![1.0; n], n, mean(&units.features)),
        Baseline::Maxpool => (vec![1.0; n], n, max_pool(&units.features)),
        Baseline::Dac | Baseline::DacBinary => {
            let mode = if opts.baseline == Baseline::Dac {
                ActionMode::Mode
            } else {
                ActionMode::Binary
            };
            let early = match (opts.protocol, opts.early_stop) {
                (Protocol::ClosedId, Some(th)) => Some((&model.head, th)),
                _ => None,
            };
            let state = EpisodeState::in_order(units.features.clone())?;
            // the mode is deterministic, so the generator is never drawn from
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let (w, visited) = assign_weights(&model.agent, state, mode, early, &mut rng)?;
            let agg = aggregate_floored(&units.features, &w)?;
            (w, visited, agg)
        }
    };
    let pose = match opts.pgr {
        PgrMode::ParameterFree => Some(pose_split(
            &units.features,
            &units.yaws,
            &weights,
            model.pose_axis.as_deref(),
        )?),
        _ => None,
    };
    let embedded = match (opts.pgr, &model.pgr) {
        (PgrMode::MetricLearning, Some(p)) => {
            let e = crate::pgr::embed_all(&p.embedder, &units.features)?;
            let agg = aggregate_floored(&e, &weights)?;
            Some((e, agg))
        }
        (PgrMode::MetricLearning, None) => {
            return Err(Error::Config("metric-learning scoring needs a trained embedder".into()))
        }
        _ => None,
    };
    Ok(Rep {
        set_id: set.set_id,
        identity: set.identity,
        units,
        weights,
        aggregate,
        visited,
        pose,
        embedded,
    })
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Larger is more similar.
fn score(p: &Rep, g: &Rep, mode: PgrMode) -> Result<f64> {
    Ok(match mode {
        PgrMode::None => cosine(&p.aggregate, &g.aggregate),
        PgrMode::ParameterFree => {
            -pf_pgr_distance(p.pose.as_ref().expect("built"), g.pose.as_ref().expect("built"))
        }
        PgrMode::MetricLearning => {
            let (pe, pa) = p.embedded.as_ref().expect("built");
            let (ge, ga) = g.embedded.as_ref().expect("built");
            let gt = CentroidTriple::from_yaws(ge, &g.units.yaws, &g.weights)?;
            let pt = probe_centroids_by_assignment(pe, &p.weights, &gt)?;
            -ml_pgr_distance(&pt, &gt, pa, ga)
        }
    })
}

/// Scores the probe split against the gallery split under one protocol.
pub fn evaluate(model: &Model, data: &[PreparedSet], opts: &EvalOptions) -> Result<EvalReport> {
    let probes_in: Vec<&PreparedSet> = data.iter().filter(|s| s.split == Split::Probe).collect();
    let mut gallery_in: Vec<&PreparedSet> = data.iter().filter(|s| s.split == Split::Gallery).collect();
    if probes_in.is_empty() || gallery_in.is_empty() {
        return Err(Error::invalid("evaluation needs probe and gallery sets"));
    }
    if opts.protocol == Protocol::OpenId {
        let mut ids: Vec<u32> = probes_in.iter().map(|s| s.identity).collect();
        ids.sort_unstable();
        ids.dedup();
        let frac = model.config.eval.open_set_fraction;
        let k = ((ids.len() as f64 * frac).round() as usize).clamp(1, ids.len());
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(model.config.seed ^ OPEN_SET_SALT));
        let withheld = &ids[..k];
        gallery_in.retain(|s| !withheld.contains(&s.identity));
        log::info!("open set: {k} of {} probe identities withheld from the gallery", ids.len());
        if gallery_in.is_empty() {
            return Err(Error::invalid("open-set split left the gallery empty"));
        }
    }

    let pool = thread_pool()?;
    let (probes, gallery, matrix) = pool.install(|| -> Result<_> {
        let probes: Vec<Rep> = probes_in
            .par_iter()
            .map(|s| represent(model, s, opts))
            .collect::<Result<_>>()?;
        let gallery: Vec<Rep> = gallery_in
            .par_iter()
            .map(|s| represent(model, s, opts))
            .collect::<Result<_>>()?;
        let matrix: Vec<Vec<f64>> = probes
            .par_iter()
            .map(|p| gallery.iter().map(|g| score(p, g, opts.pgr)).collect::<Result<Vec<_>>>())
            .collect::<Result<_>>()?;
        Ok((probes, gallery, matrix))
    })?;

    let mut metrics = BTreeMap::new();
    let mut roc = Vec::new();
    let mut cmc = Vec::new();
    let ev = &model.config.eval;
    match opts.protocol {
        Protocol::Verify => {
            let pairs: Vec<ScoredPair> = probes
                .iter()
                .zip(&matrix)
                .flat_map(|(p, row)| {
                    gallery.iter().zip(row).map(move |(g, &score)| ScoredPair {
                        score,
                        genuine: p.identity == g.identity,
                    })
                })
                .collect();
            for &far in &ev.far {
                metrics.insert(format!("tar@far={far}"), tar_at_far(&pairs, far)?);
            }
            roc = roc_curve(&pairs)?;
        }
        Protocol::ClosedId | Protocol::OpenId => {
            let run = IdentificationRun::new(
                gallery.iter().map(|g| g.identity).collect(),
                probes
                    .iter()
                    .zip(matrix)
                    .map(|(p, scores)| ProbeScores {
                        identity: p.identity,
                        scores,
                    })
                    .collect(),
            )?;
            let mut ks: Vec<usize> = ev.ranks.iter().copied().filter(|&k| k <= gallery.len()).collect();
            if !ks.contains(&1) {
                ks.insert(0, 1);
            }
            cmc = cmc_curve(&run, &ks)?;
            for &(k, v) in &cmc {
                metrics.insert(format!("cmc@{k}"), v);
            }
            if opts.protocol == Protocol::OpenId {
                for &fpir in &ev.fpir {
                    metrics.insert(format!("tpir@fpir={fpir}"), tpir_at_fpir(&run, fpir)?);
                }
            } else {
                let (aggs, labels): (Vec<Vec<f64>>, Vec<usize>) = probes
                    .iter()
                    .filter_map(|p| model.class_of(p.identity).map(|c| (p.aggregate.clone(), c)))
                    .unzip();
                if !labels.is_empty() {
                    metrics.insert(
                        "softmax_accuracy".into(),
                        closed_set_accuracy(&model.head, &aggs, &labels)?,
                    );
                }
            }
        }
    }
    let all: Vec<&Rep> = probes.iter().chain(&gallery).collect();
    let n = all.len() as f64;
    metrics.insert("mean_visited".into(), all.iter().map(|r| r.visited as f64).sum::<f64>() / n);
    metrics.insert(
        "mean_units".into(),
        all.iter().map(|r| r.units.features.len() as f64).sum::<f64>() / n,
    );

    let by_id: BTreeMap<u64, &PreparedSet> = data.iter().map(|s| (s.set_id, s)).collect();
    let mut weights = Vec::new();
    for r in &all {
        let set = by_id[&r.set_id];
        let mut rows: Vec<WeightTraceRow> = r
            .units
            .members
            .iter()
            .zip(&r.weights)
            .flat_map(|(members, &w)| {
                members.iter().map(move |&(item, share)| WeightTraceRow {
                    set_id: r.set_id,
                    item,
                    duplicate_of: set.duplicate_of[item],
                    quality_sigma: set.quality[item],
                    weight: w * share,
                })
            })
            .collect();
        rows.sort_by_key(|row| row.item);
        weights.extend(rows);
    }

    Ok(EvalReport {
        protocol: opts.protocol,
        baseline: opts.baseline,
        pgr: opts.pgr,
        probes: probes.len(),
        gallery: gallery.len(),
        metrics,
        roc,
        cmc,
        weights,
    })
}
