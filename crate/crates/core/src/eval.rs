//! Verification and identification metrics.
//!
//! Scores are similarities: higher means more alike, and a pair is accepted
//! when its score is at least the threshold. Rankings sort by descending
//! score and break ties by gallery index.

use std::io::Write;

use serde::Serialize;

use crate::env::RewardHead;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScoredPair {
    pub score: f64,
    pub genuine: bool,
}

fn split_scores(pairs: &[ScoredPair]) -> Result<(Vec<f64>, Vec<f64>)> {
    if let Some(p) = pairs.iter().find(|p| !p.score.is_finite()) {
        return Err(Error::invalid(format!("non-finite score {}", p.score)));
    }
    let mut gen: Vec<f64> = pairs.iter().filter(|p| p.genuine).map(|p| p.score).collect();
    let mut imp: Vec<f64> = pairs.iter().filter(|p| !p.genuine).map(|p| p.score).collect();
    if gen.is_empty() || imp.is_empty() {
        return Err(Error::invalid("need at least one genuine and one impostor pair"));
    }
    gen.sort_by(f64::total_cmp);
    imp.sort_by(f64::total_cmp);
    Ok((gen, imp))
}

/// Fraction of a sorted slice that is `>= t`.
fn frac_at_least(sorted: &[f64], t: f64) -> f64 {
    let below = sorted.partition_point(|&s| s < t);
    (sorted.len() - below) as f64 / sorted.len() as f64
}

/// Smallest candidate threshold (any observed score, or +∞) whose impostor
/// acceptance is at most `rate`.
fn threshold_for(impostor_sorted: &[f64], candidates: &[f64], rate: f64) -> f64 {
    candidates
        .iter()
        .copied()
        .find(|&t| frac_at_least(impostor_sorted, t) <= rate)
        .unwrap_or(f64::INFINITY)
}

fn candidates(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut c: Vec<f64> = a.iter().chain(b).copied().collect();
    c.sort_by(f64::total_cmp);
    c.dedup();
    c
}

/// True-accept rate at the smallest threshold whose false-accept rate is at most `far`.
pub fn tar_at_far(pairs: &[ScoredPair], far: f64) -> Result<f64> {
    if !(far > 0.0 && far < 1.0) {
        return Err(Error::invalid(format!("far = {far} outside (0, 1)")));
    }
    let (gen, imp) = split_scores(pairs)?;
    let t = threshold_for(&imp, &candidates(&gen, &imp), far);
    Ok(frac_at_least(&gen, t))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub far: f64,
    pub tar: f64,
}

/// One point per distinct score, ascending in threshold.
pub fn roc_curve(pairs: &[ScoredPair]) -> Result<Vec<RocPoint>> {
    let (gen, imp) = split_scores(pairs)?;
    Ok(candidates(&gen, &imp)
        .into_iter()
        .map(|t| RocPoint {
            threshold: t,
            far: frac_at_least(&imp, t),
            tar: frac_at_least(&gen, t),
        })
        .collect())
}

/// Probe-by-gallery similarity table.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentificationRun {
    /// Identity of each gallery entry.
    pub gallery: Vec<u32>,
    pub probes: Vec<ProbeScores>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeScores {
    pub identity: u32,
    /// One score per gallery entry.
    pub scores: Vec<f64>,
}

impl IdentificationRun {
    pub fn new(gallery: Vec<u32>, probes: Vec<ProbeScores>) -> Result<Self> {
        if gallery.is_empty() {
            return Err(Error::invalid("empty gallery"));
        }
        for p in &probes {
            if p.scores.len() != gallery.len() {
                return Err(Error::dim("probe scores", gallery.len(), p.scores.len()));
            }
            if p.scores.iter().any(|s| !s.is_finite()) {
                return Err(Error::invalid("non-finite identification score"));
            }
        }
        Ok(Self { gallery, probes })
    }

    pub fn is_mated(&self, p: &ProbeScores) -> bool {
        self.gallery.contains(&p.identity)
    }

    pub fn is_open_set(&self) -> bool {
        self.probes.iter().any(|p| !self.is_mated(p))
    }

    /// Gallery indices by descending score, ties by index.
    pub fn ranking(&self, p: &ProbeScores) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.gallery.len()).collect();
        idx.sort_by(|&a, &b| p.scores[b].total_cmp(&p.scores[a]).then(a.cmp(&b)));
        idx
    }

    /// Position (0-based) of the first gallery entry with the probe's identity.
    pub fn mate_rank(&self, p: &ProbeScores) -> Option<usize> {
        self.ranking(p)
            .iter()
            .position(|&g| self.gallery[g] == p.identity)
    }
}

/// Fraction of mated probes whose identity appears in the top `k`.
pub fn cmc(run: &IdentificationRun, k: usize) -> Result<f64> {
    if k < 1 || k > run.gallery.len() {
        return Err(Error::invalid(format!(
            "rank {k} outside 1..={}",
            run.gallery.len()
        )));
    }
    let mated: Vec<&ProbeScores> = run.probes.iter().filter(|p| run.is_mated(p)).collect();
    if mated.is_empty() {
        return Err(Error::invalid("no mated probes"));
    }
    let hits = mated
        .iter()
        .filter(|p| run.mate_rank(p).is_some_and(|r| r < k))
        .count();
    Ok(hits as f64 / mated.len() as f64)
}

pub fn cmc_curve(run: &IdentificationRun, ks: &[usize]) -> Result<Vec<(usize, f64)>> {
    ks.iter().map(|&k| Ok((k, cmc(run, k)?))).collect()
}

fn top1(run: &IdentificationRun, p: &ProbeScores) -> (usize, f64) {
    let g = run.ranking(p)[0];
    (g, p.scores[g])
}

/// Open-set rate of mated probes whose top match is correct and scores at
/// least the threshold where the fraction of non-mated probes with a top
/// score at or above it is at most `fpir`.
pub fn tpir_at_fpir(run: &IdentificationRun, fpir: f64) -> Result<f64> {
    if !(fpir > 0.0 && fpir < 1.0) {
        return Err(Error::invalid(format!("fpir = {fpir} outside (0, 1)")));
    }
    let mut imp: Vec<f64> = Vec::new();
    let mut mated: Vec<(bool, f64)> = Vec::new();
    for p in &run.probes {
        let (g, s) = top1(run, p);
        if run.is_mated(p) {
            mated.push((run.gallery[g] == p.identity, s));
        } else {
            imp.push(s);
        }
    }
    if imp.is_empty() || mated.is_empty() {
        return Err(Error::invalid("open-set rates need mated and non-mated probes"));
    }
    imp.sort_by(f64::total_cmp);
    let all: Vec<f64> = mated.iter().map(|m| m.1).collect();
    let t = threshold_for(&imp, &candidates(&all, &imp), fpir);
    let hits = mated.iter().filter(|(ok, s)| *ok && *s >= t).count();
    Ok(hits as f64 / mated.len() as f64)
}

/// Fraction of aggregates whose arg-max logit is the label (first maximum wins).
pub fn closed_set_accuracy(head: &RewardHead, aggregated: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if aggregated.len() != labels.len() {
        return Err(Error::dim("labels", aggregated.len(), labels.len()));
    }
    if aggregated.is_empty() {
        return Err(Error::invalid("no probes"));
    }
    let mut hits = 0;
    for (x, &y) in aggregated.iter().zip(labels) {
        let logits = head.logits(x)?;
        if y >= logits.len() {
            return Err(Error::invalid(format!("label {y} outside {} classes", logits.len())));
        }
        if argmax(&logits) == y {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightTraceRow {
    pub set_id: u64,
    pub item: usize,
    /// Source item of a near-duplicate, empty otherwise.
    pub duplicate_of: Option<u32>,
    pub quality_sigma: f32,
    pub weight: f64,
}

pub fn write_weight_traces<W: Write>(rows: &[WeightTraceRow], out: W) -> Result<()> {
    write_csv(rows, out)
}

pub fn write_roc<W: Write>(points: &[RocPoint], out: W) -> Result<()> {
    write_csv(points, out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CmcPoint {
    pub k: usize,
    pub cmc: f64,
}

pub fn write_cmc<W: Write>(points: &[(usize, f64)], out: W) -> Result<()> {
    let rows: Vec<CmcPoint> = points.iter().map(|&(k, cmc)| CmcPoint { k, cmc }).collect();
    write_csv(&rows, out)
}

pub fn write_csv<T: Serialize, W: Write>(rows: &[T], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::invalid(format!("csv: {other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, DenseNet};

    fn pairs(gen: &[f64], imp: &[f64]) -> Vec<ScoredPair> {
        gen.iter()
            .map(|&s| ScoredPair { score: s, genuine: true })
            .chain(imp.iter().map(|&s| ScoredPair { score: s, genuine: false }))
            .collect()
    }

    #[test]
    fn separable_scores() {
        let p = pairs(&[0.9, 0.8, 0.95], &[0.1, 0.2, 0.3]);
        for far in [0.001, 0.01, 0.5] {
            assert_eq!(tar_at_far(&p, far).unwrap(), 1.0);
        }
    }

    #[test]
    fn identical_distributions_track_far() {
        let s: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        let p = pairs(&s, &s);
        for far in [0.01, 0.1, 0.5] {
            assert!((tar_at_far(&p, far).unwrap() - far).abs() < 1e-3);
        }
    }

    #[test]
    fn six_pair_sweep() {
        let p = pairs(&[0.9, 0.6, 0.4], &[0.7, 0.5, 0.2]);
        // brute force over every candidate threshold
        let mut best: Option<(f64, f64)> = None;
        for t in [0.2, 0.4, 0.5, 0.6, 0.7, 0.9, f64::INFINITY] {
            let far = p.iter().filter(|q| !q.genuine && q.score >= t).count() as f64 / 3.0;
            if far <= 1.0 / 3.0 && best.is_none_or(|(bt, _)| t < bt) {
                let tar = p.iter().filter(|q| q.genuine && q.score >= t).count() as f64 / 3.0;
                best = Some((t, tar));
            }
        }
        assert_eq!(tar_at_far(&p, 1.0 / 3.0).unwrap(), best.unwrap().1);
        assert!((best.unwrap().1 - 2.0 / 3.0).abs() < 1e-15);
        assert!(tar_at_far(&pairs(&[1.0], &[]), 0.1).is_err());
    }

    #[test]
    fn cmc_examples() {
        let run = IdentificationRun::new(vec![7], vec![ProbeScores { identity: 7, scores: vec![0.3] }]).unwrap();
        assert_eq!(cmc(&run, 1).unwrap(), 1.0);
        assert!(cmc(&run, 2).is_err());
        assert!(cmc(&run, 0).is_err());

        let gallery = vec![0, 1, 2, 3, 4];
        let probes = (0..5)
            .map(|i| {
                let mut scores = vec![0.0; 5];
                scores[(i + 1) % 5] = 1.0;
                scores[i] = 0.5;
                ProbeScores { identity: i as u32, scores }
            })
            .collect();
        let run = IdentificationRun::new(gallery, probes).unwrap();
        assert_eq!(cmc(&run, 1).unwrap(), 0.0);
        assert_eq!(cmc(&run, 2).unwrap(), 1.0);
    }

    #[test]
    fn ties_break_by_gallery_index() {
        let run = IdentificationRun::new(vec![3, 5], vec![ProbeScores { identity: 5, scores: vec![1.0, 1.0] }]).unwrap();
        assert_eq!(run.ranking(&run.probes[0]), vec![0, 1]);
        assert_eq!(cmc(&run, 1).unwrap(), 0.0);
    }

    #[test]
    fn open_set_rate() {
        // two mated probes (one correct at 0.9, one wrong at 0.8) and two impostors
        let run = IdentificationRun::new(
            vec![0, 1],
            vec![
                ProbeScores { identity: 0, scores: vec![0.9, 0.1] },
                ProbeScores { identity: 1, scores: vec![0.8, 0.2] },
                ProbeScores { identity: 9, scores: vec![0.5, 0.3] },
                ProbeScores { identity: 8, scores: vec![0.2, 0.95] },
            ],
        )
        .unwrap();
        assert!(run.is_open_set());
        // fpir 0.5: threshold 0.8 lets one impostor (0.95) through
        assert_eq!(tpir_at_fpir(&run, 0.5).unwrap(), 0.5);
        // fpir 0.4: no impostor may pass, threshold above 0.95
        assert_eq!(tpir_at_fpir(&run, 0.4).unwrap(), 0.0);
    }

    #[test]
    fn accuracy_examples() {
        let mut net = DenseNet::zeros(&[3, 3], &[Activation::Identity]).unwrap();
        for i in 0..3 {
            net.layers_mut()[0].weights[i * 3 + i] = 1.0;
        }
        let head = RewardHead::from_net(net, 0.1).unwrap();
        let x = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        assert_eq!(closed_set_accuracy(&head, &x, &[0, 1, 2]).unwrap(), 1.0);
        assert!(closed_set_accuracy(&head, &x, &[0, 1, 3]).is_err());
    }

    #[test]
    fn csv_output() {
        let rows = vec![WeightTraceRow {
            set_id: 3,
            item: 1,
            duplicate_of: None,
            quality_sigma: 0.5,
            weight: 0.25,
        }];
        let mut buf = Vec::new();
        write_weight_traces(&rows, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "set_id,item,duplicate_of,quality_sigma,weight\n3,1,,0.5,0.25\n"
        );
    }
}
