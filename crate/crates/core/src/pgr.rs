//! Pose-guided set representations.
//!
//! The parameter-free variant splits a set into near-frontal (|yaw| ≤ 30°)
//! and profile items, mirrors left profiles onto the right side, and compares
//! two sets with a five-term distance. The metric-learning variant trains a
//! projection so that frontal, left and right centroids of a set separate,
//! then compares sets by their closest pair of corresponding centroids.

use serde::{Deserialize, Serialize};

use crate::env::{aggregate_floored, mean, RewardHead};
use crate::error::{Error, Result};
use crate::nn::{axpy, cross_entropy, cross_entropy_grad, Activation, DenseNet, Gradients, Layer};
use crate::synth::FRONTAL_LIMIT_DEG;

pub fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Reflects `f` across the hyperplane orthogonal to the unit vector `u`.
pub fn mirror(f: &[f64], u: &[f64]) -> Vec<f64> {
    let along: f64 = f.iter().zip(u).map(|(a, b)| a * b).sum();
    f.iter().zip(u).map(|(a, b)| a - 2.0 * along * b).collect()
}

pub fn is_frontal(yaw: f64) -> bool {
    yaw.abs() <= FRONTAL_LIMIT_DEG
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseRepresentation {
    /// Aggregate of the whole set.
    pub f0: Vec<f64>,
    pub f1: Vec<f64>,
    pub f2: Vec<f64>,
    /// Shares of the set's total weight in the frontal and profile groups.
    pub p1: f64,
    pub p2: f64,
}

/// Splits a weighted set into frontal and profile aggregates. Left profiles
/// are mirrored along `pose_axis` before joining the profile group; without
/// an axis they join unmirrored. Aggregates are scaled to unit length and an
/// empty or zero-mass group aggregates to the zero vector. Group masses are
/// taken relative to the whole set, so `p1 + p2 = 1` for any positive weights.
pub fn pose_split(
    features: &[Vec<f64>],
    yaws: &[f64],
    weights: &[f64],
    pose_axis: Option<&[f64]>,
) -> Result<PoseRepresentation> {
    if yaws.len() != features.len() {
        return Err(Error::dim("yaws", features.len(), yaws.len()));
    }
    let f0 = unit(aggregate_floored(features, weights)?);
    let d = f0.len();
    if let Some(u) = pose_axis {
        if u.len() != d {
            return Err(Error::dim("pose axis", d, u.len()));
        }
    }
    let (mut s1, mut s2) = (vec![0.0; d], vec![0.0; d]);
    let (mut p1, mut p2) = (0.0, 0.0);
    for ((f, &yaw), &w) in features.iter().zip(yaws).zip(weights) {
        if is_frontal(yaw) {
            p1 += w;
            axpy(&mut s1, f, w);
        } else {
            p2 += w;
            match pose_axis {
                Some(u) if yaw < 0.0 => axpy(&mut s2, &mirror(f, u), w),
                _ => axpy(&mut s2, f, w),
            }
        }
    }
    let finish = |s: Vec<f64>, p: f64| if p > 0.0 { unit(s) } else { vec![0.0; d] };
    let total = p1 + p2;
    let (q1, q2) = if total > 0.0 { (p1 / total, p2 / total) } else { (0.0, 0.0) };
    Ok(PoseRepresentation {
        f0,
        f1: finish(s1, p1),
        f2: finish(s2, p2),
        p1: q1,
        p2: q2,
    })
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// `S(F¹_0, F²_0) + Σ_i Σ_j S(F¹_i, F²_j) p¹_i p²_j` with `S` the L2 distance.
pub fn pf_pgr_distance(a: &PoseRepresentation, b: &PoseRepresentation) -> f64 {
    pf_pgr_distance_counted(a, b, &mut 0)
}

/// [`pf_pgr_distance`] that adds the number of distance evaluations to `evals`.
pub fn pf_pgr_distance_counted(a: &PoseRepresentation, b: &PoseRepresentation, evals: &mut usize) -> f64 {
    let mut s = |x: &[f64], y: &[f64]| {
        *evals += 1;
        l2(x, y)
    };
    let ga = [(&a.f1, a.p1), (&a.f2, a.p2)];
    let gb = [(&b.f1, b.p1), (&b.f2, b.p2)];
    let mut d = s(&a.f0, &b.f0);
    for (fa, pa) in ga {
        for (fb, pb) in gb {
            d += s(fa, fb) * pa * pb;
        }
    }
    d
}

pub const FRONTAL: usize = 0;
pub const LEFT: usize = 1;
pub const RIGHT: usize = 2;

/// Group of an item from its yaw: frontal, left (< −30°) or right (> 30°).
pub fn pose_group(yaw: f64) -> usize {
    if is_frontal(yaw) {
        FRONTAL
    } else if yaw < 0.0 {
        LEFT
    } else {
        RIGHT
    }
}

/// Frontal, left and right centroids; `None` marks an absent group.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CentroidTriple {
    pub c: [Option<Vec<f64>>; 3],
}

impl CentroidTriple {
    /// Weighted centroids of the items in each group.
    pub fn from_groups(features: &[Vec<f64>], groups: &[usize], weights: &[f64]) -> Result<Self> {
        if groups.len() != features.len() || weights.len() != features.len() {
            return Err(Error::dim("groups", features.len(), groups.len().min(weights.len())));
        }
        let mut out = Self::default();
        for g in 0..3 {
            let idx: Vec<usize> = (0..features.len()).filter(|&i| groups[i] == g).collect();
            if idx.is_empty() {
                continue;
            }
            let f: Vec<Vec<f64>> = idx.iter().map(|&i| features[i].clone()).collect();
            let w: Vec<f64> = idx.iter().map(|&i| weights[i]).collect();
            out.c[g] = Some(aggregate_floored(&f, &w)?);
        }
        Ok(out)
    }

    pub fn from_yaws(features: &[Vec<f64>], yaws: &[f64], weights: &[f64]) -> Result<Self> {
        let groups: Vec<usize> = yaws.iter().map(|&y| pose_group(y)).collect();
        Self::from_groups(features, &groups, weights)
    }

    pub fn present(&self) -> impl Iterator<Item = (usize, &Vec<f64>)> {
        self.c.iter().enumerate().filter_map(|(i, c)| c.as_ref().map(|v| (i, v)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlPgrThresholds {
    /// Margin between pose groups of one set.
    pub beta: f64,
    /// Margin between corresponding centroids of different identities.
    pub phi: f64,
}

impl Default for MlPgrThresholds {
    fn default() -> Self {
        Self { beta: 1.0, phi: 5.0 }
    }
}

impl MlPgrThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.phi > 0.0 && self.beta.is_finite() && self.phi.is_finite()) {
            return Err(Error::Config(format!(
                "pgr margins ({}, {}) must be positive",
                self.beta, self.phi
            )));
        }
        Ok(())
    }
}

/// How terms that involve an absent pose group enter the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MissingGroupRule {
    /// Leave them out of the sum.
    #[default]
    Drop,
    /// Evaluate them with the distance set to zero.
    Literal,
}

const PAIRS: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

/// Loss value and its gradient with respect to each present centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct MlPgrLoss {
    pub value: f64,
    pub probe_grad: [Option<Vec<f64>>; 3],
    pub gallery_grad: [Option<Vec<f64>>; 3],
}

fn zero_like(t: &CentroidTriple) -> [Option<Vec<f64>>; 3] {
    [0, 1, 2].map(|g| t.c[g].as_ref().map(|v| vec![0.0; v.len()]))
}

/// `max(margin − ‖a − b‖, 0)²`, adding its gradients to `ga` and `gb`.
fn hinge(a: &[f64], b: &[f64], margin: f64, ga: &mut [f64], gb: &mut [f64]) -> f64 {
    let d = l2(a, b);
    let slack = (margin - d).max(0.0);
    if slack > 0.0 && d > 0.0 {
        let c = -2.0 * slack / d;
        for i in 0..a.len() {
            ga[i] += c * (a[i] - b[i]);
            gb[i] -= c * (a[i] - b[i]);
        }
    }
    slack * slack
}

fn intra(t: &CentroidTriple, beta: f64, rule: MissingGroupRule, grad: &mut [Option<Vec<f64>>; 3]) -> f64 {
    let mut total = 0.0;
    for (i, j) in PAIRS {
        match (&t.c[i], &t.c[j]) {
            (Some(a), Some(b)) => {
                let mut ga = vec![0.0; a.len()];
                let mut gb = vec![0.0; b.len()];
                total += hinge(a, b, beta, &mut ga, &mut gb);
                axpy(grad[i].as_mut().unwrap(), &ga, 1.0);
                axpy(grad[j].as_mut().unwrap(), &gb, 1.0);
            }
            _ if rule == MissingGroupRule::Literal => total += beta * beta,
            _ => {}
        }
    }
    total
}

/// `Σ max(β − D_i, 0)² + Σ max(β − D′_i, 0)² + Σ {(1 − l) d_i² + l max(φ − d_i, 0)²}`
/// with `l = 0` for a genuine pair.
pub fn ml_pgr_loss(
    probe: &CentroidTriple,
    gallery: &CentroidTriple,
    same_identity: bool,
    th: &MlPgrThresholds,
    rule: MissingGroupRule,
) -> Result<MlPgrLoss> {
    let dims: Vec<usize> = probe
        .present()
        .chain(gallery.present())
        .map(|(_, c)| c.len())
        .collect();
    if dims.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::invalid("centroid dimensions differ"));
    }
    let mut pg = zero_like(probe);
    let mut gg = zero_like(gallery);
    let mut value = intra(probe, th.beta, rule, &mut pg) + intra(gallery, th.beta, rule, &mut gg);
    for g in 0..3 {
        match (&probe.c[g], &gallery.c[g]) {
            (Some(a), Some(b)) => {
                let (ga, gb) = (pg[g].as_mut().unwrap(), gg[g].as_mut().unwrap());
                if same_identity {
                    for i in 0..a.len() {
                        let diff = a[i] - b[i];
                        value += diff * diff;
                        ga[i] += 2.0 * diff;
                        gb[i] -= 2.0 * diff;
                    }
                } else {
                    value += hinge(a, b, th.phi, ga, gb);
                }
            }
            _ if rule == MissingGroupRule::Literal && !same_identity => value += th.phi * th.phi,
            _ => {}
        }
    }
    Ok(MlPgrLoss {
        value,
        probe_grad: pg,
        gallery_grad: gg,
    })
}

/// Linear `dim → dim` projection initialized to the identity map.
pub fn identity_embedder(dim: usize) -> Result<DenseNet> {
    let mut layer = Layer::zeros(dim, dim, Activation::Identity);
    for i in 0..dim {
        layer.weights[i * dim + i] = 1.0;
    }
    DenseNet::from_layers(vec![layer])
}

pub fn embed_all(embedder: &DenseNet, features: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    features.iter().map(|f| embedder.forward(f)).collect()
}

/// One set in an ML-PGR training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PgrSet {
    pub features: Vec<Vec<f64>>,
    pub yaws: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PgrPair {
    pub probe: PgrSet,
    pub gallery: PgrSet,
}

/// Per-set cross-entropy on the mean embedding plus the centroid loss, with
/// equal weights, and its gradients over the embedder and head.
pub fn ml_pgr_gradient(
    embedder: &DenseNet,
    head: &RewardHead,
    batch: &[PgrPair],
    th: &MlPgrThresholds,
    rule: MissingGroupRule,
) -> Result<(f64, Gradients, Gradients)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty pgr batch"));
    }
    let n = batch.len() as f64;
    let mut ge = Gradients::zeros_like(embedder);
    let mut gh = Gradients::zeros_like(&head.net);
    let mut loss = 0.0;
    for pair in batch {
        let sets = [&pair.probe, &pair.gallery];
        let emb: Vec<Vec<Vec<f64>>> = sets
            .iter()
            .map(|s| embed_all(embedder, &s.features))
            .collect::<Result<_>>()?;
        // upstream on every embedded item
        let mut ups: Vec<Vec<Vec<f64>>> = emb
            .iter()
            .map(|e| vec![vec![0.0; embedder.output_dim()]; e.len()])
            .collect();
        for (k, s) in sets.iter().enumerate() {
            let agg = mean(&emb[k]);
            let tr = head.net.forward_trace(&agg)?;
            loss += cross_entropy(tr.output(), s.label)? / n;
            let up = cross_entropy_grad(tr.output(), s.label)?;
            let g = head.net.backward_trace(&tr, &up)?;
            gh.add_scaled(&g, 1.0 / n);
            let m = emb[k].len() as f64;
            for u in &mut ups[k] {
                axpy(u, &g.input, 1.0 / (n * m));
            }
        }
        let groups: Vec<Vec<usize>> = sets
            .iter()
            .map(|s| s.yaws.iter().map(|&y| pose_group(y)).collect())
            .collect();
        let triples: Vec<CentroidTriple> = (0..2)
            .map(|k| CentroidTriple::from_groups(&emb[k], &groups[k], &vec![1.0; emb[k].len()]))
            .collect::<Result<_>>()?;
        let same = pair.probe.label == pair.gallery.label;
        let ml = ml_pgr_loss(&triples[0], &triples[1], same, th, rule)?;
        loss += ml.value / n;
        for (k, grads) in [&ml.probe_grad, &ml.gallery_grad].into_iter().enumerate() {
            for (g, gc) in grads.iter().enumerate() {
                let Some(gc) = gc else { continue };
                let members: Vec<usize> = (0..groups[k].len()).filter(|&i| groups[k][i] == g).collect();
                let share = 1.0 / (n * members.len() as f64);
                for i in members {
                    axpy(&mut ups[k][i], gc, share);
                }
            }
        }
        for (k, s) in sets.iter().enumerate() {
            for (f, u) in s.features.iter().zip(&ups[k]) {
                ge.add_scaled(&embedder.backward(f, u)?, 1.0);
            }
        }
    }
    Ok((loss, ge, gh))
}

/// One plain gradient-descent step on embedder and head together.
pub fn ml_pgr_train(
    embedder: &DenseNet,
    head: &RewardHead,
    batch: &[PgrPair],
    th: &MlPgrThresholds,
    rule: MissingGroupRule,
    lr: f64,
) -> Result<(DenseNet, RewardHead)> {
    let (_, ge, gh) = ml_pgr_gradient(embedder, head, batch, th, rule)?;
    let mut e = embedder.clone();
    let mut h = head.clone();
    e.add_scaled(&ge, -lr);
    h.net.add_scaled(&gh, -lr);
    Ok((e, h))
}

/// Index of the nearest present centroid; ties go to the lower index.
pub fn assign_pose_by_centroid(feature: &[f64], gallery: &CentroidTriple) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (g, c) in gallery.present() {
        let d = l2(feature, c);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((g, d));
        }
    }
    best.map(|(g, _)| g)
        .ok_or_else(|| Error::invalid("gallery has no pose centroids"))
}

/// Minimum distance over groups present in both triples; with no common
/// group, the distance between the overall aggregates.
pub fn ml_pgr_distance(
    probe: &CentroidTriple,
    gallery: &CentroidTriple,
    probe_all: &[f64],
    gallery_all: &[f64],
) -> f64 {
    (0..3)
        .filter_map(|g| match (&probe.c[g], &gallery.c[g]) {
            (Some(a), Some(b)) => Some(l2(a, b)),
            _ => None,
        })
        .fold(None, |acc: Option<f64>, d| Some(acc.map_or(d, |a| a.min(d))))
        .unwrap_or_else(|| l2(probe_all, gallery_all))
}

/// Probe centroids grouped by the gallery's centroids instead of yaw.
pub fn probe_centroids_by_assignment(
    probe: &[Vec<f64>],
    weights: &[f64],
    gallery: &CentroidTriple,
) -> Result<CentroidTriple> {
    let groups: Vec<usize> = probe
        .iter()
        .map(|f| assign_pose_by_centroid(f, gallery))
        .collect::<Result<_>>()?;
    CentroidTriple::from_groups(probe, &groups, weights)
}
