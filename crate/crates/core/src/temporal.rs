//! Temporal-convolution attention over video frames.
//!
//! Two 1-D convolutions along time (width 3, zero padding 1, stride 1): `dim`
//! input channels to 64 with relu, then 64 channels to one score per frame.
//! A softmax over the scores gives the frame weights. Stills and video
//! segments of a set are handled separately and recombined in [`combine`].

use rand::Rng;

use crate::codec::{Reader, Writer};
use crate::env::{aggregate_floored, RewardHead};
use crate::error::{Error, Result};
use crate::nn::{axpy, cross_entropy, cross_entropy_grad, softmax, Adam};
use crate::synth::{FeatureSet, Media};

pub const KERNEL: usize = 3;
pub const CHANNELS: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct TempConvNet {
    dim: usize,
    channels: usize,
    /// `[out][in][k]`
    w1: Vec<f64>,
    b1: Vec<f64>,
    /// `[in][k]`
    w2: Vec<f64>,
    b2: f64,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ConvTrace {
    /// Layer-1 pre-activations, `[channel][time]`.
    z1: Vec<f64>,
    pub scores: Vec<f64>,
    pub weights: Vec<f64>,
}

impl TempConvNet {
    pub fn new<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Result<Self> {
        Self::with_channels(dim, CHANNELS, rng)
    }

    pub fn with_channels<R: Rng + ?Sized>(dim: usize, channels: usize, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(dim, channels)?;
        let l1 = (6.0 / ((dim + channels) * KERNEL) as f64).sqrt();
        let l2 = (6.0 / ((channels + 1) * KERNEL) as f64).sqrt();
        net.w1.iter_mut().for_each(|w| *w = rng.gen_range(-l1..=l1));
        net.w2.iter_mut().for_each(|w| *w = rng.gen_range(-l2..=l2));
        Ok(net)
    }

    pub fn zeros(dim: usize, channels: usize) -> Result<Self> {
        if dim == 0 || channels == 0 {
            return Err(Error::invalid("temporal net needs positive dims"));
        }
        Ok(Self {
            dim,
            channels,
            w1: vec![0.0; channels * dim * KERNEL],
            b1: vec![0.0; channels],
            w2: vec![0.0; channels * KERNEL],
            b2: 0.0,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + 1
    }

    /// `w1, b1, w2, b2`
    pub fn flat_params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.num_params());
        p.extend(&self.w1);
        p.extend(&self.b1);
        p.extend(&self.w2);
        p.push(self.b2);
        p
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::dim("temporal params", self.num_params(), flat.len()));
        }
        let (a, rest) = flat.split_at(self.w1.len());
        let (b, rest) = rest.split_at(self.b1.len());
        let (c, d) = rest.split_at(self.w2.len());
        self.w1.copy_from_slice(a);
        self.b1.copy_from_slice(b);
        self.w2.copy_from_slice(c);
        self.b2 = d[0];
        Ok(())
    }

    fn check(&self, frames: &[Vec<f64>]) -> Result<()> {
        if frames.is_empty() {
            return Err(Error::invalid("empty frame sequence"));
        }
        if let Some(f) = frames.iter().find(|f| f.len() != self.dim) {
            return Err(Error::dim("frame", self.dim, f.len()));
        }
        Ok(())
    }

    pub fn forward_trace(&self, frames: &[Vec<f64>]) -> Result<ConvTrace> {
        self.check(frames)?;
        let n = frames.len();
        let (d, ch) = (self.dim, self.channels);
        let mut z1 = vec![0.0; ch * n];
        for o in 0..ch {
            for t in 0..n {
                let mut acc = self.b1[o];
                for k in 0..KERNEL {
                    let Some(u) = (t + k).checked_sub(1).filter(|&u| u < n) else {
                        continue;
                    };
                    let w = &self.w1[(o * d) * KERNEL..(o * d + d) * KERNEL];
                    for (c, x) in frames[u].iter().enumerate() {
                        acc += w[c * KERNEL + k] * x;
                    }
                }
                z1[o * n + t] = acc;
            }
        }
        let mut scores = vec![self.b2; n];
        for (t, s) in scores.iter_mut().enumerate() {
            for o in 0..ch {
                for k in 0..KERNEL {
                    if let Some(u) = (t + k).checked_sub(1).filter(|&u| u < n) {
                        *s += self.w2[o * KERNEL + k] * z1[o * n + u].max(0.0);
                    }
                }
            }
        }
        let weights = softmax(&scores)?;
        Ok(ConvTrace { z1, scores, weights })
    }

    /// Per-frame scores before the softmax.
    pub fn scores(&self, frames: &[Vec<f64>]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(frames)?.scores)
    }

    /// Softmax-normalized frame weights.
    pub fn attention(&self, frames: &[Vec<f64>]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(frames)?.weights)
    }

    /// Gradient of `<upstream, scores>` over the flat parameters.
    pub fn backward_scores(
        &self,
        frames: &[Vec<f64>],
        trace: &ConvTrace,
        upstream: &[f64],
    ) -> Result<Vec<f64>> {
        let n = frames.len();
        if upstream.len() != n {
            return Err(Error::dim("score upstream", n, upstream.len()));
        }
        let (d, ch) = (self.dim, self.channels);
        let mut gw1 = vec![0.0; self.w1.len()];
        let mut gb1 = vec![0.0; ch];
        let mut gw2 = vec![0.0; self.w2.len()];
        let gb2: f64 = upstream.iter().sum();
        let mut dz1 = vec![0.0; ch * n];
        for (t, &g) in upstream.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for o in 0..ch {
                for k in 0..KERNEL {
                    if let Some(u) = (t + k).checked_sub(1).filter(|&u| u < n) {
                        let z = trace.z1[o * n + u];
                        gw2[o * KERNEL + k] += g * z.max(0.0);
                        if z > 0.0 {
                            dz1[o * n + u] += g * self.w2[o * KERNEL + k];
                        }
                    }
                }
            }
        }
        for o in 0..ch {
            for t in 0..n {
                let g = dz1[o * n + t];
                if g == 0.0 {
                    continue;
                }
                gb1[o] += g;
                for k in 0..KERNEL {
                    if let Some(u) = (t + k).checked_sub(1).filter(|&u| u < n) {
                        for (c, x) in frames[u].iter().enumerate() {
                            gw1[(o * d + c) * KERNEL + k] += g * x;
                        }
                    }
                }
            }
        }
        let mut out = gw1;
        out.extend(gb1);
        out.extend(gw2);
        out.push(gb2);
        Ok(out)
    }

    pub fn encode(&self, w: &mut Writer) {
        w.u64(self.dim as u64);
        w.u64(self.channels as u64);
        w.f64s(&self.flat_params());
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let at = r.offset();
        let dim = r.u64()? as usize;
        let channels = r.u64()? as usize;
        let flat = r.f64s()?;
        let expect = channels
            .checked_mul(dim)
            .and_then(|v| v.checked_mul(KERNEL))
            .map(|v| v + channels * (KERNEL + 1) + 1);
        if dim == 0 || channels == 0 || expect != Some(flat.len()) {
            return Err(Error::format(at, "temporal net shape does not match its parameters"));
        }
        let mut net = Self::zeros(dim, channels)?;
        net.set_flat_params(&flat)?;
        Ok(net)
    }
}

/// `Σ w_i f_i`
pub fn weighted_sum(frames: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; frames[0].len()];
    for (f, &w) in frames.iter().zip(weights) {
        axpy(&mut out, f, w);
    }
    out
}

/// Cross-entropy of the head on the attention-pooled segment, and its
/// gradient over the temporal net's parameters.
pub fn segment_loss_gradient(
    net: &TempConvNet,
    head: &RewardHead,
    frames: &[Vec<f64>],
    label: usize,
) -> Result<(f64, Vec<f64>)> {
    let trace = net.forward_trace(frames)?;
    let pooled = weighted_sum(frames, &trace.weights);
    let ht = head.net.forward_trace(&pooled)?;
    let loss = cross_entropy(ht.output(), label)?;
    let up = cross_entropy_grad(ht.output(), label)?;
    let g_pooled = head.net.backward_trace(&ht, &up)?.input;
    // dL/dw_i = <f_i, dL/dpooled>, then through the softmax Jacobian
    let dw: Vec<f64> = frames
        .iter()
        .map(|f| f.iter().zip(&g_pooled).map(|(a, b)| a * b).sum())
        .collect();
    let mean: f64 = trace.weights.iter().zip(&dw).map(|(w, g)| w * g).sum();
    let ds: Vec<f64> = trace
        .weights
        .iter()
        .zip(&dw)
        .map(|(w, g)| w * (g - mean))
        .collect();
    Ok((loss, net.backward_scores(frames, &trace, &ds)?))
}

/// Mean loss and gradient over a batch of `(frames, label)` segments.
pub fn temporal_gradient(
    net: &TempConvNet,
    head: &RewardHead,
    batch: &[(Vec<Vec<f64>>, usize)],
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty temporal batch"));
    }
    let n = batch.len() as f64;
    let mut grad = vec![0.0; net.num_params()];
    let mut loss = 0.0;
    for (frames, y) in batch {
        let (l, g) = segment_loss_gradient(net, head, frames, *y)?;
        loss += l / n;
        axpy(&mut grad, &g, 1.0 / n);
    }
    Ok((loss, grad))
}

/// One plain gradient-descent step with the head held fixed.
pub fn train_temporal(
    net: &TempConvNet,
    head: &RewardHead,
    batch: &[(Vec<Vec<f64>>, usize)],
    lr: f64,
) -> Result<TempConvNet> {
    let (_, g) = temporal_gradient(net, head, batch)?;
    let mut p = net.flat_params();
    axpy(&mut p, &g, -lr);
    let mut out = net.clone();
    out.set_flat_params(&p)?;
    Ok(out)
}

/// One Adam descent step; returns the batch loss before the step.
pub fn train_temporal_adam(
    net: &mut TempConvNet,
    opt: &mut Adam,
    head: &RewardHead,
    batch: &[(Vec<Vec<f64>>, usize)],
    lr: f64,
) -> Result<f64> {
    let (loss, mut g) = temporal_gradient(net, head, batch)?;
    g.iter_mut().for_each(|v| *v = -*v);
    let mut p = net.flat_params();
    opt.ascend(&mut p, &g, lr);
    net.set_flat_params(&p)?;
    Ok(loss)
}

/// Orderless stills and ordered video segments of one set, as item indices.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SetPartition {
    pub stills: Vec<usize>,
    pub segments: Vec<(u32, Vec<usize>)>,
}

impl SetPartition {
    /// Groups a set's items by media; segments keep first-appearance order
    /// and their frames are sorted by frame index.
    pub fn of(set: &FeatureSet<'_>) -> Self {
        let mut stills = Vec::new();
        let mut segments: Vec<(u32, Vec<usize>)> = Vec::new();
        for (i, r) in set.items.iter().enumerate() {
            match r.media {
                Media::Still => stills.push(i),
                Media::Video { segment_id } => {
                    match segments.iter_mut().find(|(s, _)| *s == segment_id) {
                        Some((_, v)) => v.push(i),
                        None => segments.push((segment_id, vec![i])),
                    }
                }
            }
        }
        for (_, frames) in &mut segments {
            frames.sort_by_key(|&i| (set.items[i].frame_index, i));
        }
        Self { stills, segments }
    }

    pub fn num_items(&self) -> usize {
        self.stills.len() + self.segments.iter().map(|(_, v)| v.len()).sum::<usize>()
    }

    /// Stills plus one pseudo-item per segment.
    pub fn num_units(&self) -> usize {
        self.stills.len() + self.segments.len()
    }

    /// Checks that every index in `0..n` appears exactly once.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        let all = self
            .stills
            .iter()
            .chain(self.segments.iter().flat_map(|(_, v)| v.iter()));
        for &i in all {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::invalid(format!("partition index {i} out of range or repeated")));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid("partition does not cover every item"));
        }
        Ok(())
    }

    pub fn segment_frames(&self, features: &[Vec<f64>]) -> Vec<Vec<Vec<f64>>> {
        self.segments
            .iter()
            .map(|(_, idx)| idx.iter().map(|&i| features[i].clone()).collect())
            .collect()
    }

    /// Still features followed by one attention-pooled vector per segment.
    pub fn units(&self, features: &[Vec<f64>], temporal_weights: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self.validate(features.len())?;
        if temporal_weights.len() != self.segments.len() {
            return Err(Error::dim("segment weights", self.segments.len(), temporal_weights.len()));
        }
        let mut out: Vec<Vec<f64>> = self.stills.iter().map(|&i| features[i].clone()).collect();
        for ((_, idx), w) in self.segments.iter().zip(temporal_weights) {
            if w.len() != idx.len() {
                return Err(Error::dim("frame weights", idx.len(), w.len()));
            }
            let frames: Vec<Vec<f64>> = idx.iter().map(|&i| features[i].clone()).collect();
            out.push(weighted_sum(&frames, w));
        }
        Ok(out)
    }
}

/// Two-stage aggregation: each segment collapses to `Σ w_i f_i`, then stills
/// and segment pseudo-items are averaged with `unit_weights`. The unit
/// weights cover the stills and optionally the pseudo-items after them; when
/// only the stills are covered each pseudo-item gets weight 1.
pub fn combine(
    partition: &SetPartition,
    unit_weights: &[f64],
    temporal_weights: &[Vec<f64>],
    features: &[Vec<f64>],
) -> Result<Vec<f64>> {
    let units = partition.units(features, temporal_weights)?;
    let weights: Vec<f64> = if unit_weights.len() == partition.stills.len() {
        unit_weights
            .iter()
            .copied()
            .chain(std::iter::repeat_n(1.0, partition.segments.len()))
            .collect()
    } else if unit_weights.len() == units.len() {
        unit_weights.to_vec()
    } else {
        return Err(Error::invalid(format!(
            "{} unit weights for {} stills and {} segments",
            unit_weights.len(),
            partition.stills.len(),
            partition.segments.len()
        )));
    };
    aggregate_floored(&units, &weights)
}
