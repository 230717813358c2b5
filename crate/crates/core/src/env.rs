//! The set-aggregation decision process.
//!
//! Every item of a set starts with weight 1. The agent visits items one at a
//! time and replaces the current item's weight with its action `a_t ∈ [0, 1]`.
//! The state is the leave-one-out weighted mean of the other items
//! concatenated with the current item. The reward is the drop in the reward
//! head's cross-entropy on the weighted aggregate, plus `λ·max(0, 1 − a_t)`.

use log::warn;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{cross_entropy, cross_entropy_grad, softmax, Activation, DenseNet, Gradients};

/// Below this total mass an aggregate falls back to the uniform mean.
pub const WEIGHT_FLOOR: f64 = 1e-6;
pub const HEAD_HIDDEN: usize = 64;

/// Weighted mean `Σ a_i f_i / Σ a_i`.
pub fn aggregate(features: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    check_set(features, weights)?;
    let mass: f64 = weights.iter().sum();
    if mass <= 0.0 {
        return Err(Error::DegenerateWeights(mass));
    }
    Ok(weighted_sum(features, weights, mass))
}

/// [`aggregate`] with the floor rule: a mass below [`WEIGHT_FLOOR`] yields the
/// uniform mean instead of an error.
pub fn aggregate_floored(features: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    check_set(features, weights)?;
    let mass: f64 = weights.iter().sum();
    if mass < WEIGHT_FLOOR {
        return Ok(mean(features));
    }
    Ok(weighted_sum(features, weights, mass))
}

pub fn mean(features: &[Vec<f64>]) -> Vec<f64> {
    let n = features.len() as f64;
    let mut out = vec![0.0; features[0].len()];
    for f in features {
        for (o, v) in out.iter_mut().zip(f) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// Element-wise maximum, the max-pooling baseline.
pub fn max_pool(features: &[Vec<f64>]) -> Vec<f64> {
    let mut out = features[0].clone();
    for f in &features[1..] {
        for (o, v) in out.iter_mut().zip(f) {
            *o = o.max(*v);
        }
    }
    out
}

fn weighted_sum(features: &[Vec<f64>], weights: &[f64], mass: f64) -> Vec<f64> {
    let mut out = vec![0.0; features[0].len()];
    for (f, &w) in features.iter().zip(weights) {
        if w != 0.0 {
            for (o, v) in out.iter_mut().zip(f) {
                *o += w * v;
            }
        }
    }
    out.iter_mut().for_each(|o| *o /= mass);
    out
}

fn check_set(features: &[Vec<f64>], weights: &[f64]) -> Result<()> {
    if features.is_empty() {
        return Err(Error::invalid("empty feature set"));
    }
    if features.len() != weights.len() {
        return Err(Error::dim("set weights", features.len(), weights.len()));
    }
    let d = features[0].len();
    if let Some(bad) = features.iter().find(|f| f.len() != d) {
        return Err(Error::dim("set features", d, bad.len()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Termination {
    FullTraversal,
    /// Stop once the head's maximum softmax probability reaches the threshold.
    Softmax(f64),
}

/// Weights and traversal position of one episode.
#[derive(Debug, Clone)]
pub struct EpisodeState {
    features: Vec<Vec<f64>>,
    weights: Vec<f64>,
    order: Vec<usize>,
    pos: usize,
}

impl EpisodeState {
    pub fn new(features: Vec<Vec<f64>>, order: Vec<usize>) -> Result<Self> {
        let weights = vec![1.0; features.len()];
        check_set(&features, &weights)?;
        let mut seen = vec![false; features.len()];
        if order.len() != features.len() {
            return Err(Error::dim("traversal order", features.len(), order.len()));
        }
        for &i in &order {
            if i >= features.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::invalid("traversal order is not a permutation"));
            }
        }
        Ok(Self {
            features,
            weights,
            order,
            pos: 0,
        })
    }

    pub fn in_order(features: Vec<Vec<f64>>) -> Result<Self> {
        let order = (0..features.len()).collect();
        Self::new(features, order)
    }

    pub fn shuffled<R: Rng + ?Sized>(features: Vec<Vec<f64>>, rng: &mut R) -> Result<Self> {
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..features.len()).collect();
        order.shuffle(rng);
        Self::new(features, order)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Index of the item about to be weighted, if any remain.
    pub fn cursor(&self) -> Option<usize> {
        self.order.get(self.pos).copied()
    }

    pub fn visited(&self) -> usize {
        self.pos
    }

    pub fn is_exhausted(&self) -> bool {
        self.pos >= self.order.len()
    }

    pub fn aggregate(&self) -> Vec<f64> {
        aggregate_floored(&self.features, &self.weights).expect("state invariants hold")
    }

    /// `concat(context, f_t)` where the context is the weighted mean of every
    /// item except the current one. A singleton set has a zero context.
    pub fn build_state(&self) -> Result<Vec<f64>> {
        let t = self
            .cursor()
            .ok_or_else(|| Error::invalid("episode already traversed every item"))?;
        let d = self.features[0].len();
        let mut context = vec![0.0; d];
        if self.features.len() > 1 {
            let mut mass = 0.0;
            for (i, (f, &w)) in self.features.iter().zip(&self.weights).enumerate() {
                if i != t {
                    mass += w;
                    for (c, v) in context.iter_mut().zip(f) {
                        *c += w * v;
                    }
                }
            }
            if mass < WEIGHT_FLOOR {
                context.iter_mut().for_each(|c| *c = 0.0);
                for (i, f) in self.features.iter().enumerate() {
                    if i != t {
                        for (c, v) in context.iter_mut().zip(f) {
                            *c += v;
                        }
                    }
                }
                mass = (self.features.len() - 1) as f64;
            }
            context.iter_mut().for_each(|c| *c /= mass);
        }
        context.extend_from_slice(&self.features[t]);
        Ok(context)
    }

    /// Sets the current item's weight and moves to the next item.
    pub(crate) fn apply(&mut self, action: f64) {
        let t = self.order[self.pos];
        self.weights[t] = action;
        self.pos += 1;
    }
}

/// Classifier `h` on top of the aggregate, plus the hinge weight `λ`.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardHead {
    pub net: DenseNet,
    pub lambda: f64,
}

impl RewardHead {
    pub fn new<R: Rng + ?Sized>(
        embed_dim: usize,
        num_classes: usize,
        lambda: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let net = DenseNet::new(
            &[embed_dim, HEAD_HIDDEN, num_classes],
            &[Activation::Relu, Activation::Identity],
            rng,
        )?;
        Self::from_net(net, lambda)
    }

    pub fn from_net(net: DenseNet, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda = {lambda} must be >= 0")));
        }
        Ok(Self { net, lambda })
    }

    pub fn embed_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.net.output_dim()
    }

    pub fn logits(&self, aggregated: &[f64]) -> Result<Vec<f64>> {
        self.net.forward(aggregated)
    }

    pub fn loss(&self, aggregated: &[f64], label: usize) -> Result<f64> {
        cross_entropy(&self.logits(aggregated)?, label)
    }

    pub fn max_prob(&self, aggregated: &[f64]) -> Result<f64> {
        let p = softmax(&self.logits(aggregated)?)?;
        Ok(p.into_iter().fold(0.0, f64::max))
    }
}

/// True iff `max(softmax(h(aggregated))) >= threshold`.
pub fn softmax_terminated(head: &RewardHead, aggregated: &[f64], threshold: f64) -> Result<bool> {
    Ok(head.max_prob(aggregated)? >= threshold)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    /// `None` once the episode is over.
    pub next_state: Option<Vec<f64>>,
    pub reward: f64,
    /// The cross-entropy part of the reward, `L(before) − L(after)`.
    pub loss_delta: f64,
    pub done: bool,
}

/// An episode over one labelled set.
#[derive(Debug, Clone)]
pub struct Episode {
    state: EpisodeState,
    label: usize,
    termination: Termination,
    current_loss: f64,
    initial_loss: f64,
    terminated_early: bool,
}

impl Episode {
    pub fn new(
        state: EpisodeState,
        label: usize,
        head: &RewardHead,
        termination: Termination,
    ) -> Result<Self> {
        if let Termination::Softmax(th) = termination {
            if !(th > 0.0 && th <= 1.0) {
                return Err(Error::invalid(format!("termination threshold {th} outside (0, 1]")));
            }
        }
        let loss = head.loss(&state.aggregate(), label)?;
        Ok(Self {
            state,
            label,
            termination,
            current_loss: loss,
            initial_loss: loss,
            terminated_early: false,
        })
    }

    pub fn state(&self) -> &EpisodeState {
        &self.state
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn is_done(&self) -> bool {
        self.terminated_early || self.state.is_exhausted()
    }

    pub fn initial_loss(&self) -> f64 {
        self.initial_loss
    }

    pub fn current_loss(&self) -> f64 {
        self.current_loss
    }

    pub fn observe(&self) -> Result<Vec<f64>> {
        if self.is_done() {
            return Err(Error::invalid("episode is done"));
        }
        self.state.build_state()
    }

    pub fn step(&mut self, action: f64, head: &RewardHead) -> Result<StepOutcome> {
        if self.is_done() {
            return Err(Error::invalid("step on a finished episode"));
        }
        if !action.is_finite() {
            return Err(Error::Numeric(format!("non-finite action {action}")));
        }
        let a = if (0.0..=1.0).contains(&action) {
            action
        } else {
            warn!("action {action} outside [0, 1], clamping");
            action.clamp(0.0, 1.0)
        };
        let before = self.current_loss;
        self.state.apply(a);
        let agg = self.state.aggregate();
        let logits = head.logits(&agg)?;
        let after = cross_entropy(&logits, self.label)?;
        self.current_loss = after;
        let loss_delta = before - after;
        let reward = loss_delta + head.lambda * (1.0 - a).max(0.0);

        if let Termination::Softmax(th) = self.termination {
            let max_p = softmax(&logits)?.into_iter().fold(0.0, f64::max);
            if max_p >= th && !self.state.is_exhausted() {
                self.terminated_early = true;
            }
        }
        let done = self.is_done();
        let next_state = if done {
            None
        } else {
            Some(self.state.build_state()?)
        };
        Ok(StepOutcome {
            next_state,
            reward,
            loss_delta,
            done,
        })
    }

    pub fn into_state(self) -> EpisodeState {
        self.state
    }
}

/// Mean cross-entropy of the head over a batch and its parameter gradient.
pub fn head_gradient(head: &RewardHead, batch: &[(Vec<f64>, usize)]) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty head batch"));
    }
    let mut grads = Gradients::zeros_like(&head.net);
    let mut loss = 0.0;
    let n = batch.len() as f64;
    for (x, y) in batch {
        let trace = head.net.forward_trace(x)?;
        loss += cross_entropy(trace.output(), *y)?;
        let up = cross_entropy_grad(trace.output(), *y)?;
        grads.add_scaled(&head.net.backward_trace(&trace, &up)?, 1.0 / n);
    }
    Ok((loss / n, grads))
}

/// One plain gradient-descent step on the mean batch cross-entropy.
pub fn train_reward_head(
    head: &RewardHead,
    batch: &[(Vec<f64>, usize)],
    lr: f64,
) -> Result<RewardHead> {
    let (_, grads) = head_gradient(head, batch)?;
    let mut out = head.clone();
    out.net.add_scaled(&grads, -lr);
    Ok(out)
}
