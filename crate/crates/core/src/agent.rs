//! Continuous-action advantage actor-critic.
//!
//! A shared trunk (`2·dim → 100 → 100`) feeds a policy branch
//! (`100 → 64 → 16 → 2`) and a value branch (`100 → 64 → 16 → 1`). The two
//! policy outputs map through `softplus(o) + 1 + 1e-3` to the shapes of a
//! Beta distribution on `[0, 1]`, so the density is always unimodal.
//! The advantage is the one-step TD error `δ = r + γ V(s') − V(s)`.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::codec::{Reader, Writer};
use crate::env::{Episode, EpisodeState, RewardHead, Termination};
use crate::error::{Error, Result};
use crate::nn::{Activation, Adam, DenseNet, Gradients, Trace};

pub const TRUNK_WIDTH: usize = 100;
pub const BRANCH_WIDTHS: [usize; 2] = [64, 16];
pub const SHAPE_OFFSET: f64 = 1.0 + 1e-3;
/// Sampled actions are kept this far from 0 and 1 so the log-density stays finite.
pub const ACTION_EPS: f64 = 1e-6;
pub const ON_POLICY_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct AgentParams {
    pub trunk: DenseNet,
    pub policy: DenseNet,
    pub value: DenseNet,
    pub gamma: f64,
}

fn trunk_dims(embed_dim: usize) -> ([usize; 3], [Activation; 2]) {
    (
        [2 * embed_dim, TRUNK_WIDTH, TRUNK_WIDTH],
        [Activation::Relu, Activation::Relu],
    )
}

fn branch_dims(out: usize) -> ([usize; 4], [Activation; 3]) {
    (
        [TRUNK_WIDTH, BRANCH_WIDTHS[0], BRANCH_WIDTHS[1], out],
        [Activation::Relu, Activation::Relu, Activation::Identity],
    )
}

impl AgentParams {
    pub fn new<R: Rng + ?Sized>(embed_dim: usize, gamma: f64, rng: &mut R) -> Result<Self> {
        let (td, ta) = trunk_dims(embed_dim);
        let (pd, pa) = branch_dims(2);
        let (vd, va) = branch_dims(1);
        Self::from_nets(
            DenseNet::new(&td, &ta, rng)?,
            DenseNet::new(&pd, &pa, rng)?,
            DenseNet::new(&vd, &va, rng)?,
            gamma,
        )
    }

    pub fn zeros(embed_dim: usize, gamma: f64) -> Result<Self> {
        let (td, ta) = trunk_dims(embed_dim);
        let (pd, pa) = branch_dims(2);
        let (vd, va) = branch_dims(1);
        Self::from_nets(
            DenseNet::zeros(&td, &ta)?,
            DenseNet::zeros(&pd, &pa)?,
            DenseNet::zeros(&vd, &va)?,
            gamma,
        )
    }

    pub fn from_nets(trunk: DenseNet, policy: DenseNet, value: DenseNet, gamma: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::invalid(format!("gamma = {gamma} outside [0, 1)")));
        }
        if policy.input_dim() != trunk.output_dim() || value.input_dim() != trunk.output_dim() {
            return Err(Error::dim("branch input", trunk.output_dim(), policy.input_dim()));
        }
        if policy.output_dim() != 2 || value.output_dim() != 1 {
            return Err(Error::invalid("policy branch needs 2 outputs and value branch 1"));
        }
        Ok(Self {
            trunk,
            policy,
            value,
            gamma,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.trunk.input_dim()
    }

    pub fn num_params(&self) -> usize {
        self.trunk.num_params() + self.policy.num_params() + self.value.num_params()
    }

    pub fn policy_path(&self) -> PolicyPath {
        PolicyPath {
            trunk: self.trunk.clone(),
            policy: self.policy.clone(),
        }
    }

    /// Trunk then policy-branch parameters.
    pub fn policy_path_flat(&self) -> Vec<f64> {
        let mut p = self.trunk.flat_params();
        p.extend(self.policy.flat_params());
        p
    }

    pub fn set_policy_path_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.trunk.num_params();
        if flat.len() != n + self.policy.num_params() {
            return Err(Error::dim(
                "policy path",
                n + self.policy.num_params(),
                flat.len(),
            ));
        }
        self.trunk.set_flat_params(&flat[..n])?;
        self.policy.set_flat_params(&flat[n..])
    }

    pub fn encode(&self, w: &mut Writer) {
        w.f64(self.gamma);
        self.trunk.encode(w);
        self.policy.encode(w);
        self.value.encode(w);
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let at = r.offset();
        let gamma = r.f64()?;
        let trunk = DenseNet::decode(r)?;
        let policy = DenseNet::decode(r)?;
        let value = DenseNet::decode(r)?;
        Self::from_nets(trunk, policy, value, gamma).map_err(|e| Error::format(at, e.to_string()))
    }
}

/// Trunk plus policy branch: everything the action distribution depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyPath {
    pub trunk: DenseNet,
    pub policy: DenseNet,
}

impl PolicyPath {
    pub fn distribution(&self, state: &[f64]) -> Result<BetaPolicy> {
        let h = self.trunk.forward(state)?;
        let o = self.policy.forward(&h)?;
        Ok(BetaPolicy::from_raw(o[0], o[1]))
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut p = self.trunk.flat_params();
        p.extend(self.policy.flat_params());
        p
    }

    pub fn num_params(&self) -> usize {
        self.trunk.num_params() + self.policy.num_params()
    }

    pub fn encode(&self, w: &mut Writer) {
        self.trunk.encode(w);
        self.policy.encode(w);
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self> {
        Ok(Self {
            trunk: DenseNet::decode(r)?,
            policy: DenseNet::decode(r)?,
        })
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn ln_beta_fn(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Beta(α, β) on `[0, 1]` with both shapes above 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaPolicy {
    pub alpha: f64,
    pub beta: f64,
    /// The raw branch outputs, kept for the chain rule through softplus.
    raw: [f64; 2],
}

impl BetaPolicy {
    pub fn from_raw(o_alpha: f64, o_beta: f64) -> Self {
        Self {
            alpha: softplus(o_alpha) + SHAPE_OFFSET,
            beta: softplus(o_beta) + SHAPE_OFFSET,
            raw: [o_alpha, o_beta],
        }
    }

    /// Builds a distribution from shapes directly; both must exceed 1.
    pub fn from_shapes(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 1.0 && beta > 1.0) {
            return Err(Error::invalid(format!("Beta shapes ({alpha}, {beta}) must exceed 1")));
        }
        // softplus^-1(s - offset), only used for the chain rule
        let inv = |s: f64| {
            let y: f64 = s - SHAPE_OFFSET;
            if y > 30.0 {
                y
            } else {
                y.exp_m1().ln()
            }
        };
        Ok(Self {
            alpha,
            beta,
            raw: [inv(alpha), inv(beta)],
        })
    }

    pub fn log_prob(&self, a: f64) -> f64 {
        (self.alpha - 1.0) * a.ln() + (self.beta - 1.0) * (1.0 - a).ln()
            - ln_beta_fn(self.alpha, self.beta)
    }

    pub fn density(&self, a: f64) -> f64 {
        if a <= 0.0 || a >= 1.0 {
            return 0.0;
        }
        self.log_prob(a).exp()
    }

    /// ∂ log p(a) / ∂(α, β)
    pub fn grad_log_prob_shapes(&self, a: f64) -> [f64; 2] {
        let s = digamma(self.alpha + self.beta);
        [
            a.ln() - digamma(self.alpha) + s,
            (1.0 - a).ln() - digamma(self.beta) + s,
        ]
    }

    /// Chains a gradient with respect to the shapes back to the raw outputs.
    pub fn shapes_to_raw(&self, g: [f64; 2]) -> [f64; 2] {
        [g[0] * sigmoid(self.raw[0]), g[1] * sigmoid(self.raw[1])]
    }

    pub fn mode(&self) -> f64 {
        (self.alpha - 1.0) / (self.alpha + self.beta - 2.0)
    }

    pub fn mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }

    pub fn entropy(&self) -> f64 {
        let (a, b) = (self.alpha, self.beta);
        ln_beta_fn(a, b) - (a - 1.0) * digamma(a) - (b - 1.0) * digamma(b)
            + (a + b - 2.0) * digamma(a + b)
    }

    /// Draws an action and returns it with its log-density.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        let dist = Beta::new(self.alpha, self.beta).expect("shapes exceed 1");
        let a: f64 = dist.sample(rng);
        let a = a.clamp(ACTION_EPS, 1.0 - ACTION_EPS);
        (a, self.log_prob(a))
    }
}

/// Closed-form KL(Beta(a1, b1) ‖ Beta(a2, b2)).
pub fn beta_kl(p: &BetaPolicy, q: &BetaPolicy) -> f64 {
    let (a1, b1, a2, b2) = (p.alpha, p.beta, q.alpha, q.beta);
    ln_beta_fn(a2, b2) - ln_beta_fn(a1, b1)
        + (a1 - a2) * digamma(a1)
        + (b1 - b2) * digamma(b1)
        + (a2 - a1 + b2 - b1) * digamma(a1 + b1)
}

/// ∂ KL(p ‖ q) / ∂(α_q, β_q)
pub fn beta_kl_grad_second(p: &BetaPolicy, q: &BetaPolicy) -> [f64; 2] {
    let s2 = digamma(q.alpha + q.beta);
    let s1 = digamma(p.alpha + p.beta);
    [
        digamma(q.alpha) - s2 - digamma(p.alpha) + s1,
        digamma(q.beta) - s2 - digamma(p.beta) + s1,
    ]
}

/// Per-network gradients for the whole agent.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentGrads {
    pub trunk: Gradients,
    pub policy: Gradients,
    pub value: Gradients,
}

impl AgentGrads {
    pub fn zeros(params: &AgentParams) -> Self {
        Self {
            trunk: Gradients::zeros_like(&params.trunk),
            policy: Gradients::zeros_like(&params.policy),
            value: Gradients::zeros_like(&params.value),
        }
    }

    pub fn add_scaled(&mut self, other: &AgentGrads, s: f64) {
        self.trunk.add_scaled(&other.trunk, s);
        self.policy.add_scaled(&other.policy, s);
        self.value.add_scaled(&other.value, s);
    }

    pub fn scale(&mut self, s: f64) {
        self.trunk.scale(s);
        self.policy.scale(s);
        self.value.scale(s);
    }

    pub fn policy_path_flat(&self) -> Vec<f64> {
        let mut g = self.trunk.flat();
        g.extend(self.policy.flat());
        g
    }

    /// Every parameter gradient: trunk, policy, value.
    pub fn flat(&self) -> Vec<f64> {
        let mut g = self.policy_path_flat();
        g.extend(self.value.flat());
        g
    }
}

/// Forward pass through trunk and both branches, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct AgentForward {
    trunk: Trace,
    policy: Trace,
    value: Trace,
    pub dist: BetaPolicy,
    pub value_estimate: f64,
}

impl AgentForward {
    pub fn new(params: &AgentParams, state: &[f64]) -> Result<Self> {
        let trunk = params.trunk.forward_trace(state)?;
        let policy = params.policy.forward_trace(trunk.output())?;
        let value = params.value.forward_trace(trunk.output())?;
        let o = policy.output();
        let dist = BetaPolicy::from_raw(o[0], o[1]);
        let value_estimate = value.output()[0];
        Ok(Self {
            trunk,
            policy,
            value,
            dist,
            value_estimate,
        })
    }

    /// Gradients of `<policy_up, raw policy outputs> + value_up · V(s)`.
    pub fn backward(
        &self,
        params: &AgentParams,
        policy_up: [f64; 2],
        value_up: f64,
    ) -> Result<AgentGrads> {
        let policy = params.policy.backward_trace(&self.policy, &policy_up)?;
        let value = params.value.backward_trace(&self.value, &[value_up])?;
        let trunk_up: Vec<f64> = policy
            .input
            .iter()
            .zip(&value.input)
            .map(|(a, b)| a + b)
            .collect();
        let trunk = params.trunk.backward_trace(&self.trunk, &trunk_up)?;
        Ok(AgentGrads {
            trunk,
            policy,
            value,
        })
    }

    /// Upstream on the raw policy outputs for `∇ log π(a)`.
    pub fn log_prob_upstream(&self, action: f64) -> [f64; 2] {
        self.dist
            .shapes_to_raw(self.dist.grad_log_prob_shapes(action))
    }
}

pub fn policy_forward(params: &AgentParams, state: &[f64]) -> Result<BetaPolicy> {
    let h = params.trunk.forward(state)?;
    let o = params.policy.forward(&h)?;
    Ok(BetaPolicy::from_raw(o[0], o[1]))
}

pub fn value_forward(params: &AgentParams, state: &[f64]) -> Result<f64> {
    let h = params.trunk.forward(state)?;
    Ok(params.value.forward(&h)?[0])
}

/// `log π(a|s)` and its gradient over the policy path.
pub fn log_prob_gradient(
    params: &AgentParams,
    state: &[f64],
    action: f64,
) -> Result<(f64, AgentGrads)> {
    let fwd = AgentForward::new(params, state)?;
    let up = fwd.log_prob_upstream(action);
    Ok((fwd.dist.log_prob(action), fwd.backward(params, up, 0.0)?))
}

/// `V(s)` and its gradient over the value path.
pub fn value_gradient(params: &AgentParams, state: &[f64]) -> Result<(f64, AgentGrads)> {
    let fwd = AgentForward::new(params, state)?;
    Ok((fwd.value_estimate, fwd.backward(params, [0.0, 0.0], 1.0)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: f64,
    /// log μ(a|s) of the policy that produced the action.
    pub behavior_log_prob: f64,
    pub reward: f64,
    pub next_state: Option<Vec<f64>>,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub steps: Vec<Transition>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    pub fn encode(&self, w: &mut Writer) {
        w.u64(self.steps.len() as u64);
        for s in &self.steps {
            w.f64s(&s.state);
            w.f64(s.action);
            w.f64(s.behavior_log_prob);
            w.f64(s.reward);
            match &s.next_state {
                Some(n) => {
                    w.u8(1);
                    w.f64s(n);
                }
                None => w.u8(0),
            }
            w.u8(s.done as u8);
        }
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let n = r.len_prefix(1)?;
        let mut steps = Vec::with_capacity(n);
        for _ in 0..n {
            let state = r.f64s()?;
            let action = r.f64()?;
            let behavior_log_prob = r.f64()?;
            let reward = r.f64()?;
            let at = r.offset();
            let next_state = match r.u8()? {
                0 => None,
                1 => Some(r.f64s()?),
                other => return Err(Error::format(at, format!("bad next-state tag {other}"))),
            };
            let done = r.u8()? != 0;
            steps.push(Transition {
                state,
                action,
                behavior_log_prob,
                reward,
                next_state,
                done,
            });
        }
        Ok(Self { steps })
    }
}

/// `r + γ V(s') − V(s)`, with `V(s') = 0` on terminal transitions.
pub fn td_error(params: &AgentParams, tr: &Transition) -> Result<f64> {
    let v = value_forward(params, &tr.state)?;
    let next = match (&tr.next_state, tr.done) {
        (Some(s), false) => value_forward(params, s)?,
        _ => 0.0,
    };
    Ok(tr.reward + params.gamma * next - v)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct A2cDiagnostics {
    pub mean_abs_td: f64,
    pub mean_entropy: f64,
}

/// Ascent directions: `Σ δ ∇ log π` on the policy path and `Σ δ ∇ V` on the
/// value path (the negative gradient of `½ Σ δ²` with fixed targets).
pub fn a2c_gradients(
    params: &AgentParams,
    traj: &Trajectory,
) -> Result<(AgentGrads, A2cDiagnostics)> {
    if traj.is_empty() {
        return Err(Error::invalid("empty trajectory"));
    }
    let mut grads = AgentGrads::zeros(params);
    let mut abs_td = 0.0;
    let mut entropy = 0.0;
    for (i, tr) in traj.steps.iter().enumerate() {
        let fwd = AgentForward::new(params, &tr.state)?;
        let current = fwd.dist.log_prob(tr.action);
        if (current - tr.behavior_log_prob).abs() > ON_POLICY_TOLERANCE {
            return Err(Error::OnPolicyViolation {
                step: i,
                behavior: tr.behavior_log_prob,
                current,
            });
        }
        let next = match (&tr.next_state, tr.done) {
            (Some(s), false) => value_forward(params, s)?,
            _ => 0.0,
        };
        let delta = tr.reward + params.gamma * next - fwd.value_estimate;
        let up = fwd.log_prob_upstream(tr.action);
        let g = fwd.backward(params, [delta * up[0], delta * up[1]], delta)?;
        grads.add_scaled(&g, 1.0);
        abs_td += delta.abs();
        entropy += fwd.dist.entropy();
    }
    let n = traj.len() as f64;
    Ok((
        grads,
        A2cDiagnostics {
            mean_abs_td: abs_td / n,
            mean_entropy: entropy / n,
        },
    ))
}

/// Adam state for each of the agent's networks.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentOptimizer {
    pub trunk: Adam,
    pub policy: Adam,
    pub value: Adam,
}

impl AgentOptimizer {
    pub fn new(params: &AgentParams) -> Self {
        Self {
            trunk: Adam::new(params.trunk.num_params()),
            policy: Adam::new(params.policy.num_params()),
            value: Adam::new(params.value.num_params()),
        }
    }

    /// Trunk and policy branch move with `lr_policy`, the value branch with `lr_value`.
    pub fn ascend(
        &mut self,
        params: &mut AgentParams,
        grads: &AgentGrads,
        lr_policy: f64,
        lr_value: f64,
    ) {
        self.trunk.ascend_net(&mut params.trunk, &grads.trunk, lr_policy);
        self.policy.ascend_net(&mut params.policy, &grads.policy, lr_policy);
        self.value.ascend_net(&mut params.value, &grads.value, lr_value);
    }

    pub fn encode(&self, w: &mut Writer) {
        self.trunk.encode(w);
        self.policy.encode(w);
        self.value.encode(w);
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self> {
        Ok(Self {
            trunk: Adam::decode(r)?,
            policy: Adam::decode(r)?,
            value: Adam::decode(r)?,
        })
    }
}

/// On-policy update on one trajectory generated by the current parameters.
pub fn a2c_update(
    params: &mut AgentParams,
    opt: &mut AgentOptimizer,
    traj: &Trajectory,
    lr_policy: f64,
    lr_value: f64,
) -> Result<A2cDiagnostics> {
    let (grads, diag) = a2c_gradients(params, traj)?;
    opt.ascend(params, &grads, lr_policy, lr_value);
    Ok(diag)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionMode {
    /// Draw from the policy (training).
    Sample,
    /// The Beta mode (evaluation).
    Mode,
    /// The Beta mode rounded to {0, 1}.
    Binary,
}

#[derive(Debug, Clone)]
pub struct Rollout {
    pub trajectory: Trajectory,
    pub weights: Vec<f64>,
    pub aggregate: Vec<f64>,
    pub visited: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Runs one episode of the agent on a set.
pub fn rollout<R: Rng + ?Sized>(
    params: &AgentParams,
    head: &RewardHead,
    state: EpisodeState,
    label: usize,
    termination: Termination,
    mode: ActionMode,
    rng: &mut R,
) -> Result<Rollout> {
    let mut ep = Episode::new(state, label, head, termination)?;
    let mut steps = Vec::with_capacity(ep.state().len());
    let mut obs = ep.observe()?;
    loop {
        let dist = policy_forward(params, &obs)?;
        let (action, log_prob) = match mode {
            ActionMode::Sample => dist.sample(rng),
            ActionMode::Mode => {
                let a = dist.mode();
                (a, dist.log_prob(a))
            }
            ActionMode::Binary => {
                let a = dist.mode().round();
                (a, dist.log_prob(a.clamp(ACTION_EPS, 1.0 - ACTION_EPS)))
            }
        };
        let out = ep.step(action, head)?;
        if !out.reward.is_finite() {
            return Err(Error::Numeric(format!("non-finite reward {}", out.reward)));
        }
        steps.push(Transition {
            state: obs,
            action,
            behavior_log_prob: log_prob,
            reward: out.reward,
            next_state: out.next_state.clone(),
            done: out.done,
        });
        match out.next_state {
            Some(s) => obs = s,
            None => break,
        }
    }
    let initial_loss = ep.initial_loss();
    let final_loss = ep.current_loss();
    let state = ep.into_state();
    Ok(Rollout {
        trajectory: Trajectory { steps },
        weights: state.weights().to_vec(),
        aggregate: state.aggregate(),
        visited: state.visited(),
        initial_loss,
        final_loss,
    })
}

/// Weights the agent assigns to a set, without computing rewards. With
/// `early_stop = Some((head, threshold))` the traversal ends once the head's
/// top softmax probability on the current aggregate reaches the threshold.
/// Returns the weights and the number of items visited.
pub fn assign_weights<R: Rng + ?Sized>(
    params: &AgentParams,
    mut state: EpisodeState,
    mode: ActionMode,
    early_stop: Option<(&RewardHead, f64)>,
    rng: &mut R,
) -> Result<(Vec<f64>, usize)> {
    while !state.is_exhausted() {
        let obs = state.build_state()?;
        let dist = policy_forward(params, &obs)?;
        let a = match mode {
            ActionMode::Sample => dist.sample(rng).0,
            ActionMode::Mode => dist.mode(),
            ActionMode::Binary => dist.mode().round(),
        };
        state.apply(a.clamp(0.0, 1.0));
        if let Some((head, th)) = early_stop {
            if crate::env::softmax_terminated(head, &state.aggregate(), th)? {
                break;
            }
        }
    }
    Ok((state.weights().to_vec(), state.visited()))
}
