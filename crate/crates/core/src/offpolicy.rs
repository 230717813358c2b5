//! Experience replay with truncated importance sampling and a trust region
//! around a slowly moving average policy.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{
    beta_kl, beta_kl_grad_second, AgentForward, AgentGrads, AgentOptimizer, AgentParams,
    BetaPolicy, PolicyPath, Trajectory,
};
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrustRegionConfig {
    /// Bound on the first-order KL change along the update.
    pub xi: f64,
    /// Average-policy rate: `θ_a ← α θ_a + (1 − α) θ`.
    pub alpha: f64,
    /// Importance-ratio truncation.
    pub c: f64,
}

impl Default for TrustRegionConfig {
    fn default() -> Self {
        Self {
            xi: 1.0,
            alpha: 0.995,
            c: 5.0,
        }
    }
}

impl TrustRegionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.xi > 0.0 && self.xi.is_finite()) {
            return Err(Error::Config(format!("xi = {} must be positive", self.xi)));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha = {} outside (0, 1]", self.alpha)));
        }
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::Config(format!("c = {} must be positive", self.c)));
        }
        Ok(())
    }
}

/// Bounded FIFO of whole trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayPool {
    capacity: usize,
    entries: VecDeque<Trajectory>,
}

impl ReplayPool {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            entries: VecDeque::with_capacity(capacity.min(1 << 16)),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Stores a trajectory, evicting the oldest one when full.
    pub fn push(&mut self, traj: Trajectory) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(traj);
    }

    pub fn get(&self, i: usize) -> Option<&Trajectory> {
        self.entries.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Trajectory> {
        self.entries.iter()
    }

    /// Uniform draws with replacement.
    pub fn sample<'a, R: Rng + ?Sized>(&'a self, n: usize, rng: &mut R) -> Vec<&'a Trajectory> {
        if self.entries.is_empty() {
            return Vec::new();
        }
        (0..n)
            .map(|_| &self.entries[rng.gen_range(0..self.entries.len())])
            .collect()
    }

    pub fn encode(&self, w: &mut Writer) {
        w.u64(self.capacity as u64);
        w.u64(self.entries.len() as u64);
        for t in &self.entries {
            t.encode(w);
        }
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let at = r.offset();
        let capacity = r.u64()? as usize;
        let n = r.len_prefix(8)?;
        if capacity == 0 || n > capacity {
            return Err(Error::format(at, format!("pool holds {n} of capacity {capacity}")));
        }
        let mut pool = Self::new(capacity)?;
        for _ in 0..n {
            pool.entries.push_back(Trajectory::decode(r)?);
        }
        Ok(pool)
    }
}

/// `min(π(a|s) / μ(a|s), c)` from log-densities.
pub fn is_ratio(current_log_prob: f64, behavior_log_prob: f64, c: f64) -> f64 {
    (current_log_prob - behavior_log_prob).exp().min(c)
}

/// Off-policy return from the first step of `rewards`:
/// `r_0 + Σ_k γ^k r_k Π_{i=1..k} ρ_i`. `ratios` is aligned with `rewards`,
/// so `ratios[0]` never enters.
pub fn off_policy_return(rewards: &[f64], ratios: &[f64], gamma: f64) -> Result<f64> {
    if rewards.len() != ratios.len() {
        return Err(Error::dim("ratios", rewards.len(), ratios.len()));
    }
    if rewards.is_empty() {
        return Err(Error::invalid("empty reward sequence"));
    }
    let mut total = rewards[0];
    let mut coef = 1.0;
    for k in 1..rewards.len() {
        coef *= gamma * ratios[k];
        total += coef * rewards[k];
    }
    Ok(total)
}

/// Returns for every step via `R̄_t = r_t + γ ρ_{t+1} R̄_{t+1}`.
pub fn off_policy_returns(rewards: &[f64], ratios: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if rewards.len() != ratios.len() {
        return Err(Error::dim("ratios", rewards.len(), ratios.len()));
    }
    let mut out = vec![0.0; rewards.len()];
    let mut next = 0.0;
    for t in (0..rewards.len()).rev() {
        let carry = if t + 1 < rewards.len() {
            gamma * ratios[t + 1] * next
        } else {
            0.0
        };
        out[t] = rewards[t] + carry;
        next = out[t];
    }
    Ok(out)
}

/// Truncated ratios of the current policy against the stored behavior densities.
pub fn trajectory_ratios(params: &AgentParams, traj: &Trajectory, c: f64) -> Result<Vec<f64>> {
    traj.steps
        .iter()
        .map(|s| {
            let d = crate::agent::policy_forward(params, &s.state)?;
            Ok(is_ratio(d.log_prob(s.action), s.behavior_log_prob, c))
        })
        .collect()
}

/// `Σ_t (R̄_t − V(s_t)) ∇V(s_t) Π_{i≤t} ρ_i`, an ascent direction for the
/// value path. Returns the gradient and the ratios used.
pub fn off_value_gradient(
    params: &AgentParams,
    traj: &Trajectory,
    c: f64,
) -> Result<(AgentGrads, Vec<f64>)> {
    let ratios = trajectory_ratios(params, traj, c)?;
    let grads = off_value_gradient_with(params, traj, &ratios)?;
    Ok((grads, ratios))
}

/// [`off_value_gradient`] with the ratios supplied.
pub fn off_value_gradient_with(
    params: &AgentParams,
    traj: &Trajectory,
    ratios: &[f64],
) -> Result<AgentGrads> {
    if ratios.len() != traj.len() {
        return Err(Error::dim("ratios", traj.len(), ratios.len()));
    }
    let rewards: Vec<f64> = traj.steps.iter().map(|s| s.reward).collect();
    let returns = off_policy_returns(&rewards, ratios, params.gamma)?;
    let mut grads = AgentGrads::zeros(params);
    let mut prod = 1.0;
    for (t, step) in traj.steps.iter().enumerate() {
        prod *= ratios[t];
        let fwd = AgentForward::new(params, &step.state)?;
        let coef = (returns[t] - fwd.value_estimate) * prod;
        if coef != 0.0 {
            grads.add_scaled(&fwd.backward(params, [0.0, 0.0], coef)?, 1.0);
        }
    }
    Ok(grads)
}

/// `Σ_t ρ_t δ̂_t ∇ log π(a_t|s_t)` over the policy path, with `δ̂` the TD
/// error of the current value function. Returns the gradient and the ratios.
pub fn off_policy_gradient(
    params: &AgentParams,
    traj: &Trajectory,
    c: f64,
) -> Result<(AgentGrads, Vec<f64>)> {
    let mut grads = AgentGrads::zeros(params);
    let mut ratios = Vec::with_capacity(traj.len());
    for step in &traj.steps {
        let fwd = AgentForward::new(params, &step.state)?;
        let rho = is_ratio(fwd.dist.log_prob(step.action), step.behavior_log_prob, c);
        ratios.push(rho);
        let next = match (&step.next_state, step.done) {
            (Some(s), false) => crate::agent::value_forward(params, s)?,
            _ => 0.0,
        };
        let delta = step.reward + params.gamma * next - fwd.value_estimate;
        let up = fwd.log_prob_upstream(step.action);
        let s = rho * delta;
        if s != 0.0 {
            grads.add_scaled(&fwd.backward(params, [s * up[0], s * up[1]], 0.0)?, 1.0);
        }
    }
    Ok((grads, ratios))
}

/// `KL(π_{θ_a}(s) ‖ π_θ(s))` and its gradient over θ's policy path (trunk
/// then policy branch, flattened).
pub fn kl_gradient(
    params: &AgentParams,
    average: &PolicyPath,
    state: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let fwd = AgentForward::new(params, state)?;
    let avg = average.distribution(state)?;
    let kl = beta_kl(&avg, &fwd.dist);
    let g = fwd.dist.shapes_to_raw(beta_kl_grad_second(&avg, &fwd.dist));
    let grads = fwd.backward(params, g, 0.0)?;
    Ok((kl, grads.policy_path_flat()))
}

/// `z = g − max((k·g − ξ) / ‖k‖², 0) k`: the closest point to `g` with `k·z ≤ ξ`.
pub fn trust_region_project(g: &[f64], k: &[f64], xi: f64) -> Result<Vec<f64>> {
    if g.len() != k.len() {
        return Err(Error::dim("trust-region k", g.len(), k.len()));
    }
    let kg: f64 = k.iter().zip(g).map(|(a, b)| a * b).sum();
    let kk: f64 = k.iter().map(|a| a * a).sum();
    if kk == 0.0 || kg <= xi {
        return Ok(g.to_vec());
    }
    let scale = (kg - xi) / kk;
    Ok(g.iter().zip(k).map(|(gi, ki)| gi - scale * ki).collect())
}

/// Element-wise `α θ_a + (1 − α) θ`.
pub fn soft_update_average(theta_a: &[f64], theta: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if theta_a.len() != theta.len() {
        return Err(Error::dim("average policy", theta.len(), theta_a.len()));
    }
    Ok(theta_a
        .iter()
        .zip(theta)
        .map(|(a, t)| alpha * a + (1.0 - alpha) * t)
        .collect())
}

/// Slow copy `θ_a` of the live policy path.
#[derive(Debug, Clone, PartialEq)]
pub struct AveragePolicy {
    pub path: PolicyPath,
}

impl AveragePolicy {
    pub fn from_params(params: &AgentParams) -> Self {
        Self {
            path: params.policy_path(),
        }
    }

    pub fn distribution(&self, state: &[f64]) -> Result<BetaPolicy> {
        self.path.distribution(state)
    }

    pub fn soft_update(&mut self, params: &AgentParams, alpha: f64) -> Result<()> {
        let live = params.policy_path();
        if !self.path.trunk.same_shape(&live.trunk) || !self.path.policy.same_shape(&live.policy) {
            return Err(Error::invalid("average policy shape differs from the live policy"));
        }
        let t = self.path.trunk.num_params();
        let mixed = soft_update_average(&self.path.flat(), &live.flat(), alpha)?;
        self.path.trunk.set_flat_params(&mixed[..t])?;
        self.path.policy.set_flat_params(&mixed[t..])
    }

    pub fn encode(&self, w: &mut Writer) {
        self.path.encode(w);
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self> {
        Ok(Self {
            path: PolicyPath::decode(r)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ReplayDiagnostics {
    /// Trajectories used; 0 means the step was skipped.
    pub batch: usize,
    /// Mean `KL(π_{θ_a} ‖ π_θ)` over the batch states before the step.
    pub mean_kl: f64,
    /// Fraction of ratios that hit the truncation threshold.
    pub truncation_rate: f64,
    pub mean_abs_td: f64,
    /// Whether the trust-region constraint was active.
    pub projected: bool,
}

/// One replay update.
///
/// The batch-mean policy gradient (plus the value gradient's trunk share) is
/// turned into an Adam step direction, projected against the batch-mean KL
/// gradient and applied. The value branch takes its own Adam step, and the
/// average policy then moves toward the new parameters.
#[allow(clippy::too_many_arguments)]
pub fn replay_train_step<R: Rng + ?Sized>(
    params: &mut AgentParams,
    opt: &mut AgentOptimizer,
    average: &mut AveragePolicy,
    pool: &ReplayPool,
    cfg: &TrustRegionConfig,
    batch_size: usize,
    lr_policy: f64,
    lr_value: f64,
    rng: &mut R,
) -> Result<ReplayDiagnostics> {
    let batch = pool.sample(batch_size, rng);
    if batch.is_empty() {
        log::debug!("replay pool empty, skipping step");
        return Ok(ReplayDiagnostics::default());
    }
    let n = batch.len() as f64;
    let mut grads = AgentGrads::zeros(params);
    let mut k = vec![0.0; params.policy_path().num_params()];
    let mut kl_sum = 0.0;
    let mut states = 0usize;
    let mut truncated = 0usize;
    let mut ratio_count = 0usize;
    let mut abs_td = 0.0;
    for traj in &batch {
        let (pg, ratios) = off_policy_gradient(params, traj, cfg.c)?;
        let vg = off_value_gradient_with(params, traj, &ratios)?;
        grads.add_scaled(&pg, 1.0 / n);
        grads.add_scaled(&vg, 1.0 / n);
        for (step, &rho) in traj.steps.iter().zip(&ratios) {
            if rho >= cfg.c {
                truncated += 1;
            }
            ratio_count += 1;
            let (kl, g) = kl_gradient(params, &average.path, &step.state)?;
            kl_sum += kl;
            states += 1;
            crate::nn::axpy(&mut k, &g, 1.0);
            abs_td += crate::agent::td_error(params, step)?.abs();
        }
    }
    let m = states as f64;
    k.iter_mut().for_each(|v| *v /= m);

    let path_grad = grads.policy_path_flat();
    if path_grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite replay gradient".into()));
    }
    let nt = params.trunk.num_params();
    let mut dir = opt.trunk.direction(&path_grad[..nt]);
    dir.extend(opt.policy.direction(&path_grad[nt..]));
    let kd: f64 = k.iter().zip(&dir).map(|(a, b)| a * b).sum();
    let projected = kd > cfg.xi;
    let z = trust_region_project(&dir, &k, cfg.xi)?;
    let mut flat = params.policy_path_flat();
    crate::nn::axpy(&mut flat, &z, lr_policy);
    params.set_policy_path_flat(&flat)?;
    opt.value.ascend_net(&mut params.value, &grads.value, lr_value);
    average.soft_update(params, cfg.alpha)?;

    Ok(ReplayDiagnostics {
        batch: batch.len(),
        mean_kl: kl_sum / m,
        truncation_rate: truncated as f64 / ratio_count as f64,
        mean_abs_td: abs_td / m,
        projected,
    })
}
