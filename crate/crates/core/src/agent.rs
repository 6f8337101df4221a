//! Average-reward soft actor-critic.
//!
//! The actor outputs the mean and log-standard-deviation of a Gaussian whose
//! samples are squashed by `tanh` into `(-1, 1)`. Two critics score
//! `(state, action)` pairs, each with a Polyak-averaged target copy. The
//! temperature `alpha` is tuned so the policy's entropy tracks a target,
//! and a running estimate of the average reward replaces discounting in the
//! temporal-difference target.
//!
//! Network inputs are joint prices mapped back into action space with the
//! inverse of the price scaling, so states and actions share one `O(1)`
//! scale. Log-densities are taken in that raw action space.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netcore::{init_mlp, AdamState, Matrix, Mlp, MlpGrads, NetError, OutputInit, ScalarAdam};
use crate::replay::{Batch, ReplayBuffer, ReplayError};
use crate::scalar::Scalar;

/// Constant inside `log(1 - x^2 + eps)` of the squash correction.
pub const SQUASH_EPS: f64 = 1e-6;

/// Largest magnitude of an action handed to the environment.
pub const ACTION_LIMIT: f64 = 1.0 - 1e-6;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("invalid hyper-parameter: {0}")]
    InvalidHyper(String),
}

/// Learning hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentHyper {
    pub target_entropy: f64,
    pub hidden_actor: usize,
    pub hidden_critic: usize,
    pub layers_actor: usize,
    pub layers_critic: usize,
    pub batch_size: usize,
    pub buffer_size: usize,
    pub tau: f64,
    pub lambda_actor: f64,
    pub lambda_critic: f64,
    pub lambda_temperature: f64,
    pub lambda_reward: f64,
    pub log_std_min: f64,
    pub log_std_max: f64,
    /// Starting value of `log alpha`.
    pub initial_log_alpha: f64,
    pub leaky_slope: f64,
}

impl Default for AgentHyper {
    fn default() -> Self {
        Self {
            target_entropy: -1.0,
            hidden_actor: 1024,
            hidden_critic: 256,
            layers_actor: 2,
            layers_critic: 2,
            batch_size: 128,
            buffer_size: 100_000,
            tau: 0.001,
            lambda_actor: 0.03,
            lambda_critic: 0.003,
            lambda_temperature: 0.003,
            lambda_reward: 0.01,
            log_std_min: -5.0,
            log_std_max: 2.0,
            initial_log_alpha: 0.0,
            leaky_slope: crate::netcore::DEFAULT_LEAKY_SLOPE,
        }
    }
}

impl AgentHyper {
    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |what: &str| Err(AgentError::InvalidHyper(what.to_string()));
        if self.hidden_actor == 0 || self.hidden_critic == 0 {
            return bad("hidden widths must be positive");
        }
        if self.layers_actor == 0 || self.layers_critic == 0 {
            return bad("hidden layer counts must be positive");
        }
        if self.batch_size == 0 || self.buffer_size < self.batch_size {
            return bad("need 0 < batch_size <= buffer_size");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        let rates = [
            self.lambda_actor,
            self.lambda_critic,
            self.lambda_temperature,
            self.lambda_reward,
        ];
        if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return bad("step sizes must be positive");
        }
        if self.lambda_reward > 1.0 {
            return bad("lambda_reward must not exceed 1");
        }
        if !(self.log_std_min < self.log_std_max) {
            return bad("log-std clamp needs low < high");
        }
        if !self.target_entropy.is_finite() || !self.initial_log_alpha.is_finite() {
            return bad("target entropy and initial temperature must be finite");
        }
        Ok(())
    }

    fn clamp<S: Scalar>(&self) -> (S, S) {
        (S::lit(self.log_std_min), S::lit(self.log_std_max))
    }

    pub fn actor_sizes(&self, state_dim: usize) -> Vec<usize> {
        let mut sizes = vec![state_dim];
        sizes.extend(std::iter::repeat_n(self.hidden_actor, self.layers_actor));
        sizes.push(2);
        sizes
    }

    pub fn critic_sizes(&self, state_dim: usize) -> Vec<usize> {
        let mut sizes = vec![state_dim + 1];
        sizes.extend(std::iter::repeat_n(self.hidden_critic, self.layers_critic));
        sizes.push(1);
        sizes
    }
}

/// Output initialisation of the actor head: small uniform weights, mean bias
/// 0 and log-std bias 1.
pub fn actor_head_init() -> OutputInit {
    OutputInit::Uniform {
        gain: 0.1,
        biases: vec![0.0, 1.0],
    }
}

/// Output initialisation of a critic head: near-zero weights and an
/// optimistic bias of 10.
pub fn critic_head_init() -> OutputInit {
    OutputInit::Orthogonal { gain: 0.01, bias: 10.0 }
}

/// One squashed-Gaussian draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicySample<S> {
    /// Squashed action `tanh(pre_squash)`.
    pub raw_action: S,
    pub log_prob: S,
    pub pre_squash: S,
    pub mean: S,
    pub log_std: S,
    /// Standard-normal noise that produced the draw.
    pub noise: S,
}

/// Squash correction `-log(1 - x^2 + eps)`.
#[inline]
fn squash_penalty<S: Scalar>(x: S) -> S {
    penalty_from(S::one() - x * x)
}

#[inline]
fn penalty_from<S: Scalar>(one_minus_x2: S) -> S {
    -(one_minus_x2 + S::lit(SQUASH_EPS)).ln()
}

/// `1 - tanh(u)^2`, computed as `sech(u)^2` so it keeps full relative
/// precision where `tanh` saturates.
#[inline]
fn one_minus_tanh_sq<S: Scalar>(u: S) -> S {
    let sech = S::one() / u.cosh();
    sech * sech
}

/// Builds a sample from explicit noise: `u = mean + exp(log_std) noise`.
pub fn squashed_from_noise<S: Scalar>(mean: S, log_std: S, noise: S) -> PolicySample<S> {
    let u = mean + log_std.exp() * noise;
    let x = u.tanh();
    let log_prob = -noise * noise / S::lit(2.0) - log_std - S::lit(HALF_LN_2PI) + penalty_from(one_minus_tanh_sq(u));
    PolicySample {
        raw_action: x,
        log_prob,
        pre_squash: u,
        mean,
        log_std,
        noise,
    }
}

/// Draws a squashed-Gaussian action.
pub fn sample_squashed<S: Scalar, R: Rng + ?Sized>(mean: S, log_std: S, rng: &mut R) -> PolicySample<S> {
    let noise: f64 = StandardNormal.sample(rng);
    squashed_from_noise(mean, log_std, S::lit(noise))
}

/// Log-density of squashed action `x` under `(mean, log_std)`.
pub fn log_prob<S: Scalar>(x: S, mean: S, log_std: S) -> S {
    let u = x.atanh();
    let z = (u - mean) / log_std.exp();
    -z * z / S::lit(2.0) - log_std - S::lit(HALF_LN_2PI) + squash_penalty(x)
}

/// Pulls an action strictly inside the environment's open interval.
pub fn clip_action<S: Scalar>(x: S) -> S {
    let lim = S::lit(ACTION_LIMIT);
    x.max(-lim).min(lim)
}

/// Batched actor output.
#[derive(Debug, Clone)]
pub struct PolicyOutput<S> {
    pub means: Vec<S>,
    pub log_stds: Vec<S>,
    /// Whether the raw log-std was clamped (and so carries no gradient).
    pub clamped: Vec<bool>,
    cache: crate::netcore::ForwardCache<S>,
}

/// Runs the actor on a batch of states and clamps the log-std head.
pub fn policy_batch<S: Scalar>(
    actor: &Mlp<S>,
    states: &Matrix<S>,
    clamp: (S, S),
) -> Result<PolicyOutput<S>, AgentError> {
    let (out, cache) = actor.forward(states)?;
    if !out.is_finite() {
        return Err(AgentError::NonFinite("actor output"));
    }
    let rows = out.rows();
    let mut means = Vec::with_capacity(rows);
    let mut log_stds = Vec::with_capacity(rows);
    let mut clamped = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = out.row(r);
        means.push(row[0]);
        let raw = row[1];
        let ls = raw.max(clamp.0).min(clamp.1);
        clamped.push(ls != raw);
        log_stds.push(ls);
    }
    Ok(PolicyOutput {
        means,
        log_stds,
        clamped,
        cache,
    })
}

/// Mean of the two critics on `[states | actions]`.
pub fn twin_value<S: Scalar>(
    c1: &Mlp<S>,
    c2: &Mlp<S>,
    states: &Matrix<S>,
    actions: &[S],
) -> Result<Vec<S>, AgentError> {
    let input = critic_input(states, actions)?;
    let q1 = c1.forward(&input)?.0;
    let q2 = c2.forward(&input)?.0;
    let half = S::lit(0.5);
    Ok(q1
        .as_slice()
        .iter()
        .zip(q2.as_slice())
        .map(|(&a, &b)| half * (a + b))
        .collect())
}

/// Appends the action column to a state batch.
pub fn critic_input<S: Scalar>(states: &Matrix<S>, actions: &[S]) -> Result<Matrix<S>, AgentError> {
    let col = Matrix::from_vec(actions.len(), 1, actions.to_vec())?;
    Ok(states.hstack(&col)?)
}

/// Reparameterised actor objective `mean[alpha logp - q(s, a)]` and its
/// gradient in the actor parameters, for fixed noise and frozen critics.
#[derive(Debug, Clone)]
pub struct ActorObjective<S> {
    pub loss: S,
    pub grads: MlpGrads<S>,
    pub samples: Vec<PolicySample<S>>,
}

/// Evaluates the actor objective and its parameter gradient.
pub fn actor_objective<S: Scalar>(
    actor: &Mlp<S>,
    critic1: &Mlp<S>,
    critic2: &Mlp<S>,
    states: &Matrix<S>,
    noise: &[S],
    alpha: S,
    clamp: (S, S),
) -> Result<ActorObjective<S>, AgentError> {
    let policy = policy_batch(actor, states, clamp)?;
    actor_objective_from(actor, critic1, critic2, states, &policy, noise, alpha)
}

fn actor_objective_from<S: Scalar>(
    actor: &Mlp<S>,
    critic1: &Mlp<S>,
    critic2: &Mlp<S>,
    states: &Matrix<S>,
    policy: &PolicyOutput<S>,
    noise: &[S],
    alpha: S,
) -> Result<ActorObjective<S>, AgentError> {
    let b = states.rows();
    let samples: Vec<PolicySample<S>> = (0..b)
        .map(|r| squashed_from_noise(policy.means[r], policy.log_stds[r], noise[r]))
        .collect();
    let actions: Vec<S> = samples.iter().map(|s| s.raw_action).collect();
    let input = critic_input(states, &actions)?;
    let (q1, cache1) = critic1.forward(&input)?;
    let (q2, cache2) = critic2.forward(&input)?;
    let inv_b = S::one() / S::lit(b as f64);
    let half = S::lit(0.5);
    // d(-q)/dq_j = -1/2 per critic, averaged over the batch.
    let dq = Matrix::from_vec(b, 1, vec![-half * inv_b; b])?;
    let gx1 = critic1.input_gradient(&cache1, &dq)?;
    let gx2 = critic2.input_gradient(&cache2, &dq)?;
    let a_col = input.cols() - 1;

    let mut loss = S::zero();
    let mut dout = Matrix::zeros(b, 2);
    for (r, s) in samples.iter().enumerate() {
        let q = half * (q1.as_slice()[r] + q2.as_slice()[r]);
        loss += (alpha * s.log_prob - q) * inv_b;
        let x = s.raw_action;
        let one_minus = one_minus_tanh_sq(s.pre_squash);
        // Gradient of the loss with respect to the squashed action.
        let d_x = gx1.get(r, a_col) + gx2.get(r, a_col);
        // Total derivative in the pre-squash value.
        let d_penalty = S::lit(2.0) * x * one_minus / (one_minus + S::lit(SQUASH_EPS));
        let d_u = alpha * inv_b * d_penalty + d_x * one_minus;
        let d_mean = d_u;
        let d_log_std = -alpha * inv_b + d_u * s.log_std.exp() * s.noise;
        dout.set(r, 0, d_mean);
        dout.set(r, 1, if policy.clamped[r] { S::zero() } else { d_log_std });
    }
    let (grads, _) = actor.backward(&policy.cache, &dout)?;
    Ok(ActorObjective { loss, grads, samples })
}

/// Mean squared error of a critic against targets, with its gradient.
pub fn critic_objective<S: Scalar>(
    critic: &Mlp<S>,
    inputs: &Matrix<S>,
    targets: &[S],
) -> Result<(S, MlpGrads<S>), AgentError> {
    let (q, cache) = critic.forward(inputs)?;
    let b = targets.len();
    let inv_b = S::one() / S::lit(b as f64);
    let mut loss = S::zero();
    let mut dq = Vec::with_capacity(b);
    for (&qv, &y) in q.as_slice().iter().zip(targets) {
        let e = qv - y;
        loss += e * e * inv_b;
        dq.push(S::lit(2.0) * e * inv_b);
    }
    let (grads, _) = critic.backward(&cache, &Matrix::from_vec(b, 1, dq)?)?;
    Ok((loss, grads))
}

/// Temperature objective `log_alpha * (entropy - target)` where the entropy
/// is estimated as the mean of `-log_probs`.
pub fn temperature_loss<S: Scalar>(log_alpha: S, log_probs: &[S], target_entropy: S) -> S {
    log_alpha * (entropy_estimate(log_probs) - target_entropy)
}

/// Derivative of [`temperature_loss`] in `log_alpha`.
pub fn temperature_gradient<S: Scalar>(log_probs: &[S], target_entropy: S) -> S {
    entropy_estimate(log_probs) - target_entropy
}

pub fn entropy_estimate<S: Scalar>(log_probs: &[S]) -> S {
    -log_probs.iter().copied().sum::<S>() / S::lit(log_probs.len() as f64)
}

/// Average-reward recursion `(1 - rate) pi + rate (r + q_next - q_curr)`.
pub fn avg_reward_update<S: Scalar>(avg: S, reward: S, q_next: S, q_curr: S, rate: S) -> S {
    (S::one() - rate) * avg + rate * (reward + q_next - q_curr)
}

/// Soft TD target `r - pi_hat - alpha logp' + q_target(s', a')`.
pub fn td_target_value<S: Scalar>(reward: S, avg_reward: S, alpha: S, next_log_prob: S, next_target_q: S) -> S {
    reward - avg_reward - alpha * next_log_prob + next_target_q
}

/// Summary of one learn step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearnDiagnostics {
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub temperature_loss: f64,
    pub alpha: f64,
    pub avg_reward: f64,
    pub entropy: f64,
}

/// Result of asking an agent to learn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LearnOutcome {
    /// The buffer holds fewer than a batch of experiences.
    WarmingUp {
        len: usize,
        batch: usize,
    },
    Updated(LearnDiagnostics),
}

/// One learning firm.
#[derive(Debug, Clone, PartialEq)]
pub struct Agent<S> {
    pub hyper: AgentHyper,
    pub state_dim: usize,
    pub actor: Mlp<S>,
    pub critic1: Mlp<S>,
    pub critic2: Mlp<S>,
    pub target1: Mlp<S>,
    pub target2: Mlp<S>,
    pub log_alpha: S,
    pub avg_reward: S,
    pub actor_opt: AdamState<S>,
    pub critic1_opt: AdamState<S>,
    pub critic2_opt: AdamState<S>,
    pub alpha_opt: ScalarAdam<S>,
}

impl<S: Scalar> Agent<S> {
    /// Fresh agent observing `state_dim` normalised prices. Targets start as
    /// copies of their critics.
    pub fn new<R: Rng + ?Sized>(hyper: AgentHyper, state_dim: usize, rng: &mut R) -> Result<Self, AgentError> {
        hyper.validate()?;
        let slope = S::lit(hyper.leaky_slope);
        let actor = init_mlp(&hyper.actor_sizes(state_dim), slope, &actor_head_init(), rng);
        let critic1 = init_mlp(&hyper.critic_sizes(state_dim), slope, &critic_head_init(), rng);
        let critic2 = init_mlp(&hyper.critic_sizes(state_dim), slope, &critic_head_init(), rng);
        Ok(Self {
            log_alpha: S::lit(hyper.initial_log_alpha),
            avg_reward: S::zero(),
            actor_opt: AdamState::new(&actor),
            critic1_opt: AdamState::new(&critic1),
            critic2_opt: AdamState::new(&critic2),
            alpha_opt: ScalarAdam::default(),
            target1: critic1.clone(),
            target2: critic2.clone(),
            actor,
            critic1,
            critic2,
            state_dim,
            hyper,
        })
    }

    pub fn alpha(&self) -> S {
        self.log_alpha.exp()
    }

    fn clamp(&self) -> (S, S) {
        self.hyper.clamp()
    }

    /// `(mean, log_std)` for one state, log-std clamped.
    pub fn policy_forward(&self, state: &[S]) -> Result<(S, S), AgentError> {
        let out = policy_batch(&self.actor, &Matrix::row_vector(state), self.clamp())?;
        Ok((out.means[0], out.log_stds[0]))
    }

    /// Stochastic action for acting in the environment.
    pub fn act<R: Rng + ?Sized>(&self, state: &[S], rng: &mut R) -> Result<PolicySample<S>, AgentError> {
        let (mean, log_std) = self.policy_forward(state)?;
        Ok(sample_squashed(mean, log_std, rng))
    }

    /// Deterministic action `tanh(mean)`, exploration switched off.
    pub fn mean_action(&self, state: &[S]) -> Result<S, AgentError> {
        Ok(self.policy_forward(state)?.0.tanh())
    }

    /// Mean of the two online critics.
    pub fn critic_value(&self, state: &[S], action: S) -> Result<S, AgentError> {
        Ok(twin_value(&self.critic1, &self.critic2, &Matrix::row_vector(state), &[action])?[0])
    }

    /// Fresh squashed samples at each state row.
    fn sample_batch<R: Rng + ?Sized>(
        &self,
        states: &Matrix<S>,
        rng: &mut R,
    ) -> Result<(PolicyOutput<S>, Vec<S>), AgentError> {
        let policy = policy_batch(&self.actor, states, self.clamp())?;
        let noise = (0..states.rows()).map(|_| S::lit(StandardNormal.sample(rng))).collect();
        Ok((policy, noise))
    }

    /// TD targets for a batch together with the target-network values at
    /// the sampled next actions.
    pub fn td_target<R: Rng + ?Sized>(&self, batch: &Batch<S>, rng: &mut R) -> Result<TdTargets<S>, AgentError> {
        let (policy, noise) = self.sample_batch(&batch.next_states, rng)?;
        let samples: Vec<PolicySample<S>> = (0..batch.len())
            .map(|r| squashed_from_noise(policy.means[r], policy.log_stds[r], noise[r]))
            .collect();
        let next_actions: Vec<S> = samples.iter().map(|s| s.raw_action).collect();
        let q_next = twin_value(&self.target1, &self.target2, &batch.next_states, &next_actions)?;
        let alpha = self.alpha();
        let targets = (0..batch.len())
            .map(|r| td_target_value(batch.rewards[r], self.avg_reward, alpha, samples[r].log_prob, q_next[r]))
            .collect();
        Ok(TdTargets { targets, q_next })
    }

    /// One Adam step on `log_alpha`; returns the loss before the step.
    pub fn temperature_update(&mut self, log_probs: &[S]) -> Result<S, AgentError> {
        let h = S::lit(self.hyper.target_entropy);
        let loss = temperature_loss(self.log_alpha, log_probs, h);
        let grad = temperature_gradient(log_probs, h);
        self.alpha_opt
            .step(&mut self.log_alpha, grad, S::lit(self.hyper.lambda_temperature))?;
        Ok(loss)
    }

    /// One Adam step on the actor against the online critics with noise
    /// `noise`; returns the objective before the step.
    pub fn actor_update(&mut self, states: &Matrix<S>, noise: &[S]) -> Result<S, AgentError> {
        let obj = actor_objective(
            &self.actor,
            &self.critic1,
            &self.critic2,
            states,
            noise,
            self.alpha(),
            self.clamp(),
        )?;
        self.apply_actor(obj)
    }

    fn apply_actor(&mut self, obj: ActorObjective<S>) -> Result<S, AgentError> {
        if !obj.loss.is_finite() {
            return Err(AgentError::NonFinite("actor loss"));
        }
        self.actor_opt
            .step(&mut self.actor, &obj.grads, S::lit(self.hyper.lambda_actor))?;
        Ok(obj.loss)
    }

    /// One Adam step on both critics toward the shared TD targets, followed
    /// by the average-reward update on the batch. Returns the mean of the
    /// two critics' losses.
    pub fn critic_update<R: Rng + ?Sized>(&mut self, batch: &Batch<S>, rng: &mut R) -> Result<S, AgentError> {
        let td = self.td_target(batch, rng)?;
        let inputs = critic_input(&batch.states, &batch.actions)?;
        let (l1, g1) = critic_objective(&self.critic1, &inputs, &td.targets)?;
        let (l2, g2) = critic_objective(&self.critic2, &inputs, &td.targets)?;
        let loss = S::lit(0.5) * (l1 + l2);
        if !loss.is_finite() {
            return Err(AgentError::NonFinite("critic loss"));
        }
        let lr = S::lit(self.hyper.lambda_critic);
        self.critic1_opt.step(&mut self.critic1, &g1, lr)?;
        self.critic2_opt.step(&mut self.critic2, &g2, lr)?;

        let q_curr = twin_value(&self.target1, &self.target2, &batch.states, &batch.actions)?;
        let inv_b = S::one() / S::lit(batch.len() as f64);
        let mean_r = batch.rewards.iter().copied().sum::<S>() * inv_b;
        let mean_next = td.q_next.iter().copied().sum::<S>() * inv_b;
        let mean_curr = q_curr.iter().copied().sum::<S>() * inv_b;
        self.avg_reward = avg_reward_update(
            self.avg_reward,
            mean_r,
            mean_next,
            mean_curr,
            S::lit(self.hyper.lambda_reward),
        );
        if !self.avg_reward.is_finite() {
            return Err(AgentError::NonFinite("average reward estimate"));
        }
        Ok(loss)
    }

    /// Polyak step of both targets toward their critics.
    pub fn target_update(&mut self) {
        let tau = S::lit(self.hyper.tau);
        self.target1.soft_update_from(&self.critic1, tau);
        self.target2.soft_update_from(&self.critic2, tau);
    }

    /// Full update: temperature, actor, critics (with the average reward),
    /// then targets. Fresh actor samples are shared by the temperature and
    /// actor steps.
    pub fn learn_step<R: Rng + ?Sized>(
        &mut self,
        buffer: &ReplayBuffer<S>,
        rng: &mut R,
    ) -> Result<LearnOutcome, AgentError> {
        let b = self.hyper.batch_size;
        if let Err(ReplayError::WarmingUp { len, batch }) = buffer.ready(b) {
            return Ok(LearnOutcome::WarmingUp { len, batch });
        }
        let batch = buffer.sample_uniform(b, rng)?;
        self.learn_on_batch(&batch, rng).map(LearnOutcome::Updated)
    }

    /// The update sequence of [`Agent::learn_step`] on a given batch.
    pub fn learn_on_batch<R: Rng + ?Sized>(
        &mut self,
        batch: &Batch<S>,
        rng: &mut R,
    ) -> Result<LearnDiagnostics, AgentError> {
        let (policy, noise) = self.sample_batch(&batch.states, rng)?;
        let log_probs: Vec<S> = (0..batch.len())
            .map(|r| squashed_from_noise(policy.means[r], policy.log_stds[r], noise[r]).log_prob)
            .collect();
        let entropy = entropy_estimate(&log_probs);
        let temperature_loss = self.temperature_update(&log_probs)?;

        // The actor has not moved since `policy` was computed, so its cache
        // is reused for the reparameterised gradient.
        let obj = actor_objective_from(
            &self.actor,
            &self.critic1,
            &self.critic2,
            &batch.states,
            &policy,
            &noise,
            self.alpha(),
        )?;
        let actor_loss = self.apply_actor(obj)?;
        let critic_loss = self.critic_update(batch, rng)?;
        self.target_update();
        Ok(LearnDiagnostics {
            actor_loss: actor_loss.as_f64(),
            critic_loss: critic_loss.as_f64(),
            temperature_loss: temperature_loss.as_f64(),
            alpha: self.alpha().as_f64(),
            avg_reward: self.avg_reward.as_f64(),
            entropy: entropy.as_f64(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.actor.is_finite()
            && self.critic1.is_finite()
            && self.critic2.is_finite()
            && self.target1.is_finite()
            && self.target2.is_finite()
            && self.log_alpha.is_finite()
            && self.avg_reward.is_finite()
    }
}

/// TD targets and the twin-target values at the sampled next actions.
#[derive(Debug, Clone, PartialEq)]
pub struct TdTargets<S> {
    pub targets: Vec<S>,
    pub q_next: Vec<S>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::Layer;
    use crate::replay::Experience;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_hyper() -> AgentHyper {
        AgentHyper {
            hidden_actor: 8,
            hidden_critic: 8,
            batch_size: 4,
            buffer_size: 16,
            ..AgentHyper::default()
        }
    }

    /// Single-layer network with all weights zero and the given biases.
    fn constant_net(inputs: usize, biases: &[f64]) -> Mlp<f64> {
        let mut net = Mlp::zeros(&[inputs, biases.len()], 0.01);
        net.layers[0] = Layer {
            weights: Matrix::zeros(biases.len(), inputs),
            biases: biases.to_vec(),
        };
        net
    }

    fn batch_of(exps: &[Experience<f64>]) -> Batch<f64> {
        let d = exps[0].state.len();
        let flat = |f: &dyn Fn(&Experience<f64>) -> Vec<f64>| -> Vec<f64> { exps.iter().flat_map(f).collect() };
        Batch {
            states: Matrix::from_vec(exps.len(), d, flat(&|e| e.state.clone())).unwrap(),
            actions: exps.iter().map(|e| e.action).collect(),
            rewards: exps.iter().map(|e| e.reward).collect(),
            next_states: Matrix::from_vec(exps.len(), d, flat(&|e| e.next_state.clone())).unwrap(),
        }
    }

    fn agent() -> (Agent<f64>, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        (Agent::new(small_hyper(), 2, &mut rng).unwrap(), rng)
    }

    #[test]
    fn fresh_heads_match_bias_conventions() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Agent::<f64>::new(AgentHyper::default(), 2, &mut rng).unwrap();
        let (mean, log_std) = a.policy_forward(&[0.0, 0.0]).unwrap();
        assert!(mean.abs() < 0.05, "{mean}");
        assert!((log_std - 1.0).abs() < 0.05, "{log_std}");
        let q = a.critic_value(&[0.0, 0.0], 0.0).unwrap();
        assert!((q - 10.0).abs() < 0.05, "{q}");
        assert_eq!(a.target1, a.critic1);
    }

    #[test]
    fn log_std_is_clamped() {
        let (mut a, _) = agent();
        a.actor = constant_net(2, &[0.0, 50.0]);
        assert_eq!(a.policy_forward(&[0.3, 0.1]).unwrap().1, 2.0);
        a.actor = constant_net(2, &[0.0, -50.0]);
        assert_eq!(a.policy_forward(&[0.3, 0.1]).unwrap().1, -5.0);
    }

    #[test]
    fn policy_is_deterministic_per_parameters() {
        let (a, _) = agent();
        assert_eq!(
            a.policy_forward(&[0.2, -0.4]).unwrap(),
            a.policy_forward(&[0.2, -0.4]).unwrap()
        );
    }

    #[test]
    fn log_prob_symmetry() {
        for (x, m, s) in [(0.3, 0.1, -0.5), (-0.9, 1.2, 0.4), (0.0, -0.7, 1.0)] {
            let lhs: f64 = log_prob(x, m, s);
            let rhs = log_prob(-x, -m, s);
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn sample_log_prob_matches_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let s = sample_squashed(0.3f64, -0.2, &mut rng);
            assert_eq!(s.raw_action, s.pre_squash.tanh());
            let direct = log_prob(s.raw_action, 0.3, -0.2);
            assert!((direct - s.log_prob).abs() < 1e-8, "{direct} vs {}", s.log_prob);
        }
    }

    #[test]
    fn narrow_policy_concentrates() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let wide = sample_squashed(0.0, 0.0, &mut rng).log_prob;
        let s = sample_squashed(0.0f64, -5.0, &mut rng);
        assert!(s.raw_action.abs() < 0.05);
        assert!(s.log_prob > wide + 3.0);
    }

    #[test]
    fn monte_carlo_entropy_matches_quadrature() {
        // Entropy of tanh(N(0,1)) by quadrature over the pre-squash value:
        // H = H_normal + E[log(1 - tanh(u)^2)].
        let h = 1e-3;
        let mut expect_log_jac = 0.0;
        let mut u = -12.0;
        while u <= 12.0 {
            let w = (-u * u / 2.0f64).exp() / (2.0 * std::f64::consts::PI).sqrt();
            expect_log_jac += w * (1.0 - u.tanh().powi(2) + SQUASH_EPS).ln() * h;
            u += h;
        }
        let exact = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln() + expect_log_jac;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 1_000_000;
        let mc = -(0..n)
            .map(|_| sample_squashed(0.0, 0.0, &mut rng).log_prob)
            .sum::<f64>()
            / n as f64;
        assert!((mc - exact).abs() < 0.02, "mc {mc} exact {exact}");
    }

    #[test]
    fn mean_action_examples() {
        let (mut a, _) = agent();
        a.actor = constant_net(2, &[0.0, 0.0]);
        assert_eq!(a.mean_action(&[0.5, 0.5]).unwrap(), 0.0);
        a.actor = constant_net(2, &[40.0, 0.0]);
        assert!(a.mean_action(&[0.5, 0.5]).unwrap() > 1.0 - 1e-12);
    }

    #[test]
    fn mean_action_is_small_sigma_mode() {
        let (a, mut rng) = agent();
        for _ in 0..10 {
            let s = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let (m, _) = a.policy_forward(&s).unwrap();
            let draw = sample_squashed(m, -30.0, &mut rng).raw_action;
            assert!((draw - a.mean_action(&s).unwrap()).abs() < 1e-10);
        }
    }

    #[test]
    fn critic_value_is_twin_mean() {
        let (mut a, _) = agent();
        a.critic1 = constant_net(3, &[3.0]);
        a.critic2 = constant_net(3, &[5.0]);
        assert_eq!(a.critic_value(&[0.0, 0.0], 0.2).unwrap(), 4.0);
        a.critic2 = a.critic1.clone();
        assert_eq!(a.critic_value(&[0.0, 0.0], 0.2).unwrap(), 3.0);
    }

    #[test]
    fn td_target_arithmetic() {
        assert_eq!(td_target_value(1.0, 0.0, 0.0, -3.0, 10.0), 11.0);
        assert_eq!(td_target_value(0.5, 0.5, 0.0, -3.0, 10.0), 10.0);
        let (mut a, mut rng) = agent();
        a.target1 = constant_net(3, &[10.0]);
        a.target2 = constant_net(3, &[10.0]);
        a.log_alpha = f64::NEG_INFINITY;
        let e = Experience {
            state: vec![0.1, 0.2],
            action: 0.3,
            reward: 1.0,
            next_state: vec![0.0, 0.5],
        };
        let td = a.td_target(&batch_of(&[e]), &mut rng).unwrap();
        assert_eq!(td.targets, vec![11.0]);
    }

    #[test]
    fn td_target_fixed_point_single_state() {
        // One state, reward r every period: the differential value is
        // constant, so with pi_hat = r and alpha = 0 the target equals q.
        let (mut a, mut rng) = agent();
        let q = 4.0;
        for net in [&mut a.critic1, &mut a.critic2, &mut a.target1, &mut a.target2] {
            *net = constant_net(3, &[q]);
        }
        a.log_alpha = f64::NEG_INFINITY;
        a.avg_reward = 0.7;
        let e = Experience {
            state: vec![0.0, 0.0],
            action: 0.1,
            reward: 0.7,
            next_state: vec![0.0, 0.0],
        };
        let td = a.td_target(&batch_of(&[e.clone(), e]), &mut rng).unwrap();
        for y in td.targets {
            assert!((y - a.critic_value(&[0.0, 0.0], 0.1).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn avg_reward_arithmetic() {
        assert!((avg_reward_update(0.0f64, 1.0, 2.0, 2.5, 0.01) - 0.005).abs() < 1e-15);
        assert_eq!(avg_reward_update(0.3, 1.0, 2.0, 2.5, 1.0), 0.5);
    }

    #[test]
    fn avg_reward_two_state_mdp() {
        // Deterministic alternation s0 -> s1 -> s0 with rewards 1 and 3.
        // Differential values: q(s0) = -0.5, q(s1) = 0.5, average 2.
        let q = [-0.5, 0.5];
        let r = [1.0, 3.0];
        let mut avg = 0.0f64;
        for t in 0..2000 {
            let s = t % 2;
            avg = avg_reward_update(avg, r[s], q[1 - s], q[s], 0.01);
        }
        assert!((avg - 2.0).abs() < 1e-3, "{avg}");
    }

    #[test]
    fn temperature_direction() {
        for (entropy, dir) in [(-1.0, 0), (-2.0, 1), (0.0, -1)] {
            let (mut a, _) = agent();
            let before = a.alpha();
            a.temperature_update(&[-entropy; 4]).unwrap();
            let after = a.alpha();
            match dir {
                0 => assert_eq!(after, before),
                1 => assert!(after > before),
                _ => assert!(after < before),
            }
            assert!(after > 0.0);
        }
    }

    #[test]
    fn target_update_extremes() {
        let (mut a, _) = agent();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        a.critic1 = init_mlp(&[3, 8, 8, 1], 0.01, &critic_head_init(), &mut rng);
        let original = a.target1.clone();
        a.hyper.tau = 1.0;
        a.target_update();
        assert_eq!(a.target1, a.critic1);

        let mut u = constant_net(3, &[0.0]);
        u.soft_update_from(&constant_net(3, &[1.0]), 0.001);
        assert!((u.layers[0].biases[0] - 0.001).abs() < 1e-15);
        a.target1 = original.clone();
        a.target1.soft_update_from(&a.critic1, 0.0);
        assert_eq!(a.target1, original);
    }

    #[test]
    fn targets_lag_but_approach() {
        let (mut a, _) = agent();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w_final = init_mlp(&[3, 8, 8, 1], 0.01, &critic_head_init(), &mut rng);
        let start_gap = a.target1.max_abs_diff(&w_final);
        let w0 = a.critic1.clone();
        for t in 0..1000 {
            // Online weights converge geometrically toward w_final.
            let mix = 1.0 - 0.99f64.powi(t + 1);
            let mut w = w0.clone();
            w.soft_update_from(&w_final, mix);
            a.critic1 = w;
            a.target_update();
        }
        assert!(a.target1.max_abs_diff(&w_final) < start_gap);
        assert!(a.target1.max_abs_diff(&a.critic1) > 0.0);
    }

    #[test]
    fn critic_update_at_targets_is_stationary() {
        let (mut a, mut rng) = agent();
        for net in [&mut a.critic1, &mut a.critic2, &mut a.target1, &mut a.target2] {
            *net = constant_net(3, &[2.0]);
        }
        a.log_alpha = f64::NEG_INFINITY;
        a.avg_reward = 0.5;
        let e = Experience {
            state: vec![0.0, 0.1],
            action: 0.2,
            reward: 0.5,
            next_state: vec![0.1, 0.0],
        };
        let before = a.critic1.clone();
        let loss = a.critic_update(&batch_of(&[e.clone(), e]), &mut rng).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(a.critic1, before);
    }

    #[test]
    fn critic_step_shrinks_error() {
        // Bias-only critic: q = b, target y = 1.
        let mut c = constant_net(1, &[0.0]);
        let mut opt = AdamState::new(&c);
        let input = Matrix::from_vec(1, 1, vec![0.0]).unwrap();
        let (before, g) = critic_objective(&c, &input, &[1.0]).unwrap();
        opt.step(&mut c, &g, 0.003).unwrap();
        let (after, _) = critic_objective(&c, &input, &[1.0]).unwrap();
        assert!(after < before);
    }

    #[test]
    fn flat_objective_gives_zero_actor_gradient() {
        let (a, mut rng) = agent();
        let c = constant_net(3, &[7.0]);
        let states = Matrix::from_vec(3, 2, (0..6).map(|i| i as f64 / 10.0).collect()).unwrap();
        let noise: Vec<f64> = (0..3).map(|_| StandardNormal.sample(&mut rng)).collect();
        let obj = actor_objective(&a.actor, &c, &c, &states, &noise, 0.0, (-5.0, 2.0)).unwrap();
        assert!(obj.grads.flatten().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn actor_climbs_quadratic_critic() {
        // Synthetic critic peaked at x* = 0.3 on a fixed state.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let hyper = AgentHyper {
            hidden_actor: 16,
            hidden_critic: 8,
            lambda_actor: 0.01,
            ..small_hyper()
        };
        let mut a = Agent::<f64>::new(hyper, 2, &mut rng).unwrap();
        a.log_alpha = -20.0;
        // q = 10 - 5 |x - 0.3| from a ReLU pair on the action input.
        let mut q = Mlp::zeros(&[3, 2, 1], 0.0);
        q.layers[0].weights = Matrix::from_vec(2, 3, vec![0.0, 0.0, 1.0, 0.0, 0.0, -1.0]).unwrap();
        q.layers[0].biases = vec![-0.3, 0.3];
        q.layers[1].weights = Matrix::from_vec(1, 2, vec![-5.0, -5.0]).unwrap();
        q.layers[1].biases = vec![10.0];
        a.critic1 = q.clone();
        a.critic2 = q;
        let state = [0.25, -0.4];
        let states = Matrix::from_vec(32, 2, state.repeat(32)).unwrap();
        for _ in 0..400 {
            let noise: Vec<f64> = (0..32).map(|_| StandardNormal.sample(&mut rng)).collect();
            a.actor_update(&states, &noise).unwrap();
        }
        let x = a.mean_action(&state).unwrap();
        assert!((x - 0.3).abs() < 0.05, "{x}");
    }

    #[test]
    fn learn_step_warms_up_then_moves_everything() {
        let (mut a, mut rng) = agent();
        let mut buf = ReplayBuffer::new(16, 2);
        let e = |t: f64| Experience {
            state: vec![t / 10.0, -t / 10.0],
            action: 0.1 * (t / 3.0).sin(),
            reward: 0.2 + t / 100.0,
            next_state: vec![(t + 1.0) / 10.0, 0.0],
        };
        buf.push(e(0.0)).unwrap();
        assert_eq!(
            a.learn_step(&buf, &mut rng).unwrap(),
            LearnOutcome::WarmingUp { len: 1, batch: 4 }
        );
        for t in 1..8 {
            buf.push(e(t as f64)).unwrap();
        }
        let before = a.clone();
        let LearnOutcome::Updated(d) = a.learn_step(&buf, &mut rng).unwrap() else {
            panic!("expected an update");
        };
        assert!(a.is_finite());
        assert!(a.actor != before.actor && a.critic1 != before.critic1 && a.critic2 != before.critic2);
        assert!(a.target1 != before.target1 && a.target2 != before.target2);
        assert!(a.log_alpha != before.log_alpha && a.avg_reward != before.avg_reward);
        for v in [d.actor_loss, d.critic_loss, d.alpha, d.avg_reward, d.entropy] {
            assert!(v.is_finite());
        }
    }

    #[test]
    fn learn_steps_are_reproducible() {
        let run = || {
            let (mut a, mut rng) = agent();
            let mut buf = ReplayBuffer::new(16, 2);
            for t in 0..10 {
                let t = t as f64;
                buf.push(Experience {
                    state: vec![t / 10.0, 0.5],
                    action: 0.3,
                    reward: t,
                    next_state: vec![0.5, t / 10.0],
                })
                .unwrap();
            }
            (0..100)
                .map(|_| match a.learn_step(&buf, &mut rng).unwrap() {
                    LearnOutcome::Updated(d) => d,
                    other => panic!("{other:?}"),
                })
                .collect::<Vec<_>>()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| {
            x.actor_loss.to_bits() == y.actor_loss.to_bits() && x.critic_loss.to_bits() == y.critic_loss.to_bits()
        }));
        assert_eq!(a, b);
    }
}
