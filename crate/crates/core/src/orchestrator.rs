//! Training sessions: warmup, simultaneous play, per-step learning, metrics
//! and checkpoints.
//!
//! Every session is sequential and deterministic given its seed. Random
//! numbers come from ChaCha8 streams keyed by the seed: stream 0 drives the
//! environment, stream `i + 1` drives agent `i` (initialisation, warmup
//! actions, exploration and batch sampling). Seeds therefore produce the
//! same results whatever order or thread they run on.

use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agent::{clip_action, Agent, AgentError, AgentHyper, LearnDiagnostics, LearnOutcome};
use crate::evalkit::{
    deviation_experiment, normalise_state, start_from_recent, AgentPolicy, DeviationConfig, DeviationResult, EvalError,
    PricingPolicy,
};
use crate::market::{env_step, scale_unchecked, Benchmarks, Market, MarketError, MarketParams, PriceHistory};
use crate::replay::{Experience, ReplayBuffer, ReplayError};
use crate::scalar::Scalar;

/// Realised prices kept for evaluation starts.
pub const RECENT_PRICES: usize = 50;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error("agent {agent} failed at step {step}: {source}")]
    Agent {
        agent: usize,
        step: u64,
        source: AgentError,
    },
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("invalid session config: {0}")]
    Config(String),
    #[error("degenerate benchmarks: monopoly and Nash profits coincide")]
    DegenerateBenchmarks,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Floating-point width used for training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn bytes(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

/// Everything that determines a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub market: MarketParams<f64>,
    pub hyper: AgentHyper,
    pub total_steps: u64,
    pub seed: u64,
    pub checkpoint_steps: Vec<u64>,
    /// Moving-average window of the profit-gain column.
    pub window: usize,
    /// Agent diagnostics are logged every this many steps.
    pub diag_every: u64,
    /// Whether checkpoints carry the replay buffers.
    pub checkpoint_replay: bool,
    pub precision: Precision,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            market: MarketParams::duopoly(),
            hyper: AgentHyper::default(),
            total_steps: 50_000,
            seed: 0,
            checkpoint_steps: vec![10_000, 20_000, 30_000, 40_000, 50_000],
            window: 1000,
            diag_every: 100,
            checkpoint_replay: true,
            precision: Precision::F32,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), SessionError> {
        self.market.validate()?;
        self.hyper.validate().map_err(|e| SessionError::Config(e.to_string()))?;
        if self.total_steps < self.hyper.batch_size as u64 {
            return Err(SessionError::Config(format!(
                "steps ({}) must be at least the batch size ({})",
                self.total_steps, self.hyper.batch_size
            )));
        }
        if let Some(s) = self.checkpoint_steps.iter().find(|&&s| s > self.total_steps || s == 0) {
            return Err(SessionError::Config(format!(
                "checkpoint step {s} outside 1..={}",
                self.total_steps
            )));
        }
        if self.window == 0 || self.diag_every == 0 {
            return Err(SessionError::Config(
                "window and diagnostics cadence must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON with the seed zeroed, so every seed
    /// of one experiment shares a hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.seed = 0;
        let json = serde_json::to_string(&c).expect("config serialises");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn state_dim(&self) -> usize {
        self.market.n * self.market.k
    }
}

/// ChaCha8 stream `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Serializable position of a ChaCha8 stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Normalised profit gain `(pi - pi_N) / (pi_M - pi_N)`.
pub fn profit_gain(pi_bar: f64, pi_nash: f64, pi_mono: f64) -> Result<f64, SessionError> {
    if pi_mono == pi_nash {
        return Err(SessionError::DegenerateBenchmarks);
    }
    Ok((pi_bar - pi_nash) / (pi_mono - pi_nash))
}

/// Trailing mean over `window` entries; early entries average the prefix.
pub fn moving_average(series: &[f64], window: usize) -> Vec<f64> {
    assert!(window >= 1, "moving-average window must be positive");
    (0..series.len())
        .map(|t| {
            let from = (t + 1).saturating_sub(window);
            let slice = &series[from..=t];
            slice.iter().sum::<f64>() / slice.len() as f64
        })
        .collect()
}

/// Value at 1-based order-statistic position `pos`, interpolating linearly
/// and clamping to the sample.
fn order_statistic(sorted: &[f64], pos: f64) -> f64 {
    let pos = pos.clamp(1.0, sorted.len() as f64) - 1.0;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Empirical 95% band across seeds at one time point: order statistics at
/// positions `0.025 n` and `0.975 n` (for 100 seeds, the mean of the 2nd
/// and 3rd and of the 97th and 98th values).
pub fn seed_band(values: &[f64]) -> Result<(f64, f64), SessionError> {
    if values.len() < 4 {
        return Err(SessionError::Config(format!(
            "a seed band needs at least 4 seeds, got {}",
            values.len()
        )));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    Ok((order_statistic(&v, 0.025 * n), order_statistic(&v, 0.975 * n)))
}

/// [`seed_band`] at every time index of equally long per-seed series.
pub fn seed_band_series(per_seed: &[Vec<f64>]) -> Result<Vec<(f64, f64)>, SessionError> {
    let len = per_seed.iter().map(Vec::len).min().unwrap_or(0);
    (0..len)
        .map(|t| seed_band(&per_seed.iter().map(|s| s[t]).collect::<Vec<_>>()))
        .collect()
}

/// One agent's diagnostics at a logged step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagRecord {
    pub step: u64,
    pub agent: usize,
    #[serde(flatten)]
    pub diag: LearnDiagnostics,
}

/// What happened in one period.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord<S> {
    /// Periods completed, counting this one.
    pub step: u64,
    pub prices: Vec<S>,
    pub profits: Vec<S>,
    /// Profit gain of this period's mean profit.
    pub gain: f64,
    /// Trailing moving average of `gain`.
    pub gain_ma: f64,
    /// Diagnostics of agents that learned this period.
    pub diagnostics: Vec<Option<LearnDiagnostics>>,
}

impl<S: Scalar> StepRecord<S> {
    /// `step,p_1..p_n,pi_1..pi_n,delta_ma` with '.' decimals and no locale.
    pub fn csv_row(&self) -> String {
        let mut line = self.step.to_string();
        for v in self.prices.iter().chain(&self.profits) {
            let _ = write!(line, ",{v}");
        }
        let _ = writeln!(line, ",{}", self.gain_ma);
        line
    }
}

pub fn csv_header(n: usize) -> String {
    let mut h = String::from("step");
    for i in 1..=n {
        let _ = write!(h, ",p_{i}");
    }
    for i in 1..=n {
        let _ = write!(h, ",pi_{i}");
    }
    h.push_str(",delta_ma\n");
    h
}

/// Receives a session's outputs as they are produced.
pub trait SessionSink<S: Scalar> {
    fn on_step(&mut self, record: &StepRecord<S>, session: &Session<S>) -> Result<(), SessionError>;
    fn on_checkpoint(&mut self, checkpoint: Checkpoint<S>) -> Result<(), SessionError>;
}

/// In-memory session log.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionLog<S> {
    pub prices: Vec<Vec<S>>,
    pub profits: Vec<Vec<S>>,
    pub gains: Vec<f64>,
    pub gain_ma: Vec<f64>,
    pub diagnostics: Vec<DiagRecord>,
    pub csv: String,
    pub checkpoints: Vec<Checkpoint<S>>,
}

impl<S: Scalar> SessionLog<S> {
    pub fn new(n: usize) -> Self {
        Self {
            prices: Vec::new(),
            profits: Vec::new(),
            gains: Vec::new(),
            gain_ma: Vec::new(),
            diagnostics: Vec::new(),
            csv: csv_header(n),
            checkpoints: Vec::new(),
        }
    }

    /// Mean per-period profit gain over the last `w` periods.
    pub fn final_gain(&self, w: usize) -> f64 {
        let from = self.gains.len().saturating_sub(w);
        let tail = &self.gains[from..];
        tail.iter().sum::<f64>() / tail.len() as f64
    }

    pub fn diagnostics_json(&self) -> String {
        diagnostics_json(&self.diagnostics)
    }
}

pub fn diagnostics_json(records: &[DiagRecord]) -> String {
    serde_json::to_string_pretty(&serde_json::json!({
        "schema_version": 1,
        "diagnostics": records,
    }))
    .expect("diagnostics serialise")
}

impl<S: Scalar> SessionSink<S> for SessionLog<S> {
    fn on_step(&mut self, r: &StepRecord<S>, session: &Session<S>) -> Result<(), SessionError> {
        self.prices.push(r.prices.clone());
        self.profits.push(r.profits.clone());
        self.gains.push(r.gain);
        self.gain_ma.push(r.gain_ma);
        self.csv.push_str(&r.csv_row());
        self.diagnostics.extend(session.diag_records(r));
        Ok(())
    }

    fn on_checkpoint(&mut self, checkpoint: Checkpoint<S>) -> Result<(), SessionError> {
        self.checkpoints.push(checkpoint);
        Ok(())
    }
}

/// Complete resumable state of a session after `step` periods.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<S> {
    pub config: SessionConfig,
    pub step: u64,
    pub bench: Benchmarks<S>,
    pub agents: Vec<Agent<S>>,
    /// Environment stream first, then one per agent.
    pub rngs: Vec<RngState>,
    pub history: PriceHistory<S>,
    /// Up to the last [`RECENT_PRICES`] realised joint prices.
    pub recent_prices: Vec<Vec<S>>,
    /// Per-period gains inside the current moving-average window.
    pub gain_window: Vec<f64>,
    pub buffers: Option<Vec<ReplayBuffer<S>>>,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn config_hash(&self) -> String {
        self.config.hash()
    }

    /// Mean per-period profit gain over the window ending at this step.
    pub fn recent_gain(&self) -> f64 {
        self.gain_window.iter().sum::<f64>() / self.gain_window.len().max(1) as f64
    }
}

/// A running training session.
#[derive(Debug, Clone)]
pub struct Session<S> {
    pub config: SessionConfig,
    pub market: Market<S>,
    pub agents: Vec<Agent<S>>,
    pub buffers: Vec<ReplayBuffer<S>>,
    pub env_rng: ChaCha8Rng,
    pub agent_rngs: Vec<ChaCha8Rng>,
    pub history: PriceHistory<S>,
    /// Periods completed.
    pub step: u64,
    pub recent_prices: VecDeque<Vec<S>>,
    pub gain_window: VecDeque<f64>,
}

/// Raw actions chosen for one period, before the environment moves.
#[derive(Debug, Clone, PartialEq)]
pub struct Actions<S> {
    pub state: Vec<S>,
    pub raw: Vec<S>,
}

impl<S: Scalar> Session<S> {
    pub fn new(config: SessionConfig) -> Result<Self, SessionError> {
        config.validate()?;
        let market = Market::new(config.market.cast::<S>())?;
        let n = market.n();
        let mut env_rng = stream_rng(config.seed, 0);
        let mut agent_rngs: Vec<ChaCha8Rng> = (0..n).map(|i| stream_rng(config.seed, i as u64 + 1)).collect();
        let agents = agent_rngs
            .iter_mut()
            .map(|rng| Agent::new(config.hyper.clone(), config.state_dim(), rng))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|source| SessionError::Agent {
                agent: 0,
                step: 0,
                source,
            })?;
        let (lo, hi) = market.bounds();
        let periods = (0..config.market.k)
            .map(|_| {
                (0..n)
                    .map(|_| S::lit(env_rng.random_range(lo.as_f64()..=hi.as_f64())))
                    .collect()
            })
            .collect();
        let buffers = (0..n)
            .map(|_| ReplayBuffer::new(config.hyper.buffer_size, config.state_dim()))
            .collect();
        Ok(Self {
            market,
            agents,
            buffers,
            env_rng,
            agent_rngs,
            history: PriceHistory::from_periods(periods),
            step: 0,
            recent_prices: VecDeque::with_capacity(RECENT_PRICES),
            gain_window: VecDeque::with_capacity(config.window),
            config,
        })
    }

    pub fn n(&self) -> usize {
        self.market.n()
    }

    pub fn in_warmup(&self) -> bool {
        self.step < self.config.hyper.batch_size as u64
    }

    /// Raw actions for the coming period: uniform during warmup, policy
    /// samples afterwards.
    pub fn act(&mut self) -> Result<Actions<S>, SessionError> {
        let state = normalise_state(&self.history, self.market.bounds());
        let warmup = self.in_warmup();
        let step = self.step;
        let raw = self
            .agents
            .iter()
            .zip(&mut self.agent_rngs)
            .enumerate()
            .map(|(i, (agent, rng))| {
                let x = if warmup {
                    S::lit(rng.random_range(-1.0..1.0))
                } else {
                    agent
                        .act(&state, rng)
                        .map_err(|source| SessionError::Agent { agent: i, step, source })?
                        .raw_action
                };
                Ok(clip_action(x))
            })
            .collect::<Result<Vec<_>, SessionError>>()?;
        Ok(Actions { state, raw })
    }

    /// Plays `actions`, stores each agent's own experience and lets every
    /// agent learn once (after warmup), in index order.
    pub fn advance(&mut self, actions: Actions<S>) -> Result<StepRecord<S>, SessionError> {
        let bounds = self.market.bounds();
        let prices: Vec<S> = actions.raw.iter().map(|&x| scale_unchecked(x, bounds)).collect();
        let (next, profits) = env_step(&self.market.params, &self.history, &prices)?;
        let next_state = normalise_state(&next, bounds);
        let learn = !self.in_warmup();
        let step = self.step;
        let mut diagnostics = vec![None; self.n()];
        for i in 0..self.n() {
            self.buffers[i].push(Experience {
                state: actions.state.clone(),
                action: actions.raw[i],
                reward: profits[i],
                next_state: next_state.clone(),
            })?;
            if learn {
                let outcome = self.agents[i]
                    .learn_step(&self.buffers[i], &mut self.agent_rngs[i])
                    .map_err(|source| SessionError::Agent { agent: i, step, source })?;
                if let LearnOutcome::Updated(d) = outcome {
                    diagnostics[i] = Some(d);
                }
            }
        }
        self.history = next;
        self.step += 1;
        if self.recent_prices.len() == RECENT_PRICES {
            self.recent_prices.pop_front();
        }
        self.recent_prices.push_back(prices.clone());
        let gain = self.market.profit_gain(&profits).as_f64();
        if self.gain_window.len() == self.config.window {
            self.gain_window.pop_front();
        }
        self.gain_window.push_back(gain);
        let gain_ma = self.gain_window.iter().sum::<f64>() / self.gain_window.len() as f64;
        Ok(StepRecord {
            step: self.step,
            prices,
            profits,
            gain,
            gain_ma,
            diagnostics,
        })
    }

    /// One full period.
    pub fn step_once(&mut self) -> Result<StepRecord<S>, SessionError> {
        let actions = self.act()?;
        self.advance(actions)
    }

    /// Diagnostics due for logging at this record's step.
    pub fn diag_records(&self, r: &StepRecord<S>) -> Vec<DiagRecord> {
        if !r.step.is_multiple_of(self.config.diag_every) {
            return Vec::new();
        }
        r.diagnostics
            .iter()
            .enumerate()
            .filter_map(|(agent, d)| {
                d.map(|diag| DiagRecord {
                    step: r.step,
                    agent,
                    diag,
                })
            })
            .collect()
    }

    /// Runs until `end` periods are complete, reporting to `sink` and
    /// emitting checkpoints at the configured steps.
    pub fn run_until(&mut self, end: u64, sink: &mut dyn SessionSink<S>) -> Result<(), SessionError> {
        while self.step < end {
            let record = self.step_once()?;
            sink.on_step(&record, self)?;
            if self.config.checkpoint_steps.contains(&self.step) {
                sink.on_checkpoint(self.checkpoint())?;
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint<S> {
        let mut rngs = vec![RngState::capture(&self.env_rng)];
        rngs.extend(self.agent_rngs.iter().map(RngState::capture));
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            bench: self.market.bench.clone(),
            agents: self.agents.clone(),
            rngs,
            history: self.history.clone(),
            recent_prices: self.recent_prices.iter().cloned().collect(),
            gain_window: self.gain_window.iter().copied().collect(),
            buffers: self.config.checkpoint_replay.then(|| self.buffers.clone()),
        }
    }

    /// Rebuilds a session. Without stored buffers the agents act from their
    /// policies and learning resumes once the buffers hold a batch again.
    pub fn restore(ckpt: Checkpoint<S>) -> Result<Self, SessionError> {
        ckpt.config.validate()?;
        let market = Market {
            params: ckpt.config.market.cast::<S>(),
            bench: ckpt.bench,
        };
        let n = market.n();
        if ckpt.agents.len() != n || ckpt.rngs.len() != n + 1 {
            return Err(SessionError::Checkpoint(format!(
                "{} agents and {} rng streams for {n} firms",
                ckpt.agents.len(),
                ckpt.rngs.len()
            )));
        }
        let buffers = match ckpt.buffers {
            Some(b) if b.len() == n => b,
            Some(b) => {
                return Err(SessionError::Checkpoint(format!(
                    "{} replay buffers for {n} firms",
                    b.len()
                )));
            }
            None => (0..n)
                .map(|_| ReplayBuffer::new(ckpt.config.hyper.buffer_size, ckpt.config.state_dim()))
                .collect(),
        };
        Ok(Self {
            market,
            agents: ckpt.agents,
            buffers,
            env_rng: ckpt.rngs[0].restore(),
            agent_rngs: ckpt.rngs[1..].iter().map(RngState::restore).collect(),
            history: ckpt.history,
            step: ckpt.step,
            recent_prices: ckpt.recent_prices.into(),
            gain_window: ckpt.gain_window.into(),
            config: ckpt.config,
        })
    }
}

/// Result of probing a session for profitable one-shot deviations.
#[derive(Debug, Clone, PartialEq)]
pub struct Verdict<S> {
    pub results: Vec<DeviationResult<S>>,
    /// True iff no agent gains (beyond round-off) from deviating.
    pub nash_convergent: bool,
}

impl<S> Verdict<S> {
    pub fn gains(&self) -> Vec<f64> {
        self.results.iter().map(|r| r.gain).collect()
    }
}

/// Runs the deviation experiment with every firm as deviator in turn.
pub fn verdict_for_policies<S: Scalar>(
    market: &Market<S>,
    policies: &[&dyn PricingPolicy<S>],
    start: &PriceHistory<S>,
    cfg: &DeviationConfig,
) -> Result<Verdict<S>, SessionError> {
    let results = (0..market.n())
        .map(|i| deviation_experiment(market, policies, start.clone(), i, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let nash_convergent = results.iter().all(|r| !r.profitable);
    Ok(Verdict {
        results,
        nash_convergent,
    })
}

/// Verdict for a checkpoint, agents playing mean actions from the average
/// of the last realised prices.
pub fn convergence_verdict<S: Scalar>(ckpt: &Checkpoint<S>, cfg: &DeviationConfig) -> Result<Verdict<S>, SessionError> {
    let market = Market {
        params: ckpt.config.market.cast::<S>(),
        bench: ckpt.bench.clone(),
    };
    let bounds = market.bounds();
    let policies: Vec<AgentPolicy<'_, S>> = ckpt.agents.iter().map(|agent| AgentPolicy { agent, bounds }).collect();
    let dyn_policies: Vec<&dyn PricingPolicy<S>> = policies.iter().map(|p| p as &dyn PricingPolicy<S>).collect();
    let start = start_from_recent(&ckpt.recent_prices, market.params.k)?;
    verdict_for_policies(&market, &dyn_policies, &start, cfg)
}

/// Runs a whole session in memory.
pub fn run_session<S: Scalar>(config: SessionConfig) -> Result<SessionLog<S>, SessionError> {
    let mut session = Session::<S>::new(config)?;
    let mut log = SessionLog::new(session.n());
    let end = session.config.total_steps;
    session.run_until(end, &mut log)?;
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalkit::{ConstantPolicy, GrimTrigger};

    fn tiny_config(steps: u64) -> SessionConfig {
        SessionConfig {
            hyper: AgentHyper {
                hidden_actor: 8,
                hidden_critic: 8,
                batch_size: 16,
                buffer_size: 64,
                ..AgentHyper::default()
            },
            total_steps: steps,
            checkpoint_steps: vec![steps / 2, steps],
            window: 10,
            diag_every: 5,
            precision: Precision::F64,
            ..SessionConfig::default()
        }
    }

    #[test]
    fn profit_gain_examples() {
        assert_eq!(profit_gain(0.2, 0.2, 0.4).unwrap(), 0.0);
        assert_eq!(profit_gain(0.4, 0.2, 0.4).unwrap(), 1.0);
        assert!((profit_gain(0.3, 0.2, 0.4).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(
            profit_gain(0.3, 0.2, 0.2),
            Err(SessionError::DegenerateBenchmarks)
        ));
    }

    #[test]
    fn moving_average_examples() {
        let c = vec![0.3; 50];
        for v in moving_average(&c, 7) {
            assert!((v - 0.3).abs() < 1e-15);
        }
        let s: Vec<f64> = (0..20).map(|t| t as f64 * 0.7).collect();
        assert_eq!(moving_average(&s, 1), s);
        let t0 = 10;
        let w = 5;
        let step: Vec<f64> = (0..30).map(|t| if t >= t0 { 1.0 } else { 0.0 }).collect();
        let ma = moving_average(&step, w);
        assert!(ma[t0 + w - 2] < 1.0);
        assert_eq!(ma[t0 + w - 1], 1.0);
        assert_eq!(moving_average(&[1.0, 3.0], 5), vec![1.0, 2.0]);
    }

    #[test]
    fn seed_band_examples() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(seed_band(&v).unwrap(), (2.5, 97.5));
        assert_eq!(seed_band(&[0.4; 10]).unwrap(), (0.4, 0.4));
        assert!(seed_band(&[1.0, 2.0, 3.0]).is_err());
        let odd = [5.0, -1.0, 2.0, 9.0, 0.5, 3.0, 7.0];
        let (lo, hi) = seed_band(&odd).unwrap();
        assert!(lo <= 3.0 && 3.0 <= hi);
    }

    #[test]
    fn config_hash_ignores_seed_only() {
        let a = tiny_config(40);
        let mut b = a.clone();
        b.seed = 9;
        assert_eq!(a.hash(), b.hash());
        b.hyper.tau = 0.002;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config(40);
        c.total_steps = 8;
        c.checkpoint_steps.clear();
        assert!(c.validate().is_err());
        let mut c = tiny_config(40);
        c.checkpoint_steps.push(41);
        assert!(c.validate().is_err());
    }

    #[test]
    fn pure_warmup_session() {
        let mut c = tiny_config(16);
        c.checkpoint_steps = vec![16];
        let log = run_session::<f64>(c).unwrap();
        assert_eq!(log.prices.len(), 16);
        assert!(log.diagnostics.is_empty());
        let ck = &log.checkpoints[0];
        assert_eq!(ck.agents, Session::<f64>::new(tiny_config(16)).unwrap().agents);
    }

    #[test]
    fn warmup_prices_are_uniform_on_the_box() {
        let mut c = tiny_config(10_000);
        c.hyper.batch_size = 10_000;
        c.hyper.buffer_size = 10_000;
        c.checkpoint_steps.clear();
        let log = run_session::<f64>(c).unwrap();
        let m = Market::new(MarketParams::<f64>::duopoly()).unwrap();
        let (lo, hi) = m.bounds();
        let mut xs: Vec<f64> = log.prices.iter().map(|p| (p[0] - lo) / (hi - lo)).collect();
        xs.sort_by(f64::total_cmp);
        let n = xs.len() as f64;
        let d = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| (x - i as f64 / n).abs().max(((i + 1) as f64 / n - x).abs()))
            .fold(0.0, f64::max);
        // Asymptotic Kolmogorov-Smirnov critical value at level 0.001.
        assert!(d < 1.949 / n.sqrt(), "D = {d}");
    }

    #[test]
    fn identical_seeds_give_identical_logs() {
        let a = run_session::<f64>(tiny_config(60)).unwrap();
        let b = run_session::<f64>(tiny_config(60)).unwrap();
        assert_eq!(a.csv, b.csv);
        assert_eq!(a.diagnostics_json(), b.diagnostics_json());
        assert_eq!(a.checkpoints, b.checkpoints);
        let mut other = tiny_config(60);
        other.seed = 1;
        assert_ne!(run_session::<f64>(other).unwrap().csv, a.csv);
    }

    #[test]
    fn log_shapes_and_bounds() {
        let log = run_session::<f32>(SessionConfig {
            precision: Precision::F32,
            ..tiny_config(60)
        })
        .unwrap();
        assert_eq!(log.csv.lines().count(), 61);
        assert_eq!(log.csv.lines().next().unwrap(), "step,p_1,p_2,pi_1,pi_2,delta_ma");
        // Diagnostics every 5 steps once learning starts at step 16.
        assert_eq!(log.diagnostics.len(), 2 * 9);
        let m = Market::new(MarketParams::<f64>::duopoly()).unwrap();
        for p in log.prices.iter().flatten() {
            let p = *p as f64;
            assert!(p >= m.bench.p_low - 1e-6 && p <= m.bench.p_high + 1e-6);
        }
        let g = log.final_gain(10);
        assert!(g.is_finite() && g > -0.1 - 1.0 && g < 2.0);
    }

    #[test]
    fn checkpoint_resume_is_bit_exact() {
        let cfg = tiny_config(60);
        let full = run_session::<f64>(cfg.clone()).unwrap();
        let mid = full.checkpoints[0].clone();
        assert_eq!(mid.step, 30);
        let mut resumed = Session::restore(mid).unwrap();
        let mut tail = SessionLog::new(2);
        resumed.run_until(60, &mut tail).unwrap();
        assert_eq!(&full.prices[30..], &tail.prices[..]);
        assert_eq!(&full.gain_ma[30..], &tail.gain_ma[..]);
        assert_eq!(full.checkpoints[1], tail.checkpoints[0]);
    }

    #[test]
    fn resume_without_buffers_refills_first() {
        let mut cfg = tiny_config(60);
        cfg.checkpoint_replay = false;
        let full = run_session::<f64>(cfg).unwrap();
        let mid = full.checkpoints[0].clone();
        assert!(mid.buffers.is_none());
        let mut s = Session::restore(mid).unwrap();
        let r = s.step_once().unwrap();
        assert!(r.diagnostics.iter().all(Option::is_none));
        for _ in 0..15 {
            s.step_once().unwrap();
        }
        assert!(s.step_once().unwrap().diagnostics.iter().all(Option::is_some));
    }

    #[test]
    fn learning_ignores_rival_internals() {
        let cfg = tiny_config(40);
        let mut clean = Session::<f64>::new(cfg.clone()).unwrap();
        for _ in 0..20 {
            clean.step_once().unwrap();
        }
        let mut poisoned = clean.clone();
        let a = clean.act().unwrap();
        let b = poisoned.act().unwrap();
        assert_eq!(a, b);
        // Corrupt everything private to firm 1 after actions are fixed.
        let rival = &mut poisoned.agents[1];
        rival.avg_reward = 1e6;
        rival.log_alpha = 5.0;
        for l in &mut rival.target1.layers {
            l.biases.iter_mut().for_each(|b| *b = -1e3);
        }
        rival.critic2 = rival.critic1.clone();
        poisoned.agent_rngs[1] = stream_rng(12345, 9);
        clean.advance(a).unwrap();
        poisoned.advance(b).unwrap();
        assert_eq!(clean.agents[0], poisoned.agents[0]);
        assert_eq!(clean.buffers[0], poisoned.buffers[0]);
        assert_eq!(
            RngState::capture(&clean.agent_rngs[0]),
            RngState::capture(&poisoned.agent_rngs[0])
        );
        assert_ne!(clean.agents[1], poisoned.agents[1]);
    }

    #[test]
    fn rng_state_round_trip() {
        let mut rng = stream_rng(7, 3);
        let _: u64 = rng.random();
        let saved = RngState::capture(&rng);
        let mut back = saved.restore();
        assert_eq!(rng.random::<u64>(), back.random::<u64>());
    }

    #[test]
    fn verdict_on_automata() {
        let m = Market::new(MarketParams::<f64>::duopoly()).unwrap();
        let pn = m.bench.p_nash[0];
        let pc = 0.5 * (pn + m.bench.p_mono[0]);
        let cfg = DeviationConfig::default();
        let nash = ConstantPolicy(pn);
        let start = PriceHistory::filled(1, vec![pn, pn]);
        assert!(
            verdict_for_policies(&m, &[&nash, &nash], &start, &cfg)
                .unwrap()
                .nash_convergent
        );
        let blind = ConstantPolicy(m.bench.p_high);
        let start = PriceHistory::filled(1, vec![m.bench.p_high; 2]);
        assert!(
            !verdict_for_policies(&m, &[&blind, &blind], &start, &cfg)
                .unwrap()
                .nash_convergent
        );
        let grim = GrimTrigger {
            collusive: pc,
            punishment: pn,
            band: 1e-3,
        };
        let start = PriceHistory::filled(1, vec![pc, pc]);
        let v = verdict_for_policies(&m, &[&grim, &grim], &start, &cfg).unwrap();
        assert!(v.nash_convergent);
        assert_eq!(v.gains().len(), 2);
    }

    #[test]
    fn verdict_from_checkpoint_runs() {
        let log = run_session::<f64>(tiny_config(40)).unwrap();
        let v = convergence_verdict(&log.checkpoints[1], &DeviationConfig::default()).unwrap();
        assert_eq!(v.results.len(), 2);
        assert!(v.results.iter().all(|r| r.gain.is_finite()));
    }
}
