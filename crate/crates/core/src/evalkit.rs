//! Post-training diagnostics with learning switched off.
//!
//! Everything here treats pricing rules as deterministic maps from the price
//! memory to a price: trained agents through their mean action, plus simple
//! automata (constant, grim trigger) that serve as closed-form fixtures.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{clip_action, Agent, AgentError};
use crate::market::{env_step, scale_unchecked, unscale_price, Benchmarks, Market, MarketError, PriceHistory};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("non-finite price from the policy of firm {0}; the checkpoint may be corrupt")]
    NonFinitePolicy(usize),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("not enough data: {0}")]
    Insufficient(String),
    #[error("undefined: {0}")]
    Undefined(String),
}

/// A deterministic pricing rule.
pub trait PricingPolicy<S: Scalar> {
    fn price(&self, history: &PriceHistory<S>) -> Result<S, EvalError>;
}

impl<S: Scalar, F: Fn(&PriceHistory<S>) -> S> PricingPolicy<S> for F {
    fn price(&self, history: &PriceHistory<S>) -> Result<S, EvalError> {
        Ok(self(history))
    }
}

/// A trained agent playing its mean action.
#[derive(Debug, Clone, Copy)]
pub struct AgentPolicy<'a, S> {
    pub agent: &'a Agent<S>,
    pub bounds: (S, S),
}

impl<S: Scalar> PricingPolicy<S> for AgentPolicy<'_, S> {
    fn price(&self, history: &PriceHistory<S>) -> Result<S, EvalError> {
        let state = normalise_state(history, self.bounds);
        let x = clip_action(self.agent.mean_action(&state)?);
        Ok(scale_unchecked(x, self.bounds))
    }
}

/// Normalised network input for a price memory.
pub fn normalise_state<S: Scalar>(history: &PriceHistory<S>, bounds: (S, S)) -> Vec<S> {
    history
        .flatten()
        .into_iter()
        .map(|p| unscale_price(p, bounds))
        .collect()
}

/// Always the same price, whatever happened.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantPolicy<S>(pub S);

impl<S: Scalar> PricingPolicy<S> for ConstantPolicy<S> {
    fn price(&self, _: &PriceHistory<S>) -> Result<S, EvalError> {
        Ok(self.0)
    }
}

/// Prices collusively while every last price lies within `band` of the
/// collusive price, and at the punishment price otherwise.
///
/// With one period of memory the punishment is absorbing: once anyone
/// leaves the band, everyone plays the punishment price from then on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrimTrigger<S> {
    pub collusive: S,
    pub punishment: S,
    pub band: S,
}

impl<S: Scalar> PricingPolicy<S> for GrimTrigger<S> {
    fn price(&self, history: &PriceHistory<S>) -> Result<S, EvalError> {
        let cooperating = history
            .latest()
            .iter()
            .all(|&p| (p - self.collusive).abs() <= self.band);
        Ok(if cooperating { self.collusive } else { self.punishment })
    }
}

/// Joint prices chosen by all policies on the same memory.
pub fn play<S: Scalar>(policies: &[&dyn PricingPolicy<S>], history: &PriceHistory<S>) -> Result<Vec<S>, EvalError> {
    policies
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let price = p.price(history)?;
            if price.is_finite() {
                Ok(price)
            } else {
                Err(EvalError::NonFinitePolicy(i))
            }
        })
        .collect()
}

/// Price forced on the deviator in period 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DeviationPrice {
    /// Static best response to the rivals' last prices.
    BestResponse,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviationConfig {
    /// Evaluation-only discount factor.
    pub delta: f64,
    /// Periods entering the discounted gain.
    pub horizon: usize,
    /// Mean-play periods before the deviation.
    pub settle: usize,
    /// Post-deviation periods recorded (at least `horizon`).
    pub record: usize,
    pub price: DeviationPrice,
}

impl Default for DeviationConfig {
    fn default() -> Self {
        Self {
            delta: 0.95,
            horizon: 10,
            settle: 50,
            record: 11,
            price: DeviationPrice::BestResponse,
        }
    }
}

/// Gains up to this size (profit units) count as unprofitable: they are
/// round-off around an exact best response.
pub const GAIN_TOLERANCE: f64 = 1e-9;

/// Outcome of forcing one firm off its policy for one period.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationResult<S> {
    pub deviator: usize,
    /// Joint prices during the settle phase.
    pub settle_path: Vec<Vec<S>>,
    /// Joint prices in the period before the deviation.
    pub pre_prices: Vec<S>,
    pub deviation_path: Vec<Vec<S>>,
    pub deviation_profits: Vec<Vec<S>>,
    pub baseline_path: Vec<Vec<S>>,
    pub baseline_profits: Vec<Vec<S>>,
    /// `sum_{t < horizon} delta^t (pi_dev_t - pi_base_t)` for the deviator.
    pub gain: f64,
    pub profitable: bool,
}

/// Starting memory for evaluation: the mean of recently realised prices,
/// repeated over the memory length.
pub fn start_from_recent<S: Scalar>(recent: &[Vec<S>], k: usize) -> Result<PriceHistory<S>, EvalError> {
    let first = recent
        .first()
        .ok_or_else(|| EvalError::Insufficient("no realised prices to start from".into()))?;
    let mut mean = vec![S::zero(); first.len()];
    for p in recent {
        for (m, &v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    let count = S::lit(recent.len() as f64);
    mean.iter_mut().for_each(|m| *m /= count);
    Ok(PriceHistory::filled(k, mean))
}

/// Price path, profit path and final memory of a rollout.
type Rollout<S> = (Vec<Vec<S>>, Vec<Vec<S>>, PriceHistory<S>);

fn rollout<S: Scalar>(
    market: &Market<S>,
    policies: &[&dyn PricingPolicy<S>],
    mut history: PriceHistory<S>,
    periods: usize,
    forced: Option<(usize, S)>,
) -> Result<Rollout<S>, EvalError> {
    let mut path = Vec::with_capacity(periods);
    let mut profits = Vec::with_capacity(periods);
    for t in 0..periods {
        let mut prices = play(policies, &history)?;
        if let (0, Some((i, p))) = (t, forced) {
            prices[i] = p;
        }
        let (next, pi) = env_step(&market.params, &history, &prices)?;
        history = next;
        path.push(prices);
        profits.push(pi);
    }
    Ok((path, profits, history))
}

/// Settles, then forces `deviator` off its policy for one period and
/// compares against the undisturbed continuation.
pub fn deviation_experiment<S: Scalar>(
    market: &Market<S>,
    policies: &[&dyn PricingPolicy<S>],
    start: PriceHistory<S>,
    deviator: usize,
    cfg: &DeviationConfig,
) -> Result<DeviationResult<S>, EvalError> {
    if policies.len() != market.n() || deviator >= market.n() {
        return Err(EvalError::Unsupported(format!(
            "{} policies and deviator {deviator} for {} firms",
            policies.len(),
            market.n()
        )));
    }
    let record = cfg.record.max(cfg.horizon);
    let (settle_path, _, settled) = rollout(market, policies, start, cfg.settle, None)?;
    let pre_prices = settled.latest().to_vec();
    let (baseline_path, baseline_profits, _) = rollout(market, policies, settled.clone(), record, None)?;
    let forced = match cfg.price {
        DeviationPrice::BestResponse => market.best_response(&pre_prices, deviator)?,
        DeviationPrice::Fixed(p) => S::lit(p),
    };
    let (deviation_path, deviation_profits, _) = rollout(market, policies, settled, record, Some((deviator, forced)))?;
    let gain: f64 = (0..cfg.horizon)
        .map(|t| {
            cfg.delta.powi(t as i32)
                * (deviation_profits[t][deviator].as_f64() - baseline_profits[t][deviator].as_f64())
        })
        .sum();
    if !gain.is_finite() {
        return Err(EvalError::NonFinitePolicy(deviator));
    }
    Ok(DeviationResult {
        deviator,
        settle_path,
        pre_prices,
        deviation_path,
        deviation_profits,
        baseline_path,
        baseline_profits,
        gain,
        profitable: gain > GAIN_TOLERANCE,
    })
}

/// Percentile by linear interpolation between order statistics
/// (position `q (n - 1)` in the sorted sample).
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty sample");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// One checkpoint's row of the deviation-gain table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainRow {
    pub checkpoint: u64,
    pub count: usize,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub mean: f64,
    /// Fraction of gains `<= 0`.
    pub unprofitable_share: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainTable {
    pub rows: Vec<GainRow>,
}

pub const BOOTSTRAP_RESAMPLES: usize = 5000;

/// Summarises pooled gains per checkpoint with a bootstrap interval on the
/// unprofitable share.
pub fn gain_table(groups: &BTreeMap<u64, Vec<f64>>, resamples: usize, seed: u64) -> Result<GainTable, EvalError> {
    let mut rows = Vec::with_capacity(groups.len());
    for (&checkpoint, gains) in groups {
        if gains.len() < 2 {
            return Err(EvalError::Insufficient(format!(
                "checkpoint {checkpoint} has {} gains, need at least 2",
                gains.len()
            )));
        }
        let s = sorted(gains);
        let n = gains.len();
        let share = |xs: &mut dyn Iterator<Item = f64>| xs.filter(|g| *g <= 0.0).count() as f64 / n as f64;
        let unprofitable_share = share(&mut gains.iter().copied());
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ checkpoint);
        let mut shares: Vec<f64> = (0..resamples)
            .map(|_| share(&mut (0..n).map(|_| gains[rng.random_range(0..n)])))
            .collect();
        shares.sort_by(f64::total_cmp);
        let (ci_low, ci_high) = if shares.is_empty() {
            (unprofitable_share, unprofitable_share)
        } else {
            (percentile(&shares, 0.025), percentile(&shares, 0.975))
        };
        rows.push(GainRow {
            checkpoint,
            count: n,
            p25: percentile(&s, 0.25),
            p50: percentile(&s, 0.5),
            p75: percentile(&s, 0.75),
            mean: gains.iter().sum::<f64>() / n as f64,
            unprofitable_share,
            ci_low,
            ci_high,
        });
    }
    Ok(GainTable { rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Deviator,
    Compliant,
}

/// Distribution of price changes at one relative step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpulseRow {
    pub role: Role,
    /// Period relative to the deviation; `-1` is the reference period.
    pub step: i64,
    pub count: usize,
    pub p5: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub p95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpulseReport {
    /// True when no deviation results were supplied.
    pub empty: bool,
    pub rows: Vec<ImpulseRow>,
}

/// Per-step distributions of `price - pre-deviation price` for the
/// deviator and for the average of the compliant firms.
pub fn impulse_response_stats<S: Scalar>(results: &[DeviationResult<S>]) -> ImpulseReport {
    let Some(steps) = results.iter().map(|r| r.deviation_path.len()).min() else {
        return ImpulseReport {
            empty: true,
            rows: Vec::new(),
        };
    };
    let mut rows = Vec::new();
    for role in [Role::Deviator, Role::Compliant] {
        for step in -1..steps as i64 {
            let deltas: Vec<f64> = results
                .iter()
                .filter_map(|r| {
                    let n = r.pre_prices.len();
                    let delta = |j: usize| {
                        if step < 0 {
                            0.0
                        } else {
                            r.deviation_path[step as usize][j].as_f64() - r.pre_prices[j].as_f64()
                        }
                    };
                    match role {
                        Role::Deviator => Some(delta(r.deviator)),
                        Role::Compliant if n > 1 => {
                            let others: Vec<usize> = (0..n).filter(|&j| j != r.deviator).collect();
                            Some(others.iter().map(|&j| delta(j)).sum::<f64>() / others.len() as f64)
                        }
                        Role::Compliant => None,
                    }
                })
                .collect();
            if deltas.is_empty() {
                continue;
            }
            let s = sorted(&deltas);
            rows.push(ImpulseRow {
                role,
                step,
                count: s.len(),
                p5: percentile(&s, 0.05),
                p25: percentile(&s, 0.25),
                p50: percentile(&s, 0.5),
                p75: percentile(&s, 0.75),
                p95: percentile(&s, 0.95),
            });
        }
    }
    ImpulseReport { empty: false, rows }
}

/// Iterates of the joint mean-play map from one starting point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// Visited joint prices, the start first.
    pub points: Vec<Vec<f64>>,
    /// Euclidean length of each step.
    pub magnitudes: Vec<f64>,
    /// Whether iteration stopped because a step fell below the tolerance.
    pub converged: bool,
    pub cycle: Option<usize>,
}

impl Trajectory {
    pub fn end(&self) -> &[f64] {
        self.points.last().expect("trajectories hold their start")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhasePortrait {
    /// Grid coordinates per axis (empty for sampled starts).
    pub axis: Vec<f64>,
    pub trajectories: Vec<Trajectory>,
    pub fixed_points: Vec<FixedPoint>,
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Evenly spaced grid including both ends; a single point sits mid-box.
pub fn linspace(lo: f64, hi: f64, g: usize) -> Vec<f64> {
    match g {
        0 => Vec::new(),
        1 => vec![0.5 * (lo + hi)],
        _ => (0..g).map(|i| lo + (hi - lo) * i as f64 / (g - 1) as f64).collect(),
    }
}

/// Iterates the joint mean-play map from `start` (memory filled with it).
pub fn trace<S: Scalar>(
    market: &Market<S>,
    policies: &[&dyn PricingPolicy<S>],
    start: &[f64],
    max_iters: usize,
    tol: f64,
    max_period: usize,
) -> Result<Trajectory, EvalError> {
    let to_s = |v: &[f64]| v.iter().map(|&x| S::lit(x)).collect::<Vec<S>>();
    let mut history = PriceHistory::filled(market.params.k, to_s(start));
    let mut points = vec![start.to_vec()];
    let mut magnitudes = Vec::new();
    let mut converged = false;
    for _ in 0..max_iters {
        let next = play(policies, &history)?;
        let next64: Vec<f64> = next.iter().map(|p| p.as_f64()).collect();
        let step = euclidean(&next64, points.last().expect("non-empty"));
        history = env_step(&market.params, &history, &next)?.0;
        points.push(next64);
        magnitudes.push(step);
        if step < tol {
            converged = true;
            break;
        }
    }
    let cycle = if converged {
        None
    } else {
        detect_cycles(&points, max_period, tol)
    };
    Ok(Trajectory {
        points,
        magnitudes,
        converged,
        cycle,
    })
}

pub const DEFAULT_MAX_PERIOD: usize = 8;

/// Full `g x g` portrait over the price box of a duopoly.
pub fn phase_portrait<S: Scalar>(
    market: &Market<S>,
    policies: &[&dyn PricingPolicy<S>],
    grid: usize,
    max_iters: usize,
    tol: f64,
) -> Result<PhasePortrait, EvalError> {
    if market.n() != 2 {
        return Err(EvalError::Unsupported(format!(
            "full phase portraits need two firms, market has {}; use sampled starts",
            market.n()
        )));
    }
    let (lo, hi) = market.bounds();
    let axis = linspace(lo.as_f64(), hi.as_f64(), grid);
    let starts: Vec<Vec<f64>> = axis
        .iter()
        .flat_map(|&x| axis.iter().map(move |&y| vec![x, y]))
        .collect();
    let mut portrait = trajectories_from(market, policies, &starts, max_iters, tol)?;
    portrait.axis = axis;
    Ok(portrait)
}

/// Trajectory bundle from arbitrary starting joint prices (any `n`).
pub fn trajectories_from<S: Scalar>(
    market: &Market<S>,
    policies: &[&dyn PricingPolicy<S>],
    starts: &[Vec<f64>],
    max_iters: usize,
    tol: f64,
) -> Result<PhasePortrait, EvalError> {
    let trajectories = starts
        .iter()
        .map(|s| trace(market, policies, s, max_iters, tol, DEFAULT_MAX_PERIOD))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PhasePortrait {
        axis: Vec::new(),
        trajectories,
        fixed_points: Vec::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixedPointClass {
    NearNash,
    SupraCompetitive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPoint {
    pub prices: Vec<f64>,
    pub basin_cells: usize,
    /// Fraction of trajectories ending here.
    pub basin_share: f64,
    pub class: FixedPointClass,
}

/// Clusters converged trajectory endpoints and classifies each cluster.
pub fn find_fixed_points<S: Scalar>(portrait: &PhasePortrait, tol_fp: f64, bench: &Benchmarks<S>) -> Vec<FixedPoint> {
    let total = portrait.trajectories.len();
    let mut clusters: Vec<(Vec<f64>, usize)> = Vec::new();
    for t in &portrait.trajectories {
        let settled = t.magnitudes.last().is_some_and(|m| *m < tol_fp);
        if !settled {
            continue;
        }
        let end = t.end();
        match clusters.iter_mut().find(|(c, _)| euclidean(c, end) <= 2.0 * tol_fp) {
            Some((_, count)) => *count += 1,
            None => clusters.push((end.to_vec(), 1)),
        }
    }
    clusters
        .into_iter()
        .map(|(prices, basin_cells)| {
            let near_nash = prices.iter().enumerate().all(|(i, &p)| {
                let pn = bench.p_nash[i].as_f64();
                let gap = bench.p_mono[i].as_f64() - pn;
                p - pn <= 0.1 * gap
            });
            FixedPoint {
                prices,
                basin_cells,
                basin_share: basin_cells as f64 / total as f64,
                class: if near_nash {
                    FixedPointClass::NearNash
                } else {
                    FixedPointClass::SupraCompetitive
                },
            }
        })
        .collect()
}

/// Smallest period `2..=max_period` the trailing window repeats with, or
/// `None` for a fixed point, an aperiodic tail, or too short a trajectory.
pub fn detect_cycles(trajectory: &[Vec<f64>], max_period: usize, tol: f64) -> Option<usize> {
    let window = 2 * max_period;
    if trajectory.len() <= window {
        return None;
    }
    let tail = &trajectory[trajectory.len() - window..];
    let repeats = |p: usize| (0..window - p).all(|t| euclidean(&tail[t + p], &tail[t]) < tol);
    if repeats(1) {
        return None;
    }
    (2..=max_period).find(|&p| repeats(p))
}

/// Pearson correlation between the convergence indicator and profit gain.
pub fn equilibrium_gain_correlation(sessions: &[(bool, f64)]) -> Result<f64, EvalError> {
    if sessions.len() < 3 {
        return Err(EvalError::Insufficient(format!(
            "{} sessions, need at least 3",
            sessions.len()
        )));
    }
    let xs: Vec<f64> = sessions.iter().map(|(v, _)| if *v { 1.0 } else { 0.0 }).collect();
    let ys: Vec<f64> = sessions.iter().map(|(_, g)| *g).collect();
    pearson(&xs, &ys)
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, EvalError> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(EvalError::Undefined("correlation with a zero-variance variable".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}
