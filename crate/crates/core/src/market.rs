//! Repeated Bertrand competition with logit demand.
//!
//! Firms set prices simultaneously; demand for product `i` is a multinomial
//! logit share against `n` rivals plus an outside good. Marginal costs are
//! constant and demand is deterministic. The module also solves the static
//! benchmarks (Bertrand-Nash and joint-profit-maximising prices) that define
//! the admissible price box and the profit-gain normalisation.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MarketError {
    #[error("invalid market parameters: {0}")]
    InvalidParams(String),
    #[error("degenerate search interval [{low}, {high}]")]
    DegenerateInterval { low: f64, high: f64 },
    #[error("raw action {0} outside the open interval (-1, 1)")]
    ActionOutOfRange(f64),
    #[error("{solver} did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence {
        solver: &'static str,
        iterations: usize,
        residual: f64,
    },
    #[error("price vector has {got} entries, expected {expected}")]
    Dimension { expected: usize, got: usize },
}

/// Economic primitives of the logit-Bertrand game.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketParams<S> {
    pub n: usize,
    /// Outside-good quality index.
    pub a0: S,
    /// Product quality indices, one per firm.
    pub a: Vec<S>,
    /// Horizontal differentiation.
    pub mu: S,
    /// Constant marginal costs.
    pub c: Vec<S>,
    /// Price-box margin.
    pub xi: S,
    /// Memory length in periods.
    pub k: usize,
}

impl<S: Scalar> MarketParams<S> {
    /// Symmetric market with `n` identical firms.
    pub fn symmetric(n: usize, a0: S, a: S, mu: S, c: S, xi: S) -> Self {
        Self {
            n,
            a0,
            a: vec![a; n],
            mu,
            c: vec![c; n],
            xi,
            k: 1,
        }
    }

    /// The default duopoly: a0 = 0, a = 2, mu = 0.25, c = 1, xi = 0.1, k = 1.
    pub fn duopoly() -> Self {
        Self::symmetric(2, S::zero(), S::lit(2.0), S::lit(0.25), S::one(), S::lit(0.1))
    }

    pub fn validate(&self) -> Result<(), MarketError> {
        let bad = |m: &str| Err(MarketError::InvalidParams(m.to_string()));
        if self.n < 2 {
            return bad("n must be at least 2");
        }
        if self.a.len() != self.n || self.c.len() != self.n {
            return bad("quality and cost vectors must have length n");
        }
        if !(self.mu > S::zero()) || !self.mu.is_finite() {
            return bad("mu must be positive and finite");
        }
        if !(self.xi >= S::zero()) || !self.xi.is_finite() {
            return bad("xi must be non-negative and finite");
        }
        if self.k < 1 {
            return bad("memory k must be at least 1");
        }
        if !self.a0.is_finite() || self.a.iter().chain(&self.c).any(|v| !v.is_finite()) {
            return bad("quality indices and costs must be finite");
        }
        Ok(())
    }

    /// Converts every real field to another scalar type.
    pub fn cast<T: Scalar>(&self) -> MarketParams<T> {
        let conv = |x: S| T::lit(x.as_f64());
        MarketParams {
            n: self.n,
            a0: conv(self.a0),
            a: self.a.iter().map(|&x| conv(x)).collect(),
            mu: conv(self.mu),
            c: self.c.iter().map(|&x| conv(x)).collect(),
            xi: conv(self.xi),
            k: self.k,
        }
    }
}

/// Static benchmark prices and profits plus the admissible price box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Benchmarks<S> {
    pub p_nash: Vec<S>,
    pub p_mono: Vec<S>,
    pub pi_nash: Vec<S>,
    pub pi_mono: Vec<S>,
    pub p_low: S,
    pub p_high: S,
}

impl<S: Scalar> Benchmarks<S> {
    pub fn cast<T: Scalar>(&self) -> Benchmarks<T> {
        let v = |xs: &[S]| xs.iter().map(|x| T::lit(x.as_f64())).collect();
        Benchmarks {
            p_nash: v(&self.p_nash),
            p_mono: v(&self.p_mono),
            pi_nash: v(&self.pi_nash),
            pi_mono: v(&self.pi_mono),
            p_low: T::lit(self.p_low.as_f64()),
            p_high: T::lit(self.p_high.as_f64()),
        }
    }

    /// Mean per-firm Nash profit.
    pub fn mean_pi_nash(&self) -> S {
        mean(&self.pi_nash)
    }

    /// Mean per-firm monopoly profit.
    pub fn mean_pi_mono(&self) -> S {
        mean(&self.pi_mono)
    }

    pub fn bounds(&self) -> (S, S) {
        (self.p_low, self.p_high)
    }
}

fn mean<S: Scalar>(xs: &[S]) -> S {
    xs.iter().copied().sum::<S>() / S::lit(xs.len() as f64)
}

/// Market shares of the `n` inside goods.
///
/// Exponents are shifted by their maximum (outside good included) so no
/// finite input overflows.
pub fn demand<S: Scalar>(params: &MarketParams<S>, prices: &[S]) -> Vec<S> {
    let (shares, _) = shares_with_outside(params, prices);
    shares
}

/// Inside shares together with the outside-good share.
pub fn shares_with_outside<S: Scalar>(params: &MarketParams<S>, prices: &[S]) -> (Vec<S>, S) {
    debug_assert_eq!(prices.len(), params.a.len());
    let outside = params.a0 / params.mu;
    let exps: Vec<S> = params
        .a
        .iter()
        .zip(prices)
        .map(|(&a, &p)| (a - p) / params.mu)
        .collect();
    let shift = exps.iter().copied().fold(outside, S::max);
    let weights: Vec<S> = exps.iter().map(|&e| (e - shift).exp()).collect();
    let w_out = (outside - shift).exp();
    let total = weights.iter().copied().sum::<S>() + w_out;
    (weights.iter().map(|&w| w / total).collect(), w_out / total)
}

/// Per-firm one-period profits `(p_i - c_i) q_i`.
pub fn profit<S: Scalar>(params: &MarketParams<S>, prices: &[S]) -> Vec<S> {
    demand(params, prices)
        .into_iter()
        .zip(prices.iter().zip(&params.c))
        .map(|(q, (&p, &c))| (p - c) * q)
        .collect()
}

/// Sum of all firms' profits.
pub fn joint_profit<S: Scalar>(params: &MarketParams<S>, prices: &[S]) -> S {
    profit(params, prices).into_iter().sum()
}

/// Gradient of the joint profit with respect to every price.
///
/// `d/dp_i sum_j (p_j - c_j) q_j = q_i [1 - (m_i - sum_j m_j q_j) / mu]`
/// with markups `m_j = p_j - c_j`.
pub fn joint_profit_gradient<S: Scalar>(params: &MarketParams<S>, prices: &[S]) -> Vec<S> {
    let q = demand(params, prices);
    let markups: Vec<S> = prices.iter().zip(&params.c).map(|(&p, &c)| p - c).collect();
    let weighted: S = markups.iter().zip(&q).map(|(&m, &q)| m * q).sum();
    q.iter()
        .zip(&markups)
        .map(|(&qi, &mi)| qi * (S::one() - (mi - weighted) / params.mu))
        .collect()
}

fn splice_rivals<S: Scalar>(rival_prices: &[S], i: usize, own: S) -> Vec<S> {
    let mut prices = Vec::with_capacity(rival_prices.len() + 1);
    prices.extend_from_slice(&rival_prices[..i]);
    prices.push(own);
    prices.extend_from_slice(&rival_prices[i..]);
    prices
}

/// One-period profit of firm `i` at price `own` with rivals held fixed.
pub fn own_profit<S: Scalar>(params: &MarketParams<S>, rival_prices: &[S], i: usize, own: S) -> S {
    let prices = splice_rivals(rival_prices, i, own);
    let q = demand(params, &prices);
    (own - params.c[i]) * q[i]
}

/// Sign-carrying first-order term of firm `i`'s own-price derivative.
///
/// `d pi_i / d p_i = q_i [1 - (p_i - c_i)(1 - q_i) / mu]`; the bracket is
/// strictly decreasing in `p_i` above cost, so its root is the unconstrained
/// best response.
fn own_price_foc<S: Scalar>(params: &MarketParams<S>, rival_prices: &[S], i: usize, own: S) -> S {
    let prices = splice_rivals(rival_prices, i, own);
    let q = demand(params, &prices)[i];
    S::one() - (own - params.c[i]) * (S::one() - q) / params.mu
}

/// Largest number of coarse grid points used before golden-section refinement.
const MAX_GRID_POINTS: usize = 20_000;
const GRID_STEP: f64 = 1e-3;

/// Maximises a unimodal-on-bracket function: coarse grid, then golden section.
///
/// Returns the bracket `(lo, hi)` around the maximiser after refinement.
pub fn grid_golden_max<S: Scalar>(f: impl Fn(S) -> S, low: S, high: S, xtol: S) -> (S, S) {
    let width = high - low;
    let step = S::lit(GRID_STEP).max(width / S::lit(MAX_GRID_POINTS as f64));
    let cells = (width / step).ceil().to_usize().unwrap_or(1).max(1);
    let point = |j: usize| {
        if j >= cells {
            high
        } else {
            low + step * S::lit(j as f64)
        }
    };
    let mut best_j = 0;
    let mut best_f = f(low);
    for j in 1..=cells {
        let v = f(point(j));
        if v > best_f {
            best_f = v;
            best_j = j;
        }
    }
    let lo = if best_j == 0 { low } else { point(best_j - 1) };
    let hi = if best_j >= cells { high } else { point(best_j + 1) };
    golden_section_max(f, lo, hi, xtol)
}

/// Golden-section search for a maximum on `[lo, hi]`.
pub fn golden_section_max<S: Scalar>(f: impl Fn(S) -> S, mut lo: S, mut hi: S, xtol: S) -> (S, S) {
    let inv_phi = S::lit((5f64.sqrt() - 1.0) / 2.0);
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..200 {
        if hi - lo <= xtol {
            break;
        }
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1);
        }
    }
    (lo, hi)
}

/// Bisection for the root of a decreasing function on `[lo, hi]`, clamped to
/// the endpoints when no sign change exists.
fn decreasing_root<S: Scalar>(g: impl Fn(S) -> S, mut lo: S, mut hi: S) -> S {
    if g(lo) <= S::zero() {
        return lo;
    }
    if g(hi) >= S::zero() {
        return hi;
    }
    for _ in 0..200 {
        let mid = lo + (hi - lo) / S::lit(2.0);
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid) > S::zero() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo + (hi - lo) / S::lit(2.0)
}

/// Best one-period price for firm `i` against fixed rival prices, searched on
/// `interval`.
///
/// `rival_prices` holds the other `n - 1` prices in firm order. The coarse
/// grid and golden section locate the maximiser; the bracket is then polished
/// on the first-order condition, since comparing profit values alone cannot
/// resolve the argmax much below the square root of machine epsilon.
pub fn static_best_response<S: Scalar>(
    params: &MarketParams<S>,
    rival_prices: &[S],
    i: usize,
    interval: (S, S),
) -> Result<S, MarketError> {
    let (low, high) = interval;
    if !(low < high) {
        return Err(MarketError::DegenerateInterval {
            low: low.as_f64(),
            high: high.as_f64(),
        });
    }
    if rival_prices.len() + 1 != params.a.len() {
        return Err(MarketError::Dimension {
            expected: params.a.len() - 1,
            got: rival_prices.len(),
        });
    }
    let f = |p: S| own_profit(params, rival_prices, i, p);
    let xtol = S::epsilon().sqrt() * (S::one() + high.abs());
    let (lo, hi) = grid_golden_max(f, low, high, xtol);
    let pad = S::lit(4.0) * xtol;
    let lo = (lo - pad).max(low);
    let hi = (hi + pad).min(high);
    let g = |p: S| own_price_foc(params, rival_prices, i, p);
    Ok(decreasing_root(g, lo, hi))
}

/// Search interval used by the benchmark solvers for firm `i`, which must
/// contain the unconstrained best response for any rival prices.
fn solver_interval<S: Scalar>(params: &MarketParams<S>, i: usize) -> (S, S) {
    let two = S::lit(2.0);
    let reach = two * (two * params.mu + (params.a[i] - params.c[i] - params.a0).abs()) + params.mu;
    (params.c[i], params.c[i] + reach)
}

fn others<S: Scalar>(prices: &[S], i: usize) -> Vec<S> {
    prices
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &p)| p)
        .collect()
}

/// Fixed-point residual `max_i |BR_i(p_-i) - p_i|` over the solver intervals.
pub fn best_response_residual<S: Scalar>(params: &MarketParams<S>, prices: &[S]) -> Result<S, MarketError> {
    let mut worst = S::zero();
    for i in 0..prices.len() {
        let br = static_best_response(params, &others(prices, i), i, solver_interval(params, i))?;
        worst = worst.max((br - prices[i]).abs());
    }
    Ok(worst)
}

pub const NASH_DAMPING: f64 = 0.5;
pub const NASH_MAX_ITERS: usize = 10_000;

/// Bertrand-Nash prices and per-firm profits by damped best-response
/// iteration.
pub fn nash_prices<S: Scalar>(params: &MarketParams<S>) -> Result<(Vec<S>, Vec<S>), MarketError> {
    let n = params.a.len();
    let tol = S::lit(1e-11).max(S::epsilon() * S::lit(1e4));
    let damping = S::lit(NASH_DAMPING);
    let mut prices: Vec<S> = (0..n).map(|i| params.c[i] + params.mu).collect();
    let mut residual = S::infinity();
    for _ in 0..NASH_MAX_ITERS {
        let mut next = prices.clone();
        residual = S::zero();
        for i in 0..n {
            let br = static_best_response(params, &others(&prices, i), i, solver_interval(params, i))?;
            residual = residual.max((br - prices[i]).abs());
            next[i] = prices[i] + damping * (br - prices[i]);
        }
        if residual <= tol {
            let profits = profit(params, &prices);
            return Ok((prices, profits));
        }
        prices = next;
    }
    Err(MarketError::NoConvergence {
        solver: "nash_prices",
        iterations: NASH_MAX_ITERS,
        residual: residual.as_f64(),
    })
}

/// Joint-profit-maximising prices and per-firm profits.
///
/// At an interior optimum of logit joint profit every firm carries the same
/// markup `m` with `m (1 - Q(m)) = mu`, where `Q` is the total inside share.
/// The one-dimensional markup problem is solved by grid + golden section and
/// polished on that first-order condition.
pub fn monopoly_prices<S: Scalar>(params: &MarketParams<S>) -> Result<(Vec<S>, Vec<S>), MarketError> {
    let n = params.a.len();
    let at_markup = |m: S| -> Vec<S> { params.c.iter().map(|&c| c + m).collect() };
    let joint = |m: S| joint_profit(params, &at_markup(m));
    let span = (0..n)
        .map(|i| solver_interval(params, i).1 - params.c[i])
        .fold(S::zero(), S::max)
        * S::lit(n as f64 + 1.0);
    let xtol = S::epsilon().sqrt();
    let (lo, hi) = grid_golden_max(joint, S::zero(), span, xtol);
    let foc = |m: S| {
        let (_, outside) = shares_with_outside(params, &at_markup(m));
        S::one() - m * outside / params.mu
    };
    let pad = S::lit(4.0) * xtol;
    let m = decreasing_root(foc, (lo - pad).max(S::zero()), hi + pad);
    let prices = at_markup(m);
    let grad = joint_profit_gradient(params, &prices);
    let norm = grad.iter().map(|&g| g * g).sum::<S>().sqrt();
    let tol = S::lit(1e-8).max(S::epsilon() * S::lit(1e3));
    if norm > tol {
        return Err(MarketError::NoConvergence {
            solver: "monopoly_prices",
            iterations: 1,
            residual: norm.as_f64(),
        });
    }
    let profits = profit(params, &prices);
    Ok((prices, profits))
}

/// Admissible price box `(p_N - xi (p_M - p_N), p_M + xi (p_M - p_N))`.
pub fn price_bounds<S: Scalar>(xi: S, p_nash: S, p_mono: S) -> (S, S) {
    let gap = p_mono - p_nash;
    (p_nash - xi * gap, p_mono + xi * gap)
}

/// Solves every benchmark, in `f64`, and casts back to `S`.
///
/// With asymmetric firms the common box spans the lowest Nash price to the
/// highest monopoly price.
pub fn benchmarks<S: Scalar>(params: &MarketParams<S>) -> Result<Benchmarks<S>, MarketError> {
    let p64: MarketParams<f64> = params.cast();
    let (p_nash, pi_nash) = nash_prices(&p64)?;
    let (p_mono, pi_mono) = monopoly_prices(&p64)?;
    let lo = p_nash.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = p_mono.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (p_low, p_high) = price_bounds(p64.xi, lo, hi);
    let bench = Benchmarks {
        p_nash,
        p_mono,
        pi_nash,
        pi_mono,
        p_low,
        p_high,
    };
    Ok(bench.cast())
}

/// Maps a squashed action in `(-1, 1)` affinely onto `(p_low, p_high)`.
pub fn scale_action<S: Scalar>(x: S, bounds: (S, S)) -> Result<S, MarketError> {
    if !(x > -S::one() && x < S::one()) {
        return Err(MarketError::ActionOutOfRange(x.as_f64()));
    }
    Ok(scale_unchecked(x, bounds))
}

#[inline]
pub(crate) fn scale_unchecked<S: Scalar>(x: S, (low, high): (S, S)) -> S {
    (x + S::one()) / S::lit(2.0) * (high - low) + low
}

/// Inverse of [`scale_action`]; defined for any price, not just the box.
#[inline]
pub fn unscale_price<S: Scalar>(p: S, (low, high): (S, S)) -> S {
    S::lit(2.0) * (p - low) / (high - low) - S::one()
}

/// A market instance: parameters plus solved benchmarks.
#[derive(Debug, Clone, PartialEq)]
pub struct Market<S> {
    pub params: MarketParams<S>,
    pub bench: Benchmarks<S>,
}

impl<S: Scalar> Market<S> {
    pub fn new(params: MarketParams<S>) -> Result<Self, MarketError> {
        params.validate()?;
        let bench = benchmarks(&params)?;
        Ok(Self { params, bench })
    }

    pub fn n(&self) -> usize {
        self.params.n
    }

    pub fn bounds(&self) -> (S, S) {
        self.bench.bounds()
    }

    pub fn profit(&self, prices: &[S]) -> Vec<S> {
        profit(&self.params, prices)
    }

    /// Per-period profit gain of the firms' mean profit.
    pub fn profit_gain(&self, profits: &[S]) -> S {
        let pn = self.bench.mean_pi_nash();
        let pm = self.bench.mean_pi_mono();
        (mean(profits) - pn) / (pm - pn)
    }

    /// Best response of firm `i` within the admissible box.
    pub fn best_response(&self, prices: &[S], i: usize) -> Result<S, MarketError> {
        static_best_response(&self.params, &others(prices, i), i, self.bounds())
    }
}

/// Bounded price memory: the last `k` joint price vectors, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceHistory<S> {
    n: usize,
    periods: VecDeque<Vec<S>>,
}

impl<S: Scalar> PriceHistory<S> {
    /// History filled with `k` copies of `prices`.
    pub fn filled(k: usize, prices: Vec<S>) -> Self {
        let n = prices.len();
        Self {
            n,
            periods: std::iter::repeat_n(prices, k).collect(),
        }
    }

    pub fn from_periods(periods: Vec<Vec<S>>) -> Self {
        let n = periods.first().map_or(0, Vec::len);
        Self {
            n,
            periods: periods.into(),
        }
    }

    pub fn k(&self) -> usize {
        self.periods.len()
    }

    pub fn latest(&self) -> &[S] {
        self.periods.back().expect("history holds at least one period")
    }

    pub fn periods(&self) -> impl Iterator<Item = &Vec<S>> {
        self.periods.iter()
    }

    /// Flattened `k * n` prices, oldest period first.
    pub fn flatten(&self) -> Vec<S> {
        let mut out = Vec::with_capacity(self.n * self.periods.len());
        for p in &self.periods {
            out.extend_from_slice(p);
        }
        out
    }

    fn push(&mut self, prices: Vec<S>) {
        self.periods.pop_front();
        self.periods.push_back(prices);
    }
}

/// Advances the environment one period: `actions` become the newest memory
/// entry and each firm earns its logit profit.
pub fn env_step<S: Scalar>(
    params: &MarketParams<S>,
    state: &PriceHistory<S>,
    actions: &[S],
) -> Result<(PriceHistory<S>, Vec<S>), MarketError> {
    if actions.len() != params.n {
        return Err(MarketError::Dimension {
            expected: params.n,
            got: actions.len(),
        });
    }
    let mut next = state.clone();
    next.push(actions.to_vec());
    Ok((next, profit(params, actions)))
}
