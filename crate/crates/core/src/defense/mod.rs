//! History-based worker attestation.
//!
//! The chief keeps a short sliding window of per-worker behaviour and runs
//! three independent checks on it every round:
//!
//! * **a1** (convergence speed): the exponentially weighted rate of change of
//!   the worker's distance to the global model must not be an outlier among
//!   the other workers.
//! * **a2** (self-similarity): successive output layers submitted by the same
//!   worker must stay well aligned.
//! * **a3** (error trend): the worker's error on the chief's quasi-validation
//!   set must not trend upward.
//!
//! A worker is reliable when no enabled check fails. Checks run in order and
//! stop at the first failure. During warm-up, and until a window has filled,
//! checks are not evaluated and count as passing.

mod history;
pub mod snapshot;

use std::fmt;

pub use history::{Observation, WorkerHistory};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Check {
    Pass,
    Fail,
    NotEvaluated,
}

impl Check {
    pub fn failed(self) -> bool {
        self == Check::Fail
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Check::Pass => "pass",
            Check::Fail => "fail",
            Check::NotEvaluated => "NA",
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Verdict {
    pub a1: Check,
    pub a2: Check,
    pub a3: Check,
    pub reliable: bool,
}

impl Verdict {
    pub const UNCHECKED: Verdict = Verdict {
        a1: Check::NotEvaluated,
        a2: Check::NotEvaluated,
        a3: Check::NotEvaluated,
        reliable: true,
    };
}

/// Which tail of the convergence-rate distribution a1 rejects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutlierSide {
    /// Reject `rate < μ − kσ`.
    Lower,
    /// Reject `rate > μ + kσ`.
    Upper,
    /// Reject `|rate − μ| > kσ`.
    Both,
}

/// Population used for a1's mean and deviation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateStats {
    /// Every evaluable worker except the one being judged.
    LeaveOneOut,
    /// Every evaluable worker, including the one being judged.
    Population,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DetectorSet {
    pub a1: bool,
    pub a2: bool,
    pub a3: bool,
}

impl DetectorSet {
    pub const ALL: DetectorSet = DetectorSet { a1: true, a2: true, a3: true };
    pub const NONE: DetectorSet = DetectorSet { a1: false, a2: false, a3: false };

    pub fn only_a1() -> Self {
        DetectorSet { a1: true, ..Self::NONE }
    }

    pub fn only_a2() -> Self {
        DetectorSet { a2: true, ..Self::NONE }
    }

    pub fn only_a3() -> Self {
        DetectorSet { a3: true, ..Self::NONE }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DefenseConfig {
    /// No verdicts before this round.
    pub warmup_rounds: usize,
    /// Sliding window length `c`.
    pub window_len: usize,
    /// `k` in the `μ ± kσ` band of a1.
    pub sigma_mult: f64,
    pub rate_side: OutlierSide,
    pub rate_stats: RateStats,
    /// Leave workers rejected in the previous round out of a1's statistics.
    pub exclude_rejected: bool,
    /// Minimum mean similarity over the a2 window.
    pub sim_mean_min: f64,
    /// Minimum least-squares slope of the a2 window, per round.
    pub sim_slope_min: f64,
    /// Maximum least-squares slope of the cumulative error impacts, per round.
    pub err_slope_max: f64,
    pub detectors: DetectorSet,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        DefenseConfig {
            warmup_rounds: 10,
            window_len: 10,
            sigma_mult: 4.0,
            rate_side: OutlierSide::Lower,
            rate_stats: RateStats::LeaveOneOut,
            exclude_rejected: false,
            sim_mean_min: 0.9,
            sim_slope_min: -0.01,
            err_slope_max: 0.01,
            detectors: DetectorSet::ALL,
        }
    }
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_rounds < 1 {
            return Err(Error::Config("warmup_rounds must be at least 1".into()));
        }
        if self.window_len < 2 {
            return Err(Error::Config("window_len must be at least 2".into()));
        }
        if !(self.sigma_mult > 0.0 && self.sigma_mult.is_finite()) {
            return Err(Error::Config(format!("sigma_mult must be positive, got {}", self.sigma_mult)));
        }
        for (name, v) in [
            ("sim_mean_min", self.sim_mean_min),
            ("sim_slope_min", self.sim_slope_min),
            ("err_slope_max", self.err_slope_max),
        ] {
            if !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite")));
            }
        }
        Ok(())
    }

    /// Windows count as full once they hold `c − 1` entries: `c` rounds
    /// give `c − 1` consecutive pairs.
    fn full_window(&self) -> usize {
        self.window_len - 1
    }
}

/// Weighted convergence rate of a delta window:
///
/// `Σᵢ (1 − exp(−(t/c)·(Δᵢ₊₁ − Δᵢ))) / c` over consecutive pairs.
///
/// Large drops in distance make the terms strongly negative; nothing is
/// clipped. Returns `None` with fewer than two entries.
pub fn convergence_rate<'a>(window: impl IntoIterator<Item = &'a f64>, round: usize, window_len: usize) -> Option<f64> {
    let weight = round as f64 / window_len as f64;
    let mut it = window.into_iter();
    let mut prev = *it.next()?;
    let mut sum = 0.0;
    let mut pairs = 0;
    for &d in it {
        sum += 1.0 - (-weight * (d - prev)).exp();
        prev = d;
        pairs += 1;
    }
    if pairs == 0 {
        return None;
    }
    Some(sum / window_len as f64)
}

/// Ordinary least-squares slope of `ys` against `0, 1, 2, ...`.
pub fn ls_slope<'a>(ys: impl IntoIterator<Item = &'a f64>) -> f64 {
    let ys: Vec<f64> = ys.into_iter().copied().collect();
    let n = ys.len();
    if n < 2 {
        return 0.0;
    }
    let x_mean = (n - 1) as f64 / 2.0;
    let y_mean = ys.iter().sum::<f64>() / n as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - x_mean;
        num += dx * (y - y_mean);
        den += dx * dx;
    }
    num / den
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Self-similarity check on one worker's window.
pub fn attested_fl_2(history: &WorkerHistory, round: usize, cfg: &DefenseConfig) -> Check {
    if round < cfg.warmup_rounds || history.sims().len() < cfg.full_window() {
        return Check::NotEvaluated;
    }
    let sims = history.sims();
    let mean = sims.iter().sum::<f64>() / sims.len() as f64;
    if mean >= cfg.sim_mean_min && ls_slope(sims) >= cfg.sim_slope_min {
        Check::Pass
    } else {
        Check::Fail
    }
}

/// Error-trend check on one worker's window. Flat or falling error passes.
pub fn attested_fl_3(history: &WorkerHistory, round: usize, cfg: &DefenseConfig) -> Check {
    if round < cfg.warmup_rounds || history.err_impacts().len() < cfg.full_window() {
        return Check::NotEvaluated;
    }
    let mut acc = 0.0;
    let cumulative: Vec<f64> = history
        .err_impacts()
        .iter()
        .map(|e| {
            acc += e;
            acc
        })
        .collect();
    if ls_slope(&cumulative) <= cfg.err_slope_max {
        Check::Pass
    } else {
        Check::Fail
    }
}

/// Read-only view over every worker's history at one round. Convergence
/// rates are computed once and shared by all verdicts.
pub struct Attestor<'a> {
    histories: &'a [WorkerHistory],
    round: usize,
    cfg: &'a DefenseConfig,
    rates: Vec<Option<f64>>,
    in_population: Vec<bool>,
}

impl<'a> Attestor<'a> {
    pub fn new(histories: &'a [WorkerHistory], round: usize, cfg: &'a DefenseConfig) -> Self {
        let rates = histories
            .iter()
            .map(|h| convergence_rate(h.deltas(), round, cfg.window_len))
            .collect();
        Attestor {
            histories,
            round,
            cfg,
            rates,
            in_population: vec![true; histories.len()],
        }
    }

    /// Restricts which workers feed a1's mean and deviation (for example
    /// this round's participants). Judged workers are unaffected.
    pub fn with_population(mut self, mask: Vec<bool>) -> Self {
        assert_eq!(mask.len(), self.histories.len());
        self.in_population = mask;
        self
    }

    pub fn rate(&self, worker: usize) -> Option<f64> {
        self.rates[worker]
    }

    pub fn attested_fl_1(&self, worker: usize) -> Check {
        let cfg = self.cfg;
        if self.round < cfg.warmup_rounds {
            return Check::NotEvaluated;
        }
        let Some(rate) = self.rates[worker] else {
            return Check::NotEvaluated;
        };
        let others: Vec<f64> = (0..self.histories.len())
            .filter(|&w| w != worker && self.in_population[w])
            .filter_map(|w| self.rates[w])
            .filter(|r| r.is_finite())
            .collect();
        if others.len() + 1 < 3 {
            return Check::NotEvaluated;
        }
        let mut pool = others;
        if cfg.rate_stats == RateStats::Population && rate.is_finite() {
            pool.push(rate);
        }
        let (mu, sigma) = mean_std(&pool);
        let band = cfg.sigma_mult * sigma;
        let outlier = match cfg.rate_side {
            OutlierSide::Lower => rate < mu - band,
            OutlierSide::Upper => rate > mu + band,
            OutlierSide::Both => rate < mu - band || rate > mu + band,
        };
        if outlier {
            Check::Fail
        } else {
            Check::Pass
        }
    }

    /// Runs the enabled detectors in order, stopping at the first failure.
    pub fn verdict(&self, worker: usize) -> Verdict {
        let cfg = self.cfg;
        let history = &self.histories[worker];
        let mut v = Verdict::UNCHECKED;
        if cfg.detectors.a1 {
            v.a1 = self.attested_fl_1(worker);
        }
        if cfg.detectors.a2 && !v.a1.failed() {
            v.a2 = attested_fl_2(history, self.round, cfg);
        }
        if cfg.detectors.a3 && !v.a1.failed() && !v.a2.failed() {
            v.a3 = attested_fl_3(history, self.round, cfg);
        }
        v.reliable = !(v.a1.failed() || v.a2.failed() || v.a3.failed());
        v
    }
}

/// Convergence-speed check for one worker against all the others.
pub fn attested_fl_1(histories: &[WorkerHistory], worker: usize, round: usize, cfg: &DefenseConfig) -> Check {
    Attestor::new(histories, round, cfg).attested_fl_1(worker)
}

pub fn attest(histories: &[WorkerHistory], worker: usize, round: usize, cfg: &DefenseConfig) -> Verdict {
    Attestor::new(histories, round, cfg).verdict(worker)
}
