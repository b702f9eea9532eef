//! Monte-Carlo checks of the search dynamics on a synthetic principle space.
//!
//! Principles are integers `0..size` with fitness equal to their value. The
//! sampler lands in a target set with probability exactly `q`, otherwise
//! uniformly in the complement, which turns the one-step lower bound into an
//! equality. Every trial owns a ChaCha stream keyed by (seed, trial index),
//! so reports do not depend on how rayon schedules trials.

use num_bigint::BigInt;
use num_rational::{BigRational, Rational64};
use num_traits::{One, Signed, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rational::{self, format_rational};

pub const DEFAULT_SPACE_SIZE: u64 = 1 << 62;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSpace {
    pub size: u64,
    /// `X_good = good_start..size`.
    pub good_start: u64,
    #[serde(with = "rational::serde_str")]
    pub q: Rational64,
}

impl SynthSpace {
    pub fn new(size: u64, q: Rational64) -> Result<SynthSpace, SimulationError> {
        if size < 4 {
            return Err(SimulationError::Invalid("size", "must be at least 4".into()));
        }
        check_probability(q)?;
        Ok(SynthSpace { size, good_start: size / 2, q })
    }

    pub fn fitness(&self, x: u64) -> u64 {
        x
    }

    pub fn is_good(&self, x: u64) -> bool {
        x >= self.good_start
    }
}

fn check_probability(q: Rational64) -> Result<(), SimulationError> {
    if q < Rational64::zero() || q > Rational64::one() {
        return Err(SimulationError::Invalid("q", format!("{} is outside [0, 1]", format_rational(&q))));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SimulationError {
    #[error("invalid simulation parameter `{0}`: {1}")]
    Invalid(&'static str, String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    /// Everything strictly fitter than the current best.
    Improvement { best: u64 },
    Good,
}

/// Draws `lambda` offspring: each lands in the target set with probability
/// exactly `q`, else uniformly in the complement. An empty side is never drawn.
pub fn sample_offspring<R: Rng>(space: &SynthSpace, target: Target, lambda: usize, rng: &mut R) -> Vec<u64> {
    let (lo, hi) = match target {
        Target::Improvement { best } => (best.saturating_add(1).min(space.size), space.size),
        Target::Good => (space.good_start, space.size),
    };
    let num = *space.q.numer() as u64;
    let den = *space.q.denom() as u64;
    (0..lambda)
        .map(|_| {
            let hit = rng.random_range(0..den) < num;
            // Target is the contiguous range lo..hi; the complement is 0..lo.
            if (hit && lo < hi) || lo == 0 {
                rng.random_range(lo..hi)
            } else {
                rng.random_range(0..lo)
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub mu: usize,
    pub lambda: usize,
    pub generations: usize,
    pub trials: u64,
    pub seed: u64,
}

impl TrialConfig {
    pub fn validate(&self) -> Result<(), SimulationError> {
        for (name, v) in [("mu", self.mu), ("lambda", self.lambda)] {
            if v == 0 {
                return Err(SimulationError::Invalid(name, "must be at least 1".into()));
            }
        }
        if self.trials == 0 {
            return Err(SimulationError::Invalid("trials", "must be at least 1".into()));
        }
        Ok(())
    }
}

fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

/// How the next population is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    /// Top-μ elites plus offspring.
    Plus,
    /// Offspring only; the negative control for monotonicity.
    Comma,
}

fn initial_population<R: Rng>(space: &SynthSpace, n: usize, rng: &mut R) -> Vec<u64> {
    (0..n).map(|_| rng.random_range(0..space.size / 2)).collect()
}

fn best(pop: &[u64]) -> u64 {
    pop.iter().copied().max().expect("population is never empty")
}

fn next_population(pop: &mut Vec<u64>, offspring: Vec<u64>, mu: usize, selection: Selection) {
    match selection {
        Selection::Plus => {
            pop.sort_unstable_by(|a, b| b.cmp(a));
            pop.truncate(mu);
            pop.extend(offspring);
        }
        Selection::Comma => *pop = offspring,
    }
}

/// Best-fitness trajectory `F_0..=F_T` of one run aimed at the improvement set.
fn trajectory(space: &SynthSpace, cfg: &TrialConfig, trial: u64, selection: Selection) -> Vec<u64> {
    let mut rng = trial_rng(cfg.seed, trial);
    let mut pop = initial_population(space, cfg.mu + cfg.lambda, &mut rng);
    let mut fs = vec![space.fitness(best(&pop))];
    for _ in 0..cfg.generations {
        let f = *fs.last().unwrap();
        let offspring = sample_offspring(space, Target::Improvement { best: f }, cfg.lambda, &mut rng);
        next_population(&mut pop, offspring, cfg.mu, selection);
        fs.push(space.fitness(best(&pop)));
    }
    fs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub trials: u64,
    pub hits: u64,
    #[serde(with = "big_str")]
    pub empirical: BigRational,
    pub empirical_value: f64,
    #[serde(with = "big_str")]
    pub theoretical_bound: BigRational,
    pub bound_value: f64,
    pub tolerance: f64,
    /// `empirical ≥ bound − tolerance`.
    pub pass: bool,
    /// `|empirical − bound| ≤ tolerance`; meaningful because the sampler is exact.
    pub within_tolerance: bool,
}

impl BoundReport {
    pub fn new(hits: u64, trials: u64, bound: BigRational) -> BoundReport {
        let empirical = BigRational::new(BigInt::from(hits), BigInt::from(trials));
        let b = bound.to_f64().unwrap_or(f64::NAN);
        let e = empirical.to_f64().unwrap_or(f64::NAN);
        let tolerance = 3.5 * (b * (1.0 - b) / trials as f64).sqrt();
        // Tiny slack absorbs rounding in the f64 comparison at tolerance 0.
        let eps = 1e-12;
        BoundReport {
            trials,
            hits,
            empirical,
            empirical_value: e,
            theoretical_bound: bound,
            bound_value: b,
            tolerance,
            pass: e >= b - tolerance - eps,
            within_tolerance: (e - b).abs() <= tolerance + eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonotoneReport {
    pub trials: u64,
    pub transitions: u64,
    pub violating_trials: u64,
    pub violations: u64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinearizationReport {
    #[serde(with = "rational::serde_str")]
    pub q: Rational64,
    pub lambda: u32,
    #[serde(with = "big_str")]
    pub exact: BigRational,
    #[serde(with = "big_str")]
    pub approx: BigRational,
    #[serde(with = "big_str")]
    pub rel_err: BigRational,
    pub pass: bool,
}

fn big(q: Rational64) -> BigRational {
    BigRational::new(BigInt::from(*q.numer()), BigInt::from(*q.denom()))
}

/// `1 − (1 − q)^n`, exact.
pub fn hit_bound(q: Rational64, n: u64) -> BigRational {
    let miss = BigRational::one() - big(q);
    BigRational::one() - num_traits::pow(miss, n as usize)
}

/// Fraction of single offspring rounds that strictly raise the best fitness.
pub fn estimate_improvement_prob(space: &SynthSpace, cfg: &TrialConfig) -> Result<BoundReport, SimulationError> {
    cfg.validate()?;
    let one_step = TrialConfig { generations: 1, ..*cfg };
    let hits = (0..cfg.trials)
        .into_par_iter()
        .filter(|&t| {
            let fs = trajectory(space, &one_step, t, Selection::Plus);
            fs[1] > fs[0]
        })
        .count() as u64;
    Ok(BoundReport::new(hits, cfg.trials, hit_bound(space.q, cfg.lambda as u64)))
}

/// Fraction of full runs in which any offspring lands in `X_good`. The
/// initial population is drawn from outside `X_good`.
pub fn estimate_coverage_prob(space: &SynthSpace, cfg: &TrialConfig) -> Result<BoundReport, SimulationError> {
    cfg.validate()?;
    let hits = (0..cfg.trials)
        .into_par_iter()
        .filter(|&t| {
            let mut rng = trial_rng(cfg.seed, t);
            let mut pop: Vec<u64> =
                (0..cfg.mu + cfg.lambda).map(|_| rng.random_range(0..space.good_start)).collect();
            let mut found = false;
            for _ in 0..cfg.generations {
                let offspring = sample_offspring(space, Target::Good, cfg.lambda, &mut rng);
                found |= offspring.iter().any(|&x| space.is_good(x));
                next_population(&mut pop, offspring, cfg.mu, Selection::Plus);
            }
            found
        })
        .count() as u64;
    let n = (cfg.lambda * cfg.generations) as u64;
    Ok(BoundReport::new(hits, cfg.trials, hit_bound(space.q, n)))
}

/// Fraction of runs with at least one strict improvement within T rounds,
/// against `1 − (1 − q)^{λT}` for constant `q`.
pub fn estimate_improvement_within(space: &SynthSpace, cfg: &TrialConfig) -> Result<BoundReport, SimulationError> {
    cfg.validate()?;
    let hits = (0..cfg.trials)
        .into_par_iter()
        .filter(|&t| {
            let fs = trajectory(space, cfg, t, Selection::Plus);
            fs.windows(2).any(|w| w[1] > w[0])
        })
        .count() as u64;
    let n = (cfg.lambda * cfg.generations) as u64;
    Ok(BoundReport::new(hits, cfg.trials, hit_bound(space.q, n)))
}

/// Counts best-fitness decreases over all trajectories.
pub fn check_monotone_with(
    space: &SynthSpace,
    cfg: &TrialConfig,
    selection: Selection,
) -> Result<MonotoneReport, SimulationError> {
    cfg.validate()?;
    let per_trial: Vec<u64> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            let fs = trajectory(space, cfg, t, selection);
            fs.windows(2).filter(|w| w[1] < w[0]).count() as u64
        })
        .collect();
    let violations: u64 = per_trial.iter().sum();
    Ok(MonotoneReport {
        trials: cfg.trials,
        transitions: cfg.trials * cfg.generations as u64,
        violating_trials: per_trial.iter().filter(|&&v| v > 0).count() as u64,
        violations,
        pass: violations == 0,
    })
}

pub fn check_monotone(space: &SynthSpace, cfg: &TrialConfig) -> Result<bool, SimulationError> {
    Ok(check_monotone_with(space, cfg, Selection::Plus)?.pass)
}

/// Exact `1 − (1 − q)^λ` against `λq`; passes when the relative error is at
/// most `λq / 2`.
pub fn small_q_linearization_check(q: Rational64, lambda: u32) -> Result<LinearizationReport, SimulationError> {
    if q <= Rational64::zero() || q > Rational64::new(1, 100) {
        return Err(SimulationError::Invalid("q", "must lie in (0, 0.01]".into()));
    }
    if lambda == 0 {
        return Err(SimulationError::Invalid("lambda", "must be at least 1".into()));
    }
    let exact = hit_bound(q, lambda as u64);
    let approx = big(q) * BigInt::from(lambda);
    let rel_err = ((&exact - &approx) / &exact).abs();
    let pass = rel_err <= &approx / BigInt::from(2);
    Ok(LinearizationReport { q, lambda, exact, approx, rel_err, pass })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    Monotone,
    Improvement,
    Coverage,
    /// Improvement within T rounds under constant q.
    Corollary,
    Linearization,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "lowercase")]
pub enum SimulationReport {
    Monotone { config: TrialConfig, space: SynthSpace, report: MonotoneReport },
    Improvement { config: TrialConfig, space: SynthSpace, report: BoundReport },
    Coverage { config: TrialConfig, space: SynthSpace, report: BoundReport },
    Corollary { config: TrialConfig, space: SynthSpace, report: BoundReport },
    Linearization { report: LinearizationReport },
}

impl SimulationReport {
    pub fn pass(&self) -> bool {
        match self {
            SimulationReport::Monotone { report, .. } => report.pass,
            SimulationReport::Improvement { report, .. }
            | SimulationReport::Coverage { report, .. }
            | SimulationReport::Corollary { report, .. } => report.pass,
            SimulationReport::Linearization { report } => report.pass,
        }
    }
}

pub fn run_experiment(
    experiment: Experiment,
    space: &SynthSpace,
    cfg: &TrialConfig,
) -> Result<SimulationReport, SimulationError> {
    let (config, space) = (*cfg, *space);
    Ok(match experiment {
        Experiment::Monotone => {
            SimulationReport::Monotone { config, space, report: check_monotone_with(&space, cfg, Selection::Plus)? }
        }
        Experiment::Improvement => {
            SimulationReport::Improvement { config, space, report: estimate_improvement_prob(&space, cfg)? }
        }
        Experiment::Coverage => SimulationReport::Coverage { config, space, report: estimate_coverage_prob(&space, cfg)? },
        Experiment::Corollary => {
            SimulationReport::Corollary { config, space, report: estimate_improvement_within(&space, cfg)? }
        }
        Experiment::Linearization => {
            let lambda = u32::try_from(cfg.lambda).map_err(|_| SimulationError::Invalid("lambda", "too large".into()))?;
            SimulationReport::Linearization { report: small_q_linearization_check(space.q, lambda)? }
        }
    })
}

mod big_str {
    use num_bigint::BigInt;
    use num_rational::BigRational;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &BigRational, s: S) -> Result<S::Ok, S::Error> {
        if v.denom() == &BigInt::from(1) {
            s.serialize_str(&v.numer().to_string())
        } else {
            s.serialize_str(&format!("{}/{}", v.numer(), v.denom()))
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BigRational, D::Error> {
        let raw = String::deserialize(d)?;
        let parse = |t: &str| t.trim().parse::<BigInt>().map_err(serde::de::Error::custom);
        match raw.split_once('/') {
            None => Ok(BigRational::from_integer(parse(&raw)?)),
            Some((n, den)) => {
                let den = parse(den)?;
                if den == BigInt::from(0) {
                    return Err(serde::de::Error::custom("zero denominator"));
                }
                Ok(BigRational::new(parse(n)?, den))
            }
        }
    }
}
