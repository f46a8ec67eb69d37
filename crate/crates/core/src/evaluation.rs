//! Operating characteristics, grid validation and replay over random
//! inspection orders.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{BoundarySchedule, Region};
use crate::error::{Error, Result};
use crate::io::prob;
use crate::population::{random_order, FinitePopulation};
use crate::procedure::{run_counts, Decision, DecisionSource, RunOutcome};
use crate::seed::{replication_seed, stream};

/// Monte Carlo operating characteristics at one grid point `p = m / n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcPoint {
    pub m: u32,
    pub p: f64,
    pub region: Region,
    #[serde(with = "prob")]
    pub accept_k_prob: f64,
    /// Probability of an incorrect decision; zero inside the indifference
    /// region.
    #[serde(with = "prob")]
    pub error_prob: f64,
    pub expected_tau: f64,
    #[serde(with = "prob")]
    pub accept_k_se: f64,
    #[serde(with = "prob")]
    pub error_se: f64,
    pub tau_se: f64,
}

fn check_seed(schedule: &BoundarySchedule, seed: u64) -> Result<()> {
    if seed == schedule.provenance.seed {
        Err(Error::SeedReuse(seed))
    } else {
        Ok(())
    }
}

fn runs(schedule: &BoundarySchedule, m: u32, reps: u32, master: u64, tag: u64) -> Vec<RunOutcome> {
    let n = schedule.n();
    (0..reps)
        .into_par_iter()
        .map(|i| {
            let path = random_order(n, m, replication_seed(master, tag, u64::from(i)));
            run_counts(&schedule.rule, path.prefix_counts())
        })
        .collect()
}

fn binomial_se(p: f64, reps: u32) -> f64 {
    (p * (1.0 - p) / f64::from(reps)).sqrt()
}

fn error_given(region: Region, accept_k: f64) -> f64 {
    match region {
        Region::H => accept_k,
        Region::K => 1.0 - accept_k,
        Region::Indifferent => 0.0,
    }
}

/// Estimates decision and stopping-time characteristics at each `m` of
/// `grid` from `reps` random orders of a population with `m` deviations.
///
/// `seed` must differ from the schedule's calibration seed.
pub fn oc_curve(schedule: &BoundarySchedule, grid: &[u32], reps: u32, seed: u64) -> Result<Vec<OcPoint>> {
    check_seed(schedule, seed)?;
    let n = schedule.n();
    if reps == 0 {
        return Err(Error::InvalidArgument("reps must be at least 1".into()));
    }
    if let Some(&m) = grid.iter().find(|&&m| m > n) {
        return Err(Error::InvalidArgument(format!("grid point {m} exceeds n = {n}")));
    }
    let config = &schedule.config;
    Ok(grid
        .iter()
        .map(|&m| {
            let outcomes = runs(schedule, m, reps, seed, stream::oc(m));
            let k = outcomes.iter().filter(|o| o.decision == Decision::AcceptK).count() as u64;
            let tau_sum: u64 = outcomes.iter().map(|o| u64::from(o.tau)).sum();
            let tau_sq: u64 = outcomes.iter().map(|o| u64::from(o.tau).pow(2)).sum();
            let r = f64::from(reps);
            let accept_k_prob = k as f64 / r;
            let expected_tau = tau_sum as f64 / r;
            let var = if reps > 1 {
                ((tau_sq as f64 - r * expected_tau * expected_tau) / (r - 1.0)).max(0.0)
            } else {
                0.0
            };
            let region = config.region(m);
            let error_prob = error_given(region, accept_k_prob);
            OcPoint {
                m,
                p: f64::from(m) / f64::from(n),
                region,
                accept_k_prob,
                error_prob,
                expected_tau,
                accept_k_se: binomial_se(accept_k_prob, reps),
                error_se: binomial_se(error_prob, reps),
                tau_se: (var / r).sqrt(),
            }
        })
        .collect())
}

/// A grid point whose estimated error exceeds its bound by more than three
/// standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFlag {
    pub m: u32,
    pub region: Region,
    #[serde(with = "prob")]
    pub error_prob: f64,
    #[serde(with = "prob")]
    pub bound: f64,
    /// `(error_prob - bound) / se`, with `se` the binomial standard error
    /// at the bound.
    pub excess_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub points: Vec<OcPoint>,
    pub flags: Vec<GridFlag>,
}

impl GridReport {
    pub fn passed(&self) -> bool {
        self.flags.is_empty()
    }
}

/// Runs [`oc_curve`] on `grid` and flags points outside the indifference
/// region whose error exceeds the design bound by more than 3 standard
/// errors.
pub fn validate_grid(schedule: &BoundarySchedule, grid: &[u32], reps: u32, seed: u64) -> Result<GridReport> {
    let points = oc_curve(schedule, grid, reps, seed)?;
    let config = &schedule.config;
    let flags = points
        .iter()
        .filter_map(|pt| {
            let bound = config.error_bound(pt.region)?;
            let se = binomial_se(bound, reps);
            let excess = (pt.error_prob - bound) / se;
            (excess > 3.0).then_some(GridFlag {
                m: pt.m,
                region: pt.region,
                error_prob: pt.error_prob,
                bound,
                excess_se: excess,
            })
        })
        .collect();
    Ok(GridReport { points, flags })
}

/// [`validate_grid`] over every `m` in `0..=n`.
pub fn validate_full_grid(schedule: &BoundarySchedule, reps: u32, seed: u64) -> Result<GridReport> {
    let grid: Vec<u32> = (0..=schedule.n()).collect();
    validate_grid(schedule, &grid, reps, seed)
}

/// Grid point with the largest expected stopping stage; ties go to the
/// smaller `m`.
pub fn expected_tau_peak(oc: &[OcPoint]) -> Result<u32> {
    oc.iter()
        .reduce(|best, pt| {
            if pt.expected_tau > best.expected_tau || (pt.expected_tau == best.expected_tau && pt.m < best.m) {
                pt
            } else {
                best
            }
        })
        .map(|pt| pt.m)
        .ok_or_else(|| Error::InvalidArgument("empty operating characteristic".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub tau: u32,
    pub count: u64,
}

/// Statistics of the rule replayed over random orders of one population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplaySummary {
    pub n: u32,
    pub m: u32,
    pub runs: u32,
    pub mean_tau: f64,
    pub median_tau: u32,
    pub q10_tau: u32,
    pub q90_tau: u32,
    /// Percentage of runs whose decision disagrees with the population's
    /// region.
    pub incorrect_pct: f64,
    /// `100 * mean_tau / n`.
    pub inspected_pct: f64,
    pub accept_h: u64,
    pub accept_k: u64,
    pub early_stops: u64,
    pub region: Region,
    /// True when the population lies in the indifference region, where no
    /// decision counts as incorrect and `incorrect_pct` is 0 by convention.
    pub indifferent: bool,
    pub tau_histogram: Vec<HistogramBin>,
}

/// Nearest-rank quantile of sorted values, `pct` in percent.
fn nearest_rank(sorted: &[u32], pct: usize) -> u32 {
    let rank = (pct * sorted.len()).div_ceil(100).max(1);
    sorted[rank - 1]
}

/// Replays the schedule over `reps` random orders of `pop`.
///
/// The orders depend on `pop` only through its size and deviation count.
pub fn replay(pop: &FinitePopulation, schedule: &BoundarySchedule, reps: u32, seed: u64) -> Result<ReplaySummary> {
    check_seed(schedule, seed)?;
    let n = schedule.n();
    if pop.size() != n {
        return Err(Error::InvalidArgument(format!(
            "population has {} items but the schedule expects {n}",
            pop.size()
        )));
    }
    if reps == 0 {
        return Err(Error::InvalidArgument("reps must be at least 1".into()));
    }
    let m = pop.deviations();
    let outcomes = runs(schedule, m, reps, seed, stream::REPLAY);
    let region = schedule.config.region(m);

    let mut taus: Vec<u32> = outcomes.iter().map(|o| o.tau).collect();
    taus.sort_unstable();
    let mut tau_histogram: Vec<HistogramBin> = Vec::new();
    for &tau in &taus {
        match tau_histogram.last_mut() {
            Some(bin) if bin.tau == tau => bin.count += 1,
            _ => tau_histogram.push(HistogramBin { tau, count: 1 }),
        }
    }
    let accept_k = outcomes.iter().filter(|o| o.decision == Decision::AcceptK).count() as u64;
    let accept_h = u64::from(reps) - accept_k;
    let incorrect = match region {
        Region::H => accept_k,
        Region::K => accept_h,
        Region::Indifferent => 0,
    };
    let mean_tau = taus.iter().map(|&t| u64::from(t)).sum::<u64>() as f64 / f64::from(reps);
    Ok(ReplaySummary {
        n,
        m,
        runs: reps,
        mean_tau,
        median_tau: nearest_rank(&taus, 50),
        q10_tau: nearest_rank(&taus, 10),
        q90_tau: nearest_rank(&taus, 90),
        incorrect_pct: 100.0 * incorrect as f64 / f64::from(reps),
        inspected_pct: 100.0 * mean_tau / f64::from(n),
        accept_h,
        accept_k,
        early_stops: outcomes
            .iter()
            .filter(|o| o.source == DecisionSource::EarlyStop)
            .count() as u64,
        region,
        indifferent: region == Region::Indifferent,
        tau_histogram,
    })
}
