//! Monte Carlo path ensembles at the least-favorable counts.

use rayon::prelude::*;

use super::config::DesignConfig;
use super::StageLaw;
use crate::error::{Error, Result};
use crate::exact::Side;
use crate::population::{random_order, DeviationPath};
use crate::seed::{replication_seed, stream};

/// `M` full inspection orders of a population with `m` deviations.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    n: u32,
    m: u32,
    paths: Vec<DeviationPath>,
}

impl Ensemble {
    /// Generates `reps` paths; path `i` uses the seed derived from
    /// `(master, stream, i)`.
    pub fn generate(n: u32, m: u32, reps: u32, master: u64, stream: u64) -> Result<Self> {
        if m > n {
            return Err(Error::InvalidArgument(format!(
                "deviations {m} exceed population size {n}"
            )));
        }
        let paths = (0..reps)
            .into_par_iter()
            .map(|i| random_order(n, m, replication_seed(master, stream, u64::from(i))))
            .collect();
        Ok(Self { n, m, paths })
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn m(&self) -> u32 {
        self.m
    }

    pub fn reps(&self) -> u32 {
        self.paths.len() as u32
    }

    pub fn paths(&self) -> &[DeviationPath] {
        &self.paths
    }
}

/// The two calibration ensembles of a design.
#[derive(Debug, Clone, PartialEq)]
pub struct McEnsembles {
    /// Paths at `m_H*`.
    pub h: Ensemble,
    /// Paths at `m_K*`.
    pub k: Ensemble,
}

/// Builds both calibration ensembles from the design's master seed.
pub fn mc_ensemble(config: &DesignConfig) -> Result<McEnsembles> {
    let (m_h, m_k) = config.calibration_counts();
    Ok(McEnsembles {
        h: Ensemble::generate(config.n, m_h, config.m_reps, config.seed, stream::CALIBRATION_H)?,
        k: Ensemble::generate(config.n, m_k, config.m_reps, config.seed, stream::CALIBRATION_K)?,
    })
}

/// Exact-time error estimates at stage `t` for each candidate threshold:
/// the fraction of all `M` paths that are alive and satisfy `S_t > c`
/// (upper) or `S_t < c` (lower).
pub fn mc_exact_time_estimates(
    ensemble: &Ensemble,
    alive: &[bool],
    t: u32,
    side: Side,
    candidates: &[u32],
) -> Result<Vec<f64>> {
    if alive.len() != ensemble.paths.len() {
        return Err(Error::InvalidArgument(format!(
            "alive mask has {} entries for {} paths",
            alive.len(),
            ensemble.paths.len()
        )));
    }
    if t == 0 || t > ensemble.n {
        return Err(Error::InvalidArgument(format!("stage {t} outside [1, {}]", ensemble.n)));
    }
    let hist = histogram(
        ensemble
            .paths
            .iter()
            .zip(alive)
            .filter(|(_, &a)| a)
            .map(|(p, _)| p.count_at(t)),
        t,
    );
    let (upper, lower) = tails(&hist);
    let reps = ensemble.paths.len().max(1) as f64;
    Ok(candidates
        .iter()
        .map(|&c| {
            let c = c.min(t) as usize;
            let count = match side {
                Side::Upper => upper[c],
                Side::Lower => lower[c],
            };
            count as f64 / reps
        })
        .collect())
}

fn histogram(counts: impl Iterator<Item = u32>, t: u32) -> Vec<u64> {
    let mut hist = vec![0u64; t as usize + 1];
    for s in counts {
        hist[s as usize] += 1;
    }
    hist
}

/// `(above[c], below[c])` = number of paths with `S_t > c` / `S_t < c`.
fn tails(hist: &[u64]) -> (Vec<u64>, Vec<u64>) {
    let len = hist.len();
    let mut above = vec![0u64; len];
    let mut below = vec![0u64; len];
    let mut acc = 0;
    for c in (0..len).rev() {
        above[c] = acc;
        acc += hist[c];
    }
    acc = 0;
    for c in 0..len {
        below[c] = acc;
        acc += hist[c];
    }
    (above, below)
}

/// Calibration law backed by one ensemble: alive paths are those that stayed
/// inside every band fixed so far. The error ledger is kept as an integer
/// count so that feasibility checks are exact fractions of `M`.
pub(crate) struct McLaw<'a> {
    ensemble: &'a Ensemble,
    stage: u32,
    alive: Vec<u32>,
    above: Vec<u64>,
    below: Vec<u64>,
    spent: u64,
}

impl<'a> McLaw<'a> {
    pub(crate) fn new(ensemble: &'a Ensemble) -> Self {
        let mut law = Self {
            ensemble,
            stage: 1,
            alive: (0..ensemble.reps()).collect(),
            above: Vec::new(),
            below: Vec::new(),
            spent: 0,
        };
        law.refresh();
        law
    }

    fn refresh(&mut self) {
        let t = self.stage;
        let paths = &self.ensemble.paths;
        let hist = histogram(self.alive.iter().map(|&i| paths[i as usize].count_at(t)), t);
        (self.above, self.below) = tails(&hist);
    }

    fn fits(&self, count: u64, level: f64) -> bool {
        (self.spent + count) as f64 / f64::from(self.ensemble.reps()) <= level
    }
}

impl StageLaw for McLaw<'_> {
    fn stage(&self) -> u32 {
        self.stage
    }

    fn is_exhausted(&self) -> bool {
        self.alive.is_empty()
    }

    fn spent(&self) -> f64 {
        self.spent as f64 / f64::from(self.ensemble.reps())
    }

    fn upper_tail(&self, c: u32) -> f64 {
        self.above.get(c as usize).copied().unwrap_or(0) as f64 / f64::from(self.ensemble.reps())
    }

    fn lower_tail(&self, c: u32) -> f64 {
        let c = (c as usize).min(self.below.len());
        let count = if c == self.below.len() {
            self.alive.len() as u64
        } else {
            self.below[c]
        };
        count as f64 / f64::from(self.ensemble.reps())
    }

    fn smallest_upper(&self, level: f64) -> u32 {
        (0..=self.stage)
            .find(|&c| self.fits(self.above[c as usize], level))
            .unwrap_or(self.stage)
    }

    fn largest_lower(&self, level: f64) -> u32 {
        (0..=self.stage)
            .rev()
            .find(|&c| self.fits(self.below[c as usize], level))
            .unwrap_or(0)
    }

    fn commit_upper(&mut self, c: u32) {
        self.spent += self.above[c as usize];
    }

    fn commit_lower(&mut self, c: u32) {
        self.spent += self.below[c as usize];
    }

    fn advance(&mut self, lower: u32, upper: u32) {
        let t = self.stage;
        let paths = &self.ensemble.paths;
        self.alive.retain(|&i| {
            let s = paths[i as usize].count_at(t);
            lower <= s && s <= upper
        });
        self.stage += 1;
        self.refresh();
    }
}
