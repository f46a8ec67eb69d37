//! Finite audit populations and random inspection orders.
//!
//! Paths are kept as running deviation counts `S_t`, never as rates; every
//! boundary comparison downstream is an integer comparison on counts.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_for;

/// `n` binary items, `m` of which deviate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinitePopulation {
    items: Vec<u8>,
    deviations: u32,
}

impl FinitePopulation {
    /// Builds a population from 0/1 indicators.
    pub fn from_items(items: Vec<u8>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::InvalidArgument("empty population".into()));
        }
        if items.len() > u32::MAX as usize {
            return Err(Error::InvalidArgument("population too large".into()));
        }
        let mut deviations = 0u32;
        for (i, &x) in items.iter().enumerate() {
            match x {
                0 => {}
                1 => deviations += 1,
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "item {} has value {other}; expected 0 or 1",
                        i + 1
                    )))
                }
            }
        }
        Ok(Self { items, deviations })
    }

    pub fn size(&self) -> u32 {
        self.items.len() as u32
    }

    pub fn deviations(&self) -> u32 {
        self.deviations
    }

    /// Population deviation rate `m / n`.
    pub fn rate(&self) -> f64 {
        f64::from(self.deviations) / f64::from(self.size())
    }

    pub fn items(&self) -> &[u8] {
        &self.items
    }
}

/// Running deviation counts `S_1..S_n` of one inspection order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviationPath {
    prefix_counts: Vec<u32>,
    source_seed: u64,
}

impl DeviationPath {
    /// Prefix counts of `items` taken in the given order.
    pub fn from_items(items: &[u8], source_seed: u64) -> Self {
        let mut s = 0u32;
        let prefix_counts = items
            .iter()
            .map(|&x| {
                s += u32::from(x);
                s
            })
            .collect();
        Self {
            prefix_counts,
            source_seed,
        }
    }

    pub fn len(&self) -> u32 {
        self.prefix_counts.len() as u32
    }

    pub fn is_empty(&self) -> bool {
        self.prefix_counts.is_empty()
    }

    /// `S_t` for `1 <= t <= n`.
    #[inline]
    pub fn count_at(&self, t: u32) -> u32 {
        self.prefix_counts[(t - 1) as usize]
    }

    pub fn prefix_counts(&self) -> &[u32] {
        &self.prefix_counts
    }

    pub fn source_seed(&self) -> u64 {
        self.source_seed
    }

    /// The 0/1 increments `X_1..X_n`.
    pub fn increments(&self) -> impl Iterator<Item = u8> + '_ {
        let mut prev = 0u32;
        self.prefix_counts.iter().map(move |&s| {
            let x = (s - prev) as u8;
            prev = s;
            x
        })
    }
}

/// A population of `n` items with exactly `m` deviations, ones first.
pub fn synth_population(n: u32, m: u32) -> Result<FinitePopulation> {
    if n == 0 {
        return Err(Error::InvalidArgument("population size must be positive".into()));
    }
    if m > n {
        return Err(Error::InvalidArgument(format!(
            "deviation count {m} exceeds population size {n}"
        )));
    }
    Ok(FinitePopulation {
        items: canonical_items(n, m),
        deviations: m,
    })
}

fn canonical_items(n: u32, m: u32) -> Vec<u8> {
    let mut items = vec![0u8; n as usize];
    items[..m as usize].fill(1);
    items
}

/// Uniformly random inspection order of `pop`, fully determined by `seed`.
///
/// The shuffle starts from the canonical arrangement of `(n, m)`, so the
/// result depends on the population only through its counts.
pub fn sample_path(pop: &FinitePopulation, seed: u64) -> DeviationPath {
    random_order(pop.size(), pop.deviations(), seed)
}

pub(crate) fn random_order(n: u32, m: u32, seed: u64) -> DeviationPath {
    let mut items = canonical_items(n, m);
    items.shuffle(&mut rng_for(seed));
    DeviationPath::from_items(&items, seed)
}

/// Deviation count whose rate `m / n` is nearest to `p`; midpoints round up.
pub fn nearest_grid_rate(p: f64, n: u32) -> Result<u32> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("rate {p} outside [0, 1]")));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("population size must be positive".into()));
    }
    // The slack absorbs representation error in products such as 0.35 * 20.
    let m = (p * f64::from(n) + 0.5 + 1e-9).floor() as u32;
    Ok(m.min(n))
}
