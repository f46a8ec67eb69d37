//! Exact finite-population probabilities under sampling without replacement.
//!
//! The workhorse is a forward dynamic program over `(stage, count)`: a
//! [`ReachTable`] holds, for each count `s`, the probability that `S_t = s`
//! and no boundary was crossed before `t`. Advancing one draw uses the
//! conditional law `P(X_{t+1} = 1 | S_t = s) = (m - s) / (n - t)`.
//! [`brute_force_crossing`] enumerates every arrangement for tiny `n` and
//! serves as an independent oracle for the DP.

use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_binomial;

use crate::error::{Error, Result};
use crate::procedure::StoppingRule;

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = CompensatedSum::default();
        for x in iter {
            acc.add(x);
        }
        acc
    }
}

/// `P(S_t = s)` for `t` draws without replacement from `n` items holding `m`
/// deviations.
pub fn hypergeom_pmf(n: u32, m: u32, t: u32, s: u32) -> Result<f64> {
    if t > n {
        return Err(Error::InvalidArgument(format!("draws {t} exceed population size {n}")));
    }
    if m > n {
        return Err(Error::InvalidArgument(format!(
            "deviations {m} exceed population size {n}"
        )));
    }
    if s > t || s > m || t - s > n - m {
        return Ok(0.0);
    }
    let (n, m, t, s) = (u64::from(n), u64::from(m), u64::from(t), u64::from(s));
    let ln = ln_binomial(m, s) + ln_binomial(n - m, t - s) - ln_binomial(n, t);
    Ok(ln.exp())
}

/// Surviving mass by count at one stage of the stopping process.
#[derive(Debug, Clone, PartialEq)]
pub struct ReachTable {
    stage: u32,
    mass: Vec<f64>,
}

impl ReachTable {
    /// Stage 0: `S_0 = 0` with probability one.
    pub fn initial() -> Self {
        Self {
            stage: 0,
            mass: vec![1.0],
        }
    }

    pub fn from_mass(stage: u32, mass: Vec<f64>) -> Result<Self> {
        if mass.len() > stage as usize + 1 {
            return Err(Error::InvalidArgument(format!(
                "stage {stage} table cannot hold {} counts",
                mass.len()
            )));
        }
        Ok(Self { stage, mass })
    }

    pub fn stage(&self) -> u32 {
        self.stage
    }

    /// Mass at count `s` (zero outside the stored support).
    pub fn at(&self, s: u32) -> f64 {
        self.mass.get(s as usize).copied().unwrap_or(0.0)
    }

    pub fn masses(&self) -> &[f64] {
        &self.mass
    }

    pub fn total(&self) -> f64 {
        self.mass.iter().copied().collect::<CompensatedSum>().value()
    }

    /// `Σ_{s > c}` mass.
    pub fn above(&self, c: u32) -> f64 {
        self.mass
            .iter()
            .skip(c as usize + 1)
            .copied()
            .collect::<CompensatedSum>()
            .value()
    }

    /// `Σ_{s < c}` mass.
    pub fn below(&self, c: u32) -> f64 {
        self.mass
            .iter()
            .take(c as usize)
            .copied()
            .collect::<CompensatedSum>()
            .value()
    }

    /// `tails[c] = Σ_{s > c}` for `c = 0..=stage`.
    pub(crate) fn upper_tails(&self) -> Vec<f64> {
        let len = self.stage as usize + 1;
        let mut tails = vec![0.0; len];
        let mut acc = CompensatedSum::default();
        for c in (0..len).rev() {
            tails[c] = acc.value();
            acc.add(self.at(c as u32));
        }
        tails
    }

    /// `tails[c] = Σ_{s < c}` for `c = 0..=stage`.
    pub(crate) fn lower_tails(&self) -> Vec<f64> {
        let len = self.stage as usize + 1;
        let mut tails = vec![0.0; len];
        let mut acc = CompensatedSum::default();
        for (c, tail) in tails.iter_mut().enumerate() {
            *tail = acc.value();
            acc.add(self.at(c as u32));
        }
        tails
    }

    fn retain_band(&mut self, lower: u32, upper: u32) {
        for (s, w) in self.mass.iter_mut().enumerate() {
            let s = s as u32;
            if s < lower || s > upper {
                *w = 0.0;
            }
        }
    }

    fn step(&self, n: u32, m: u32) -> ReachTable {
        let t = self.stage;
        let remaining = f64::from(n - t);
        let width = (t + 1).min(m) as usize + 1;
        let mut next = vec![0.0; width];
        for (s, &w) in self.mass.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let left = m.saturating_sub(s as u32);
            let clean_left = (n - t) as i64 - i64::from(left);
            if clean_left > 0 {
                next[s] += w * (clean_left as f64 / remaining);
            }
            if left > 0 {
                next[s + 1] += w * (f64::from(left) / remaining);
            }
        }
        ReachTable {
            stage: t + 1,
            mass: next,
        }
    }
}

/// Removes mass outside `[lower, upper]` at the table's stage, then advances
/// one draw.
pub fn propagate(reach: &ReachTable, n: u32, m: u32, lower: u32, upper: u32) -> Result<ReachTable> {
    if reach.stage >= n {
        return Err(Error::InvalidArgument(format!(
            "cannot advance past stage {} of {n}",
            reach.stage
        )));
    }
    if m > n {
        return Err(Error::InvalidArgument(format!(
            "deviations {m} exceed population size {n}"
        )));
    }
    let mut kept = reach.clone();
    kept.retain_band(lower, upper);
    Ok(kept.step(n, m))
}

/// Which wrong boundary an exact-time error crosses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    /// `S_t > c`: a K decision.
    Upper,
    /// `S_t < c`: an H decision.
    Lower,
}

/// Surviving law at stage `t` under thresholds fixed for stages `1..t-1`.
pub fn reach_at(n: u32, m: u32, lower: &[u32], upper: &[u32], t: u32) -> Result<ReachTable> {
    if t == 0 || t > n {
        return Err(Error::InvalidArgument(format!("stage {t} outside [1, {n}]")));
    }
    let prior = (t - 1) as usize;
    if lower.len() < prior || upper.len() < prior {
        return Err(Error::InvalidArgument(format!(
            "threshold prefix covers fewer than {prior} stages"
        )));
    }
    let mut reach = propagate(&ReachTable::initial(), n, m, 0, 0)?;
    for i in 0..prior {
        reach = propagate(&reach, n, m, lower[i], upper[i])?;
    }
    Ok(reach)
}

/// Exact-time error `A_t(c)` (upper) or `B_t(c)` (lower) at deviation count
/// `m`, given thresholds for stages `1..t-1`.
pub fn exact_time_error(n: u32, m: u32, lower: &[u32], upper: &[u32], t: u32, side: Side, c: u32) -> Result<f64> {
    let reach = reach_at(n, m, lower, upper, t)?;
    Ok(match side {
        Side::Upper => reach.above(c),
        Side::Lower => reach.below(c),
    })
}

/// Decision probabilities and stopping time of a rule at one deviation count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    /// Probability of an early K stop (crossing above `U_t`).
    pub upper_cross: f64,
    /// Probability of an early H stop (crossing below `L_t`).
    pub lower_cross: f64,
    /// Total probability of deciding K, terminal decisions included.
    pub accept_k: f64,
    /// Total probability of deciding H, terminal decisions included.
    pub accept_h: f64,
    pub expected_tau: f64,
}

/// Exact [`Outcome`] of `rule` on a population with `m` deviations.
pub fn exact_outcome(rule: &StoppingRule, m: u32) -> Result<Outcome> {
    rule.validate()?;
    let n = rule.n;
    if m > n {
        return Err(Error::InvalidArgument(format!(
            "deviations {m} exceed population size {n}"
        )));
    }
    let mut upper = CompensatedSum::default();
    let mut lower = CompensatedSum::default();
    let mut term_k = CompensatedSum::default();
    let mut term_h = CompensatedSum::default();
    let mut tau = CompensatedSum::default();
    let mut reach = ReachTable::initial().step(n, m);
    loop {
        let t = reach.stage;
        if t == rule.terminal_stage {
            let thr = rule.terminal_accept_h_max;
            let k = reach.above(thr);
            let h = reach.below(thr.saturating_add(1).min(t + 1));
            term_k.add(k);
            term_h.add(h);
            tau.add(f64::from(t) * (k + h));
            break;
        }
        let (lo, hi) = if rule.stops_at(t) {
            (rule.lower_at(t), rule.upper_at(t))
        } else {
            (0, t)
        };
        // An H stop takes precedence when the band is inverted.
        let h = reach.below(lo);
        let k: f64 = reach
            .masses()
            .iter()
            .enumerate()
            .filter(|&(s, _)| s as u32 > hi && s as u32 >= lo)
            .map(|(_, &w)| w)
            .collect::<CompensatedSum>()
            .value();
        lower.add(h);
        upper.add(k);
        tau.add(f64::from(t) * (h + k));
        reach.retain_band(lo, hi);
        reach = reach.step(n, m);
    }
    let upper_cross = upper.value();
    let lower_cross = lower.value();
    Ok(Outcome {
        upper_cross,
        lower_cross,
        accept_k: upper_cross + term_k.value(),
        accept_h: lower_cross + term_h.value(),
        expected_tau: tau.value(),
    })
}

/// Largest population size accepted by [`brute_force_crossing`].
pub const BRUTE_FORCE_MAX_N: u32 = 10;

/// [`Outcome`] by exhaustive enumeration of all `C(n, m)` arrangements.
pub fn brute_force_crossing(rule: &StoppingRule, m: u32) -> Result<Outcome> {
    let n = rule.n;
    if n > BRUTE_FORCE_MAX_N {
        return Err(Error::InvalidArgument(format!(
            "brute force enumeration limited to n <= {BRUTE_FORCE_MAX_N}, got {n}"
        )));
    }
    if m > n {
        return Err(Error::InvalidArgument(format!(
            "deviations {m} exceed population size {n}"
        )));
    }
    let lower_at = |t: u32| rule.lower[(t - 1) as usize];
    let upper_at = |t: u32| rule.upper[(t - 1) as usize];
    let (mut arrangements, mut upper, mut lower, mut acc_k, mut tau_sum) = (0u64, 0u64, 0u64, 0u64, 0u64);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() != m {
            continue;
        }
        arrangements += 1;
        let mut s = 0;
        for t in 1..=n {
            s += (mask >> (t - 1)) & 1;
            let early = t >= rule.first_stop && t < rule.terminal_stage;
            if early && s < lower_at(t) {
                lower += 1;
                tau_sum += u64::from(t);
                break;
            }
            if early && s > upper_at(t) {
                upper += 1;
                acc_k += 1;
                tau_sum += u64::from(t);
                break;
            }
            if t == rule.terminal_stage {
                if s > rule.terminal_accept_h_max {
                    acc_k += 1;
                }
                tau_sum += u64::from(t);
                break;
            }
        }
    }
    let total = arrangements as f64;
    Ok(Outcome {
        upper_cross: upper as f64 / total,
        lower_cross: lower as f64 / total,
        accept_k: acc_k as f64 / total,
        accept_h: (arrangements - acc_k) as f64 / total,
        expected_tau: tau_sum as f64 / total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const EPS: f64 = 1e-12;

    #[test]
    fn pmf_examples() {
        assert!((hypergeom_pmf(4, 2, 2, 1).unwrap() - 2.0 / 3.0).abs() < EPS);
        assert!((hypergeom_pmf(100, 20, 1, 1).unwrap() - 0.2).abs() < EPS);
        assert!((hypergeom_pmf(10, 3, 10, 3).unwrap() - 1.0).abs() < EPS);
        assert_eq!(hypergeom_pmf(10, 3, 10, 2).unwrap(), 0.0);
        assert!(hypergeom_pmf(10, 3, 11, 2).is_err());
    }

    #[test]
    fn pmf_sums_to_one() {
        for n in [1u32, 2, 7, 50, 199, 500] {
            for m in [0, n / 3, n / 2, n] {
                for t in [0, 1, n / 4, n / 2, n] {
                    let total: CompensatedSum = (0..=t).map(|s| hypergeom_pmf(n, m, t, s).unwrap()).collect();
                    assert!((total.value() - 1.0).abs() < 1e-10, "n={n} m={m} t={t}");
                }
            }
        }
    }

    #[test]
    fn propagate_examples() {
        let first = propagate(&ReachTable::initial(), 4, 2, 0, 0).unwrap();
        assert_eq!(first.masses(), &[0.5, 0.5]);
        let second = propagate(&first, 4, 2, 0, 0).unwrap();
        assert!((second.at(0) - 1.0 / 6.0).abs() < EPS);
        assert!((second.at(1) - 1.0 / 3.0).abs() < EPS);
        assert_eq!(second.at(2), 0.0);
        // All mass removed.
        let dead = propagate(&first, 4, 2, 2, 1).unwrap();
        assert_eq!(dead.total(), 0.0);
        let end = ReachTable::from_mass(4, vec![0.0, 0.0, 1.0]).unwrap();
        assert!(propagate(&end, 4, 2, 0, 4).is_err());
    }

    #[test]
    fn unrestricted_propagation_is_hypergeometric() {
        for (n, m) in [(200u32, 37u32), (60, 60), (90, 0), (13, 6)] {
            let mut reach = ReachTable::initial();
            for t in 0..n {
                reach = propagate(&reach, n, m, 0, t).unwrap();
                for s in 0..=t + 1 {
                    let want = hypergeom_pmf(n, m, t + 1, s).unwrap();
                    assert!((reach.at(s) - want).abs() < 1e-10, "n={n} m={m} t={} s={s}", t + 1);
                }
            }
        }
    }

    #[test]
    fn first_stage_errors() {
        let a = exact_time_error(100, 15, &[], &[], 1, Side::Upper, 0).unwrap();
        assert!((a - 0.15).abs() < EPS);
        let b = exact_time_error(100, 25, &[], &[], 1, Side::Lower, 1).unwrap();
        assert!((b - 0.75).abs() < EPS);
        assert!(exact_time_error(100, 25, &[], &[], 0, Side::Lower, 1).is_err());
        assert!(exact_time_error(100, 25, &[], &[], 101, Side::Lower, 1).is_err());
    }

    #[test]
    fn brute_force_examples() {
        let free = StoppingRule::full_inspection(2, 1);
        let o = brute_force_crossing(&free, 1).unwrap();
        assert_eq!((o.upper_cross, o.lower_cross, o.expected_tau), (0.0, 0.0, 2.0));

        let rule = StoppingRule::from_thresholds(2, vec![0], vec![0], 1).unwrap();
        let o = brute_force_crossing(&rule, 1).unwrap();
        assert_eq!((o.upper_cross, o.lower_cross, o.expected_tau), (0.5, 0.0, 1.5));

        assert!(brute_force_crossing(&StoppingRule::full_inspection(11, 3), 2).is_err());
    }

    #[test]
    fn dp_matches_enumeration_on_n4() {
        let rule = StoppingRule::from_thresholds(4, vec![0, 1, 1], vec![1, 1, 2], 2).unwrap();
        for m in 0..=4 {
            let dp = exact_outcome(&rule, m).unwrap();
            let bf = brute_force_crossing(&rule, m).unwrap();
            assert!((dp.upper_cross - bf.upper_cross).abs() < EPS);
            assert!((dp.lower_cross - bf.lower_cross).abs() < EPS);
            assert!((dp.accept_k - bf.accept_k).abs() < EPS);
            assert!((dp.expected_tau - bf.expected_tau).abs() < EPS);
            assert!((dp.accept_k + dp.accept_h - 1.0).abs() < EPS);
        }
    }

    #[test]
    fn compensated_sum_beats_naive() {
        let mut acc = CompensatedSum::default();
        acc.add(1.0);
        for _ in 0..10 {
            acc.add(1e-16);
        }
        acc.add(-1.0);
        assert!((acc.value() - 1e-15).abs() < 1e-25);
    }
}
