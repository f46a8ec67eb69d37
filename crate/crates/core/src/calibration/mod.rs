//! Recursive boundary calibration.
//!
//! Stages are processed in order. At stage `t`, with thresholds for stages
//! `1..t-1` fixed, the upper threshold is the smallest count `c` with
//! `ledger_A(t-1) + A_t(c) <= alpha` and the lower threshold is the largest
//! count `c` with `ledger_B(t-1) + B_t(c) <= beta`. `A_t` is evaluated at the
//! least-favorable H count and `B_t` at the least-favorable K count, either
//! exactly through the reach-table DP or by counting alive Monte Carlo paths.

mod config;
mod mc;
mod schedule;

pub use config::{Backend, DesignConfig, Region, Variant};
pub use mc::{mc_ensemble, mc_exact_time_estimates, Ensemble, McEnsembles};
pub use schedule::{BoundarySchedule, MinSampleSize, Provenance, ScheduleRow, TruncationReport};

use crate::error::{Error, Result};
use crate::exact::{propagate, CompensatedSum, ReachTable};
use crate::procedure::StoppingRule;
use crate::seed::stream;
use mc::McLaw;

/// Law of `S_t` among paths that have not stopped before `t`, together with
/// the error ledger spent so far on one side.
pub(crate) trait StageLaw {
    fn stage(&self) -> u32;
    fn is_exhausted(&self) -> bool;
    fn spent(&self) -> f64;
    /// Probability of surviving to `t` with `S_t > c`.
    fn upper_tail(&self, c: u32) -> f64;
    /// Probability of surviving to `t` with `S_t < c`, for `c <= t + 1`.
    fn lower_tail(&self, c: u32) -> f64;
    /// Smallest `c` with `spent + upper_tail(c) <= level`.
    fn smallest_upper(&self, level: f64) -> u32;
    /// Largest `c` with `spent + lower_tail(c) <= level`.
    fn largest_lower(&self, level: f64) -> u32;
    fn commit_upper(&mut self, c: u32);
    fn commit_lower(&mut self, c: u32);
    /// Drops paths outside `[lower, upper]` at the current stage and moves
    /// to the next one.
    fn advance(&mut self, lower: u32, upper: u32);
}

struct ExactLaw {
    n: u32,
    m: u32,
    reach: ReachTable,
    above: Vec<f64>,
    below: Vec<f64>,
    total: f64,
    spent: CompensatedSum,
}

impl ExactLaw {
    fn new(n: u32, m: u32) -> Result<Self> {
        let reach = propagate(&ReachTable::initial(), n, m, 0, 0)?;
        let mut law = Self {
            n,
            m,
            reach,
            above: Vec::new(),
            below: Vec::new(),
            total: 0.0,
            spent: CompensatedSum::default(),
        };
        law.refresh();
        Ok(law)
    }

    fn refresh(&mut self) {
        self.above = self.reach.upper_tails();
        self.below = self.reach.lower_tails();
        self.total = self.reach.total();
    }
}

impl StageLaw for ExactLaw {
    fn stage(&self) -> u32 {
        self.reach.stage()
    }

    fn is_exhausted(&self) -> bool {
        self.reach.masses().iter().all(|&w| w == 0.0)
    }

    fn spent(&self) -> f64 {
        self.spent.value()
    }

    fn upper_tail(&self, c: u32) -> f64 {
        self.above.get(c as usize).copied().unwrap_or(0.0)
    }

    fn lower_tail(&self, c: u32) -> f64 {
        self.below.get(c as usize).copied().unwrap_or(self.total)
    }

    fn smallest_upper(&self, level: f64) -> u32 {
        let spent = self.spent.value();
        (0..=self.stage())
            .find(|&c| spent + self.above[c as usize] <= level)
            .unwrap_or(self.stage())
    }

    fn largest_lower(&self, level: f64) -> u32 {
        let spent = self.spent.value();
        (0..=self.stage())
            .rev()
            .find(|&c| spent + self.below[c as usize] <= level)
            .unwrap_or(0)
    }

    fn commit_upper(&mut self, c: u32) {
        self.spent.add(self.above[c as usize]);
    }

    fn commit_lower(&mut self, c: u32) {
        self.spent.add(self.below[c as usize]);
    }

    fn advance(&mut self, lower: u32, upper: u32) {
        self.reach =
            propagate(&self.reach, self.n, self.m, lower, upper).expect("calibration never advances past stage n");
        self.refresh();
    }
}

/// Closed-form stage-1 thresholds `(L_1, U_1)` of a two-sided design.
///
/// `U_1 = 0` (stop for K on a first deviation) when `p_H* <= alpha`, else
/// `U_1 = 1` (no upper stop). `L_1 = 1` (stop for H on a first clean item)
/// when `1 - p_K* <= beta`, else `L_1 = 0`.
pub fn stage1_boundaries(config: &DesignConfig) -> Result<(u32, u32)> {
    config.validate()?;
    if config.n < 2 {
        return Err(Error::InvalidArgument("stage 1 boundaries need n >= 2".into()));
    }
    let (m_h, m_k) = config.calibration_counts();
    let n = f64::from(config.n);
    let p_h = f64::from(m_h) / n;
    let p_k = f64::from(m_k) / n;
    let upper = if p_h <= config.alpha { 0 } else { 1 };
    let lower = if 1.0 - p_k <= config.beta { 1 } else { 0 };
    Ok((lower, upper))
}

/// Calibrates the boundary schedule of `config`.
pub fn calibrate(config: &DesignConfig) -> Result<BoundarySchedule> {
    calibrate_with_progress(config, &|_| {})
}

/// [`calibrate`], reporting the completed fraction of stages to `progress`.
pub fn calibrate_with_progress(config: &DesignConfig, progress: &(dyn Fn(f64) + Sync)) -> Result<BoundarySchedule> {
    config.validate()?;
    let run = with_laws(config, Thresholds::Calibrate, progress)?;
    let (m_h, m_k) = config.calibration_counts();
    let mut rule = StoppingRule {
        n: config.n,
        lower: run.lower,
        upper: run.upper,
        first_stop: config.t0,
        terminal_stage: config.truncation,
        terminal_accept_h_max: config.terminal_accept_h_max(),
    };
    if let Some(report) = &run.truncation {
        rule.terminal_accept_h_max = report.c_t;
    }
    let mut schedule = BoundarySchedule {
        config: config.clone(),
        provenance: Provenance {
            config_hash: config.hash(),
            backend: config.backend,
            seed: config.seed,
            variant: config.variant,
            m_h_star: m_h,
            m_k_star: m_k,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        },
        rule,
        cum_alpha: run.cum_alpha,
        cum_beta: run.cum_beta,
        truncation: run.truncation,
        min_sample: None,
    };
    if config.variant == Variant::OneSidedPower {
        let min = min_sample_size(config, &schedule)?;
        schedule.rule.first_stop = config.t0.max(min.t_min);
        schedule.min_sample = Some(min);
    }
    progress(1.0);
    Ok(schedule)
}

/// Terminal threshold `c_T` of a truncated design whose boundaries for
/// stages `1..T-1` are `lower` / `upper`.
///
/// `c_T` is the smallest count keeping the cumulative upper-side error at
/// `m_H*` within alpha; the design is flagged infeasible when the resulting
/// lower-side error at `m_K*` exceeds beta.
pub fn truncated_terminal(config: &DesignConfig, lower: &[u32], upper: &[u32]) -> Result<TruncationReport> {
    let stages = config.truncation.saturating_sub(1) as usize;
    if config.truncation == 0 || config.truncation > config.n {
        return Err(Error::InvalidArgument(format!(
            "truncation stage {} outside [1, {}]",
            config.truncation, config.n
        )));
    }
    if lower.len() < stages || upper.len() < stages {
        return Err(Error::InvalidArgument(format!(
            "threshold prefix covers fewer than {stages} stages"
        )));
    }
    let mut config = config.clone();
    config.variant = Variant::Truncated;
    let run = with_laws(&config, Thresholds::Fixed { lower, upper }, &|_| {})?;
    Ok(run.truncation.expect("truncated runs report a terminal rule"))
}

/// Monte Carlo power of the one-sided rule restricted to stop no earlier
/// than `t_min`, for `t_min = 1..n-1` (entry `t_min - 1`).
///
/// Power is the probability of an early favorable conclusion at the
/// alternative count `nearest(r - theta_h)`; every path of one common
/// ensemble is reused for each `t_min`, so the curve is nonincreasing.
pub fn power_by_min_stage(config: &DesignConfig, schedule: &BoundarySchedule) -> Result<Vec<f64>> {
    if !config.variant.is_one_sided() {
        return Err(Error::InvalidArgument(format!(
            "minimum sample size applies to one-sided designs, not {}",
            config.variant
        )));
    }
    let n = config.n;
    if schedule.n() != n {
        return Err(Error::InvalidArgument("schedule and config sizes differ".into()));
    }
    let (m_alt, _) = config.calibration_counts();
    let ensemble = Ensemble::generate(n, m_alt, config.m_reps, config.seed, stream::POWER)?;
    let rule = &schedule.rule;
    let last_stop = rule.terminal_stage.min(n);
    // Histogram of the last stage at which each path sits below L_t.
    let mut last = vec![0u64; n as usize + 1];
    for path in ensemble.paths() {
        let crossing = (config.t0..last_stop)
            .rev()
            .find(|&t| path.count_at(t) < rule.lower_at(t))
            .unwrap_or(0);
        last[crossing as usize] += 1;
    }
    let reps = f64::from(config.m_reps);
    let mut curve = vec![0.0; n.saturating_sub(1) as usize];
    let mut acc = 0u64;
    for t in (1..n).rev() {
        acc += last[t as usize];
        curve[(t - 1) as usize] = acc as f64 / reps;
    }
    Ok(curve)
}

/// Smallest minimum stage `t_min` whose restricted rule keeps Monte Carlo
/// power at least `1 - beta`. Returns `n` (flagged infeasible) when no stage
/// qualifies.
pub fn min_sample_size(config: &DesignConfig, schedule: &BoundarySchedule) -> Result<MinSampleSize> {
    let curve = power_by_min_stage(config, schedule)?;
    let (m_alt, _) = config.calibration_counts();
    let reps = f64::from(config.m_reps);
    let target = 1.0 - config.beta;
    let se = |p: f64| (p * (1.0 - p) / reps).sqrt();
    match curve.iter().position(|&p| p >= target) {
        Some(i) => Ok(MinSampleSize {
            t_min: i as u32 + 1,
            m_alt,
            power: curve[i],
            power_se: se(curve[i]),
            feasible: true,
        }),
        None => {
            log::warn!("no minimum stage reaches power {target} at m = {m_alt}; falling back to full inspection");
            Ok(MinSampleSize {
                t_min: config.n,
                m_alt,
                power: 0.0,
                power_se: 0.0,
                feasible: false,
            })
        }
    }
}

enum Thresholds<'a> {
    Calibrate,
    Fixed { lower: &'a [u32], upper: &'a [u32] },
}

struct Run {
    lower: Vec<u32>,
    upper: Vec<u32>,
    cum_alpha: Vec<f64>,
    cum_beta: Vec<f64>,
    truncation: Option<TruncationReport>,
}

fn with_laws(config: &DesignConfig, thresholds: Thresholds<'_>, progress: &(dyn Fn(f64) + Sync)) -> Result<Run> {
    let (m_h, m_k) = config.calibration_counts();
    let two_sided = !config.variant.is_one_sided();
    match config.backend {
        Backend::Exact => {
            let h = two_sided.then(|| ExactLaw::new(config.n, m_h)).transpose()?;
            let k = ExactLaw::new(config.n, m_k)?;
            recurse(config, h, k, thresholds, progress)
        }
        Backend::MonteCarlo => {
            let gen = |m, tag| Ensemble::generate(config.n, m, config.m_reps, config.seed, tag);
            let k_paths = gen(m_k, stream::CALIBRATION_K)?;
            let h_paths = two_sided.then(|| gen(m_h, stream::CALIBRATION_H)).transpose()?;
            let h = h_paths.as_ref().map(McLaw::new);
            recurse(config, h, McLaw::new(&k_paths), thresholds, progress)
        }
    }
}

fn recurse<L: StageLaw>(
    config: &DesignConfig,
    mut h: Option<L>,
    mut k: L,
    thresholds: Thresholds<'_>,
    progress: &(dyn Fn(f64) + Sync),
) -> Result<Run> {
    let n = config.n;
    let stages = n.saturating_sub(1);
    let last = config.last_boundary_stage();
    let truncated = config.variant == Variant::Truncated && config.truncation < n;
    let horizon = if truncated { config.truncation } else { last };
    let lower_level = config.lower_level();
    let mut run = Run {
        lower: Vec::with_capacity(stages as usize),
        upper: Vec::with_capacity(stages as usize),
        cum_alpha: Vec::with_capacity(stages as usize),
        cum_beta: Vec::with_capacity(stages as usize),
        truncation: None,
    };

    for t in 1..=stages {
        let (lo, hi) = if t < config.t0 || t > last {
            (0, t)
        } else {
            let (lo, hi) = match thresholds {
                Thresholds::Fixed { lower, upper } => (lower[(t - 1) as usize], upper[(t - 1) as usize]),
                Thresholds::Calibrate => {
                    // Exhausted ensembles carry no information; stop nothing.
                    let hi = match &h {
                        Some(law) if !law.is_exhausted() => law.smallest_upper(config.alpha),
                        _ => t,
                    };
                    let lo = if k.is_exhausted() {
                        0
                    } else {
                        k.largest_lower(lower_level)
                    };
                    // Late in the sample the two laws can have disjoint
                    // supports and the greedy choices cross (L_t > U_t). Every
                    // path stops then; counts strictly between the thresholds
                    // decide H, so the upper ledger over-counts those stages.
                    (lo, hi)
                }
            };
            if let Some(law) = h.as_mut() {
                law.commit_upper(hi);
            }
            k.commit_lower(lo);
            (lo, hi)
        };
        run.lower.push(lo);
        run.upper.push(hi);
        run.cum_alpha.push(h.as_ref().map_or(0.0, |law| law.spent()));
        run.cum_beta.push(k.spent());
        if t < horizon {
            if let Some(law) = h.as_mut() {
                law.advance(lo, hi);
            }
            k.advance(lo, hi);
        }
        progress(f64::from(t) / f64::from(stages));
    }

    if config.variant == Variant::Truncated {
        run.truncation = Some(if truncated {
            let h = h.as_ref().expect("truncated designs are two-sided");
            debug_assert_eq!(h.stage(), config.truncation);
            let c_t = h.smallest_upper(config.alpha);
            let upper_error = h.spent() + h.upper_tail(c_t);
            let lower_error = k.spent() + k.lower_tail(c_t + 1);
            TruncationReport {
                stage: config.truncation,
                c_t,
                upper_error,
                lower_error,
                feasible: lower_error <= config.beta,
            }
        } else {
            // Full inspection: S_n = m exactly, so the terminal decision is
            // wrong only if the calibration count itself sits on the wrong side.
            let (m_h, m_k) = config.calibration_counts();
            let c_t = config.terminal_accept_h_max();
            let upper_error = run.cum_alpha.last().copied().unwrap_or(0.0) + if m_h > c_t { 1.0 } else { 0.0 };
            let lower_error = run.cum_beta.last().copied().unwrap_or(0.0) + if m_k <= c_t { 1.0 } else { 0.0 };
            TruncationReport {
                stage: n,
                c_t,
                upper_error,
                lower_error,
                feasible: lower_error <= config.beta,
            }
        });
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::{brute_force_crossing, exact_outcome, exact_time_error, Side};

    fn section6(n: u32) -> DesignConfig {
        DesignConfig::new(n, 0.2, 0.05, 0.05, 0.05, 0.05)
    }

    #[test]
    fn stage1_examples() {
        assert_eq!(stage1_boundaries(&section6(100)).unwrap(), (0, 1));
        // p_H* = 0.03 <= alpha.
        let c = DesignConfig::new(100, 0.06, 0.03, 0.03, 0.05, 0.05);
        assert_eq!(stage1_boundaries(&c).unwrap().1, 0);
        // p_K* = 0.97: 1 - p_K* <= beta.
        let c = DesignConfig::new(100, 0.9, 0.05, 0.07, 0.05, 0.05);
        assert_eq!(stage1_boundaries(&c).unwrap().0, 1);
    }

    #[test]
    fn calibrate_base_case_matches_closed_form() {
        for backend in [Backend::Exact, Backend::MonteCarlo] {
            let c = section6(100).with_backend(backend).with_mc(2_000, 3);
            let s = calibrate(&c).unwrap();
            assert_eq!((s.lower(1), s.upper(1)), stage1_boundaries(&c).unwrap());
        }
    }

    #[test]
    fn exact_schedule_controls_errors() {
        let c = section6(100).with_backend(Backend::Exact);
        let s = calibrate(&c).unwrap();
        assert_eq!(s.rows().len(), 99);
        let (m_h, m_k) = c.calibration_counts();
        let at_h = exact_outcome(&s.rule, m_h).unwrap();
        let at_k = exact_outcome(&s.rule, m_k).unwrap();
        assert!(at_h.upper_cross <= 0.05 + 1e-10, "{}", at_h.upper_cross);
        assert!(at_k.lower_cross <= 0.05 + 1e-10, "{}", at_k.lower_cross);
        // H wins inside crossed bands, so the upper ledger is an upper bound.
        assert!(at_h.upper_cross <= s.cum_alpha[98] + 1e-12);
        assert!((at_k.lower_cross - s.cum_beta[98]).abs() < 1e-10);
        assert!(s.cum_alpha.windows(2).all(|w| w[0] <= w[1]));
        assert!(s.cum_beta.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn symmetric_design_mirrors() {
        let c = DesignConfig::new(100, 0.5, 0.1, 0.1, 0.05, 0.05).with_backend(Backend::Exact);
        let s = calibrate(&c).unwrap();
        for t in 1..100 {
            assert_eq!(s.lower(t), t - s.upper(t), "stage {t}");
        }
    }

    #[test]
    fn greedy_choices_are_tight() {
        let c = section6(60).with_backend(Backend::Exact);
        let s = calibrate(&c).unwrap();
        let (m_h, m_k) = c.calibration_counts();
        for t in 1..60u32 {
            let i = (t - 1) as usize;
            let prev_a = if i == 0 { 0.0 } else { s.cum_alpha[i - 1] };
            let prev_b = if i == 0 { 0.0 } else { s.cum_beta[i - 1] };
            let (lower, upper) = (&s.rule.lower[..i], &s.rule.upper[..i]);
            // Both laws are exhausted after the first crossed band.
            if i > 0 && s.lower(t - 1) > s.upper(t - 1) {
                break;
            }
            if s.upper(t) > 0 {
                let a = exact_time_error(60, m_h, lower, upper, t, Side::Upper, s.upper(t) - 1).unwrap();
                assert!(prev_a + a > 0.05, "stage {t} upper not tight");
            }
            if s.lower(t) < t {
                let b = exact_time_error(60, m_k, lower, upper, t, Side::Lower, s.lower(t) + 1).unwrap();
                assert!(prev_b + b > 0.05, "stage {t} lower not tight");
            }
        }
    }

    #[test]
    fn two_stage_holds_fire() {
        let c = section6(100)
            .with_variant(Variant::TwoStage)
            .with_t0(10)
            .with_backend(Backend::Exact);
        let s = calibrate(&c).unwrap();
        for t in 1..10 {
            assert_eq!((s.lower(t), s.upper(t)), (0, t));
            assert_eq!(s.cum_alpha[(t - 1) as usize], 0.0);
        }
        assert_eq!(s.rule.first_stop, 10);
    }

    #[test]
    fn truncation_at_n_is_standard_rule() {
        let c = section6(50)
            .with_variant(Variant::Truncated)
            .with_backend(Backend::Exact);
        let s = calibrate(&c).unwrap();
        let report = s.truncation.as_ref().unwrap();
        assert_eq!(report.c_t, 10);
        assert_eq!(s.rule.terminal_accept_h_max, 10);
        assert_eq!(s.rule.terminal_stage, 50);
        let plain = calibrate(&section6(50).with_backend(Backend::Exact)).unwrap();
        assert_eq!(plain.rule, s.rule);
    }

    #[test]
    fn truncated_terminal_matches_enumeration() {
        // n = 8: m_H* = 1, m_K* = 3.
        let c = DesignConfig::new(8, 0.25, 0.125, 0.125, 0.1, 0.3)
            .with_variant(Variant::Truncated)
            .with_truncation(4)
            .with_backend(Backend::Exact);
        assert_eq!(c.calibration_counts(), (1, 3));
        let s = calibrate(&c).unwrap();
        let report = s.truncation.clone().unwrap();
        let spent = s.cum_alpha[2];
        let brute = (0..=4u32)
            .find(|&c_t| {
                let mut rule = s.rule.clone();
                rule.terminal_accept_h_max = c_t;
                let o = brute_force_crossing(&rule, 1).unwrap();
                spent + (o.accept_k - o.upper_cross) <= c.alpha
            })
            .unwrap();
        assert_eq!(report.c_t, brute);
        let o = brute_force_crossing(&s.rule, 1).unwrap();
        assert!((o.accept_k - report.upper_error).abs() < 1e-12);
        let o = brute_force_crossing(&s.rule, 3).unwrap();
        assert!((o.accept_h - report.lower_error).abs() < 1e-12);

        let direct = truncated_terminal(&c, &s.rule.lower, &s.rule.upper).unwrap();
        assert_eq!(direct, report);
    }

    #[test]
    fn vacuous_alpha_allows_zero_terminal() {
        let mut c = DesignConfig::new(8, 0.25, 0.125, 0.125, 0.1, 0.3)
            .with_variant(Variant::Truncated)
            .with_truncation(4)
            .with_backend(Backend::Exact);
        let s = calibrate(&c).unwrap();
        c.alpha = 1.0;
        let report = truncated_terminal(&c, &s.rule.lower, &s.rule.upper).unwrap();
        assert_eq!(report.c_t, 0);
    }

    #[test]
    fn one_sided_calibrates_only_lower() {
        let c = section6(80)
            .with_variant(Variant::OneSided)
            .with_backend(Backend::Exact);
        let s = calibrate(&c).unwrap();
        assert_eq!(s.provenance.m_k_star, 16);
        for t in 1..80 {
            assert_eq!(s.upper(t), t);
        }
        assert!(s.cum_alpha.iter().all(|&a| a == 0.0));
        assert!(*s.cum_beta.last().unwrap() <= c.alpha);
        let o = exact_outcome(&s.rule, 16).unwrap();
        assert!(o.accept_h <= c.alpha + 1e-10);
    }

    #[test]
    fn min_sample_size_scan() {
        let c = DesignConfig::new(120, 0.2, 0.1, 0.1, 0.05, 0.2)
            .with_variant(Variant::OneSidedPower)
            .with_mc(2_000, 9);
        let s = calibrate(&c).unwrap();
        let curve = power_by_min_stage(&c, &s).unwrap();
        assert!(curve.windows(2).all(|w| w[0] >= w[1]));
        let min = s.min_sample.clone().unwrap();
        assert!(min.feasible);
        assert!(curve[(min.t_min - 1) as usize] >= 0.8);
        assert!(curve[..(min.t_min - 1) as usize].iter().all(|&p| p < 0.8));
        assert_eq!(s.rule.first_stop, min.t_min.max(1));

        let mut loose = c.clone();
        loose.beta = 0.4999;
        assert_eq!(min_sample_size(&loose, &s).unwrap().t_min, 1);
    }

    #[test]
    fn mc_ledger_within_level() {
        let c = section6(100).with_mc(3_000, 21);
        let s = calibrate(&c).unwrap();
        assert!(s.cum_alpha.iter().all(|&a| a <= 0.05));
        assert!(s.cum_beta.iter().all(|&b| b <= 0.05));
        // Once the bands cross every path has stopped.
        let crossed = (1..100).find(|&t| s.lower(t) > s.upper(t)).unwrap_or(100);
        assert!((crossed + 1..100).all(|t| (s.lower(t), s.upper(t)) == (0, t)));
    }

    #[test]
    fn progress_reaches_one() {
        use std::sync::Mutex;
        let seen = Mutex::new(Vec::new());
        calibrate_with_progress(&section6(30).with_backend(Backend::Exact), &|p| {
            seen.lock().unwrap().push(p)
        })
        .unwrap();
        let seen = seen.into_inner().unwrap();
        assert_eq!(*seen.last().unwrap(), 1.0);
        assert!(seen.windows(2).all(|w| w[0] <= w[1]));
    }
}
