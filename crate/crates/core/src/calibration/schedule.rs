use serde::{Deserialize, Serialize};

use super::config::{Backend, DesignConfig, Variant};
use crate::io::prob;
use crate::procedure::StoppingRule;

/// Where a schedule came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub backend: Backend,
    pub seed: u64,
    pub variant: Variant,
    pub m_h_star: u32,
    pub m_k_star: u32,
    pub tool_version: String,
}

/// Terminal rule of a truncated design: decide K at stage `stage` iff
/// `S_T > c_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncationReport {
    pub stage: u32,
    pub c_t: u32,
    /// Total probability of a wrong K decision at `m_H*`, terminal included.
    #[serde(with = "prob")]
    pub upper_error: f64,
    /// Total probability of a wrong H decision at `m_K*`, terminal included.
    #[serde(with = "prob")]
    pub lower_error: f64,
    /// False when `lower_error` exceeds beta.
    pub feasible: bool,
}

/// Result of the minimum-sample-size search for one-sided designs with a
/// power requirement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinSampleSize {
    pub t_min: u32,
    /// Power alternative count.
    pub m_alt: u32,
    #[serde(with = "prob")]
    pub power: f64,
    #[serde(with = "prob")]
    pub power_se: f64,
    /// False when no stage before `n` reaches the power target.
    pub feasible: bool,
}

/// Calibrated boundaries with their error ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundarySchedule {
    pub config: DesignConfig,
    pub provenance: Provenance,
    pub rule: StoppingRule,
    /// `Σ_{s<=t} A_s(U_s)` at `m_H*`, for `t = 1..n-1`.
    #[serde(with = "prob::vec")]
    pub cum_alpha: Vec<f64>,
    /// `Σ_{s<=t} B_s(L_s)` at `m_K*`, for `t = 1..n-1`. Bounded by
    /// [`DesignConfig::lower_level`].
    #[serde(with = "prob::vec")]
    pub cum_beta: Vec<f64>,
    pub truncation: Option<TruncationReport>,
    pub min_sample: Option<MinSampleSize>,
}

/// One stage of a schedule in export form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleRow {
    pub t: u32,
    pub lower: u32,
    pub upper: u32,
    pub kappa_lower: f64,
    pub kappa_upper: f64,
    pub cum_alpha: f64,
    pub cum_beta: f64,
}

impl BoundarySchedule {
    pub fn n(&self) -> u32 {
        self.rule.n
    }

    pub fn lower(&self, t: u32) -> u32 {
        self.rule.lower_at(t)
    }

    pub fn upper(&self, t: u32) -> u32 {
        self.rule.upper_at(t)
    }

    /// Rows for stages `1..n-1`; the kappas are the thresholds in rate space.
    pub fn rows(&self) -> Vec<ScheduleRow> {
        (1..self.n())
            .map(|t| {
                let i = (t - 1) as usize;
                let (lower, upper) = (self.rule.lower[i], self.rule.upper[i]);
                ScheduleRow {
                    t,
                    lower,
                    upper,
                    kappa_lower: f64::from(lower) / f64::from(t),
                    kappa_upper: f64::from(upper) / f64::from(t),
                    cum_alpha: self.cum_alpha[i],
                    cum_beta: self.cum_beta[i],
                }
            })
            .collect()
    }
}
