//! The sequential auditing procedure: stopping rule, decision rule and the
//! live session state machine.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::calibration::{BoundarySchedule, Variant};
use crate::error::{Error, Result};
use crate::population::DeviationPath;

/// Final decision of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Decision {
    /// Deviation rate acceptable (for one-sided designs: the null of a
    /// problematic population is rejected).
    #[serde(rename = "H")]
    AcceptH,
    /// Deviation rate above tolerance.
    #[serde(rename = "K")]
    AcceptK,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Continue,
    AcceptedH,
    AcceptedK,
}

impl From<Decision> for Status {
    fn from(d: Decision) -> Self {
        match d {
            Decision::AcceptH => Status::AcceptedH,
            Decision::AcceptK => Status::AcceptedK,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionSource {
    EarlyStop,
    TerminalFullInspection,
    TerminalTruncation,
}

/// Count-space stopping rule.
///
/// At stage `t` with `first_stop <= t < terminal_stage`, sampling stops with
/// H when `S_t < lower[t-1]` and with K when `S_t > upper[t-1]`. At
/// `terminal_stage` the decision is H iff `S_t <= terminal_accept_h_max`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoppingRule {
    pub n: u32,
    /// `L_t` for `t = 1..n-1`.
    pub lower: Vec<u32>,
    /// `U_t` for `t = 1..n-1`.
    pub upper: Vec<u32>,
    pub first_stop: u32,
    pub terminal_stage: u32,
    pub terminal_accept_h_max: u32,
}

impl StoppingRule {
    /// A rule that never stops early and decides by full inspection.
    pub fn full_inspection(n: u32, accept_h_max: u32) -> Self {
        Self {
            n,
            lower: vec![0; n.saturating_sub(1) as usize],
            upper: (1..n).collect(),
            first_stop: 1,
            terminal_stage: n,
            terminal_accept_h_max: accept_h_max,
        }
    }

    /// Hand-built rule from explicit thresholds (stages `1..n-1`).
    pub fn from_thresholds(n: u32, lower: Vec<u32>, upper: Vec<u32>, accept_h_max: u32) -> Result<Self> {
        let rule = Self {
            n,
            lower,
            upper,
            first_stop: 1,
            terminal_stage: n,
            terminal_accept_h_max: accept_h_max,
        };
        rule.validate()?;
        Ok(rule)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.n == 0 {
            return bad("rule has zero population size".into());
        }
        let stages = (self.n - 1) as usize;
        if self.lower.len() != stages || self.upper.len() != stages {
            return bad(format!(
                "rule for n={} needs {stages} threshold rows, got {} lower / {} upper",
                self.n,
                self.lower.len(),
                self.upper.len()
            ));
        }
        for (i, (&l, &u)) in self.lower.iter().zip(&self.upper).enumerate() {
            let t = i as u32 + 1;
            if l > t || u > t {
                return bad(format!("thresholds ({l}, {u}) at stage {t} exceed the stage"));
            }
        }
        if self.first_stop == 0 {
            return bad("first stopping stage must be at least 1".into());
        }
        if self.terminal_stage == 0 || self.terminal_stage > self.n {
            return bad(format!(
                "terminal stage {} outside [1, {}]",
                self.terminal_stage, self.n
            ));
        }
        Ok(())
    }

    #[inline]
    pub fn lower_at(&self, t: u32) -> u32 {
        self.lower[(t - 1) as usize]
    }

    #[inline]
    pub fn upper_at(&self, t: u32) -> u32 {
        self.upper[(t - 1) as usize]
    }

    /// Whether boundary stopping is active at stage `t`.
    #[inline]
    pub fn stops_at(&self, t: u32) -> bool {
        t >= self.first_stop && t < self.terminal_stage
    }

    /// Decision reached at stage `t` with count `s`, if any.
    #[inline]
    pub fn decide(&self, t: u32, s: u32) -> Option<(Decision, DecisionSource)> {
        if self.stops_at(t) {
            if s < self.lower_at(t) {
                return Some((Decision::AcceptH, DecisionSource::EarlyStop));
            }
            if s > self.upper_at(t) {
                return Some((Decision::AcceptK, DecisionSource::EarlyStop));
            }
        }
        if t == self.terminal_stage {
            let decision = if s <= self.terminal_accept_h_max {
                Decision::AcceptH
            } else {
                Decision::AcceptK
            };
            let source = if t == self.n {
                DecisionSource::TerminalFullInspection
            } else {
                DecisionSource::TerminalTruncation
            };
            return Some((decision, source));
        }
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub tau: u32,
    pub decision: Decision,
    pub source: DecisionSource,
}

/// Runs the rule along a full inspection order.
pub fn run_path(rule: &StoppingRule, path: &DeviationPath) -> Result<RunOutcome> {
    if path.len() != rule.n {
        return Err(Error::InvalidArgument(format!(
            "path length {} does not match rule size {}",
            path.len(),
            rule.n
        )));
    }
    Ok(run_counts(rule, path.prefix_counts()))
}

#[inline]
pub(crate) fn run_counts(rule: &StoppingRule, counts: &[u32]) -> RunOutcome {
    for (i, &s) in counts.iter().enumerate() {
        let t = i as u32 + 1;
        if let Some((decision, source)) = rule.decide(t, s) {
            return RunOutcome {
                tau: t,
                decision,
                source,
            };
        }
    }
    unreachable!("terminal stage lies within the path")
}

/// One row of a session trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRow {
    pub t: u32,
    pub s_t: u32,
    pub lower: u32,
    pub upper: u32,
}

/// A live audit session fed one inspection outcome at a time.
#[derive(Debug, Clone)]
pub struct Session {
    rule: Arc<StoppingRule>,
    history: Vec<u8>,
    count: u32,
    outcome: Option<RunOutcome>,
}

impl Session {
    pub fn new(rule: Arc<StoppingRule>) -> Result<Self> {
        rule.validate()?;
        Ok(Self {
            rule,
            history: Vec::new(),
            count: 0,
            outcome: None,
        })
    }

    pub fn rule(&self) -> &Arc<StoppingRule> {
        &self.rule
    }

    /// Current stage `t` (number of inspected items).
    pub fn stage(&self) -> u32 {
        self.history.len() as u32
    }

    /// Running deviation count `S_t`.
    pub fn count(&self) -> u32 {
        self.count
    }

    /// Sample deviation rate; zero before the first observation.
    pub fn rate(&self) -> f64 {
        match self.stage() {
            0 => 0.0,
            t => f64::from(self.count) / f64::from(t),
        }
    }

    pub fn history(&self) -> &[u8] {
        &self.history
    }

    pub fn status(&self) -> Status {
        self.outcome.map_or(Status::Continue, |o| o.decision.into())
    }

    pub fn outcome(&self) -> Option<RunOutcome> {
        self.outcome
    }

    pub fn observe(&mut self, x: u8) -> Result<Status> {
        if let Some(o) = self.outcome {
            return Err(Error::SessionDecided { tau: o.tau });
        }
        if x > 1 {
            return Err(Error::InvalidArgument(format!("observation {x} is not 0 or 1")));
        }
        self.history.push(x);
        self.count += u32::from(x);
        let t = self.stage();
        self.outcome = self.rule.decide(t, self.count).map(|(decision, source)| RunOutcome {
            tau: t,
            decision,
            source,
        });
        Ok(self.status())
    }

    /// Removes the last observation. A decision can only have been reached
    /// on the last observation, so undoing always returns to `Continue`.
    pub fn undo(&mut self) -> Result<Status> {
        let x = self.history.pop().ok_or(Error::EmptyHistory)?;
        self.count -= u32::from(x);
        self.outcome = None;
        Ok(self.status())
    }

    /// Per-stage trace `(t, S_t, L_t, U_t)`; stage `n` carries the no-stop band.
    pub fn trace(&self) -> Vec<StageRow> {
        let mut s = 0;
        self.history
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let t = i as u32 + 1;
                s += u32::from(x);
                let (lower, upper) = if t < self.rule.n {
                    (self.rule.lower_at(t), self.rule.upper_at(t))
                } else {
                    (0, t)
                };
                StageRow {
                    t,
                    s_t: s,
                    lower,
                    upper,
                }
            })
            .collect()
    }
}

/// Opens a session on a calibrated schedule, checking it was built for
/// `variant`.
pub fn new_session(schedule: &BoundarySchedule, variant: Variant) -> Result<Session> {
    if schedule.config.variant != variant {
        return Err(Error::InvalidArgument(format!(
            "schedule was calibrated for the {} variant, not {}",
            schedule.config.variant, variant
        )));
    }
    Session::new(Arc::new(schedule.rule.clone()))
}
