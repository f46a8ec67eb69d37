//! Shared fixtures for the benchmarks.

use seqaudit_core::{calibrate, Backend, BoundarySchedule, DesignConfig};

/// Two-sided design with tolerable rate 0.2 and 5% indifference bands.
pub fn design(n: u32) -> DesignConfig {
    DesignConfig::new(n, 0.2, 0.05, 0.05, 0.05, 0.05)
}

pub fn exact_design(n: u32) -> DesignConfig {
    design(n).with_backend(Backend::Exact)
}

pub fn mc_design(n: u32, m_reps: u32) -> DesignConfig {
    design(n).with_mc(m_reps, 1)
}

/// A calibrated Monte Carlo schedule to evaluate against.
pub fn schedule(n: u32) -> BoundarySchedule {
    calibrate(&mc_design(n, 2_000)).expect("fixture design is valid")
}
