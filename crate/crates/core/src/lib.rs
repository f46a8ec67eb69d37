//! Sequential audit sampling for finite populations.
//!
//! Items are inspected one at a time without replacement. After each item
//! the cumulative deviation count is compared with calibrated count
//! boundaries: falling below the lower boundary concludes that the
//! deviation rate is acceptable (H), rising above the upper boundary
//! concludes it is not (K). Boundaries are calibrated so that the error
//! probabilities at the least-favorable population counts stay within
//! `alpha` and `beta`.
//!
//! ```
//! use seqaudit_core::{calibrate, new_session, Backend, DesignConfig, Status, Variant};
//!
//! let config = DesignConfig::new(60, 0.2, 0.05, 0.05, 0.05, 0.05).with_backend(Backend::Exact);
//! let schedule = calibrate(&config)?;
//! let mut session = new_session(&schedule, Variant::TwoSided)?;
//! while session.status() == Status::Continue {
//!     session.observe(0)?;
//! }
//! assert_eq!(session.status(), Status::AcceptedH);
//! # Ok::<(), seqaudit_core::Error>(())
//! ```

pub mod calibration;
pub mod error;
pub mod evaluation;
pub mod exact;
pub mod io;
pub mod population;
pub mod procedure;
pub mod seed;

pub use calibration::{
    calibrate, calibrate_with_progress, min_sample_size, power_by_min_stage, stage1_boundaries, truncated_terminal,
    Backend, BoundarySchedule, DesignConfig, MinSampleSize, Provenance, Region, ScheduleRow, TruncationReport, Variant,
};
pub use error::{ConfigError, Error, Result};
pub use evaluation::{
    expected_tau_peak, oc_curve, replay, validate_full_grid, validate_grid, GridFlag, GridReport, OcPoint,
    ReplaySummary,
};
pub use exact::{brute_force_crossing, exact_outcome, exact_time_error, hypergeom_pmf, Outcome, ReachTable, Side};
pub use population::{nearest_grid_rate, sample_path, synth_population, DeviationPath, FinitePopulation};
pub use procedure::{
    new_session, run_path, Decision, DecisionSource, RunOutcome, Session, StageRow, Status, StoppingRule,
};
