use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::ConfigError;
use crate::io::canonical_json;
use crate::population::nearest_grid_rate;

/// Procedure variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    TwoSided,
    OneSided,
    OneSidedPower,
    TwoStage,
    Truncated,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::TwoSided,
        Variant::OneSided,
        Variant::OneSidedPower,
        Variant::TwoStage,
        Variant::Truncated,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::TwoSided => "two_sided",
            Variant::OneSided => "one_sided",
            Variant::OneSidedPower => "one_sided_power",
            Variant::TwoStage => "two_stage",
            Variant::Truncated => "truncated",
        }
    }

    /// One-sided variants only stop at the lower boundary.
    pub fn is_one_sided(self) -> bool {
        matches!(self, Variant::OneSided | Variant::OneSidedPower)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL.into_iter().find(|v| v.as_str() == s).ok_or_else(|| {
            format!("unknown variant `{s}` (expected two_sided, one_sided, one_sided_power, two_stage or truncated)")
        })
    }
}

/// How exact-time error probabilities are evaluated during calibration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Exact,
    MonteCarlo,
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backend::Exact => "exact",
            Backend::MonteCarlo => "monte_carlo",
        })
    }
}

impl FromStr for Backend {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exact" => Ok(Backend::Exact),
            "monte_carlo" => Ok(Backend::MonteCarlo),
            _ => Err(format!("unknown backend `{s}` (expected exact or monte_carlo)")),
        }
    }
}

/// Where a deviation count falls relative to the hypotheses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    /// Deciding K is an error.
    #[serde(rename = "H")]
    H,
    /// Deciding H is an error.
    #[serde(rename = "K")]
    K,
    /// Either decision is acceptable.
    #[serde(rename = "indifferent")]
    Indifferent,
}

/// Design parameters of a sequential audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignConfig {
    pub n: u32,
    /// Tolerable deviation rate.
    pub r: f64,
    pub theta_h: f64,
    pub theta_k: f64,
    pub alpha: f64,
    pub beta: f64,
    pub variant: Variant,
    /// First stage at which boundary stopping is allowed.
    pub t0: u32,
    /// Truncation stage; equals `n` unless the design is truncated.
    #[serde(rename = "T")]
    pub truncation: u32,
    /// Monte Carlo replications per calibration ensemble.
    pub m_reps: u32,
    pub seed: u64,
    pub backend: Backend,
}

const KEYS: [&str; 12] = [
    "n", "r", "alpha", "beta", "theta_h", "theta_k", "variant", "t0", "T", "m_reps", "seed", "backend",
];

// Slack for comparing products like n * r against integer counts.
const GRID_EPS: f64 = 1e-9;

impl DesignConfig {
    /// Two-sided Monte Carlo design with default variant parameters.
    pub fn new(n: u32, r: f64, theta_h: f64, theta_k: f64, alpha: f64, beta: f64) -> Self {
        Self {
            n,
            r,
            theta_h,
            theta_k,
            alpha,
            beta,
            variant: Variant::TwoSided,
            t0: 1,
            truncation: n,
            m_reps: 10_000,
            seed: 0,
            backend: Backend::MonteCarlo,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn with_backend(mut self, backend: Backend) -> Self {
        self.backend = backend;
        self
    }

    pub fn with_mc(mut self, m_reps: u32, seed: u64) -> Self {
        self.m_reps = m_reps;
        self.seed = seed;
        self
    }

    pub fn with_t0(mut self, t0: u32) -> Self {
        self.t0 = t0;
        self
    }

    pub fn with_truncation(mut self, truncation: u32) -> Self {
        self.truncation = truncation;
        self
    }

    /// Parses a config object key by key, applying defaults.
    pub fn from_json_value(value: &Value) -> Result<Self, ConfigError> {
        let obj = value
            .as_object()
            .ok_or_else(|| ConfigError::Syntax("config must be a table of keys".into()))?;
        if let Some(unknown) = obj.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(ConfigError::Unknown(unknown.clone()));
        }
        let n = req_u32(obj, "n")?;
        let theta_h = req_f64(obj, "theta_h")?;
        let variant = match obj.get("variant") {
            None => Variant::TwoSided,
            Some(v) => v
                .as_str()
                .ok_or(ConfigError::Type {
                    key: "variant".into(),
                    expected: "a string",
                })?
                .parse()
                .map_err(|msg| ConfigError::constraint("variant", msg))?,
        };
        let truncation = match opt_u32(obj, "T")? {
            Some(t) => t,
            None if variant == Variant::Truncated => {
                return Err(ConfigError::constraint("T", "T required for the truncated variant"))
            }
            None => n,
        };
        let backend = match obj.get("backend") {
            None => Backend::MonteCarlo,
            Some(v) => v
                .as_str()
                .ok_or(ConfigError::Type {
                    key: "backend".into(),
                    expected: "a string",
                })?
                .parse()
                .map_err(|msg| ConfigError::constraint("backend", msg))?,
        };
        let config = Self {
            n,
            r: req_f64(obj, "r")?,
            theta_h,
            theta_k: opt_f64(obj, "theta_k")?.unwrap_or(theta_h),
            alpha: req_f64(obj, "alpha")?,
            beta: req_f64(obj, "beta")?,
            variant,
            t0: opt_u32(obj, "t0")?.unwrap_or(1),
            truncation,
            m_reps: opt_u32(obj, "m_reps")?.unwrap_or(10_000),
            seed: match obj.get("seed") {
                None => 0,
                Some(v) => v.as_u64().ok_or(ConfigError::Type {
                    key: "seed".into(),
                    expected: "a non-negative integer",
                })?,
            },
            backend,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let open = |key: &'static str, v: f64, hi: f64, label: &str| {
            if v > 0.0 && v < hi {
                Ok(())
            } else {
                Err(ConfigError::constraint(key, format!("{key} must lie in (0, {label})")))
            }
        };
        if self.n == 0 {
            return Err(ConfigError::constraint("n", "n must be a positive integer"));
        }
        open("r", self.r, 1.0, "1")?;
        open("theta_h", self.theta_h, 0.5, "1/2")?;
        open("theta_k", self.theta_k, 0.5, "1/2")?;
        open("alpha", self.alpha, 0.5, "1/2")?;
        open("beta", self.beta, 0.5, "1/2")?;
        if self.r - self.theta_h <= 0.0 {
            return Err(ConfigError::constraint("theta_h", "r - theta_h must be > 0"));
        }
        if self.r + self.theta_k >= 1.0 {
            return Err(ConfigError::constraint("theta_k", "r + theta_k must be < 1"));
        }
        if !self.variant.is_one_sided() {
            let (m_h, m_k) = self.calibration_counts();
            if m_h >= m_k {
                return Err(ConfigError::constraint(
                    "theta_k",
                    format!(
                        "least-favorable counts must satisfy m_H* < m_K* (got {m_h} and {m_k} at n = {})",
                        self.n
                    ),
                ));
            }
        }
        if self.truncation == 0 || self.truncation > self.n {
            return Err(ConfigError::constraint("T", "T must satisfy 1 <= T <= n"));
        }
        if self.variant != Variant::Truncated && self.truncation != self.n {
            return Err(ConfigError::constraint(
                "T",
                "T may differ from n only for the truncated variant",
            ));
        }
        if self.t0 == 0 || self.t0 > self.truncation {
            return Err(ConfigError::constraint("t0", "t0 must satisfy 1 <= t0 <= T"));
        }
        if self.m_reps == 0 {
            return Err(ConfigError::constraint("m_reps", "m_reps must be at least 1"));
        }
        Ok(())
    }

    /// Calibration counts `(m_H*, m_K*)`.
    ///
    /// Two-sided designs snap `r - theta_h` and `r + theta_k` to the grid.
    /// One-sided designs calibrate the lower boundary at the grid point
    /// nearest `r`, and report the power alternative `r - theta_h` as
    /// `m_H*`.
    pub fn calibration_counts(&self) -> (u32, u32) {
        let snap = |p: f64| nearest_grid_rate(p.clamp(0.0, 1.0), self.n).unwrap_or(0);
        let m_h = snap(self.r - self.theta_h);
        let m_k = if self.variant.is_one_sided() {
            snap(self.r)
        } else {
            snap(self.r + self.theta_k)
        };
        (m_h, m_k)
    }

    /// Error level for the lower boundary: `alpha` for one-sided designs
    /// (wrongly concluding the population is acceptable is the type-I
    /// error there), `beta` otherwise.
    pub fn lower_level(&self) -> f64 {
        if self.variant.is_one_sided() {
            self.alpha
        } else {
            self.beta
        }
    }

    /// Largest `S_n` for which full inspection decides H.
    pub fn terminal_accept_h_max(&self) -> u32 {
        let nr = f64::from(self.n) * self.r;
        if self.variant.is_one_sided() {
            // H iff p0 < r.
            ((nr - GRID_EPS).ceil() as u32).saturating_sub(1)
        } else {
            // H iff p0 <= r.
            (nr + GRID_EPS).floor() as u32
        }
    }

    /// Last stage at which boundaries are calibrated.
    pub fn last_boundary_stage(&self) -> u32 {
        if self.variant == Variant::Truncated {
            self.truncation.saturating_sub(1)
        } else {
            self.n.saturating_sub(1)
        }
    }

    pub fn region(&self, m: u32) -> Region {
        let n = f64::from(self.n);
        let m = f64::from(m);
        if self.variant.is_one_sided() {
            if m >= n * self.r - GRID_EPS {
                Region::K
            } else if self.variant == Variant::OneSidedPower && m <= n * (self.r - self.theta_h) + GRID_EPS {
                Region::H
            } else {
                Region::Indifferent
            }
        } else if m <= n * (self.r - self.theta_h) + GRID_EPS {
            Region::H
        } else if m >= n * (self.r + self.theta_k) - GRID_EPS {
            Region::K
        } else {
            Region::Indifferent
        }
    }

    /// Bound on the probability of an incorrect decision in `region`.
    pub fn error_bound(&self, region: Region) -> Option<f64> {
        match (region, self.variant.is_one_sided()) {
            (Region::Indifferent, _) => None,
            (Region::H, false) => Some(self.alpha),
            (Region::K, false) => Some(self.beta),
            (Region::K, true) => Some(self.alpha),
            (Region::H, true) => Some(self.beta),
        }
    }

    /// SHA-256 of the canonical JSON rendering.
    pub fn hash(&self) -> String {
        let json = canonical_json(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

fn type_err(key: &str, expected: &'static str) -> ConfigError {
    ConfigError::Type {
        key: key.to_string(),
        expected,
    }
}

fn opt_f64(obj: &Map<String, Value>, key: &'static str) -> Result<Option<f64>, ConfigError> {
    obj.get(key)
        .map(|v| v.as_f64().ok_or_else(|| type_err(key, "a number")))
        .transpose()
}

fn req_f64(obj: &Map<String, Value>, key: &'static str) -> Result<f64, ConfigError> {
    opt_f64(obj, key)?.ok_or(ConfigError::Missing(key))
}

fn opt_u32(obj: &Map<String, Value>, key: &'static str) -> Result<Option<u32>, ConfigError> {
    obj.get(key)
        .map(|v| {
            v.as_u64()
                .and_then(|x| u32::try_from(x).ok())
                .ok_or_else(|| type_err(key, "a non-negative integer"))
        })
        .transpose()
}

fn req_u32(obj: &Map<String, Value>, key: &'static str) -> Result<u32, ConfigError> {
    opt_u32(obj, key)?.ok_or(ConfigError::Missing(key))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn section6() -> Value {
        json!({"n": 100, "r": 0.2, "theta_h": 0.05, "theta_k": 0.05, "alpha": 0.05, "beta": 0.05})
    }

    #[test]
    fn defaults_applied() {
        let c = DesignConfig::from_json_value(&section6()).unwrap();
        assert_eq!(c.variant, Variant::TwoSided);
        assert_eq!((c.t0, c.truncation, c.m_reps), (1, 100, 10_000));
        assert_eq!(c.backend, Backend::MonteCarlo);
        assert_eq!(c.calibration_counts(), (15, 25));
        assert_eq!(c.terminal_accept_h_max(), 20);
    }

    #[test]
    fn range_errors_name_the_key() {
        let mut v = section6();
        v["alpha"] = json!(0.6);
        let err = DesignConfig::from_json_value(&v).unwrap_err();
        assert_eq!(err.to_string(), "alpha must lie in (0, 1/2)");
        assert_eq!(err.key(), Some("alpha"));

        let mut v = section6();
        v["theta_h"] = json!(0.3);
        let err = DesignConfig::from_json_value(&v).unwrap_err();
        assert_eq!(err.to_string(), "r - theta_h must be > 0");
    }

    #[test]
    fn truncated_requires_t() {
        let mut v = section6();
        v["variant"] = json!("truncated");
        let err = DesignConfig::from_json_value(&v).unwrap_err();
        assert!(err.to_string().starts_with("T required"));
        v["T"] = json!(40);
        assert_eq!(DesignConfig::from_json_value(&v).unwrap().truncation, 40);
    }

    #[test]
    fn schema_errors() {
        let mut v = section6();
        v.as_object_mut().unwrap().remove("n");
        assert_eq!(
            DesignConfig::from_json_value(&v).unwrap_err(),
            ConfigError::Missing("n")
        );
        let mut v = section6();
        v["colour"] = json!(1);
        assert!(matches!(
            DesignConfig::from_json_value(&v),
            Err(ConfigError::Unknown(_))
        ));
        let mut v = section6();
        v["n"] = json!("many");
        assert!(matches!(
            DesignConfig::from_json_value(&v),
            Err(ConfigError::Type { .. })
        ));
    }

    #[test]
    fn regions() {
        let c = DesignConfig::from_json_value(&section6()).unwrap();
        assert_eq!(c.region(15), Region::H);
        assert_eq!(c.region(16), Region::Indifferent);
        assert_eq!(c.region(24), Region::Indifferent);
        assert_eq!(c.region(25), Region::K);
        let one = c.clone().with_variant(Variant::OneSidedPower);
        assert_eq!(one.region(20), Region::K);
        assert_eq!(one.region(19), Region::Indifferent);
        assert_eq!(one.region(15), Region::H);
        assert_eq!(one.terminal_accept_h_max(), 19);
        assert_eq!(one.calibration_counts(), (15, 20));
    }

    #[test]
    fn hash_is_stable() {
        let c = DesignConfig::from_json_value(&section6()).unwrap();
        assert_eq!(c.hash(), c.clone().hash());
        assert_ne!(c.hash(), c.clone().with_mc(10_000, 1).hash());
    }
}
