//! Probability fields as decimal strings with 17 significant digits.
//!
//! Use with `#[serde(with = "prob")]` on `f64` fields and
//! `#[serde(with = "prob::vec")]` on `Vec<f64>` fields.

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serializer};

/// Renders `x` with 17 significant digits, which round-trips every `f64`.
pub fn format(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn parse(s: &str) -> Result<f64, std::num::ParseFloatError> {
    s.parse()
}

pub fn serialize<S: Serializer>(x: &f64, serializer: S) -> Result<S::Ok, S::Error> {
    serializer.serialize_str(&format(*x))
}

pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<f64, D::Error> {
    let s = String::deserialize(deserializer)?;
    parse(&s).map_err(|e| D::Error::custom(format!("bad probability `{s}`: {e}")))
}

pub mod vec {
    use super::*;

    pub fn serialize<S: Serializer>(xs: &[f64], serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_seq(xs.iter().map(|&x| format(x)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<Vec<f64>, D::Error> {
        Vec::<String>::deserialize(deserializer)?
            .iter()
            .map(|s| parse(s).map_err(|e| D::Error::custom(format!("bad probability `{s}`: {e}"))))
            .collect()
    }
}
