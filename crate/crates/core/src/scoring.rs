//! Strictly proper scoring rules on binary outcomes, in loss convention.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A binary outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Zero,
    One,
}

impl Label {
    pub const BOTH: [Label; 2] = [Label::Zero, Label::One];

    #[inline]
    pub fn as_f64(self) -> f64 {
        match self {
            Label::Zero => 0.0,
            Label::One => 1.0,
        }
    }

    #[inline]
    pub fn as_u8(self) -> u8 {
        match self {
            Label::Zero => 0,
            Label::One => 1,
        }
    }

    pub fn from_u8(v: u8) -> Result<Label> {
        match v {
            0 => Ok(Label::Zero),
            1 => Ok(Label::One),
            _ => Err(Error::Domain(format!("label must be 0 or 1, got {v}"))),
        }
    }

    pub fn from_bool(v: bool) -> Label {
        if v {
            Label::One
        } else {
            Label::Zero
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RuleKind {
    Brier,
    /// Log loss with predictions clamped to `[gamma, 1 - gamma]`.
    LogClipped { gamma: f64 },
}

/// A strictly proper, Lipschitz scoring rule `S(p, y)` (lower is better).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoringRule {
    kind: RuleKind,
    lipschitz: f64,
}

impl ScoringRule {
    pub fn brier() -> Self {
        ScoringRule {
            kind: RuleKind::Brier,
            lipschitz: 2.0,
        }
    }

    /// Clipped log loss. `gamma` must lie in `(0, 1/2)`.
    pub fn log_clipped(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 0.5) {
            return Err(Error::Config(format!(
                "log clip parameter must lie in (0, 1/2), got {gamma}"
            )));
        }
        Ok(ScoringRule {
            kind: RuleKind::LogClipped { gamma },
            lipschitz: 1.0 / gamma,
        })
    }

    pub fn kind(&self) -> RuleKind {
        self.kind
    }

    /// Lipschitz constant of `S(·, y)`: 2 for Brier, `1/γ` for clipped log.
    pub fn lipschitz_constant(&self) -> f64 {
        self.lipschitz
    }

    pub fn score(&self, p: f64, y: Label) -> Result<f64> {
        check_probability(p)?;
        Ok(self.eval(p, y))
    }

    /// `S` extended linearly in its second argument: `E_{Y~q} S(p, Y)`.
    pub fn extended_score(&self, p: f64, q: f64) -> Result<f64> {
        check_probability(p)?;
        check_probability(q)?;
        Ok((1.0 - q) * self.eval(p, Label::Zero) + q * self.eval(p, Label::One))
    }

    /// Per-round regret of predicting `p` instead of the oracle's `q`.
    pub fn regret_term(&self, p: f64, q: f64, y: Label) -> Result<f64> {
        check_probability(p)?;
        check_probability(q)?;
        Ok(self.eval(p, y) - self.eval(q, y))
    }

    /// Unchecked evaluation; `p` must already be a probability.
    #[inline]
    pub(crate) fn eval(&self, p: f64, y: Label) -> f64 {
        match self.kind {
            RuleKind::Brier => {
                let d = p - y.as_f64();
                d * d
            }
            RuleKind::LogClipped { gamma } => {
                let p = p.clamp(gamma, 1.0 - gamma);
                match y {
                    Label::One => -p.ln(),
                    Label::Zero => -(1.0 - p).ln(),
                }
            }
        }
    }
}

pub(crate) fn check_probability(p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Domain(format!("probability must lie in [0, 1], got {p}")))
    }
}

impl fmt::Display for ScoringRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            RuleKind::Brier => write!(f, "brier"),
            RuleKind::LogClipped { gamma } => write!(f, "log:{gamma}"),
        }
    }
}

/// Parses `"brier"` or `"log:γ"`.
impl FromStr for ScoringRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("brier") {
            return Ok(ScoringRule::brier());
        }
        if let Some(rest) = s.strip_prefix("log:") {
            let gamma: f64 = rest
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad log clip parameter '{rest}'")))?;
            return ScoringRule::log_clipped(gamma);
        }
        Err(Error::Config(format!(
            "unknown scoring rule '{s}' (expected 'brier' or 'log:<gamma>')"
        )))
    }
}

impl Serialize for ScoringRule {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ScoringRule {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
