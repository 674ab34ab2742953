//! Realized calibration, regret and recalibration rate of a prediction
//! stream.
//!
//! Buckets are centred on the grid points `i/m` with width `ε = 1/m`, so a
//! prediction `p` falls in bucket `round(p·m)`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::scoring::{check_probability, Label, ScoringRule};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BucketStats {
    m: usize,
    counts: Vec<u64>,
    label_sums: Vec<u64>,
    t: u64,
    cum_forecaster_score: f64,
    cum_oracle_score: f64,
}

impl BucketStats {
    pub fn new(m: usize) -> Self {
        BucketStats {
            m,
            counts: vec![0; m + 1],
            label_sums: vec![0; m + 1],
            t: 0,
            cum_forecaster_score: 0.0,
            cum_oracle_score: 0.0,
        }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn label_sums(&self) -> &[u64] {
        &self.label_sums
    }

    pub fn cum_forecaster_score(&self) -> f64 {
        self.cum_forecaster_score
    }

    pub fn cum_oracle_score(&self) -> f64 {
        self.cum_oracle_score
    }

    /// Bucket index of prediction `p`.
    pub fn bucket(&self, p: f64) -> usize {
        ((p * self.m as f64).round() as usize).min(self.m)
    }

    /// Records one round: forecaster predicted `p`, oracle predicted `q`,
    /// label `y`.
    pub fn record(&mut self, p: f64, q: f64, y: Label, rule: &ScoringRule) -> Result<()> {
        check_probability(p)?;
        check_probability(q)?;
        let i = self.bucket(p);
        self.counts[i] += 1;
        self.label_sums[i] += y.as_u8() as u64;
        self.t += 1;
        self.cum_forecaster_score += rule.eval(p, y);
        self.cum_oracle_score += rule.eval(q, y);
        Ok(())
    }

    /// Coordinate-wise sum of two runs' statistics.
    pub fn merge(&mut self, other: &BucketStats) -> Result<()> {
        if other.m != self.m {
            return Err(Error::DimensionMismatch {
                expected: self.m + 1,
                got: other.m + 1,
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in self.label_sums.iter_mut().zip(&other.label_sums) {
            *a += b;
        }
        self.t += other.t;
        self.cum_forecaster_score += other.cum_forecaster_score;
        self.cum_oracle_score += other.cum_oracle_score;
        Ok(())
    }

    fn require_rounds(&self) -> Result<f64> {
        if self.t == 0 {
            Err(Error::Domain("metrics need at least one recorded round".into()))
        } else {
            Ok(self.t as f64)
        }
    }

    /// `(1/T) Σ_i n_i |i/m − ρ_i|`, empty buckets contributing zero.
    pub fn l1_calibration_error(&self) -> Result<f64> {
        let t = self.require_rounds()?;
        let m = self.m as f64;
        let total: f64 = self
            .counts
            .iter()
            .zip(&self.label_sums)
            .enumerate()
            .filter(|(_, (&n, _))| n > 0)
            .map(|(i, (&n, &s))| n as f64 * (i as f64 / m - s as f64 / n as f64).abs())
            .sum();
        Ok(total / t)
    }

    /// `max(0, ℓ₁ calibration error − ε/2)` with `ε = 1/m`.
    pub fn calibration_rate(&self) -> Result<f64> {
        let eps = 1.0 / self.m as f64;
        Ok((self.l1_calibration_error()? - eps / 2.0).max(0.0))
    }

    /// `(S_forecaster − S_oracle) / T`.
    pub fn average_regret(&self) -> Result<f64> {
        let t = self.require_rounds()?;
        Ok((self.cum_forecaster_score - self.cum_oracle_score) / t)
    }

    /// `max(0, calibration_rate, average_regret − δ/2)`.
    pub fn recalibration_rate(&self, delta: f64) -> Result<f64> {
        Ok(self
            .calibration_rate()?
            .max(self.average_regret()? - delta / 2.0)
            .max(0.0))
    }

    /// `c_i = (n_i/T)(i/m − ρ_i)` and the average regret.
    pub fn recalibration_vector(&self) -> Result<(Vec<f64>, f64)> {
        let t = self.require_rounds()?;
        let m = self.m as f64;
        let c = self
            .counts
            .iter()
            .zip(&self.label_sums)
            .enumerate()
            .map(|(i, (&n, &s))| {
                if n == 0 {
                    0.0
                } else {
                    n as f64 / t * (i as f64 / m - s as f64 / n as f64)
                }
            })
            .collect();
        Ok((c, self.average_regret()?))
    }
}

/// Default regret tolerance `δ = 4 L_s / m²`.
pub fn default_delta(rule: &ScoringRule, m: usize) -> f64 {
    4.0 * rule.lipschitz_constant() / (m * m) as f64
}
