//! The vector-payoff game, its target set and the dual box `K`.
//!
//! Payoff vectors live in `R^{m+2}`: one calibration coordinate per grid
//! point `i/m` followed by a regret coordinate. The regret coordinate is
//! divided by `λ = max(1, L_s)` so that every coordinate is bounded by one in
//! magnitude; the regret threshold of the target set is scaled by the same
//! factor.

use std::f64::consts::SQRT_2;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::scoring::{check_probability, Label, ScoringRule};

/// Upper bound on the Euclidean norm of any payoff vector.
pub const PAYOFF_NORM_BOUND: f64 = SQRT_2;

/// Grid resolution, scoring rule and the derived thresholds of the game.
#[derive(Debug, Clone, PartialEq)]
pub struct GameConfig {
    m: usize,
    rule: ScoringRule,
    lambda: f64,
    cal_threshold: f64,
    reg_threshold: f64,
}

impl GameConfig {
    /// Smallest grid resolution accepted by [`GameConfig::new`] for `rule`,
    /// i.e. `ceil(sqrt(4 L_s))`.
    pub fn min_resolution(rule: &ScoringRule) -> usize {
        (4.0 * rule.lipschitz_constant()).sqrt().ceil() as usize
    }

    /// Game used by the online recalibrator; enforces `m >= ceil(sqrt(4 L_s))`.
    pub fn new(m: usize, rule: ScoringRule) -> Result<Self> {
        let min = Self::min_resolution(&rule);
        if m < min {
            return Err(Error::Config(format!(
                "m must be ≥ ceil(sqrt(4·L_s)) = {min} for rule {rule}, got {m}"
            )));
        }
        Self::with_resolution(m, rule)
    }

    /// Same game without the lower bound on `m`. The halfspace oracle's
    /// guarantee does not depend on it, so property checks use this.
    pub fn with_resolution(m: usize, rule: ScoringRule) -> Result<Self> {
        if m == 0 {
            return Err(Error::Config("grid resolution m must be positive".into()));
        }
        let ls = rule.lipschitz_constant();
        let lambda = ls.max(1.0);
        let mf = m as f64;
        Ok(GameConfig {
            m,
            rule,
            lambda,
            cal_threshold: 1.0 / mf,
            reg_threshold: 4.0 * ls / (lambda * mf * mf),
        })
    }

    #[inline]
    pub fn m(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn rule(&self) -> &ScoringRule {
        &self.rule
    }

    #[inline]
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    #[inline]
    pub fn cal_threshold(&self) -> f64 {
        self.cal_threshold
    }

    /// Regret threshold in λ-scaled units, `4 L_s / (λ m²)`.
    #[inline]
    pub fn reg_threshold(&self) -> f64 {
        self.reg_threshold
    }

    /// Raw (unscaled) regret tolerance `δ = 4 L_s / m²`.
    pub fn delta(&self) -> f64 {
        self.reg_threshold * self.lambda
    }

    /// `i / m`.
    #[inline]
    pub fn grid_point(&self, i: usize) -> f64 {
        i as f64 / self.m as f64
    }

    /// Index of the grid point nearest to `q`.
    #[inline]
    pub fn nearest_index(&self, q: f64) -> usize {
        ((q * self.m as f64).round() as usize).min(self.m)
    }

    /// Dimension of payoff vectors, `m + 2`.
    pub fn dim(&self) -> usize {
        self.m + 2
    }

    /// Euclidean diameter of `K`, `sqrt(4 (m + 1) + 1)`.
    pub fn ogd_diameter(&self) -> f64 {
        (4.0 * (self.m as f64 + 1.0) + 1.0).sqrt()
    }

    /// `D·G / sqrt(T)`: the bound on the distance of the average payoff to
    /// the target set after `t` rounds of the online recalibrator.
    pub fn approachability_bound(&self, t: u64) -> f64 {
        self.ogd_diameter() * PAYOFF_NORM_BOUND / (t as f64).sqrt()
    }

    /// λ-scaled regret coordinate contribution of predicting grid point `i`.
    #[inline]
    pub(crate) fn scaled_regret(&self, i: usize, q: f64, y: Label) -> f64 {
        (self.rule.eval(self.grid_point(i), y) - self.rule.eval(q, y)) / self.lambda
    }
}

/// `ℓ = cal ⊕ reg`, with `reg` already divided by λ.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PayoffVector {
    pub cal: Vec<f64>,
    pub reg: f64,
}

impl PayoffVector {
    pub fn zeros(m: usize) -> Self {
        PayoffVector {
            cal: vec![0.0; m + 1],
            reg: 0.0,
        }
    }

    pub fn cal_l1(&self) -> f64 {
        self.cal.iter().map(|c| c.abs()).sum()
    }

    pub fn add_assign(&mut self, other: &PayoffVector) {
        debug_assert_eq!(self.cal.len(), other.cal.len());
        for (a, b) in self.cal.iter_mut().zip(&other.cal) {
            *a += b;
        }
        self.reg += other.reg;
    }

    pub fn add_sparse(&mut self, other: &SparsePayoff) {
        for &(i, c) in other.cal_entries() {
            self.cal[i] += c;
        }
        self.reg += other.reg;
    }

    pub fn scaled(&self, factor: f64) -> PayoffVector {
        PayoffVector {
            cal: self.cal.iter().map(|c| c * factor).collect(),
            reg: self.reg * factor,
        }
    }

    /// Flattened `(cal_0, …, cal_m, reg)`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.cal.clone();
        v.push(self.reg);
        v
    }
}

/// A payoff vector with at most two nonzero calibration coordinates, as
/// produced by distributions supported on at most two grid points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsePayoff {
    entries: [(usize, f64); 2],
    len: usize,
    pub reg: f64,
}

impl SparsePayoff {
    pub(crate) fn new() -> Self {
        SparsePayoff {
            entries: [(0, 0.0); 2],
            len: 0,
            reg: 0.0,
        }
    }

    pub(crate) fn push(&mut self, i: usize, c: f64) {
        self.entries[self.len] = (i, c);
        self.len += 1;
    }

    pub fn cal_entries(&self) -> &[(usize, f64)] {
        &self.entries[..self.len]
    }

    pub fn to_dense(&self, m: usize) -> PayoffVector {
        let mut v = PayoffVector::zeros(m);
        v.add_sparse(self);
        v
    }
}

/// `θ = (a, b)`, a halfspace containing the target set when `θ ∈ K`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HalfspaceParam {
    pub a: Vec<f64>,
    pub b: f64,
}

impl HalfspaceParam {
    pub fn zero(m: usize) -> Self {
        HalfspaceParam {
            a: vec![0.0; m + 1],
            b: 0.0,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.b == 0.0 && self.a.iter().all(|&x| x == 0.0)
    }

    /// Membership in `K = {‖a‖_∞ ≤ 1, 0 ≤ b ≤ 1}`.
    pub fn in_k(&self) -> bool {
        (0.0..=1.0).contains(&self.b) && self.a.iter().all(|x| (-1.0..=1.0).contains(x))
    }

    pub fn dot(&self, v: &PayoffVector) -> f64 {
        self.a.iter().zip(&v.cal).map(|(a, c)| a * c).sum::<f64>() + self.b * v.reg
    }

    pub fn dot_sparse(&self, v: &SparsePayoff) -> f64 {
        v.cal_entries().iter().map(|&(i, c)| self.a[i] * c).sum::<f64>() + self.b * v.reg
    }
}

/// The payoff of mixed prediction `w` (dense weights over the grid) against
/// oracle prediction `q` and label `y`:
/// `cal_i = w_i (i/m − y)`, `reg = (1/λ) Σ_i w_i (S(i/m, y) − S(q, y))`.
pub fn payoff_vector(cfg: &GameConfig, w: &[f64], q: f64, y: Label) -> Result<PayoffVector> {
    if w.len() != cfg.m + 1 {
        return Err(Error::DimensionMismatch {
            expected: cfg.m + 1,
            got: w.len(),
        });
    }
    check_probability(q)?;
    let yf = y.as_f64();
    let mut reg = 0.0;
    let cal = w
        .iter()
        .enumerate()
        .map(|(i, &wi)| {
            reg += wi * cfg.scaled_regret(i, q, y);
            wi * (cfg.grid_point(i) - yf)
        })
        .collect();
    Ok(PayoffVector { cal, reg })
}

/// ℓ₁ distance from `v` to the target set (ℓ₁ ball of radius `1/m` in the
/// calibration block, half-line `reg ≤ reg_threshold`).
pub fn dist_to_target(cfg: &GameConfig, v: &PayoffVector) -> f64 {
    (v.cal_l1() - cfg.cal_threshold).max(0.0) + (v.reg - cfg.reg_threshold).max(0.0)
}

/// `min_{θ ∈ K} ⟨−v, θ⟩ = −‖v.cal‖₁ − max(0, v.reg)`.
pub fn dual_linear_min(v: &PayoffVector) -> f64 {
    -v.cal_l1() - v.reg.max(0.0)
}

/// Euclidean projection of a raw `(a, b)` vector onto the box `K`.
///
/// # Panics
/// If `raw` is empty.
pub fn project_onto_k(raw: &[f64]) -> HalfspaceParam {
    let (b, a) = raw.split_last().expect("halfspace vector must be nonempty");
    HalfspaceParam {
        a: a.iter().map(|x| x.clamp(-1.0, 1.0)).collect(),
        b: b.clamp(0.0, 1.0),
    }
}
