//! Recalibration as online multiobjective optimization.
//!
//! The `(m+2)`-dimensional payoff `ℓ = c ⊕ r` (raw regret, no λ scaling) is
//! lifted to `d = 2^{m+1} + 1` coordinates by the matrix `M` whose first
//! `d − 1` rows are every sign pattern `σ ∈ {±1}^{m+1}` on the calibration
//! block and whose last row picks out the regret coordinate. The maximum
//! lifted coordinate of an average payoff is `max(‖c‖₁, r)`, so driving every
//! lifted coordinate down controls calibration and regret at once.
//!
//! Multiplicative weights over the lifted coordinates never materialises the
//! `d` weights. Writing `u_k = η Σ_s ℓ_k^s` and `R = η Σ_s r^s`, the weight
//! normaliser factorises as
//!
//! ```text
//! Σ_j exp(η Σ_s (Mℓ^s)_j) = e^R + Π_k (e^{u_k} + e^{−u_k})
//! ```
//!
//! and the weighted loss of a candidate payoff `ℓ` reduces to
//! `β r + (1 − β) Σ_k tanh(u_k) ℓ_k` with `β = e^R / (e^R + Π_k 2 cosh u_k)`.
//! Only the `m + 2` accumulators are stored, in log form, so nothing
//! overflows regardless of horizon.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{GameConfig, PayoffVector};
use crate::recalibrator::{ForecastDistribution, Prediction};
use crate::scoring::{check_probability, Label};

/// `ln(2^{m+1} + 1)` without forming the power.
pub fn ln_lifted_dim(m: usize) -> f64 {
    let k = (m + 1) as f64;
    k * std::f64::consts::LN_2 + (-k * std::f64::consts::LN_2).exp().ln_1p()
}

/// `max_j (M w)_j` for `w = cal ⊕ reg`, which equals `max(‖cal‖₁, reg)`.
pub fn lifted_max_coordinate(cal: &[f64], reg: f64) -> f64 {
    let l1: f64 = cal.iter().map(|c| c.abs()).sum();
    l1.max(reg)
}

/// `ln(2 cosh u)`, stable for large `|u|`.
#[inline]
fn ln_two_cosh(u: f64) -> f64 {
    let a = u.abs();
    a + (-2.0 * a).exp().ln_1p()
}

#[inline]
fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Unscaled payoff of a dense distribution `x` over the grid:
/// `c_i = x_i (i/m − y)`, `r = Σ_i x_i (S(i/m, y) − S(q, y))`.
pub fn raw_payoff(cfg: &GameConfig, x: &[f64], q: f64, y: Label) -> Result<PayoffVector> {
    if x.len() != cfg.m() + 1 {
        return Err(Error::DimensionMismatch {
            expected: cfg.m() + 1,
            got: x.len(),
        });
    }
    check_probability(q)?;
    let rule = cfg.rule();
    let sq = rule.eval(q, y);
    let mut reg = 0.0;
    let cal = x
        .iter()
        .enumerate()
        .map(|(i, &xi)| {
            let p = cfg.grid_point(i);
            reg += xi * (rule.eval(p, y) - sq);
            xi * (p - y.as_f64())
        })
        .collect();
    Ok(PayoffVector { cal, reg })
}

/// Implicit multiplicative-weights state over the lifted coordinates.
#[derive(Debug, Clone)]
pub struct MWState {
    cfg: GameConfig,
    eta: f64,
    horizon: u64,
    /// `η Σ_s ℓ_k^s` for each calibration coordinate.
    log_pos: Vec<f64>,
    /// `η Σ_s r^s`.
    log_reg: f64,
    t: u64,
}

impl MWState {
    /// Fresh state for horizon `T`, with `η = sqrt(ln d / (4 T C²))` and
    /// `C = max(1, L_s)`. Requires `T ≥ ln d`.
    pub fn new(cfg: GameConfig, horizon: u64) -> Result<Self> {
        let ln_d = ln_lifted_dim(cfg.m());
        if (horizon as f64) < ln_d {
            return Err(Error::Config(format!(
                "multiplicative weights needs T ≥ ln(2^(m+1) + 1) = {ln_d:.3}, got T = {horizon}"
            )));
        }
        let c = cfg.rule().lipschitz_constant().max(1.0);
        let eta = (ln_d / (4.0 * horizon as f64 * c * c)).sqrt();
        Ok(MWState {
            log_pos: vec![0.0; cfg.m() + 1],
            log_reg: 0.0,
            cfg,
            eta,
            horizon,
            t: 0,
        })
    }

    pub fn cfg(&self) -> &GameConfig {
        &self.cfg
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn horizon(&self) -> u64 {
        self.horizon
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    /// Stored `exp(η Σ_s ℓ_k^s)`.
    pub fn pos_exp(&self, k: usize) -> f64 {
        self.log_pos[k].exp()
    }

    /// Stored `exp(−η Σ_s ℓ_k^s)`.
    pub fn neg_exp(&self, k: usize) -> f64 {
        (-self.log_pos[k]).exp()
    }

    /// Stored `exp(η Σ_s r^s)`.
    pub fn reg_exp(&self) -> f64 {
        self.log_reg.exp()
    }

    /// Natural log of [`MWState::dp_denominator`]; finite for any history.
    pub fn ln_dp_denominator(&self) -> f64 {
        let ln_prod: f64 = self.log_pos.iter().map(|&u| ln_two_cosh(u)).sum();
        log_add_exp(self.log_reg, ln_prod)
    }

    /// `Σ_j exp(η Σ_s (Mℓ^s)_j) = e^R + Π_k (e^{u_k} + e^{−u_k})`.
    pub fn dp_denominator(&self) -> f64 {
        self.ln_dp_denominator().exp()
    }

    /// Linear weights `(α_k, β)` with `⟨χ, Mℓ⟩ = Σ_k α_k ℓ_k + β r`.
    fn payoff_weights(&self) -> (Vec<f64>, f64) {
        let ln_prod: f64 = self.log_pos.iter().map(|&u| ln_two_cosh(u)).sum();
        // β = e^R / (e^R + P)
        let beta = 1.0 / (1.0 + (ln_prod - self.log_reg).exp());
        let alpha = self.log_pos.iter().map(|&u| (1.0 - beta) * u.tanh()).collect();
        (alpha, beta)
    }

    /// `⟨χ_t, M ℓ(x, y)⟩` for a dense distribution `x`, in `O(m)`.
    pub fn dp_weighted_loss(&self, x: &[f64], q: f64, y: Label) -> Result<f64> {
        let loss = raw_payoff(&self.cfg, x, q, y)?;
        let (alpha, beta) = self.payoff_weights();
        Ok(alpha.iter().zip(&loss.cal).map(|(a, c)| a * c).sum::<f64>() + beta * loss.reg)
    }

    /// `argmin_x max_{y ∈ {0,1}} ⟨χ_t, M ℓ(x, y)⟩` over the simplex.
    ///
    /// The weighted loss is affine in `y`, so the inner max over `[0, 1]` sits
    /// at an endpoint. Both endpoint objectives are linear in `x`, so the
    /// optimum is a vertex or a two-vertex mixture equalising them; all such
    /// candidates are scanned. Ties keep the point mass nearest `q`.
    pub fn choose(&self, q: f64) -> Result<ForecastDistribution> {
        check_probability(q)?;
        let (alpha, beta) = self.payoff_weights();
        let rule = self.cfg.rule();
        let per_vertex = |i: usize, y: Label| {
            let p = self.cfg.grid_point(i);
            alpha[i] * (p - y.as_f64()) + beta * (rule.eval(p, y) - rule.eval(q, y))
        };
        let m = self.cfg.m();
        let g0: Vec<f64> = (0..=m).map(|i| per_vertex(i, Label::Zero)).collect();
        let g1: Vec<f64> = (0..=m).map(|i| per_vertex(i, Label::One)).collect();

        let start = self.cfg.nearest_index(q);
        let mut best = ForecastDistribution::Point(start);
        let mut best_val = g0[start].max(g1[start]);
        for i in 0..=m {
            let v = g0[i].max(g1[i]);
            if v < best_val {
                best_val = v;
                best = ForecastDistribution::Point(i);
            }
        }
        for i in 0..=m {
            let di = g0[i] - g1[i];
            for j in (i + 1)..=m {
                let dj = g0[j] - g1[j];
                if di * dj >= 0.0 {
                    continue;
                }
                let wi = dj / (dj - di);
                let wj = 1.0 - wi;
                let v = wi * g0[i] + wj * g0[j];
                if v < best_val {
                    best_val = v;
                    best = ForecastDistribution::Pair { lo: i, hi: j, w_lo: wi, w_hi: wj };
                }
            }
        }
        Ok(best)
    }

    /// Multiplicative update with the payoff of `x` against `y`.
    pub fn update(&mut self, x: &[f64], q: f64, y: Label) -> Result<PayoffVector> {
        let loss = raw_payoff(&self.cfg, x, q, y)?;
        for (u, c) in self.log_pos.iter_mut().zip(&loss.cal) {
            *u += self.eta * c;
        }
        self.log_reg += self.eta * loss.reg;
        self.t += 1;
        Ok(loss)
    }

    /// Guarantee on `max(‖c̄‖₁, r̄)` after `T` rounds:
    /// `C (1/(2m) + 4 sqrt(ln d / T))`.
    pub fn guarantee(&self) -> f64 {
        let c = self.cfg.rule().lipschitz_constant().max(1.0);
        let m = self.cfg.m() as f64;
        c * (1.0 / (2.0 * m) + 4.0 * (ln_lifted_dim(self.cfg.m()) / self.horizon as f64).sqrt())
    }

    #[cfg(test)]
    pub(crate) fn set_log_accumulators(&mut self, log_pos: Vec<f64>, log_reg: f64) {
        self.log_pos = log_pos;
        self.log_reg = log_reg;
    }
}

/// A forecaster driven by [`MWState`], sampling its prediction from the
/// chosen distribution.
#[derive(Debug, Clone)]
pub struct MwForecaster {
    state: MWState,
    rng: ChaCha8Rng,
    cum_raw: PayoffVector,
    pending: Option<(f64, ForecastDistribution)>,
}

impl MwForecaster {
    pub fn new(state: MWState, seed: u64) -> Self {
        Self::with_rng(state, ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn with_rng(state: MWState, rng: ChaCha8Rng) -> Self {
        let m = state.cfg().m();
        MwForecaster {
            state,
            rng,
            cum_raw: PayoffVector::zeros(m),
            pending: None,
        }
    }

    pub fn state(&self) -> &MWState {
        &self.state
    }

    /// Sum of unscaled expected payoffs over observed rounds.
    pub fn cum_raw_payoff(&self) -> &PayoffVector {
        &self.cum_raw
    }

    pub fn predict(&mut self, q: f64) -> Result<Prediction> {
        if self.pending.is_some() {
            return Err(Error::Protocol("predict called twice without observe".into()));
        }
        let dist = self.state.choose(q)?;
        let index = dist.sample(&mut self.rng);
        self.pending = Some((q, dist));
        Ok(Prediction {
            p: self.state.cfg().grid_point(index),
            index,
            dist,
        })
    }

    pub fn observe(&mut self, q: f64, y: Label) -> Result<()> {
        match self.pending {
            Some((pq, dist)) if pq == q => {
                let x = dist.to_dense(self.state.cfg().m());
                let loss = self.state.update(&x, q, y)?;
                self.cum_raw.add_assign(&loss);
                self.pending = None;
                Ok(())
            }
            Some((pq, _)) => Err(Error::Protocol(format!(
                "observe called with q = {q}, but the pending prediction was made for q = {pq}"
            ))),
            None => Err(Error::Protocol("observe called without a pending prediction".into())),
        }
    }
}
