//! The approachability-based online recalibrator.
//!
//! Each round the learner holds a halfspace parameter `θ = (a, b) ∈ K`. The
//! halfspace oracle [`approach`] turns `θ` and the oracle's prediction `q`
//! into a distribution over at most two adjacent grid points whose expected
//! payoff satisfies `⟨ℓ(w, q, y), θ⟩ ≤ ‖a‖_∞/m + b·reg_threshold` for both
//! labels. After the label is revealed, `θ` moves along the expected payoff
//! by projected online gradient descent with step `D / (G √t)`.
//!
//! The oracle works on the planar points `F_i = (f(i, 0), f(i, 1))`. `F_0`
//! always lies in the left half-plane and `F_m` in the lower half-plane, so
//! either an endpoint is already in the closed third quadrant or the sign of
//! `s(i) = f(i, 1) − f(i, 0)` changes somewhere along the grid; a binary
//! search finds one crossing and mixes its two endpoints so that both
//! coordinates agree.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{self, GameConfig, HalfspaceParam, PayoffVector, SparsePayoff, PAYOFF_NORM_BOUND};
use crate::scoring::{check_probability, Label};

/// Mixture weight denominators below this are treated as collinear.
const DEGENERATE_DELTA: f64 = 1e-12;

/// A distribution over grid indices with at most two atoms.
///
/// Distributions produced by [`approach`] always use adjacent indices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum ForecastDistribution {
    Point(usize),
    Pair { lo: usize, hi: usize, w_lo: f64, w_hi: f64 },
}

impl ForecastDistribution {
    pub fn pair(lo: usize, hi: usize, w_lo: f64, w_hi: f64) -> Result<Self> {
        if lo == hi || !(w_lo >= 0.0 && w_hi >= 0.0) || ((w_lo + w_hi) - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!(
                "invalid two-point distribution ({lo}: {w_lo}, {hi}: {w_hi})"
            )));
        }
        Ok(ForecastDistribution::Pair { lo, hi, w_lo, w_hi })
    }

    /// `(index, weight)` atoms.
    pub fn support(&self) -> impl Iterator<Item = (usize, f64)> {
        let (first, second) = match *self {
            ForecastDistribution::Point(i) => ((i, 1.0), None),
            ForecastDistribution::Pair { lo, hi, w_lo, w_hi } => ((lo, w_lo), Some((hi, w_hi))),
        };
        std::iter::once(first).chain(second)
    }

    pub fn is_point(&self) -> bool {
        matches!(self, ForecastDistribution::Point(_))
    }

    pub fn to_dense(&self, m: usize) -> Vec<f64> {
        let mut w = vec![0.0; m + 1];
        for (i, wi) in self.support() {
            w[i] += wi;
        }
        w
    }

    pub fn max_index(&self) -> usize {
        self.support().map(|(i, _)| i).max().unwrap_or(0)
    }

    /// Draws a grid index. Point masses consume no randomness.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match *self {
            ForecastDistribution::Point(i) => i,
            ForecastDistribution::Pair { lo, hi, w_lo, .. } => {
                if rng.random::<f64>() < w_lo {
                    lo
                } else {
                    hi
                }
            }
        }
    }

    /// Expected payoff vector of this distribution, in sparse form.
    pub fn payoff(&self, cfg: &GameConfig, q: f64, y: Label) -> SparsePayoff {
        let yf = y.as_f64();
        let mut out = SparsePayoff::new();
        for (i, wi) in self.support() {
            out.push(i, wi * (cfg.grid_point(i) - yf));
            out.reg += wi * cfg.scaled_regret(i, q, y);
        }
        out
    }
}

/// `f(i, y) = a_i (i/m − y) + (b/λ) (S(i/m, y) − S(q, y))`.
pub fn f_value(cfg: &GameConfig, theta: &HalfspaceParam, q: f64, i: usize, y: Label) -> Result<f64> {
    if i > cfg.m() {
        return Err(Error::IndexOutOfRange { index: i, m: cfg.m() });
    }
    check_probability(q)?;
    Ok(f_unchecked(cfg, theta, q, i, y))
}

#[inline]
fn f_unchecked(cfg: &GameConfig, theta: &HalfspaceParam, q: f64, i: usize, y: Label) -> f64 {
    theta.a[i] * (cfg.grid_point(i) - y.as_f64()) + theta.b * cfg.scaled_regret(i, q, y)
}

/// Result of one halfspace-oracle call together with the number of `f`
/// evaluations it made.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleOutcome {
    pub dist: ForecastDistribution,
    pub f_evals: usize,
}

/// The halfspace oracle.
pub fn approach(cfg: &GameConfig, theta: &HalfspaceParam, q: f64) -> Result<ForecastDistribution> {
    approach_counted(cfg, theta, q).map(|o| o.dist)
}

/// [`approach`], also reporting how many times `f` was evaluated.
pub fn approach_counted(cfg: &GameConfig, theta: &HalfspaceParam, q: f64) -> Result<OracleOutcome> {
    check_probability(q)?;
    if theta.a.len() != cfg.m() + 1 {
        return Err(Error::DimensionMismatch {
            expected: cfg.m() + 1,
            got: theta.a.len(),
        });
    }
    if theta.is_zero() {
        // every distribution is admissible; the nearest grid point has the
        // smallest regret
        return Ok(OracleOutcome {
            dist: ForecastDistribution::Point(cfg.nearest_index(q)),
            f_evals: 0,
        });
    }
    approach_with(cfg.m(), |i, y| f_unchecked(cfg, theta, q, i, y))
}

/// The oracle's search over an arbitrary evaluator `f(i, y)` on `0..=m`.
///
/// Exposed so that the property checks can run the same search against a
/// deliberately broken evaluator and confirm that the halfspace inequality
/// check notices.
pub fn approach_with<F>(m: usize, mut f: F) -> Result<OracleOutcome>
where
    F: FnMut(usize, Label) -> f64,
{
    let mut f_evals = 0;
    let mut eval = |i: usize| {
        f_evals += 2;
        (f(i, Label::Zero), f(i, Label::One))
    };
    let in_q3 = |p: (f64, f64)| p.0 <= 0.0 && p.1 <= 0.0;

    let mut f_lo = eval(0);
    let mut f_hi = eval(m);
    if f_lo.0.is_nan() || f_lo.0 > 0.0 || f_hi.1.is_nan() || f_hi.1 > 0.0 {
        return Err(Error::Invariant(format!(
            "oracle endpoints outside their half-planes: f(0,0) = {}, f(m,1) = {}",
            f_lo.0, f_hi.1
        )));
    }
    let point = |i: usize, f_evals: usize| OracleOutcome {
        dist: ForecastDistribution::Point(i),
        f_evals,
    };
    if in_q3(f_lo) {
        return Ok(point(0, f_evals));
    }
    if in_q3(f_hi) {
        return Ok(point(m, f_evals));
    }

    // s(lo) >= 0 > s(hi) holds from here on
    let (mut lo, mut hi) = (0, m);
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        let f_mid = eval(mid);
        if in_q3(f_mid) {
            return Ok(point(mid, f_evals));
        }
        if f_mid.1 - f_mid.0 >= 0.0 {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
            f_hi = f_mid;
        }
    }

    let delta = f_lo.0 - f_hi.0 - f_lo.1 + f_hi.1;
    let dist = if delta.abs() < DEGENERATE_DELTA {
        let worst = |p: (f64, f64)| p.0.max(p.1);
        ForecastDistribution::Point(if worst(f_lo) <= worst(f_hi) { lo } else { hi })
    } else {
        let w_lo = (f_hi.1 - f_hi.0) / delta;
        let w_hi = (f_lo.0 - f_lo.1) / delta;
        ForecastDistribution::Pair { lo, hi, w_lo, w_hi }
    };
    Ok(OracleOutcome { dist, f_evals })
}

/// The mixture over the grid minimizing the worst-case expected raw regret
/// `max_y Σ_i w_i (S(i/m, y) − S(q, y))`, with that value.
///
/// Both label objectives are linear in `w`, so the optimum is a vertex or a
/// two-vertex mixture equalizing them; all of these are scanned in `O(m²)`.
pub fn minimax_regret_mixture(cfg: &GameConfig, q: f64) -> Result<(ForecastDistribution, f64)> {
    check_probability(q)?;
    let rule = cfg.rule();
    let m = cfg.m();
    let regret = |i: usize, y: Label| rule.eval(cfg.grid_point(i), y) - rule.eval(q, y);
    let g0: Vec<f64> = (0..=m).map(|i| regret(i, Label::Zero)).collect();
    let g1: Vec<f64> = (0..=m).map(|i| regret(i, Label::One)).collect();

    let start = cfg.nearest_index(q);
    let mut best = (ForecastDistribution::Point(start), g0[start].max(g1[start]));
    for i in 0..=m {
        let v = g0[i].max(g1[i]);
        if v < best.1 {
            best = (ForecastDistribution::Point(i), v);
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
            let v = wi * g0[i] + (1.0 - wi) * g0[j];
            if v < best.1 {
                best = (
                    ForecastDistribution::Pair { lo: i, hi: j, w_lo: wi, w_hi: 1.0 - wi },
                    v,
                );
            }
        }
    }
    Ok(best)
}

/// `D / (G √t)` with `D` the diameter of `K` and `G = √2`.
pub fn learning_rate(cfg: &GameConfig, t: u64) -> f64 {
    cfg.ogd_diameter() / (PAYOFF_NORM_BOUND * (t as f64).sqrt())
}

/// One projected gradient step on the loss `−ℓ`: `Π_K(θ + η ℓ)`.
pub fn ogd_update(theta: &HalfspaceParam, payoff: &PayoffVector, eta: f64) -> HalfspaceParam {
    let mut raw: Vec<f64> = theta.a.iter().zip(&payoff.cal).map(|(a, c)| a + eta * c).collect();
    raw.push(theta.b + eta * payoff.reg);
    geometry::project_onto_k(&raw)
}

/// A forecaster's announced prediction for one round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    /// `index / m`.
    pub p: f64,
    pub index: usize,
    /// The mixed strategy `index` was drawn from.
    pub dist: ForecastDistribution,
}

#[derive(Debug, Clone)]
struct Pending {
    q: f64,
    dist: ForecastDistribution,
}

/// Learner state of the online recalibrator.
#[derive(Debug, Clone)]
pub struct RecalibratorState {
    cfg: GameConfig,
    theta: HalfspaceParam,
    t: u64,
    cum_payoff: PayoffVector,
    rng: ChaCha8Rng,
    pending: Option<Pending>,
    f_evals: u64,
}

impl RecalibratorState {
    /// Starts at `θ = 0` with a ChaCha8 generator seeded from `seed`.
    pub fn new(cfg: GameConfig, seed: u64) -> Self {
        Self::with_rng(cfg, ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn with_rng(cfg: GameConfig, rng: ChaCha8Rng) -> Self {
        let m = cfg.m();
        RecalibratorState {
            theta: HalfspaceParam::zero(m),
            cum_payoff: PayoffVector::zeros(m),
            cfg,
            t: 0,
            rng,
            pending: None,
            f_evals: 0,
        }
    }

    pub fn cfg(&self) -> &GameConfig {
        &self.cfg
    }

    pub fn theta(&self) -> &HalfspaceParam {
        &self.theta
    }

    /// Rounds observed so far.
    pub fn t(&self) -> u64 {
        self.t
    }

    /// Sum of expected payoff vectors over observed rounds.
    pub fn cum_payoff(&self) -> &PayoffVector {
        &self.cum_payoff
    }

    /// Total `f` evaluations made by the oracle so far.
    pub fn oracle_evaluations(&self) -> u64 {
        self.f_evals
    }

    pub fn average_payoff(&self) -> Option<PayoffVector> {
        (self.t > 0).then(|| self.cum_payoff.scaled(1.0 / self.t as f64))
    }

    /// Distance of the average expected payoff to the target set.
    pub fn dist_to_target(&self) -> Option<f64> {
        self.average_payoff().map(|v| geometry::dist_to_target(&self.cfg, &v))
    }

    pub fn predict(&mut self, q: f64) -> Result<Prediction> {
        if self.pending.is_some() {
            return Err(Error::Protocol("predict called twice without observe".into()));
        }
        let outcome = approach_counted(&self.cfg, &self.theta, q)?;
        self.f_evals += outcome.f_evals as u64;
        let index = outcome.dist.sample(&mut self.rng);
        self.pending = Some(Pending { q, dist: outcome.dist });
        Ok(Prediction {
            p: self.cfg.grid_point(index),
            index,
            dist: outcome.dist,
        })
    }

    /// Books the expected payoff of the pending distribution against `y` and
    /// advances `θ`. Returns that payoff.
    pub fn observe(&mut self, q: f64, y: Label) -> Result<SparsePayoff> {
        let pending = match self.pending.take() {
            Some(p) if p.q == q => p,
            Some(p) => {
                let expected = p.q;
                self.pending = Some(p);
                return Err(Error::Protocol(format!(
                    "observe called with q = {q}, but the pending prediction was made for q = {expected}"
                )));
            }
            None => return Err(Error::Protocol("observe called without a pending prediction".into())),
        };
        let payoff = pending.dist.payoff(&self.cfg, q, y);
        self.cum_payoff.add_sparse(&payoff);
        self.t += 1;
        self.step_sparse(&payoff);
        Ok(payoff)
    }

    /// `θ ← Π_K(θ + η_t ℓ)` with `η_t = D/(G√t)`. Requires `t ≥ 1`.
    pub fn ogd_step(&mut self, payoff: &PayoffVector) -> Result<&HalfspaceParam> {
        if self.t == 0 {
            return Err(Error::Protocol("ogd_step requires at least one observed round".into()));
        }
        if payoff.cal.len() != self.cfg.m() + 1 {
            return Err(Error::DimensionMismatch {
                expected: self.cfg.m() + 1,
                got: payoff.cal.len(),
            });
        }
        let eta = learning_rate(&self.cfg, self.t);
        self.theta = ogd_update(&self.theta, payoff, eta);
        Ok(&self.theta)
    }

    // Coordinates with zero payoff are fixed points of the projection, so
    // only the touched ones need updating.
    fn step_sparse(&mut self, payoff: &SparsePayoff) {
        let eta = learning_rate(&self.cfg, self.t);
        for &(i, c) in payoff.cal_entries() {
            self.theta.a[i] = (self.theta.a[i] + eta * c).clamp(-1.0, 1.0);
        }
        self.theta.b = (self.theta.b + eta * payoff.reg).clamp(0.0, 1.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{dist_to_target, payoff_vector};
    use crate::scoring::ScoringRule;
    use approx::assert_abs_diff_eq;

    fn cfg(m: usize) -> GameConfig {
        GameConfig::with_resolution(m, ScoringRule::brier()).unwrap()
    }

    fn random_theta<R: Rng>(rng: &mut R, m: usize) -> HalfspaceParam {
        HalfspaceParam {
            a: (0..=m).map(|_| rng.random_range(-1.0..=1.0)).collect(),
            b: rng.random_range(0.0..=1.0),
        }
    }

    #[test]
    fn f_value_examples() {
        let cfg = cfg(2);
        let theta = HalfspaceParam { a: vec![0.0; 3], b: 1.0 };
        assert_eq!(f_value(&cfg, &theta, 0.5, 1, Label::Zero).unwrap(), 0.0);
        assert_eq!(f_value(&cfg, &theta, 0.5, 1, Label::One).unwrap(), 0.0);
        assert_abs_diff_eq!(f_value(&cfg, &theta, 0.5, 0, Label::Zero).unwrap(), -0.125);
        assert_abs_diff_eq!(f_value(&cfg, &theta, 0.5, 0, Label::One).unwrap(), 0.375);
        let zero = HalfspaceParam::zero(2);
        for i in 0..=2 {
            for y in Label::BOTH {
                assert_eq!(f_value(&cfg, &zero, 0.3, i, y).unwrap(), 0.0);
            }
        }
        assert_eq!(
            f_value(&cfg, &theta, 0.5, 3, Label::One),
            Err(Error::IndexOutOfRange { index: 3, m: 2 })
        );
    }

    #[test]
    fn approach_examples() {
        let cfg = cfg(2);
        let theta = HalfspaceParam { a: vec![0.0; 3], b: 1.0 };
        assert_eq!(approach(&cfg, &theta, 0.5).unwrap(), ForecastDistribution::Point(1));

        let theta = HalfspaceParam { a: vec![-1.0, 1.0, 1.0], b: 0.0 };
        let dist = approach(&cfg, &theta, 0.37).unwrap();
        assert_eq!(dist, ForecastDistribution::Pair { lo: 0, hi: 1, w_lo: 0.5, w_hi: 0.5 });
        for y in Label::BOTH {
            let v = payoff_vector(&cfg, &dist.to_dense(2), 0.37, y).unwrap();
            assert_abs_diff_eq!(theta.dot(&v), 0.25, epsilon = 1e-15);
        }

        for q in [0.0, 0.2, 0.62, 0.9, 1.0] {
            let c10 = GameConfig::new(10, ScoringRule::brier()).unwrap();
            let d = approach(&c10, &HalfspaceParam::zero(10), q).unwrap();
            assert_eq!(d, ForecastDistribution::Point((q * 10.0_f64).round() as usize));
        }
    }

    #[test]
    fn degenerate_mixture_falls_back_to_point() {
        // s(lo) = 0 and s(hi) just below zero make Δ vanish
        let out = approach_with(1, |i, y| match (i, y) {
            (0, Label::Zero) => -1.0,
            (0, Label::One) => -1.0 + 1e-3,
            (1, Label::Zero) => 1e-3,
            (1, Label::One) => -1e-14,
            _ => unreachable!(),
        })
        .unwrap();
        // F_0 = (-1, -0.999) is in Q3 already
        assert_eq!(out.dist, ForecastDistribution::Point(0));

        let out = approach_with(1, |i, y| match (i, y) {
            (0, Label::Zero) => 0.0,
            (0, Label::One) => 1e-14,
            (1, Label::Zero) => 9e-16,
            (1, Label::One) => -1e-16,
            _ => unreachable!(),
        })
        .unwrap();
        assert!(out.dist.is_point());
    }

    #[test]
    fn endpoint_invariant_is_checked() {
        let err = approach_with(4, |_, _| 1.0).unwrap_err();
        assert!(matches!(err, Error::Invariant(_)));
    }

    #[test]
    fn halfspace_inequality_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let rules = [ScoringRule::brier(), ScoringRule::log_clipped(0.05).unwrap()];
        for _ in 0..20_000 {
            let m = rng.random_range(1..=64);
            let rule = rules[rng.random_range(0..2)];
            let cfg = GameConfig::with_resolution(m, rule).unwrap();
            let theta = random_theta(&mut rng, m);
            let q = rng.random_range(0.0..=1.0);
            let dist = approach(&cfg, &theta, q).unwrap();
            if let ForecastDistribution::Pair { lo, hi, w_lo, w_hi } = dist {
                assert_eq!(hi, lo + 1);
                assert!(w_lo >= 0.0 && w_hi >= 0.0);
                assert!((w_lo + w_hi - 1.0).abs() <= 1e-12);
            }
            let a_inf = theta.a.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
            let bound = a_inf / m as f64 + theta.b * cfg.reg_threshold() + 1e-9;
            for y in Label::BOTH {
                let v = payoff_vector(&cfg, &dist.to_dense(m), q, y).unwrap();
                assert!(theta.dot(&v) <= bound, "m={m} q={q} {dist:?}: {} > {bound}", theta.dot(&v));
                let sparse = dist.payoff(&cfg, q, y);
                assert_abs_diff_eq!(theta.dot_sparse(&sparse), theta.dot(&v), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn oracle_cost_is_logarithmic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for k in 0..=16u32 {
            let m = 1usize << k;
            for extra in [0usize, 1, 3] {
                let m = m + extra;
                let cfg = GameConfig::with_resolution(m, ScoringRule::brier()).unwrap();
                let limit = 2 * (m as f64).log2().ceil() as usize + 4;
                for _ in 0..20 {
                    let theta = random_theta(&mut rng, m);
                    let out = approach_counted(&cfg, &theta, rng.random()).unwrap();
                    assert!(out.f_evals <= limit, "m={m}: {} > {limit}", out.f_evals);
                }
            }
        }
    }

    /// `max_{y ∈ [0,1]} min_i` of the expected regret, by ternary search on
    /// the concave lower envelope.
    fn maxmin_regret(cfg: &GameConfig, q: f64) -> f64 {
        let rule = cfg.rule();
        let envelope = |y: f64| {
            (0..=cfg.m())
                .map(|i| rule.extended_score(cfg.grid_point(i), y).unwrap() - rule.eval(q, Label::Zero) * (1.0 - y)
                    - rule.eval(q, Label::One) * y)
                .fold(f64::INFINITY, f64::min)
        };
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..200 {
            let a = lo + (hi - lo) / 3.0;
            let b = hi - (hi - lo) / 3.0;
            if envelope(a) < envelope(b) {
                lo = a;
            } else {
                hi = b;
            }
        }
        envelope(0.0).max(envelope(1.0)).max(envelope((lo + hi) / 2.0))
    }

    #[test]
    fn minimax_mixture_meets_the_grid_regret_bound() {
        for rule in [ScoringRule::brier(), ScoringRule::log_clipped(0.05).unwrap()] {
            for m in 3..=32 {
                let cfg = GameConfig::with_resolution(m, rule).unwrap();
                let bound = 2.0 * rule.lipschitz_constant() / (m * m) as f64;
                for j in (0..1000).step_by(7) {
                    let q = j as f64 / 999.0;
                    let (d, value) = minimax_regret_mixture(&cfg, q).unwrap();
                    assert!(value <= bound + 1e-12, "{rule} m={m} q={q}: {value} > {bound}");
                    assert!((value - maxmin_regret(&cfg, q)).abs() <= 1e-9);
                    let w = d.to_dense(m);
                    for y in Label::BOTH {
                        let r: f64 = w
                            .iter()
                            .enumerate()
                            .map(|(i, wi)| wi * rule.regret_term(cfg.grid_point(i), q, y).unwrap())
                            .sum();
                        assert!(r <= value + 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn nearest_point_alone_can_exceed_the_grid_regret_bound() {
        let cfg = GameConfig::new(10, ScoringRule::brier()).unwrap();
        let q = 950.0 / 999.0;
        let p = cfg.grid_point(cfg.nearest_index(q));
        assert_eq!(p, 1.0);
        let regret = ScoringRule::brier().regret_term(p, q, Label::Zero).unwrap();
        assert!(regret > 2.0 * 2.0 / 100.0);
    }

    #[test]
    fn ogd_examples() {
        let theta = HalfspaceParam::zero(3);
        assert_eq!(ogd_update(&theta, &PayoffVector::zeros(3), 0.7), theta);
        let payoff = PayoffVector { cal: vec![1.0, 0.0, 0.0, 0.0], reg: 0.0 };
        let next = ogd_update(&theta, &payoff, 0.5);
        assert_eq!(next.a, vec![0.5, 0.0, 0.0, 0.0]);
        assert_eq!(next.b, 0.0);
        let big = PayoffVector { cal: vec![5.0, -5.0, 0.1, 0.0], reg: -3.0 };
        assert!(ogd_update(&next, &big, 1.0).in_k());
    }

    #[test]
    fn learning_rate_schedule() {
        let cfg = cfg(4);
        assert_abs_diff_eq!(learning_rate(&cfg, 1), 21f64.sqrt() / 2f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(learning_rate(&cfg, 4), learning_rate(&cfg, 1) / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn protocol_errors() {
        let mut s = RecalibratorState::new(cfg(4), 1);
        assert!(matches!(s.observe(0.5, Label::One), Err(Error::Protocol(_))));
        s.predict(0.5).unwrap();
        assert!(matches!(s.predict(0.5), Err(Error::Protocol(_))));
        assert!(matches!(s.observe(0.4, Label::One), Err(Error::Protocol(_))));
        s.observe(0.5, Label::One).unwrap();
        assert_eq!(s.t(), 1);
        assert!(s.predict(1.5).is_err());
    }

    #[test]
    fn first_rounds() {
        let mut s = RecalibratorState::new(GameConfig::new(10, ScoringRule::brier()).unwrap(), 0);
        let pred = s.predict(0.62).unwrap();
        assert_abs_diff_eq!(pred.p, 0.6);

        let mut s = RecalibratorState::new(cfg(2), 0);
        let pred = s.predict(0.5).unwrap();
        assert_eq!(pred.dist, ForecastDistribution::Point(1));
        s.observe(0.5, Label::One).unwrap();
        assert_eq!(s.cum_payoff().to_vec(), vec![0.0, -0.5, 0.0, 0.0]);
    }

    #[test]
    fn sparse_step_matches_dense_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = GameConfig::new(12, ScoringRule::brier()).unwrap();
        let mut s = RecalibratorState::new(c.clone(), 4);
        let mut theta = HalfspaceParam::zero(12);
        for t in 1..=500u64 {
            let q: f64 = rng.random();
            let y = Label::from_bool(rng.random_bool(0.3));
            s.predict(q).unwrap();
            let payoff = s.observe(q, y).unwrap();
            theta = ogd_update(&theta, &payoff.to_dense(12), learning_rate(&c, t));
            assert_eq!(&theta, s.theta());
        }
    }

    #[test]
    fn same_seed_same_draws() {
        let run = |seed| {
            let mut s = RecalibratorState::new(GameConfig::new(8, ScoringRule::brier()).unwrap(), seed);
            let mut out = Vec::new();
            for t in 0..300 {
                let q = (t as f64 * 0.37).fract();
                out.push(s.predict(q).unwrap().index);
                s.observe(q, Label::from_bool(t % 3 == 0)).unwrap();
            }
            out
        };
        assert_eq!(run(17), run(17));
    }

    #[test]
    fn approach_bound_against_alternating_labels() {
        let c = GameConfig::new(8, ScoringRule::brier()).unwrap();
        let mut s = RecalibratorState::new(c.clone(), 3);
        let n = 4096u64;
        for t in 0..n {
            let q = 0.9;
            s.predict(q).unwrap();
            s.observe(q, Label::from_bool(t % 2 == 0)).unwrap();
        }
        let avg = s.average_payoff().unwrap();
        assert!(dist_to_target(&c, &avg) <= c.approachability_bound(n));
    }
}
