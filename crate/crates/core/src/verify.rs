//! Randomized property checks behind `recal verify`.
//!
//! Each check draws its samples from ChaCha8 streams derived from a fixed
//! seed, so reports are reproducible. Samples are split into fixed chunks
//! (one generator stream per chunk), which makes the result identical under
//! sequential and parallel execution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::geometry::{dist_to_target, dual_linear_min, payoff_vector, GameConfig, HalfspaceParam, PayoffVector};
use crate::metrics::BucketStats;
use crate::mw_recalibrator::{lifted_max_coordinate, MWState};
use crate::parallel::{map_range, Execution};
use crate::recalibrator::{approach_with, f_value, minimax_regret_mixture};
use crate::scoring::{Label, ScoringRule};

const CHUNKS: usize = 64;
const SEED: u64 = 0x5eed_cafe;

/// Outcome of one property check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropertyReport {
    pub name: &'static str,
    pub passed: bool,
    pub samples: usize,
    pub violations: usize,
    /// Smallest `allowed − observed` over all samples; negative on failure.
    pub worst_slack: f64,
}

/// Sample budgets for the suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Budget {
    pub halfspace: usize,
    pub oracle_cost: usize,
    pub dual_identity: usize,
    pub recal_vector: usize,
    pub mw_trials_per_m: usize,
    pub lifted_max: usize,
    pub nearest_grid_points: usize,
}

impl Budget {
    pub fn full() -> Self {
        Budget {
            halfspace: 100_000,
            oracle_cost: 20_000,
            dual_identity: 10_000,
            recal_vector: 1_000,
            mw_trials_per_m: 10,
            lifted_max: 10_000,
            nearest_grid_points: 1_000,
        }
    }

    /// Ten times fewer samples everywhere.
    pub fn quick() -> Self {
        let f = Self::full();
        Budget {
            halfspace: f.halfspace / 10,
            oracle_cost: f.oracle_cost / 10,
            dual_identity: f.dual_identity / 10,
            recal_vector: f.recal_vector / 10,
            mw_trials_per_m: 1,
            lifted_max: f.lifted_max / 10,
            nearest_grid_points: f.nearest_grid_points / 10,
        }
    }
}

/// Deliberate defects for checking that the suite is sensitive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mutation {
    #[default]
    None,
    /// The oracle searches with the calibration term's sign flipped.
    FlipCalibrationSign,
}

#[derive(Debug, Clone, Copy)]
struct Tally {
    samples: usize,
    violations: usize,
    worst_slack: f64,
}

impl Tally {
    const EMPTY: Tally = Tally {
        samples: 0,
        violations: 0,
        worst_slack: f64::INFINITY,
    };

    fn observe(&mut self, slack: f64) {
        self.samples += 1;
        // NaN slack counts as a violation
        if slack.is_nan() || slack < 0.0 {
            self.violations += 1;
        }
        self.worst_slack = if slack.is_nan() { f64::NAN } else { self.worst_slack.min(slack) };
    }

    fn merge(self, other: Tally) -> Tally {
        Tally {
            samples: self.samples + other.samples,
            violations: self.violations + other.violations,
            worst_slack: if self.worst_slack.is_nan() || other.worst_slack.is_nan() {
                f64::NAN
            } else {
                self.worst_slack.min(other.worst_slack)
            },
        }
    }

    fn report(self, name: &'static str) -> PropertyReport {
        PropertyReport {
            name,
            passed: self.violations == 0,
            samples: self.samples,
            violations: self.violations,
            worst_slack: self.worst_slack,
        }
    }
}

/// Splits `samples` over [`CHUNKS`] generator streams and merges the tallies.
fn chunked<F>(samples: usize, stream_base: u64, exec: Execution, body: F) -> Tally
where
    F: Fn(&mut ChaCha8Rng, usize, &mut Tally) + Sync + Send,
{
    let per = samples / CHUNKS;
    let extra = samples % CHUNKS;
    map_range(CHUNKS, exec, |c| {
        let mut rng = ChaCha8Rng::seed_from_u64(SEED);
        rng.set_stream(stream_base * 1_000 + c as u64);
        let mut tally = Tally::EMPTY;
        body(&mut rng, per + usize::from(c < extra), &mut tally);
        tally
    })
    .into_iter()
    .fold(Tally::EMPTY, Tally::merge)
}

fn random_rule<R: Rng>(rng: &mut R) -> ScoringRule {
    if rng.random_bool(0.5) {
        ScoringRule::brier()
    } else {
        ScoringRule::log_clipped(0.05).expect("valid clip")
    }
}

/// A random member of `K`, with some coordinates pinned to the box faces.
pub fn random_halfspace<R: Rng>(rng: &mut R, m: usize) -> HalfspaceParam {
    let mut coord = |lo: f64| match rng.random_range(0..6) {
        0 => lo,
        1 => 1.0,
        2 => 0.0,
        _ => rng.random_range(lo..=1.0),
    };
    let a = (0..=m).map(|_| coord(-1.0)).collect();
    HalfspaceParam { a, b: coord(0.0) }
}

/// `⟨ℓ(w, q, y), θ⟩ ≤ 1/m + 4L/(λm²)` for the oracle's `w` and both `y`,
/// over random `θ ∈ K`, `q`, `m ∈ 3..=64` and both rules.
pub fn halfspace_inequality(samples: usize, mutation: Mutation, exec: Execution) -> PropertyReport {
    chunked(samples, 1, exec, |rng, n, tally| {
        for _ in 0..n {
            let m = rng.random_range(3..=64);
            let cfg = GameConfig::with_resolution(m, random_rule(rng)).expect("m ≥ 1");
            let theta = random_halfspace(rng, m);
            let q = if rng.random_bool(0.1) { rng.random_range(0..=m) as f64 / m as f64 } else { rng.random() };
            let sign = match mutation {
                Mutation::None => 1.0,
                Mutation::FlipCalibrationSign => -1.0,
            };
            let searched = approach_with(m, |i, y| {
                let f = f_value(&cfg, &theta, q, i, y).expect("valid index");
                let cal = theta.a[i] * (cfg.grid_point(i) - y.as_f64());
                f - cal + sign * cal
            });
            let outcome = match searched {
                Ok(o) => o,
                Err(_) => {
                    // the mutated search may trip the endpoint invariant
                    tally.observe(f64::NEG_INFINITY);
                    continue;
                }
            };
            let w = outcome.dist.to_dense(m);
            let bound = theta.a.iter().fold(0.0f64, |acc, x| acc.max(x.abs())) / m as f64
                + theta.b * cfg.reg_threshold();
            let allowed = 1.0 / m as f64 + cfg.reg_threshold() + 1e-9;
            let slack = Label::BOTH
                .iter()
                .map(|&y| {
                    let value = theta.dot(&payoff_vector(&cfg, &w, q, y).expect("valid distribution"));
                    (allowed - value).min(bound + 1e-9 - value)
                })
                .fold(f64::INFINITY, f64::min);
            tally.observe(slack);
        }
    })
    .report("halfspace inequality")
}

/// Oracle cost: at most `2 ceil(log₂ m) + 4` evaluations of `f`, for every
/// power of two up to `2^16` and random `m` in between.
pub fn oracle_cost(samples: usize, exec: Execution) -> PropertyReport {
    let limit = |m: usize| 2 * (m as f64).log2().ceil() as usize + 4;
    chunked(samples, 2, exec, |rng, n, tally| {
        for k in 0..n {
            let m = if k < 17 {
                (1usize << k).max(2) + usize::from(k % 2 == 1 && k > 1)
            } else {
                // log-uniform over [2, 2^16]
                (2f64.powf(rng.random_range(1.0..=16.0)).round() as usize).clamp(2, 1 << 16)
            };
            let cfg = GameConfig::with_resolution(m, random_rule(rng)).expect("m ≥ 1");
            let theta = random_halfspace(rng, m);
            let q: f64 = rng.random();
            match approach_with(m, |i, y| f_value(&cfg, &theta, q, i, y).expect("valid index")) {
                Ok(o) => tally.observe(limit(m) as f64 - o.f_evals as f64),
                Err(_) => tally.observe(f64::NEG_INFINITY),
            }
        }
    })
    .report("oracle cost")
}

/// When both target constraints are active, the ℓ₁ distance equals
/// `−1/m − reg_threshold − min_{θ ∈ K} ⟨−v, θ⟩`.
pub fn dual_identity(samples: usize, exec: Execution) -> PropertyReport {
    chunked(samples, 3, exec, |rng, n, tally| {
        for _ in 0..n {
            let m = rng.random_range(3..=64);
            let cfg = GameConfig::with_resolution(m, random_rule(rng)).expect("m ≥ 1");
            let raw: Vec<f64> = (0..=m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let l1: f64 = raw.iter().map(|x| x.abs()).sum::<f64>().max(f64::MIN_POSITIVE);
            let target_l1 = cfg.cal_threshold() * (1.0 + rng.random_range(0.0..20.0));
            let v = PayoffVector {
                cal: raw.iter().map(|x| x * target_l1 / l1).collect(),
                reg: cfg.reg_threshold() + rng.random_range(0.0..1.0),
            };
            if v.cal_l1() < cfg.cal_threshold() {
                continue;
            }
            let dual = -cfg.cal_threshold() - cfg.reg_threshold() - dual_linear_min(&v);
            tally.observe(1e-12 - (dist_to_target(&cfg, &v) - dual).abs());
        }
    })
    .report("dual distance identity")
}

/// Bucket form and vector form of the recalibration rate agree.
pub fn recalibration_vector_equivalence(samples: usize, exec: Execution) -> PropertyReport {
    chunked(samples, 4, exec, |rng, n, tally| {
        for _ in 0..n {
            let m = rng.random_range(1..=32);
            let rule = random_rule(rng);
            let mut stats = BucketStats::new(m);
            let rounds = rng.random_range(1..=300);
            let bias: f64 = rng.random();
            for _ in 0..rounds {
                let p = rng.random_range(0..=m) as f64 / m as f64;
                let q: f64 = rng.random();
                let y = Label::from_bool(rng.random_bool(bias));
                stats.record(p, q, y, &rule).expect("valid probabilities");
            }
            let delta = 4.0 * rule.lipschitz_constant() / (m * m) as f64;
            let (c, r) = stats.recalibration_vector().expect("nonempty");
            let l1: f64 = c.iter().map(|x| x.abs()).sum();
            let vector_form = (l1 - 0.5 / m as f64).max(r - delta / 2.0).max(0.0);
            let bucket_form = stats.recalibration_rate(delta).expect("nonempty");
            tally.observe(1e-12 - (bucket_form - vector_form).abs());
        }
    })
    .report("recalibration vector equivalence")
}

/// Weights of every lifted coordinate, enumerated explicitly.
fn lifted_rows(n: usize) -> impl Iterator<Item = (u64, bool)> {
    (0..1u64 << n).map(|mask| (mask, false)).chain(std::iter::once((0, true)))
}

fn lifted_value(row: (u64, bool), cal: &[f64], reg: f64) -> f64 {
    match row {
        (_, true) => reg,
        (mask, false) => cal
            .iter()
            .enumerate()
            .map(|(k, c)| if mask >> k & 1 == 1 { *c } else { -*c })
            .sum(),
    }
}

fn random_simplex<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-9).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|x| x / s).collect()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

/// The implicit denominator and weighted loss match explicit enumeration
/// over all `2^(m+1) + 1` coordinates after 100 random updates.
pub fn mw_dp_equality(trials_per_m: usize, exec: Execution) -> PropertyReport {
    let ms: Vec<usize> = (2..=10).collect();
    let tallies = map_range(ms.len() * trials_per_m, exec, |k| {
        let m = ms[k / trials_per_m];
        let mut rng = ChaCha8Rng::seed_from_u64(SEED);
        rng.set_stream(5_000 + k as u64);
        let mut tally = Tally::EMPTY;
        let rule = random_rule(&mut rng);
        let cfg = GameConfig::with_resolution(m, rule).expect("m ≥ 1");
        let mut state = MWState::new(cfg.clone(), 256).expect("long horizon");
        let eta = state.eta();
        let mut cum = PayoffVector::zeros(m);
        for _ in 0..100 {
            let x = random_simplex(&mut rng, m + 1);
            let q: f64 = rng.random();
            let y = Label::from_bool(rng.random_bool(0.5));
            cum.add_assign(&state.update(&x, q, y).expect("valid update"));
        }
        let rows: Vec<(u64, bool)> = lifted_rows(m + 1).collect();
        let exps: Vec<f64> = rows.iter().map(|&r| (eta * lifted_value(r, &cum.cal, cum.reg)).exp()).collect();
        let denom: f64 = exps.iter().sum();
        tally.observe(1e-9 - rel_err(state.dp_denominator(), denom));
        for _ in 0..5 {
            let x = random_simplex(&mut rng, m + 1);
            let q: f64 = rng.random();
            for y in Label::BOTH {
                let loss = crate::mw_recalibrator::raw_payoff(&cfg, &x, q, y).expect("valid");
                let brute: f64 = rows
                    .iter()
                    .zip(&exps)
                    .map(|(&r, e)| e * lifted_value(r, &loss.cal, loss.reg))
                    .sum::<f64>()
                    / denom;
                let dp = state.dp_weighted_loss(&x, q, y).expect("valid");
                // relative error, with an absolute floor for losses near zero
                tally.observe(1e-9 - (dp - brute).abs() / brute.abs().max(1e-3));
            }
        }
        tally
    });
    tallies.into_iter().fold(Tally::EMPTY, Tally::merge).report("multiplicative weights dp")
}

/// `max(‖c‖₁, r)` equals the largest lifted coordinate.
pub fn lifted_max_identity(samples: usize, exec: Execution) -> PropertyReport {
    chunked(samples, 6, exec, |rng, n, tally| {
        for _ in 0..n {
            let m = rng.random_range(1..=10);
            let scale = 10f64.powi(rng.random_range(-3..=2));
            let cal: Vec<f64> = (0..=m).map(|_| rng.random_range(-scale..scale)).collect();
            let reg = rng.random_range(-2.0 * scale..2.0 * scale);
            let brute = lifted_rows(m + 1)
                .map(|r| lifted_value(r, &cal, reg))
                .fold(f64::NEG_INFINITY, f64::max);
            tally.observe(1e-12 - (lifted_max_coordinate(&cal, reg) - brute).abs());
        }
    })
    .report("lifted max coordinate")
}

/// Some mixture over the grid has raw regret at most `2L/m²` for both
/// labels, over an even grid of `q`, both rules and `m ∈ 3..=32`.
pub fn nearest_grid(points: usize, exec: Execution) -> PropertyReport {
    let rules = [ScoringRule::brier(), ScoringRule::log_clipped(0.05).expect("valid clip")];
    let tallies = map_range(rules.len() * 30, exec, |k| {
        let rule = rules[k / 30];
        let m = 3 + k % 30;
        let cfg = GameConfig::with_resolution(m, rule).expect("m ≥ 1");
        let allowed = 2.0 * rule.lipschitz_constant() / (m * m) as f64;
        let mut tally = Tally::EMPTY;
        for j in 0..points {
            let q = j as f64 / (points - 1).max(1) as f64;
            let (dist, _) = minimax_regret_mixture(&cfg, q).expect("valid probability");
            let w = dist.to_dense(m);
            let worst = Label::BOTH
                .iter()
                .map(|&y| {
                    w.iter()
                        .enumerate()
                        .map(|(i, wi)| wi * rule.regret_term(cfg.grid_point(i), q, y).expect("valid"))
                        .sum::<f64>()
                })
                .fold(f64::NEG_INFINITY, f64::max);
            tally.observe(allowed - worst);
        }
        tally
    });
    tallies.into_iter().fold(Tally::EMPTY, Tally::merge).report("grid regret")
}

/// Runs every property with the given budget.
pub fn run_all(budget: Budget, exec: Execution) -> Vec<PropertyReport> {
    vec![
        halfspace_inequality(budget.halfspace, Mutation::None, exec),
        oracle_cost(budget.oracle_cost, exec),
        dual_identity(budget.dual_identity, exec),
        recalibration_vector_equivalence(budget.recal_vector, exec),
        mw_dp_equality(budget.mw_trials_per_m, exec),
        lifted_max_identity(budget.lifted_max, exec),
        nearest_grid(budget.nearest_grid_points, exec),
    ]
}
