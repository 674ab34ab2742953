//! Experiment harness: oracles, label streams, forecasters and sweeps.
//!
//! Each round follows the online protocol:
//!
//! 1. nature fixes the hidden label `y_t` (stochastic streams only);
//! 2. the oracle reveals `q_t`;
//! 3. the forecaster announces `p_t` having seen only `q_t` and the past;
//! 4. `y_t` is revealed (the greedy adversary picks it now, after seeing the
//!    forecaster's mixed strategy) and everybody updates.
//!
//! # Randomness
//!
//! All randomness comes from ChaCha8 (`rand_chacha::ChaCha8Rng`), seeded with
//! `seed_from_u64(seed)` and split into independent streams with
//! `set_stream`: stream 0 draws labels, stream 1 drives oracle noise and
//! stream 2 samples the forecaster's prediction. ChaCha output is
//! platform-independent, so a `(config, seed)` pair always reproduces the
//! same trace.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{dist_to_target, GameConfig, PayoffVector, SparsePayoff};
use crate::metrics::BucketStats;
use crate::mw_recalibrator::{MWState, MwForecaster};
use crate::parallel::{try_map_range, Execution};
use crate::recalibrator::{ForecastDistribution, Prediction, RecalibratorState};
use crate::scoring::{Label, ScoringRule};

const LABEL_STREAM: u64 = 0;
const ORACLE_STREAM: u64 = 1;
const FORECASTER_STREAM: u64 = 2;

/// Tolerance when checking a tradeoff exponent against `[1/3, 2/5]`, so that
/// truncated decimals such as `0.3333` are accepted.
pub const EXPONENT_TOLERANCE: f64 = 5e-4;
pub const MIN_EXPONENT: f64 = 1.0 / 3.0;
pub const MAX_EXPONENT: f64 = 2.0 / 5.0;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn parse_unit(s: &str, what: &str) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad {what} '{s}'")))?;
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Config(format!("{what} must lie in [0, 1], got {v}")));
    }
    Ok(v)
}

macro_rules! serialize_as_string {
    ($($t:ty),*) => {$(
        impl Serialize for $t {
            fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                s.collect_str(self)
            }
        }
    )*};
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForecasterKind {
    /// Halfspace oracle plus online gradient descent.
    Approach,
    /// Multiplicative weights over the lifted objective.
    Mw,
    /// Rounds the oracle's prediction to the grid.
    Passthrough,
}

impl FromStr for ForecasterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "approach" => Ok(ForecasterKind::Approach),
            "mw" => Ok(ForecasterKind::Mw),
            "passthrough" => Ok(ForecasterKind::Passthrough),
            other => Err(Error::Config(format!(
                "unknown forecaster '{other}' (expected approach, mw or passthrough)"
            ))),
        }
    }
}

impl fmt::Display for ForecasterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ForecasterKind::Approach => "approach",
            ForecasterKind::Mw => "mw",
            ForecasterKind::Passthrough => "passthrough",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LabelSpec {
    Bernoulli(f64),
    Periodic(Vec<Label>),
    AdversarialGreedy,
}

/// `bernoulli:π`, `periodic:0110` (commas optional) or `adversarial`.
impl FromStr for LabelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "adversarial" || s == "adversarial_greedy" {
            return Ok(LabelSpec::AdversarialGreedy);
        }
        if let Some(rest) = s.strip_prefix("bernoulli:") {
            return Ok(LabelSpec::Bernoulli(parse_unit(rest, "bernoulli probability")?));
        }
        if let Some(rest) = s.strip_prefix("periodic:") {
            let pattern = rest
                .chars()
                .filter(|c| !matches!(c, ',' | ' '))
                .map(|c| match c {
                    '0' => Ok(Label::Zero),
                    '1' => Ok(Label::One),
                    _ => Err(Error::Config(format!("bad periodic pattern '{rest}'"))),
                })
                .collect::<Result<Vec<_>>>()?;
            if pattern.is_empty() {
                return Err(Error::Config("periodic pattern must be nonempty".into()));
            }
            return Ok(LabelSpec::Periodic(pattern));
        }
        Err(Error::Config(format!(
            "unknown label stream '{s}' (expected bernoulli:<p>, periodic:<bits> or adversarial)"
        )))
    }
}

impl fmt::Display for LabelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LabelSpec::Bernoulli(p) => write!(f, "bernoulli:{p}"),
            LabelSpec::Periodic(pat) => {
                f.write_str("periodic:")?;
                pat.iter().try_for_each(|l| write!(f, "{}", l.as_u8()))
            }
            LabelSpec::AdversarialGreedy => f.write_str("adversarial"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OracleSpec {
    /// Reports the label stream's own probability `π_t`.
    Truth,
    /// `(1 − 2β) y_t + β`: sees the label, reports a shrunk version.
    ClairvoyantShrunk(f64),
    Constant(f64),
    /// `clamp(π_t + N(0, σ²), 0, 1)`.
    NoisyTruth(f64),
}

/// `truth`, `clairvoyant:β`, `constant:c` or `noisy:σ`.
impl FromStr for OracleSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "truth" {
            return Ok(OracleSpec::Truth);
        }
        let (name, arg) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("unknown oracle '{s}'")))?;
        match name {
            "clairvoyant" | "clairvoyant_shrunk" => {
                let beta: f64 = arg
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad shrinkage '{arg}'")))?;
                if !(0.0..0.5).contains(&beta) {
                    return Err(Error::Config(format!("shrinkage β must lie in [0, 1/2), got {beta}")));
                }
                Ok(OracleSpec::ClairvoyantShrunk(beta))
            }
            "constant" => Ok(OracleSpec::Constant(parse_unit(arg, "constant prediction")?)),
            "noisy" | "noisy_truth" => {
                let sigma: f64 = arg
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad noise level '{arg}'")))?;
                if !(sigma >= 0.0 && sigma.is_finite()) {
                    return Err(Error::Config(format!("noise σ must be nonnegative, got {sigma}")));
                }
                Ok(OracleSpec::NoisyTruth(sigma))
            }
            _ => Err(Error::Config(format!("unknown oracle '{s}'"))),
        }
    }
}

impl fmt::Display for OracleSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OracleSpec::Truth => f.write_str("truth"),
            OracleSpec::ClairvoyantShrunk(b) => write!(f, "clairvoyant:{b}"),
            OracleSpec::Constant(c) => write!(f, "constant:{c}"),
            OracleSpec::NoisyTruth(s) => write!(f, "noisy:{s}"),
        }
    }
}

serialize_as_string!(ForecasterKind, LabelSpec, OracleSpec);

/// Grid resolution, either explicit or derived from a tradeoff exponent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Resolution {
    Grid(usize),
    /// `m = ceil(T^(1 − 2x))` for `x ∈ [1/3, 2/5]`.
    Exponent(f64),
}

/// Checks `x ∈ [1/3, 2/5]` (up to [`EXPONENT_TOLERANCE`]).
pub fn validate_exponent(x: f64) -> Result<f64> {
    if (MIN_EXPONENT - EXPONENT_TOLERANCE..=MAX_EXPONENT + EXPONENT_TOLERANCE).contains(&x) {
        Ok(x)
    } else {
        Err(Error::Config(format!("exponent must lie in [1/3, 2/5], got {x}")))
    }
}

/// Parses a decimal (`0.4`) or a fraction (`1/3`) exponent.
pub fn parse_exponent(s: &str) -> Result<f64> {
    let s = s.trim();
    let x = match s.split_once('/') {
        Some((n, d)) => {
            let n: f64 = n.trim().parse().map_err(|_| Error::Config(format!("bad exponent '{s}'")))?;
            let d: f64 = d.trim().parse().map_err(|_| Error::Config(format!("bad exponent '{s}'")))?;
            n / d
        }
        None => s.parse().map_err(|_| Error::Config(format!("bad exponent '{s}'")))?,
    };
    validate_exponent(x)
}

/// `ceil(T^(1 − 2x))`, robust to `powf` landing a hair above an integer.
pub fn resolution_for_exponent(horizon: u64, x: f64) -> usize {
    let v = (horizon as f64).powf(1.0 - 2.0 * x);
    ((v - 1e-9).ceil() as usize).max(1)
}

/// Predicted log-log slopes `(calibration, regret)` at exponent `x`:
/// `(2x − 1, −x)`.
pub fn theoretical_slopes(x: f64) -> (f64, f64) {
    (2.0 * x - 1.0, -x)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub forecaster: ForecasterKind,
    pub rule: ScoringRule,
    pub resolution: Resolution,
    pub horizon: u64,
    pub oracle: OracleSpec,
    pub labels: LabelSpec,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn resolve_m(&self) -> Result<usize> {
        match self.resolution {
            Resolution::Grid(m) => Ok(m),
            Resolution::Exponent(x) => Ok(resolution_for_exponent(self.horizon, validate_exponent(x)?)),
        }
    }

    /// Checks every constraint that can fail before the first round and
    /// returns the game.
    pub fn validate(&self) -> Result<GameConfig> {
        if self.horizon == 0 {
            return Err(Error::Config("horizon T must be positive".into()));
        }
        let m = self.resolve_m()?;
        let game = match self.forecaster {
            ForecasterKind::Approach => GameConfig::new(m, self.rule)?,
            _ => GameConfig::with_resolution(m, self.rule)?,
        };
        if self.forecaster == ForecasterKind::Mw {
            MWState::new(game.clone(), self.horizon)?;
        }
        let adversarial = self.labels == LabelSpec::AdversarialGreedy;
        match self.oracle {
            OracleSpec::ClairvoyantShrunk(_) if adversarial => Err(Error::Config(
                "the clairvoyant oracle needs a label fixed before the forecaster moves; \
                 it cannot be combined with adversarial labels"
                    .into(),
            )),
            OracleSpec::Truth | OracleSpec::NoisyTruth(_) if adversarial => Err(Error::Config(
                "adversarial labels have no probability schedule for a truth oracle".into(),
            )),
            _ => Ok(game),
        }
    }
}

/// A source of binary labels.
#[derive(Debug, Clone)]
pub enum LabelSource {
    Bernoulli { pi: f64, rng: Box<ChaCha8Rng> },
    Periodic { pattern: Vec<Label>, pos: usize },
    AdversarialGreedy,
}

impl LabelSource {
    /// Probability of `y_t = 1` for the next label, when one exists.
    pub fn probability(&self) -> Option<f64> {
        match self {
            LabelSource::Bernoulli { pi, .. } => Some(*pi),
            LabelSource::Periodic { pattern, pos } => Some(pattern[*pos].as_f64()),
            LabelSource::AdversarialGreedy => None,
        }
    }

    /// Fixes the next label ahead of time; `None` for the adversary, which
    /// moves after the forecaster.
    pub fn draw(&mut self) -> Option<Label> {
        match self {
            LabelSource::Bernoulli { pi, rng } => Some(Label::from_bool(rng.random::<f64>() < *pi)),
            LabelSource::Periodic { pattern, pos } => {
                let y = pattern[*pos];
                *pos = (*pos + 1) % pattern.len();
                Some(y)
            }
            LabelSource::AdversarialGreedy => None,
        }
    }
}

pub fn make_label_stream(spec: &LabelSpec, seed: u64) -> Result<LabelSource> {
    match spec {
        LabelSpec::Bernoulli(pi) => {
            if !(0.0..=1.0).contains(pi) {
                return Err(Error::Config(format!("bernoulli probability must lie in [0, 1], got {pi}")));
            }
            Ok(LabelSource::Bernoulli {
                pi: *pi,
                rng: Box::new(stream_rng(seed, LABEL_STREAM)),
            })
        }
        LabelSpec::Periodic(pattern) => {
            if pattern.is_empty() {
                return Err(Error::Config("periodic pattern must be nonempty".into()));
            }
            Ok(LabelSource::Periodic {
                pattern: pattern.clone(),
                pos: 0,
            })
        }
        LabelSpec::AdversarialGreedy => Ok(LabelSource::AdversarialGreedy),
    }
}

/// A black-box predictor producing `q_t`.
#[derive(Debug, Clone)]
pub struct Oracle {
    spec: OracleSpec,
    noise: Option<(Normal<f64>, ChaCha8Rng)>,
}

impl Oracle {
    pub fn spec(&self) -> OracleSpec {
        self.spec
    }

    /// `pi` is the label stream's probability for this round and `hidden`
    /// the already-fixed label, when they exist.
    pub fn predict(&mut self, pi: Option<f64>, hidden: Option<Label>) -> Result<f64> {
        let need_pi = || pi.ok_or_else(|| Error::Config("oracle needs a label probability".into()));
        match self.spec {
            OracleSpec::Truth => need_pi(),
            OracleSpec::ClairvoyantShrunk(beta) => {
                let y = hidden.ok_or_else(|| Error::Config("clairvoyant oracle needs a fixed label".into()))?;
                Ok((1.0 - 2.0 * beta) * y.as_f64() + beta)
            }
            OracleSpec::Constant(c) => Ok(c),
            OracleSpec::NoisyTruth(_) => {
                let pi = need_pi()?;
                let (normal, rng) = self.noise.as_mut().expect("noisy oracle has a generator");
                Ok((pi + normal.sample(rng)).clamp(0.0, 1.0))
            }
        }
    }
}

pub fn make_oracle(spec: OracleSpec, seed: u64) -> Result<Oracle> {
    let noise = match spec {
        OracleSpec::ClairvoyantShrunk(beta) if !(0.0..0.5).contains(&beta) => {
            return Err(Error::Config(format!("shrinkage β must lie in [0, 1/2), got {beta}")))
        }
        OracleSpec::Constant(c) if !(0.0..=1.0).contains(&c) => {
            return Err(Error::Config(format!("constant prediction must lie in [0, 1], got {c}")))
        }
        OracleSpec::NoisyTruth(sigma) => {
            let normal = Normal::new(0.0, sigma)
                .map_err(|e| Error::Config(format!("bad noise level {sigma}: {e}")))?;
            Some((normal, stream_rng(seed, ORACLE_STREAM)))
        }
        _ => None,
    };
    Ok(Oracle { spec, noise })
}

/// Greedy adversary: the label that pushes the running average payoff
/// furthest from the target set. Ties go to `y = 1`.
///
/// `cum_payoff` holds the sum of the first `t` expected payoffs.
pub fn adversary_label(
    cfg: &GameConfig,
    w: &ForecastDistribution,
    q: f64,
    cum_payoff: &PayoffVector,
    t: u64,
) -> Label {
    let base_l1 = cum_payoff.cal_l1();
    let n = (t + 1) as f64;
    let dist_after = |y: Label| {
        let step = w.payoff(cfg, q, y);
        let mut l1 = base_l1;
        for &(i, c) in step.cal_entries() {
            l1 += (cum_payoff.cal[i] + c).abs() - cum_payoff.cal[i].abs();
        }
        let reg = (cum_payoff.reg + step.reg) / n;
        (l1 / n - cfg.cal_threshold()).max(0.0) + (reg - cfg.reg_threshold()).max(0.0)
    };
    if dist_after(Label::Zero) > dist_after(Label::One) {
        Label::Zero
    } else {
        Label::One
    }
}

/// Anything that can take part in the forecasting protocol.
pub trait Forecaster {
    fn predict(&mut self, q: f64) -> Result<Prediction>;
    fn observe(&mut self, q: f64, y: Label) -> Result<()>;
}

impl Forecaster for RecalibratorState {
    fn predict(&mut self, q: f64) -> Result<Prediction> {
        RecalibratorState::predict(self, q)
    }

    fn observe(&mut self, q: f64, y: Label) -> Result<()> {
        RecalibratorState::observe(self, q, y).map(|_| ())
    }
}

impl Forecaster for MwForecaster {
    fn predict(&mut self, q: f64) -> Result<Prediction> {
        MwForecaster::predict(self, q)
    }

    fn observe(&mut self, q: f64, y: Label) -> Result<()> {
        MwForecaster::observe(self, q, y)
    }
}

/// Predicts the grid point nearest the oracle.
#[derive(Debug, Clone)]
pub struct Passthrough {
    cfg: GameConfig,
    pending: Option<f64>,
}

impl Passthrough {
    pub fn new(cfg: GameConfig) -> Self {
        Passthrough { cfg, pending: None }
    }
}

impl Forecaster for Passthrough {
    fn predict(&mut self, q: f64) -> Result<Prediction> {
        if self.pending.is_some() {
            return Err(Error::Protocol("predict called twice without observe".into()));
        }
        crate::scoring::check_probability(q)?;
        let index = self.cfg.nearest_index(q);
        self.pending = Some(q);
        Ok(Prediction {
            p: self.cfg.grid_point(index),
            index,
            dist: ForecastDistribution::Point(index),
        })
    }

    fn observe(&mut self, q: f64, _y: Label) -> Result<()> {
        match self.pending.take() {
            Some(pq) if pq == q => Ok(()),
            _ => Err(Error::Protocol("observe does not match a pending prediction".into())),
        }
    }
}

fn build_forecaster(cfg: &ExperimentConfig, game: &GameConfig) -> Result<Box<dyn Forecaster + Send>> {
    let rng = stream_rng(cfg.seed, FORECASTER_STREAM);
    Ok(match cfg.forecaster {
        ForecasterKind::Approach => Box::new(RecalibratorState::with_rng(game.clone(), rng)),
        ForecasterKind::Mw => Box::new(MwForecaster::with_rng(MWState::new(game.clone(), cfg.horizon)?, rng)),
        ForecasterKind::Passthrough => Box::new(Passthrough::new(game.clone())),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub t: u64,
    pub q: f64,
    pub p: f64,
    pub y: u8,
}

/// Metrics snapshot after `t` rounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Checkpoint {
    pub t: u64,
    /// Realized ℓ₁ calibration rate `max(0, ℓ₁ error − ε/2)`.
    pub calib_l1: f64,
    pub avg_regret: f64,
    pub recal_rate: f64,
    /// Distance of the average expected (λ-scaled) payoff to the target.
    pub dist_to_target: f64,
}

/// Final metrics of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RunMetrics {
    pub t: u64,
    pub m: usize,
    pub calibration_rate: f64,
    pub l1_calibration_error: f64,
    pub average_regret: f64,
    pub recalibration_rate: f64,
    pub dist_to_target: f64,
    /// ℓ₁ norm of the average expected calibration block.
    pub expected_l1_calibration: f64,
    /// Average expected regret, unscaled.
    pub expected_regret: f64,
    /// `D·G/√T` for this game.
    pub approachability_bound: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Trace {
    pub m: usize,
    pub rows: Vec<TraceRow>,
    pub checkpoints: Vec<Checkpoint>,
    pub stats: BucketStats,
    /// Sum of expected payoff vectors, regret coordinate λ-scaled.
    pub cum_payoff: PayoffVector,
    pub metrics: RunMetrics,
}

fn snapshot(game: &GameConfig, stats: &BucketStats, cum: &PayoffVector) -> Result<Checkpoint> {
    let t = stats.t();
    let avg = cum.scaled(1.0 / t as f64);
    Ok(Checkpoint {
        t,
        calib_l1: stats.calibration_rate()?,
        avg_regret: stats.average_regret()?,
        recal_rate: stats.recalibration_rate(game.delta())?,
        dist_to_target: dist_to_target(game, &avg),
    })
}

/// Runs one experiment, keeping every round in the trace.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Trace> {
    run_experiment_with(cfg, true)
}

/// Runs one experiment. With `keep_rows = false` only checkpoints and final
/// statistics are retained.
pub fn run_experiment_with(cfg: &ExperimentConfig, keep_rows: bool) -> Result<Trace> {
    let game = cfg.validate()?;
    let m = game.m();
    let mut labels = make_label_stream(&cfg.labels, cfg.seed)?;
    let mut oracle = make_oracle(cfg.oracle, cfg.seed)?;
    let mut forecaster = build_forecaster(cfg, &game)?;

    let mut stats = BucketStats::new(m);
    let mut cum = PayoffVector::zeros(m);
    let mut rows = Vec::with_capacity(if keep_rows { cfg.horizon as usize } else { 0 });
    let mut checkpoints = Vec::new();
    let mut next_checkpoint = 1u64;

    for t in 1..=cfg.horizon {
        let pi = labels.probability();
        let hidden = labels.draw();
        let q = oracle.predict(pi, hidden)?;
        let pred = forecaster.predict(q)?;
        let y = match hidden {
            Some(y) => y,
            None => adversary_label(&game, &pred.dist, q, &cum, t - 1),
        };
        forecaster.observe(q, y)?;
        stats.record(pred.p, q, y, cfg.rule_ref())?;
        let step: SparsePayoff = pred.dist.payoff(&game, q, y);
        cum.add_sparse(&step);
        if keep_rows {
            rows.push(TraceRow { t, q, p: pred.p, y: y.as_u8() });
        }
        if t == next_checkpoint || t == cfg.horizon {
            checkpoints.push(snapshot(&game, &stats, &cum)?);
            while next_checkpoint <= t {
                next_checkpoint *= 2;
            }
        }
    }

    let last = *checkpoints.last().expect("horizon is positive");
    let n = cfg.horizon as f64;
    let metrics = RunMetrics {
        t: cfg.horizon,
        m,
        calibration_rate: last.calib_l1,
        l1_calibration_error: stats.l1_calibration_error()?,
        average_regret: last.avg_regret,
        recalibration_rate: last.recal_rate,
        dist_to_target: last.dist_to_target,
        expected_l1_calibration: cum.cal_l1() / n,
        expected_regret: cum.reg * game.lambda() / n,
        approachability_bound: game.approachability_bound(cfg.horizon),
    };
    Ok(Trace {
        m,
        rows,
        checkpoints,
        stats,
        cum_payoff: cum,
        metrics,
    })
}

impl ExperimentConfig {
    fn rule_ref(&self) -> &ScoringRule {
        &self.rule
    }
}

/// Least-squares fit of `ln(value)` against `ln(T)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn fit_loglog_slope(points: &[(f64, f64)]) -> Result<LogLogFit> {
    if points.len() < 3 {
        return Err(Error::Domain(format!("need at least 3 points, got {}", points.len())));
    }
    if let Some(&(t, v)) = points.iter().find(|&&(t, v)| !(t > 0.0 && v > 0.0)) {
        return Err(Error::Domain(format!("log-log fit needs positive values, got ({t}, {v})")));
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Domain("log-log fit needs at least two distinct T".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let r_squared = if ss_tot <= f64::EPSILON * ys.len() as f64 {
        1.0
    } else {
        1.0 - ss_res / ss_tot
    };
    Ok(LogLogFit { slope, intercept, r_squared })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub t: u64,
    pub m: usize,
    pub seeds: usize,
    pub mean_calib: f64,
    pub mean_regret: f64,
    pub mean_recal_rate: f64,
    pub stderr_calib: f64,
    pub stderr_regret: f64,
    pub stderr_recal_rate: f64,
    pub mean_dist_to_target: f64,
    /// Mean ℓ₁ calibration error before the `ε/2` allowance is subtracted.
    pub mean_l1_error: f64,
    pub approachability_bound: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepSummary {
    pub rows: Vec<SweepRow>,
    /// Fits over the grid points with a positive mean; `None` when fewer
    /// than three remain.
    pub calib_fit: Option<LogLogFit>,
    pub regret_fit: Option<LogLogFit>,
    pub recal_fit: Option<LogLogFit>,
}

fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Runs `base` for every horizon in `horizons` and seeds
/// `base.seed, base.seed + 1, …`, averaging final metrics per horizon.
pub fn sweep(base: &ExperimentConfig, horizons: &[u64], seeds: usize, exec: Execution) -> Result<SweepSummary> {
    if horizons.is_empty() {
        return Err(Error::Config("horizon grid must be nonempty".into()));
    }
    if seeds == 0 {
        return Err(Error::Config("need at least one seed".into()));
    }
    let configs: Vec<ExperimentConfig> = horizons
        .iter()
        .flat_map(|&t| {
            (0..seeds).map(move |s| ExperimentConfig {
                horizon: t,
                seed: base.seed.wrapping_add(s as u64),
                ..base.clone()
            })
        })
        .collect();
    for c in &configs {
        c.validate()?;
    }
    let metrics = try_map_range(configs.len(), exec, |k| {
        run_experiment_with(&configs[k], false).map(|trace| trace.metrics)
    })?;

    let rows: Vec<SweepRow> = metrics
        .chunks(seeds)
        .map(|runs| {
            let col = |f: fn(&RunMetrics) -> f64| runs.iter().map(f).collect::<Vec<_>>();
            let (mean_calib, stderr_calib) = mean_and_stderr(&col(|r| r.calibration_rate));
            let (mean_regret, stderr_regret) = mean_and_stderr(&col(|r| r.average_regret));
            let (mean_recal_rate, stderr_recal_rate) = mean_and_stderr(&col(|r| r.recalibration_rate));
            let (mean_dist_to_target, _) = mean_and_stderr(&col(|r| r.dist_to_target));
            let (mean_l1_error, _) = mean_and_stderr(&col(|r| r.l1_calibration_error));
            SweepRow {
                t: runs[0].t,
                m: runs[0].m,
                seeds,
                mean_calib,
                mean_regret,
                mean_recal_rate,
                stderr_calib,
                stderr_regret,
                stderr_recal_rate,
                mean_dist_to_target,
                mean_l1_error,
                approachability_bound: runs[0].approachability_bound,
            }
        })
        .collect();

    let fit = |f: fn(&SweepRow) -> f64| {
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .map(|r| (r.t as f64, f(r)))
            .filter(|&(_, v)| v > 0.0)
            .collect();
        fit_loglog_slope(&pts).ok()
    };
    Ok(SweepSummary {
        calib_fit: fit(|r| r.mean_calib),
        regret_fit: fit(|r| r.mean_regret),
        recal_fit: fit(|r| r.mean_recal_rate),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn base() -> ExperimentConfig {
        ExperimentConfig {
            forecaster: ForecasterKind::Approach,
            rule: ScoringRule::brier(),
            resolution: Resolution::Grid(8),
            horizon: 512,
            oracle: OracleSpec::ClairvoyantShrunk(0.2),
            labels: LabelSpec::Bernoulli(0.5),
            seed: 7,
        }
    }

    #[test]
    fn spec_parsing_round_trips() {
        for s in ["bernoulli:0.5", "periodic:01", "periodic:0110", "adversarial"] {
            assert_eq!(s.parse::<LabelSpec>().unwrap().to_string(), s);
        }
        assert_eq!("periodic:0,1".parse::<LabelSpec>().unwrap(), LabelSpec::Periodic(vec![Label::Zero, Label::One]));
        for s in ["truth", "clairvoyant:0.2", "constant:0.5", "noisy:0.1"] {
            assert_eq!(s.parse::<OracleSpec>().unwrap().to_string(), s);
        }
        for s in ["approach", "mw", "passthrough"] {
            assert_eq!(s.parse::<ForecasterKind>().unwrap().to_string(), s);
        }
        assert!("bernoulli:1.5".parse::<LabelSpec>().is_err());
        assert!("periodic:".parse::<LabelSpec>().is_err());
        assert!("periodic:012".parse::<LabelSpec>().is_err());
        assert!("clairvoyant:0.5".parse::<OracleSpec>().is_err());
        assert!("noisy:-1".parse::<OracleSpec>().is_err());
        assert!("oracle".parse::<OracleSpec>().is_err());
        assert!("sgd".parse::<ForecasterKind>().is_err());
    }

    #[test]
    fn label_streams() {
        let draw = |spec: &LabelSpec, seed, n| {
            let mut src = make_label_stream(spec, seed).unwrap();
            (0..n).map(|_| src.draw().unwrap().as_u8()).collect::<Vec<_>>()
        };
        let b = LabelSpec::Bernoulli(0.5);
        assert_eq!(draw(&b, 3, 200), draw(&b, 3, 200));
        assert_ne!(draw(&b, 3, 200), draw(&b, 4, 200));
        assert!(draw(&LabelSpec::Bernoulli(0.0), 1, 100).iter().all(|&y| y == 0));
        // rains once every two days
        let p = LabelSpec::Periodic(vec![Label::Zero, Label::One]);
        assert_eq!(draw(&p, 0, 6), vec![0, 1, 0, 1, 0, 1]);
        assert!(make_label_stream(&LabelSpec::Bernoulli(2.0), 0).is_err());
        assert!(make_label_stream(&LabelSpec::Periodic(vec![]), 0).is_err());
        let mut adv = make_label_stream(&LabelSpec::AdversarialGreedy, 0).unwrap();
        assert_eq!(adv.draw(), None);
    }

    #[test]
    fn oracles() {
        let mut o = make_oracle(OracleSpec::ClairvoyantShrunk(0.2), 0).unwrap();
        assert_abs_diff_eq!(o.predict(Some(0.5), Some(Label::One)).unwrap(), 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(o.predict(Some(0.5), Some(Label::Zero)).unwrap(), 0.2, epsilon = 1e-15);
        let mut perfect = make_oracle(OracleSpec::ClairvoyantShrunk(0.0), 0).unwrap();
        assert_eq!(perfect.predict(None, Some(Label::One)).unwrap(), 1.0);
        let mut c = make_oracle(OracleSpec::Constant(0.5), 0).unwrap();
        assert_eq!(c.predict(None, Some(Label::One)).unwrap(), 0.5);
        let mut truth = make_oracle(OracleSpec::Truth, 0).unwrap();
        assert_eq!(truth.predict(Some(0.3), None).unwrap(), 0.3);
        assert!(truth.predict(None, None).is_err());
        let mut noisy = make_oracle(OracleSpec::NoisyTruth(0.3), 9).unwrap();
        let qs: Vec<f64> = (0..500).map(|_| noisy.predict(Some(0.5), None).unwrap()).collect();
        assert!(qs.iter().all(|q| (0.0..=1.0).contains(q)));
        assert!(qs.iter().any(|&q| q != 0.5));
        let mut noiseless = make_oracle(OracleSpec::NoisyTruth(0.0), 9).unwrap();
        assert_eq!(noiseless.predict(Some(0.25), None).unwrap(), 0.25);
        assert!(make_oracle(OracleSpec::Constant(1.5), 0).is_err());
    }

    #[test]
    fn adversary_examples() {
        let game = GameConfig::new(4, ScoringRule::brier()).unwrap();
        let cum = PayoffVector::zeros(4);
        assert_eq!(adversary_label(&game, &ForecastDistribution::Point(0), 0.0, &cum, 0), Label::One);
        // nothing can leave the target set: tie goes to y = 1
        let tiny = GameConfig::new(4, ScoringRule::brier()).unwrap();
        let d = ForecastDistribution::Pair { lo: 2, hi: 3, w_lo: 0.5, w_hi: 0.5 };
        let big = PayoffVector { cal: vec![0.0; 5], reg: -1000.0 };
        let y = adversary_label(&tiny, &d, 0.5, &big, 1_000_000);
        let dist = |y: Label| {
            let mut c = big.clone();
            c.add_sparse(&d.payoff(&tiny, 0.5, y));
            dist_to_target(&tiny, &c.scaled(1.0 / 1_000_001.0))
        };
        assert_eq!(dist(Label::Zero), dist(Label::One));
        assert_eq!(y, Label::One);
    }

    #[test]
    fn adversary_picks_the_worse_label() {
        let game = GameConfig::new(6, ScoringRule::brier()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..500 {
            let cum = PayoffVector {
                cal: (0..7).map(|_| rng.random_range(-3.0..3.0)).collect(),
                reg: rng.random_range(-3.0..3.0),
            };
            let lo = rng.random_range(0..6);
            let w: f64 = rng.random();
            let d = ForecastDistribution::Pair { lo, hi: lo + 1, w_lo: w, w_hi: 1.0 - w };
            let q: f64 = rng.random();
            let t = 10;
            let chosen = adversary_label(&game, &d, q, &cum, t);
            let dist = |y: Label| {
                let mut c = cum.clone();
                c.add_sparse(&d.payoff(&game, q, y));
                dist_to_target(&game, &c.scaled(1.0 / 11.0))
            };
            let other = if chosen == Label::One { Label::Zero } else { Label::One };
            assert!(dist(chosen) >= dist(other) - 1e-12);
        }
    }

    #[test]
    fn passthrough_on_grid_has_zero_regret() {
        let cfg = ExperimentConfig {
            forecaster: ForecasterKind::Passthrough,
            oracle: OracleSpec::Truth,
            labels: LabelSpec::Bernoulli(0.25),
            ..base()
        };
        let trace = run_experiment(&cfg).unwrap();
        assert_eq!(trace.metrics.average_regret, 0.0);
        assert!(trace.rows.iter().all(|r| r.p == 0.25 && r.q == 0.25));
    }

    #[test]
    fn traces_are_deterministic() {
        for kind in [ForecasterKind::Approach, ForecasterKind::Mw] {
            let cfg = ExperimentConfig { forecaster: kind, ..base() };
            let a = run_experiment(&cfg).unwrap();
            let b = run_experiment(&cfg).unwrap();
            assert_eq!(a.rows, b.rows);
            assert_eq!(a.checkpoints, b.checkpoints);
            let c = run_experiment(&ExperimentConfig { seed: 8, ..cfg }).unwrap();
            assert_ne!(a.rows, c.rows);
        }
    }

    #[test]
    fn trace_shape() {
        let cfg = ExperimentConfig { horizon: 100, ..base() };
        let trace = run_experiment(&cfg).unwrap();
        assert_eq!(trace.rows.len(), 100);
        let ts: Vec<u64> = trace.checkpoints.iter().map(|c| c.t).collect();
        assert_eq!(ts, vec![1, 2, 4, 8, 16, 32, 64, 100]);
        assert_eq!(trace.stats.t(), 100);
        assert!(trace.rows.windows(2).all(|w| w[0].t + 1 == w[1].t));
        let light = run_experiment_with(&cfg, false).unwrap();
        assert!(light.rows.is_empty());
        assert_eq!(light.metrics, trace.metrics);
    }

    #[test]
    fn harness_ledger_matches_recalibrator() {
        let cfg = ExperimentConfig { labels: LabelSpec::AdversarialGreedy, oracle: OracleSpec::Constant(0.3), ..base() };
        let game = cfg.validate().unwrap();
        let trace = run_experiment(&cfg).unwrap();
        // replay through a bare recalibrator with the same generator stream
        let mut state = RecalibratorState::with_rng(game.clone(), stream_rng(cfg.seed, FORECASTER_STREAM));
        for row in &trace.rows {
            let pred = state.predict(row.q).unwrap();
            assert_eq!(pred.p, row.p);
            state.observe(row.q, Label::from_u8(row.y).unwrap()).unwrap();
        }
        for (a, b) in state.cum_payoff().to_vec().iter().zip(trace.cum_payoff.to_vec()) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn validation_errors() {
        let bad_m = ExperimentConfig { resolution: Resolution::Grid(1), ..base() };
        assert!(bad_m.validate().unwrap_err().to_string().contains("= 3"));
        let bad_x = ExperimentConfig { resolution: Resolution::Exponent(0.5), ..base() };
        assert!(bad_x.validate().is_err());
        let clair_adv = ExperimentConfig { labels: LabelSpec::AdversarialGreedy, ..base() };
        assert!(clair_adv.validate().is_err());
        let truth_adv = ExperimentConfig { labels: LabelSpec::AdversarialGreedy, oracle: OracleSpec::Truth, ..base() };
        assert!(truth_adv.validate().is_err());
        let zero_t = ExperimentConfig { horizon: 0, ..base() };
        assert!(zero_t.validate().is_err());
        let mw_short = ExperimentConfig { forecaster: ForecasterKind::Mw, resolution: Resolution::Grid(20), horizon: 10, ..base() };
        assert!(mw_short.validate().is_err());
        // passthrough has no lower bound on m
        let pass = ExperimentConfig { forecaster: ForecasterKind::Passthrough, resolution: Resolution::Grid(1), ..base() };
        assert!(pass.validate().is_ok());
    }

    #[test]
    fn exponent_resolution() {
        assert!(validate_exponent(0.3333).is_ok());
        assert!(validate_exponent(0.5).is_err());
        assert!(validate_exponent(0.3).is_err());
        assert_abs_diff_eq!(parse_exponent("1/3").unwrap(), 1.0 / 3.0);
        assert_abs_diff_eq!(parse_exponent("0.4").unwrap(), 0.4);
        assert!(parse_exponent("x").is_err());
        assert_eq!(resolution_for_exponent(1 << 15, 1.0 / 3.0), 32);
        assert_eq!(resolution_for_exponent(1024, 1.0 / 3.0), 11);
        assert_eq!(resolution_for_exponent(1024, 0.4), 4);
        assert_eq!(theoretical_slopes(1.0 / 3.0), (1.0 / 3.0 * 2.0 - 1.0, -1.0 / 3.0));
        let (c, r) = theoretical_slopes(0.4);
        assert_abs_diff_eq!(c, -0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(r, -0.4, epsilon = 1e-15);
    }

    #[test]
    fn loglog_fit_examples() {
        let pts: Vec<(f64, f64)> = (10..=16).map(|k| {
            let t = (1u64 << k) as f64;
            (t, 3.0 * t.powf(-0.5))
        }).collect();
        let fit = fit_loglog_slope(&pts).unwrap();
        assert_abs_diff_eq!(fit.slope, -0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.intercept, 3f64.ln(), epsilon = 1e-10);
        assert_abs_diff_eq!(fit.r_squared, 1.0, epsilon = 1e-12);

        let flat: Vec<(f64, f64)> = [10.0, 100.0, 1000.0].iter().map(|&t| (t, 0.7)).collect();
        let fit = fit_loglog_slope(&flat).unwrap();
        assert_abs_diff_eq!(fit.slope, 0.0, epsilon = 1e-12);

        let cube: Vec<(f64, f64)> = (10..=16).map(|k| {
            let t = (1u64 << k) as f64;
            (t, t.powf(-1.0 / 3.0))
        }).collect();
        assert_abs_diff_eq!(fit_loglog_slope(&cube).unwrap().slope, -1.0 / 3.0, epsilon = 1e-12);

        assert!(fit_loglog_slope(&[(1.0, 1.0), (2.0, 1.0)]).is_err());
        assert!(fit_loglog_slope(&[(1.0, 1.0), (2.0, 0.0), (3.0, 1.0)]).is_err());
    }

    #[test]
    fn sweep_means_match_manual_aggregation() {
        let cfg = ExperimentConfig { horizon: 0, ..base() };
        let grid = [64u64, 128, 256];
        let summary = sweep(&cfg, &grid, 4, Execution::parallel()).unwrap();
        assert_eq!(summary.rows.len(), 3);
        for (row, &t) in summary.rows.iter().zip(&grid) {
            let runs: Vec<RunMetrics> = (0..4)
                .map(|s| run_experiment(&ExperimentConfig { horizon: t, seed: 7 + s, ..cfg.clone() }).unwrap().metrics)
                .collect();
            let mean = runs.iter().map(|r| r.recalibration_rate).sum::<f64>() / 4.0;
            assert_abs_diff_eq!(row.mean_recal_rate, mean, epsilon = 1e-12);
            let mean = runs.iter().map(|r| r.average_regret).sum::<f64>() / 4.0;
            assert_abs_diff_eq!(row.mean_regret, mean, epsilon = 1e-12);
            assert_eq!(row.t, t);
        }
        let seq = sweep(&cfg, &grid, 4, Execution::Sequential).unwrap();
        assert_eq!(seq.rows, summary.rows);
        assert!(sweep(&cfg, &[], 4, Execution::Sequential).is_err());
    }

    #[test]
    fn sweep_in_exponent_mode_derives_m() {
        let cfg = ExperimentConfig { resolution: Resolution::Exponent(0.4), ..base() };
        let summary = sweep(&cfg, &[1024, 4096], 2, Execution::Sequential).unwrap();
        assert_eq!(summary.rows[0].m, 4);
        assert_eq!(summary.rows[1].m, 6);
    }
}
