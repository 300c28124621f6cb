//! Scenario orchestration: truth simulation for several targets, policy
//! driven measurement attempts, filtering and metric logging.
//!
//! Every random quantity comes from a stream keyed by the scenario seed, the
//! target index and its purpose, and channel and noise draws are consumed in
//! every slot whether or not they are used. Two runs that differ only in
//! their policy therefore see the same trajectories, channel realisations
//! and measurement noise.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::filter::{self, FilterOptions, FilterState};
use crate::model::{
    check_probability, generate_trajectory, measure, InputMode, ModelParams, Observation, TargetState,
    TrajectoryConfig,
};
use crate::policy::{self, ConvergenceLog, Policy, PsoConfig};
use crate::riccati::{estimate_critical_lambda, spectral_radius};
use crate::rng::{self, Purpose, StreamRng};
use crate::schedule::{compile_schedule, euclidean_pattern, leading_offset, pattern_cost, Schedule};
use crate::{Error, Result};

fn default_dims() -> usize {
    3
}

fn default_p0_scale() -> f64 {
    10.0
}

/// Serializable description of a target's motion model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// Constant velocity in `dims` axes with `Q = q·I` and `R = r·I`.
    ConstantVelocity {
        #[serde(default = "default_dims")]
        dims: usize,
        dt: f64,
        q: f64,
        r: f64,
    },
    /// Row-major matrices.
    Explicit {
        dt: f64,
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        c: Vec<Vec<f64>>,
        q: Vec<Vec<f64>>,
        r: Vec<Vec<f64>>,
    },
}

fn matrix(rows: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>> {
    let ncols = rows.first().map(Vec::len).unwrap_or(0);
    if rows.is_empty() || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::invalid(format!("matrix {name} must be non-empty and rectangular")));
    }
    Ok(DMatrix::from_row_iterator(rows.len(), ncols, rows.iter().flatten().copied()))
}

impl ModelSpec {
    pub fn build(&self) -> Result<ModelParams> {
        match self {
            ModelSpec::ConstantVelocity { dims, dt, q, r } => ModelParams::constant_velocity(*dims, *dt, *q, *r),
            ModelSpec::Explicit { dt, a, b, c, q, r } => ModelParams::new(
                *dt,
                matrix(a, "a")?,
                matrix(b, "b")?,
                matrix(c, "c")?,
                matrix(q, "q")?,
                matrix(r, "r")?,
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub model: ModelSpec,
    /// Channel success probability `λ_i`.
    pub lambda: f64,
    #[serde(default)]
    pub input: InputMode,
    /// Whether the filter is given the true input. When false it predicts
    /// with `u = 0`.
    #[serde(default)]
    pub known_input: bool,
    /// Initial truth state; zeros when absent.
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    #[serde(default = "default_p0_scale")]
    pub p0_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicyMode {
    /// `α_i = M/N`.
    Uniform,
    /// `α` uniform on the simplex scaled to `M`; `draw` selects one of the
    /// independent draws for the scenario seed.
    Random { draw: u64 },
    /// The particle swarm runs online, interleaved with the filters.
    Pso,
    Fixed { alpha: Vec<f64> },
    /// An explicit `N × T` attempt matrix of zeros and ones, repeated every
    /// cycle.
    Explicit { rows: Vec<Vec<u8>> },
}

/// How a probability vector turns into per-slot attempts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttemptMode {
    /// Independent Bernoulli(`α_i`) attempts in every slot.
    #[default]
    Bernoulli,
    /// A compiled attempt matrix, recompiled at the start of every cycle.
    Scheduled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub targets: Vec<TargetSpec>,
    /// Instruments per slot, `M`.
    pub instruments: usize,
    /// Cycle length `T` of compiled schedules.
    pub cycle_len: usize,
    pub horizon: usize,
    pub policy: PolicyMode,
    #[serde(default)]
    pub attempts: AttemptMode,
    pub seed: u64,
    /// Lower bound applied to every target's critical probability.
    #[serde(default)]
    pub lambda_c_floor: f64,
    #[serde(default)]
    pub filter: FilterOptions,
    #[serde(default)]
    pub pso: PsoConfig,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.targets.len();
        if n == 0 {
            return Err(Error::invalid("scenario needs at least one target"));
        }
        if self.instruments == 0 || self.instruments > n {
            return Err(Error::invalid(format!(
                "instrument count must lie in [1, {n}], got {}",
                self.instruments
            )));
        }
        if self.cycle_len == 0 || self.horizon < self.cycle_len {
            return Err(Error::invalid(format!(
                "need horizon >= cycle_len >= 1, got horizon {} and cycle_len {}",
                self.horizon, self.cycle_len
            )));
        }
        check_probability(self.lambda_c_floor, "lambda_c_floor")?;
        for (i, t) in self.targets.iter().enumerate() {
            check_probability(t.lambda, &format!("targets[{i}].lambda"))?;
            if !(t.p0_scale >= 0.0) || !t.p0_scale.is_finite() {
                return Err(Error::invalid(format!("targets[{i}].p0_scale must be non-negative")));
            }
        }
        if let PolicyMode::Explicit { rows } = &self.policy {
            if rows.len() != n || rows.iter().any(|r| r.len() != self.cycle_len) {
                return Err(Error::invalid(format!(
                    "explicit attempt matrix must be {n} x {}",
                    self.cycle_len
                )));
            }
            if rows.iter().flatten().any(|b| *b > 1) {
                return Err(Error::invalid("explicit attempt matrix entries must be 0 or 1"));
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.targets.len()
    }

    pub fn budget(&self) -> f64 {
        self.instruments as f64
    }

    pub fn models(&self) -> Result<Vec<ModelParams>> {
        self.targets.iter().map(|t| t.model.build()).collect()
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.targets.iter().map(|t| t.lambda).collect()
    }

    /// `λ_c,i`: zero for dynamics with spectral radius at most one, otherwise
    /// the upper end of the bisection bracket; never below `lambda_c_floor`.
    pub fn critical_lambdas(&self, models: &[ModelParams]) -> Result<Vec<f64>> {
        models
            .iter()
            .map(|m| {
                let estimate = if spectral_radius(m.a()) <= 1.0 + 1e-12 {
                    0.0
                } else {
                    estimate_critical_lambda(m.a(), m.c(), m.q(), m.r(), 1e-3)?.upper
                };
                Ok(estimate.max(self.lambda_c_floor))
            })
            .collect()
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn with_policy(&self, policy: PolicyMode) -> Self {
        Self {
            policy,
            ..self.clone()
        }
    }

    /// Same scenario with every target's channel probability set to `lambda`.
    pub fn with_lambda(&self, lambda: f64) -> Self {
        let mut out = self.clone();
        for t in &mut out.targets {
            t.lambda = lambda;
        }
        out
    }
}

/// Outcome of one target in one slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlotOutcome {
    pub beta: bool,
    pub gamma: bool,
    pub trace_p: f64,
    pub sq_error: f64,
    pub pos_sq_error: f64,
}

/// Truth, filter and random streams of one target.
pub(crate) struct TargetRun {
    params: ModelParams,
    lambda: f64,
    known_input: bool,
    truth: Vec<(TargetState, DVector<f64>)>,
    filter: FilterState,
    channel: StreamRng,
    noise: StreamRng,
    attempt: StreamRng,
}

impl TargetRun {
    fn new(spec: &TargetSpec, params: ModelParams, horizon: usize, seed: u64, index: u64) -> Result<Self> {
        let n = params.state_dim();
        let x0 = match &spec.x0 {
            Some(v) if v.len() == n => TargetState::new(DVector::from_column_slice(v))?,
            Some(v) => {
                return Err(Error::invalid(format!(
                    "targets[{index}].x0 has length {}, expected {n}",
                    v.len()
                )))
            }
            None => TargetState::zeros(n),
        };
        let traj = TrajectoryConfig {
            horizon,
            input: spec.input.clone(),
            seed: rng::derive_seed(seed, index),
        };
        let truth = generate_trajectory(&params, &traj, &x0)?;
        let mut init_rng = rng::stream(seed, index, Purpose::Initial);
        let first_fix = measure(&params, &x0, &mut init_rng);
        let filter = FilterState::initial(&params, Some(&first_fix), spec.p0_scale);
        Ok(Self {
            params,
            lambda: spec.lambda,
            known_input: spec.known_input,
            truth,
            filter,
            channel: rng::stream(seed, index, Purpose::Channel),
            noise: rng::stream(seed, index, Purpose::MeasurementNoise),
            attempt: rng::stream(seed, index, Purpose::Attempt),
        })
    }

    fn step(&mut self, k: usize, beta: bool, options: FilterOptions) -> Result<SlotOutcome> {
        let (truth, u) = &self.truth[k];
        let arrived = self.channel.random::<f64>() < self.lambda;
        let y = measure(&self.params, truth, &mut self.noise);
        let gamma = beta && arrived;
        let obs = if gamma { Observation::received(y) } else { Observation::lost() };
        let input = if self.known_input {
            u.clone()
        } else {
            DVector::zeros(self.params.input_dim())
        };
        let (next, _) = filter::step(&self.params, &self.filter, &input, &obs, options)?;
        self.filter = next;
        Ok(SlotOutcome {
            beta,
            gamma,
            trace_p: self.filter.trace(),
            sq_error: filter::squared_error(truth, &self.filter),
            pos_sq_error: filter::position_squared_error(&self.params, truth, &self.filter),
        })
    }
}

/// All targets of one scenario realisation, advanced slot by slot.
pub(crate) struct Engine {
    runs: Vec<TargetRun>,
    options: FilterOptions,
}

impl Engine {
    pub(crate) fn new(config: &ScenarioConfig, models: Vec<ModelParams>) -> Result<Self> {
        let runs = config
            .targets
            .iter()
            .zip(models)
            .enumerate()
            .map(|(i, (spec, m))| TargetRun::new(spec, m, config.horizon, config.seed, i as u64))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            runs,
            options: config.filter,
        })
    }

    /// One uniform per target for Bernoulli attempt decisions. Drawn every
    /// slot in every mode.
    pub(crate) fn attempt_uniforms(&mut self) -> Vec<f64> {
        self.runs.iter_mut().map(|r| r.attempt.random::<f64>()).collect()
    }

    pub(crate) fn step(&mut self, k: usize, attempts: &[bool]) -> Result<Vec<SlotOutcome>> {
        let options = self.options;
        self.runs
            .iter_mut()
            .zip(attempts)
            .map(|(r, &beta)| r.step(k, beta, options))
            .collect()
    }

    pub(crate) fn filter_states(&self) -> Vec<&FilterState> {
        self.runs.iter().map(|r| &r.filter).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlotRecord {
    /// Slot index, starting at 1 for the first filtered slot.
    pub k: usize,
    pub target: usize,
    pub beta: bool,
    pub gamma: bool,
    pub trace_p: f64,
    /// `|x_i − x̂_i|² / N`.
    pub mse_contrib: f64,
    pub sq_error: f64,
    pub pos_sq_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mean_mse: f64,
    pub mean_position_mse: f64,
    pub accumulated_trace: f64,
    pub attempts: usize,
    pub successes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsLog {
    pub seed: u64,
    pub targets: usize,
    /// Slot-major, target-minor.
    pub records: Vec<SlotRecord>,
    /// `MSE(k) = Σ_i |x_i[k] − x̂_i[k]|² / N`.
    pub mse: Vec<f64>,
    pub position_mse: Vec<f64>,
    pub summary: RunSummary,
    /// The policy in force at the end of the run, when there is one.
    pub policy: Option<Policy>,
    pub convergence: Option<ConvergenceLog>,
}

impl MetricsLog {
    pub fn horizon(&self) -> usize {
        self.mse.len()
    }

    pub fn record(&self, k: usize, target: usize) -> &SlotRecord {
        &self.records[(k - 1) * self.targets + target]
    }

    /// `MSE(k)` recomputed from the per-target squared errors.
    pub fn recomputed_mse(&self, k: usize) -> f64 {
        (0..self.targets).map(|i| self.record(k, i).sq_error).sum::<f64>() / self.targets as f64
    }
}

pub(crate) struct LogBuilder {
    seed: u64,
    n: usize,
    records: Vec<SlotRecord>,
    mse: Vec<f64>,
    position_mse: Vec<f64>,
}

impl LogBuilder {
    pub(crate) fn new(seed: u64, n: usize, horizon: usize) -> Self {
        Self {
            seed,
            n,
            records: Vec::with_capacity(n * horizon),
            mse: Vec::with_capacity(horizon),
            position_mse: Vec::with_capacity(horizon),
        }
    }

    pub(crate) fn push(&mut self, outcomes: &[SlotOutcome]) {
        let k = self.mse.len() + 1;
        let n = self.n as f64;
        for (target, o) in outcomes.iter().enumerate() {
            self.records.push(SlotRecord {
                k,
                target,
                beta: o.beta,
                gamma: o.gamma,
                trace_p: o.trace_p,
                mse_contrib: o.sq_error / n,
                sq_error: o.sq_error,
                pos_sq_error: o.pos_sq_error,
            });
        }
        self.mse.push(outcomes.iter().map(|o| o.sq_error).sum::<f64>() / n);
        self.position_mse.push(outcomes.iter().map(|o| o.pos_sq_error).sum::<f64>() / n);
    }

    pub(crate) fn finish(self, policy: Option<Policy>, convergence: Option<ConvergenceLog>) -> MetricsLog {
        let horizon = self.mse.len().max(1) as f64;
        let summary = RunSummary {
            mean_mse: self.mse.iter().sum::<f64>() / horizon,
            mean_position_mse: self.position_mse.iter().sum::<f64>() / horizon,
            accumulated_trace: self.records.iter().map(|r| r.trace_p).sum(),
            attempts: self.records.iter().filter(|r| r.beta).count(),
            successes: self.records.iter().filter(|r| r.gamma).count(),
        };
        MetricsLog {
            seed: self.seed,
            targets: self.n,
            records: self.records,
            mse: self.mse,
            position_mse: self.position_mse,
            summary,
            policy,
            convergence,
        }
    }
}

/// `α` uniform on `{α ≥ 0, Σα = M}` restricted to `α_i ≤ 1`, drawn from the
/// scenario seed's `draw`-th policy stream.
pub fn random_policy(n: usize, budget: f64, seed: u64, draw: u64) -> Result<Policy> {
    if n == 0 {
        return Err(Error::invalid("policy needs at least one target"));
    }
    let mut rng = rng::stream(seed, draw, Purpose::Policy);
    for _ in 0..10_000 {
        let e: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
        let total: f64 = e.iter().sum();
        let alpha: Vec<f64> = e.iter().map(|x| x / total * budget.min(n as f64)).collect();
        if alpha.iter().all(|a| *a <= 1.0) {
            return Policy::new(alpha, budget);
        }
    }
    Err(Error::invalid("could not draw a random policy inside the unit box"))
}

/// The fixed policy a non-swarm mode runs with, checked against the floors.
pub fn resolve_policy(config: &ScenarioConfig, models: &[ModelParams]) -> Result<Option<Policy>> {
    let n = config.n();
    let budget = config.budget();
    let policy = match &config.policy {
        PolicyMode::Uniform => Policy::uniform(n, budget)?,
        PolicyMode::Random { draw } => random_policy(n, budget, config.seed, *draw)?,
        PolicyMode::Fixed { alpha } => {
            if alpha.len() != n {
                return Err(Error::invalid(format!("fixed alpha has {} entries for {n} targets", alpha.len())));
            }
            Policy::new(alpha.clone(), budget)?
        }
        PolicyMode::Pso | PolicyMode::Explicit { .. } => return Ok(None),
    };
    let lambdas = config.lambdas();
    let lambda_c = config.critical_lambdas(models)?;
    if !policy.meets_floors(&lambdas, &lambda_c) {
        let required: f64 = policy::floors(&lambdas, &lambda_c, f64::INFINITY)
            .map(|f| f.iter().sum())
            .unwrap_or(f64::INFINITY);
        return Err(Error::Infeasible {
            required,
            budget,
            deficit: (required - budget).max(0.0),
        });
    }
    Ok(Some(policy))
}

/// Runs one scenario realisation under its policy mode.
pub fn run_scenario(config: &ScenarioConfig) -> Result<MetricsLog> {
    config.validate()?;
    if let PolicyMode::Pso = config.policy {
        return policy::run_online(config).map(|(_, _, log)| log);
    }
    let models = config.models()?;
    let n = config.n();
    let policy = resolve_policy(config, &models)?;
    let fixed_schedule = match &config.policy {
        PolicyMode::Explicit { rows } => {
            let rows = rows.iter().map(|r| r.iter().map(|b| *b == 1).collect()).collect();
            Some(Schedule::from_rows(rows, config.instruments)?)
        }
        _ => None,
    };
    let mut engine = Engine::new(config, models)?;
    let mut log = LogBuilder::new(config.seed, n, config.horizon);
    let mut cycle: Option<Schedule> = fixed_schedule.clone();
    for k in 0..config.horizon {
        let u = engine.attempt_uniforms();
        let slot = k % config.cycle_len;
        let attempts: Vec<bool> = match (&fixed_schedule, config.attempts, &policy) {
            (Some(s), _, _) => (0..n).map(|i| s.attempt(i, slot)).collect(),
            (None, AttemptMode::Scheduled, Some(p)) => {
                if slot == 0 {
                    cycle = Some(compile_schedule(p, config.cycle_len)?);
                }
                let s = cycle.as_ref().expect("compiled at slot 0");
                (0..n).map(|i| s.attempt(i, slot)).collect()
            }
            (None, AttemptMode::Bernoulli, Some(p)) => u.iter().zip(p.alpha()).map(|(u, a)| u < a).collect(),
            (None, _, None) => unreachable!("every non-swarm mode resolves a policy or a schedule"),
        };
        log.push(&engine.step(k, &attempts)?);
    }
    Ok(log.finish(policy, None))
}

/// Run the same scenario over several seeds in parallel. Results are in
/// seed order.
pub fn run_seeds(config: &ScenarioConfig, seeds: &[u64]) -> Result<Vec<MetricsLog>> {
    seeds.par_iter().map(|&s| run_scenario(&config.with_seed(s))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternVariant {
    /// All attempts at the start of the cycle.
    Front,
    /// All attempts at the end of the cycle.
    Back,
    /// The Euclidean pattern.
    Even,
}

impl PatternVariant {
    pub const ALL: [PatternVariant; 3] = [PatternVariant::Front, PatternVariant::Back, PatternVariant::Even];

    pub fn name(self) -> &'static str {
        match self {
            PatternVariant::Front => "front",
            PatternVariant::Back => "back",
            PatternVariant::Even => "even",
        }
    }
}

/// The attempt row of a variant with `round(αT)` attempts.
pub fn variant_pattern(variant: PatternVariant, alpha: f64, t: usize) -> Result<Vec<bool>> {
    check_probability(alpha, "alpha")?;
    let ones = (alpha * t as f64).round() as usize;
    Ok(match variant {
        PatternVariant::Front => (0..t).map(|s| s < ones).collect(),
        PatternVariant::Back => (0..t).map(|s| s >= t - ones).collect(),
        PatternVariant::Even => {
            let even = euclidean_pattern(alpha, t, leading_offset(alpha))?;
            if even.iter().filter(|b| **b).count() == ones {
                even
            } else {
                euclidean_pattern(ones as f64 / t as f64, t, leading_offset(ones as f64 / t as f64))?
            }
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternSummary {
    pub variant: PatternVariant,
    pub mean: f64,
    pub std_dev: f64,
    pub min: f64,
    pub max: f64,
    pub replicates: usize,
}

/// Random initial covariance `diag(10^u)` with `u ~ U(−1, 2)`.
pub fn random_initial_covariance<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_fn(dim, |_, _| 10f64.powf(rng.random_range(-1.0..2.0))))
}

/// Accumulated trace of each variant's pattern on target 0 of `config`
/// over one cycle, across `replicates` random initial covariances. All
/// variants share each replicate's covariance and channel realisation.
pub fn compare_patterns(
    config: &ScenarioConfig,
    alpha: f64,
    variants: &[PatternVariant],
    replicates: usize,
) -> Result<Vec<PatternSummary>> {
    config.validate()?;
    if replicates == 0 {
        return Err(Error::invalid("compare_patterns needs at least one replicate"));
    }
    let model = config.targets[0].model.build()?;
    let lambda = config.targets[0].lambda;
    let t = config.cycle_len;
    let patterns = variants
        .iter()
        .map(|v| variant_pattern(*v, alpha, t))
        .collect::<Result<Vec<_>>>()?;
    let costs: Vec<Vec<f64>> = (0..replicates)
        .into_par_iter()
        .map(|rep| {
            let mut rng = rng::stream(config.seed, rep as u64, Purpose::Covariance);
            let p0 = random_initial_covariance(model.state_dim(), &mut rng);
            let channel_seed = rng::derive_seed(config.seed, rep as u64);
            patterns
                .iter()
                .map(|p| pattern_cost(&model, lambda, p, &p0, 1, channel_seed))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(variants
        .iter()
        .enumerate()
        .map(|(j, v)| {
            let xs: Vec<f64> = costs.iter().map(|c| c[j]).collect();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let var = if xs.len() > 1 {
                xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
            } else {
                0.0
            };
            PatternSummary {
                variant: *v,
                mean,
                std_dev: var.sqrt(),
                min: xs.iter().copied().fold(f64::INFINITY, f64::min),
                max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                replicates,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub mean_mse: f64,
    pub mean_position_mse: f64,
    pub seeds: Vec<u64>,
    pub per_seed_mse: Vec<f64>,
    pub per_seed_position_mse: Vec<f64>,
}

/// `run_scenario` for every `λ` (applied to all targets) over the seeds
/// `config.seed, config.seed + 1, …`. The same seeds are used for every `λ`.
pub fn sweep_lambda(config: &ScenarioConfig, lambdas: &[f64], seeds: usize) -> Result<Vec<SweepRow>> {
    if seeds == 0 {
        return Err(Error::invalid("sweep needs at least one seed"));
    }
    let seed_list: Vec<u64> = (0..seeds as u64).map(|s| config.seed.wrapping_add(s)).collect();
    lambdas
        .iter()
        .map(|&lambda| {
            let logs = run_seeds(&config.with_lambda(lambda), &seed_list)?;
            let per_seed_mse: Vec<f64> = logs.iter().map(|l| l.summary.mean_mse).collect();
            let per_seed_position_mse: Vec<f64> = logs.iter().map(|l| l.summary.mean_position_mse).collect();
            Ok(SweepRow {
                lambda,
                mean_mse: per_seed_mse.iter().sum::<f64>() / seeds as f64,
                mean_position_mse: per_seed_position_mse.iter().sum::<f64>() / seeds as f64,
                seeds: seed_list.clone(),
                per_seed_mse,
                per_seed_position_mse,
            })
        })
        .collect()
}

/// Capacity check of an attempt log: at most `capacity` attempts per slot.
pub fn attempts_within_capacity(log: &MetricsLog, capacity: usize) -> bool {
    (1..=log.horizon()).all(|k| (0..log.targets).filter(|&i| log.record(k, i).beta).count() <= capacity)
}

/// Per-cycle attempt rates of every target, for comparing a log with the
/// schedule invariants.
pub fn cycle_rates(log: &MetricsLog, cycle_len: usize) -> Vec<Vec<f64>> {
    let cycles = log.horizon() / cycle_len;
    (0..cycles)
        .map(|c| {
            (0..log.targets)
                .map(|i| {
                    (1..=cycle_len).filter(|s| log.record(c * cycle_len + s, i).beta).count() as f64 / cycle_len as f64
                })
                .collect()
        })
        .collect()
}
