//! Particle swarm search over the policy.
//!
//! Each particle carries a hypothesis about every target's channel success
//! probability and noise covariances, and runs the modified Riccati
//! recursion under that hypothesis. Hypotheses are scored by how well their
//! traces track the live filters' covariance traces; the model of the best
//! scoring particle then prices candidate policies by the steady-state
//! expected trace `Σ_i h_i(α_i·λ̂_i)`, and each particle's `α` is moved
//! towards the best-priced policies.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{fill_from_floors, fitness, floors, project, Policy};
use crate::filter::FilterState;
use crate::riccati::{solve_fixed_point_with, FixedPointOptions, MareProblem};
use crate::rng::{self, Purpose, StreamRng};
use crate::schedule::compile_schedule;
use crate::sim::{AttemptMode, Engine, LogBuilder, MetricsLog, ScenarioConfig};
use crate::{Error, Result};

const BLOWUP: f64 = 1e12;
const MIN_LAMBDA: f64 = 1e-3;
const MIN_RATE: f64 = 0.01;

/// Observation rate used in a particle's own Riccati recursion.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MareRate {
    /// `α_i·λ⁽ᵖ⁾_i` with the policy currently applied to the targets.
    #[default]
    AppliedAlpha,
    /// `α⁽ᵖ⁾_i·λ⁽ᵖ⁾_i` with the particle's own policy.
    ParticleAlpha,
    /// `λ⁽ᵖ⁾_i` in slots where an attempt on target `i` was made and zero
    /// otherwise.
    Attempted,
    /// `λ⁽ᵖ⁾_i` alone.
    LambdaOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PsoConfig {
    pub particles: usize,
    pub inertia: f64,
    pub beta_local: f64,
    pub beta_global: f64,
    /// Exit once the global-best fitness drops below this; `1e-3·N` when
    /// absent.
    pub threshold: Option<f64>,
    pub max_iterations: usize,
    /// Flip the sign of the attraction terms so particles are pushed away
    /// from their bests.
    pub inverted_attraction: bool,
    pub seed: u64,
    pub mare_rate: MareRate,
    /// Hypothesised noise variances start log-uniform in this multiple of
    /// the nominal values and stay there.
    pub noise_range: [f64; 2],
    /// What the hypothesised traces are compared with: the live traces
    /// themselves or an average of them.
    pub trace_average: TraceAverage,
    /// Points on the log-spaced rate grid used to price policies.
    pub rate_grid: usize,
    /// Iterations during which particles only advance their Riccati
    /// iterates, before any fitness is recorded as a best.
    pub burn_in: usize,
    /// Re-score every stored best against the current traces each
    /// iteration instead of keeping the fitness it had when it was stored.
    pub rescore_bests: bool,
    /// When set, hypothesised channel probabilities are kept inside the
    /// Wilson score interval with this `z` around each target's observed
    /// arrival ratio. Needs the per-slot attempt and arrival flags.
    pub arrival_interval: Option<f64>,
}

impl Default for PsoConfig {
    fn default() -> Self {
        Self {
            particles: 30,
            inertia: 0.7,
            beta_local: 1.5,
            beta_global: 1.5,
            threshold: None,
            max_iterations: 500,
            inverted_attraction: false,
            seed: 0,
            mare_rate: MareRate::AppliedAlpha,
            noise_range: [0.01, 100.0],
            trace_average: TraceAverage::None,
            rate_grid: 24,
            burn_in: 0,
            rescore_bests: true,
            arrival_interval: None,
        }
    }
}

impl PsoConfig {
    fn validate(&self) -> Result<()> {
        if self.particles == 0 {
            return Err(Error::invalid("swarm needs at least one particle"));
        }
        if [self.inertia, self.beta_local, self.beta_global].iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("swarm coefficients must be finite"));
        }
        let [lo, hi] = self.noise_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::invalid("noise_range must satisfy 0 < lo <= hi"));
        }
        if let TraceAverage::Exponential { weight } = self.trace_average {
            if !(0.0..1.0).contains(&weight) {
                return Err(Error::invalid("exponential trace weight must lie in [0, 1)"));
            }
        }
        if self.arrival_interval.is_some_and(|z| !(z > 0.0 && z.is_finite())) {
            return Err(Error::invalid("arrival_interval must be a positive z value"));
        }
        if self.rate_grid < 2 {
            return Err(Error::invalid("rate_grid needs at least two points"));
        }
        Ok(())
    }
}

/// Averaging applied to the live covariance traces before they enter the
/// fitness. Averages start after the burn-in.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TraceAverage {
    #[default]
    None,
    /// `m ← w·m + (1 − w)·trace`.
    Exponential { weight: f64 },
    /// Running mean of every trace so far.
    Cumulative,
}

impl TraceAverage {
    /// Folds `new` into the running value `prev`, which has absorbed `count`
    /// traces. Non-finite entries of `prev` restart from `new`.
    fn apply(self, prev: Option<&[f64]>, new: &[f64], count: usize) -> Vec<f64> {
        let Some(prev) = prev else { return new.to_vec() };
        prev.iter()
            .zip(new)
            .map(|(&m, &l)| match self {
                _ if !m.is_finite() => l,
                TraceAverage::None => l,
                TraceAverage::Exponential { weight } => weight * m + (1.0 - weight) * l,
                TraceAverage::Cumulative => m + (l - m) / (count as f64 + 1.0),
            })
            .collect()
    }
}

/// Channel and noise hypothesis for one target. Noise covariances are
/// diagonal and stored as log-variances.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetHypothesis {
    pub lambda: f64,
    pub log_q: DVector<f64>,
    pub log_r: DVector<f64>,
}

impl TargetHypothesis {
    pub fn q(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.log_q.map(f64::exp))
    }

    pub fn r(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.log_r.map(f64::exp))
    }

    fn zeros_like(&self) -> Self {
        Self {
            lambda: 0.0,
            log_q: DVector::zeros(self.log_q.len()),
            log_r: DVector::zeros(self.log_r.len()),
        }
    }
}

/// Fixed description of one target as seen by the swarm.
#[derive(Debug, Clone, PartialEq)]
pub struct SwarmTarget {
    pub a: DMatrix<f64>,
    pub c: DMatrix<f64>,
    /// Nominal noise variances that hypotheses are scaled around.
    pub q_scale: DVector<f64>,
    pub r_scale: DVector<f64>,
    /// Lower bound on `α_i`.
    pub floor: f64,
    pub p0: DMatrix<f64>,
}

impl SwarmTarget {
    fn log_bounds(scale: &DVector<f64>, range: [f64; 2]) -> (DVector<f64>, DVector<f64>) {
        let base = scale.map(|s| s.max(1e-12).ln());
        (base.add_scalar(range[0].ln()), base.add_scalar(range[1].ln()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Particle {
    pub hypotheses: Vec<TargetHypothesis>,
    /// The particle's Riccati iterate for each target.
    pub covariances: Vec<DMatrix<f64>>,
    pub alpha: Vec<f64>,
    pub velocity: Vec<TargetHypothesis>,
    pub velocity_alpha: Vec<f64>,
    pub fitness: f64,
    pub best_fitness: f64,
    /// Iteration at which `best_fitness` was attained.
    pub best_time: usize,
    pub best_hypotheses: Vec<TargetHypothesis>,
    /// Riccati iterates run under `best_hypotheses`.
    pub best_covariances: Vec<DMatrix<f64>>,
    /// Hypothesised traces after the swarm's trace averaging, for the
    /// current and the best hypotheses.
    pub averaged: Option<Vec<f64>>,
    pub best_averaged: Option<Vec<f64>>,
    pub alpha_score: f64,
    pub best_alpha: Vec<f64>,
    pub best_alpha_score: f64,
}

impl Particle {
    /// A particle at rest with the given hypotheses and policy.
    pub fn new(hypotheses: Vec<TargetHypothesis>, covariances: Vec<DMatrix<f64>>, alpha: Vec<f64>) -> Self {
        let velocity = hypotheses.iter().map(TargetHypothesis::zeros_like).collect();
        Self {
            best_hypotheses: hypotheses.clone(),
            best_covariances: covariances.clone(),
            averaged: None,
            best_averaged: None,
            best_alpha: alpha.clone(),
            velocity_alpha: vec![0.0; alpha.len()],
            hypotheses,
            covariances,
            alpha,
            velocity,
            fitness: f64::INFINITY,
            best_fitness: f64::INFINITY,
            best_time: 0,
            alpha_score: f64::INFINITY,
            best_alpha_score: f64::INFINITY,
        }
    }
}

/// Steady-state expected filtered trace as a function of the observation
/// rate, tabulated on a log grid and interpolated in log-log space.
#[derive(Debug, Clone, PartialEq)]
struct TraceCurve {
    log_rates: Vec<f64>,
    log_traces: Vec<f64>,
}

impl TraceCurve {
    fn build(a: &DMatrix<f64>, c: &DMatrix<f64>, h: &TargetHypothesis, points: usize) -> Result<Self> {
        let base = MareProblem::new(a.clone(), c.clone(), h.q(), h.r(), 1.0)?;
        let n = base.dim();
        let opts = FixedPointOptions {
            tol: 1e-8,
            relative: true,
            max_iter: 20_000,
            blowup: BLOWUP,
        };
        let lo = MIN_RATE.ln();
        let log_rates: Vec<f64> = (0..points).map(|j| lo * (1.0 - j as f64 / (points - 1) as f64)).collect();
        let mut log_traces = vec![f64::INFINITY; points];
        let mut start = DMatrix::identity(n, n);
        for j in (0..points).rev() {
            let rate = log_rates[j].exp();
            let pr = base.with_lambda(rate.min(1.0))?;
            let sol = solve_fixed_point_with(&pr, &start, &opts);
            if !sol.converged {
                break;
            }
            log_traces[j] = pr.expected_posterior(&sol.p_star, pr.lambda)?.trace().ln();
            start = sol.p_star;
        }
        Ok(Self { log_rates, log_traces })
    }

    fn eval(&self, rate: f64) -> f64 {
        if !(rate > 0.0) {
            return f64::INFINITY;
        }
        let x = rate.min(1.0).ln();
        let last = self.log_rates.len() - 1;
        let j = self.log_rates[..last].iter().rposition(|r| *r <= x).unwrap_or(0);
        let (x0, x1) = (self.log_rates[j], self.log_rates[j + 1]);
        let (y0, y1) = (self.log_traces[j], self.log_traces[j + 1]);
        if !(y0.is_finite() && y1.is_finite()) {
            return f64::INFINITY;
        }
        (y0 + (y1 - y0) * (x - x0) / (x1 - x0)).exp()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwarmState {
    pub particles: Vec<Particle>,
    /// Particle holding the best hypothesis fitness, `bp`.
    pub best_particle: usize,
    /// `f_min`.
    pub best_fitness: f64,
    /// The policy applied to the targets: the best-priced `α` seen so far.
    pub alpha_best: Vec<f64>,
    pub alpha_best_score: f64,
    pub k: usize,
    pub converged: bool,
    pub threshold: f64,
    pub targets: Vec<SwarmTarget>,
    pub budget: f64,
    pub config: PsoConfig,
    floors: Vec<f64>,
    averaged: Option<Vec<f64>>,
    averaged_count: usize,
    curves: Vec<TraceCurve>,
    curves_key: Option<(usize, usize)>,
    attempted: Vec<usize>,
    received: Vec<usize>,
}

impl SwarmState {
    pub fn new(targets: Vec<SwarmTarget>, budget: f64, config: PsoConfig, particles: Vec<Particle>) -> Result<Self> {
        config.validate()?;
        if particles.is_empty() || targets.is_empty() {
            return Err(Error::invalid("swarm needs targets and particles"));
        }
        let floors: Vec<f64> = targets.iter().map(|t| t.floor).collect();
        let required: f64 = floors.iter().sum();
        if required > budget + super::CONSTRAINT_TOL {
            return Err(Error::Infeasible {
                required,
                budget,
                deficit: required - budget,
            });
        }
        let mut particles = particles;
        for p in &mut particles {
            p.alpha = project(&p.alpha, &floors, budget);
            p.best_alpha = p.alpha.clone();
        }
        let n = targets.len();
        let threshold = config.threshold.unwrap_or(1e-3 * n as f64);
        Ok(Self {
            alpha_best: particles[0].alpha.clone(),
            alpha_best_score: f64::INFINITY,
            particles,
            best_particle: 0,
            best_fitness: f64::INFINITY,
            k: 0,
            converged: false,
            threshold,
            targets,
            budget,
            config,
            floors,
            averaged: None,
            averaged_count: 0,
            curves: Vec::new(),
            curves_key: None,
            attempted: vec![0; n],
            received: vec![0; n],
        })
    }

    pub fn floors(&self) -> &[f64] {
        &self.floors
    }

    /// `Σ_i h_i(α_i·λ̂_i) / N` under the best particle's hypotheses, or
    /// `None` before any hypothesis has been scored.
    pub fn price(&self, alpha: &[f64]) -> Option<f64> {
        if self.curves.is_empty() {
            return None;
        }
        Some(price(&self.curves, &self.global_model(), alpha))
    }

    /// Range allowed for target `i`'s hypothesised channel probability.
    pub fn lambda_bounds(&self, i: usize) -> (f64, f64) {
        match self.config.arrival_interval {
            Some(z) => {
                let (lo, hi) = wilson_interval(self.received[i], self.attempted[i], z);
                (lo.max(MIN_LAMBDA), hi.max(MIN_LAMBDA))
            }
            None => (MIN_LAMBDA, 1.0),
        }
    }

    /// The best particle's best hypotheses, with channel probabilities
    /// moved into the current bounds.
    fn global_model(&self) -> Vec<TargetHypothesis> {
        let mut model = self.particles[self.best_particle].best_hypotheses.clone();
        for (i, h) in model.iter_mut().enumerate() {
            let (lo, hi) = self.lambda_bounds(i);
            h.lambda = h.lambda.clamp(lo, hi);
        }
        model
    }
}

/// Wilson score interval for `successes` out of `trials`; `[0, 1]` with no
/// trials.
pub fn wilson_interval(successes: usize, trials: usize, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = z / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

fn price(curves: &[TraceCurve], model: &[TargetHypothesis], alpha: &[f64]) -> f64 {
    let n = alpha.len() as f64;
    curves
        .iter()
        .zip(model)
        .zip(alpha)
        .map(|((c, h), a)| c.eval(a * h.lambda))
        .sum::<f64>()
        / n
}

fn log_uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo.ln()..hi.ln())
    } else {
        lo.ln()
    }
}

/// `P` particles with random hypotheses and policies. Particle 0 starts at
/// the water-fill policy.
pub fn initial_swarm(targets: Vec<SwarmTarget>, budget: f64, config: &PsoConfig, seed: u64) -> Result<SwarmState> {
    config.validate()?;
    let n = targets.len();
    let floor_vec: Vec<f64> = targets.iter().map(|t| t.floor).collect();
    let required: f64 = floor_vec.iter().sum();
    if required > budget + super::CONSTRAINT_TOL {
        return Err(Error::Infeasible {
            required,
            budget,
            deficit: required - budget,
        });
    }
    let mut rng = rng::stream(seed, 0, Purpose::Swarm);
    let [lo, hi] = config.noise_range;
    let particles = (0..config.particles)
        .map(|p| {
            let hypotheses: Vec<TargetHypothesis> = targets
                .iter()
                .map(|t| TargetHypothesis {
                    lambda: rng.random_range(0.05..1.0),
                    log_q: t.q_scale.map(|s| s.max(1e-12).ln() + log_uniform(&mut rng, lo, hi)),
                    log_r: t.r_scale.map(|s| s.max(1e-12).ln() + log_uniform(&mut rng, lo, hi)),
                })
                .collect();
            let covariances = targets
                .iter()
                .map(|t| &t.p0 * log_uniform(&mut rng, 0.1, 10.0).exp())
                .collect();
            let alpha = if p == 0 {
                fill_from_floors(floor_vec.clone(), budget)
            } else {
                let e: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
                let total: f64 = e.iter().sum();
                e.iter().map(|x| x / total * budget).collect()
            };
            Particle::new(hypotheses, covariances, alpha)
        })
        .collect();
    SwarmState::new(targets, budget, config.clone(), particles)
}

/// One Riccati step for a hypothesis; returns the hypothesised filtered
/// trace, or infinity after resetting the iterate when it blows up.
fn advance_one(t: &SwarmTarget, h: &TargetHypothesis, cov: &mut DMatrix<f64>, gate: f64) -> f64 {
    let rate = (gate * h.lambda).clamp(0.0, 1.0);
    let step = MareProblem::new(t.a.clone(), t.c.clone(), h.q(), h.r(), rate).and_then(|pr| {
        let next = pr.weighted_step(cov, rate)?;
        let trace = pr.expected_posterior(&next, rate)?.trace();
        Ok((next, trace))
    });
    match step {
        Ok((next, trace)) if trace.is_finite() && next.trace() < BLOWUP => {
            *cov = next;
            trace
        }
        _ => {
            *cov = t.p0.clone();
            f64::INFINITY
        }
    }
}

/// Advance one particle's Riccati iterates and return its hypothesised
/// filtered traces, current first and best second. The best iterates are
/// only advanced when `with_best` is set.
fn advance(
    p: &mut Particle,
    targets: &[SwarmTarget],
    applied: &[f64],
    attempts: Option<&[bool]>,
    mode: MareRate,
    with_best: bool,
) -> (Vec<f64>, Vec<f64>) {
    let gate = |i: usize, alpha: &[f64]| match (mode, attempts) {
        (MareRate::Attempted, Some(b)) => f64::from(u8::from(b[i])),
        (MareRate::AppliedAlpha | MareRate::Attempted, _) => applied[i],
        (MareRate::ParticleAlpha, _) => alpha[i],
        (MareRate::LambdaOnly, _) => 1.0,
    };
    let mut current = Vec::with_capacity(targets.len());
    let mut best = Vec::new();
    for (i, t) in targets.iter().enumerate() {
        let g = gate(i, &p.alpha);
        current.push(advance_one(t, &p.hypotheses[i], &mut p.covariances[i], g));
        if with_best {
            let g = gate(i, &p.best_alpha);
            best.push(advance_one(t, &p.best_hypotheses[i], &mut p.best_covariances[i], g));
        }
    }
    (current, best)
}

struct Coefficients {
    inertia: f64,
    local: f64,
    global: f64,
    sign: f64,
}

impl Coefficients {
    fn of(config: &PsoConfig) -> Self {
        Self {
            inertia: config.inertia,
            local: config.beta_local,
            global: config.beta_global,
            sign: if config.inverted_attraction { -1.0 } else { 1.0 },
        }
    }

    /// `v ← ω·v ± (β_L·r₁·(local − x) + β_G·r₂·(global − x))`, `x ← x + v`,
    /// then `x` is clamped to `[lo, hi]` and the velocity is zeroed at a
    /// bound.
    #[allow(clippy::too_many_arguments)]
    fn pull<R: Rng>(&self, rng: &mut R, x: &mut f64, v: &mut f64, local: f64, global: f64, lo: f64, hi: f64) {
        let (r1, r2): (f64, f64) = (rng.random(), rng.random());
        *v = self.inertia * *v + self.sign * (self.local * r1 * (local - *x) + self.global * r2 * (global - *x));
        *x += *v;
        if *x < lo || *x > hi || !x.is_finite() {
            *x = if x.is_finite() { x.clamp(lo, hi) } else { lo };
            *v = 0.0;
        }
    }
}

fn move_particle(
    p: &mut Particle,
    state_targets: &[SwarmTarget],
    global_model: &[TargetHypothesis],
    global_alpha: &[f64],
    lambda_bounds: &[(f64, f64)],
    floors: &[f64],
    budget: f64,
    config: &PsoConfig,
    rng: &mut StreamRng,
) {
    let c = Coefficients::of(config);
    for i in 0..p.alpha.len() {
        let (lb, x) = (p.best_alpha[i], &mut p.alpha[i]);
        c.pull(rng, x, &mut p.velocity_alpha[i], lb, global_alpha[i], 0.0, 1.0);
    }
    p.alpha = project(&p.alpha, floors, budget);
    for (i, t) in state_targets.iter().enumerate() {
        let (q_lo, q_hi) = SwarmTarget::log_bounds(&t.q_scale, config.noise_range);
        let (r_lo, r_hi) = SwarmTarget::log_bounds(&t.r_scale, config.noise_range);
        let local = &p.best_hypotheses[i];
        let global = &global_model[i];
        let h = &mut p.hypotheses[i];
        let v = &mut p.velocity[i];
        let (lo, hi) = lambda_bounds[i];
        c.pull(rng, &mut h.lambda, &mut v.lambda, local.lambda, global.lambda, lo, hi);
        for j in 0..h.log_q.len() {
            c.pull(rng, &mut h.log_q[j], &mut v.log_q[j], local.log_q[j], global.log_q[j], q_lo[j], q_hi[j]);
        }
        for j in 0..h.log_r.len() {
            c.pull(rng, &mut h.log_r[j], &mut v.log_r[j], local.log_r[j], global.log_r[j], r_lo[j], r_hi[j]);
        }
    }
}

/// One swarm iteration against the live filters' current covariances.
pub fn pso_iterate<R: Rng + ?Sized>(swarm: &SwarmState, filter_states: &[&FilterState], rng: &mut R) -> Result<SwarmState> {
    pso_iterate_observed(swarm, filter_states, None, rng)
}

/// Attempt and arrival flags of the slot the filters just processed.
#[derive(Debug, Clone, Copy)]
pub struct SlotObservation<'a> {
    pub attempted: &'a [bool],
    pub received: &'a [bool],
}

/// As [`pso_iterate`], also given the slot's attempt and arrival flags.
/// [`MareRate::Attempted`] and [`PsoConfig::arrival_interval`] use them;
/// without them the former falls back to the applied policy and the latter
/// to `[0, 1]`.
pub fn pso_iterate_observed<R: Rng + ?Sized>(
    swarm: &SwarmState,
    filter_states: &[&FilterState],
    slot: Option<SlotObservation<'_>>,
    rng: &mut R,
) -> Result<SwarmState> {
    let n = swarm.targets.len();
    if filter_states.len() != n || slot.is_some_and(|o| o.attempted.len() != n || o.received.len() != n) {
        return Err(Error::invalid("one filter state and one attempt and arrival flag per target are required"));
    }
    let mut s = swarm.clone();
    if s.converged {
        return Ok(s);
    }
    let attempts = slot.map(|o| o.attempted);
    if let Some(o) = slot {
        for i in 0..n {
            s.attempted[i] += usize::from(o.attempted[i]);
            s.received[i] += usize::from(o.attempted[i] && o.received[i]);
        }
    }
    s.k += 1;
    let applied = s.alpha_best.clone();
    let mode = s.config.mare_rate;
    let targets = &s.targets;
    let rescore = s.config.rescore_bests;
    let traces: Vec<(Vec<f64>, Vec<f64>)> = s
        .particles
        .par_iter_mut()
        .map(|p| advance(p, targets, &applied, attempts, mode, rescore))
        .collect();

    let k = s.k;
    if k <= s.config.burn_in {
        return Ok(s);
    }
    let live: Vec<f64> = filter_states.iter().map(|f| f.trace()).collect();
    let mode = s.config.trace_average;
    let count = s.averaged_count;
    let observed = mode.apply(s.averaged.as_deref(), &live, count);
    s.averaged = Some(observed.clone());
    s.averaged_count += 1;
    let score = |t: &[f64]| {
        let f = fitness(t, &observed);
        if f.is_nan() {
            f64::INFINITY
        } else {
            f
        }
    };
    for (p, (current, best)) in s.particles.iter_mut().zip(&traces) {
        p.averaged = Some(mode.apply(p.averaged.as_deref(), current, count));
        p.fitness = score(p.averaged.as_deref().unwrap_or_default());
        if rescore && p.best_fitness.is_finite() {
            p.best_averaged = Some(mode.apply(p.best_averaged.as_deref(), best, count));
            p.best_fitness = score(p.best_averaged.as_deref().unwrap_or_default());
        }
        if p.fitness < p.best_fitness {
            p.best_fitness = p.fitness;
            p.best_time = k;
            p.best_hypotheses = p.hypotheses.clone();
            p.best_covariances = p.covariances.clone();
            p.best_averaged = p.averaged.clone();
        }
    }
    let (bp, f_min) = s
        .particles
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, p)| if p.best_fitness < acc.1 { (i, p.best_fitness) } else { acc });
    s.best_particle = bp;
    s.best_fitness = f_min;

    if f_min.is_finite() {
        let key = (bp, s.particles[bp].best_time);
        let model = s.global_model();
        if s.curves_key != Some(key) {
            let points = s.config.rate_grid;
            s.curves = s
                .targets
                .par_iter()
                .zip(&model)
                .map(|(t, h)| TraceCurve::build(&t.a, &t.c, h, points))
                .collect::<Result<Vec<_>>>()?;
            s.curves_key = Some(key);
            for p in &mut s.particles {
                p.best_alpha_score = price(&s.curves, &model, &p.best_alpha);
            }
        }
        for p in &mut s.particles {
            p.alpha_score = price(&s.curves, &model, &p.alpha);
            if p.alpha_score < p.best_alpha_score {
                p.best_alpha_score = p.alpha_score;
                p.best_alpha = p.alpha.clone();
            }
        }
        let (ab, score) = s
            .particles
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, p)| if p.best_alpha_score < acc.1 { (i, p.best_alpha_score) } else { acc });
        if score.is_finite() {
            s.alpha_best = s.particles[ab].best_alpha.clone();
            s.alpha_best_score = score;
        }
    }

    if f_min < s.threshold {
        s.converged = true;
        return Ok(s);
    }

    let global_model = s.global_model();
    let bounds: Vec<(f64, f64)> = (0..s.targets.len()).map(|i| s.lambda_bounds(i)).collect();
    let global_alpha = s.alpha_best.clone();
    let base: u64 = rng.random();
    let (floors, budget, config) = (&s.floors, s.budget, &s.config);
    let targets = &s.targets;
    s.particles.par_iter_mut().enumerate().for_each(|(i, p)| {
        let mut prng = StreamRng::seed_from_u64(base);
        prng.set_stream(i as u64);
        move_particle(p, targets, &global_model, &global_alpha, &bounds, floors, budget, config, &mut prng);
    });
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// `alpha[p][i]`: particle `p`'s policy after the iteration.
    pub alpha: Vec<Vec<f64>>,
    pub fitness: Vec<f64>,
    /// The policy applied in the next slot.
    pub best_alpha: Vec<f64>,
    pub best_alpha_score: f64,
    pub best_fitness: f64,
    pub best_particle: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceLog {
    pub records: Vec<IterationRecord>,
    /// Whether the fitness threshold was reached.
    pub converged: bool,
}

impl ConvergenceLog {
    fn push(&mut self, s: &SwarmState) {
        self.records.push(IterationRecord {
            iteration: s.k,
            alpha: s.particles.iter().map(|p| p.alpha.clone()).collect(),
            fitness: s.particles.iter().map(|p| p.fitness).collect(),
            best_alpha: s.alpha_best.clone(),
            best_alpha_score: s.alpha_best_score,
            best_fitness: s.best_fitness,
            best_particle: s.best_particle,
        });
        self.converged = s.converged;
    }

    /// Largest per-component change of the applied policy between
    /// consecutive iterations, one entry per iteration after the first.
    pub fn best_alpha_changes(&self) -> Vec<f64> {
        self.records
            .windows(2)
            .map(|w| {
                w[0].best_alpha
                    .iter()
                    .zip(&w[1].best_alpha)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .collect()
    }

    /// First iteration from which every later change of the applied policy
    /// stays below `tol`.
    pub fn settling_iteration(&self, tol: f64) -> Option<usize> {
        let changes = self.best_alpha_changes();
        if self.records.is_empty() {
            return None;
        }
        let last_big = changes.iter().rposition(|c| *c >= tol);
        Some(match last_big {
            Some(j) => self.records[j + 1].iteration,
            None => self.records[0].iteration,
        })
    }
}

fn swarm_targets(config: &ScenarioConfig, models: &[crate::model::ModelParams], floors: &[f64]) -> Vec<SwarmTarget> {
    config
        .targets
        .iter()
        .zip(models)
        .zip(floors)
        .map(|((spec, m), f)| {
            let n = m.state_dim();
            SwarmTarget {
                a: m.a().clone(),
                c: m.c().clone(),
                q_scale: m.q().diagonal(),
                r_scale: m.r().diagonal(),
                floor: *f,
                p0: DMatrix::identity(n, n) * spec.p0_scale,
            }
        })
        .collect()
}

/// The interleaved loop: each slot applies the swarm's current policy to
/// the targets, runs the filters, then iterates the swarm once. The swarm
/// stops iterating after it converges or reaches `max_iterations`; the run
/// continues to the horizon under the last policy.
pub(crate) fn run_online(config: &ScenarioConfig) -> Result<(Policy, ConvergenceLog, MetricsLog)> {
    config.validate()?;
    let models = config.models()?;
    let lambdas = config.lambdas();
    let lambda_c = config.critical_lambdas(&models)?;
    let budget = config.budget();
    let floor_vec = floors(&lambdas, &lambda_c, budget)?;
    let targets = swarm_targets(config, &models, &floor_vec);
    let mut swarm = initial_swarm(targets, budget, &config.pso, config.pso.seed)?;
    let mut swarm_rng = rng::stream(config.pso.seed, 1, Purpose::Swarm);
    let n = config.n();
    let mut engine = Engine::new(config, models)?;
    let mut log = LogBuilder::new(config.seed, n, config.horizon);
    let mut convergence = ConvergenceLog::default();
    let mut cycle = None;
    for k in 0..config.horizon {
        let u = engine.attempt_uniforms();
        let alpha = swarm.alpha_best.clone();
        let attempts: Vec<bool> = match config.attempts {
            AttemptMode::Bernoulli => u.iter().zip(&alpha).map(|(u, a)| u < a).collect(),
            AttemptMode::Scheduled => {
                let slot = k % config.cycle_len;
                if slot == 0 {
                    cycle = Some(compile_schedule(&Policy::new(alpha, budget)?, config.cycle_len)?);
                }
                let s = cycle.as_ref().expect("compiled at slot 0");
                (0..n).map(|i| s.attempt(i, slot)).collect()
            }
        };
        let outcomes = engine.step(k, &attempts)?;
        log.push(&outcomes);
        if !swarm.converged && swarm.k < config.pso.max_iterations {
            let received: Vec<bool> = outcomes.iter().map(|o| o.gamma).collect();
            let slot = SlotObservation {
                attempted: &attempts,
                received: &received,
            };
            swarm = pso_iterate_observed(&swarm, &engine.filter_states(), Some(slot), &mut swarm_rng)?;
            convergence.push(&swarm);
        }
    }
    let policy = Policy::new(swarm.alpha_best.clone(), budget)?;
    Ok((policy.clone(), convergence.clone(), log.finish(Some(policy), Some(convergence))))
}

/// Runs the interleaved swarm on `scenario` and returns the final policy and
/// the per-iteration log. Deterministic in the scenario and swarm seeds.
pub fn optimize(scenario: &ScenarioConfig, pso_config: &PsoConfig) -> Result<(Policy, ConvergenceLog)> {
    let config = ScenarioConfig {
        pso: pso_config.clone(),
        ..scenario.clone()
    };
    run_online(&config).map(|(p, c, _)| (p, c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::default_model;

    fn target(q: f64, r: f64) -> SwarmTarget {
        let m = default_model(0.1, q, r).unwrap();
        SwarmTarget {
            a: m.a().clone(),
            c: m.c().clone(),
            q_scale: m.q().diagonal(),
            r_scale: m.r().diagonal(),
            floor: 0.0,
            p0: DMatrix::identity(6, 6) * 10.0,
        }
    }

    fn truth(t: &SwarmTarget, lambda: f64) -> TargetHypothesis {
        TargetHypothesis {
            lambda,
            log_q: t.q_scale.map(f64::ln),
            log_r: t.r_scale.map(f64::ln),
        }
    }

    #[test]
    fn trace_curve_matches_direct_solve() {
        let t = target(0.1, 10.0);
        let h = truth(&t, 1.0);
        let curve = TraceCurve::build(&t.a, &t.c, &h, 24).unwrap();
        let pr = MareProblem::new(t.a.clone(), t.c.clone(), h.q(), h.r(), 0.3).unwrap();
        let direct = super::super::steady_state_trace(&pr, 0.3).unwrap();
        assert!((curve.eval(0.3) / direct - 1.0).abs() < 0.02, "{} {}", curve.eval(0.3), direct);
        assert!(curve.eval(0.2) > curve.eval(0.4));
    }

    #[test]
    fn truth_particle_becomes_global_best() {
        let targets = vec![target(0.1, 10.0), target(0.1, 10.0)];
        let lambdas = [0.6, 0.9];
        let alpha = vec![0.5, 0.5];
        let good = Particle::new(
            targets.iter().zip(lambdas).map(|(t, l)| truth(t, l)).collect(),
            targets.iter().map(|t| t.p0.clone()).collect(),
            alpha.clone(),
        );
        let mut far_h: Vec<TargetHypothesis> = targets.iter().map(|t| truth(t, 0.05)).collect();
        for h in &mut far_h {
            h.log_q.add_scalar_mut(4.0);
        }
        let far = Particle::new(far_h, targets.iter().map(|t| t.p0.clone()).collect(), alpha.clone());
        let swarm = SwarmState::new(targets.clone(), 1.0, PsoConfig::default(), vec![far, good]).unwrap();

        // Live covariances following the truth particle's own expected
        // recursion, so its mismatch is exactly zero.
        let mut pred: Vec<DMatrix<f64>> = targets.iter().map(|t| t.p0.clone()).collect();
        let mut live: Vec<FilterState> = targets
            .iter()
            .map(|t| FilterState::new(DVector::zeros(6), t.p0.clone()).unwrap())
            .collect();
        for (i, f) in live.iter_mut().enumerate() {
            let t = &targets[i];
            let h = truth(t, lambdas[i]);
            let rate = alpha[i] * lambdas[i];
            let pr = MareProblem::new(t.a.clone(), t.c.clone(), h.q(), h.r(), rate).unwrap();
            pred[i] = pr.weighted_step(&pred[i], rate).unwrap();
            f.p_hat = pr.expected_posterior(&pred[i], rate).unwrap();
        }
        let refs: Vec<&FilterState> = live.iter().collect();
        let mut rng = rng::stream(1, 0, Purpose::Swarm);
        let s = pso_iterate(&swarm, &refs, &mut rng).unwrap();
        assert_eq!(s.best_particle, 1);
        assert_eq!(s.particles[1].fitness, 0.0);
        assert!(s.converged);
        assert!(s.particles[0].fitness > 1.0);
    }
}
