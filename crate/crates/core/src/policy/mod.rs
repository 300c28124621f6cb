//! Measurement-probability policies.
//!
//! A [`Policy`] assigns each target the probability `α_i` that an instrument
//! is pointed at it in a slot, subject to `Σ α_i ≤ M`. The effective arrival
//! rate of target `i` is then `α_i·λ_i`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::riccati::{solve_fixed_point_with, FixedPointOptions, MareProblem};
use crate::{Error, Result};

mod pso;

pub use pso::{
    initial_swarm, optimize, pso_iterate, pso_iterate_observed, wilson_interval, ConvergenceLog, IterationRecord, MareRate, Particle, PsoConfig, SwarmState,
    SlotObservation, SwarmTarget, TargetHypothesis, TraceAverage,
};
pub(crate) use pso::run_online;

/// Slack allowed on the probability constraints.
pub const CONSTRAINT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Policy {
    alpha: Vec<f64>,
    budget: f64,
}

impl Policy {
    pub fn new(alpha: Vec<f64>, budget: f64) -> Result<Self> {
        if !(budget > 0.0) || !budget.is_finite() {
            return Err(Error::invalid(format!("budget must be positive, got {budget}")));
        }
        if alpha.is_empty() {
            return Err(Error::invalid("policy needs at least one target"));
        }
        if let Some(a) = alpha.iter().find(|a| !(-CONSTRAINT_TOL..=1.0 + CONSTRAINT_TOL).contains(*a)) {
            return Err(Error::invalid(format!("probability {a} outside [0, 1]")));
        }
        let total: f64 = alpha.iter().sum();
        if total > budget + CONSTRAINT_TOL {
            return Err(Error::Infeasible {
                required: total,
                budget,
                deficit: total - budget,
            });
        }
        let alpha = alpha.into_iter().map(|a| a.clamp(0.0, 1.0)).collect();
        Ok(Self { alpha, budget })
    }

    /// `α_i = M/N` for every target (capped at 1).
    pub fn uniform(n: usize, budget: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("policy needs at least one target"));
        }
        Self::new(vec![(budget / n as f64).min(1.0); n], budget)
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn budget(&self) -> f64 {
        self.budget
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.alpha.iter().sum()
    }

    /// Whether every `α_i λ_i ≥ λ_c,i` up to [`CONSTRAINT_TOL`].
    pub fn meets_floors(&self, lambdas: &[f64], lambda_c: &[f64]) -> bool {
        self.alpha
            .iter()
            .zip(lambdas)
            .zip(lambda_c)
            .all(|((a, l), c)| a * l >= c - CONSTRAINT_TOL)
    }
}

/// Per-target floors `λ_c,i / λ_i`, or the infeasibility error when they
/// cannot fit in the budget.
pub fn floors(lambdas: &[f64], lambda_c: &[f64], budget: f64) -> Result<Vec<f64>> {
    if lambdas.len() != lambda_c.len() || lambdas.is_empty() {
        return Err(Error::invalid("lambda and lambda_c must be non-empty and of equal length"));
    }
    if !(budget > 0.0) {
        return Err(Error::invalid(format!("budget must be positive, got {budget}")));
    }
    if let Some(l) = lambdas.iter().find(|l| !(**l > 0.0 && **l <= 1.0)) {
        return Err(Error::invalid(format!("arrival probabilities must lie in (0, 1], got {l}")));
    }
    if let Some(c) = lambda_c.iter().find(|c| !(**c >= 0.0 && **c <= 1.0)) {
        return Err(Error::invalid(format!("critical probabilities must lie in [0, 1], got {c}")));
    }
    let floors: Vec<f64> = lambdas.iter().zip(lambda_c).map(|(l, c)| c / l).collect();
    let required: f64 = floors.iter().sum();
    if required > budget + CONSTRAINT_TOL || floors.iter().any(|f| *f > 1.0 + CONSTRAINT_TOL) {
        let deficit = floors.iter().map(|f| (f - 1.0).max(0.0)).sum::<f64>().max(required - budget);
        return Err(Error::Infeasible {
            required,
            budget: budget.min(lambdas.len() as f64),
            deficit,
        });
    }
    Ok(floors.into_iter().map(|f| f.min(1.0)).collect())
}

/// Floors first, then the remaining budget split equally among targets
/// below 1, repeating as targets cap out.
pub fn water_fill(lambdas: &[f64], lambda_c: &[f64], budget: f64) -> Result<Policy> {
    let floors = floors(lambdas, lambda_c, budget)?;
    Policy::new(fill_from_floors(floors, budget), budget)
}

pub(crate) fn fill_from_floors(mut alpha: Vec<f64>, budget: f64) -> Vec<f64> {
    let mut remaining = budget - alpha.iter().sum::<f64>();
    while remaining > CONSTRAINT_TOL {
        let open: Vec<usize> = (0..alpha.len()).filter(|&i| alpha[i] < 1.0).collect();
        if open.is_empty() {
            break;
        }
        let share = remaining / open.len() as f64;
        for i in open {
            let grant = share.min(1.0 - alpha[i]);
            alpha[i] += grant;
            remaining -= grant;
        }
    }
    alpha
}

/// Clamp to `[0, 1]`, raise to the floors, then shrink the above-floor
/// surplus proportionally if the total exceeds the budget.
pub fn project(alpha: &[f64], floors: &[f64], budget: f64) -> Vec<f64> {
    let mut a: Vec<f64> = alpha
        .iter()
        .zip(floors)
        .map(|(a, f)| if a.is_finite() { a.clamp(0.0, 1.0).max(*f) } else { *f })
        .collect();
    let total: f64 = a.iter().sum();
    if total > budget {
        let floor_sum: f64 = floors.iter().sum();
        let surplus = total - floor_sum;
        let scale = if surplus > 0.0 {
            ((budget - floor_sum).max(0.0) / surplus).min(1.0)
        } else {
            0.0
        };
        for (x, f) in a.iter_mut().zip(floors) {
            *x = f + (*x - f) * scale;
        }
    }
    a
}

/// Steady-state expected posterior trace of a target measured at effective
/// rate `rate`, or infinity when the recursion does not settle.
pub fn steady_state_trace(problem: &MareProblem, rate: f64) -> Result<f64> {
    let pr = problem.with_lambda(rate.clamp(0.0, 1.0))?;
    let n = pr.dim();
    let opts = FixedPointOptions {
        tol: 1e-10,
        relative: true,
        max_iter: 20_000,
        ..Default::default()
    };
    let sol = solve_fixed_point_with(&pr, &DMatrix::identity(n, n), &opts);
    if sol.diverged || !sol.converged {
        return Ok(f64::INFINITY);
    }
    Ok(pr.expected_posterior(&sol.p_star, pr.lambda)?.trace())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinimaxAllocation {
    pub policy: Policy,
    pub max_trace: f64,
}

/// Greedy descent on the worst steady-state trace: from the water-fill
/// floors, repeatedly hand `step` of probability to the target whose
/// expected trace at rate `α_i λ_i` is currently largest.
///
/// `problems[i].lambda` is target `i`'s channel success probability.
pub fn minimax_allocate(problems: &[MareProblem], lambda_c: &[f64], budget: f64, step: f64) -> Result<MinimaxAllocation> {
    if !(step > 0.0) {
        return Err(Error::invalid(format!("step must be positive, got {step}")));
    }
    let lambdas: Vec<f64> = problems.iter().map(|p| p.lambda).collect();
    let mut alpha = floors(&lambdas, lambda_c, budget)?;
    let trace_at = |i: usize, a: f64| steady_state_trace(&problems[i], a * lambdas[i]);
    let mut traces = (0..alpha.len()).map(|i| trace_at(i, alpha[i])).collect::<Result<Vec<_>>>()?;
    let mut remaining = budget - alpha.iter().sum::<f64>();
    while remaining > CONSTRAINT_TOL {
        let worst = (0..alpha.len())
            .filter(|&i| alpha[i] < 1.0)
            .max_by(|&i, &j| traces[i].total_cmp(&traces[j]).then(j.cmp(&i)));
        let Some(i) = worst else { break };
        let grant = step.min(remaining).min(1.0 - alpha[i]);
        alpha[i] += grant;
        remaining -= grant;
        traces[i] = trace_at(i, alpha[i])?;
    }
    let max_trace = traces.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(MinimaxAllocation {
        policy: Policy::new(alpha, budget)?,
        max_trace,
    })
}

/// `√Σ (trace(P̂⁽ᵖ⁾_i) − trace(P̂_i))²`.
pub fn fitness(hypothesized_traces: &[f64], true_traces: &[f64]) -> f64 {
    hypothesized_traces
        .iter()
        .zip(true_traces)
        .map(|(h, t)| (h - t).powi(2))
        .sum::<f64>()
        .sqrt()
}
