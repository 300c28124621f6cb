//! Compilation of probability vectors into binary attempt matrices.
//!
//! Each target's row is a Bresenham (Euclidean rhythm) spreading of its
//! probability over the cycle, so attempts are as evenly spaced as the
//! integer constraint allows. Rows are staggered to respect the per-slot
//! instrument capacity.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;

use crate::model::{check_probability, ModelParams};
use crate::policy::{Policy, CONSTRAINT_TOL};
use crate::riccati::MareProblem;
use crate::rng::{self, Purpose};
use crate::{Error, Result};

const FLOOR_EPS: f64 = 1e-9;

fn beat_count(x: f64) -> i64 {
    (x + FLOOR_EPS).floor() as i64
}

/// `β_t = 1` iff `⌊(t+1+offset)·α⌋ > ⌊(t+offset)·α⌋`.
///
/// The number of ones is `⌊αT⌋` or `⌈αT⌉` depending on the offset; gaps
/// between consecutive ones take at most two values differing by one.
pub fn euclidean_pattern(alpha: f64, t: usize, offset: usize) -> Result<Vec<bool>> {
    check_probability(alpha, "alpha")?;
    if t == 0 {
        return Err(Error::invalid("cycle length must be at least 1"));
    }
    Ok((0..t)
        .map(|s| {
            let s = (s + offset) as f64;
            beat_count((s + 1.0) * alpha) > beat_count(s * alpha)
        })
        .collect())
}

/// Offset that places the first attempt in slot 0.
pub fn leading_offset(alpha: f64) -> usize {
    if alpha <= 0.0 {
        0
    } else {
        ((1.0 / alpha) - FLOOR_EPS).ceil().max(1.0) as usize - 1
    }
}

/// Lengths between consecutive ones, cyclically wrapped. Empty when the
/// pattern has fewer than two ones.
pub fn gaps(pattern: &[bool]) -> Vec<usize> {
    let ones: Vec<usize> = pattern.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i).collect();
    if ones.len() < 2 {
        return Vec::new();
    }
    let mut out: Vec<usize> = ones.windows(2).map(|w| w[1] - w[0]).collect();
    out.push(ones[0] + pattern.len() - ones[ones.len() - 1]);
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    rows: Vec<Vec<bool>>,
    capacity: usize,
}

impl Schedule {
    /// Wraps an explicit attempt matrix, checking shape and capacity.
    pub fn from_rows(rows: Vec<Vec<bool>>, capacity: usize) -> Result<Self> {
        let t = rows.first().map(Vec::len).unwrap_or(0);
        if rows.is_empty() || t == 0 || rows.iter().any(|r| r.len() != t) {
            return Err(Error::invalid("attempt matrix must be non-empty and rectangular"));
        }
        let s = Self { rows, capacity };
        if let Some(slot) = (0..t).find(|&slot| s.slot_load(slot) > capacity) {
            return Err(Error::invalid(format!(
                "slot {slot} has {} attempts but capacity is {capacity}",
                s.slot_load(slot)
            )));
        }
        Ok(s)
    }

    pub fn targets(&self) -> usize {
        self.rows.len()
    }

    pub fn cycle_len(&self) -> usize {
        self.rows[0].len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn rows(&self) -> &[Vec<bool>] {
        &self.rows
    }

    pub fn attempt(&self, target: usize, slot: usize) -> bool {
        self.rows[target][slot]
    }

    pub fn slot_load(&self, slot: usize) -> usize {
        self.rows.iter().filter(|r| r[slot]).count()
    }

    pub fn rate(&self, target: usize) -> f64 {
        self.rows[target].iter().filter(|b| **b).count() as f64 / self.cycle_len() as f64
    }

    /// Capacity holds in every slot and each row's rate is within `1/T` of
    /// the corresponding `alpha`.
    pub fn satisfies(&self, alpha: &[f64]) -> bool {
        let t = self.cycle_len();
        let capacity_ok = (0..t).all(|s| self.slot_load(s) <= self.capacity);
        let rate_ok = alpha.len() == self.targets()
            && alpha
                .iter()
                .enumerate()
                .all(|(i, a)| (self.rate(i) - a).abs() <= 1.0 / t as f64 + CONSTRAINT_TOL);
        capacity_ok && rate_ok
    }
}

/// `round(αT)/T`, the nearest rate a cycle of length `t` can realise.
pub fn cycle_rate(alpha: f64, t: usize) -> f64 {
    (alpha * t as f64).round() / t as f64
}

/// Instrument count implied by a budget.
pub fn capacity_of(budget: f64) -> usize {
    (budget + CONSTRAINT_TOL).floor() as usize
}

/// Euclidean rows at the realisable rate `round(αT)/T` with greedily
/// staggered offsets, followed by capacity repair.
///
/// Targets are placed in order of decreasing `α`; each takes the rotation
/// that minimises the resulting maximum slot load (then the sum of squared
/// loads). Any slot still over capacity sheds its lowest-`α` attempt to the
/// nearest slot with room, earlier slots winning ties.
pub fn compile_schedule(policy: &Policy, t: usize) -> Result<Schedule> {
    if t == 0 {
        return Err(Error::invalid("cycle length must be at least 1"));
    }
    let capacity = capacity_of(policy.budget());
    let alpha = policy.alpha();
    if policy.total() > capacity as f64 + CONSTRAINT_TOL {
        return Err(Error::Infeasible {
            required: policy.total(),
            budget: capacity as f64,
            deficit: policy.total() - capacity as f64,
        });
    }
    let n = alpha.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| alpha[j].total_cmp(&alpha[i]).then(i.cmp(&j)));

    let mut rows = vec![vec![false; t]; n];
    let mut load = vec![0usize; t];
    for &i in &order {
        // A rate of k/T repeats cleanly across cycle boundaries.
        let rate = cycle_rate(alpha[i], t);
        let lead = leading_offset(rate);
        let mut best: Option<((usize, usize), Vec<bool>)> = None;
        for j in 0..t {
            let row = euclidean_pattern(rate, t, lead + j)?;
            let max = (0..t).map(|s| load[s] + row[s] as usize).max().unwrap_or(0);
            let sq = (0..t).map(|s| (load[s] + row[s] as usize).pow(2)).sum::<usize>();
            if best.as_ref().is_none_or(|(score, _)| (max, sq) < *score) {
                best = Some(((max, sq), row));
            }
        }
        let row = best.expect("t >= 1").1;
        for s in 0..t {
            load[s] += row[s] as usize;
        }
        rows[i] = row;
    }

    // Rotations with ⌈αT⌉ ones can push the total past M·T; drop surplus
    // attempts from rows above their rate, lowest α first.
    let mut total: usize = load.iter().sum();
    for &i in order.iter().rev() {
        while total > capacity * t {
            let count = rows[i].iter().filter(|b| **b).count();
            if count as f64 <= alpha[i] * t as f64 + CONSTRAINT_TOL {
                break;
            }
            let slot = (0..t).filter(|&s| rows[i][s]).max_by_key(|&s| (load[s], s)).expect("row has ones");
            rows[i][slot] = false;
            load[slot] -= 1;
            total -= 1;
        }
    }

    // Repair overloaded slots.
    let by_alpha_asc: Vec<usize> = order.iter().rev().copied().collect();
    while let Some(slot) = (0..t).find(|&s| load[s] > capacity) {
        let mut moved = false;
        for &i in by_alpha_asc.iter().filter(|&&i| rows[i][slot]) {
            let target = (0..t)
                .filter(|&s| load[s] < capacity && !rows[i][s])
                .min_by_key(|&s| (s.abs_diff(slot), s));
            if let Some(s) = target {
                rows[i][slot] = false;
                rows[i][s] = true;
                load[slot] -= 1;
                load[s] += 1;
                moved = true;
                break;
            }
        }
        if !moved {
            return Err(Error::Infeasible {
                required: load[slot] as f64,
                budget: capacity as f64,
                deficit: (load[slot] - capacity) as f64,
            });
        }
    }
    Schedule::from_rows(rows, capacity)
}

/// Monte-Carlo mean of `Σ_t trace(P̂[t])` when slot `t` can only deliver a
/// measurement if `pattern[t]` is set and the Bernoulli(λ) channel draw
/// succeeds. Channel draws are consumed every slot, so two patterns share
/// the same channel realisation for a given replicate.
pub fn pattern_cost(
    params: &ModelParams,
    lambda: f64,
    pattern: &[bool],
    p0: &DMatrix<f64>,
    replicates: usize,
    seed: u64,
) -> Result<f64> {
    check_probability(lambda, "lambda")?;
    if replicates == 0 || pattern.is_empty() {
        return Err(Error::invalid("pattern_cost needs a non-empty pattern and at least one replicate"));
    }
    let problem = MareProblem::from_model(params, lambda)?;
    let costs = (0..replicates)
        .into_par_iter()
        .map(|rep| {
            let mut rng = rng::stream(seed, rep as u64, Purpose::Channel);
            let mut p = p0.clone();
            let mut sum = 0.0;
            for &attempt in pattern {
                let arrived = rng.random::<f64>() < lambda;
                let p_tilde = problem.weighted_step(&p, 0.0)?;
                p = if attempt && arrived {
                    problem.expected_posterior(&p_tilde, 1.0)?
                } else {
                    p_tilde
                };
                sum += p.trace();
            }
            Ok(sum)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(costs.iter().sum::<f64>() / replicates as f64)
}
