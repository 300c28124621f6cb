//! The modified algebraic Riccati operator
//!
//! ```text
//! g(P; λ, R, Q) = A P Aᵀ + Q − λ A P Cᵀ (C P Cᵀ + R)⁻¹ C P Aᵀ
//! ```
//!
//! which reduces to the classical Riccati map at `λ = 1` and to the Lyapunov
//! map at `λ = 0`. Its fixed point is the expected one-step prediction
//! covariance of a filter whose observations arrive with probability `λ`.

use nalgebra::DMatrix;
use rand::Rng;

use crate::linalg::{rank, solve_spd, symmetrize};
use crate::model::{check_probability, ModelParams};
use crate::rng::{self, Purpose};
use crate::{Error, Result};

pub const DEFAULT_BLOWUP: f64 = 1e12;
pub const DEFAULT_MAX_ITER: usize = 5000;

#[derive(Debug, Clone, PartialEq)]
pub struct MareProblem {
    pub a: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub lambda: f64,
}

impl MareProblem {
    pub fn new(a: DMatrix<f64>, c: DMatrix<f64>, q: DMatrix<f64>, r: DMatrix<f64>, lambda: f64) -> Result<Self> {
        check_probability(lambda, "lambda")?;
        let n = a.nrows();
        if !a.is_square() || c.ncols() != n || q.shape() != (n, n) || r.shape() != (c.nrows(), c.nrows()) {
            return Err(Error::invalid("inconsistent MARE matrix shapes"));
        }
        Ok(Self { a, c, q, r, lambda })
    }

    pub fn from_model(params: &ModelParams, lambda: f64) -> Result<Self> {
        Self::new(
            params.a().clone(),
            params.c().clone(),
            params.q().clone(),
            params.r().clone(),
            lambda,
        )
    }

    pub fn scalar(a: f64, c: f64, q: f64, r: f64, lambda: f64) -> Result<Self> {
        let m = |v| DMatrix::from_element(1, 1, v);
        Self::new(m(a), m(c), m(q), m(r), lambda)
    }

    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        check_probability(lambda, "lambda")?;
        Ok(Self { lambda, ..self.clone() })
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    /// One Riccati step with the observation applied or not:
    /// `APAᵀ + Q − γ·APCᵀ(CPCᵀ+R)⁻¹CPAᵀ` with the weight `γ` in `[0, 1]`.
    pub(crate) fn weighted_step(&self, p: &DMatrix<f64>, weight: f64) -> Result<DMatrix<f64>> {
        let ap = &self.a * p;
        let mut next = &ap * self.a.transpose() + &self.q;
        if weight > 0.0 {
            let s = &self.c * p * self.c.transpose() + &self.r;
            let apct = &ap * self.c.transpose();
            let correction = &apct * solve_spd(&s, &apct.transpose(), "C·P·Cᵀ + R")?;
            next -= correction * weight;
        }
        Ok(symmetrize(&next))
    }

    /// Expected filtered covariance given the prediction covariance `p`:
    /// `P − w·PCᵀ(CPCᵀ+R)⁻¹CP`.
    pub fn expected_posterior(&self, p: &DMatrix<f64>, weight: f64) -> Result<DMatrix<f64>> {
        if weight == 0.0 {
            return Ok(p.clone());
        }
        let s = &self.c * p * self.c.transpose() + &self.r;
        let pct = p * self.c.transpose();
        let correction = &pct * solve_spd(&s, &pct.transpose(), "C·P·Cᵀ + R")?;
        Ok(symmetrize(&(p - correction * weight)))
    }
}

/// One application of `g(P; λ, R, Q)`, symmetrised.
pub fn mare_operator(problem: &MareProblem, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    problem.weighted_step(p, problem.lambda)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MareSolution {
    pub p_star: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// `‖P − g(P)‖_F` at the returned `p_star`.
    pub residual: f64,
    /// The trace exceeded the blow-up bound.
    pub diverged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPointOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub blowup: f64,
    /// Scale the tolerance by `1 + ‖P‖_F`.
    pub relative: bool,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: DEFAULT_MAX_ITER,
            blowup: DEFAULT_BLOWUP,
            relative: false,
        }
    }
}

/// Iterates `P ← g(P)` from `p0` until `‖P − g(P)‖_F ≤ tol`.
pub fn solve_fixed_point(problem: &MareProblem, p0: &DMatrix<f64>, tol: f64, max_iter: usize) -> MareSolution {
    solve_fixed_point_with(
        problem,
        p0,
        &FixedPointOptions {
            tol,
            max_iter,
            ..Default::default()
        },
    )
}

/// Stops once the estimated distance to the fixed point,
/// `residual / (1 − ρ̂)` with `ρ̂` the ratio of successive residuals, is within
/// tolerance. This implies `residual ≤ tol` and keeps the answer within a
/// small multiple of `tol` of the true limit even when contraction is slow.
pub fn solve_fixed_point_with(problem: &MareProblem, p0: &DMatrix<f64>, opts: &FixedPointOptions) -> MareSolution {
    let mut p = symmetrize(p0);
    let mut residual = f64::INFINITY;
    let mut previous: Option<f64> = None;
    for iterations in 0..=opts.max_iter {
        let next = match mare_operator(problem, &p) {
            Ok(next) => next,
            Err(_) => {
                return MareSolution {
                    p_star: p,
                    iterations,
                    converged: false,
                    residual,
                    diverged: false,
                }
            }
        };
        residual = (&p - &next).norm();
        let threshold = if opts.relative {
            opts.tol * (1.0 + p.norm())
        } else {
            opts.tol
        };
        let error_estimate = match previous {
            _ if residual == 0.0 => 0.0,
            Some(prev) if residual < prev => residual / (1.0 - residual / prev),
            _ => f64::INFINITY,
        };
        if error_estimate <= threshold {
            return MareSolution {
                p_star: p,
                iterations,
                converged: true,
                residual,
                diverged: false,
            };
        }
        if !next.trace().is_finite() || next.trace() > opts.blowup {
            return MareSolution {
                p_star: next,
                iterations: iterations + 1,
                converged: false,
                residual,
                diverged: true,
            };
        }
        if iterations == opts.max_iter {
            break;
        }
        previous = Some(residual);
        p = next;
    }
    MareSolution {
        p_star: p,
        iterations: opts.max_iter,
        converged: false,
        residual,
        diverged: false,
    }
}

/// Bracket `[lower, upper]` around the smallest arrival probability for which
/// the fixed-point iteration stays bounded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticalBracket {
    pub lower: f64,
    pub upper: f64,
}

impl CriticalBracket {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, lambda: f64) -> bool {
        self.lower <= lambda && lambda <= self.upper
    }
}

/// Boundedness test used by the bisection: iterating from `I`, the trace
/// must stay below 1e12 for 5000 steps.
pub fn is_bounded(problem: &MareProblem) -> bool {
    let opts = FixedPointOptions {
        tol: 1e-10,
        relative: true,
        ..Default::default()
    };
    !solve_fixed_point_with(problem, &DMatrix::identity(problem.dim(), problem.dim()), &opts).diverged
}

/// Bisection on `λ ∈ [0, 1]` with [`is_bounded`] as the oracle. Returns a
/// bracket of width at most `tol`; `(0, 0)` when even `λ = 0` is bounded and
/// `(1, 1)` when no `λ` is.
pub fn estimate_critical_lambda(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    tol: f64,
) -> Result<CriticalBracket> {
    if !(tol > 0.0) {
        return Err(Error::invalid("bisection tolerance must be positive"));
    }
    let base = MareProblem::new(a.clone(), c.clone(), q.clone(), r.clone(), 0.0)?;
    if is_bounded(&base) {
        return Ok(CriticalBracket { lower: 0.0, upper: 0.0 });
    }
    if !is_bounded(&base.with_lambda(1.0)?) {
        return Ok(CriticalBracket { lower: 1.0, upper: 1.0 });
    }
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if is_bounded(&base.with_lambda(mid)?) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(CriticalBracket { lower: lo, upper: hi })
}

/// Largest eigenvalue magnitude of `a`.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// One realisation of the random Riccati recursion: each step applies the
/// update with probability `λ`. Returns `trace(P[horizon])`.
pub fn sample_error_trace<R: Rng + ?Sized>(
    problem: &MareProblem,
    p0: &DMatrix<f64>,
    horizon: usize,
    rng: &mut R,
) -> Result<f64> {
    let mut p = p0.clone();
    for _ in 0..horizon {
        let received = rng.random::<f64>() < problem.lambda;
        p = problem.weighted_step(&p, if received { 1.0 } else { 0.0 })?;
    }
    Ok(p.trace())
}

/// Monte-Carlo mean of `trace(P[horizon])` over independently seeded
/// Bernoulli(λ) arrival sequences, starting from `p0`.
pub fn expected_error_trace(
    problem: &MareProblem,
    p0: &DMatrix<f64>,
    horizon: usize,
    replicates: usize,
    seed: u64,
) -> Result<f64> {
    if horizon == 0 || replicates == 0 {
        return Err(Error::invalid("horizon and replicates must be at least 1"));
    }
    let mut total = 0.0;
    for rep in 0..replicates {
        let mut rng = rng::stream(seed, rep as u64, Purpose::Replicate);
        total += sample_error_trace(problem, p0, horizon, &mut rng)?;
    }
    Ok(total / replicates as f64)
}

/// Rank conditions behind convergence of the recursion. Diagnostics only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Diagnostics {
    pub observable: bool,
    pub controllable: bool,
    pub noise_stabilizable: bool,
}

fn krylov(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut blocks = Vec::with_capacity(n);
    let mut cur = b.clone();
    for _ in 0..n {
        blocks.push(cur.clone());
        cur = a * cur;
    }
    let cols: usize = blocks.iter().map(|m| m.ncols()).sum();
    let mut out = DMatrix::zeros(n, cols);
    let mut j = 0;
    for blk in blocks {
        out.view_mut((0, j), (n, blk.ncols())).copy_from(&blk);
        j += blk.ncols();
    }
    out
}

pub fn diagnostics(params: &ModelParams) -> Diagnostics {
    let n = params.state_dim();
    let a = params.a();
    let observable = rank(&krylov(&a.transpose(), &params.c().transpose())) == n;
    let controllable = rank(&krylov(a, params.b())) == n;
    let q_half = crate::linalg::psd_factor(params.q()).unwrap_or_else(|_| DMatrix::zeros(n, n));
    let noise_stabilizable = rank(&krylov(a, &q_half)) == n;
    Diagnostics {
        observable,
        controllable,
        noise_stabilizable,
    }
}
