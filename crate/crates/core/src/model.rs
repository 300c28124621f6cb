//! Discretised constant-velocity motion with intermittent position fixes.
//!
//! State is `[position; velocity]` in `d` spatial dimensions (three for the
//! default model), the input is an acceleration, and only positions are
//! observed:
//!
//! ```text
//! x[k+1] = A x[k] + B u[k] + w[k],   w ~ N(0, Q)
//! y[k]   = C x[k] + v[k]             (only when γ[k] = 1), v ~ N(0, R)
//! A = [I  dt·I; 0  I],  B = [0; dt·I],  C = [I  0]
//! ```

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::{gaussian, is_symmetric, min_eigenvalue, psd_factor};
use crate::rng::{self, Purpose};
use crate::{Error, Result};

/// System matrices for one target.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    dt: f64,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    q_factor: DMatrix<f64>,
    r_factor: DMatrix<f64>,
}

impl ModelParams {
    /// Validates shapes and covariances. `R` only has to be positive
    /// semi-definite here; the filter reports a singular innovation when it
    /// cannot invert.
    pub fn new(
        dt: f64,
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
    ) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::invalid(format!("dt must be positive, got {dt}")));
        }
        let n = a.nrows();
        if n == 0 || !a.is_square() {
            return Err(Error::invalid("A must be square and non-empty"));
        }
        if b.nrows() != n {
            return Err(Error::invalid("B must have as many rows as A"));
        }
        if c.ncols() != n || c.nrows() == 0 {
            return Err(Error::invalid("C must be m x n with m > 0"));
        }
        if q.shape() != (n, n) {
            return Err(Error::invalid("Q must be n x n"));
        }
        let m = c.nrows();
        if r.shape() != (m, m) {
            return Err(Error::invalid("R must be m x m"));
        }
        let all = [&a, &b, &c, &q, &r];
        if all.iter().any(|mat| mat.iter().any(|v| !v.is_finite())) {
            return Err(Error::invalid("model matrices must be finite"));
        }
        for (name, cov) in [("Q", &q), ("R", &r)] {
            if !is_symmetric(cov, 1e-9) || min_eigenvalue(cov) < -1e-9 * (1.0 + cov.amax()) {
                return Err(Error::invalid(format!("{name} must be symmetric positive semi-definite")));
            }
        }
        let q_factor = psd_factor(&q)?;
        let r_factor = psd_factor(&r)?;
        Ok(Self {
            dt,
            a,
            b,
            c,
            q,
            r,
            q_factor,
            r_factor,
        })
    }

    /// Constant-velocity model in `dims` spatial dimensions with
    /// `Q = q_scale·I` and `R = r_scale·I`.
    pub fn constant_velocity(dims: usize, dt: f64, q_scale: f64, r_scale: f64) -> Result<Self> {
        if dims == 0 {
            return Err(Error::invalid("at least one spatial dimension is required"));
        }
        if !(dt > 0.0) {
            return Err(Error::invalid(format!("dt must be positive, got {dt}")));
        }
        if !(q_scale >= 0.0) || !q_scale.is_finite() {
            return Err(Error::invalid(format!("q_scale must be non-negative, got {q_scale}")));
        }
        if !(r_scale > 0.0) || !r_scale.is_finite() {
            return Err(Error::invalid(format!("r_scale must be positive, got {r_scale}")));
        }
        let n = 2 * dims;
        let mut a = DMatrix::identity(n, n);
        let mut b = DMatrix::zeros(n, dims);
        let mut c = DMatrix::zeros(dims, n);
        for i in 0..dims {
            a[(i, dims + i)] = dt;
            b[(dims + i, i)] = dt;
            c[(i, i)] = 1.0;
        }
        Self::new(
            dt,
            a,
            b,
            c,
            DMatrix::identity(n, n) * q_scale,
            DMatrix::identity(dims, dims) * r_scale,
        )
    }

    /// Same structure with different noise covariances.
    pub fn with_noise(&self, q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        Self::new(self.dt, self.a.clone(), self.b.clone(), self.c.clone(), q, r)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }
    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }
    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }
    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }
    pub fn obs_dim(&self) -> usize {
        self.c.nrows()
    }

    /// Process noise `w ~ N(0, Q)`.
    pub fn process_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        gaussian(&self.q_factor, rng)
    }

    /// Measurement noise `v ~ N(0, R)`.
    pub fn measurement_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        gaussian(&self.r_factor, rng)
    }
}

/// The three-dimensional model: `A = [I dt·I; 0 I]`, `B = [0; dt·I]`,
/// `C = [I 0]`, `Q = q_scale·I₆`, `R = r_scale·I₃`.
pub fn default_model(dt: f64, q_scale: f64, r_scale: f64) -> Result<ModelParams> {
    ModelParams::constant_velocity(3, dt, q_scale, r_scale)
}

/// Ground-truth state `[position; velocity]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetState(pub DVector<f64>);

impl TargetState {
    pub fn new(x: DVector<f64>) -> Result<Self> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("state entries must be finite"));
        }
        Ok(Self(x))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(DVector::zeros(dim))
    }

    pub fn vector(&self) -> &DVector<f64> {
        &self.0
    }
}

/// One slot's observation: present only when the packet arrived.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    y: Option<DVector<f64>>,
}

impl Observation {
    pub fn received(y: DVector<f64>) -> Self {
        Self { y: Some(y) }
    }

    pub fn lost() -> Self {
        Self { y: None }
    }

    pub fn is_received(&self) -> bool {
        self.y.is_some()
    }

    pub fn measurement(&self) -> Option<&DVector<f64>> {
        self.y.as_ref()
    }
}

/// How acceleration inputs are generated.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InputMode {
    #[default]
    Zero,
    /// `u[k] ~ N(0, variance·I)`.
    WhiteNoise { variance: f64 },
    /// Explicit per-step inputs; the last entry repeats past the end.
    Sequence { inputs: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryConfig {
    pub horizon: usize,
    pub input: InputMode,
    pub seed: u64,
}

/// One truth step: `A·x + B·u + w`.
pub fn step_truth<R: Rng + ?Sized>(
    params: &ModelParams,
    state: &TargetState,
    input: &DVector<f64>,
    rng: &mut R,
) -> TargetState {
    let w = params.process_noise(rng);
    TargetState(params.a() * state.vector() + params.b() * input + w)
}

/// Bernoulli(`lambda`) arrival and, on arrival, `y = C·x + v`.
pub fn observe<R: Rng + ?Sized>(
    params: &ModelParams,
    state: &TargetState,
    lambda: f64,
    rng: &mut R,
) -> Result<Observation> {
    check_probability(lambda, "lambda")?;
    if rng.random::<f64>() < lambda {
        Ok(Observation::received(measure(params, state, rng)))
    } else {
        Ok(Observation::lost())
    }
}

/// Noisy position measurement `C·x + v` regardless of arrival.
pub fn measure<R: Rng + ?Sized>(params: &ModelParams, state: &TargetState, rng: &mut R) -> DVector<f64> {
    params.c() * state.vector() + params.measurement_noise(rng)
}

pub(crate) fn check_probability(p: f64, name: &str) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must lie in [0, 1], got {p}")))
    }
}

/// Truth states `x[1..=T]`, each paired with the input `u[k-1]` that
/// produced it. Inputs and process noise come from separate streams of
/// `config.seed`.
pub fn generate_trajectory(
    params: &ModelParams,
    config: &TrajectoryConfig,
    x0: &TargetState,
) -> Result<Vec<(TargetState, DVector<f64>)>> {
    if config.horizon == 0 {
        return Err(Error::invalid("trajectory horizon must be at least 1"));
    }
    if x0.vector().len() != params.state_dim() {
        return Err(Error::invalid("initial state has the wrong dimension"));
    }
    let m = params.input_dim();
    let mut input_rng = rng::stream(config.seed, 0, Purpose::Input);
    let mut noise_rng = rng::stream(config.seed, 0, Purpose::Process);
    let input_factor = match &config.input {
        InputMode::WhiteNoise { variance } => {
            if !(*variance >= 0.0) || !variance.is_finite() {
                return Err(Error::invalid(format!("input variance must be non-negative, got {variance}")));
            }
            Some(DMatrix::identity(m, m) * variance.sqrt())
        }
        InputMode::Sequence { inputs } => {
            if inputs.is_empty() || inputs.iter().any(|u| u.len() != m) {
                return Err(Error::invalid(format!("input sequence entries must have length {m}")));
            }
            None
        }
        InputMode::Zero => None,
    };

    let mut out = Vec::with_capacity(config.horizon);
    let mut x = x0.clone();
    for k in 0..config.horizon {
        let u = match &config.input {
            InputMode::Zero => DVector::zeros(m),
            InputMode::WhiteNoise { .. } => gaussian(input_factor.as_ref().expect("factor"), &mut input_rng),
            InputMode::Sequence { inputs } => DVector::from_column_slice(&inputs[k.min(inputs.len() - 1)]),
        };
        x = step_truth(params, &x, &u, &mut noise_rng);
        out.push((x.clone(), u));
    }
    Ok(out)
}
