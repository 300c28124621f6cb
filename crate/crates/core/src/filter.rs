//! Kalman filtering with intermittent observations.
//!
//! The time update runs every slot. The measurement update runs only when
//! the slot's observation arrived; otherwise the prediction is carried over
//! unchanged as the estimate.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::linalg::{solve_spd, symmetrize};
use crate::model::{ModelParams, Observation, TargetState};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub x_hat: DVector<f64>,
    pub p_hat: DMatrix<f64>,
    pub k: u64,
}

impl FilterState {
    pub fn new(x_hat: DVector<f64>, p_hat: DMatrix<f64>) -> Result<Self> {
        if p_hat.shape() != (x_hat.len(), x_hat.len()) {
            return Err(Error::invalid("covariance shape does not match the state"));
        }
        Ok(Self { x_hat, p_hat, k: 0 })
    }

    /// Initial state lifted from a position fix with zero velocity, or the
    /// origin when there is none; covariance `p0_scale·I`.
    pub fn initial(params: &ModelParams, first_fix: Option<&DVector<f64>>, p0_scale: f64) -> Self {
        let n = params.state_dim();
        let x_hat = match first_fix {
            // Minimum-norm lift; for C = [I 0] this is [y; 0].
            Some(y) => {
                let c = params.c();
                let cct = c * c.transpose();
                match cct.clone().cholesky() {
                    Some(ch) => c.transpose() * ch.solve(y),
                    None => DVector::zeros(n),
                }
            }
            None => DVector::zeros(n),
        };
        Self {
            x_hat,
            p_hat: DMatrix::identity(n, n) * p0_scale,
            k: 0,
        }
    }

    pub fn trace(&self) -> f64 {
        self.p_hat.trace()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterOptions {
    /// Use `(I−KC)P̃(I−KC)ᵀ + KRKᵀ` instead of `(I−KC)P̃`.
    #[serde(default)]
    pub joseph_form: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub x_tilde: DVector<f64>,
    pub p_tilde: DMatrix<f64>,
    pub gain: Option<DMatrix<f64>>,
    pub x_hat: DVector<f64>,
    pub p_hat: DMatrix<f64>,
    pub measurement_applied: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementUpdate {
    pub gain: DMatrix<f64>,
    pub x_hat: DVector<f64>,
    pub p_hat: DMatrix<f64>,
}

/// `x̃ = A·x̂ + B·u`, `P̃ = A·P̂·Aᵀ + Q`.
pub fn time_update(params: &ModelParams, state: &FilterState, input: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let a = params.a();
    let x_tilde = a * &state.x_hat + params.b() * input;
    let p_tilde = a * &state.p_hat * a.transpose() + params.q();
    (x_tilde, p_tilde)
}

/// `K = P̃Cᵀ(CP̃Cᵀ+R)⁻¹`, `x̂ = x̃ + K(y − Cx̃)`, `P̂ = (I − KC)P̃`.
pub fn measurement_update(
    params: &ModelParams,
    x_tilde: &DVector<f64>,
    p_tilde: &DMatrix<f64>,
    y: &DVector<f64>,
    options: FilterOptions,
) -> Result<MeasurementUpdate> {
    let c = params.c();
    let s = c * p_tilde * c.transpose() + params.r();
    // Kᵀ = S⁻¹·C·P̃ᵀ since S is symmetric.
    let gain = solve_spd(&s, &(c * p_tilde.transpose()), "innovation covariance")?.transpose();
    let x_hat = x_tilde + &gain * (y - c * x_tilde);
    let n = p_tilde.nrows();
    let i_kc = DMatrix::identity(n, n) - &gain * c;
    let p_hat = if options.joseph_form {
        &i_kc * p_tilde * i_kc.transpose() + &gain * params.r() * gain.transpose()
    } else {
        &i_kc * p_tilde
    };
    Ok(MeasurementUpdate { gain, x_hat, p_hat })
}

/// One slot: time update, then the measurement update iff `obs` arrived.
/// The returned covariance is symmetrised.
pub fn step(
    params: &ModelParams,
    state: &FilterState,
    input: &DVector<f64>,
    obs: &Observation,
    options: FilterOptions,
) -> Result<(FilterState, StepReport)> {
    let (x_tilde, p_tilde) = time_update(params, state, input);
    let (gain, x_hat, p_hat) = match obs.measurement() {
        Some(y) => {
            let upd = measurement_update(params, &x_tilde, &p_tilde, y, options)?;
            (Some(upd.gain), upd.x_hat, symmetrize(&upd.p_hat))
        }
        None => (None, x_tilde.clone(), p_tilde.clone()),
    };
    let next = FilterState {
        x_hat: x_hat.clone(),
        p_hat: p_hat.clone(),
        k: state.k + 1,
    };
    let report = StepReport {
        x_tilde,
        p_tilde,
        gain,
        x_hat,
        p_hat,
        measurement_applied: obs.is_received(),
    };
    Ok((next, report))
}

/// `|x − x̂|²` over the full state.
pub fn squared_error(truth: &TargetState, state: &FilterState) -> f64 {
    (truth.vector() - &state.x_hat).norm_squared()
}

/// `|C(x − x̂)|²`, the error in the observed (position) coordinates.
pub fn position_squared_error(params: &ModelParams, truth: &TargetState, state: &FilterState) -> f64 {
    (params.c() * (truth.vector() - &state.x_hat)).norm_squared()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::min_eigenvalue;
    use crate::model::default_model;

    fn scalar_model(a: f64, q: f64, r: f64) -> ModelParams {
        ModelParams::new(
            1.0,
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, q),
            DMatrix::from_element(1, 1, r),
        )
        .unwrap()
    }

    fn scalar_state(x: f64, p: f64) -> FilterState {
        FilterState::new(DVector::from_element(1, x), DMatrix::from_element(1, 1, p)).unwrap()
    }

    #[test]
    fn scalar_time_update() {
        let m = scalar_model(1.0, 1.0, 1.0);
        let (_, p) = time_update(&m, &scalar_state(0.0, 1.0), &DVector::zeros(1));
        assert_eq!(p[(0, 0)], 2.0);
    }

    #[test]
    fn certainty_and_zero_fixed_point_propagate() {
        let m = default_model(0.1, 0.0, 1.0).unwrap();
        let s = FilterState::new(DVector::zeros(6), DMatrix::zeros(6, 6)).unwrap();
        let (x, p) = time_update(&m, &s, &DVector::zeros(3));
        assert_eq!(p.amax(), 0.0);
        assert_eq!(x.amax(), 0.0);
    }

    #[test]
    fn scalar_measurement_update() {
        let m = scalar_model(1.0, 1.0, 1.0);
        let upd = measurement_update(
            &m,
            &DVector::from_element(1, 0.0),
            &DMatrix::from_element(1, 1, 2.0),
            &DVector::from_element(1, 3.0),
            FilterOptions::default(),
        )
        .unwrap();
        assert!((upd.gain[(0, 0)] - 2.0 / 3.0).abs() < 1e-15);
        assert!((upd.p_hat[(0, 0)] - 2.0 / 3.0).abs() < 1e-15);
        assert!((upd.x_hat[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn zero_innovation_keeps_prediction() {
        let m = default_model(0.1, 0.1, 10.0).unwrap();
        let x = DVector::from_column_slice(&[1., 2., 3., 4., 5., 6.]);
        let y = m.c() * &x;
        let upd = measurement_update(&m, &x, &DMatrix::identity(6, 6), &y, FilterOptions::default()).unwrap();
        assert!((upd.x_hat - x).amax() < 1e-15);
    }

    #[test]
    fn uninformative_measurement_limit() {
        let m = default_model(0.1, 0.1, 1e9).unwrap();
        let p = DMatrix::identity(6, 6);
        let upd = measurement_update(&m, &DVector::zeros(6), &p, &DVector::zeros(3), FilterOptions::default()).unwrap();
        assert!(upd.gain.amax() < 1e-6);
        assert!((upd.p_hat - p).amax() < 1e-6);
    }

    #[test]
    fn singular_innovation_is_an_error() {
        let base = default_model(0.1, 0.1, 1.0).unwrap();
        let m = base.with_noise(base.q().clone(), DMatrix::zeros(3, 3)).unwrap();
        let res = measurement_update(&m, &DVector::zeros(6), &DMatrix::zeros(6, 6), &DVector::zeros(3), FilterOptions::default());
        assert!(matches!(res, Err(Error::Singular { .. })));
    }

    #[test]
    fn lost_observation_is_pure_prediction() {
        let m = default_model(0.1, 0.1, 10.0).unwrap();
        let s = FilterState::initial(&m, None, 10.0);
        let (next, rep) = step(&m, &s, &DVector::zeros(3), &Observation::lost(), FilterOptions::default()).unwrap();
        let expected = m.a() * &s.p_hat * m.a().transpose() + m.q();
        assert_eq!(next.p_hat, expected);
        assert!(!rep.measurement_applied);
        assert!(rep.gain.is_none());
        assert_eq!(next.k, 1);
    }

    #[test]
    fn joseph_form_agrees_for_optimal_gain() {
        let m = default_model(0.1, 0.1, 10.0).unwrap();
        let s = FilterState::initial(&m, None, 10.0);
        let y = DVector::from_column_slice(&[1.0, -1.0, 0.5]);
        let obs = Observation::received(y);
        let (a, _) = step(&m, &s, &DVector::zeros(3), &obs, FilterOptions::default()).unwrap();
        let (b, _) = step(&m, &s, &DVector::zeros(3), &obs, FilterOptions { joseph_form: true }).unwrap();
        assert!((&a.p_hat - &b.p_hat).amax() < 1e-12);
        assert!(min_eigenvalue(&a.p_hat) > 0.0);
    }

    #[test]
    fn initial_state_lifts_fix() {
        let m = default_model(0.1, 0.1, 10.0).unwrap();
        let s = FilterState::initial(&m, Some(&DVector::from_column_slice(&[1., 2., 3.])), 10.0);
        assert_eq!(s.x_hat.as_slice(), &[1., 2., 3., 0., 0., 0.]);
        assert_eq!(s.trace(), 60.0);
    }
}
