//! Constant-velocity Kalman filter on the retinal depth.
//!
//! State is `[position µm, velocity µm/s]` driven by white acceleration noise
//! of spectral density `process_noise` (µm²/s³). Measurements are positions
//! with variance `measurement_noise` (µm²).

use nalgebra::{Matrix1x2, Matrix2, Vector2};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorState {
    pub x: Vector2<f64>,
    pub p: Matrix2<f64>,
    pub process_noise: f64,
    pub measurement_noise: f64,
    /// Velocity variance assumed before the second measurement.
    pub initial_velocity_var: f64,
    initialized: bool,
}

impl PredictorState {
    pub fn new(process_noise: f64, measurement_noise: f64) -> Self {
        Self {
            x: Vector2::zeros(),
            p: Matrix2::zeros(),
            process_noise,
            measurement_noise,
            initial_velocity_var: 1e6,
            initialized: false,
        }
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn position(&self) -> f64 {
        self.x[0]
    }

    pub fn velocity(&self) -> f64 {
        self.x[1]
    }
}

fn transition(dt: f64) -> Matrix2<f64> {
    Matrix2::new(1.0, dt, 0.0, 1.0)
}

fn process_cov(q: f64, dt: f64) -> Matrix2<f64> {
    let dt2 = dt * dt;
    q * Matrix2::new(dt2 * dt / 3.0, dt2 / 2.0, dt2 / 2.0, dt)
}

/// Time update by `dt` followed by a measurement update with `measurement`.
/// The first call on a fresh state only initializes the position.
pub fn predictor_update(p: &PredictorState, measurement: f64, dt: f64) -> Result<PredictorState> {
    if !measurement.is_finite() {
        return Err(Error::NonFiniteMeasurement(measurement));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::invalid("dt", "must be finite and > 0"));
    }
    let mut next = p.clone();
    if !p.initialized {
        next.x = Vector2::new(measurement, 0.0);
        next.p = Matrix2::new(p.measurement_noise, 0.0, 0.0, p.initial_velocity_var);
        next.initialized = true;
        return Ok(next);
    }

    let f = transition(dt);
    let x_pred = f * p.x;
    let p_pred = f * p.p * f.transpose() + process_cov(p.process_noise, dt);

    let h = Matrix1x2::new(1.0, 0.0);
    let r = p.measurement_noise;
    let s = p_pred[(0, 0)] + r;
    let innovation = measurement - x_pred[0];
    let (k, x_new) = if s > 0.0 {
        let k = p_pred.column(0) / s;
        (k, x_pred + k * innovation)
    } else {
        (Vector2::zeros(), x_pred)
    };

    // Joseph form keeps the covariance symmetric PSD under rounding.
    let i_kh = Matrix2::identity() - k * h;
    let p_new = i_kh * p_pred * i_kh.transpose() + k * r * k.transpose();
    next.x = x_new;
    next.p = 0.5 * (p_new + p_new.transpose());
    Ok(next)
}

/// Position extrapolated `horizon` seconds past the last update.
pub fn predictor_forecast(p: &PredictorState, horizon: f64) -> Result<f64> {
    if !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(Error::invalid("horizon", "must be finite and >= 0"));
    }
    Ok(p.x[0] + p.x[1] * horizon)
}
