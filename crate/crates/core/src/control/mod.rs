//! Retinal motion compensation.
//!
//! The default law compares the median ILM depth of each B⁵-scan with the
//! previous one and drives the end-effector at a constant speed in the
//! direction the retina moved. Z grows downward, so a deeper median means a
//! positive (downward) command.
//!
//! The speed magnitude comes from the average speed of a sinusoid over one
//! cycle, `4·A/T`. Note that for A = 100 µm and T = 5 s this is 80 µm/s,
//! while the tracking experiments were run with commanded speeds of 0.2, 0.4
//! and 0.8 mm/s for A = 25, 50, 100 µm, ten times larger. Here the formula is
//! implemented as written and the experiment presets use the commanded values
//! as configured speeds; see [`RobotModel::paper`] for how the factor is
//! absorbed on the actuator side.

mod predictor;
mod robot;

pub use predictor::{predictor_forecast, predictor_update, PredictorState};
pub use robot::{robot_step, Robot, RobotModel};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Average speed of a sinusoid of `amplitude` over one `period`: it covers
/// four amplitudes per cycle.
pub fn retina_velocity_magnitude(amplitude_um: f64, period_s: f64) -> Result<f64> {
    if !(period_s > 0.0) {
        return Err(Error::invalid("period_s", "must be > 0"));
    }
    if !(amplitude_um >= 0.0) {
        return Err(Error::invalid("amplitude_um", "must be >= 0"));
    }
    Ok(4.0 * amplitude_um / period_s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    ComparePrevious,
    Predictive,
    /// Never move; the needle stays wherever it was left.
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    #[serde(default = "default_mode")]
    pub mode: ControlMode,
    /// Bang-bang speed magnitude, in command units.
    pub speed_um_s: f64,
    /// Flip the sign of every compensation command (adversarial testing).
    #[serde(default)]
    pub invert: bool,
    /// Acceleration noise density for the predictive filter (µm²/s³).
    #[serde(default = "default_process_noise")]
    pub process_noise: f64,
    /// Measurement noise standard deviation for the predictive filter (µm).
    #[serde(default = "default_measurement_noise")]
    pub measurement_noise_um: f64,
}

fn default_mode() -> ControlMode {
    ControlMode::ComparePrevious
}

fn default_process_noise() -> f64 {
    2.0e4
}

fn default_measurement_noise() -> f64 {
    2.0
}

impl ControllerConfig {
    pub fn bang_bang(speed_um_s: f64) -> Self {
        Self {
            mode: ControlMode::ComparePrevious,
            speed_um_s,
            invert: false,
            process_noise: default_process_noise(),
            measurement_noise_um: default_measurement_noise(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.speed_um_s >= 0.0 && self.speed_um_s.is_finite()) {
            return Err(Error::invalid("speed_um_s", "must be finite and >= 0"));
        }
        if !(self.process_noise >= 0.0 && self.process_noise.is_finite()) {
            return Err(Error::invalid("process_noise", "must be finite and >= 0"));
        }
        if !(self.measurement_noise_um >= 0.0 && self.measurement_noise_um.is_finite()) {
            return Err(Error::invalid("measurement_noise_um", "must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    pub previous_median: Option<f64>,
    pub commanded_speed: f64,
    pub mode: ControlMode,
    pub last_update_t: f64,
}

impl ControllerState {
    pub fn new(commanded_speed: f64, mode: ControlMode) -> Self {
        Self {
            previous_median: None,
            commanded_speed,
            mode,
            last_update_t: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CommandBasis {
    Comparison {
        current: Option<f64>,
        previous: Option<f64>,
    },
    Prediction {
        forecast_um: f64,
        horizon_s: f64,
    },
    Insertion {
        target_um: Option<f64>,
    },
    Hold,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlCommand {
    /// Signed Z velocity in command units; positive is downward.
    pub velocity_z_um_s: f64,
    pub issued_at: f64,
    pub basis: CommandBasis,
}

impl ControlCommand {
    pub fn hold(t: f64) -> Self {
        Self {
            velocity_z_um_s: 0.0,
            issued_at: t,
            basis: CommandBasis::Hold,
        }
    }
}

/// One step of the compare-to-previous law.
pub fn compensation_command(
    state: &ControllerState,
    current_median: Option<f64>,
    t: f64,
) -> Result<(ControlCommand, ControllerState)> {
    if t < state.last_update_t {
        return Err(Error::TimeReversal {
            previous: state.last_update_t,
            requested: t,
        });
    }
    let speed = state.commanded_speed;
    let velocity = match (current_median, state.previous_median) {
        (Some(cur), Some(prev)) if cur > prev => speed,
        (Some(cur), Some(prev)) if cur < prev => -speed,
        _ => 0.0,
    };
    let command = ControlCommand {
        velocity_z_um_s: velocity,
        issued_at: t,
        basis: CommandBasis::Comparison {
            current: current_median,
            previous: state.previous_median,
        },
    };
    let next = ControllerState {
        previous_median: current_median.or(state.previous_median),
        last_update_t: t,
        ..state.clone()
    };
    Ok((command, next))
}

/// What the controller sees at one update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub t: f64,
    pub median_ilm_um: Option<f64>,
    /// Effective time of the scan the median came from.
    pub measured_at: f64,
    /// Needle tip depth as known from robot kinematics.
    pub needle_z_um: f64,
}

/// Actuator facts the predictive law needs to turn a position target into a
/// velocity command.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Actuation {
    pub expected_interval_s: f64,
    pub command_scale: f64,
    pub max_speed_um_s: f64,
}

impl Actuation {
    pub fn from_robot(model: &RobotModel, expected_interval_s: f64) -> Self {
        Self {
            expected_interval_s,
            command_scale: model.command_scale,
            max_speed_um_s: model.max_speed_um_s,
        }
    }
}

/// Stateful controller covering both modes.
#[derive(Debug, Clone)]
pub struct Controller {
    config: ControllerConfig,
    state: ControllerState,
    predictor: PredictorState,
    last_measured_at: Option<f64>,
    /// Needle-to-retina offset held by the predictive law.
    gap: Option<f64>,
}

impl Controller {
    pub fn new(config: ControllerConfig) -> Result<Self> {
        config.validate()?;
        let state = ControllerState::new(config.speed_um_s, config.mode);
        let predictor = PredictorState::new(
            config.process_noise,
            config.measurement_noise_um * config.measurement_noise_um,
        );
        Ok(Self {
            config,
            state,
            predictor,
            last_measured_at: None,
            gap: None,
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn state(&self) -> &ControllerState {
        &self.state
    }

    pub fn predictor(&self) -> &PredictorState {
        &self.predictor
    }

    /// Forget the held needle-to-retina offset; the predictive law recaptures
    /// it at the next update.
    pub fn engage(&mut self) {
        self.gap = None;
    }

    pub fn update(&mut self, obs: &Observation, actuation: &Actuation) -> Result<ControlCommand> {
        let (bang_bang, next) = compensation_command(&self.state, obs.median_ilm_um, obs.t)?;
        self.state = next;

        if let Some(m) = obs.median_ilm_um {
            let dt = match self.last_measured_at {
                Some(prev) => obs.measured_at - prev,
                None => actuation.expected_interval_s,
            };
            if dt > 0.0 {
                self.predictor = predictor_update(&self.predictor, m, dt)?;
                self.last_measured_at = Some(obs.measured_at);
            }
        }

        let mut command = match self.config.mode {
            ControlMode::ComparePrevious => bang_bang,
            ControlMode::Predictive => self.predictive_command(obs, actuation)?,
            ControlMode::Off => ControlCommand::hold(obs.t),
        };
        if self.config.invert {
            command.velocity_z_um_s = -command.velocity_z_um_s;
        }
        Ok(command)
    }

    fn predictive_command(&mut self, obs: &Observation, act: &Actuation) -> Result<ControlCommand> {
        let Some(measured_at) = self.last_measured_at else {
            return Ok(ControlCommand::hold(obs.t));
        };
        let now = predictor_forecast(&self.predictor, (obs.t - measured_at).max(0.0))?;
        let gap = *self.gap.get_or_insert(obs.needle_z_um - now);

        // Aim to sit on the forecast position at the end of the next interval.
        let horizon = (obs.t + act.expected_interval_s - measured_at).max(0.0);
        let forecast = predictor_forecast(&self.predictor, horizon)?;
        let velocity = (forecast + gap - obs.needle_z_um) / act.expected_interval_s;
        let command = (velocity / act.command_scale).clamp(-act.max_speed_um_s, act.max_speed_um_s);
        Ok(ControlCommand {
            velocity_z_um_s: command,
            issued_at: obs.t,
            basis: CommandBasis::Prediction {
                forecast_um: forecast,
                horizon_s: horizon,
            },
        })
    }
}
