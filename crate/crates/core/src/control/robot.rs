//! Robot Z-axis actuation with a low-speed deadband.

use serde::{Deserialize, Serialize};

use super::ControlCommand;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobotModel {
    /// Commands slower than this produce no motion.
    pub min_effective_speed_um_s: f64,
    pub max_speed_um_s: f64,
    /// End-effector speed per unit of commanded speed.
    pub command_scale: f64,
    /// First-order velocity lag; `None` responds instantly.
    pub time_constant_s: Option<f64>,
}

impl Default for RobotModel {
    fn default() -> Self {
        Self {
            min_effective_speed_um_s: 250.0,
            max_speed_um_s: 5000.0,
            command_scale: 1.0,
            time_constant_s: None,
        }
    }
}

impl RobotModel {
    /// Calibration used by the bundled experiment presets: the commanded
    /// speeds of the tracking experiments (0.2 to 0.8 mm/s) are ten times the
    /// average retinal speed 4A/T they were derived from, so the end-effector
    /// is modeled as moving at one tenth of the command.
    pub fn paper() -> Self {
        Self {
            command_scale: 0.1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min_effective_speed_um_s >= 0.0) {
            return Err(Error::invalid("min_effective_speed_um_s", "must be >= 0"));
        }
        if !(self.max_speed_um_s >= self.min_effective_speed_um_s && self.max_speed_um_s.is_finite()) {
            return Err(Error::invalid(
                "max_speed_um_s",
                "must be finite and >= min_effective_speed_um_s",
            ));
        }
        if !(self.command_scale > 0.0 && self.command_scale.is_finite()) {
            return Err(Error::invalid("command_scale", "must be finite and > 0"));
        }
        if let Some(tau) = self.time_constant_s {
            if !(tau > 0.0) {
                return Err(Error::invalid("time_constant_s", "must be > 0"));
            }
        }
        Ok(())
    }

    /// Commanded speed after deadband and saturation, still in command units.
    pub fn admitted_command(&self, velocity: f64) -> f64 {
        let speed = velocity.abs();
        if speed < self.min_effective_speed_um_s || speed == 0.0 {
            0.0
        } else {
            speed.min(self.max_speed_um_s).copysign(velocity)
        }
    }

    /// Steady-state end-effector velocity for a command.
    pub fn end_effector_velocity(&self, velocity: f64) -> f64 {
        self.command_scale * self.admitted_command(velocity)
    }
}

/// Instantaneous-response position update.
pub fn robot_step(z: f64, command: &ControlCommand, model: &RobotModel, dt: f64) -> Result<f64> {
    if !(dt > 0.0) {
        return Err(Error::invalid("dt", "must be > 0"));
    }
    Ok(z + model.end_effector_velocity(command.velocity_z_um_s) * dt)
}

/// Stateful Z axis; honours the optional first-order lag.
#[derive(Debug, Clone)]
pub struct Robot {
    pub model: RobotModel,
    z: f64,
    velocity: f64,
}

impl Robot {
    pub fn new(model: RobotModel, z: f64) -> Self {
        Self {
            model,
            z,
            velocity: 0.0,
        }
    }

    pub fn z(&self) -> f64 {
        self.z
    }

    /// Current end-effector velocity.
    pub fn velocity(&self) -> f64 {
        self.velocity
    }

    pub fn step(&mut self, commanded_velocity: f64, dt: f64) {
        let target = self.model.end_effector_velocity(commanded_velocity);
        match self.model.time_constant_s {
            None => {
                self.velocity = target;
                self.z += target * dt;
            }
            Some(tau) => {
                // Exact integration of v' = (target - v) / tau over dt.
                let decay = (-dt / tau).exp();
                let v0 = self.velocity;
                self.z += target * dt + (v0 - target) * tau * (1.0 - decay);
                self.velocity = target + (v0 - target) * decay;
            }
        }
    }
}
