//! Closed-loop simulation of OCT-guided compensation of retinal motion.
//!
//! A moving retinal phantom is imaged by a small volumetric scanner, the
//! scans are segmented (optionally with injected errors), and a controller
//! drives a needle-holding robot axis to follow the retina. The
//! [`experiment`] module ties these together and scores the result.
//!
//! Units are micrometres and seconds. Z points into the tissue.

pub mod config;
pub mod control;
pub mod error;
pub mod experiment;
pub mod perception;
pub mod phantom;
pub mod presets;
pub mod scanner;

pub use config::{parse_config, ScenarioConfig, ScenarioKind};
pub use error::{Error, Result};

/// World-frame point in µm.
pub type Vec3 = nalgebra::Vector3<f64>;
