//! Ground-truth eye phantom.
//!
//! A flat two-layer retina (ILM on top, RPE `retina_thickness_um` below it)
//! rides on a linear stage driven by a sum of sinusoids. World Z grows
//! downward, so a positive stage displacement pushes the retina deeper.
//!
//! Once the needle tip is below the ILM the tissue around it is tethered:
//! near the needle the ILM is blended toward the depth that would keep the
//! tip's insertion depth constant. The blend weight is `tethering_gain` at the
//! needle and falls off linearly to zero at `tether_radius_um` laterally.
//! While the needle is actively cutting (advancing during insertion) the
//! tissue moves freely and the tether anchor follows the tip.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Vec3;

fn default_period() -> f64 {
    5.0
}

/// One sinusoidal term of a motion profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SineComponent {
    pub amplitude_um: f64,
    pub period_s: f64,
    #[serde(default)]
    pub phase_rad: f64,
}

impl SineComponent {
    pub fn at(&self, t: f64) -> f64 {
        self.amplitude_um * (TAU * t / self.period_s + self.phase_rad).sin()
    }
}

/// Stage displacement as a primary sinusoid plus optional extra components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionProfile {
    pub amplitude_um: f64,
    #[serde(default = "default_period")]
    pub period_s: f64,
    #[serde(default)]
    pub phase_rad: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub components: Vec<SineComponent>,
}

impl Default for MotionProfile {
    fn default() -> Self {
        Self::breathing(100.0)
    }
}

impl MotionProfile {
    /// Single sine with the 5 s breathing period.
    pub fn breathing(amplitude_um: f64) -> Self {
        Self {
            amplitude_um,
            period_s: 5.0,
            phase_rad: 0.0,
            components: Vec::new(),
        }
    }

    /// Axial retinal motion from heartbeat and breathing, 81 µm at ~1 Hz.
    pub fn heartbeat() -> Self {
        Self {
            amplitude_um: 81.0,
            period_s: 1.0,
            phase_rad: 0.0,
            components: Vec::new(),
        }
    }

    /// Axial motion measured with the subject lying down, 21.3 µm at ~1 Hz.
    pub fn supine() -> Self {
        Self {
            amplitude_um: 21.3,
            period_s: 1.0,
            phase_rad: 0.0,
            components: Vec::new(),
        }
    }

    pub fn primary(&self) -> SineComponent {
        SineComponent {
            amplitude_um: self.amplitude_um,
            period_s: self.period_s,
            phase_rad: self.phase_rad,
        }
    }

    pub fn all_components(&self) -> impl Iterator<Item = SineComponent> + '_ {
        std::iter::once(self.primary()).chain(self.components.iter().copied())
    }

    pub fn displacement(&self, t: f64) -> f64 {
        self.all_components().map(|c| c.at(t)).sum()
    }

    /// Upper bound on |displacement| (sum of amplitudes).
    pub fn amplitude_bound(&self) -> f64 {
        self.all_components().map(|c| c.amplitude_um.abs()).sum()
    }

    /// Upper bound on |d displacement / dt|.
    pub fn peak_speed(&self) -> f64 {
        self.all_components()
            .map(|c| TAU * c.amplitude_um.abs() / c.period_s)
            .sum()
    }

    /// Period of the largest-amplitude component; used as the reference
    /// frequency for lag and amplitude metrics.
    pub fn dominant_period(&self) -> f64 {
        self.all_components()
            .fold(None::<SineComponent>, |best, c| match best {
                Some(b) if b.amplitude_um.abs() >= c.amplitude_um.abs() => Some(b),
                _ => Some(c),
            })
            .map(|c| c.period_s)
            .unwrap_or(self.period_s)
    }

    pub fn validate(&self) -> Result<()> {
        for c in self.all_components() {
            if !(c.amplitude_um >= 0.0 && c.amplitude_um.is_finite()) {
                return Err(Error::invalid("amplitude_um", "must be finite and >= 0"));
            }
            if !(c.period_s > 0.0 && c.period_s.is_finite()) {
                return Err(Error::invalid("period_s", "must be finite and > 0"));
            }
            if !c.phase_rad.is_finite() {
                return Err(Error::invalid("phase_rad", "must be finite"));
            }
        }
        Ok(())
    }
}

/// Stage displacement at `t`: Σ Aᵢ·sin(2π·t/Tᵢ + φᵢ).
pub fn motion_displacement(profile: &MotionProfile, t: f64) -> f64 {
    profile.displacement(t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    /// World Z of the ILM with the stage at rest.
    pub ilm_rest_depth_um: f64,
    pub retina_thickness_um: f64,
    /// Lateral size of the retina patch, centred on `center_x_um`.
    pub lateral_extent_mm: f64,
    pub center_x_um: f64,
    pub tethering_gain: f64,
    pub tether_radius_um: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            ilm_rest_depth_um: 2500.0,
            retina_thickness_um: 250.0,
            lateral_extent_mm: 10.0,
            center_x_um: 2000.0,
            tethering_gain: 0.7,
            tether_radius_um: 300.0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.ilm_rest_depth_um.is_finite() {
            return Err(Error::invalid("ilm_rest_depth_um", "must be finite"));
        }
        if !(self.retina_thickness_um > 0.0 && self.retina_thickness_um.is_finite()) {
            return Err(Error::invalid("retina_thickness_um", "must be > 0"));
        }
        if !(self.lateral_extent_mm > 0.0) {
            return Err(Error::invalid("lateral_extent_mm", "must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.tethering_gain) {
            return Err(Error::invalid("tethering_gain", "must lie in [0, 1]"));
        }
        if !(self.tether_radius_um > 0.0) {
            return Err(Error::invalid("tether_radius_um", "must be > 0"));
        }
        Ok(())
    }

    fn lateral_bounds(&self) -> (f64, f64) {
        let half = self.lateral_extent_mm * 500.0;
        (self.center_x_um - half, self.center_x_um + half)
    }
}

/// Needle tip as driven by the robot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeedlePose {
    pub tip: Vec3,
    /// True while the needle is being advanced through tissue; the tether
    /// anchor then follows the tip instead of holding the tissue.
    pub cutting: bool,
}

impl NeedlePose {
    pub fn resting(tip: Vec3) -> Self {
        Self { tip, cutting: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Tether {
    center_x: f64,
    locked_ilm_z: f64,
    gain: f64,
    radius: f64,
}

impl Tether {
    fn weight(&self, x: f64) -> f64 {
        self.gain * (1.0 - (x - self.center_x).abs() / self.radius).max(0.0)
    }
}

/// Ground truth at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomState {
    pub t: f64,
    pub stage_z_um: f64,
    /// ILM depth without any tissue coupling.
    pub free_ilm_z_um: f64,
    /// ILM depth at the needle's lateral position.
    pub ilm_z_um: f64,
    pub rpe_z_um: f64,
    pub needle_tip: Option<Vec3>,
    pub needle_inserted: bool,
    /// Tip depth below the ILM captured when the tissue took hold of the needle.
    pub tether_offset_um: Option<f64>,
    retina_thickness_um: f64,
    lateral_bounds: (f64, f64),
    tether: Option<Tether>,
}

impl PhantomState {
    /// ILM and RPE depth of the column at lateral position `x`, or `None`
    /// outside the retina patch.
    pub fn layers_at(&self, x: f64) -> Option<(f64, f64)> {
        let (lo, hi) = self.lateral_bounds;
        if x < lo || x > hi {
            return None;
        }
        let ilm = match &self.tether {
            Some(tether) => {
                self.free_ilm_z_um + tether.weight(x) * (tether.locked_ilm_z - self.free_ilm_z_um)
            }
            None => self.free_ilm_z_um,
        };
        Some((ilm, ilm + self.retina_thickness_um))
    }

    pub fn retina_thickness_um(&self) -> f64 {
        self.retina_thickness_um
    }

    /// Needle tip depth relative to the ILM at the needle, as a fraction of
    /// retina thickness (0 at the ILM, 1 at the RPE).
    pub fn relative_tip_depth(&self) -> Option<f64> {
        self.needle_tip
            .map(|tip| (tip.z - self.ilm_z_um) / self.retina_thickness_um)
    }
}

/// Evaluates the phantom at `t`.
///
/// `prev` carries the tether anchor between calls; successive calls within a
/// run must not move backward in time.
pub fn phantom_state_at(
    config: &PhantomConfig,
    profile: &MotionProfile,
    t: f64,
    needle: Option<&NeedlePose>,
    prev: Option<&PhantomState>,
) -> Result<PhantomState> {
    if let Some(p) = prev {
        if t < p.t {
            return Err(Error::TimeReversal {
                previous: p.t,
                requested: t,
            });
        }
    }

    let stage = profile.displacement(t);
    let free = config.ilm_rest_depth_um + stage;
    let thickness = config.retina_thickness_um;

    let mut state = PhantomState {
        t,
        stage_z_um: stage,
        free_ilm_z_um: free,
        ilm_z_um: free,
        rpe_z_um: free + thickness,
        needle_tip: needle.map(|n| n.tip),
        needle_inserted: false,
        tether_offset_um: None,
        retina_thickness_um: thickness,
        lateral_bounds: config.lateral_bounds(),
        tether: None,
    };

    let Some(needle) = needle else {
        return Ok(state);
    };
    let tip = needle.tip;
    let gain = config.tethering_gain;

    // Anchor survives only while the needle stays in and is not cutting.
    let held_offset = match prev {
        Some(p) if p.needle_inserted && !needle.cutting && gain > 0.0 => p.tether_offset_um,
        _ => None,
    };

    if let Some(offset) = held_offset {
        let locked = tip.z - offset;
        let ilm = free + gain * (locked - free);
        if tip.z >= ilm {
            state.ilm_z_um = ilm;
            state.rpe_z_um = ilm + thickness;
            state.needle_inserted = true;
            state.tether_offset_um = Some(offset);
            state.tether = Some(Tether {
                center_x: tip.x,
                locked_ilm_z: locked,
                gain,
                radius: config.tether_radius_um,
            });
            return Ok(state);
        }
    }

    // Untethered: fresh contact captures the anchor at the current depth.
    if tip.z >= free {
        state.needle_inserted = true;
        state.tether_offset_um = Some(tip.z - free);
        if gain > 0.0 {
            state.tether = Some(Tether {
                center_x: tip.x,
                locked_ilm_z: free,
                gain,
                radius: config.tether_radius_um,
            });
        }
    }
    Ok(state)
}

/// Advancing-time wrapper around [`phantom_state_at`].
#[derive(Debug, Clone)]
pub struct Phantom {
    config: PhantomConfig,
    profile: MotionProfile,
    state: Option<PhantomState>,
}

impl Phantom {
    pub fn new(config: PhantomConfig, profile: MotionProfile) -> Result<Self> {
        config.validate()?;
        profile.validate()?;
        Ok(Self {
            config,
            profile,
            state: None,
        })
    }

    pub fn config(&self) -> &PhantomConfig {
        &self.config
    }

    pub fn profile(&self) -> &MotionProfile {
        &self.profile
    }

    pub fn state(&self) -> Option<&PhantomState> {
        self.state.as_ref()
    }

    pub fn advance(&mut self, t: f64, needle: Option<&NeedlePose>) -> Result<&PhantomState> {
        let next = phantom_state_at(&self.config, &self.profile, t, needle, self.state.as_ref())?;
        Ok(self.state.insert(next))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tip(z: f64) -> NeedlePose {
        NeedlePose::resting(Vec3::new(2000.0, 40.0, z))
    }

    #[test]
    fn displacement_examples() {
        let p = MotionProfile::breathing(100.0);
        assert_eq!(motion_displacement(&p, 0.0), 0.0);
        assert!((motion_displacement(&p, 1.25) - 100.0).abs() < 1e-12);
        let p = MotionProfile::breathing(25.0);
        assert!(motion_displacement(&p, 2.5).abs() < 1e-12);
    }

    #[test]
    fn presets_carry_physiological_constants() {
        assert_eq!(MotionProfile::heartbeat().amplitude_um, 81.0);
        assert_eq!(MotionProfile::supine().amplitude_um, 21.3);
        assert_eq!(MotionProfile::supine().period_s, 1.0);
    }

    #[test]
    fn zero_gain_reduces_to_free_motion() {
        let cfg = PhantomConfig {
            tethering_gain: 0.0,
            ..Default::default()
        };
        let prof = MotionProfile::breathing(100.0);
        let s0 = phantom_state_at(&cfg, &prof, 0.0, Some(&tip(2600.0)), None).unwrap();
        assert!(s0.needle_inserted);
        let s1 = phantom_state_at(&cfg, &prof, 1.25, Some(&tip(2700.0)), Some(&s0)).unwrap();
        assert!((s1.ilm_z_um - 2600.0).abs() < 1e-9);
    }

    #[test]
    fn full_gain_locks_relative_depth() {
        let cfg = PhantomConfig {
            tethering_gain: 1.0,
            ..Default::default()
        };
        let prof = MotionProfile::breathing(100.0);
        // Tip at 50 % of the band when contact is made.
        let mut s = phantom_state_at(&cfg, &prof, 0.0, Some(&tip(2625.0)), None).unwrap();
        for i in 1..=500 {
            let t = i as f64 * 0.01;
            let z = 2625.0 + 30.0 * (t * 3.0).sin();
            s = phantom_state_at(&cfg, &prof, t, Some(&tip(z)), Some(&s)).unwrap();
            assert!(s.needle_inserted);
            assert!((s.relative_tip_depth().unwrap() - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn half_gain_halves_oscillation_at_needle() {
        let cfg = PhantomConfig {
            tethering_gain: 0.5,
            ..Default::default()
        };
        let prof = MotionProfile::breathing(100.0);
        // Closed form of the blend with a fixed needle: ilm = rest + (1 - g)·d(t).
        let closed = |t: f64| 2500.0 + 0.5 * prof.displacement(t);

        // Step-by-step oracle over one full period.
        let needle = tip(2625.0);
        let mut s = phantom_state_at(&cfg, &prof, 0.0, Some(&needle), None).unwrap();
        let (mut lo, mut hi) = (f64::MAX, f64::MIN);
        for i in 1..=5000 {
            let t = i as f64 * 1e-3;
            s = phantom_state_at(&cfg, &prof, t, Some(&needle), Some(&s)).unwrap();
            assert!((s.ilm_z_um - closed(t)).abs() < 1e-9);
            lo = lo.min(s.ilm_z_um);
            hi = hi.max(s.ilm_z_um);
        }
        assert!(((hi - lo) / 2.0 - 50.0).abs() < 1e-6);
    }

    #[test]
    fn tether_is_local() {
        let cfg = PhantomConfig {
            tethering_gain: 1.0,
            ..Default::default()
        };
        let prof = MotionProfile::breathing(100.0);
        let needle = tip(2625.0);
        let s0 = phantom_state_at(&cfg, &prof, 0.0, Some(&needle), None).unwrap();
        let s = phantom_state_at(&cfg, &prof, 1.25, Some(&needle), Some(&s0)).unwrap();
        let (at_needle, _) = s.layers_at(2000.0).unwrap();
        let (halfway, _) = s.layers_at(2150.0).unwrap();
        let (far, _) = s.layers_at(500.0).unwrap();
        assert!((at_needle - 2500.0).abs() < 1e-9);
        assert!((halfway - 2550.0).abs() < 1e-9);
        assert!((far - 2600.0).abs() < 1e-9);
    }

    #[test]
    fn cutting_lets_tissue_move_freely() {
        let cfg = PhantomConfig {
            tethering_gain: 1.0,
            ..Default::default()
        };
        let prof = MotionProfile::breathing(100.0);
        let mut pose = NeedlePose {
            tip: Vec3::new(2000.0, 40.0, 2400.0),
            cutting: true,
        };
        let mut s = phantom_state_at(&cfg, &prof, 0.0, Some(&pose), None).unwrap();
        for i in 1..=300 {
            pose.tip.z += 1.0;
            s = phantom_state_at(&cfg, &prof, i as f64 * 1e-3, Some(&pose), Some(&s)).unwrap();
            assert_eq!(s.ilm_z_um, s.free_ilm_z_um);
        }
        assert!(s.needle_inserted);
    }

    #[test]
    fn rejects_time_going_backward() {
        let cfg = PhantomConfig::default();
        let prof = MotionProfile::default();
        let s = phantom_state_at(&cfg, &prof, 1.0, None, None).unwrap();
        let err = phantom_state_at(&cfg, &prof, 0.5, None, Some(&s)).unwrap_err();
        assert!(matches!(err, Error::TimeReversal { .. }));
    }

    #[test]
    fn no_needle_means_not_inserted() {
        let s = phantom_state_at(&PhantomConfig::default(), &MotionProfile::default(), 0.3, None, None)
            .unwrap();
        assert!(!s.needle_inserted);
        assert!(s.needle_tip.is_none());
    }

    #[test]
    fn outside_lateral_extent_has_no_layers() {
        let cfg = PhantomConfig {
            lateral_extent_mm: 1.0,
            ..Default::default()
        };
        let s = phantom_state_at(&cfg, &MotionProfile::default(), 0.0, None, None).unwrap();
        assert!(s.layers_at(2000.0).is_some());
        assert!(s.layers_at(2600.0).is_none());
    }

    #[test]
    fn invalid_profile_rejected() {
        let mut p = MotionProfile::breathing(-1.0);
        assert!(p.validate().is_err());
        p.amplitude_um = 1.0;
        p.period_s = 0.0;
        assert!(p.validate().is_err());
    }

    fn component() -> impl Strategy<Value = SineComponent> {
        (0.0..200.0f64, 1u32..8, -3.2..3.2f64).prop_map(|(a, k, phase)| SineComponent {
            amplitude_um: a,
            period_s: k as f64 * 0.5,
            phase_rad: phase,
        })
    }

    fn profile() -> impl Strategy<Value = MotionProfile> {
        (component(), prop::collection::vec(component(), 0..3)).prop_map(|(p, rest)| {
            MotionProfile {
                amplitude_um: p.amplitude_um,
                period_s: p.period_s,
                phase_rad: p.phase_rad,
                components: rest,
            }
        })
    }

    proptest! {
        #[test]
        fn displacement_bounded_by_amplitude_sum(p in profile(), t in 0.0..1000.0f64) {
            prop_assert!(p.displacement(t).abs() <= p.amplitude_bound() + 1e-9);
        }

        #[test]
        fn displacement_periodic_over_common_period(p in profile(), t in 0.0..20.0f64) {
            // Periods are multiples of 0.5 s with k < 8, so 0.5·lcm(1..7) = 210 s.
            let lcm = 210.0;
            prop_assert!((p.displacement(t) - p.displacement(t + lcm)).abs() < 1e-9);
        }

        #[test]
        fn layer_thickness_constant(
            gain in 0.0..=1.0f64,
            zs in prop::collection::vec(2300.0..2800.0f64, 1..60),
        ) {
            let cfg = PhantomConfig { tethering_gain: gain, ..Default::default() };
            let prof = MotionProfile::breathing(100.0);
            let mut prev: Option<PhantomState> = None;
            for (i, z) in zs.iter().enumerate() {
                let s = phantom_state_at(&cfg, &prof, i as f64 * 0.05, Some(&tip(*z)), prev.as_ref()).unwrap();
                prop_assert!((s.rpe_z_um - s.ilm_z_um - 250.0).abs() < 1e-9);
                prop_assert_eq!(s.needle_inserted, *z >= s.ilm_z_um);
                for x in [0.0, 1900.0, 2000.0, 2100.0, 3999.0] {
                    let (ilm, rpe) = s.layers_at(x).unwrap();
                    prop_assert!((rpe - ilm - 250.0).abs() < 1e-9);
                }
                prev = Some(s);
            }
        }

        #[test]
        fn zero_gain_is_memoryless(
            zs in prop::collection::vec(2300.0..2800.0f64, 2..30),
        ) {
            let cfg = PhantomConfig { tethering_gain: 0.0, ..Default::default() };
            let prof = MotionProfile::breathing(100.0);
            let mut prev: Option<PhantomState> = None;
            for (i, z) in zs.iter().enumerate() {
                let t = i as f64 * 0.07;
                let chained = phantom_state_at(&cfg, &prof, t, Some(&tip(*z)), prev.as_ref()).unwrap();
                let fresh = phantom_state_at(&cfg, &prof, t, Some(&tip(*z)), None).unwrap();
                prop_assert_eq!(chained.ilm_z_um, fresh.ilm_z_um);
                prop_assert_eq!(chained.rpe_z_um, fresh.rpe_z_um);
                prop_assert_eq!(chained.needle_inserted, fresh.needle_inserted);
                prev = Some(chained);
            }
        }
    }
}
