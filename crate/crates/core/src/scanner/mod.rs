//! B⁵-scan synthesis: five B-scans over a 0.1 × 4 mm window, labeled
//! directly from phantom ground truth.
//!
//! The world frame has its origin at the top corner of the scan window. X runs
//! along each B-scan (A-scan index), Y across B-scans, Z down into tissue.

mod volume;

pub use volume::{Class, Column, LabeledVolume, VOLUME_MAGIC, VOLUME_VERSION};
pub(crate) use volume::set_in_column;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::PhantomState;
use crate::Vec3;

/// Slack on index flooring so pixel → world → pixel is exact under rounding.
const INDEX_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScanGeometry {
    pub n_bscans: usize,
    pub n_ascans_per_bscan: usize,
    pub n_depth_pixels: usize,
    /// Extent along each B-scan.
    pub scan_width_mm: f64,
    /// Extent across the B-scans.
    pub scan_breadth_mm: f64,
    pub depth_range_mm: f64,
}

impl Default for ScanGeometry {
    fn default() -> Self {
        Self {
            n_bscans: 5,
            n_ascans_per_bscan: 1000,
            n_depth_pixels: 1024,
            scan_width_mm: 4.0,
            scan_breadth_mm: 0.1,
            depth_range_mm: 5.0,
        }
    }
}

impl ScanGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.n_bscans == 0 || self.n_ascans_per_bscan == 0 || self.n_depth_pixels == 0 {
            return Err(Error::invalid("scan geometry", "pixel counts must be >= 1"));
        }
        if self.n_depth_pixels > u16::MAX as usize {
            return Err(Error::invalid("n_depth_pixels", "at most 65535"));
        }
        for (name, v) in [
            ("scan_width_mm", self.scan_width_mm),
            ("scan_breadth_mm", self.scan_breadth_mm),
            ("depth_range_mm", self.depth_range_mm),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, "must be finite and > 0"));
            }
        }
        Ok(())
    }

    pub fn width_um(&self) -> f64 {
        self.scan_width_mm * 1000.0
    }

    pub fn breadth_um(&self) -> f64 {
        self.scan_breadth_mm * 1000.0
    }

    pub fn depth_um(&self) -> f64 {
        self.depth_range_mm * 1000.0
    }

    pub fn lateral_pitch_um(&self) -> f64 {
        self.width_um() / self.n_ascans_per_bscan as f64
    }

    pub fn bscan_spacing_um(&self) -> f64 {
        self.breadth_um() / self.n_bscans as f64
    }

    pub fn depth_pitch_um(&self) -> f64 {
        self.depth_um() / self.n_depth_pixels as f64
    }

    /// Depth index holding world depth `z`, or `None` outside the window.
    pub fn depth_index(&self, z: f64) -> Option<usize> {
        axis_index(z, self.depth_pitch_um(), self.n_depth_pixels)
    }

    pub fn pixel_to_world(&self, b: usize, a: usize, d: usize) -> Result<Vec3> {
        let dims = [self.n_bscans, self.n_ascans_per_bscan, self.n_depth_pixels];
        if b >= dims[0] || a >= dims[1] || d >= dims[2] {
            return Err(Error::IndexOutOfRange { b, a, d, dims });
        }
        Ok(Vec3::new(
            a as f64 * self.lateral_pitch_um(),
            b as f64 * self.bscan_spacing_um(),
            d as f64 * self.depth_pitch_um(),
        ))
    }

    pub fn world_to_pixel(&self, p: &Vec3) -> Result<(usize, usize, usize)> {
        let outside = || Error::OutsideFieldOfView {
            x: p.x,
            y: p.y,
            z: p.z,
        };
        let b = axis_index(p.y, self.bscan_spacing_um(), self.n_bscans).ok_or_else(outside)?;
        let a = axis_index(p.x, self.lateral_pitch_um(), self.n_ascans_per_bscan)
            .ok_or_else(outside)?;
        let d = axis_index(p.z, self.depth_pitch_um(), self.n_depth_pixels).ok_or_else(outside)?;
        Ok((b, a, d))
    }
}

fn axis_index(coord: f64, pitch: f64, n: usize) -> Option<usize> {
    if !coord.is_finite() || coord < 0.0 {
        return None;
    }
    let i = (coord / pitch + INDEX_EPS).floor();
    if i >= n as f64 {
        None
    } else {
        Some(i as usize)
    }
}

/// Free function form of [`ScanGeometry::pixel_to_world`].
pub fn pixel_to_world(geometry: &ScanGeometry, b: usize, a: usize, d: usize) -> Result<Vec3> {
    geometry.pixel_to_world(b, a, d)
}

/// Free function form of [`ScanGeometry::world_to_pixel`].
pub fn world_to_pixel(geometry: &ScanGeometry, p: &Vec3) -> Result<(usize, usize, usize)> {
    geometry.world_to_pixel(p)
}

/// Spread of the acquisition time around nominal, as a fraction of nominal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Jitter {
    None,
    Uniform { spread: f64 },
    Normal { std: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// B-scan `i` sees the phantom at `t_start + i·duration/n`.
    Staggered,
    /// All B-scans see the phantom at `t_start`.
    Snapshot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimingModel {
    pub nominal_acquisition_s: f64,
    pub jitter: Jitter,
    pub processing_overhead_s: f64,
    pub sampling: Sampling,
}

impl Default for TimingModel {
    fn default() -> Self {
        Self {
            nominal_acquisition_s: 0.1,
            jitter: Jitter::Uniform { spread: 0.2 },
            processing_overhead_s: 0.01,
            sampling: Sampling::Staggered,
        }
    }
}

impl TimingModel {
    pub fn without_jitter(mut self) -> Self {
        self.jitter = Jitter::None;
        self
    }

    /// Nominal time between control updates.
    pub fn nominal_interval_s(&self) -> f64 {
        self.nominal_acquisition_s + self.processing_overhead_s
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nominal_acquisition_s > 0.0 && self.nominal_acquisition_s.is_finite()) {
            return Err(Error::invalid("nominal_acquisition_s", "must be > 0"));
        }
        if !(self.processing_overhead_s >= 0.0 && self.processing_overhead_s.is_finite()) {
            return Err(Error::invalid("processing_overhead_s", "must be >= 0"));
        }
        match self.jitter {
            Jitter::None => {}
            Jitter::Uniform { spread } if (0.0..1.0).contains(&spread) => {}
            Jitter::Normal { std } if std >= 0.0 && std.is_finite() => {}
            _ => return Err(Error::invalid("jitter", "spread must lie in [0, 1), std >= 0")),
        }
        Ok(())
    }
}

/// Samples one acquisition duration. Never below 10 % of nominal.
pub fn acquisition_duration<R: Rng + ?Sized>(model: &TimingModel, rng: &mut R) -> f64 {
    let nominal = model.nominal_acquisition_s;
    let sample = match model.jitter {
        Jitter::None => nominal,
        Jitter::Uniform { spread } => nominal * (1.0 + spread * rng.random_range(-1.0..=1.0)),
        Jitter::Normal { std } => {
            let z: f64 = StandardNormal.sample(rng);
            nominal * (1.0 + std * z)
        }
    };
    sample.max(0.1 * nominal)
}

/// Needle drawn as an inclined cylinder whose shaft rises toward −X.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NeedleShape {
    pub diameter_um: f64,
    /// Shaft inclination above the horizontal.
    pub angle_deg: f64,
}

impl Default for NeedleShape {
    fn default() -> Self {
        // 42 gauge outer diameter is roughly 150 µm.
        Self {
            diameter_um: 150.0,
            angle_deg: 30.0,
        }
    }
}

impl NeedleShape {
    pub fn validate(&self) -> Result<()> {
        if !(self.diameter_um > 0.0) {
            return Err(Error::invalid("diameter_um", "must be > 0"));
        }
        if !(self.angle_deg > 0.0 && self.angle_deg < 90.0) {
            return Err(Error::invalid("angle_deg", "must lie in (0, 90)"));
        }
        Ok(())
    }

    /// World depth of the shaft's top surface in the vertical line through
    /// `(x, y)`, if the shaft crosses it.
    pub fn top_surface(&self, tip: &Vec3, x: f64, y: f64) -> Option<f64> {
        if x > tip.x {
            return None;
        }
        let r = 0.5 * self.diameter_um;
        let dy = y - tip.y;
        if dy.abs() >= r {
            return None;
        }
        let theta = self.angle_deg.to_radians();
        let axis_z = tip.z - (tip.x - x) * theta.tan();
        Some(axis_z - (r * r - dy * dy).sqrt() / theta.cos())
    }
}

/// Anything that can report phantom ground truth at a requested time.
/// Requests arrive in nondecreasing time order.
pub trait StateSource {
    fn state_at(&mut self, t: f64) -> Result<PhantomState>;
}

impl<F: FnMut(f64) -> Result<PhantomState>> StateSource for F {
    fn state_at(&mut self, t: f64) -> Result<PhantomState> {
        self(t)
    }
}

/// Sequential B⁵-scan acquisition process.
#[derive(Debug, Clone, Default)]
pub struct Scanner {
    pub geometry: ScanGeometry,
    pub timing: TimingModel,
    pub needle: NeedleShape,
    next_id: u64,
}

impl Scanner {
    pub fn new(geometry: ScanGeometry, timing: TimingModel, needle: NeedleShape) -> Result<Self> {
        geometry.validate()?;
        timing.validate()?;
        needle.validate()?;
        Ok(Self {
            geometry,
            timing,
            needle,
            next_id: 0,
        })
    }

    pub fn acquire<S, R>(&mut self, source: &mut S, t_start: f64, rng: &mut R) -> Result<LabeledVolume>
    where
        S: StateSource + ?Sized,
        R: Rng + ?Sized,
    {
        let duration = acquisition_duration(&self.timing, rng);
        let n = self.geometry.n_bscans;
        let stamps: Vec<f64> = (0..n)
            .map(|i| t_start + i as f64 * duration / n as f64)
            .collect();
        let mut vol = LabeledVolume::empty(self.geometry.clone(), t_start, t_start + duration, stamps);
        vol.id = self.next_id;
        self.next_id += 1;

        let snapshot = match self.timing.sampling {
            Sampling::Snapshot => Some(source.state_at(t_start)?),
            Sampling::Staggered => None,
        };
        for b in 0..n {
            let state = match &snapshot {
                Some(s) => s.clone(),
                None => source.state_at(vol.bscan_timestamps[b])?,
            };
            render_bscan(&mut vol, b, &state, &self.needle);
        }
        Ok(vol)
    }
}

/// One-shot acquisition starting at `t_start`; volume id is 0.
pub fn acquire_b5scan<S, R>(
    source: &mut S,
    t_start: f64,
    geometry: &ScanGeometry,
    timing: &TimingModel,
    needle: &NeedleShape,
    rng: &mut R,
) -> Result<LabeledVolume>
where
    S: StateSource + ?Sized,
    R: Rng + ?Sized,
{
    Scanner::new(geometry.clone(), timing.clone(), needle.clone())?.acquire(source, t_start, rng)
}

fn render_bscan(vol: &mut LabeledVolume, b: usize, state: &PhantomState, shape: &NeedleShape) {
    let geometry = vol.geometry.clone();
    let y = b as f64 * geometry.bscan_spacing_um();
    let pitch_x = geometry.lateral_pitch_um();
    for a in 0..geometry.n_ascans_per_bscan {
        let x = a as f64 * pitch_x;
        let layers = state.layers_at(x);
        let col = vol.column_mut(b, a);
        col.clear();

        let mut ilm_index = None;
        if let Some((ilm, rpe)) = layers {
            ilm_index = geometry.depth_index(ilm);
            if let Some(d) = ilm_index {
                set_in_column(col, d as u16, Class::Ilm);
            }
            if let Some(d) = geometry.depth_index(rpe) {
                // A coarse grid can put both surfaces in one pixel; ILM wins.
                if ilm_index != Some(d) {
                    set_in_column(col, d as u16, Class::Rpe);
                }
            }
        }

        if let Some(tip) = &state.needle_tip {
            if let Some(top) = shape.top_surface(tip, x, y) {
                let above_retina = match layers {
                    Some((ilm, _)) => top < ilm,
                    None => true,
                };
                if above_retina {
                    if let Some(d) = geometry.depth_index(top) {
                        let clear_of_ilm = ilm_index.is_none_or(|i| d < i);
                        if clear_of_ilm {
                            set_in_column(col, d as u16, Class::Needle);
                        }
                    }
                }
            }
        }
    }
}
