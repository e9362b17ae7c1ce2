//! Surface extraction and the segmentation error model.
//!
//! The scanner emits perfect labels; [`corrupt`] re-introduces the failure
//! modes of a real segmentation network afterwards so ground truth stays
//! untouched for metrics.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scanner::{set_in_column, Class, LabeledVolume};
use crate::Vec3;

/// Distribution of the whole-scan ILM offset applied by a corrupted scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OffsetDistribution {
    Fixed { offset_um: f64 },
    /// `+magnitude_um` or `-magnitude_um` with equal probability.
    Symmetric { magnitude_um: f64 },
    Uniform { min_um: f64, max_um: f64 },
}

impl OffsetDistribution {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            OffsetDistribution::Fixed { offset_um } => offset_um,
            OffsetDistribution::Symmetric { magnitude_um } => {
                if rng.random_bool(0.5) {
                    magnitude_um
                } else {
                    -magnitude_um
                }
            }
            OffsetDistribution::Uniform { min_um, max_um } => {
                if max_um > min_um {
                    rng.random_range(min_um..max_um)
                } else {
                    min_um
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentationErrorModel {
    pub pixel_flip_rate: f64,
    pub scan_corruption_rate: f64,
    pub corruption_offset: OffsetDistribution,
    pub dropout_rate: f64,
}

impl Default for SegmentationErrorModel {
    fn default() -> Self {
        Self {
            pixel_flip_rate: 0.0,
            scan_corruption_rate: 0.0,
            corruption_offset: OffsetDistribution::Symmetric { magnitude_um: 50.0 },
            dropout_rate: 0.0,
        }
    }
}

impl SegmentationErrorModel {
    pub fn perfect() -> Self {
        Self::default()
    }

    pub fn is_perfect(&self) -> bool {
        self.pixel_flip_rate == 0.0 && self.scan_corruption_rate == 0.0 && self.dropout_rate == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("pixel_flip_rate", self.pixel_flip_rate),
            ("scan_corruption_rate", self.scan_corruption_rate),
            ("dropout_rate", self.dropout_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(name, "probability must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Applies, in order: whole-scan ILM offset, per-column ILM dropout, pixel
/// flips. Each stage draws from `rng` only when its rate is nonzero.
pub fn corrupt<R: Rng + ?Sized>(
    mut volume: LabeledVolume,
    model: &SegmentationErrorModel,
    rng: &mut R,
) -> LabeledVolume {
    let n_d = volume.geometry.n_depth_pixels;

    if model.scan_corruption_rate > 0.0 && rng.random_bool(model.scan_corruption_rate) {
        let offset = model.corruption_offset.sample(rng);
        let shift = (offset / volume.geometry.depth_pitch_um()).round() as i64;
        if shift != 0 {
            for col in volume.columns_mut() {
                if let Some(pos) = col.iter().position(|&(_, c)| c == Class::Ilm) {
                    let (d, _) = col.remove(pos);
                    let moved = (d as i64 + shift).clamp(0, n_d as i64 - 1) as u16;
                    set_in_column(col, moved, Class::Ilm);
                }
            }
        }
    }

    if model.dropout_rate > 0.0 {
        for col in volume.columns_mut() {
            if rng.random_bool(model.dropout_rate) {
                col.retain(|&mut (_, c)| c != Class::Ilm);
            }
        }
    }

    if model.pixel_flip_rate > 0.0 {
        let n_a = volume.geometry.n_ascans_per_bscan;
        let total = volume.n_columns() * n_d;
        let flip_all = model.pixel_flip_rate >= 1.0;
        let gaps = (!flip_all).then(|| Geometric::new(model.pixel_flip_rate).expect("rate in (0, 1)"));
        let mut idx: u64 = 0;
        loop {
            if let Some(g) = &gaps {
                idx += g.sample(rng);
            }
            if idx >= total as u64 {
                break;
            }
            let (col_i, d) = (idx as usize / n_d, idx as usize % n_d);
            let (b, a) = (col_i / n_a, col_i % n_a);
            let current = volume.get(b, a, d).expect("index in range");
            // Uniform over the three other classes.
            let pick = rng.random_range(0..3u8);
            let code = if pick >= current.code() { pick + 1 } else { pick };
            let new_class = Class::from_code(code).expect("valid code");
            volume.set(b, a, d, new_class).expect("index in range");
            idx += 1;
        }
    }

    volume
}

/// Topmost surface points per class, in world coordinates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SurfacePointCloud {
    pub ilm: Vec<Vec3>,
    pub rpe: Vec<Vec3>,
    pub needle: Vec<Vec3>,
    pub source_volume_id: u64,
    pub t_effective: f64,
}

impl SurfacePointCloud {
    pub fn points(&self, class: Class) -> &[Vec3] {
        match class {
            Class::Ilm => &self.ilm,
            Class::Rpe => &self.rpe,
            Class::Needle => &self.needle,
            Class::Background => &[],
        }
    }

    fn points_mut(&mut self, class: Class) -> Option<&mut Vec<Vec3>> {
        match class {
            Class::Ilm => Some(&mut self.ilm),
            Class::Rpe => Some(&mut self.rpe),
            Class::Needle => Some(&mut self.needle),
            Class::Background => None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.ilm.is_empty() && self.rpe.is_empty() && self.needle.is_empty()
    }

    /// Writes `class,x,y,z,t` rows (µm, s).
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["class", "x_um", "y_um", "z_um", "t_s"])?;
        let t = format!("{:.6}", self.t_effective);
        for class in Class::SURFACES {
            for p in self.points(class) {
                out.write_record([
                    class.name(),
                    &format!("{:.6}", p.x),
                    &format!("{:.6}", p.y),
                    &format!("{:.6}", p.z),
                    &t,
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// For every column and class, the shallowest pixel of that class becomes one
/// point.
pub fn extract_surface_point_cloud(volume: &LabeledVolume) -> SurfacePointCloud {
    let g = &volume.geometry;
    let (pitch_x, pitch_y, pitch_z) = (g.lateral_pitch_um(), g.bscan_spacing_um(), g.depth_pitch_um());
    let mut cloud = SurfacePointCloud {
        source_volume_id: volume.id,
        t_effective: volume.t_effective(),
        ..Default::default()
    };
    for ((b, a), col) in volume.columns() {
        let mut seen = [false; 4];
        // Columns are depth-sorted, so the first hit per class is the topmost.
        for &(d, class) in col.iter() {
            let k = class.code() as usize;
            if seen[k] {
                continue;
            }
            seen[k] = true;
            if let Some(points) = cloud.points_mut(class) {
                points.push(Vec3::new(
                    a as f64 * pitch_x,
                    b as f64 * pitch_y,
                    d as f64 * pitch_z,
                ));
            }
        }
    }
    cloud
}

/// Lower median of a set of depths. `None` when empty.
pub fn lower_median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let k = (values.len() - 1) / 2;
    let (_, m, _) = values.select_nth_unstable_by(k, |a, b| a.total_cmp(b));
    Some(*m)
}

/// Median Z of one class's points (lower median for even counts); `None`
/// signals "no measurement this cycle".
pub fn median_layer_depth(cloud: &SurfacePointCloud, class: Class) -> Option<f64> {
    let mut zs: Vec<f64> = cloud.points(class).iter().map(|p| p.z).collect();
    lower_median(&mut zs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scanner::ScanGeometry;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn flat_volume(ilm: usize, rpe: usize) -> LabeledVolume {
        let g = ScanGeometry::default();
        let mut v = LabeledVolume::empty(g.clone(), 0.0, 0.1, vec![0.0, 0.02, 0.04, 0.06, 0.08]);
        for b in 0..g.n_bscans {
            for a in 0..g.n_ascans_per_bscan {
                v.set(b, a, ilm, Class::Ilm).unwrap();
                v.set(b, a, rpe, Class::Rpe).unwrap();
            }
        }
        v
    }

    #[test]
    fn zero_rates_are_identity() {
        let v = flat_volume(512, 563);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let out = corrupt(v.clone(), &SegmentationErrorModel::perfect(), &mut rng);
        assert_eq!(out, v);
    }

    #[test]
    fn forced_corruption_shifts_every_ilm_pixel() {
        let v = flat_volume(512, 563);
        let model = SegmentationErrorModel {
            scan_corruption_rate: 1.0,
            corruption_offset: OffsetDistribution::Fixed { offset_um: 50.0 },
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = corrupt(v, &model, &mut rng);
        // round(50 / 4.8828125) = 10 pixels.
        for (_, col) in out.columns() {
            assert_eq!(col.as_slice(), &[(522, Class::Ilm), (563, Class::Rpe)]);
        }
    }

    #[test]
    fn forced_corruption_clamps_to_window() {
        let v = flat_volume(1020, 1023);
        let model = SegmentationErrorModel {
            scan_corruption_rate: 1.0,
            corruption_offset: OffsetDistribution::Fixed { offset_um: 50.0 },
            ..Default::default()
        };
        let out = corrupt(v, &model, &mut ChaCha8Rng::seed_from_u64(1));
        for (_, col) in out.columns() {
            // ILM lands on the last row, replacing the RPE label there.
            assert_eq!(col.as_slice(), &[(1023, Class::Ilm)]);
        }
    }

    #[test]
    fn dropout_count_within_binomial_bounds() {
        let v = flat_volume(512, 563);
        let model = SegmentationErrorModel {
            dropout_rate: 0.3,
            ..Default::default()
        };
        // n = 5000, p = 0.3: mean 1500, σ ≈ 32.4, so ±100 is beyond 3σ.
        for seed in 0..20 {
            let out = corrupt(v.clone(), &model, &mut ChaCha8Rng::seed_from_u64(seed));
            let lost = 5000 - out.count(Class::Ilm);
            assert!((1400..=1600).contains(&lost), "seed {seed}: {lost}");
            assert_eq!(out.count(Class::Rpe), 5000);
        }
    }

    #[test]
    fn flip_rate_roughly_matches() {
        let g = ScanGeometry {
            n_bscans: 2,
            n_ascans_per_bscan: 50,
            n_depth_pixels: 100,
            ..Default::default()
        };
        let v = LabeledVolume::empty(g, 0.0, 0.1, vec![0.0, 0.05]);
        let model = SegmentationErrorModel {
            pixel_flip_rate: 0.1,
            ..Default::default()
        };
        let out = corrupt(v, &model, &mut ChaCha8Rng::seed_from_u64(4));
        let flipped = out.to_dense().iter().filter(|&&c| c != 0).count();
        // n = 10⁴, p = 0.1: σ = 30.
        assert!((880..=1120).contains(&flipped), "{flipped}");

        let all = SegmentationErrorModel {
            pixel_flip_rate: 1.0,
            ..Default::default()
        };
        let out = corrupt(out.clone(), &all, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(out.to_dense().len(), 10_000);
    }

    #[test]
    fn extraction_examples() {
        let g = ScanGeometry::default();
        let mut v = LabeledVolume::empty(g.clone(), 0.0, 0.1, vec![0.0, 0.02, 0.04, 0.06, 0.08]);
        v.set(0, 0, 510, Class::Ilm).unwrap();
        v.set(0, 0, 400, Class::Needle).unwrap();
        v.set(0, 0, 530, Class::Needle).unwrap();
        let cloud = extract_surface_point_cloud(&v);
        assert_eq!(cloud.ilm.len(), 1);
        assert!((cloud.ilm[0].z - 2490.234375).abs() < 1e-9);
        assert_eq!(cloud.needle.len(), 1);
        assert_eq!(cloud.needle[0].z, 400.0 * g.depth_pitch_um());
        assert!(cloud.rpe.is_empty());
        assert_eq!(cloud.t_effective, 0.05);

        let empty = LabeledVolume::empty(g, 0.0, 0.1, vec![0.0; 5]);
        assert!(extract_surface_point_cloud(&empty).is_empty());
        assert_eq!(median_layer_depth(&extract_surface_point_cloud(&empty), Class::Ilm), None);
    }

    #[test]
    fn median_examples() {
        assert_eq!(lower_median(&mut [10.0, 20.0, 30.0]), Some(20.0));
        assert_eq!(lower_median(&mut [40.0, 10.0, 30.0, 20.0]), Some(20.0));
        let mut v = vec![2500.0; 99];
        v.extend(std::iter::repeat_n(4000.0, 49));
        assert_eq!(lower_median(&mut v), Some(2500.0));
        assert_eq!(lower_median(&mut []), None);
    }

    #[test]
    fn csv_export() {
        let cloud = SurfacePointCloud {
            ilm: vec![Vec3::new(1.0, 2.0, 3.0)],
            t_effective: 0.5,
            ..Default::default()
        };
        let mut buf = Vec::new();
        cloud.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "class,x_um,y_um,z_um,t_s\nilm,1.000000,2.000000,3.000000,0.500000\n"
        );
    }

    proptest! {
        #[test]
        fn median_robust_to_minority_perturbation(
            base in prop::collection::vec(-1000.0..1000.0f64, 1..80),
            perturb in prop::collection::vec(-1e6..1e6f64, 80),
        ) {
            let (lo, hi) = base.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
            let n_bad = (base.len() - 1) / 2;
            let mut noisy = base.clone();
            for (v, p) in noisy.iter_mut().zip(&perturb).take(n_bad) {
                *v += p;
            }
            let m = lower_median(&mut noisy).unwrap();
            prop_assert!(m >= lo && m <= hi);
        }

        #[test]
        fn point_count_bounded(seed in 0u64..1000) {
            let g = ScanGeometry { n_bscans: 2, n_ascans_per_bscan: 6, n_depth_pixels: 12, ..Default::default() };
            let v = LabeledVolume::empty(g.clone(), 0.0, 0.1, vec![0.0, 0.05]);
            let m = SegmentationErrorModel { pixel_flip_rate: 0.5, ..Default::default() };
            let v = corrupt(v, &m, &mut ChaCha8Rng::seed_from_u64(seed));
            let cloud = extract_surface_point_cloud(&v);
            for class in Class::SURFACES {
                prop_assert!(cloud.points(class).len() <= g.n_bscans * g.n_ascans_per_bscan);
            }
        }
    }
}
