//! Labeled B⁵-scan volumes and their on-disk dump format.
//!
//! Volumes are stored column-sparse: each A-scan keeps only its non-background
//! pixels, sorted by depth. Every accessor behaves as if the volume were the
//! dense `[b-scan][a-scan][depth]` grid, and [`LabeledVolume::to_dense`] /
//! [`LabeledVolume::from_dense`] convert between the two.
//!
//! # Dump format
//!
//! All integers and floats little-endian.
//!
//! | offset | size      | field                                   |
//! |--------|-----------|-----------------------------------------|
//! | 0      | 4         | magic `B5SV`                            |
//! | 4      | 2         | version (`u16`, currently 1)            |
//! | 6      | 2         | reserved, zero                          |
//! | 8      | 8         | volume id (`u64`)                       |
//! | 16     | 4 × 3     | `n_bscans`, `n_ascans`, `n_depth` (`u32`) |
//! | 28     | 8 × 3     | scan width, breadth, depth range (µm, `f64`) |
//! | 52     | 8 × 2     | `t_start`, `t_end` (s, `f64`)           |
//! | 68     | 8 × n_b   | per-B-scan timestamps (s, `f64`)        |
//! | ...    | n_b·n_a·n_d | label bytes, row-major `[b][a][d]`    |
//!
//! Label codes: 0 background, 1 ILM, 2 RPE, 3 needle.

use std::io::{Read, Write};

use smallvec::SmallVec;

use super::ScanGeometry;
use crate::error::{Error, Result};

pub const VOLUME_MAGIC: &[u8; 4] = b"B5SV";
pub const VOLUME_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Class {
    Background = 0,
    Ilm = 1,
    Rpe = 2,
    Needle = 3,
}

impl Class {
    pub const ALL: [Class; 4] = [Class::Background, Class::Ilm, Class::Rpe, Class::Needle];
    pub const SURFACES: [Class; 3] = [Class::Ilm, Class::Rpe, Class::Needle];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Class> {
        Class::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Background => "background",
            Class::Ilm => "ilm",
            Class::Rpe => "rpe",
            Class::Needle => "needle",
        }
    }
}

/// Non-background pixels of one A-scan, ascending by depth index.
pub type Column = SmallVec<[(u16, Class); 4]>;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledVolume {
    pub id: u64,
    pub geometry: ScanGeometry,
    pub t_start: f64,
    pub t_end: f64,
    pub bscan_timestamps: Vec<f64>,
    columns: Vec<Column>,
}

impl LabeledVolume {
    pub fn empty(geometry: ScanGeometry, t_start: f64, t_end: f64, bscan_timestamps: Vec<f64>) -> Self {
        let n = geometry.n_bscans * geometry.n_ascans_per_bscan;
        Self {
            id: 0,
            geometry,
            t_start,
            t_end,
            bscan_timestamps,
            columns: vec![Column::new(); n],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        [
            self.geometry.n_bscans,
            self.geometry.n_ascans_per_bscan,
            self.geometry.n_depth_pixels,
        ]
    }

    pub fn n_columns(&self) -> usize {
        self.columns.len()
    }

    /// Midpoint of the acquisition window.
    pub fn t_effective(&self) -> f64 {
        0.5 * (self.t_start + self.t_end)
    }

    fn column_index(&self, b: usize, a: usize) -> usize {
        b * self.geometry.n_ascans_per_bscan + a
    }

    fn check(&self, b: usize, a: usize, d: usize) -> Result<()> {
        let dims = self.dims();
        if b >= dims[0] || a >= dims[1] || d >= dims[2] {
            return Err(Error::IndexOutOfRange { b, a, d, dims });
        }
        Ok(())
    }

    pub fn column(&self, b: usize, a: usize) -> &Column {
        &self.columns[self.column_index(b, a)]
    }

    pub(crate) fn column_mut(&mut self, b: usize, a: usize) -> &mut Column {
        let idx = self.column_index(b, a);
        &mut self.columns[idx]
    }

    /// Columns in `(b, a)` row-major order.
    pub fn columns(&self) -> impl Iterator<Item = ((usize, usize), &Column)> {
        let n_a = self.geometry.n_ascans_per_bscan;
        self.columns
            .iter()
            .enumerate()
            .map(move |(i, c)| ((i / n_a, i % n_a), c))
    }

    pub(crate) fn columns_mut(&mut self) -> impl Iterator<Item = &mut Column> {
        self.columns.iter_mut()
    }

    pub fn get(&self, b: usize, a: usize, d: usize) -> Result<Class> {
        self.check(b, a, d)?;
        let col = self.column(b, a);
        Ok(match col.binary_search_by_key(&(d as u16), |&(depth, _)| depth) {
            Ok(i) => col[i].1,
            Err(_) => Class::Background,
        })
    }

    pub fn set(&mut self, b: usize, a: usize, d: usize, class: Class) -> Result<()> {
        self.check(b, a, d)?;
        set_in_column(self.column_mut(b, a), d as u16, class);
        Ok(())
    }

    pub fn count(&self, class: Class) -> usize {
        self.columns
            .iter()
            .map(|c| c.iter().filter(|&&(_, k)| k == class).count())
            .sum()
    }

    pub fn to_dense(&self) -> Vec<u8> {
        let [n_b, n_a, n_d] = self.dims();
        let mut out = vec![0u8; n_b * n_a * n_d];
        for (i, col) in self.columns.iter().enumerate() {
            for &(d, class) in col {
                out[i * n_d + d as usize] = class.code();
            }
        }
        out
    }

    pub fn from_dense(
        geometry: ScanGeometry,
        t_start: f64,
        t_end: f64,
        bscan_timestamps: Vec<f64>,
        labels: &[u8],
    ) -> Result<Self> {
        let mut vol = Self::empty(geometry, t_start, t_end, bscan_timestamps);
        let n_d = vol.geometry.n_depth_pixels;
        if labels.len() != vol.columns.len() * n_d {
            return Err(Error::VolumeFormat(format!(
                "expected {} label bytes, got {}",
                vol.columns.len() * n_d,
                labels.len()
            )));
        }
        for (col, chunk) in vol.columns.iter_mut().zip(labels.chunks_exact(n_d)) {
            for (d, &code) in chunk.iter().enumerate() {
                let class = Class::from_code(code)
                    .ok_or_else(|| Error::VolumeFormat(format!("unknown label code {code}")))?;
                if class != Class::Background {
                    col.push((d as u16, class));
                }
            }
        }
        Ok(vol)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let g = &self.geometry;
        w.write_all(VOLUME_MAGIC)?;
        w.write_all(&VOLUME_VERSION.to_le_bytes())?;
        w.write_all(&0u16.to_le_bytes())?;
        w.write_all(&self.id.to_le_bytes())?;
        for n in self.dims() {
            w.write_all(&(n as u32).to_le_bytes())?;
        }
        for v in [
            g.scan_width_mm * 1000.0,
            g.scan_breadth_mm * 1000.0,
            g.depth_range_mm * 1000.0,
            self.t_start,
            self.t_end,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for t in &self.bscan_timestamps {
            w.write_all(&t.to_le_bytes())?;
        }
        w.write_all(&self.to_dense())?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != VOLUME_MAGIC {
            return Err(Error::VolumeFormat("bad magic".into()));
        }
        let version = read_u16(&mut r)?;
        if version != VOLUME_VERSION {
            return Err(Error::VolumeFormat(format!("unsupported version {version}")));
        }
        let _reserved = read_u16(&mut r)?;
        let id = read_u64(&mut r)?;
        let n_b = read_u32(&mut r)? as usize;
        let n_a = read_u32(&mut r)? as usize;
        let n_d = read_u32(&mut r)? as usize;
        let width = read_f64(&mut r)?;
        let breadth = read_f64(&mut r)?;
        let depth = read_f64(&mut r)?;
        let t_start = read_f64(&mut r)?;
        let t_end = read_f64(&mut r)?;
        let stamps = (0..n_b).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
        let geometry = ScanGeometry {
            n_bscans: n_b,
            n_ascans_per_bscan: n_a,
            n_depth_pixels: n_d,
            scan_width_mm: width / 1000.0,
            scan_breadth_mm: breadth / 1000.0,
            depth_range_mm: depth / 1000.0,
        };
        geometry.validate()?;
        let mut labels = vec![0u8; n_b * n_a * n_d];
        r.read_exact(&mut labels)?;
        let mut vol = Self::from_dense(geometry, t_start, t_end, stamps, &labels)?;
        vol.id = id;
        Ok(vol)
    }
}

pub(crate) fn set_in_column(col: &mut Column, d: u16, class: Class) {
    match col.binary_search_by_key(&d, |&(depth, _)| depth) {
        Ok(i) if class == Class::Background => {
            col.remove(i);
        }
        Ok(i) => col[i].1 = class,
        Err(_) if class == Class::Background => {}
        Err(i) => col.insert(i, (d, class)),
    }
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ScanGeometry {
        ScanGeometry {
            n_bscans: 2,
            n_ascans_per_bscan: 3,
            n_depth_pixels: 8,
            ..Default::default()
        }
    }

    #[test]
    fn set_get_and_clear() {
        let mut v = LabeledVolume::empty(small(), 0.0, 0.1, vec![0.0, 0.05]);
        v.set(1, 2, 5, Class::Rpe).unwrap();
        v.set(1, 2, 1, Class::Ilm).unwrap();
        assert_eq!(v.get(1, 2, 5).unwrap(), Class::Rpe);
        assert_eq!(v.get(1, 2, 1).unwrap(), Class::Ilm);
        assert_eq!(v.column(1, 2).as_slice(), &[(1, Class::Ilm), (5, Class::Rpe)]);
        v.set(1, 2, 5, Class::Background).unwrap();
        assert_eq!(v.get(1, 2, 5).unwrap(), Class::Background);
        assert!(v.get(0, 0, 8).is_err());
        assert!(v.set(2, 0, 0, Class::Ilm).is_err());
    }

    #[test]
    fn dump_round_trip() {
        let mut v = LabeledVolume::empty(small(), 1.0, 1.1, vec![1.0, 1.05]);
        v.id = 42;
        v.set(0, 0, 0, Class::Needle).unwrap();
        v.set(1, 1, 7, Class::Ilm).unwrap();
        let mut bytes = Vec::new();
        v.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], VOLUME_MAGIC);
        assert_eq!(bytes.len(), 68 + 2 * 8 + 2 * 3 * 8);
        let back = LabeledVolume::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back.id, 42);
        assert_eq!(back.dims(), v.dims());
        assert_eq!(back.to_dense(), v.to_dense());
        assert_eq!(back.bscan_timestamps, v.bscan_timestamps);
    }

    #[test]
    fn dump_rejects_bad_magic() {
        let err = LabeledVolume::read_from(&b"XXXX\x01\x00"[..]).unwrap_err();
        assert!(matches!(err, Error::VolumeFormat(_)));
    }
}
