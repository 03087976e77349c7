//! Dense scalar volume with fixed axis semantics.
//!
//! `x` indexes A-scans within a B-scan, `y` indexes B-scans and `k` runs
//! along an A-scan, increasing with depth. Storage is depth-innermost so every
//! A-scan is a contiguous slice: `index = (y * nx + x) * nz + k`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical voxel size in micrometers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    nx: usize,
    ny: usize,
    nz: usize,
    data: Vec<f32>,
    spacing: Option<Spacing>,
}

impl Volume {
    pub fn new(nx: usize, ny: usize, nz: usize, data: Vec<f32>) -> Result<Self> {
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::invalid(format!(
                "volume dims must be positive, got {nx}x{ny}x{nz}"
            )));
        }
        let expected = nx
            .checked_mul(ny)
            .and_then(|v| v.checked_mul(nz))
            .ok_or_else(|| Error::invalid("volume dims overflow"))?;
        if data.len() != expected {
            return Err(Error::invalid(format!(
                "voxel count {} does not match dims {nx}x{ny}x{nz}",
                data.len()
            )));
        }
        Ok(Self {
            nx,
            ny,
            nz,
            data,
            spacing: None,
        })
    }

    pub fn filled(nx: usize, ny: usize, nz: usize, value: f32) -> Result<Self> {
        Self::new(nx, ny, nz, vec![value; nx * ny * nz])
    }

    pub fn zeros(nx: usize, ny: usize, nz: usize) -> Result<Self> {
        Self::filled(nx, ny, nz, 0.0)
    }

    /// Builds a volume by evaluating `f(x, y, k)` at every voxel.
    pub fn from_fn(
        nx: usize,
        ny: usize,
        nz: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(nx * ny * nz);
        for y in 0..ny {
            for x in 0..nx {
                for k in 0..nz {
                    data.push(f(x, y, k));
                }
            }
        }
        Self::new(nx, ny, nz, data)
    }

    pub fn with_spacing(mut self, spacing: Option<Spacing>) -> Self {
        self.spacing = spacing;
        self
    }

    /// Same shape and spacing, new voxel values.
    pub(crate) fn like(&self, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        Self {
            nx: self.nx,
            ny: self.ny,
            nz: self.nz,
            data,
            spacing: self.spacing,
        }
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn nz(&self) -> usize {
        self.nz
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.nx, self.ny, self.nz)
    }

    pub fn spacing(&self) -> Option<Spacing> {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, k: usize) -> usize {
        (y * self.nx + x) * self.nz + k
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, k: usize) -> f32 {
        self.data[self.index(x, y, k)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, k: usize, value: f32) {
        let i = self.index(x, y, k);
        self.data[i] = value;
    }

    pub fn ascan(&self, x: usize, y: usize) -> &[f32] {
        let start = self.index(x, y, 0);
        &self.data[start..start + self.nz]
    }

    pub fn ascan_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let start = self.index(x, y, 0);
        let nz = self.nz;
        &mut self.data[start..start + nz]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Global min-max rescale to `[0, 1]`.
    ///
    /// A constant volume has no range to stretch; it maps to all zeros and the
    /// returned flag is `true`.
    pub fn normalized(&self) -> (Volume, bool) {
        let (lo, hi) = self.min_max();
        if !(hi > lo) {
            return (self.like(vec![0.0; self.data.len()]), true);
        }
        let range = hi - lo;
        let data = self
            .data
            .iter()
            .map(|&v| ((v - lo) / range).clamp(0.0, 1.0))
            .collect();
        (self.like(data), false)
    }

    /// `v / 255` for 8-bit samples.
    pub fn from_u8(nx: usize, ny: usize, nz: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            nx,
            ny,
            nz,
            bytes.iter().map(|&b| f32::from(b) / 255.0).collect(),
        )
    }

    /// Quantizes `[0, 1]` intensities back to 8-bit samples.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }
}
