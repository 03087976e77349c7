//! Depth-weighted combination of the derivative and smoothed volumes.
//!
//! `I(x, y, k) = w(k) * (D'(x, y, k) + S'(x, y, k))`, where `D'` and `S'` are
//! min-max normalized over the search region and `w` encodes where along the
//! A-scan the boundary is expected.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::surface::SearchMask;
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthDirection {
    FavorDeep,
    FavorShallow,
}

/// Position prior along depth. Weights are never zero:
/// `FavorDeep` gives `k + 1`, `FavorShallow` gives `nz - k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DepthWeight {
    pub direction: DepthDirection,
    pub nz: usize,
}

impl DepthWeight {
    pub fn new(direction: DepthDirection, nz: usize) -> Self {
        Self { direction, nz }
    }

    #[inline]
    fn at(&self, k: usize) -> f32 {
        match self.direction {
            DepthDirection::FavorDeep => (k + 1) as f32,
            DepthDirection::FavorShallow => (self.nz - k) as f32,
        }
    }
}

pub fn depth_weight(k: usize, w: &DepthWeight) -> Result<f32> {
    if k >= w.nz {
        return Err(Error::invalid(format!(
            "depth index {k} outside 0..{}",
            w.nz
        )));
    }
    Ok(w.at(k))
}

#[derive(Debug, Clone)]
pub struct Enhanced {
    pub volume: Volume,
    /// Set when any normalization had a zero range (no edges or no contrast
    /// in the search region). The affected term contributes zeros.
    pub degenerate: bool,
}

/// Min and max over the voxels inside the mask.
fn masked_range(v: &Volume, mask: &SearchMask) -> (f32, f32) {
    let nz = v.nz();
    v.data()
        .par_chunks(nz)
        .enumerate()
        .map(|(column, ascan)| {
            ascan[mask.range_at(column)]
                .iter()
                .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| {
                    (lo.min(x), hi.max(x))
                })
        })
        .reduce(
            || (f32::INFINITY, f32::NEG_INFINITY),
            |a, b| (a.0.min(b.0), a.1.max(b.1)),
        )
}

/// Affine map sending `[lo, hi]` to `[0, 1]`, or `None` when the range is empty.
fn unit_map(lo: f32, hi: f32) -> Option<(f32, f32)> {
    (hi > lo).then(|| (1.0 / (hi - lo), lo))
}

/// Builds the enhanced volume.
///
/// Voxels outside `mask` (all voxels are inside when `mask` is `None`) are set
/// to zero. With `clamp_negative` the derivative is clamped at zero before
/// normalization so opposite-polarity edges cannot contribute.
pub fn enhance(
    d: &Volume,
    s: &Volume,
    w: &DepthWeight,
    clamp_negative: bool,
    mask: Option<&SearchMask>,
) -> Result<Enhanced> {
    if d.dims() != s.dims() {
        return Err(Error::invalid(format!(
            "derivative dims {:?} differ from smoothed dims {:?}",
            d.dims(),
            s.dims()
        )));
    }
    if w.nz != d.nz() {
        return Err(Error::invalid(format!(
            "depth weight built for nz={} but volume has nz={}",
            w.nz,
            d.nz()
        )));
    }
    let full;
    let mask = match mask {
        Some(m) => {
            m.check_volume(d)?;
            m
        }
        None => {
            full = SearchMask::for_volume(d);
            &full
        }
    };
    let nz = d.nz();

    let (d_lo, d_hi) = masked_range(d, mask);
    let (d_lo, d_hi) = if clamp_negative {
        (d_lo.max(0.0), d_hi.max(0.0))
    } else {
        (d_lo, d_hi)
    };
    let (s_lo, s_hi) = masked_range(s, mask);
    let d_map = unit_map(d_lo, d_hi);
    let s_map = unit_map(s_lo, s_hi);
    let mut degenerate = d_map.is_none() || s_map.is_none();

    let mut out = vec![0.0f32; d.len()];
    out.par_chunks_mut(nz)
        .zip(d.data().par_chunks(nz).zip(s.data().par_chunks(nz)))
        .enumerate()
        .for_each(|(column, (dst, (dcol, scol)))| {
            for k in mask.range_at(column) {
                let mut dv = dcol[k];
                if clamp_negative {
                    dv = dv.max(0.0);
                }
                let dn = d_map.map_or(0.0, |(scale, lo)| (dv - lo) * scale);
                let sn = s_map.map_or(0.0, |(scale, lo)| (scol[k] - lo) * scale);
                dst[k] = w.at(k) * (dn + sn);
            }
        });

    let combined = d.like(out);
    let (lo, hi) = masked_range(&combined, mask);
    let volume = match unit_map(lo, hi) {
        Some((scale, lo)) => {
            let mut data = combined.into_data();
            data.par_chunks_mut(nz)
                .enumerate()
                .for_each(|(column, dst)| {
                    for k in mask.range_at(column) {
                        dst[k] = ((dst[k] - lo) * scale).clamp(0.0, 1.0);
                    }
                });
            d.like(data)
        }
        None => {
            degenerate = true;
            d.like(vec![0.0; d.len()])
        }
    };
    Ok(Enhanced { volume, degenerate })
}
