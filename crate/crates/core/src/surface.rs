//! Depth surfaces `z(x, y)` and the per-column operations that produce and
//! clean them: argmax extraction, median outlier rejection, inpainting,
//! smoothing and search-range truncation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Real-valued depth per A-scan with a validity mask. Cells are stored
/// row-major in `y` then `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Surface {
    nx: usize,
    ny: usize,
    z: Vec<f32>,
    valid: Vec<bool>,
}

impl Surface {
    pub fn new(nx: usize, ny: usize, z: Vec<f32>, valid: Vec<bool>) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::invalid("surface dims must be positive"));
        }
        if z.len() != nx * ny || valid.len() != nx * ny {
            return Err(Error::invalid(format!(
                "surface buffers do not match dims {nx}x{ny}"
            )));
        }
        Ok(Self { nx, ny, z, valid })
    }

    /// A fully valid surface.
    pub fn from_depths(nx: usize, ny: usize, z: Vec<f32>) -> Result<Self> {
        let valid = vec![true; z.len()];
        Self::new(nx, ny, z, valid)
    }

    pub fn constant(nx: usize, ny: usize, z: f32) -> Result<Self> {
        Self::from_depths(nx, ny, vec![z; nx * ny])
    }

    pub fn from_fn(nx: usize, ny: usize, mut f: impl FnMut(usize, usize) -> f32) -> Result<Self> {
        let mut z = Vec::with_capacity(nx * ny);
        for y in 0..ny {
            for x in 0..nx {
                z.push(f(x, y));
            }
        }
        Self::from_depths(nx, ny, z)
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.nx + x
    }

    #[inline]
    pub fn z(&self, x: usize, y: usize) -> f32 {
        self.z[self.index(x, y)]
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[self.index(x, y)]
    }

    pub fn get(&self, x: usize, y: usize) -> Option<f32> {
        let i = self.index(x, y);
        self.valid[i].then_some(self.z[i])
    }

    pub fn set(&mut self, x: usize, y: usize, z: f32, valid: bool) {
        let i = self.index(x, y);
        self.z[i] = z;
        self.valid[i] = valid;
    }

    pub fn depths(&self) -> &[f32] {
        &self.z
    }

    pub fn validity(&self) -> &[bool] {
        &self.valid
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn is_total(&self) -> bool {
        self.valid.iter().all(|&v| v)
    }
}

/// Per-column half-open search range `[lo, hi)` along depth. A column with
/// `lo >= hi` is empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchMask {
    nx: usize,
    ny: usize,
    nz: usize,
    lo: Vec<usize>,
    hi: Vec<usize>,
}

impl SearchMask {
    pub fn full(nx: usize, ny: usize, nz: usize) -> Self {
        Self {
            nx,
            ny,
            nz,
            lo: vec![0; nx * ny],
            hi: vec![nz; nx * ny],
        }
    }

    pub fn for_volume(v: &Volume) -> Self {
        let (nx, ny, nz) = v.dims();
        Self::full(nx, ny, nz)
    }

    pub fn new(nx: usize, ny: usize, nz: usize, lo: Vec<usize>, hi: Vec<usize>) -> Result<Self> {
        if lo.len() != nx * ny || hi.len() != nx * ny {
            return Err(Error::invalid("search mask buffers do not match dims"));
        }
        if lo.iter().chain(&hi).any(|&k| k > nz) {
            return Err(Error::invalid(format!("search range exceeds depth {nz}")));
        }
        Ok(Self { nx, ny, nz, lo, hi })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.nx, self.ny, self.nz)
    }

    /// The range for column `(x, y)`; empty ranges come back as `lo..lo`.
    #[inline]
    pub fn range(&self, x: usize, y: usize) -> std::ops::Range<usize> {
        self.range_at(y * self.nx + x)
    }

    #[inline]
    pub(crate) fn range_at(&self, column: usize) -> std::ops::Range<usize> {
        let lo = self.lo[column];
        lo..self.hi[column].max(lo)
    }

    pub fn is_full(&self) -> bool {
        self.lo.iter().all(|&k| k == 0) && self.hi.iter().all(|&k| k == self.nz)
    }

    pub fn empty_columns(&self) -> usize {
        self.lo.iter().zip(&self.hi).filter(|(l, h)| l >= h).count()
    }

    pub(crate) fn check_volume(&self, v: &Volume) -> Result<()> {
        if v.dims() != self.dims() {
            return Err(Error::invalid(format!(
                "search mask dims {:?} do not match volume dims {:?}",
                self.dims(),
                v.dims()
            )));
        }
        Ok(())
    }

    /// Copy of `v` with every column cut to its range: samples above `lo`
    /// repeat the sample at `lo`, samples at or below `hi` repeat the sample
    /// at `hi - 1`. Filtering the result sees the range boundary as a volume
    /// face. Empty columns are copied unchanged.
    pub fn restrict(&self, v: &Volume) -> Result<Volume> {
        self.check_volume(v)?;
        let mut out = v.clone();
        let nz = self.nz;
        for (column, ascan) in out.data_mut().chunks_mut(nz).enumerate() {
            let r = self.range_at(column);
            if r.is_empty() {
                continue;
            }
            let top = ascan[r.start];
            let bottom = ascan[r.end - 1];
            ascan[..r.start].fill(top);
            ascan[r.end..].fill(bottom);
        }
        Ok(out)
    }
}

/// Which part of the column survives a truncation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeepSide {
    KeepAbove,
    KeepBelow,
}

/// Depth of the maximum of `i` in each column's search range. Exact ties go
/// to the smallest index. Columns with an empty range come back invalid.
pub fn argmax_per_ascan(i: &Volume, mask: &SearchMask) -> Result<Surface> {
    mask.check_volume(i)?;
    let (nx, ny, nz) = i.dims();
    let mut z = vec![0.0f32; nx * ny];
    let mut valid = vec![false; nx * ny];
    for (column, ascan) in i.data().chunks(nz).enumerate() {
        let r = mask.range_at(column);
        if r.is_empty() {
            continue;
        }
        let mut best = r.start;
        let mut best_value = ascan[r.start];
        for k in r {
            if ascan[k] > best_value {
                best = k;
                best_value = ascan[k];
            }
        }
        z[column] = best as f32;
        valid[column] = true;
    }
    Surface::new(nx, ny, z, valid)
}

fn median(values: &mut [f64]) -> f64 {
    let n = values.len();
    values.sort_unstable_by(|a, b| a.total_cmp(b));
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Invalidates cells that sit more than `threshold` voxels away from the
/// median of the valid cells in their `window x window` neighborhood.
///
/// Only the validity mask changes; depths of all cells are left untouched.
/// The neighborhood statistics are taken from the input surface, not from
/// partially updated output.
pub fn reject_outliers(s: &Surface, threshold: f32, window: usize) -> Result<Surface> {
    if window < 3 || window.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "median window must be odd and at least 3, got {window}"
        )));
    }
    if !(threshold > 0.0) {
        return Err(Error::invalid("outlier threshold must be positive"));
    }
    let (nx, ny) = s.dims();
    let r = (window / 2) as isize;
    let mut out = s.clone();
    let mut buf = Vec::with_capacity(window * window);
    for y in 0..ny {
        for x in 0..nx {
            if !s.is_valid(x, y) {
                continue;
            }
            buf.clear();
            for dy in -r..=r {
                let yy = y as isize + dy;
                if yy < 0 || yy >= ny as isize {
                    continue;
                }
                for dx in -r..=r {
                    let xx = x as isize + dx;
                    if xx < 0 || xx >= nx as isize {
                        continue;
                    }
                    if let Some(z) = s.get(xx as usize, yy as usize) {
                        buf.push(f64::from(z));
                    }
                }
            }
            let m = median(&mut buf);
            if (f64::from(s.z(x, y)) - m).abs() > f64::from(threshold) {
                let i = out.index(x, y);
                out.valid[i] = false;
            }
        }
    }
    Ok(out)
}

const RELAX_SWEEPS: usize = 200;
const RELAX_TOLERANCE: f64 = 1e-4;

fn neighbors(x: usize, y: usize, nx: usize, ny: usize) -> impl Iterator<Item = usize> {
    let mut n = [None; 4];
    if x > 0 {
        n[0] = Some(y * nx + x - 1);
    }
    if x + 1 < nx {
        n[1] = Some(y * nx + x + 1);
    }
    if y > 0 {
        n[2] = Some((y - 1) * nx + x);
    }
    if y + 1 < ny {
        n[3] = Some((y + 1) * nx + x);
    }
    n.into_iter().flatten()
}

/// Fills invalid cells from their valid 4-neighbors.
///
/// Holes are first filled from the outside in (each newly reached cell takes
/// the mean of its already-known neighbors), then relaxed by Jacobi sweeps
/// toward the harmonic fill with the valid cells held fixed.
pub fn inpaint(s: &Surface) -> Result<Surface> {
    let (nx, ny) = s.dims();
    if s.valid_count() == 0 {
        return Err(Error::Degenerate(
            "surface has no valid cells to inpaint from".into(),
        ));
    }
    let mut z: Vec<f64> = s.z.iter().map(|&v| f64::from(v)).collect();
    let mut known = s.valid.clone();
    let holes: Vec<usize> = (0..z.len()).filter(|&i| !s.valid[i]).collect();
    if holes.is_empty() {
        return Ok(s.clone());
    }

    let mut pending = holes.clone();
    while !pending.is_empty() {
        let mut fills = Vec::new();
        let mut rest = Vec::new();
        for &i in &pending {
            let (x, y) = (i % nx, i / nx);
            let (sum, count) = neighbors(x, y, nx, ny)
                .filter(|&j| known[j])
                .fold((0.0, 0usize), |(s, c), j| (s + z[j], c + 1));
            if count > 0 {
                fills.push((i, sum / count as f64));
            } else {
                rest.push(i);
            }
        }
        for &(i, v) in &fills {
            z[i] = v;
            known[i] = true;
        }
        pending = rest;
    }

    for _ in 0..RELAX_SWEEPS {
        let prev = z.clone();
        let mut delta = 0.0f64;
        for &i in &holes {
            let (x, y) = (i % nx, i / nx);
            let (sum, count) =
                neighbors(x, y, nx, ny).fold((0.0, 0usize), |(s, c), j| (s + prev[j], c + 1));
            let v = sum / count as f64;
            delta = delta.max((v - prev[i]).abs());
            z[i] = v;
        }
        if delta < RELAX_TOLERANCE {
            break;
        }
    }

    Surface::new(
        nx,
        ny,
        z.into_iter().map(|v| v as f32).collect(),
        vec![true; nx * ny],
    )
}

/// Mean over the `(2r + 1)^2` window clipped to the surface bounds.
pub fn box_smooth(s: &Surface, radius: usize) -> Surface {
    if radius == 0 {
        return s.clone();
    }
    let (nx, ny) = s.dims();
    let z: Vec<f64> = s.z.iter().map(|&v| f64::from(v)).collect();
    let mut rows = vec![0.0f64; z.len()];
    for y in 0..ny {
        for x in 0..nx {
            let (a, b) = (x.saturating_sub(radius), (x + radius).min(nx - 1));
            let sum: f64 = z[y * nx + a..=y * nx + b].iter().sum();
            rows[y * nx + x] = sum / (b - a + 1) as f64;
        }
    }
    let mut out = s.clone();
    for y in 0..ny {
        let (a, b) = (y.saturating_sub(radius), (y + radius).min(ny - 1));
        for x in 0..nx {
            let sum: f64 = (a..=b).map(|yy| rows[yy * nx + x]).sum();
            out.z[y * nx + x] = (sum / (b - a + 1) as f64) as f32;
        }
    }
    out
}

/// Finalizes a surface: inpaint invalid cells, box-smooth with the given
/// radius and clamp to `[0, nz - 1]`. Every cell of the result is valid.
pub fn inpaint_and_smooth(s: &Surface, smooth_radius: usize, nz: usize) -> Result<Surface> {
    if nz == 0 {
        return Err(Error::invalid("depth must be positive"));
    }
    let filled = inpaint(s)?;
    let mut out = box_smooth(&filled, smooth_radius);
    let max_z = (nz - 1) as f32;
    for v in &mut out.z {
        *v = v.clamp(0.0, max_z);
    }
    Ok(out)
}

/// Cuts each column's range at the surface, `margin` voxels away from it.
///
/// `KeepAbove` lowers `hi` to `round(z) - margin`; `KeepBelow` raises `lo` to
/// `round(z) + margin`. Both are clamped to `[0, nz]` and intersected with
/// the incoming range. With `margin = 0` and `KeepAbove` the boundary sample
/// itself is excluded by the half-open convention.
pub fn truncate_above_surface(
    mask: &SearchMask,
    s: &Surface,
    margin: usize,
    side: KeepSide,
) -> Result<SearchMask> {
    if s.dims() != (mask.nx, mask.ny) {
        return Err(Error::invalid("surface and search mask dims differ"));
    }
    if !s.is_total() {
        return Err(Error::invalid("truncation needs a fully valid surface"));
    }
    let nz = mask.nz as i64;
    let mut out = mask.clone();
    for (column, &z) in s.z.iter().enumerate() {
        let at = z.round() as i64;
        match side {
            KeepSide::KeepAbove => {
                let hi = (at - margin as i64).clamp(0, nz) as usize;
                out.hi[column] = out.hi[column].min(hi);
            }
            KeepSide::KeepBelow => {
                let lo = (at + margin as i64).clamp(0, nz) as usize;
                out.lo[column] = out.lo[column].max(lo);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(values: &[f32]) -> Volume {
        Volume::new(1, 1, values.len(), values.to_vec()).unwrap()
    }

    #[test]
    fn argmax_examples() {
        let v = single(&[0.1, 0.9, 0.3]);
        let full = SearchMask::for_volume(&v);
        assert_eq!(argmax_per_ascan(&v, &full).unwrap().get(0, 0), Some(1.0));

        let ties = single(&[0.5, 0.5, 0.5]);
        assert_eq!(argmax_per_ascan(&ties, &full).unwrap().get(0, 0), Some(0.0));

        let restricted = SearchMask::new(1, 1, 3, vec![2], vec![3]).unwrap();
        assert_eq!(
            argmax_per_ascan(&v, &restricted).unwrap().get(0, 0),
            Some(2.0)
        );

        let empty = SearchMask::new(1, 1, 3, vec![2], vec![2]).unwrap();
        assert_eq!(argmax_per_ascan(&v, &empty).unwrap().get(0, 0), None);
    }

    #[test]
    fn spike_is_rejected() {
        let mut s = Surface::constant(9, 9, 50.0).unwrap();
        s.set(4, 4, 90.0, true);
        let out = reject_outliers(&s, 15.0, 5).unwrap();
        assert!(!out.is_valid(4, 4));
        assert_eq!(out.valid_count(), 80);
        assert_eq!(out.depths(), s.depths());
    }

    #[test]
    fn constant_surface_survives_rejection() {
        let s = Surface::constant(6, 4, 12.0).unwrap();
        assert_eq!(reject_outliers(&s, 15.0, 5).unwrap(), s);
        assert!(reject_outliers(&s, 15.0, 4).is_err());
        assert!(reject_outliers(&s, 15.0, 1).is_err());
        assert!(reject_outliers(&s, 0.0, 3).is_err());
    }

    #[test]
    fn single_hole_takes_neighbor_value() {
        let mut s = Surface::constant(5, 5, 50.0).unwrap();
        s.set(2, 2, 0.0, false);
        let out = inpaint_and_smooth(&s, 0, 480).unwrap();
        assert!(out.is_total());
        assert_eq!(out.z(2, 2), 50.0);
    }

    #[test]
    fn constant_surface_is_fixed_point() {
        let s = Surface::constant(7, 3, 21.5).unwrap();
        assert_eq!(inpaint_and_smooth(&s, 2, 100).unwrap(), s);
    }

    #[test]
    fn no_valid_cells_is_an_error() {
        let s = Surface::new(2, 2, vec![0.0; 4], vec![false; 4]).unwrap();
        assert!(inpaint_and_smooth(&s, 1, 10).is_err());
    }

    #[test]
    fn large_hole_gets_filled() {
        let mut s = Surface::from_fn(20, 20, |x, _| x as f32).unwrap();
        for y in 5..15 {
            for x in 5..15 {
                s.set(x, y, 0.0, false);
            }
        }
        let out = inpaint(&s).unwrap();
        assert!(out.is_total());
        // A linear ramp is harmonic, so the relaxed fill should recover it.
        for y in 5..15 {
            for x in 5..15 {
                assert!(
                    (out.z(x, y) - x as f32).abs() < 0.05,
                    "{x},{y}: {}",
                    out.z(x, y)
                );
            }
        }
    }

    #[test]
    fn smoothing_clamps_to_depth_range() {
        let s = Surface::from_fn(4, 4, |x, _| if x < 2 { -3.0 } else { 12.0 }).unwrap();
        let out = inpaint_and_smooth(&s, 0, 10).unwrap();
        assert!(out.depths().iter().all(|&z| (0.0..=9.0).contains(&z)));
    }

    #[test]
    fn truncation_examples() {
        let full = SearchMask::full(1, 1, 480);
        let rpe = Surface::constant(1, 1, 200.0).unwrap();
        let m = truncate_above_surface(&full, &rpe, 3, KeepSide::KeepAbove).unwrap();
        assert_eq!(m.range(0, 0), 0..197);

        let m = truncate_above_surface(&full, &rpe, 0, KeepSide::KeepAbove).unwrap();
        assert!(!m.range(0, 0).contains(&200));
        assert_eq!(m.range(0, 0).end, 200);

        let shallow = Surface::constant(1, 1, 1.0).unwrap();
        let m = truncate_above_surface(&full, &shallow, 3, KeepSide::KeepAbove).unwrap();
        assert!(m.range(0, 0).is_empty());
        assert_eq!(m.empty_columns(), 1);

        let m = truncate_above_surface(&full, &rpe, 3, KeepSide::KeepBelow).unwrap();
        assert_eq!(m.range(0, 0), 203..480);
    }

    #[test]
    fn restrict_replicates_range_edges() {
        let v = single(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let m = SearchMask::new(1, 1, 5, vec![1], vec![3]).unwrap();
        let r = m.restrict(&v).unwrap();
        assert_eq!(r.data(), &[2.0, 2.0, 3.0, 3.0, 3.0]);
    }

    fn sinusoid(nx: usize, ny: usize) -> Surface {
        Surface::from_fn(nx, ny, |x, y| {
            let (fx, fy) = (x as f32 / nx as f32, y as f32 / ny as f32);
            200.0
                + 10.0 * (std::f32::consts::TAU * fx).sin()
                + 5.0 * (std::f32::consts::TAU * fy).cos()
        })
        .unwrap()
    }

    /// Sprinkles `count` spikes of `magnitude` at distinct random cells.
    fn with_spikes(s: &Surface, count: usize, magnitude: f32, seed: u64) -> (Surface, Vec<bool>) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut out = s.clone();
        let mut spike = vec![false; s.len()];
        let mut placed = 0;
        while placed < count {
            let (x, y) = (rng.random_range(0..s.nx()), rng.random_range(0..s.ny()));
            let i = s.index(x, y);
            if !spike[i] {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                out.set(x, y, s.z(x, y) + sign * magnitude, true);
                spike[i] = true;
                placed += 1;
            }
        }
        (out, spike)
    }

    /// Brute-force window median over valid cells, center included.
    fn oracle_median(s: &Surface, x: usize, y: usize, window: usize) -> Option<f64> {
        let r = (window / 2) as isize;
        let mut vals: Vec<f64> = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                let (xx, yy) = (x as isize + dx, y as isize + dy);
                if xx >= 0 && yy >= 0 && (xx as usize) < s.nx() && (yy as usize) < s.ny() {
                    if let Some(z) = s.get(xx as usize, yy as usize) {
                        vals.push(f64::from(z));
                    }
                }
            }
        }
        if vals.is_empty() {
            return None;
        }
        vals.sort_by(f64::total_cmp);
        let n = vals.len();
        Some(if n % 2 == 1 {
            vals[n / 2]
        } else {
            0.5 * (vals[n / 2 - 1] + vals[n / 2])
        })
    }

    #[test]
    fn one_percent_spikes_match_median_oracle() {
        let clean = sinusoid(100, 60);
        let (spiked, spike) = with_spikes(&clean, 60, 40.0, 3);
        let out = reject_outliers(&spiked, 15.0, 5).unwrap();
        let mut caught = 0;
        for y in 0..60 {
            for x in 0..100 {
                let i = spiked.index(x, y);
                let m = oracle_median(&spiked, x, y, 5).unwrap();
                let expect_keep = (f64::from(spiked.z(x, y)) - m).abs() <= 15.0;
                assert_eq!(out.is_valid(x, y), expect_keep, "cell ({x}, {y})");
                assert_eq!(out.z(x, y).to_bits(), spiked.z(x, y).to_bits());
                if spike[i] && !out.is_valid(x, y) {
                    caught += 1;
                }
            }
        }
        assert!(caught as f64 >= 0.99 * 60.0, "caught {caught} of 60");
    }

    #[test]
    fn sinusoid_survives_spike_rejection_and_inpainting() {
        let clean = sinusoid(80, 40);
        let (spiked, _) = with_spikes(&clean, 64, 40.0, 4);
        let kept = reject_outliers(&spiked, 15.0, 5).unwrap();
        let fixed = inpaint_and_smooth(&kept, 2, 480).unwrap();
        let mse = fixed
            .depths()
            .iter()
            .zip(clean.depths())
            .map(|(a, b)| f64::from(a - b).powi(2))
            .sum::<f64>()
            / clean.len() as f64;
        assert!(mse.sqrt() <= 1.0, "rms {}", mse.sqrt());
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn rejection_only_touches_validity(
            (nx, ny) in (1usize..12, 1usize..12),
            seed in any::<u64>(),
            threshold in 0.5f32..30.0,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let z: Vec<f32> = (0..nx * ny).map(|_| rng.random_range(0.0..100.0)).collect();
            let valid: Vec<bool> = (0..nx * ny).map(|_| rng.random::<f32>() < 0.8).collect();
            let s = Surface::new(nx, ny, z, valid).unwrap();
            let out = reject_outliers(&s, threshold, 3).unwrap();
            prop_assert_eq!(out.depths(), s.depths());
            for (a, b) in out.validity().iter().zip(s.validity()) {
                prop_assert!(!*a || *b);
            }
        }
    }
}
