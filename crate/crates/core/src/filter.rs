//! Separable 3D filtering with edge replication.
//!
//! Kernels are applied as correlation: tap `t` of a profile of half-width `r`
//! weights the sample at offset `t - r`, so the first taps of an axial profile
//! look *above* the output voxel (smaller `k`). No kernel flip is performed.
//!
//! [`convolve_direct`] is the brute-force reference used to check
//! [`convolve_separable`]; it is O(n * |kernel|) and meant for small volumes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Which side of a boundary is brighter along the A-scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    /// Intensity drops with depth across the boundary.
    BrightAbove,
    /// Intensity rises with depth across the boundary.
    BrightBelow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeparableKernel {
    kz: Vec<f32>,
    kx: Vec<f32>,
    ky: Vec<f32>,
}

fn check_profile(name: &str, p: &[f32]) -> Result<()> {
    if p.is_empty() || p.len().is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "{name} profile must have odd length, got {}",
            p.len()
        )));
    }
    if p.iter().any(|c| !c.is_finite()) {
        return Err(Error::invalid(format!(
            "{name} profile has non-finite taps"
        )));
    }
    Ok(())
}

fn box_profile(len: usize) -> Vec<f32> {
    vec![1.0 / len as f32; len]
}

impl SeparableKernel {
    pub fn new(kz: Vec<f32>, kx: Vec<f32>, ky: Vec<f32>) -> Result<Self> {
        check_profile("kz", &kz)?;
        check_profile("kx", &kx)?;
        check_profile("ky", &ky)?;
        Ok(Self { kz, kx, ky })
    }

    pub fn identity() -> Self {
        Self {
            kz: vec![1.0],
            kx: vec![1.0],
            ky: vec![1.0],
        }
    }

    pub fn kz(&self) -> &[f32] {
        &self.kz
    }

    pub fn kx(&self) -> &[f32] {
        &self.kx
    }

    pub fn ky(&self) -> &[f32] {
        &self.ky
    }

    /// Dense `kz ⊗ kx ⊗ ky` kernel for the direct oracle.
    pub fn to_dense(&self) -> Kernel3D {
        let (sz, sx, sy) = (self.kz.len(), self.kx.len(), self.ky.len());
        let mut coeffs = Vec::with_capacity(sz * sx * sy);
        for &cy in &self.ky {
            for &cx in &self.kx {
                for &cz in &self.kz {
                    coeffs.push(f64::from(cz) * f64::from(cx) * f64::from(cy));
                }
            }
        }
        Kernel3D { sx, sy, sz, coeffs }
    }
}

/// Dense 3D kernel, laid out like [`Volume`] (depth innermost).
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel3D {
    sx: usize,
    sy: usize,
    sz: usize,
    coeffs: Vec<f64>,
}

impl Kernel3D {
    pub fn new(sx: usize, sy: usize, sz: usize, coeffs: Vec<f64>) -> Result<Self> {
        if [sx, sy, sz].iter().any(|&s| s == 0 || s % 2 == 0) {
            return Err(Error::invalid(format!(
                "kernel dims must be odd, got {sx}x{sy}x{sz}"
            )));
        }
        if coeffs.len() != sx * sy * sz {
            return Err(Error::invalid(
                "kernel coefficient count does not match dims",
            ));
        }
        Ok(Self { sx, sy, sz, coeffs })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.sx, self.sy, self.sz)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.coeffs[(y * self.sx + x) * self.sz + z]
    }
}

fn check_fits(v: &Volume, sx: usize, sy: usize, sz: usize) -> Result<()> {
    let (nx, ny, nz) = v.dims();
    for (axis, len, dim) in [("x", sx, nx), ("y", sy, ny), ("z", sz, nz)] {
        if len / 2 >= dim {
            return Err(Error::invalid(format!(
                "kernel half-width {} along {axis} does not fit volume dim {dim}",
                len / 2
            )));
        }
    }
    Ok(())
}

#[inline]
fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

fn is_identity(p: &[f32]) -> bool {
    p.len() == 1 && p[0] == 1.0
}

/// Axial pass: every A-scan filtered independently.
fn pass_z(src: &[f32], dst: &mut [f32], nz: usize, taps: &[f32]) {
    let r = taps.len() / 2;
    dst.par_chunks_mut(nz)
        .zip(src.par_chunks(nz))
        .for_each_init(
            || vec![0.0f32; nz + 2 * r],
            |padded, (out, col)| {
                padded[..r].fill(col[0]);
                padded[r..r + nz].copy_from_slice(col);
                padded[r + nz..].fill(col[nz - 1]);
                for (k, o) in out.iter_mut().enumerate() {
                    let window = &padded[k..k + taps.len()];
                    let mut acc = 0.0f32;
                    for (c, s) in taps.iter().zip(window) {
                        acc += c * s;
                    }
                    *o = acc;
                }
            },
        );
}

/// Pass along `x` within each B-scan slab of `nx * nz` voxels.
fn pass_x(src: &[f32], dst: &mut [f32], nx: usize, nz: usize, taps: &[f32]) {
    let r = taps.len() as isize / 2;
    let slab = nx * nz;
    dst.par_chunks_mut(slab)
        .zip(src.par_chunks(slab))
        .for_each(|(out, input)| {
            for x in 0..nx {
                let row = &mut out[x * nz..(x + 1) * nz];
                row.fill(0.0);
                for (t, &c) in taps.iter().enumerate() {
                    let sx = clamp_index(x as isize + t as isize - r, nx);
                    let srow = &input[sx * nz..(sx + 1) * nz];
                    for (o, &s) in row.iter_mut().zip(srow) {
                        *o += c * s;
                    }
                }
            }
        });
}

/// Pass along `y`: each output slab is a weighted sum of input slabs.
fn pass_y(src: &[f32], dst: &mut [f32], ny: usize, slab: usize, taps: &[f32]) {
    let r = taps.len() as isize / 2;
    dst.par_chunks_mut(slab).enumerate().for_each(|(y, out)| {
        out.fill(0.0);
        for (t, &c) in taps.iter().enumerate() {
            let sy = clamp_index(y as isize + t as isize - r, ny);
            let sslab = &src[sy * slab..(sy + 1) * slab];
            for (o, &s) in out.iter_mut().zip(sslab) {
                *o += c * s;
            }
        }
    });
}

/// Filters `v` with `kz ⊗ kx ⊗ ky` using edge replication at every face.
///
/// Output is the raw filter response; no re-normalization is applied. The
/// summation order per voxel is fixed, so results do not depend on the
/// number of worker threads.
pub fn convolve_separable(v: &Volume, k: &SeparableKernel) -> Result<Volume> {
    check_fits(v, k.kx.len(), k.ky.len(), k.kz.len())?;
    let (nx, ny, nz) = v.dims();
    let mut cur = v.data().to_vec();
    let mut scratch = vec![0.0f32; cur.len()];

    if !is_identity(&k.kz) {
        pass_z(&cur, &mut scratch, nz, &k.kz);
        std::mem::swap(&mut cur, &mut scratch);
    }
    if !is_identity(&k.kx) {
        pass_x(&cur, &mut scratch, nx, nz, &k.kx);
        std::mem::swap(&mut cur, &mut scratch);
    }
    if !is_identity(&k.ky) {
        pass_y(&cur, &mut scratch, ny, nx * nz, &k.ky);
        std::mem::swap(&mut cur, &mut scratch);
    }
    Ok(v.like(cur))
}

/// Reference triple-loop filtering with the same correlation and border
/// semantics as [`convolve_separable`]. Accumulates in `f64`.
pub fn convolve_direct(v: &Volume, k: &Kernel3D) -> Result<Volume> {
    let (sx, sy, sz) = k.dims();
    check_fits(v, sx, sy, sz)?;
    let (nx, ny, nz) = v.dims();
    let (rx, ry, rz) = (sx as isize / 2, sy as isize / 2, sz as isize / 2);
    let mut out = Vec::with_capacity(v.len());
    for y in 0..ny {
        for x in 0..nx {
            for z in 0..nz {
                let mut acc = 0.0f64;
                for ty in 0..sy {
                    let iy = clamp_index(y as isize + ty as isize - ry, ny);
                    for tx in 0..sx {
                        let ix = clamp_index(x as isize + tx as isize - rx, nx);
                        for tz in 0..sz {
                            let iz = clamp_index(z as isize + tz as isize - rz, nz);
                            acc += k.get(tx, ty, tz) * f64::from(v.get(ix, iy, iz));
                        }
                    }
                }
                out.push(acc as f32);
            }
        }
    }
    Ok(v.like(out))
}

/// Axial step detector with lateral box averaging.
///
/// The axial profile has `2m + 1` taps: `+1/m` on the `m` samples above the
/// center, `0` at the center and `-1/m` below for [`Polarity::BrightAbove`],
/// negated for [`Polarity::BrightBelow`]. The response is therefore the mean
/// intensity on the bright side minus the mean on the dark side.
pub fn make_derivative_kernel(
    half_width: usize,
    polarity: Polarity,
    lateral: usize,
) -> Result<SeparableKernel> {
    if half_width == 0 {
        return Err(Error::invalid("derivative half-width must be at least 1"));
    }
    if lateral == 0 || lateral.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "lateral size must be odd and positive, got {lateral}"
        )));
    }
    let tap = 1.0 / half_width as f32;
    let sign = match polarity {
        Polarity::BrightAbove => 1.0,
        Polarity::BrightBelow => -1.0,
    };
    let mut kz = vec![sign * tap; half_width];
    kz.push(0.0);
    kz.extend(std::iter::repeat_n(-sign * tap, half_width));
    SeparableKernel::new(kz, box_profile(lateral), box_profile(lateral))
}

/// Uniform `(2r + 1)^3` box.
pub fn make_smoothing_kernel(radius: usize) -> Result<SeparableKernel> {
    if radius == 0 {
        return Err(Error::invalid("smoothing radius must be at least 1"));
    }
    let len = 2 * radius + 1;
    SeparableKernel::new(box_profile(len), box_profile(len), box_profile(len))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(rng: &mut ChaCha8Rng, nx: usize, ny: usize, nz: usize) -> Volume {
        Volume::from_fn(nx, ny, nz, |_, _, _| rng.random::<f32>()).unwrap()
    }

    fn max_abs_diff(a: &Volume, b: &Volume) -> f32 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f32::max)
    }

    #[test]
    fn identity_kernel_is_bitwise_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = random_volume(&mut rng, 5, 4, 6);
        let out = convolve_separable(&v, &SeparableKernel::identity()).unwrap();
        assert_eq!(out, v);
        let dense = Kernel3D::new(1, 1, 1, vec![1.0]).unwrap();
        assert_eq!(convolve_direct(&v, &dense).unwrap(), v);
    }

    #[test]
    fn impulse_response_of_ones_kernel() {
        let mut v = Volume::zeros(5, 5, 5).unwrap();
        v.set(2, 2, 2, 1.0);
        let ones = Kernel3D::new(3, 3, 3, vec![1.0; 27]).unwrap();
        let out = convolve_direct(&v, &ones).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                for k in 0..5 {
                    let inside =
                        (1..=3).contains(&x) && (1..=3).contains(&y) && (1..=3).contains(&k);
                    assert_eq!(out.get(x, y, k), if inside { 1.0 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn derivative_of_constant_is_zero_everywhere() {
        let v = Volume::filled(6, 5, 12, 0.37).unwrap();
        let k = make_derivative_kernel(3, Polarity::BrightAbove, 3).unwrap();
        let out = convolve_separable(&v, &k).unwrap();
        assert!(out.data().iter().all(|&x| x.abs() < 1e-6));
    }

    #[test]
    fn separable_matches_direct_on_9_cubed() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v = random_volume(&mut rng, 9, 9, 9);
        let mut taps = || {
            (0..3)
                .map(|_| rng.random_range(-1.0f32..1.0))
                .collect::<Vec<_>>()
        };
        let k = SeparableKernel::new(taps(), taps(), taps()).unwrap();
        let a = convolve_separable(&v, &k).unwrap();
        let b = convolve_direct(&v, &k.to_dense()).unwrap();
        assert!(max_abs_diff(&a, &b) <= 1e-5);
    }

    #[test]
    fn oversized_kernel_is_rejected() {
        let v = Volume::zeros(4, 4, 3).unwrap();
        let k = make_smoothing_kernel(3).unwrap();
        assert!(matches!(
            convolve_separable(&v, &k),
            Err(Error::InvalidArgument(_))
        ));
        assert!(convolve_direct(&v, &k.to_dense()).is_err());
    }

    #[test]
    fn derivative_profiles() {
        let k = make_derivative_kernel(1, Polarity::BrightAbove, 1).unwrap();
        assert_eq!(k.kz(), &[1.0, 0.0, -1.0]);
        let k = make_derivative_kernel(2, Polarity::BrightBelow, 3).unwrap();
        assert_eq!(k.kz(), &[-0.5, -0.5, 0.0, 0.5, 0.5]);
        assert_eq!(k.kx().len(), 3);
        assert!((k.kx().iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert!(make_derivative_kernel(2, Polarity::BrightAbove, 4).is_err());
        assert!(make_derivative_kernel(0, Polarity::BrightAbove, 3).is_err());
    }

    #[test]
    fn smoothing_profile_radius_one() {
        let k = make_smoothing_kernel(1).unwrap();
        for p in [k.kz(), k.kx(), k.ky()] {
            assert_eq!(p, &[1.0 / 3.0; 3]);
        }
        assert!(make_smoothing_kernel(0).is_err());
    }

    #[test]
    fn smoothing_keeps_constant_volume() {
        let v = Volume::filled(7, 6, 9, 0.25).unwrap();
        let out = convolve_separable(&v, &make_smoothing_kernel(2).unwrap()).unwrap();
        assert!(out.data().iter().all(|&x| (x - 0.25).abs() < 1e-6));
    }

    #[test]
    fn step_response_peaks_on_last_bright_sample() {
        // Samples 0..=50 are bright, 51.. dark. With a zero center tap the
        // response plateaus over {50, 51}; the first maximum is k = 50.
        let v = Volume::from_fn(3, 3, 100, |_, _, k| if k <= 50 { 1.0 } else { 0.0 }).unwrap();
        let kern = make_derivative_kernel(5, Polarity::BrightAbove, 3).unwrap();
        let out = convolve_separable(&v, &kern).unwrap();
        let col = out.ascan(1, 1);
        // Direct evaluation: mean(above) - mean(below).
        let expected: Vec<f32> = (0..100)
            .map(|k: i32| {
                let s = |o: i32| if (k + o).clamp(0, 99) <= 50 { 1.0 } else { 0.0 };
                ((1..=5).map(|j| s(-j) - s(j)).sum::<f32>()) / 5.0
            })
            .collect();
        for (a, e) in col.iter().zip(&expected) {
            assert!((a - e).abs() < 1e-6);
        }
        let best = col.iter().enumerate().fold(
            (0, f32::MIN),
            |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc },
        );
        assert_eq!(best.0, 50);
    }

    #[test]
    fn convolution_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let u = random_volume(&mut rng, 8, 7, 12);
        let w = random_volume(&mut rng, 8, 7, 12);
        let (a, b) = (0.7f32, -1.3f32);
        let mix = Volume::new(
            8,
            7,
            12,
            u.data()
                .iter()
                .zip(w.data())
                .map(|(p, q)| a * p + b * q)
                .collect(),
        )
        .unwrap();
        let k = make_derivative_kernel(3, Polarity::BrightBelow, 3).unwrap();
        let lhs = convolve_separable(&mix, &k).unwrap();
        let (cu, cw) = (
            convolve_separable(&u, &k).unwrap(),
            convolve_separable(&w, &k).unwrap(),
        );
        for ((l, p), q) in lhs.data().iter().zip(cu.data()).zip(cw.data()) {
            assert!(
                (l - (a * p + b * q)).abs() <= 1e-6,
                "{l} vs {}",
                a * p + b * q
            );
        }
    }

    #[test]
    fn smoothing_reduces_per_ascan_variance_of_speckle() {
        use crate::phantom::{generate_phantom, PhantomSpec};
        let spec = PhantomSpec::retina(24, 8, 96).with_speckle(2.0, 5);
        let (v, _) = generate_phantom(&spec).unwrap();
        let s = convolve_separable(&v, &make_smoothing_kernel(2).unwrap()).unwrap();
        let variance = |a: &[f32]| {
            let n = a.len() as f64;
            let m = a.iter().map(|&x| f64::from(x)).sum::<f64>() / n;
            a.iter().map(|&x| (f64::from(x) - m).powi(2)).sum::<f64>() / n
        };
        for y in 0..8 {
            for x in 0..24 {
                assert!(
                    variance(s.ascan(x, y)) < variance(v.ascan(x, y)),
                    "column ({x}, {y})"
                );
            }
        }
    }

    fn odd_profile(max_half: usize) -> impl Strategy<Value = Vec<f32>> {
        (0..=max_half).prop_flat_map(|h| proptest::collection::vec(-1.0f32..1.0, 2 * h + 1))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn separable_equals_direct(
            (nx, ny, nz) in (4usize..=12, 4usize..=12, 4usize..=16),
            kz in odd_profile(3),
            kx in odd_profile(3),
            ky in odd_profile(3),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = random_volume(&mut rng, nx, ny, nz);
            let k = SeparableKernel::new(kz, kx, ky).unwrap();
            let a = convolve_separable(&v, &k).unwrap();
            let b = convolve_direct(&v, &k.to_dense()).unwrap();
            prop_assert!(max_abs_diff(&a, &b) <= 1e-5);
        }
    }
}
