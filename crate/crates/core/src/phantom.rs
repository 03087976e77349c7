//! Synthetic layered-retina volumes with exact ground-truth surfaces.
//!
//! The noiseless phantom is piecewise constant along each A-scan with
//! partial-volume sampling (voxel `k` covers depths `[k - 0.5, k + 0.5)`):
//!
//! ```text
//!   vitreous | nerve fiber | inner retina | IS/OS band | inner retina | RPE band | choroid
//!           ILM                          IS/OS                               RPE
//! ```
//!
//! The IS/OS band hangs below the IS/OS surface and the RPE band sits above
//! the RPE surface, so every ground-truth surface is a sharp intensity step.
//! Speckle is fully developed multiplicative noise: each voxel is scaled by a
//! unit-mean gamma variate with shape `looks`.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::surface::Surface;
use crate::volume::{Spacing, Volume};

/// `z(x, y) = base + dip * gauss(x, y) + undulation * sin(2π (x / nx + y / (2 ny)))`.
///
/// A positive `dip_amplitude` pushes the surface deeper around the dip center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurfaceGenerator {
    pub base_depth: f64,
    #[serde(default)]
    pub dip_amplitude: f64,
    /// Gaussian sigma of the dip along `x` and `y`, in columns.
    #[serde(default = "unit_width")]
    pub dip_width: [f64; 2],
    #[serde(default)]
    pub undulation_amplitude: f64,
}

fn unit_width() -> [f64; 2] {
    [1.0, 1.0]
}

impl SurfaceGenerator {
    pub fn flat(depth: f64) -> Self {
        Self {
            base_depth: depth,
            dip_amplitude: 0.0,
            dip_width: unit_width(),
            undulation_amplitude: 0.0,
        }
    }

    fn eval(&self, x: f64, y: f64, nx: usize, ny: usize, center: [f64; 2]) -> f64 {
        let (dx, dy) = (
            (x - center[0]) / self.dip_width[0],
            (y - center[1]) / self.dip_width[1],
        );
        let dip = self.dip_amplitude * (-0.5 * (dx * dx + dy * dy)).exp();
        let phase = 2.0 * PI * (x / nx as f64 + 0.5 * y / ny as f64);
        self.base_depth + dip + self.undulation_amplitude * phase.sin()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerIntensities {
    pub vitreous: f64,
    /// Bright layer directly below the ILM.
    #[serde(default = "default_nerve_fiber")]
    pub nerve_fiber: f64,
    pub inner_retina: f64,
    pub isos_band: f64,
    pub rpe_band: f64,
    pub choroid: f64,
}

impl Default for LayerIntensities {
    fn default() -> Self {
        Self {
            vitreous: 0.02,
            nerve_fiber: default_nerve_fiber(),
            inner_retina: 0.3,
            isos_band: 0.7,
            rpe_band: 0.9,
            choroid: 0.15,
        }
    }
}

fn default_nerve_fiber() -> f64 {
    0.45
}

/// A focal abnormality: the ILM is lifted by up to `ilm_displacement`
/// voxels with a raised-cosine profile over the lateral disk of `radius`
/// around `center`, and voxels inside the sphere of `radius` around
/// `center` (in voxel units) change intensity by `intensity_delta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lesion {
    /// `(x, y, z)` in voxels.
    pub center: [f64; 3],
    pub radius: f64,
    pub intensity_delta: f64,
    #[serde(default)]
    pub ilm_displacement: f64,
}

impl Lesion {
    fn lateral_distance(&self, x: f64, y: f64) -> f64 {
        ((x - self.center[0]).powi(2) + (y - self.center[1]).powi(2)).sqrt()
    }

    /// Whether column `(x, y)` lies inside the lesion footprint.
    pub fn covers(&self, x: usize, y: usize) -> bool {
        self.lateral_distance(x as f64, y as f64) < self.radius
    }

    fn bump(&self, x: f64, y: f64) -> f64 {
        let r = self.lateral_distance(x, y);
        if r < self.radius {
            0.5 * (1.0 + (PI * r / self.radius).cos())
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    /// `(nx, ny, nz)`.
    pub dims: [usize; 3],
    pub ilm: SurfaceGenerator,
    pub isos: SurfaceGenerator,
    pub rpe: SurfaceGenerator,
    /// Dip center `(x, y)`; defaults to the middle of the en-face plane.
    #[serde(default)]
    pub dip_center: Option<[f64; 2]>,
    #[serde(default)]
    pub intensities: LayerIntensities,
    /// Thickness of the nerve-fiber layer below the ILM; zero omits it.
    #[serde(default)]
    pub nerve_fiber_thickness: f64,
    /// Half-thickness of the IS/OS band below the IS/OS surface.
    pub isos_half_thickness: f64,
    /// Half-thickness of the RPE band above the RPE surface.
    pub rpe_half_thickness: f64,
    #[serde(default)]
    pub lesion: Option<Lesion>,
    /// Speckle look count; `None` gives a noiseless phantom.
    #[serde(default)]
    pub looks: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    /// `(dx, dy, dz)` in micrometers, carried into the volume.
    #[serde(default)]
    pub spacing_um: Option<[f64; 3]>,
}

/// Minimum inner-retina thickness between ILM and IS/OS, in voxels.
const MIN_SEPARATION: f64 = 1.0;

impl PhantomSpec {
    /// A foveal-like retina scaled to the given dims: ILM near 30% depth with
    /// a Gaussian dip, IS/OS 14 voxels above an RPE at 60% depth, all three
    /// sharing a gentle undulation. Noiseless; set `looks` for speckle.
    /// Layers collide below roughly `nz = 96`.
    pub fn retina(nx: usize, ny: usize, nz: usize) -> Self {
        let depth = nz as f64;
        let undulation = 0.02 * depth;
        let width = [0.12 * nx as f64, 0.25 * ny as f64];
        let rpe_depth = 0.6 * depth;
        Self {
            dims: [nx, ny, nz],
            ilm: SurfaceGenerator {
                base_depth: 0.3 * depth,
                dip_amplitude: 0.05 * depth,
                dip_width: width,
                undulation_amplitude: undulation,
            },
            isos: SurfaceGenerator {
                base_depth: rpe_depth - 14.0,
                dip_amplitude: 0.005 * depth,
                dip_width: width,
                undulation_amplitude: undulation,
            },
            rpe: SurfaceGenerator {
                base_depth: rpe_depth,
                dip_amplitude: 0.0,
                dip_width: width,
                undulation_amplitude: undulation,
            },
            dip_center: None,
            intensities: LayerIntensities::default(),
            nerve_fiber_thickness: 3.0,
            isos_half_thickness: 1.5,
            rpe_half_thickness: 1.5,
            lesion: None,
            looks: None,
            seed: 0,
            spacing_um: Some([20.0, 60.0, 3400.0 / 480.0]),
        }
    }

    pub fn with_speckle(mut self, looks: f64, seed: u64) -> Self {
        self.looks = Some(looks);
        self.seed = seed;
        self
    }

    pub fn with_lesion(mut self, lesion: Lesion) -> Self {
        self.lesion = Some(lesion);
        self
    }

    /// A lesion in the middle of the field, lifting the ILM and darkening
    /// the inner retina beneath it.
    pub fn default_lesion(&self) -> Lesion {
        let [nx, ny, nz] = self.dims;
        let cx = 0.7 * nx as f64;
        let cy = 0.5 * ny as f64;
        let ilm = self.ilm.eval(cx, cy, nx, ny, self.center());
        let isos = self.isos.eval(cx, cy, nx, ny, self.center());
        Lesion {
            center: [cx, cy, 0.5 * (ilm + isos)],
            radius: 0.15 * nx.min(4 * ny) as f64,
            intensity_delta: -0.2,
            ilm_displacement: 0.04 * nz as f64,
        }
    }

    fn center(&self) -> [f64; 2] {
        self.dip_center.unwrap_or([
            0.5 * (self.dims[0] as f64 - 1.0),
            0.5 * (self.dims[1] as f64 - 1.0),
        ])
    }

    pub fn validate(&self) -> Result<()> {
        let [nx, ny, nz] = self.dims;
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::invalid("phantom dims must be positive"));
        }
        let l = &self.intensities;
        for (name, v) in [
            ("vitreous", l.vitreous),
            ("nerve_fiber", l.nerve_fiber),
            ("inner_retina", l.inner_retina),
            ("isos_band", l.isos_band),
            ("rpe_band", l.rpe_band),
            ("choroid", l.choroid),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!(
                    "{name} intensity {v} outside [0, 1]"
                )));
            }
        }
        if let Some(looks) = self.looks {
            if !(looks >= 1.0) {
                return Err(Error::invalid(format!(
                    "looks must be at least 1, got {looks}"
                )));
            }
        }
        if !(self.isos_half_thickness > 0.0 && self.rpe_half_thickness > 0.0) {
            return Err(Error::invalid("band half-thicknesses must be positive"));
        }
        if !(self.nerve_fiber_thickness >= 0.0) {
            return Err(Error::invalid("nerve-fiber thickness must be non-negative"));
        }
        if let Some(lesion) = &self.lesion {
            if !(lesion.radius > 0.0) {
                return Err(Error::invalid("lesion radius must be positive"));
            }
        }
        Ok(())
    }

    /// Exact surfaces, checked against the depth range and layer ordering.
    pub fn ground_truth(&self) -> Result<GroundTruth> {
        self.validate()?;
        let [nx, ny, nz] = self.dims;
        let c = self.center();
        let lesion = self.lesion.as_ref();
        let mut ilm = Vec::with_capacity(nx * ny);
        let mut isos = Vec::with_capacity(nx * ny);
        let mut rpe = Vec::with_capacity(nx * ny);
        for y in 0..ny {
            for x in 0..nx {
                let (fx, fy) = (x as f64, y as f64);
                let lift = lesion.map_or(0.0, |l| l.ilm_displacement * l.bump(fx, fy));
                let zi = self.ilm.eval(fx, fy, nx, ny, c) - lift;
                let zs = self.isos.eval(fx, fy, nx, ny, c);
                let zr = self.rpe.eval(fx, fy, nx, ny, c);
                if zi < 0.0 || zr > (nz - 1) as f64 {
                    return Err(Error::invalid(format!(
                        "surfaces leave the depth range at column ({x}, {y})"
                    )));
                }
                if zi + self.nerve_fiber_thickness + MIN_SEPARATION > zs
                    || zs + 2.0 * self.isos_half_thickness > zr - 2.0 * self.rpe_half_thickness
                {
                    return Err(Error::invalid(format!(
                        "layers overlap at column ({x}, {y})"
                    )));
                }
                ilm.push(zi as f32);
                isos.push(zs as f32);
                rpe.push(zr as f32);
            }
        }
        Ok(GroundTruth {
            ilm: Surface::from_depths(nx, ny, ilm)?,
            isos: Surface::from_depths(nx, ny, isos)?,
            rpe: Surface::from_depths(nx, ny, rpe)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub ilm: Surface,
    pub isos: Surface,
    pub rpe: Surface,
}

/// Length of `[a, b)` ∩ `[lo, hi)`.
fn overlap(a: f64, b: f64, lo: f64, hi: f64) -> f64 {
    (b.min(hi) - a.max(lo)).max(0.0)
}

fn noiseless_volume(spec: &PhantomSpec, truth: &GroundTruth) -> Result<Volume> {
    let [nx, ny, nz] = spec.dims;
    let l = &spec.intensities;
    let mut data = vec![0.0f32; nx * ny * nz];
    data.par_chunks_mut(nz)
        .enumerate()
        .for_each(|(column, ascan)| {
            let (x, y) = (column % nx, column / nx);
            let ilm = f64::from(truth.ilm.z(x, y));
            let isos = f64::from(truth.isos.z(x, y));
            let rpe = f64::from(truth.rpe.z(x, y));
            let nfl_bottom = ilm + spec.nerve_fiber_thickness;
            let isos_bottom = isos + 2.0 * spec.isos_half_thickness;
            let rpe_top = rpe - 2.0 * spec.rpe_half_thickness;
            let layers = [
                (f64::NEG_INFINITY, ilm, l.vitreous),
                (ilm, nfl_bottom, l.nerve_fiber),
                (nfl_bottom, isos, l.inner_retina),
                (isos, isos_bottom, l.isos_band),
                (isos_bottom, rpe_top, l.inner_retina),
                (rpe_top, rpe, l.rpe_band),
                (rpe, f64::INFINITY, l.choroid),
            ];
            for (k, v) in ascan.iter_mut().enumerate() {
                let (a, b) = (k as f64 - 0.5, k as f64 + 0.5);
                let mut value: f64 = layers
                    .iter()
                    .map(|&(lo, hi, i)| overlap(a, b, lo, hi) * i)
                    .sum();
                if let Some(lesion) = &spec.lesion {
                    let d2 = (x as f64 - lesion.center[0]).powi(2)
                        + (y as f64 - lesion.center[1]).powi(2)
                        + (k as f64 - lesion.center[2]).powi(2);
                    if d2 < lesion.radius * lesion.radius {
                        value += lesion.intensity_delta;
                    }
                }
                *v = value.clamp(0.0, 1.0) as f32;
            }
        });
    let spacing = spec.spacing_um.map(|[dx, dy, dz]| Spacing { dx, dy, dz });
    Ok(Volume::new(nx, ny, nz, data)?.with_spacing(spacing))
}

/// Builds the phantom volume and its ground truth. Speckle is applied when
/// `spec.looks` is set.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, GroundTruth)> {
    let truth = spec.ground_truth()?;
    let mut volume = noiseless_volume(spec, &truth)?;
    if let Some(looks) = spec.looks {
        volume = add_speckle(&volume, looks, spec.seed)?;
    }
    Ok((volume, truth))
}

/// SplitMix64 finalizer; decorrelates per-column seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn column_seed(seed: u64, x: usize, y: usize) -> u64 {
    mix(mix(mix(seed) ^ x as u64) ^ ((y as u64) << 32))
}

/// Multiplies every voxel by an independent `Gamma(looks, 1 / looks)` draw
/// and clamps to `[0, 1]`.
///
/// Each A-scan has its own generator seeded from `(seed, x, y)` and draws in
/// depth order, so the result does not depend on thread scheduling.
pub fn add_speckle(v: &Volume, looks: f64, seed: u64) -> Result<Volume> {
    if !(looks >= 1.0) || !looks.is_finite() {
        return Err(Error::invalid(format!(
            "looks must be at least 1, got {looks}"
        )));
    }
    let gamma = Gamma::new(looks, 1.0 / looks)
        .map_err(|e| Error::invalid(format!("gamma distribution: {e}")))?;
    let (nx, _, nz) = v.dims();
    let mut data = v.data().to_vec();
    data.par_chunks_mut(nz)
        .enumerate()
        .for_each(|(column, ascan)| {
            let mut rng = ChaCha8Rng::seed_from_u64(column_seed(seed, column % nx, column / nx));
            for value in ascan.iter_mut() {
                let g: f64 = gamma.sample(&mut rng);
                *value = (f64::from(*value) * g).clamp(0.0, 1.0) as f32;
            }
        });
    Ok(v.like(data))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurfaceError {
    pub rms: f64,
    pub mean_abs: f64,
    pub p95: f64,
    pub max_abs: f64,
    #[serde(skip)]
    abs_errors: Vec<f64>,
}

impl SurfaceError {
    /// Fraction of columns with absolute error at most `t` voxels.
    pub fn frac_within(&self, t: f64) -> f64 {
        let n = self.abs_errors.iter().filter(|&&e| e <= t).count();
        n as f64 / self.abs_errors.len() as f64
    }
}

pub fn surface_error(est: &Surface, truth: &Surface) -> Result<SurfaceError> {
    if est.dims() != truth.dims() {
        return Err(Error::invalid(format!(
            "surface dims differ: {:?} vs {:?}",
            est.dims(),
            truth.dims()
        )));
    }
    if !est.is_total() || !truth.is_total() {
        return Err(Error::invalid("surface error needs fully valid surfaces"));
    }
    let mut abs_errors: Vec<f64> = est
        .depths()
        .iter()
        .zip(truth.depths())
        .map(|(&a, &b)| (f64::from(a) - f64::from(b)).abs())
        .collect();
    let n = abs_errors.len() as f64;
    let rms = (abs_errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    let mean_abs = abs_errors.iter().sum::<f64>() / n;
    abs_errors.sort_unstable_by(|a, b| a.total_cmp(b));
    let rank = ((0.95 * n).ceil() as usize).clamp(1, abs_errors.len());
    Ok(SurfaceError {
        rms,
        mean_abs,
        p95: abs_errors[rank - 1],
        max_abs: *abs_errors.last().unwrap_or(&0.0),
        abs_errors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_spec() -> PhantomSpec {
        PhantomSpec {
            dims: [4, 3, 480],
            ilm: SurfaceGenerator::flat(100.0),
            isos: SurfaceGenerator::flat(180.0),
            rpe: SurfaceGenerator::flat(200.0),
            dip_center: None,
            intensities: LayerIntensities::default(),
            nerve_fiber_thickness: 0.0,
            isos_half_thickness: 3.0,
            rpe_half_thickness: 2.0,
            lesion: None,
            looks: None,
            seed: 0,
            spacing_um: None,
        }
    }

    #[test]
    fn flat_profile_is_the_step_profile() {
        let (v, truth) = generate_phantom(&flat_spec()).unwrap();
        let l = LayerIntensities::default();
        let col = v.ascan(2, 1);
        let at = |k: usize| f64::from(col[k]);
        let close = |a: f64, b: f64| (a - b).abs() < 1e-6;
        assert!(close(at(50), l.vitreous));
        assert!(close(at(99), l.vitreous));
        // Voxel 100 straddles the ILM at 100.0.
        assert!(close(at(100), 0.5 * (l.vitreous + l.inner_retina)));
        assert!(close(at(101), l.inner_retina));
        assert!(close(at(182), l.isos_band));
        assert!(close(at(190), l.inner_retina));
        assert!(close(at(197), l.rpe_band));
        assert!(close(at(250), l.choroid));
        assert_eq!(truth.rpe.z(0, 0), 200.0);
    }

    #[test]
    fn seeded_generation_is_deterministic() {
        let spec = flat_spec().with_speckle(4.0, 17);
        let (a, _) = generate_phantom(&spec).unwrap();
        let (b, _) = generate_phantom(&spec).unwrap();
        assert_eq!(a, b);
        let (c, _) = generate_phantom(&flat_spec().with_speckle(4.0, 18)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn lesion_changes_only_its_footprint() {
        let spec = PhantomSpec::retina(48, 12, 128).with_speckle(4.0, 3);
        let lesion = spec.default_lesion();
        let (plain, _) = generate_phantom(&spec).unwrap();
        let (sick, _) = generate_phantom(&spec.clone().with_lesion(lesion.clone())).unwrap();
        let mut changed = 0;
        for y in 0..12 {
            for x in 0..48 {
                if plain.ascan(x, y) != sick.ascan(x, y) {
                    assert!(
                        lesion.covers(x, y),
                        "column ({x}, {y}) changed outside lesion"
                    );
                    changed += 1;
                }
            }
        }
        assert!(changed > 0);
    }

    #[test]
    fn invalid_specs() {
        let mut s = flat_spec();
        s.rpe = SurfaceGenerator::flat(500.0);
        assert!(generate_phantom(&s).is_err());
        let mut s = flat_spec();
        s.isos = SurfaceGenerator::flat(99.0);
        assert!(generate_phantom(&s).is_err());
        let mut s = flat_spec();
        s.looks = Some(0.5);
        assert!(generate_phantom(&s).is_err());
        let mut s = flat_spec();
        s.intensities.choroid = 1.5;
        assert!(generate_phantom(&s).is_err());
    }

    #[test]
    fn speckle_concentrates_for_many_looks() {
        let v = Volume::filled(20, 20, 50, 0.5).unwrap();
        let out = add_speckle(&v, 10_000.0, 1).unwrap();
        let within = out
            .data()
            .iter()
            .filter(|&&x| (x - 0.5).abs() <= 0.025)
            .count();
        assert!(within as f64 >= 0.999 * out.len() as f64);
    }

    #[test]
    fn speckle_has_unit_mean() {
        // 0.5 * Gamma(4, 1/4) exceeds 1 with probability ~0.04%, so
        // clamping barely moves the mean.
        let v = Volume::filled(100, 10, 100, 0.5).unwrap();
        let out = add_speckle(&v, 4.0, 7).unwrap();
        let mean = out.data().iter().map(|&x| f64::from(x)).sum::<f64>() / out.len() as f64;
        assert!((mean - 0.5).abs() <= 0.01, "{mean}");
    }

    #[test]
    fn speckle_of_zero_is_zero() {
        let v = Volume::zeros(5, 5, 5).unwrap();
        assert_eq!(add_speckle(&v, 1.0, 0).unwrap(), v);
        assert!(add_speckle(&v, 0.9, 0).is_err());
    }

    #[test]
    fn error_statistics() {
        let truth = Surface::from_fn(10, 10, |x, y| (x + y) as f32).unwrap();
        let e = surface_error(&truth, &truth).unwrap();
        assert_eq!(e.rms, 0.0);
        let shifted = Surface::from_fn(10, 10, |x, y| (x + y) as f32 + 1.0).unwrap();
        let e = surface_error(&shifted, &truth).unwrap();
        assert!((e.rms - 1.0).abs() < 1e-12);
        assert!((e.mean_abs - 1.0).abs() < 1e-12);
        assert_eq!(e.frac_within(1.0), 1.0);
        assert_eq!(e.frac_within(0.5), 0.0);
        assert!(surface_error(&Surface::constant(2, 2, 0.0).unwrap(), &truth).is_err());
    }

    #[test]
    fn rms_of_unit_noise() {
        use rand_distr::StandardNormal;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let truth = Surface::constant(100, 100, 50.0).unwrap();
        let noisy = Surface::from_fn(100, 100, |_, _| {
            let n: f64 = StandardNormal.sample(&mut rng);
            50.0 + n as f32
        })
        .unwrap();
        let e = surface_error(&noisy, &truth).unwrap();
        assert!((e.rms - 1.0).abs() <= 0.05, "{}", e.rms);
    }
}
