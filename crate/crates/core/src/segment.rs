//! One-boundary pipeline and the RPE → IS/OS → ILM cascade.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::enhance::{enhance, DepthDirection, DepthWeight};
use crate::error::{Error, Result};
use crate::filter::{convolve_separable, make_derivative_kernel, make_smoothing_kernel, Polarity};
use crate::surface::{
    argmax_per_ascan, inpaint, inpaint_and_smooth, reject_outliers, truncate_above_surface,
    KeepSide, SearchMask, Surface,
};
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BoundaryName {
    #[serde(rename = "ILM")]
    Ilm,
    #[serde(rename = "IS/OS")]
    Isos,
    #[serde(rename = "RPE")]
    Rpe,
}

impl BoundaryName {
    /// Short lowercase name used for output files.
    pub fn file_stem(self) -> &'static str {
        match self {
            BoundaryName::Ilm => "ilm",
            BoundaryName::Isos => "isos",
            BoundaryName::Rpe => "rpe",
        }
    }
}

impl std::fmt::Display for BoundaryName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BoundaryName::Ilm => "ILM",
            BoundaryName::Isos => "IS/OS",
            BoundaryName::Rpe => "RPE",
        })
    }
}

/// Every tunable of a single boundary pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundaryProfile {
    pub name: BoundaryName,
    pub polarity: Polarity,
    pub direction: DepthDirection,
    /// Axial half-width `m` of the derivative kernel.
    #[serde(default = "defaults::derivative_half_width")]
    pub derivative_half_width: usize,
    /// Lateral box size of the derivative kernel (odd).
    #[serde(default = "defaults::lateral")]
    pub lateral: usize,
    /// Radius of the 3D box smoothing.
    #[serde(default = "defaults::smoothing_radius")]
    pub smoothing_radius: usize,
    #[serde(default = "defaults::yes")]
    pub clamp_negative: bool,
    /// Outlier threshold in voxels.
    #[serde(default = "defaults::outlier_threshold")]
    pub outlier_threshold: f32,
    #[serde(default = "defaults::median_window")]
    pub median_window: usize,
    #[serde(default = "defaults::surface_smoothing_radius")]
    pub surface_smoothing_radius: usize,
    /// Gap left between this boundary's search range and the boundary found
    /// before it in the cascade.
    #[serde(default = "defaults::truncation_margin")]
    pub truncation_margin: usize,
    /// Whether the search is restricted to the region above the previously
    /// found boundary. Ignored for the first boundary of the cascade.
    #[serde(default = "defaults::yes")]
    pub truncate: bool,
}

mod defaults {
    pub fn derivative_half_width() -> usize {
        5
    }
    pub fn lateral() -> usize {
        3
    }
    pub fn smoothing_radius() -> usize {
        2
    }
    pub fn outlier_threshold() -> f32 {
        15.0
    }
    pub fn median_window() -> usize {
        5
    }
    pub fn surface_smoothing_radius() -> usize {
        2
    }
    pub fn truncation_margin() -> usize {
        3
    }
    pub fn yes() -> bool {
        true
    }
}

impl BoundaryProfile {
    fn with(name: BoundaryName, polarity: Polarity, direction: DepthDirection) -> Self {
        Self {
            name,
            polarity,
            direction,
            derivative_half_width: defaults::derivative_half_width(),
            lateral: defaults::lateral(),
            smoothing_radius: defaults::smoothing_radius(),
            clamp_negative: true,
            outlier_threshold: defaults::outlier_threshold(),
            median_window: defaults::median_window(),
            surface_smoothing_radius: defaults::surface_smoothing_radius(),
            truncation_margin: defaults::truncation_margin(),
            truncate: true,
        }
    }

    /// Bright RPE band above a darker choroid, deepest strong edge.
    pub fn rpe() -> Self {
        Self::with(
            BoundaryName::Rpe,
            Polarity::BrightAbove,
            DepthDirection::FavorDeep,
        )
    }

    /// Dark-to-bright top of the IS/OS band, searched above the RPE.
    pub fn isos() -> Self {
        Self::with(
            BoundaryName::Isos,
            Polarity::BrightBelow,
            DepthDirection::FavorDeep,
        )
    }

    /// Vitreous-to-retina transition; the shallowest strong rising edge.
    pub fn ilm() -> Self {
        Self::with(
            BoundaryName::Ilm,
            Polarity::BrightBelow,
            DepthDirection::FavorShallow,
        )
    }

    /// Smallest depth the filters fit into.
    pub fn min_depth(&self) -> usize {
        2 * self.derivative_half_width.max(self.smoothing_radius) + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentConfig {
    #[serde(default = "BoundaryProfile::rpe")]
    pub rpe: BoundaryProfile,
    #[serde(default = "BoundaryProfile::isos")]
    pub isos: BoundaryProfile,
    #[serde(default = "BoundaryProfile::ilm")]
    pub ilm: BoundaryProfile,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            rpe: BoundaryProfile::rpe(),
            isos: BoundaryProfile::isos(),
            ilm: BoundaryProfile::ilm(),
        }
    }
}

/// Wall time of each stage in milliseconds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub truncate_ms: f64,
    pub derivative_ms: f64,
    pub smoothing_ms: f64,
    pub enhance_ms: f64,
    pub argmax_ms: f64,
    pub reject_ms: f64,
    pub finalize_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryStats {
    pub name: BoundaryName,
    pub timings: StageTimings,
    /// Number of enhance and argmax passes run for this boundary. The method
    /// has no refinement loop, so both are always 1.
    pub enhance_passes: u32,
    pub argmax_passes: u32,
    /// Columns whose search range was empty.
    pub empty_columns: usize,
    /// Columns invalidated by outlier rejection.
    pub rejected_points: usize,
    /// No usable contrast was found; the surface is a placeholder.
    pub low_confidence: bool,
}

#[derive(Debug, Clone)]
pub struct BoundaryResult {
    pub surface: Surface,
    /// Step-4 surface before cleaning, kept for inspection.
    pub raw: Surface,
    pub stats: BoundaryStats,
}

fn millis(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

/// Runs one boundary: derivative and smoothing filters, depth-weighted
/// enhancement, per-A-scan argmax, outlier rejection and finalization.
///
/// When `mask` is not the full volume, the volume is cut to the mask first
/// (columns are edge-replicated past their range) so the filters never see
/// the discarded region.
pub fn segment_boundary(
    v: &Volume,
    p: &BoundaryProfile,
    mask: &SearchMask,
) -> Result<BoundaryResult> {
    mask.check_volume(v)?;
    let started = Instant::now();
    let mut timings = StageTimings::default();

    let t = Instant::now();
    let restricted;
    let input = if mask.is_full() {
        v
    } else {
        restricted = mask.restrict(v)?;
        &restricted
    };
    timings.truncate_ms = millis(t);

    let t = Instant::now();
    let dk = make_derivative_kernel(p.derivative_half_width, p.polarity, p.lateral)?;
    let d = convolve_separable(input, &dk).map_err(|e| e.in_stage("derivative filter"))?;
    timings.derivative_ms = millis(t);

    let t = Instant::now();
    let sk = make_smoothing_kernel(p.smoothing_radius)?;
    let s = convolve_separable(input, &sk).map_err(|e| e.in_stage("smoothing filter"))?;
    timings.smoothing_ms = millis(t);

    let t = Instant::now();
    let weight = DepthWeight::new(p.direction, v.nz());
    let enhanced = enhance(&d, &s, &weight, p.clamp_negative, Some(mask))
        .map_err(|e| e.in_stage("enhance"))?;
    drop((d, s));
    timings.enhance_ms = millis(t);

    let t = Instant::now();
    let raw = argmax_per_ascan(&enhanced.volume, mask)?;
    drop(enhanced.volume);
    timings.argmax_ms = millis(t);

    let t = Instant::now();
    let cleaned = reject_outliers(&raw, p.outlier_threshold, p.median_window)
        .map_err(|e| e.in_stage("outlier rejection"))?;
    timings.reject_ms = millis(t);
    let rejected_points = raw.valid_count() - cleaned.valid_count();

    let t = Instant::now();
    let surface = inpaint_and_smooth(&cleaned, p.surface_smoothing_radius, v.nz())
        .map_err(|e| e.in_stage("inpaint and smooth"))?;
    timings.finalize_ms = millis(t);
    timings.total_ms = millis(started);

    if enhanced.degenerate {
        log::warn!("{}: no usable contrast in search region", p.name);
    }
    Ok(BoundaryResult {
        surface,
        raw,
        stats: BoundaryStats {
            name: p.name,
            timings,
            enhance_passes: 1,
            argmax_passes: 1,
            empty_columns: mask.empty_columns(),
            rejected_points,
            low_confidence: enhanced.degenerate,
        },
    })
}

#[derive(Debug, Clone)]
pub struct RetinaSegmentation {
    pub ilm: Surface,
    pub isos: Surface,
    pub rpe: Surface,
    /// Per-boundary statistics in the order they were computed (RPE, IS/OS, ILM).
    pub stats: Vec<BoundaryStats>,
    /// Columns touched by the final ordering pass.
    pub ordering_fixes: usize,
    pub ordering_ms: f64,
}

impl RetinaSegmentation {
    pub fn surface(&self, name: BoundaryName) -> &Surface {
        match name {
            BoundaryName::Ilm => &self.ilm,
            BoundaryName::Isos => &self.isos,
            BoundaryName::Rpe => &self.rpe,
        }
    }

    pub fn low_confidence(&self) -> bool {
        self.stats.iter().any(|s| s.low_confidence)
    }
}

/// Re-inpaints `upper` wherever it lies below `lower`, then clamps so that
/// `upper <= lower` holds in every column. Returns the number of columns
/// that violated the ordering.
fn enforce_above(upper: &mut Surface, lower: &Surface) -> Result<usize> {
    let (nx, ny) = upper.dims();
    let mut violations = 0;
    let mut marked = upper.clone();
    for y in 0..ny {
        for x in 0..nx {
            if upper.z(x, y) > lower.z(x, y) {
                violations += 1;
                marked.set(x, y, upper.z(x, y), false);
            }
        }
    }
    if violations == 0 {
        return Ok(0);
    }
    if marked.valid_count() > 0 {
        *upper = inpaint(&marked)?;
    }
    for y in 0..ny {
        for x in 0..nx {
            let limit = lower.z(x, y);
            if upper.z(x, y) > limit {
                upper.set(x, y, limit, true);
            }
        }
    }
    Ok(violations)
}

/// Segments RPE, IS/OS and ILM as a cascade.
///
/// RPE is searched in the full volume. IS/OS is searched above the RPE and
/// ILM above IS/OS (each with its profile's truncation margin). A final
/// ordering pass guarantees `ILM <= IS/OS <= RPE` in every column.
pub fn segment_retina(v: &Volume, config: &SegmentConfig) -> Result<RetinaSegmentation> {
    let need = [&config.rpe, &config.isos, &config.ilm]
        .iter()
        .map(|p| p.min_depth())
        .max()
        .unwrap_or(1);
    if v.nz() < need {
        return Err(Error::invalid(format!(
            "volume depth {} is smaller than the kernel support {need}",
            v.nz()
        )));
    }
    let full = SearchMask::for_volume(v);

    let rpe = segment_boundary(v, &config.rpe, &full).map_err(|e| e.in_stage("RPE"))?;

    let isos_mask = if config.isos.truncate {
        truncate_above_surface(
            &full,
            &rpe.surface,
            config.isos.truncation_margin,
            KeepSide::KeepAbove,
        )?
    } else {
        full.clone()
    };
    let isos = segment_boundary(v, &config.isos, &isos_mask).map_err(|e| e.in_stage("IS/OS"))?;

    let ilm_mask = if config.ilm.truncate {
        truncate_above_surface(
            &full,
            &isos.surface,
            config.ilm.truncation_margin,
            KeepSide::KeepAbove,
        )?
    } else {
        full.clone()
    };
    let ilm = segment_boundary(v, &config.ilm, &ilm_mask).map_err(|e| e.in_stage("ILM"))?;

    let t = Instant::now();
    let rpe_surface = rpe.surface;
    let mut isos_surface = isos.surface;
    let mut ilm_surface = ilm.surface;
    let mut ordering_fixes = enforce_above(&mut isos_surface, &rpe_surface)?;
    ordering_fixes += enforce_above(&mut ilm_surface, &isos_surface)?;

    Ok(RetinaSegmentation {
        ilm: ilm_surface,
        isos: isos_surface,
        rpe: rpe_surface,
        stats: vec![rpe.stats, isos.stats, ilm.stats],
        ordering_fixes,
        ordering_ms: millis(t),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_profiles() {
        let c = SegmentConfig::default();
        assert_eq!(c.rpe.polarity, Polarity::BrightAbove);
        assert_eq!(c.isos.polarity, Polarity::BrightBelow);
        assert_eq!(c.ilm.direction, DepthDirection::FavorShallow);
        assert_eq!(c.rpe.outlier_threshold, 15.0);
        assert_eq!(c.rpe.truncation_margin, 3);
    }

    #[test]
    fn config_json_fills_defaults() {
        let c: SegmentConfig = serde_json::from_str(
            r#"{"isos": {"name": "IS/OS", "polarity": "bright_above", "direction": "favor_deep", "lateral": 5}}"#,
        )
        .unwrap();
        assert_eq!(c.isos.polarity, Polarity::BrightAbove);
        assert_eq!(c.isos.lateral, 5);
        assert_eq!(c.isos.derivative_half_width, 5);
        assert_eq!(c.rpe, BoundaryProfile::rpe());
        assert!(serde_json::from_str::<SegmentConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn step_volume_boundary() {
        // Bright above a plane at k = 30, dark below: RPE-like edge.
        let v = Volume::from_fn(12, 6, 64, |_, _, k| if k < 30 { 0.8 } else { 0.1 }).unwrap();
        let r = segment_boundary(&v, &BoundaryProfile::rpe(), &SearchMask::for_volume(&v)).unwrap();
        assert!(r.surface.is_total());
        for &z in r.surface.depths() {
            assert!((z - 29.5).abs() <= 1.0, "{z}");
        }
        assert_eq!(r.stats.enhance_passes, 1);
        assert!(!r.stats.low_confidence);
    }

    #[test]
    fn constant_volume_is_low_confidence() {
        let v = Volume::filled(8, 6, 40, 0.4).unwrap();
        let r = segment_boundary(&v, &BoundaryProfile::rpe(), &SearchMask::for_volume(&v)).unwrap();
        assert!(r.stats.low_confidence);
        assert!(r.surface.is_total());
    }

    #[test]
    fn ordering_pass_fixes_violations() {
        let lower = Surface::constant(5, 5, 20.0).unwrap();
        let mut upper = Surface::constant(5, 5, 10.0).unwrap();
        upper.set(2, 2, 25.0, true);
        let n = enforce_above(&mut upper, &lower).unwrap();
        assert_eq!(n, 1);
        assert_eq!(upper.z(2, 2), 10.0);
        assert!(upper.is_total());
    }

    #[test]
    fn shallow_volume_is_rejected() {
        let v = Volume::filled(8, 8, 8, 0.4).unwrap();
        assert!(segment_retina(&v, &SegmentConfig::default()).is_err());
    }

    #[test]
    fn noiseless_tilted_step_within_one_voxel() {
        // Bright above a plane tilted by 0.1 voxel per column, so the
        // interface crosses every sub-voxel offset; partial-volume sampled.
        let (nx, ny, nz) = (40, 12, 96);
        let truth = Surface::from_fn(nx, ny, |x, _| 48.0 + 0.1 * x as f32).unwrap();
        let v = Volume::from_fn(nx, ny, nz, |x, y, k| {
            let bright = (truth.z(x, y) - (k as f32 - 0.5)).clamp(0.0, 1.0);
            0.1 + 0.7 * bright
        })
        .unwrap();
        let r = segment_boundary(&v, &BoundaryProfile::rpe(), &SearchMask::for_volume(&v)).unwrap();
        let mse = r
            .surface
            .depths()
            .iter()
            .zip(truth.depths())
            .map(|(a, b)| f64::from(a - b).powi(2))
            .sum::<f64>()
            / truth.len() as f64;
        assert!(mse.sqrt() <= 1.0, "rms {}", mse.sqrt());
    }

    #[test]
    fn retina_phantom_segments_in_order() {
        use crate::phantom::{generate_phantom, surface_error, PhantomSpec};
        let (v, truth) = generate_phantom(&PhantomSpec::retina(48, 12, 128)).unwrap();
        let seg = segment_retina(&v, &SegmentConfig::default()).unwrap();
        for (est, gt) in [
            (&seg.ilm, &truth.ilm),
            (&seg.isos, &truth.isos),
            (&seg.rpe, &truth.rpe),
        ] {
            assert!(surface_error(est, gt).unwrap().rms <= 1.0);
        }
        let speckled = PhantomSpec::retina(48, 12, 128).with_speckle(1.0, 2);
        let (v, _) = generate_phantom(&speckled).unwrap();
        let seg = segment_retina(&v, &SegmentConfig::default()).unwrap();
        for i in 0..seg.ilm.len() {
            let (a, b, c) = (
                seg.ilm.depths()[i],
                seg.isos.depths()[i],
                seg.rpe.depths()[i],
            );
            assert!(a <= b && b <= c, "column {i}: {a} {b} {c}");
        }
    }
}
