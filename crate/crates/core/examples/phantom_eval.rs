//! Segments retina phantoms and prints per-surface error statistics.
//!
//! cargo run --release --example phantom_eval -- 256x64x480 4 0 [lesion] [key=value ...]
//!
//! Arguments: dims, speckle looks (0 for noiseless), seed. `key=value` pairs
//! override the retina preset: hrpe, hisos, nfl (band thicknesses), rpe,
//! isosi, nfli, inner, choroid (intensities), und, dip (amplitudes), wx, wy
//! (dip widths as fractions of nx, ny), ilm0 (ILM base depth).

use std::time::Instant;

use octseg::phantom::{generate_phantom, surface_error, PhantomSpec};
use octseg::segment::{segment_retina, SegmentConfig};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let dims: Vec<usize> = args
        .first()
        .map(String::as_str)
        .unwrap_or("128x32x256")
        .split('x')
        .map(|t| t.parse().expect("dims"))
        .collect();
    let looks: Option<f64> = args
        .get(1)
        .and_then(|s| s.parse().ok())
        .filter(|&l: &f64| l > 0.0);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let lesion = args.iter().any(|a| a == "lesion");

    let mut spec = PhantomSpec::retina(dims[0], dims[1], dims[2]);
    spec.looks = looks;
    spec.seed = seed;
    if lesion {
        spec.lesion = Some(spec.default_lesion());
    }
    for a in &args {
        if let Some((k, v)) = a.split_once('=') {
            let v: f64 = v.parse().expect("value");
            match k {
                "hrpe" => spec.rpe_half_thickness = v,
                "hisos" => spec.isos_half_thickness = v,
                "rpe" => spec.intensities.rpe_band = v,
                "isosi" => spec.intensities.isos_band = v,
                "choroid" => spec.intensities.choroid = v,
                "inner" => spec.intensities.inner_retina = v,
                "nfl" => spec.nerve_fiber_thickness = v,
                "nfli" => spec.intensities.nerve_fiber = v,
                "und" => {
                    spec.ilm.undulation_amplitude = v;
                    spec.isos.undulation_amplitude = v;
                    spec.rpe.undulation_amplitude = v;
                }
                "dip" => spec.ilm.dip_amplitude = v,
                "ilm0" => spec.ilm.base_depth = v,
                "wy" => {
                    let w = v * spec.dims[1] as f64;
                    spec.ilm.dip_width[1] = w;
                    spec.isos.dip_width[1] = w;
                }
                "wx" => {
                    let w = v * spec.dims[0] as f64;
                    spec.ilm.dip_width[0] = w;
                    spec.isos.dip_width[0] = w;
                }
                _ => panic!("unknown key {k}"),
            }
        }
    }
    let (volume, truth) = generate_phantom(&spec).expect("phantom");
    let t = Instant::now();
    let seg = segment_retina(&volume, &SegmentConfig::default()).expect("segment");
    println!("segmented in {:.2?}", t.elapsed());
    for (name, est, gt) in [
        ("ILM", &seg.ilm, &truth.ilm),
        ("IS/OS", &seg.isos, &truth.isos),
        ("RPE", &seg.rpe, &truth.rpe),
    ] {
        let e = surface_error(est, gt).expect("error");
        let bias: f64 = est
            .depths()
            .iter()
            .zip(gt.depths())
            .map(|(a, b)| f64::from(a - b))
            .sum::<f64>()
            / est.len() as f64;
        println!(
            "{name:6} rms {:.3} mean_abs {:.3} bias {:+.3} p95 {:.3} max {:.3} within5 {:.4}",
            e.rms,
            e.mean_abs,
            bias,
            e.p95,
            e.max_abs,
            e.frac_within(5.0)
        );
    }
    for s in &seg.stats {
        println!(
            "{}: {:.0} ms, rejected {}, empty {}",
            s.name, s.timings.total_ms, s.rejected_points, s.empty_columns
        );
    }
    println!("ordering fixes {}", seg.ordering_fixes);
}
