//! Command-line front end. Every command is a thin wrapper over library
//! calls; parsing lives here so the commands can be driven in-process.
//!
//! Exit codes: 0 success, 1 pipeline or internal error, 2 usage or input
//! error.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::analysis::{export_surface_mesh, thickness_map, GrayScaling};
use crate::error::Error;
use crate::io::{
    load_surface_csv, load_volume, save_surface, save_volume, sidecar_path, SampleType,
    SurfaceFormat, VolumeMeta,
};
use crate::phantom::{generate_phantom, PhantomSpec};
use crate::render::{render_bscan, BOUNDARY_COLORS};
use crate::segment::{segment_retina, BoundaryName, BoundaryStats, SegmentConfig};
use crate::surface::Surface;
use crate::volume::Spacing;

pub const EXIT_OK: i32 = 0;
pub const EXIT_PIPELINE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Environment variable read when `--threads` is not given.
pub const THREADS_ENV: &str = "OCTSEG_THREADS";

#[derive(Debug, Parser)]
#[command(name = "octseg", version, about = "Retinal OCT boundary segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Segment ILM, IS/OS and RPE in a raw volume.
    Segment(SegmentArgs),
    /// Generate a synthetic phantom volume with ground-truth surfaces.
    Phantom(PhantomArgs),
    /// Compute a thickness map from two surfaces.
    Thickness(ThicknessArgs),
    /// Render a B-scan with boundary overlays.
    Render(RenderArgs),
    /// Export a surface as a PLY triangle mesh.
    Mesh(MeshArgs),
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    /// Raw volume file.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// JSON sidecar; defaults to the input path with a `.json` extension.
    #[arg(long)]
    pub meta: Option<PathBuf>,
    /// JSON file overriding boundary profile defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Worker threads; results do not depend on this.
    #[arg(long, env = THREADS_ENV)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    /// Phantom spec JSON.
    #[arg(long, required_unless_present = "preset", conflicts_with = "preset")]
    pub spec: Option<PathBuf>,
    /// Built-in retina phantom of the given size, e.g. `300x99x480` (nx x ny x nz).
    #[arg(long)]
    pub preset: Option<String>,
    /// Speckle looks for `--preset` (noiseless when omitted).
    #[arg(long, requires = "preset")]
    pub looks: Option<f64>,
    #[arg(long, default_value_t = 0, requires = "preset")]
    pub seed: u64,
    /// Sample type of the written volume.
    #[arg(long, default_value = "u8", value_parser = parse_dtype)]
    pub dtype: SampleType,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, env = THREADS_ENV)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ThicknessArgs {
    #[arg(long)]
    pub ilm: PathBuf,
    #[arg(long)]
    pub rpe: PathBuf,
    /// Also write the ILM to IS/OS thickness from this surface.
    #[arg(long)]
    pub isos: Option<PathBuf>,
    /// Axial voxel size in micrometers.
    #[arg(long)]
    pub dz_um: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub meta: Option<PathBuf>,
    /// A segmentation output directory, or comma-separated surface CSVs
    /// drawn as ILM, IS/OS, RPE in that order.
    #[arg(long)]
    pub surfaces: String,
    #[arg(long)]
    pub slice: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MeshArgs {
    #[arg(long)]
    pub surface: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    /// `dx,dy,dz` in micrometers.
    #[arg(long, value_parser = parse_spacing)]
    pub spacing_um: Option<Spacing>,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_dtype(s: &str) -> Result<SampleType, String> {
    match s {
        "u8" => Ok(SampleType::U8),
        "f32" => Ok(SampleType::F32),
        other => Err(format!(
            "unknown sample type '{other}' (expected u8 or f32)"
        )),
    }
}

fn parse_spacing(s: &str) -> Result<Spacing, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [dx, dy, dz] if v.iter().all(|&c| c > 0.0) => Ok(Spacing { dx, dy, dz }),
        _ => Err("expected three positive values dx,dy,dz".into()),
    }
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split('x')
        .map(|t| t.trim().parse::<usize>().map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [a, b, c] if a > 0 && b > 0 && c > 0 => Ok([a, b, c]),
        _ => Err(format!("'{s}' is not NXxNYxNZ")),
    }
}

/// A command failure carrying its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn pipeline(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_PIPELINE,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_input_error() {
            EXIT_USAGE
        } else {
            EXIT_PIPELINE
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn with_threads<T: Send>(
    threads: Option<usize>,
    f: impl FnOnce() -> T + Send,
) -> Result<T, Failure> {
    match threads {
        Some(0) => Err(Failure::usage("--threads must be at least 1")),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Failure::pipeline(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

fn meta_for(input: &Path, meta: Option<&PathBuf>) -> Result<VolumeMeta, Failure> {
    let path = meta.cloned().unwrap_or_else(|| sidecar_path(input));
    if !path.exists() {
        return Err(Failure::usage(format!(
            "volume sidecar {} not found (pass --meta)",
            path.display()
        )));
    }
    Ok(VolumeMeta::read(&path)?)
}

fn create_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| Failure::from(Error::io(dir, e)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CmdResult {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    fs::write(path, text).map_err(|e| Failure::pipeline(Error::io(path, e).to_string()))
}

fn write_surface_pair(s: &Surface, dir: &Path, stem: &str) -> CmdResult {
    let out = |e: Error| Failure::pipeline(e.to_string());
    save_surface(s, dir.join(format!("{stem}.csv")), SurfaceFormat::Csv).map_err(out)?;
    save_surface(s, dir.join(format!("{stem}.f32")), SurfaceFormat::F32Grid).map_err(out)?;
    Ok(())
}

/// Machine-readable record of a segmentation run.
#[derive(Debug, Serialize)]
pub struct RunReport {
    pub input: PathBuf,
    /// `(nx, ny, nz)`.
    pub dims: [usize; 3],
    pub threads: usize,
    pub load_ms: f64,
    pub boundaries: Vec<BoundaryStats>,
    pub ordering_fixes: usize,
    pub ordering_ms: f64,
    pub segment_ms: f64,
    pub low_confidence: bool,
    pub config: SegmentConfig,
}

pub fn cmd_segment(args: &SegmentArgs) -> CmdResult {
    let meta = meta_for(&args.input, args.meta.as_ref())?;
    let config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::from(Error::io(path, e)))?;
            serde_json::from_str::<SegmentConfig>(&text)
                .map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))?
        }
        None => SegmentConfig::default(),
    };
    create_dir(&args.out_dir)?;

    let (report, seg) = with_threads(args.threads, || -> Result<_, Failure> {
        let t = Instant::now();
        let volume = load_volume(&args.input, &meta)?;
        let load_ms = t.elapsed().as_secs_f64() * 1e3;
        let (lo, hi) = volume.min_max();
        if !(hi > lo) {
            return Err(Failure::pipeline("degenerate input: volume is constant"));
        }
        let t = Instant::now();
        let seg = segment_retina(&volume, &config)?;
        let segment_ms = t.elapsed().as_secs_f64() * 1e3;
        let (nx, ny, nz) = volume.dims();
        let report = RunReport {
            input: args.input.clone(),
            dims: [nx, ny, nz],
            threads: rayon::current_num_threads(),
            load_ms,
            boundaries: seg.stats.clone(),
            ordering_fixes: seg.ordering_fixes,
            ordering_ms: seg.ordering_ms,
            segment_ms,
            low_confidence: seg.low_confidence(),
            config: config.clone(),
        };
        Ok((report, seg))
    })??;

    for name in [BoundaryName::Ilm, BoundaryName::Isos, BoundaryName::Rpe] {
        write_surface_pair(seg.surface(name), &args.out_dir, name.file_stem())?;
    }
    write_json(&args.out_dir.join("report.json"), &report)?;
    if report.low_confidence {
        return Err(Failure::pipeline(
            "degenerate input: no usable contrast for at least one boundary (see report.json)",
        ));
    }
    Ok(())
}

pub fn cmd_phantom(args: &PhantomArgs) -> CmdResult {
    let spec = match (&args.spec, &args.preset) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::from(Error::io(path, e)))?;
            serde_json::from_str::<PhantomSpec>(&text)
                .map_err(|e| Failure::usage(format!("spec {}: {e}", path.display())))?
        }
        (None, Some(preset)) => {
            let [nx, ny, nz] = parse_dims(preset).map_err(Failure::usage)?;
            let mut spec = PhantomSpec::retina(nx, ny, nz);
            spec.looks = args.looks;
            spec.seed = args.seed;
            spec
        }
        (None, None) => return Err(Failure::usage("one of --spec or --preset is required")),
    };
    let (volume, truth) = with_threads(args.threads, || generate_phantom(&spec))??;
    create_dir(&args.out)?;
    save_volume(&volume, args.out.join("volume.raw"), args.dtype)
        .map_err(|e| Failure::pipeline(e.to_string()))?;
    write_surface_pair(&truth.ilm, &args.out, "truth_ilm")?;
    write_surface_pair(&truth.isos, &args.out, "truth_isos")?;
    write_surface_pair(&truth.rpe, &args.out, "truth_rpe")?;
    write_json(&args.out.join("phantom.json"), &spec)
}

fn load_total_surface(path: &Path) -> Result<Surface, Failure> {
    let s = load_surface_csv(path)?;
    if !s.is_total() {
        return Err(Failure::usage(format!(
            "{} has invalid cells",
            path.display()
        )));
    }
    Ok(s)
}

#[derive(Serialize)]
struct ThicknessSidecar {
    top: PathBuf,
    bottom: PathBuf,
    graymap: GrayScaling,
}

fn write_thickness(
    top: &Path,
    bottom: &Path,
    dz_um: Option<f64>,
    out: &Path,
    stem: &str,
) -> CmdResult {
    let t = thickness_map(
        &load_total_surface(top)?,
        &load_total_surface(bottom)?,
        dz_um,
    )?;
    let io = |e: Error| Failure::pipeline(e.to_string());
    t.write_csv(out.join(format!("{stem}.csv"))).map_err(io)?;
    let mut scaling = t.write_pgm(out.join(format!("{stem}.pgm"))).map_err(io)?;
    scaling.dz_um = dz_um;
    write_json(
        &out.join(format!("{stem}.json")),
        &ThicknessSidecar {
            top: top.to_path_buf(),
            bottom: bottom.to_path_buf(),
            graymap: scaling,
        },
    )
}

pub fn cmd_thickness(args: &ThicknessArgs) -> CmdResult {
    if let Some(dz) = args.dz_um {
        if !(dz > 0.0) {
            return Err(Failure::usage("--dz-um must be positive"));
        }
    }
    create_dir(&args.out)?;
    write_thickness(&args.ilm, &args.rpe, args.dz_um, &args.out, "thickness")?;
    if let Some(isos) = &args.isos {
        write_thickness(&args.ilm, isos, args.dz_um, &args.out, "inner_thickness")?;
    }
    Ok(())
}

fn surface_paths(spec: &str) -> Vec<PathBuf> {
    let p = Path::new(spec);
    if p.is_dir() {
        ["ilm", "isos", "rpe"]
            .iter()
            .map(|stem| p.join(format!("{stem}.csv")))
            .collect()
    } else {
        spec.split(',').map(|s| PathBuf::from(s.trim())).collect()
    }
}

pub fn cmd_render(args: &RenderArgs) -> CmdResult {
    let meta = meta_for(&args.input, args.meta.as_ref())?;
    let volume = load_volume(&args.input, &meta)?;
    let paths = surface_paths(&args.surfaces);
    if paths.len() > BOUNDARY_COLORS.len() {
        return Err(Failure::usage("at most three surfaces can be drawn"));
    }
    let surfaces = paths
        .iter()
        .map(|p| load_surface_csv(p).map_err(Failure::from))
        .collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&Surface> = surfaces.iter().collect();
    let img = render_bscan(&volume, &refs, &BOUNDARY_COLORS, args.slice)?;
    img.write_ppm(&args.out)
        .map_err(|e| Failure::pipeline(e.to_string()))
}

pub fn cmd_mesh(args: &MeshArgs) -> CmdResult {
    let s = load_total_surface(&args.surface)?;
    if args.stride == 0 {
        return Err(Failure::usage("--stride must be at least 1"));
    }
    export_surface_mesh(&s, &args.out, args.stride, args.spacing_um)
        .map_err(|e| Failure::pipeline(e.to_string()))
}

/// Runs a parsed command and reports failures on stderr.
pub fn run(cli: &Cli) -> i32 {
    let result = match &cli.command {
        Command::Segment(a) => cmd_segment(a),
        Command::Phantom(a) => cmd_phantom(a),
        Command::Thickness(a) => cmd_thickness(a),
        Command::Render(a) => cmd_render(a),
        Command::Mesh(a) => cmd_mesh(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("octseg: {}", f.message);
            f.code
        }
    }
}

/// Parses `args` (including the program name) and runs the command. Parse
/// errors print usage and return [`EXIT_USAGE`].
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(&cli),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            code
        }
    }
}
