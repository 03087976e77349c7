//! Headerless raw volumes with a JSON sidecar, and surface files.
//!
//! Sidecar layout:
//!
//! ```json
//! {"dims":[480,300,99],"dtype":"u8","endian":"le","order":"zxy","spacing_um":[7.08,20.0,60.6]}
//! ```
//!
//! `order` names the axes from fastest- to slowest-varying in the file, and
//! `dims` and `spacing_um` are listed in that same order. Volumes are always
//! canonicalized to depth-innermost (`zxy`) in memory.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::surface::Surface;
use crate::volume::{Spacing, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleType {
    U8,
    F32,
}

impl SampleType {
    pub fn size(self) -> usize {
        match self {
            SampleType::U8 => 1,
            SampleType::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Endian {
    #[default]
    Le,
    Be,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

/// Permutation of `{x, y, z}`, fastest-varying axis first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AxisOrder([Axis; 3]);

impl AxisOrder {
    pub const CANONICAL: AxisOrder = AxisOrder([Axis::Z, Axis::X, Axis::Y]);

    pub fn axes(&self) -> [Axis; 3] {
        self.0
    }

    /// Position of `axis` within the order.
    fn position(&self, axis: Axis) -> usize {
        self.0
            .iter()
            .position(|&a| a == axis)
            .expect("order is a permutation")
    }
}

impl std::str::FromStr for AxisOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let axes: Vec<Axis> = s
            .chars()
            .map(|c| match c.to_ascii_lowercase() {
                'x' => Ok(Axis::X),
                'y' => Ok(Axis::Y),
                'z' => Ok(Axis::Z),
                other => Err(Error::format(
                    "axis order",
                    format!("unknown axis '{other}'"),
                )),
            })
            .collect::<Result<_>>()?;
        let ok = axes.len() == 3
            && [Axis::X, Axis::Y, Axis::Z]
                .iter()
                .all(|a| axes.iter().filter(|&b| b == a).count() == 1);
        if !ok {
            return Err(Error::format(
                "axis order",
                format!("'{s}' is not a permutation of xyz"),
            ));
        }
        Ok(AxisOrder([axes[0], axes[1], axes[2]]))
    }
}

impl std::fmt::Display for AxisOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for a in self.0 {
            f.write_str(match a {
                Axis::X => "x",
                Axis::Y => "y",
                Axis::Z => "z",
            })?;
        }
        Ok(())
    }
}

impl Serialize for AxisOrder {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for AxisOrder {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl Default for AxisOrder {
    fn default() -> Self {
        Self::CANONICAL
    }
}

/// Sidecar description of a raw volume file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeMeta {
    pub dims: [usize; 3],
    pub dtype: SampleType,
    #[serde(default)]
    pub endian: Endian,
    #[serde(default)]
    pub order: AxisOrder,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing_um: Option<[f64; 3]>,
}

impl VolumeMeta {
    /// Metadata for a volume written in canonical order.
    pub fn canonical(
        nx: usize,
        ny: usize,
        nz: usize,
        dtype: SampleType,
        spacing: Option<Spacing>,
    ) -> Self {
        Self {
            dims: [nz, nx, ny],
            dtype,
            endian: Endian::Le,
            order: AxisOrder::CANONICAL,
            spacing_um: spacing.map(|s| [s.dz, s.dx, s.dy]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::format("volume sidecar", "dims must be positive"));
        }
        if let Some(sp) = self.spacing_um {
            if sp.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
                return Err(Error::format("volume sidecar", "spacing must be positive"));
            }
        }
        Ok(())
    }

    fn along(&self, axis: Axis) -> usize {
        self.dims[self.order.position(axis)]
    }

    /// `(nx, ny, nz)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (
            self.along(Axis::X),
            self.along(Axis::Y),
            self.along(Axis::Z),
        )
    }

    pub fn spacing(&self) -> Option<Spacing> {
        self.spacing_um.map(|sp| Spacing {
            dx: sp[self.order.position(Axis::X)],
            dy: sp[self.order.position(Axis::Y)],
            dz: sp[self.order.position(Axis::Z)],
        })
    }

    pub fn expected_bytes(&self) -> u64 {
        self.dims.iter().map(|&d| d as u64).product::<u64>() * self.dtype.size() as u64
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let meta: VolumeMeta = serde_json::from_str(&text)
            .map_err(|e| Error::format(format!("sidecar {}", path.display()), e.to_string()))?;
        meta.validate()?;
        Ok(meta)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// `volume.raw` → `volume.json`.
pub fn sidecar_path(raw: &Path) -> PathBuf {
    raw.with_extension("json")
}

fn decode(bytes: &[u8], meta: &VolumeMeta) -> Result<Vec<f32>> {
    match meta.dtype {
        SampleType::U8 => Ok(bytes.iter().map(|&b| f32::from(b)).collect()),
        SampleType::F32 => {
            let values: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| {
                    let b = [c[0], c[1], c[2], c[3]];
                    match meta.endian {
                        Endian::Le => f32::from_le_bytes(b),
                        Endian::Be => f32::from_be_bytes(b),
                    }
                })
                .collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::format("volume data", "non-finite float sample"));
            }
            Ok(values)
        }
    }
}

/// Reorders file samples into canonical depth-innermost layout.
fn canonicalize(samples: Vec<f32>, meta: &VolumeMeta) -> Vec<f32> {
    if meta.order == AxisOrder::CANONICAL {
        return samples;
    }
    let (nx, _ny, nz) = meta.shape();
    let stride = |axis: Axis| match axis {
        Axis::Z => 1,
        Axis::X => nz,
        Axis::Y => nx * nz,
    };
    let [a0, a1, a2] = meta.order.axes();
    let (s0, s1, s2) = (stride(a0), stride(a1), stride(a2));
    let [d0, d1, d2] = meta.dims;
    let mut out = vec![0.0f32; samples.len()];
    let mut src = samples.into_iter();
    for i2 in 0..d2 {
        for i1 in 0..d1 {
            let base = i2 * s2 + i1 * s1;
            for i0 in 0..d0 {
                out[base + i0 * s0] = src.next().expect("sample count checked");
            }
        }
    }
    out
}

/// Reads a raw volume and normalizes it to `[0, 1]`: 8-bit samples by
/// `v / 255`, float samples by global min-max.
pub fn load_volume(path: impl AsRef<Path>, meta: &VolumeMeta) -> Result<Volume> {
    let path = path.as_ref();
    meta.validate()?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = meta.expected_bytes();
    if bytes.len() as u64 != expected {
        return Err(Error::SizeMismatch {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    let samples = canonicalize(decode(&bytes, meta)?, meta);
    let (nx, ny, nz) = meta.shape();
    let volume = match meta.dtype {
        SampleType::U8 => {
            let data = samples.into_iter().map(|v| v / 255.0).collect();
            Volume::new(nx, ny, nz, data)?
        }
        SampleType::F32 => Volume::new(nx, ny, nz, samples)?.normalized().0,
    };
    Ok(volume.with_spacing(meta.spacing()))
}

/// Writes `v` in canonical order with its sidecar next to it, returning the
/// sidecar metadata.
pub fn save_volume(v: &Volume, path: impl AsRef<Path>, dtype: SampleType) -> Result<VolumeMeta> {
    let path = path.as_ref();
    let (nx, ny, nz) = v.dims();
    let meta = VolumeMeta::canonical(nx, ny, nz, dtype, v.spacing());
    let bytes: Vec<u8> = match dtype {
        SampleType::U8 => v.to_u8(),
        SampleType::F32 => v.data().iter().flat_map(|x| x.to_le_bytes()).collect(),
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    meta.write(sidecar_path(path))?;
    Ok(meta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SurfaceFormat {
    /// `x,y,z,valid` rows.
    Csv,
    /// `nx * ny` little-endian `f32`, row-major in `y` then `x`, NaN where
    /// invalid.
    F32Grid,
}

pub fn save_surface(s: &Surface, path: impl AsRef<Path>, format: SurfaceFormat) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res: std::io::Result<()> = (|| {
        match format {
            SurfaceFormat::Csv => {
                writeln!(w, "x,y,z,valid")?;
                for y in 0..s.ny() {
                    for x in 0..s.nx() {
                        writeln!(
                            w,
                            "{},{},{},{}",
                            x,
                            y,
                            s.z(x, y),
                            u8::from(s.is_valid(x, y))
                        )?;
                    }
                }
            }
            SurfaceFormat::F32Grid => {
                for (&z, &ok) in s.depths().iter().zip(s.validity()) {
                    let v = if ok { z } else { f32::NAN };
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

/// Reads a surface CSV. Dims are inferred from the largest `x` and `y`; every
/// cell must appear exactly once.
pub fn load_surface_csv(path: impl AsRef<Path>) -> Result<Surface> {
    let path = path.as_ref();
    let what = || format!("surface {}", path.display());
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if n == 0 {
            if line.trim() != "x,y,z,valid" {
                return Err(Error::format(what(), "missing x,y,z,valid header"));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::format(
                what(),
                format!("line {}: expected 4 fields", n + 1),
            ));
        }
        let bad = || Error::format(what(), format!("line {}: unparsable field", n + 1));
        let x: usize = fields[0].parse().map_err(|_| bad())?;
        let y: usize = fields[1].parse().map_err(|_| bad())?;
        let z: f32 = fields[2].parse().map_err(|_| bad())?;
        let valid = match fields[3] {
            "1" => true,
            "0" => false,
            _ => {
                return Err(Error::format(
                    what(),
                    format!("line {}: valid must be 0 or 1", n + 1),
                ))
            }
        };
        rows.push((x, y, z, valid));
    }
    if rows.is_empty() {
        return Err(Error::format(what(), "no cells"));
    }
    let nx = rows.iter().map(|r| r.0).max().unwrap_or(0) + 1;
    let ny = rows.iter().map(|r| r.1).max().unwrap_or(0) + 1;
    if rows.len() != nx * ny {
        return Err(Error::format(
            what(),
            format!("{} rows for a {nx}x{ny} grid", rows.len()),
        ));
    }
    let mut z = vec![f32::NAN; nx * ny];
    let mut valid = vec![false; nx * ny];
    let mut seen = vec![false; nx * ny];
    for (x, y, depth, ok) in rows {
        let i = y * nx + x;
        if seen[i] {
            return Err(Error::format(what(), format!("duplicate cell ({x}, {y})")));
        }
        seen[i] = true;
        z[i] = depth;
        valid[i] = ok;
    }
    Surface::new(nx, ny, z, valid)
}

pub fn load_surface_grid(path: impl AsRef<Path>, nx: usize, ny: usize) -> Result<Surface> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = (nx * ny * 4) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::SizeMismatch {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    let z: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let valid = z.iter().map(|v| !v.is_nan()).collect();
    Surface::new(nx, ny, z, valid)
}
