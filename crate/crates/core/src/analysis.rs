//! Post-segmentation products: thickness maps and surface meshes.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::surface::Surface;
use crate::volume::Spacing;

#[derive(Debug, Clone, PartialEq)]
pub struct ThicknessMap {
    nx: usize,
    ny: usize,
    px: Vec<f32>,
    um: Option<Vec<f32>>,
}

impl ThicknessMap {
    pub fn dims(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn px(&self) -> &[f32] {
        &self.px
    }

    pub fn um(&self) -> Option<&[f32]> {
        self.um.as_deref()
    }

    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.px[y * self.nx + x]
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let res: std::io::Result<()> = (|| {
            writeln!(w, "x,y,thickness_px,thickness_um")?;
            for y in 0..self.ny {
                for x in 0..self.nx {
                    let i = y * self.nx + x;
                    match &self.um {
                        Some(um) => writeln!(w, "{x},{y},{},{}", self.px[i], um[i])?,
                        None => writeln!(w, "{x},{y},{},", self.px[i])?,
                    }
                }
            }
            w.flush()
        })();
        res.map_err(|e| Error::io(path, e))
    }

    /// Writes an 8-bit binary graymap (one pixel per column, rows along `y`)
    /// linearly scaled so `min` maps to 0 and `max` to 255. A constant map
    /// is written as all zeros. Returns the scaling used.
    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<GrayScaling> {
        let path = path.as_ref();
        let (lo, hi) = self
            .px
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| {
                (a.min(v), b.max(v))
            });
        let scaling = GrayScaling {
            min_px: f64::from(lo),
            max_px: f64::from(hi),
            dz_um: None,
        };
        let mut bytes = format!("P5\n{} {}\n255\n", self.nx, self.ny).into_bytes();
        bytes.extend(self.px.iter().map(|&v| {
            if hi > lo {
                ((v - lo) / (hi - lo) * 255.0).round() as u8
            } else {
                0
            }
        }));
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        Ok(scaling)
    }
}

/// How graymap levels map back to thickness: `px = min_px + level / 255 * (max_px - min_px)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrayScaling {
    pub min_px: f64,
    pub max_px: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dz_um: Option<f64>,
}

/// Pointwise `bottom - top`, with micrometers when the axial spacing is known.
pub fn thickness_map(top: &Surface, bottom: &Surface, dz_um: Option<f64>) -> Result<ThicknessMap> {
    if top.dims() != bottom.dims() {
        return Err(Error::invalid(format!(
            "surface dims differ: {:?} vs {:?}",
            top.dims(),
            bottom.dims()
        )));
    }
    if !top.is_total() || !bottom.is_total() {
        return Err(Error::invalid("thickness needs fully valid surfaces"));
    }
    let px: Vec<f32> = top
        .depths()
        .iter()
        .zip(bottom.depths())
        .map(|(&a, &b)| b - a)
        .collect();
    let um = dz_um.map(|dz| px.iter().map(|&t| (f64::from(t) * dz) as f32).collect());
    let (nx, ny) = top.dims();
    Ok(ThicknessMap { nx, ny, px, um })
}

/// Vertex and face counts of the mesh written by [`export_surface_mesh`].
pub fn mesh_counts(nx: usize, ny: usize, stride: usize) -> (usize, usize) {
    let cx = nx.div_ceil(stride);
    let cy = ny.div_ceil(stride);
    (cx * cy, 2 * cx.saturating_sub(1) * cy.saturating_sub(1))
}

/// Writes the surface as an ASCII PLY triangle mesh.
///
/// Grid samples are taken every `stride` columns along both axes, placed at
/// `(x * dx, y * dy, z * dz)` (unit spacing when `spacing` is `None`), and
/// every grid quad is split into two triangles.
pub fn export_surface_mesh(
    s: &Surface,
    path: impl AsRef<Path>,
    stride: usize,
    spacing: Option<Spacing>,
) -> Result<()> {
    let path = path.as_ref();
    if stride == 0 {
        return Err(Error::invalid("mesh stride must be at least 1"));
    }
    if !s.is_total() {
        return Err(Error::invalid("mesh export needs a fully valid surface"));
    }
    let sp = spacing.unwrap_or(Spacing {
        dx: 1.0,
        dy: 1.0,
        dz: 1.0,
    });
    let xs: Vec<usize> = (0..s.nx()).step_by(stride).collect();
    let ys: Vec<usize> = (0..s.ny()).step_by(stride).collect();
    let (vertices, faces) = mesh_counts(s.nx(), s.ny(), stride);

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res: std::io::Result<()> = (|| {
        writeln!(w, "ply")?;
        writeln!(w, "format ascii 1.0")?;
        writeln!(w, "element vertex {vertices}")?;
        writeln!(w, "property float x")?;
        writeln!(w, "property float y")?;
        writeln!(w, "property float z")?;
        writeln!(w, "element face {faces}")?;
        writeln!(w, "property list uchar int vertex_indices")?;
        writeln!(w, "end_header")?;
        for &y in &ys {
            for &x in &xs {
                let z = f64::from(s.z(x, y));
                writeln!(
                    w,
                    "{} {} {}",
                    (x as f64 * sp.dx) as f32,
                    (y as f64 * sp.dy) as f32,
                    (z * sp.dz) as f32
                )?;
            }
        }
        let cx = xs.len();
        for j in 0..ys.len().saturating_sub(1) {
            for i in 0..cx.saturating_sub(1) {
                let a = j * cx + i;
                let b = a + 1;
                let c = a + cx;
                let d = c + 1;
                writeln!(w, "3 {a} {b} {d}")?;
                writeln!(w, "3 {a} {d} {c}")?;
            }
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}
