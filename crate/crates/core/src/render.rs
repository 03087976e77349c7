//! B-scan rendering with boundary overlays, written as binary PPM.

use std::path::Path;

use crate::error::{Error, Result};
use crate::surface::Surface;
use crate::volume::Volume;

pub type Rgb = [u8; 3];

/// Overlay colors for ILM, IS/OS and RPE, in that order.
pub const BOUNDARY_COLORS: [Rgb; 3] = [[255, 0, 0], [0, 255, 0], [0, 128, 255]];

/// An RGB image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Rgb>,
}

impl Image {
    pub fn get(&self, col: usize, row: usize) -> Rgb {
        self.pixels[row * self.width + col]
    }

    fn put(&mut self, col: i64, row: i64, c: Rgb) {
        if col >= 0 && row >= 0 && (col as usize) < self.width && (row as usize) < self.height {
            let i = row as usize * self.width + col as usize;
            self.pixels[i] = c;
        }
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.put(x, y, c);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut bytes = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        bytes.extend(self.pixels.iter().flatten());
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

/// Renders B-scan `slice` (width `nx`, height `nz`) in grayscale and draws
/// each surface as a 1-pixel polyline through `(x, round(z))`. Surfaces are
/// paired with `colors` in order; invalid cells break the polyline.
pub fn render_bscan(
    v: &Volume,
    surfaces: &[&Surface],
    colors: &[Rgb],
    slice: usize,
) -> Result<Image> {
    let (nx, ny, nz) = v.dims();
    if slice >= ny {
        return Err(Error::invalid(format!("slice {slice} outside 0..{ny}")));
    }
    if surfaces.len() > colors.len() {
        return Err(Error::invalid("more surfaces than overlay colors"));
    }
    for s in surfaces {
        if s.dims() != (nx, ny) {
            return Err(Error::invalid(format!(
                "surface dims {:?} do not match volume en-face dims {:?}",
                s.dims(),
                (nx, ny)
            )));
        }
    }
    let mut img = Image {
        width: nx,
        height: nz,
        pixels: vec![[0; 3]; nx * nz],
    };
    for x in 0..nx {
        for (k, &value) in v.ascan(x, slice).iter().enumerate() {
            let g = (value.clamp(0.0, 1.0) * 255.0).round() as u8;
            img.pixels[k * nx + x] = [g, g, g];
        }
    }
    for (s, &color) in surfaces.iter().zip(colors) {
        let mut prev: Option<(i64, i64)> = None;
        for x in 0..nx {
            match s.get(x, slice) {
                Some(z) => {
                    let p = (x as i64, z.round() as i64);
                    img.line(prev.unwrap_or(p), p, color);
                    prev = Some(p);
                }
                None => prev = None,
            }
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_constant_line() {
        let v = Volume::filled(10, 3, 20, 0.5).unwrap();
        let s = Surface::constant(10, 3, 7.0).unwrap();
        let img = render_bscan(&v, &[&s], &BOUNDARY_COLORS, 1).unwrap();
        assert_eq!((img.width, img.height), (10, 20));
        for x in 0..10 {
            for row in 0..20 {
                let expected = if row == 7 {
                    BOUNDARY_COLORS[0]
                } else {
                    [128, 128, 128]
                };
                assert_eq!(img.get(x, row), expected);
            }
        }
    }

    #[test]
    fn slice_out_of_range() {
        let v = Volume::zeros(4, 2, 5).unwrap();
        assert!(render_bscan(&v, &[], &BOUNDARY_COLORS, 2).is_err());
    }

    #[test]
    fn ppm_bytes() {
        let v = Volume::filled(2, 1, 1, 1.0).unwrap();
        let img = render_bscan(&v, &[], &BOUNDARY_COLORS, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.ppm");
        img.write_ppm(&p).unwrap();
        assert_eq!(
            std::fs::read(&p).unwrap(),
            b"P6\n2 1\n255\n\xff\xff\xff\xff\xff\xff"
        );
    }
}
