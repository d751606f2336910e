//! Static map images. PGM output is 8-bit grayscale with a sidecar mask
//! marking nodata pixels; PNG output is RGB through a colour ramp. Image row
//! 0 is the northernmost grid row.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{write_atomic, IoError};
use crate::raster::Grid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorRamp {
    /// `(value, rgb)` stops; values strictly increasing from 0 to 1.
    pub stops: Vec<(f64, [u8; 3])>,
    pub nodata: [u8; 3],
}

impl ColorRamp {
    pub fn new(stops: Vec<(f64, [u8; 3])>, nodata: [u8; 3]) -> Result<Self, String> {
        if stops.len() < 2 {
            return Err("a ramp needs at least two stops".into());
        }
        if stops[0].0 != 0.0 || stops[stops.len() - 1].0 != 1.0 {
            return Err("ramp stops must start at 0 and end at 1".into());
        }
        if stops.windows(2).any(|w| !(w[0].0 < w[1].0)) {
            return Err("ramp stop values must be strictly increasing".into());
        }
        Ok(ColorRamp { stops, nodata })
    }

    pub fn grayscale() -> Self {
        ColorRamp {
            stops: vec![(0.0, [0, 0, 0]), (1.0, [255, 255, 255])],
            nodata: [0, 0, 0],
        }
    }

    /// Green (vegetated, 0) through yellow to red (highest priority).
    pub fn priority() -> Self {
        ColorRamp {
            stops: vec![
                (0.0, [26, 152, 80]),
                (0.5, [254, 224, 139]),
                (1.0, [215, 48, 39]),
            ],
            nodata: [255, 255, 255],
        }
    }

    pub fn color(&self, v: f64) -> [u8; 3] {
        let v = v.clamp(0.0, 1.0);
        let k = self
            .stops
            .windows(2)
            .position(|w| v <= w[1].0)
            .unwrap_or(self.stops.len() - 2);
        let ((a, ca), (b, cb)) = (self.stops[k], self.stops[k + 1]);
        let t = (v - a) / (b - a);
        let mut out = [0u8; 3];
        for i in 0..3 {
            let x = f64::from(ca[i]) + t * (f64::from(cb[i]) - f64::from(ca[i]));
            out[i] = x.round().clamp(0.0, 255.0) as u8;
        }
        out
    }
}

/// `round(255·v)` after clamping to [0, 1].
pub fn gray_level(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

fn pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Pixels in image order (north row first): gray levels and nodata mask.
pub fn gray_pixels(grid: &Grid) -> (Vec<u8>, Vec<u8>) {
    let g = &grid.georef;
    let mut gray = Vec::with_capacity(g.len());
    let mut mask = Vec::with_capacity(g.len());
    for row in (0..g.nrows).rev() {
        for col in 0..g.ncols {
            let v = grid.get(row, col);
            if grid.is_nodata(v) {
                gray.push(0);
                mask.push(255);
            } else {
                gray.push(gray_level(v));
                mask.push(0);
            }
        }
    }
    (gray, mask)
}

pub fn mask_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    path.with_file_name(format!("{stem}.mask.pgm"))
}

/// Renders by extension: `.pgm` grayscale (the ramp is not used) plus a
/// `<stem>.mask.pgm` sidecar (255 = nodata); `.png` RGB through `ramp`.
/// Returns the files written.
pub fn render_map(grid: &Grid, ramp: &ColorRamp, path: &Path) -> Result<Vec<PathBuf>, IoError> {
    let (w, h) = (grid.georef.ncols, grid.georef.nrows);
    let ext = path
        .extension()
        .map(|e| e.to_string_lossy().to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "pgm" => {
            let (gray, mask) = gray_pixels(grid);
            write_atomic(path, &pgm(w, h, &gray))?;
            let mp = mask_path(path);
            write_atomic(&mp, &pgm(w, h, &mask))?;
            Ok(vec![path.to_path_buf(), mp])
        }
        "png" => {
            let mut rgb = Vec::with_capacity(w * h * 3);
            for row in (0..h).rev() {
                for col in 0..w {
                    let v = grid.get(row, col);
                    let c = if grid.is_nodata(v) { ramp.nodata } else { ramp.color(v) };
                    rgb.extend_from_slice(&c);
                }
            }
            let mut bytes = Vec::new();
            {
                let mut enc = png::Encoder::new(&mut bytes, w as u32, h as u32);
                enc.set_color(png::ColorType::Rgb);
                enc.set_depth(png::BitDepth::Eight);
                let mut writer = enc.write_header().map_err(|e| IoError::format(path, e))?;
                writer.write_image_data(&rgb).map_err(|e| IoError::format(path, e))?;
            }
            write_atomic(path, &bytes)?;
            Ok(vec![path.to_path_buf()])
        }
        other => Err(IoError::format(
            path,
            format!("unsupported image format '{other}' (use .pgm or .png)"),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::GridGeoref;

    fn georef() -> GridGeoref {
        GridGeoref::new(3, 2, 0.0, 0.0, 1.0, -9999.0).unwrap()
    }

    #[test]
    fn half_is_128() {
        let g = Grid::filled("g", georef(), 0.5);
        let (gray, mask) = gray_pixels(&g);
        assert!(gray.iter().all(|&p| p == 128));
        assert!(mask.iter().all(|&m| m == 0));
    }

    #[test]
    fn all_nodata() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid::filled("g", georef(), -9999.0);
        let p = dir.path().join("m.pgm");
        let files = render_map(&g, &ColorRamp::grayscale(), &p).unwrap();
        assert_eq!(files.len(), 2);
        let img = std::fs::read(&p).unwrap();
        let mask = std::fs::read(mask_path(&p)).unwrap();
        assert_eq!(&img[..11], b"P5\n3 2\n255\n");
        assert!(img[11..].iter().all(|&b| b == 0));
        assert!(mask[11..].iter().all(|&b| b == 255));
    }

    #[test]
    fn order_preserved_and_north_first() {
        let g = Grid::new("g", georef(), vec![0.0, 0.1, 0.2, 0.6, 0.8, 1.0]).unwrap();
        let (gray, _) = gray_pixels(&g);
        // North row (row 1) comes first.
        assert_eq!(gray, vec![153, 204, 255, 0, 26, 51]);
    }

    #[test]
    fn ramp_validation_and_png() {
        assert!(ColorRamp::new(vec![(0.0, [0; 3]), (0.0, [1; 3]), (1.0, [2; 3])], [0; 3]).is_err());
        assert!(ColorRamp::new(vec![(0.1, [0; 3]), (1.0, [2; 3])], [0; 3]).is_err());
        let r = ColorRamp::priority();
        assert_eq!(r.color(0.0), [26, 152, 80]);
        assert_eq!(r.color(1.0), [215, 48, 39]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        render_map(&Grid::filled("g", georef(), 0.3), &r, &p).unwrap();
        assert_eq!(&std::fs::read(&p).unwrap()[1..4], b"PNG");
    }
}
