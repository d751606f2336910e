//! ESRI ASCII grids. Files list rows north first; grids store row 0 south,
//! so rows are flipped on the way in and out.

use std::fmt::Write as _;
use std::path::Path;

use super::{read_text, write_atomic, IoError};
use crate::raster::{Grid, GridGeoref, DEFAULT_NODATA};

/// 17 significant digits: enough for every finite f64 to read back exactly.
pub fn format_value(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn to_string(grid: &Grid) -> String {
    let g = &grid.georef;
    let mut s = String::with_capacity(g.len() * 24 + 200);
    let _ = writeln!(s, "ncols {}", g.ncols);
    let _ = writeln!(s, "nrows {}", g.nrows);
    let _ = writeln!(s, "xllcorner {}", format_value(g.x_origin));
    let _ = writeln!(s, "yllcorner {}", format_value(g.y_origin));
    let _ = writeln!(s, "cellsize {}", format_value(g.cell_size));
    let _ = writeln!(s, "nodata_value {}", format_value(g.nodata));
    for row in (0..g.nrows).rev() {
        for col in 0..g.ncols {
            if col > 0 {
                s.push(' ');
            }
            s.push_str(&format_value(grid.get(row, col)));
        }
        s.push('\n');
    }
    s
}

pub fn write_grid(grid: &Grid, path: &Path) -> Result<(), IoError> {
    write_atomic(path, to_string(grid).as_bytes())
}

pub fn read_grid(path: &Path) -> Result<Grid, IoError> {
    let text = read_text(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse(&text, path, name)
}

#[derive(Default)]
struct Header {
    ncols: Option<usize>,
    nrows: Option<usize>,
    x: Option<(f64, bool)>,
    y: Option<(f64, bool)>,
    cell_size: Option<f64>,
    nodata: Option<f64>,
}

/// Parses grid text; `path` only labels errors.
pub fn parse(text: &str, path: &Path, name: String) -> Result<Grid, IoError> {
    let perr = |line: usize, message: String| IoError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().peekable();
    let mut h = Header::default();
    // Header lines start with a letter; the first line that does not ends it.
    while let Some(&(i, line)) = lines.peek() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            lines.next();
            continue;
        }
        if !trimmed.starts_with(|c: char| c.is_ascii_alphabetic()) {
            break;
        }
        lines.next();
        let lineno = i + 1;
        let mut parts = trimmed.split_whitespace();
        let key = parts.next().unwrap_or_default().to_ascii_lowercase();
        let value = parts
            .next()
            .ok_or_else(|| perr(lineno, format!("header key '{key}' has no value")))?;
        if parts.next().is_some() {
            return Err(perr(lineno, format!("header key '{key}' has extra tokens")));
        }
        let num = || {
            value
                .parse::<f64>()
                .map_err(|_| perr(lineno, format!("bad number '{value}' for '{key}'")))
        };
        let int = || {
            value
                .parse::<usize>()
                .map_err(|_| perr(lineno, format!("bad integer '{value}' for '{key}'")))
        };
        match key.as_str() {
            "ncols" => h.ncols = Some(int()?),
            "nrows" => h.nrows = Some(int()?),
            "xllcorner" => h.x = Some((num()?, false)),
            "xllcenter" => h.x = Some((num()?, true)),
            "yllcorner" => h.y = Some((num()?, false)),
            "yllcenter" => h.y = Some((num()?, true)),
            "cellsize" => h.cell_size = Some(num()?),
            "nodata_value" => h.nodata = Some(num()?),
            _ => return Err(perr(lineno, format!("unknown header key '{key}'"))),
        }
    }
    let header_end = lines.peek().map_or(text.lines().count() + 1, |&(i, _)| i + 1);
    let missing = |k: &str| perr(header_end, format!("header is missing '{k}'"));
    let ncols = h.ncols.ok_or_else(|| missing("ncols"))?;
    let nrows = h.nrows.ok_or_else(|| missing("nrows"))?;
    let cell_size = h.cell_size.ok_or_else(|| missing("cellsize"))?;
    let (x, x_center) = h.x.ok_or_else(|| missing("xllcorner"))?;
    let (y, y_center) = h.y.ok_or_else(|| missing("yllcorner"))?;
    let half = cell_size / 2.0;
    let georef = GridGeoref {
        ncols,
        nrows,
        x_origin: if x_center { x - half } else { x },
        y_origin: if y_center { y - half } else { y },
        cell_size,
        nodata: h.nodata.unwrap_or(DEFAULT_NODATA),
    };
    georef
        .validate()
        .map_err(|e| perr(header_end, e.to_string()))?;

    let expected = ncols * nrows;
    let mut file_order = Vec::with_capacity(expected);
    let mut last_line = header_end;
    for (i, line) in lines {
        last_line = i + 1;
        for tok in line.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| perr(i + 1, format!("bad value '{tok}'")))?;
            if v.is_nan() {
                return Err(perr(i + 1, "NaN value; use the nodata value".into()));
            }
            file_order.push(v);
        }
    }
    if file_order.len() < expected {
        return Err(perr(
            last_line + 1,
            format!(
                "unexpected end of file: expected {expected} values, found {}",
                file_order.len()
            ),
        ));
    }
    if file_order.len() > expected {
        return Err(IoError::DimensionMismatch {
            path: path.to_path_buf(),
            expected,
            got: file_order.len(),
        });
    }
    let mut values = vec![0.0; expected];
    for (k, chunk) in file_order.chunks(ncols).enumerate() {
        let row = nrows - 1 - k;
        values[row * ncols..(row + 1) * ncols].copy_from_slice(chunk);
    }
    Grid::new(name, georef, values).map_err(|e| IoError::format(path, e))
}
