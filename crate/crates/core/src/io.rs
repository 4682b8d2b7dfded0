//! Array files and CSV tables.
//!
//! An array is a pair of files sharing a stem. `<stem>.hdr` is text: the
//! number of dimensions, the dimensions with the fastest-varying first, and
//! the token `complex64`. `<stem>.dat` holds little-endian interleaved
//! (real, imag) `f32` values in that order. Row-major arrays are written with
//! their shape reversed, so the header's first dimension is the last axis.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array, ArrayD, Dimension, IxDyn};

use crate::error::{Error, Result};
use crate::spin_sim::C64;

const ELEMENT: &str = "complex64";

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Writes `<stem>.hdr` and `<stem>.dat`. Values are stored as `f32`.
pub fn write_array<D: Dimension>(stem: &Path, a: &Array<C64, D>) -> Result<()> {
    if let Some(dir) = stem.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let dims: Vec<String> = a.shape().iter().rev().map(|d| d.to_string()).collect();
    let header = format!("{}\n{}\n{ELEMENT}\n", a.ndim(), dims.join(" "));
    fs::write(with_ext(stem, "hdr"), header)?;
    let mut bytes = Vec::with_capacity(a.len() * 8);
    // logical (row-major) order of `a` is column-major for the reversed dims
    for v in a.iter() {
        bytes.extend_from_slice(&(v.re as f32).to_le_bytes());
        bytes.extend_from_slice(&(v.im as f32).to_le_bytes());
    }
    let mut f = fs::File::create(with_ext(stem, "dat"))?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Writes a real array as `complex64` with zero imaginary parts.
pub fn write_real_array<D: Dimension>(stem: &Path, a: &Array<f64, D>) -> Result<()> {
    write_array(stem, &a.mapv(|v| C64::new(v, 0.0)))
}

/// Reads a header, returning dims in file order (fastest first).
pub fn read_header(stem: &Path) -> Result<Vec<usize>> {
    let path = with_ext(stem, "hdr");
    let text = fs::read_to_string(&path)?;
    let lines: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    if lines.len() != 3 {
        return Err(format_err(&path, format!("expected 3 header lines, found {}", lines.len())));
    }
    let ndim: usize = lines[0]
        .parse()
        .map_err(|_| format_err(&path, format!("bad ndim {:?}", lines[0])))?;
    let dims: Vec<usize> = lines[1]
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| format_err(&path, format!("bad dimension {t:?}"))))
        .collect::<Result<_>>()?;
    if dims.len() != ndim {
        return Err(format_err(&path, format!("ndim {ndim} but {} dims listed", dims.len())));
    }
    if lines[2] != ELEMENT {
        return Err(format_err(&path, format!("unsupported element type {:?}", lines[2])));
    }
    Ok(dims)
}

/// Reads an array back into row-major shape (header dims reversed).
pub fn read_array(stem: &Path) -> Result<ArrayD<C64>> {
    let dims = read_header(stem)?;
    let path = with_ext(stem, "dat");
    let bytes = fs::read(&path)?;
    let n: usize = dims.iter().product();
    if bytes.len() != n * 8 {
        return Err(format_err(
            &path,
            format!("header promises {n} elements but payload holds {} bytes", bytes.len()),
        ));
    }
    let values: Vec<C64> = bytes
        .chunks_exact(8)
        .map(|c| {
            let re = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            let im = f32::from_le_bytes([c[4], c[5], c[6], c[7]]);
            C64::new(re as f64, im as f64)
        })
        .collect();
    let shape: Vec<usize> = dims.iter().rev().copied().collect();
    ArrayD::from_shape_vec(IxDyn(&shape), values).map_err(|e| format_err(&path, e.to_string()))
}

/// Reads an array and checks its dimensionality.
pub fn read_array_nd<D: Dimension>(stem: &Path) -> Result<Array<C64, D>> {
    let a = read_array(stem)?;
    let found = a.ndim();
    a.into_dimensionality::<D>().map_err(|_| {
        format_err(
            &with_ext(stem, "hdr"),
            format!("expected {} dimensions, found {found}", D::NDIM.unwrap_or(0)),
        )
    })
}

/// Comma-separated table with a header row and LF line endings.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        if r.len() != header.len() {
            return Err(Error::dims("csv row", header.len(), r.len()));
        }
        out.push_str(&r.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Parses a CSV written by [`write_csv`]: header and rows of fields.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| format_err(path, "empty csv"))?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let rows = lines
        .map(|l| l.split(',').map(|s| s.trim().to_string()).collect::<Vec<_>>())
        .collect::<Vec<_>>();
    if let Some(bad) = rows.iter().position(|r| r.len() != header.len()) {
        return Err(format_err(path, format!("row {} has the wrong field count", bad + 1)));
    }
    Ok((header, rows))
}

/// Flip schedule as `echo,flip_deg` rows (echo index from 1).
pub fn write_schedule(path: &Path, flips_deg: &[f64]) -> Result<()> {
    let rows: Vec<Vec<String>> = flips_deg
        .iter()
        .enumerate()
        .map(|(i, f)| vec![(i + 1).to_string(), f.to_string()])
        .collect();
    write_csv(path, &["echo", "flip_deg"], &rows)
}

pub fn read_schedule(path: &Path) -> Result<Vec<f64>> {
    let (header, rows) = read_csv(path)?;
    let col = header
        .iter()
        .position(|h| h == "flip_deg")
        .ok_or_else(|| format_err(path, "missing flip_deg column"))?;
    rows.iter()
        .map(|r| {
            r[col]
                .parse::<f64>()
                .map_err(|_| format_err(path, format!("bad flip {:?}", r[col])))
        })
        .collect()
}
