//! File formats: the `SLFM` binary matrix, comma-separated matrices and
//! `index,label` label files.
//!
//! `SLFM` layout (little-endian): magic `SLFM`, `u32` rows, `u32` cols, then
//! `rows * cols` row-major `f32` values. Log-prediction matrices are stored
//! `K x N` (one row per label); feature matrices `N x D` (one row per example).

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const SLFM_MAGIC: &[u8; 4] = b"SLFM";

/// A raw row-major matrix as read from disk, before any validation.
#[derive(Debug, Clone, PartialEq)]
pub struct RawMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

pub fn write_slfm<W: Write>(mut out: W, rows: usize, cols: usize, row_major: &[f64]) -> Result<()> {
    if row_major.len() != rows * cols {
        return Err(Error::DimensionMismatch {
            context: "SLFM payload",
            expected: rows * cols,
            found: row_major.len(),
        });
    }
    let rows32 = u32::try_from(rows).map_err(|_| Error::TooLarge(format!("{rows} rows")))?;
    let cols32 = u32::try_from(cols).map_err(|_| Error::TooLarge(format!("{cols} columns")))?;
    out.write_all(SLFM_MAGIC)?;
    out.write_all(&rows32.to_le_bytes())?;
    out.write_all(&cols32.to_le_bytes())?;
    let mut buf = Vec::with_capacity(row_major.len() * 4);
    for &v in row_major {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_slfm<R: Read>(mut input: R) -> Result<RawMatrix> {
    let mut header = [0u8; 12];
    input
        .read_exact(&mut header)
        .map_err(|_| Error::Format("SLFM header truncated".into()))?;
    if &header[..4] != SLFM_MAGIC {
        return Err(Error::Format("missing SLFM magic".into()));
    }
    let rows = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format("SLFM dimensions overflow".into()))?;
    let mut payload = Vec::new();
    input.read_to_end(&mut payload)?;
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "SLFM payload has {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Ok(RawMatrix { rows, cols, values })
}

/// Reads a comma-separated matrix. A first line that does not parse as numbers is
/// treated as a header and skipped.
pub fn read_csv_matrix<R: Read>(input: R) -> Result<RawMatrix> {
    let mut rows = 0;
    let mut cols = None;
    let mut values = Vec::new();
    for (lineno, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|f| f.trim().parse::<f64>()).collect();
        let row = match parsed {
            Ok(row) => row,
            Err(_) if lineno == 0 => continue,
            Err(e) => return Err(Error::Format(format!("line {}: {e}", lineno + 1))),
        };
        match cols {
            None => cols = Some(row.len()),
            Some(c) if c != row.len() => {
                return Err(Error::Format(format!(
                    "line {} has {} fields, expected {c}",
                    lineno + 1,
                    row.len()
                )))
            }
            _ => {}
        }
        values.extend(row);
        rows += 1;
    }
    let cols = cols.ok_or_else(|| Error::Format("empty CSV matrix".into()))?;
    Ok(RawMatrix { rows, cols, values })
}

pub fn write_csv_matrix<W: Write>(out: W, rows: usize, cols: usize, row_major: &[f64]) -> Result<()> {
    let mut out = BufWriter::new(out);
    for r in 0..rows {
        let line: Vec<String> = row_major[r * cols..(r + 1) * cols]
            .iter()
            .map(|v| v.to_string())
            .collect();
        writeln!(out, "{}", line.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// Dispatches on the magic bytes: `SLFM` files are binary, anything else is CSV.
pub fn read_matrix_file(path: &Path) -> Result<RawMatrix> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(SLFM_MAGIC) {
        read_slfm(bytes.as_slice())
    } else {
        read_csv_matrix(bytes.as_slice())
    }
}

pub fn write_labels_csv<W: Write>(out: W, labels: &[usize]) -> Result<()> {
    let mut out = BufWriter::new(out);
    writeln!(out, "index,label")?;
    for (i, y) in labels.iter().enumerate() {
        writeln!(out, "{i},{y}")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads an `index,label` file; indices must be exactly `0..N` in order.
pub fn read_labels_csv<R: Read>(input: R) -> Result<Vec<usize>> {
    let mut labels = Vec::new();
    for (lineno, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || (lineno == 0 && line.starts_with("index")) {
            continue;
        }
        let mut fields = line.split(',');
        let (Some(idx), Some(label), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(Error::Format(format!("line {}: expected index,label", lineno + 1)));
        };
        let bad = |e: std::num::ParseIntError| Error::Format(format!("line {}: {e}", lineno + 1));
        let idx: usize = idx.trim().parse().map_err(bad)?;
        let label: usize = label.trim().parse().map_err(bad)?;
        if idx != labels.len() {
            return Err(Error::Format(format!(
                "line {}: index {idx} out of sequence",
                lineno + 1
            )));
        }
        labels.push(label);
    }
    Ok(labels)
}
