//! Dense row-major matrices and their on-disk form.
//!
//! File layout: `rows: u32 LE`, `cols: u32 LE`, then `rows * cols` little-endian
//! `f32` values in row-major order. Values are held as `f64` in memory; every
//! matrix that is meant to be persisted is rounded through `f32` first so that
//! a save/load cycle reproduces it exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for Matrix {
    type Error = Error;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        Matrix::from_vec(raw.rows, raw.cols, raw.data)
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R], cols: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// Rounds every entry to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        round_slice_to_f32(&mut self.data);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode(self.rows, self.cols, &self.data)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let (rows, cols, data) = decode(bytes, path)?;
        Ok(Matrix { rows, cols, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

pub fn round_slice_to_f32(values: &mut [f64]) {
    for v in values {
        *v = *v as f32 as f64;
    }
}

/// Writes a flat vector as a `len x 1` matrix.
pub fn save_vector(path: &Path, values: &[f64]) -> Result<()> {
    fs::write(path, encode(values.len(), 1, values)).map_err(|e| Error::io(path, e))
}

pub fn load_vector(path: &Path) -> Result<Vec<f64>> {
    let m = Matrix::load(path)?;
    if m.cols != 1 {
        return Err(Error::Format {
            path: path.into(),
            detail: format!("expected a column vector, found {} columns", m.cols),
        });
    }
    Ok(m.data)
}

fn encode(rows: usize, cols: usize, data: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * data.len());
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn decode(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bad = |detail: String| Error::Format {
        path: path.into(),
        detail,
    };
    if bytes.len() < 8 {
        return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() != rows * cols * 4 {
        return Err(bad(format!(
            "header says {rows}x{cols} but payload has {} bytes",
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok((rows, cols, data))
}
