//! Repo-wide binary matrix format: a single JSON header line
//! `{"rows":R,"cols":C}` followed by `R*C` little-endian `f32` values in
//! row-major order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct MatrixHeader {
    pub rows: usize,
    pub cols: usize,
}

pub fn write_matrix<W: Write>(out: &mut W, m: &Array2<f32>) -> std::io::Result<()> {
    let header = MatrixHeader {
        rows: m.nrows(),
        cols: m.ncols(),
    };
    let line = serde_json::to_string(&header).expect("header serializes");
    out.write_all(line.as_bytes())?;
    out.write_all(b"\n")?;
    let mut buf = Vec::with_capacity(m.len() * 4);
    for v in m.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)
}

pub fn read_matrix<R: BufRead>(input: &mut R) -> std::io::Result<Array2<f32>> {
    let mut line = String::new();
    input.read_line(&mut line)?;
    let header: MatrixHeader = serde_json::from_str(line.trim_end())
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
    let mut bytes = vec![0u8; header.rows * header.cols * 4];
    input.read_exact(&mut bytes)?;
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Array2::from_shape_vec((header.rows, header.cols), data)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

pub fn save_matrix(path: &Path, m: &Array2<f32>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_matrix(&mut w, m)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_matrix(path: &Path) -> Result<Array2<f32>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_matrix(&mut BufReader::new(file)).map_err(|e| Error::io(path, e))
}
