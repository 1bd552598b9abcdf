//! Binary feature container.
//!
//! Layout (all little-endian): the four bytes `MELF`, `rows: u64`,
//! `cols: u64`, then `rows * cols` `f32` values in row-major order. Mel
//! spectrograms are `frames × n_mels`; F0 tracks use the same container with
//! a single column.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MELF";
const HEADER_LEN: u64 = 4 + 8 + 8;

/// Log-magnitude mel features, `frames × n_mels`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    values: Array2<f64>,
}

impl MelSpectrogram {
    /// Rejects empty or non-finite matrices.
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.nrows() == 0 {
            return Err(Error::Empty("mel spectrogram has zero frames".into()));
        }
        if values.ncols() == 0 {
            return Err(Error::Empty("mel spectrogram has zero mel bins".into()));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::FeatureFormat(format!("non-finite mel value {bad}")));
        }
        Ok(Self { values })
    }

    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_mels(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    /// Checks the mel axis against the configured width.
    pub fn expect_mels(&self, n_mels: usize) -> Result<()> {
        if self.n_mels() != n_mels {
            return Err(Error::shape(format!(
                "expected {n_mels} mel bins, features have {}",
                self.n_mels()
            )));
        }
        Ok(())
    }
}

pub fn write_matrix(path: &Path, values: &Array2<f64>) -> Result<()> {
    if values.nrows() == 0 {
        return Err(Error::Empty(format!(
            "{}: refusing to write zero frames",
            path.display()
        )));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(values.nrows() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&(values.ncols() as u64).to_le_bytes()).map_err(io)?;
    for v in values.iter() {
        w.write_all(&(*v as f32).to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

fn read_header(r: &mut impl Read, path: &Path) -> Result<(usize, usize)> {
    let mut head = [0u8; HEADER_LEN as usize];
    r.read_exact(&mut head)
        .map_err(|_| Error::FeatureFormat(format!("{}: truncated header", path.display())))?;
    if &head[..4] != MAGIC {
        return Err(Error::FeatureFormat(format!("{}: bad magic bytes", path.display())));
    }
    let rows = u64::from_le_bytes(head[4..12].try_into().expect("8 bytes")) as usize;
    let cols = u64::from_le_bytes(head[12..20].try_into().expect("8 bytes")) as usize;
    Ok((rows, cols))
}

/// Reads only the `(rows, cols)` header, validating it against file size.
pub fn read_shape(path: &Path) -> Result<(usize, usize)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    let (rows, cols) = read_header(&mut BufReader::new(file), path)?;
    check_size(path, rows, cols, len)?;
    Ok((rows, cols))
}

fn check_size(path: &Path, rows: usize, cols: usize, len: u64) -> Result<()> {
    let expected = (rows as u64)
        .checked_mul(cols as u64)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN));
    if expected != Some(len) {
        return Err(Error::FeatureFormat(format!(
            "{}: header says {rows}×{cols} but file holds {len} bytes",
            path.display()
        )));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::FeatureFormat(format!(
            "{}: zero-sized matrix {rows}×{cols}",
            path.display()
        )));
    }
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    let mut r = BufReader::new(file);
    let (rows, cols) = read_header(&mut r, path)?;
    check_size(path, rows, cols, len)?;
    let mut bytes = vec![0u8; rows * cols * 4];
    r.read_exact(&mut bytes).map_err(|e| Error::io(path, e))?;
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), data).expect("sized above"))
}

pub fn write_features(path: &Path, mel: &MelSpectrogram) -> Result<()> {
    write_matrix(path, mel.values())
}

pub fn read_features(path: &Path) -> Result<MelSpectrogram> {
    MelSpectrogram::new(read_matrix(path)?)
}

/// F0 track (Hz per frame, 0 for unvoiced) stored as a one-column matrix.
pub fn write_f0(path: &Path, f0: &[f64]) -> Result<()> {
    let m = Array2::from_shape_vec((f0.len(), 1), f0.to_vec()).expect("column");
    write_matrix(path, &m)
}

pub fn read_f0(path: &Path) -> Result<Vec<f64>> {
    let m = read_matrix(path)?;
    if m.ncols() != 1 {
        return Err(Error::FeatureFormat(format!(
            "{}: F0 track must have one column, found {}",
            path.display(),
            m.ncols()
        )));
    }
    Ok(m.into_raw_vec_and_offset().0)
}
