use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Single-channel image, row-major, row index = depth.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Frame {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() || rows == 0 || cols == 0 {
            return Err(Error::invalid(format!(
                "frame: {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.shape(), other.shape());
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Mean of each row.
    pub fn row_means(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|r| self.row(r).iter().sum::<f64>() / self.cols as f64)
            .collect()
    }

    /// Min-max scaling to `[0, 1]`; a constant map becomes all zeros.
    pub fn normalized(&self) -> Self {
        let (lo, hi) = (self.min(), self.max());
        let span = hi - lo;
        if !(span > 0.0) || !span.is_finite() {
            return Self::filled(self.rows, self.cols, 0.0);
        }
        self.map(|v| ((v - lo) / span).clamp(0.0, 1.0))
    }

    /// Bilinear resampling with pixel-centre alignment.
    pub fn resize_bilinear(&self, rows: usize, cols: usize) -> Self {
        if (rows, cols) == self.shape() {
            return self.clone();
        }
        let sr = self.rows as f64 / rows as f64;
        let sc = self.cols as f64 / cols as f64;
        let axis = |dst: usize, scale: f64, len: usize| {
            let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        };
        Self::from_fn(rows, cols, |r, c| {
            let (r0, r1, fr) = axis(r, sr, self.rows);
            let (c0, c1, fc) = axis(c, sc, self.cols);
            let top = self.get(r0, c0) * (1.0 - fc) + self.get(r0, c1) * fc;
            let bot = self.get(r1, c0) * (1.0 - fc) + self.get(r1, c1) * fc;
            top * (1.0 - fr) + bot * fr
        })
    }

    /// 8-bit binary PGM (P5) bytes; values are clamped to `[0, 1]` and
    /// rounded to the nearest level.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.cols, self.rows).into_bytes();
        out.extend(
            self.data
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0;
        let mut token = || -> std::result::Result<String, String> {
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err("truncated PGM header".into());
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        if token()? != "P5" {
            return Err("not a binary PGM (P5)".into());
        }
        let num = |s: String| s.parse::<usize>().map_err(|_| format!("bad PGM header field {s:?}"));
        let cols = num(token()?)?;
        let rows = num(token()?)?;
        let maxval = num(token()?)?;
        if maxval == 0 || maxval > 255 {
            return Err(format!("unsupported PGM maxval {maxval}, expected 8-bit"));
        }
        // exactly one whitespace byte separates the header from the raster
        let start = pos + 1;
        let n = rows * cols;
        if rows == 0 || cols == 0 || bytes.len() < start + n {
            return Err(format!("PGM raster truncated: need {n} bytes"));
        }
        let data = bytes[start..start + n]
            .iter()
            .map(|&b| b as f64 / maxval as f64)
            .collect();
        Ok(Self { rows, cols, data })
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_pgm(&bytes).map_err(|m| Error::format(path, m))
    }
}
