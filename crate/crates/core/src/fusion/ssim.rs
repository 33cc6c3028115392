use super::Frame;
use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
/// Dynamic range of unit-scaled frames.
const L: f64 = 1.0;

pub fn ssim_constants() -> (f64, f64) {
    ((K1 * L).powi(2), (K2 * L).powi(2))
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let x = i as f64 - half;
        *t = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Separable "valid" Gaussian filter: output is `(rows-10)×(cols-10)`.
fn filter_valid(data: &[f64], rows: usize, cols: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (orows, ocols) = (rows - k + 1, cols - k + 1);
    let mut horiz = vec![0.0; rows * ocols];
    for r in 0..rows {
        let src = &data[r * cols..(r + 1) * cols];
        for c in 0..ocols {
            horiz[r * ocols + c] = taps.iter().zip(&src[c..c + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; orows * ocols];
    for r in 0..orows {
        for c in 0..ocols {
            out[r * ocols + c] = (0..k).map(|i| taps[i] * horiz[(r + i) * ocols + c]).sum();
        }
    }
    out
}

/// Mean structural similarity over all 11×11 Gaussian windows lying fully
/// inside the frame.
pub fn ssim(a: &Frame, b: &Frame) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "ssim",
            &[a.rows(), a.cols()],
            &[b.rows(), b.cols()],
        ));
    }
    let (rows, cols) = a.shape();
    if rows < SSIM_WINDOW || cols < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim needs frames of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {rows}x{cols}"
        )));
    }
    let taps = gaussian_taps();
    let (c1, c2) = ssim_constants();
    let (x, y) = (a.data(), b.data());
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect() };
    let mu_x = filter_valid(x, rows, cols, &taps);
    let mu_y = filter_valid(y, rows, cols, &taps);
    let xx = filter_valid(&prod(&|p, _| p * p), rows, cols, &taps);
    let yy = filter_valid(&prod(&|_, q| q * q), rows, cols, &taps);
    let xy = filter_valid(&prod(&|p, q| p * q), rows, cols, &taps);
    let n = mu_x.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = xx[i] - mx * mx;
            let vy = yy[i] - my * my;
            let cov = xy[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}
