//! Frequency-domain log-Gabor band-pass and Riesz transform.

use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;

use super::Frame;
use crate::error::{Error, Result};

/// Three real monogenic components of a band-passed frame.
#[derive(Clone, Debug, PartialEq)]
pub struct MonogenicTriple {
    /// Even (band-pass) part.
    pub m1: Frame,
    /// Riesz component along rows (depth).
    pub m2: Frame,
    /// Riesz component along columns.
    pub m3: Frame,
}

impl MonogenicTriple {
    pub fn even(&self) -> Frame {
        self.m1.map(f64::abs)
    }

    pub fn odd(&self) -> Frame {
        self.m2.zip_map(&self.m3, f64::hypot)
    }
}

/// Signed angular frequency of DFT bin `k` out of `n`, in radians per pixel.
pub fn bin_frequency(k: usize, n: usize) -> f64 {
    let signed = if k < (n + 1) / 2 { k as f64 } else { k as f64 - n as f64 };
    2.0 * PI * signed / n as f64
}

/// Log-Gabor radial gain; zero at DC.
pub fn log_gabor_gain(omega: f64, lambda0: f64, sigma0: f64) -> f64 {
    if omega <= 0.0 {
        return 0.0;
    }
    let omega0 = 2.0 * PI / lambda0;
    let l = (omega / omega0).ln();
    let s = sigma0.ln();
    (-(l * l) / (2.0 * s * s)).exp()
}

pub(crate) fn check_filter(lambda0: f64, sigma0: f64) -> Result<()> {
    if !(lambda0 > 2.0) || !lambda0.is_finite() {
        return Err(Error::invalid(format!(
            "log-Gabor wavelength must exceed 2 pixels (Nyquist), got {lambda0}"
        )));
    }
    if !(sigma0 > 0.0 && sigma0 < 1.0) {
        return Err(Error::invalid(format!("log-Gabor sigma0 must lie in (0,1), got {sigma0}")));
    }
    Ok(())
}

/// 2-D DFT of a frame, kept so several band-passes can share it.
pub struct Spectrum {
    rows: usize,
    cols: usize,
    bins: Vec<Complex64>,
}

fn fft2d(data: &mut [Complex64], rows: usize, cols: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(cols), planner.plan_fft_inverse(rows))
    } else {
        (planner.plan_fft_forward(cols), planner.plan_fft_forward(rows))
    };
    row_fft.process(data);
    let mut column = vec![Complex64::default(); rows];
    for c in 0..cols {
        for r in 0..rows {
            column[r] = data[r * cols + c];
        }
        col_fft.process(&mut column);
        for r in 0..rows {
            data[r * cols + c] = column[r];
        }
    }
    if inverse {
        let k = 1.0 / (rows * cols) as f64;
        data.iter_mut().for_each(|v| *v *= k);
    }
}

impl Spectrum {
    pub fn of(frame: &Frame) -> Self {
        let (rows, cols) = frame.shape();
        let mut bins: Vec<Complex64> = frame.data().iter().map(|&v| Complex64::new(v, 0.0)).collect();
        fft2d(&mut bins, rows, cols, false);
        Self { rows, cols, bins }
    }

    /// Inverse transform of `self · H` for a per-bin multiplier, real part.
    fn filtered(&self, h: impl Fn(f64, f64) -> Complex64) -> Frame {
        let mut buf = self.bins.clone();
        for r in 0..self.rows {
            let wr = bin_frequency(r, self.rows);
            for c in 0..self.cols {
                let wc = bin_frequency(c, self.cols);
                buf[r * self.cols + c] *= h(wr, wc);
            }
        }
        fft2d(&mut buf, self.rows, self.cols, true);
        Frame::new(self.rows, self.cols, buf.into_iter().map(|z| z.re).collect())
            .expect("shape preserved")
    }

    pub fn log_gabor(&self, lambda0: f64, sigma0: f64) -> Result<Frame> {
        check_filter(lambda0, sigma0)?;
        Ok(self.filtered(|wr, wc| Complex64::new(log_gabor_gain(wr.hypot(wc), lambda0, sigma0), 0.0)))
    }

    pub fn monogenic(&self, lambda0: f64, sigma0: f64) -> Result<MonogenicTriple> {
        check_filter(lambda0, sigma0)?;
        let gain = |wr: f64, wc: f64| log_gabor_gain(wr.hypot(wc), lambda0, sigma0);
        let riesz = |w: f64, wr: f64, wc: f64| {
            let mag = wr.hypot(wc);
            if mag == 0.0 {
                Complex64::new(0.0, 0.0)
            } else {
                Complex64::new(0.0, w / mag * gain(wr, wc))
            }
        };
        Ok(MonogenicTriple {
            m1: self.filtered(|wr, wc| Complex64::new(gain(wr, wc), 0.0)),
            m2: self.filtered(|wr, wc| riesz(wr, wr, wc)),
            m3: self.filtered(|wr, wc| riesz(wc, wr, wc)),
        })
    }
}

/// Log-Gabor band-pass of `frame` (the `m1` component).
pub fn log_gabor_response(frame: &Frame, lambda0: f64, sigma0: f64) -> Result<Frame> {
    check_filter(lambda0, sigma0)?;
    Spectrum::of(frame).log_gabor(lambda0, sigma0)
}

/// Band-pass plus both Riesz components, via the FFT.
pub fn monogenic(frame: &Frame, lambda0: f64, sigma0: f64) -> Result<MonogenicTriple> {
    check_filter(lambda0, sigma0)?;
    Spectrum::of(frame).monogenic(lambda0, sigma0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gain_at_centre_and_one_bandwidth_down() {
        let (lambda0, sigma0) = (8.0, 0.55);
        let w0 = 2.0 * PI / lambda0;
        assert!((log_gabor_gain(w0, lambda0, sigma0) - 1.0).abs() < 1e-15);
        assert!((log_gabor_gain(w0 * sigma0, lambda0, sigma0) - (-0.5f64).exp()).abs() < 1e-12);
        assert_eq!(log_gabor_gain(0.0, lambda0, sigma0), 0.0);
    }

    #[test]
    fn wavelength_at_or_below_nyquist_is_rejected() {
        let f = Frame::filled(8, 8, 0.5);
        assert!(monogenic(&f, 2.0, 0.55).is_err());
        assert!(log_gabor_response(&f, 1.5, 0.55).is_err());
        assert!(monogenic(&f, 4.0, 1.0).is_err());
    }

    #[test]
    fn constant_frame_has_no_band_energy() {
        let f = Frame::filled(16, 16, 0.7);
        let m = monogenic(&f, 6.0, 0.55).unwrap();
        for part in [&m.m1, &m.m2, &m.m3] {
            assert!(part.data().iter().all(|v| v.abs() <= 1e-8));
        }
    }

    #[test]
    fn bin_frequencies_are_signed() {
        assert_eq!(bin_frequency(0, 8), 0.0);
        assert!((bin_frequency(1, 8) - PI / 4.0).abs() < 1e-15);
        assert!((bin_frequency(7, 8) + PI / 4.0).abs() < 1e-15);
        assert!((bin_frequency(4, 8) + PI).abs() < 1e-15);
        assert!((bin_frequency(2, 5) - 4.0 * PI / 5.0).abs() < 1e-15);
    }
}
