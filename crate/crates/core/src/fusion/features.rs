use std::path::Path;

use super::spectral::{check_filter, MonogenicTriple, Spectrum};
use super::{EnergyMode, Frame, FusionConfig, PhasePolarity};
use crate::error::{Error, Result};
use crate::tensor::{read_records, write_records, Record, Scalar, Tensor};

/// Number of channels in every stack fed to the network.
pub const STACK_CHANNELS: usize = 10;

/// Per-frame multi-channel representation, channels in `[0, 1]` for the
/// fused variant.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    channels: Vec<Frame>,
}

impl FeatureStack {
    pub fn new(channels: Vec<Frame>) -> Result<Self> {
        let first = channels
            .first()
            .ok_or_else(|| Error::invalid("feature stack needs at least one channel"))?;
        if let Some(bad) = channels.iter().find(|c| c.shape() != first.shape()) {
            return Err(Error::invalid(format!(
                "feature stack channels disagree in shape: {:?} vs {:?}",
                first.shape(),
                bad.shape()
            )));
        }
        Ok(Self { channels })
    }

    pub fn channels(&self) -> &[Frame] {
        &self.channels
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        let (r, c) = self.channels[0].shape();
        (self.channels.len(), r, c)
    }

    /// `C×H×W` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let (c, h, w) = self.shape();
        let data = self
            .channels
            .iter()
            .flat_map(|f| f.data().iter().map(|&v| T::of(v)))
            .collect();
        Tensor::new(&[c, h, w], data).expect("consistent shape")
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        if t.rank() != 3 {
            return Err(Error::invalid(format!("feature stack tensor must be C×H×W, got {:?}", t.shape())));
        }
        let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let channels = (0..c)
            .map(|i| {
                let d = t.data()[i * h * w..(i + 1) * h * w].iter().map(|v| v.as_f64()).collect();
                Frame::new(h, w, d)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(channels)
    }

    /// One tensor record per channel, named `channel_00`, `channel_01`, ...
    pub fn save(&self, path: &Path) -> Result<()> {
        let records: Vec<Record> = self
            .channels
            .iter()
            .enumerate()
            .map(|(i, f)| Record {
                name: format!("channel_{i:02}"),
                dims: vec![f.rows(), f.cols()],
                values: f.data().iter().map(|&v| v as f32).collect(),
            })
            .collect();
        write_records(path, &records)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let records = read_records(path)?;
        let channels = records
            .into_iter()
            .map(|r| {
                if r.dims.len() != 2 {
                    return Err(Error::format(path, format!("record {} is not a 2-D map", r.name)));
                }
                Frame::new(r.dims[0], r.dims[1], r.values.iter().map(|&v| v as f64).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(channels)
    }
}

/// Depth-dependent gain `exp(-a·d)` with `d = row / (rows - 1)`.
pub fn tga(frame: &Frame, a: f64) -> Result<Frame> {
    if !(a >= 0.0) || !a.is_finite() {
        return Err(Error::invalid(format!("attenuation factor must be >= 0, got {a}")));
    }
    let denom = (frame.rows().max(2) - 1) as f64;
    let gains: Vec<f64> = (0..frame.rows()).map(|r| (-a * r as f64 / denom).exp()).collect();
    Ok(Frame::from_fn(frame.rows(), frame.cols(), |r, c| frame.get(r, c) * gains[r]))
}

/// Cumulative down-column energy, normalized per column by the column
/// total so the bottom row is 1. Zero-energy columns stay 0.
pub fn ibs(frame: &Frame) -> Frame {
    let (rows, cols) = frame.shape();
    let mut out = Frame::filled(rows, cols, 0.0);
    for c in 0..cols {
        let mut acc = 0.0;
        for r in 0..rows {
            let v = frame.get(r, c);
            acc += v * v;
            out.set(r, c, acc);
        }
        if acc > 0.0 {
            for r in 0..rows {
                out.set(r, c, out.get(r, c) / acc);
            }
        }
    }
    out
}

/// Local phase before normalization, `1 ∓ atan(m1 / (odd + eps))`.
pub fn local_phase_raw(m: &MonogenicTriple, eps: f64, polarity: PhasePolarity) -> Frame {
    let sign = match polarity {
        PhasePolarity::Trough => -1.0,
        PhasePolarity::Ridge => 1.0,
    };
    let odd = m.odd();
    m.m1.zip_map(&odd, |m1, o| 1.0 + sign * (m1 / (o + eps)).atan())
}

pub fn local_phase(m: &MonogenicTriple, eps: f64, polarity: PhasePolarity) -> Frame {
    local_phase_raw(m, eps, polarity).normalized()
}

/// Phase symmetry before normalization: `max(even - odd - thresh, 0)` over
/// the local energy (squared or not, per `mode`).
pub fn phase_symmetry_raw(m: &MonogenicTriple, thresh: f64, eps: f64, mode: EnergyMode) -> Result<Frame> {
    if !(thresh >= 0.0) {
        return Err(Error::invalid(format!("phase symmetry threshold must be >= 0, got {thresh}")));
    }
    let data = m
        .m1
        .data()
        .iter()
        .zip(m.m2.data())
        .zip(m.m3.data())
        .map(|((&a, &b), &c)| {
            let even = a.abs();
            let odd = b.hypot(c);
            let num = (even - odd - thresh).max(0.0);
            let energy2 = a * a + b * b + c * c;
            let den = match mode {
                EnergyMode::Squared => energy2,
                EnergyMode::SqrtEnergy => energy2.sqrt(),
            } + eps;
            num / den
        })
        .collect();
    Frame::new(m.m1.rows(), m.m1.cols(), data)
}

pub fn phase_symmetry(m: &MonogenicTriple, thresh: f64, eps: f64, mode: EnergyMode) -> Result<Frame> {
    Ok(phase_symmetry_raw(m, thresh, eps, mode)?.normalized())
}

/// Fused channel `LP · FS · (1 - IBS)` for one wavelength, min-max normalized.
pub fn fused_channel(m: &MonogenicTriple, ibs_map: &Frame, cfg: &FusionConfig) -> Result<Frame> {
    let lp = local_phase(m, cfg.epsilon, cfg.polarity);
    let fs = phase_symmetry(m, cfg.thresh, cfg.epsilon, cfg.energy_mode)?;
    let data = lp
        .data()
        .iter()
        .zip(fs.data())
        .zip(ibs_map.data())
        .map(|((&l, &f), &b)| l * f * (1.0 - b))
        .collect();
    Ok(Frame::new(lp.rows(), lp.cols(), data)?.normalized())
}

/// One fused channel per wavelength in `cfg.lambdas`, in that order.
pub fn fuse(frame: &Frame, cfg: &FusionConfig) -> Result<FeatureStack> {
    if cfg.lambdas.is_empty() {
        return Err(Error::invalid("fusion needs at least one wavelength"));
    }
    for &l in &cfg.lambdas {
        check_filter(l, cfg.sigma0)?;
    }
    let spectrum = Spectrum::of(frame);
    let ibs_map = ibs(frame);
    let channels = cfg
        .lambdas
        .iter()
        .map(|&l| fused_channel(&spectrum.monogenic(l, cfg.sigma0)?, &ibs_map, cfg))
        .collect::<Result<Vec<_>>>()?;
    FeatureStack::new(channels)
}

/// Mean of normalized-grayscale channel `i`: linear from 0.3 to 0.7.
pub fn norm_stack_mean(i: usize) -> f64 {
    0.3 + 0.4 * i as f64 / (STACK_CHANNELS - 1) as f64
}

pub const NORM_STACK_STD: f64 = 0.5;

/// Ten shifted copies `(frame - mu_i) / 0.5`.
pub fn norm_stack(frame: &Frame) -> FeatureStack {
    let channels = (0..STACK_CHANNELS)
        .map(|i| {
            let mu = norm_stack_mean(i);
            frame.map(|v| (v - mu) / NORM_STACK_STD)
        })
        .collect();
    FeatureStack::new(channels).expect("ten equal-shape channels")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tga_examples() {
        let f = Frame::filled(5, 3, 1.0);
        assert_eq!(tga(&f, 0.0).unwrap(), f);
        let out = tga(&f, 1.0).unwrap();
        assert!((out.get(4, 1) - (-1.0f64).exp()).abs() < 1e-15);
        assert!((out.get(4, 1) - 0.36788).abs() < 1e-5);
        for r in 1..5 {
            assert!(out.get(r, 0) < out.get(r - 1, 0));
        }
        assert!(tga(&f, -0.1).is_err());
    }

    #[test]
    fn ibs_examples() {
        let ones = Frame::filled(4, 2, 1.0);
        let m = ibs(&ones);
        for r in 0..4 {
            assert!((m.get(r, 0) - (r + 1) as f64 / 4.0).abs() < 1e-15);
        }
        let col = Frame::new(3, 1, vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(ibs(&col).data(), &[1.0, 1.0, 1.0]);
        let zero = Frame::filled(3, 3, 0.0);
        assert!(ibs(&zero).data().iter().all(|&v| v == 0.0));
    }

    fn triple(m1: f64, m2: f64, m3: f64) -> MonogenicTriple {
        MonogenicTriple {
            m1: Frame::filled(2, 2, m1),
            m2: Frame::filled(2, 2, m2),
            m3: Frame::filled(2, 2, m3),
        }
    }

    #[test]
    fn local_phase_limits() {
        let zero = triple(0.0, 0.3, 0.4);
        let raw = local_phase_raw(&zero, 1e-6, PhasePolarity::Trough);
        assert!(raw.data().iter().all(|&v| v == 1.0));
        assert!(local_phase(&zero, 1e-6, PhasePolarity::Trough).data().iter().all(|&v| v == 0.0));

        let big = triple(1e12, 0.0, 0.0);
        let raw = local_phase_raw(&big, 1e-6, PhasePolarity::Trough);
        assert!((raw.get(0, 0) - (1.0 - std::f64::consts::FRAC_PI_2)).abs() < 1e-9);
        let ridge = local_phase_raw(&big, 1e-6, PhasePolarity::Ridge);
        assert!((ridge.get(0, 0) - (1.0 + std::f64::consts::FRAC_PI_2)).abs() < 1e-9);
    }

    #[test]
    fn phase_symmetry_floor_and_modes() {
        let t = triple(0.0, 0.0, 0.0);
        let fs = phase_symmetry_raw(&t, 0.01, 1e-6, EnergyMode::Squared).unwrap();
        assert!(fs.data().iter().all(|&v| v == 0.0));
        let t = triple(0.5, 0.0, 0.0);
        let sq = phase_symmetry_raw(&t, 0.0, 0.0, EnergyMode::Squared).unwrap();
        let rt = phase_symmetry_raw(&t, 0.0, 0.0, EnergyMode::SqrtEnergy).unwrap();
        assert!((sq.get(0, 0) - 2.0).abs() < 1e-12);
        assert!((rt.get(0, 0) - 1.0).abs() < 1e-12);
        assert!(phase_symmetry_raw(&t, -1.0, 0.0, EnergyMode::SqrtEnergy).is_err());
    }

    #[test]
    fn norm_stack_means() {
        assert!((norm_stack_mean(0) - 0.3).abs() < 1e-15);
        assert!((norm_stack_mean(9) - 0.7).abs() < 1e-15);
        assert!((norm_stack_mean(4) - 0.477_777_777_777_777_8).abs() < 1e-12);
        let s = norm_stack(&Frame::filled(4, 4, 0.5));
        assert_eq!(s.len(), 10);
        // no channel has mean exactly 0.5, but the shift is exact linear
        for (i, ch) in s.channels().iter().enumerate() {
            let expect = (0.5 - norm_stack_mean(i)) / 0.5;
            assert!(ch.data().iter().all(|&v| (v - expect).abs() < 1e-15));
        }
        let f = Frame::filled(2, 2, norm_stack_mean(3));
        assert!(norm_stack(&f).channels()[3].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stack_tensor_round_trip() {
        let s = norm_stack(&Frame::from_fn(3, 5, |r, c| (r * 5 + c) as f64 / 15.0));
        let t = s.to_tensor::<f64>();
        assert_eq!(t.shape(), &[10, 3, 5]);
        assert_eq!(FeatureStack::from_tensor(&t).unwrap(), s);
    }
}
