//! Acoustic feature fusion.
//!
//! A frame is optionally attenuated with depth ([`tga`]), then turned into a
//! ten-channel [`FeatureStack`]: for every log-Gabor wavelength the local
//! phase, phase symmetry and integrated backscatter maps are multiplied into
//! one channel ([`fuse`]). [`norm_stack`] is the plain-grayscale alternative
//! and [`ssim`] gates training pairs.

mod features;
mod frame;
mod spectral;
mod ssim;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::trace::{note, Trace};

pub use features::{
    fuse, fused_channel, ibs, local_phase, local_phase_raw, norm_stack, norm_stack_mean,
    phase_symmetry, phase_symmetry_raw, tga, FeatureStack, NORM_STACK_STD, STACK_CHANNELS,
};
pub use frame::Frame;
pub use spectral::{bin_frequency, log_gabor_gain, log_gabor_response, monogenic, MonogenicTriple, Spectrum};
pub use ssim::{gaussian_taps, ssim, ssim_constants, SSIM_SIGMA, SSIM_WINDOW};

/// Denominator of the phase-symmetry ratio.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnergyMode {
    /// `m1² + m2² + m3²`
    Squared,
    /// `sqrt(m1² + m2² + m3²)`
    SqrtEnergy,
}

/// Sign of the arctangent term in the local phase map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhasePolarity {
    /// `1 - atan(m1/odd)`: bright ridges become minima.
    Trough,
    /// `1 + atan(m1/odd)`: bright ridges become maxima.
    Ridge,
}

impl EnergyMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EnergyMode::Squared => "squared",
            EnergyMode::SqrtEnergy => "sqrt_energy",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "squared" => Some(EnergyMode::Squared),
            "sqrt_energy" => Some(EnergyMode::SqrtEnergy),
            _ => None,
        }
    }
}

impl PhasePolarity {
    pub fn as_str(self) -> &'static str {
        match self {
            PhasePolarity::Trough => "trough",
            PhasePolarity::Ridge => "ridge",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "trough" => Some(PhasePolarity::Trough),
            "ridge" => Some(PhasePolarity::Ridge),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    /// log-Gabor bandwidth ratio
    pub sigma0: f64,
    /// wavelengths in pixels, one channel each
    pub lambdas: Vec<f64>,
    pub thresh: f64,
    pub epsilon: f64,
    /// depth attenuation per unit normalized depth
    pub attenuation_a: f64,
    pub energy_mode: EnergyMode,
    pub polarity: PhasePolarity,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            sigma0: 0.55,
            lambdas: (1..=10).map(|i| 3.0 * i as f64).collect(),
            thresh: 0.01,
            epsilon: 1e-6,
            attenuation_a: 1.5,
            energy_mode: EnergyMode::SqrtEnergy,
            polarity: PhasePolarity::Ridge,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma0 > 0.0 && self.sigma0 < 1.0) {
            return Err(Error::invalid(format!("sigma0 must lie in (0,1), got {}", self.sigma0)));
        }
        if self.lambdas.is_empty() {
            return Err(Error::invalid("lambdas must not be empty"));
        }
        if let Some(l) = self.lambdas.iter().find(|&&l| !(l > 2.0)) {
            return Err(Error::invalid(format!("every wavelength must exceed 2 pixels, got {l}")));
        }
        if self.lambdas.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("lambdas must be strictly increasing"));
        }
        if !(self.thresh >= 0.0) {
            return Err(Error::invalid(format!("thresh must be >= 0, got {}", self.thresh)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.attenuation_a >= 0.0) {
            return Err(Error::invalid(format!(
                "attenuation_a must be >= 0, got {}",
                self.attenuation_a
            )));
        }
        Ok(())
    }
}

/// Network input representation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputMode {
    Fused,
    NormStack,
}

impl InputMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InputMode::Fused => "fused",
            InputMode::NormStack => "norm_stack",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fused" => Some(InputMode::Fused),
            "norm_stack" | "norm" => Some(InputMode::NormStack),
            _ => None,
        }
    }
}

/// Frame-to-stack pipeline: resize, optional attenuation, then fusion or
/// the normalized-grayscale stack.
#[derive(Clone, Debug, PartialEq)]
pub struct Preprocess {
    pub size: usize,
    pub use_tga: bool,
    pub input_mode: InputMode,
    pub fusion: FusionConfig,
}

impl Default for Preprocess {
    fn default() -> Self {
        Self {
            size: 256,
            use_tga: true,
            input_mode: InputMode::Fused,
            fusion: FusionConfig::default(),
        }
    }
}

impl Preprocess {
    /// Names of the stages [`Preprocess::apply`] runs, in order.
    pub fn stages(&self) -> Vec<&'static str> {
        let mut s = vec!["resize"];
        if self.use_tga {
            s.push("tga");
        }
        s.push(match self.input_mode {
            InputMode::Fused => "fuse",
            InputMode::NormStack => "norm_stack",
        });
        s
    }

    pub fn apply(&self, frame: &Frame) -> Result<FeatureStack> {
        self.apply_traced(frame, None)
    }

    pub fn apply_traced(&self, frame: &Frame, trace: Option<&Trace>) -> Result<FeatureStack> {
        note(trace, "resize");
        let mut f = frame.resize_bilinear(self.size, self.size);
        if self.use_tga {
            note(trace, "tga");
            f = tga(&f, self.fusion.attenuation_a)?;
        }
        match self.input_mode {
            InputMode::Fused => {
                note(trace, "fuse");
                fuse(&f, &self.fusion)
            }
            InputMode::NormStack => {
                note(trace, "norm_stack");
                Ok(norm_stack(&f))
            }
        }
    }

    pub fn apply_all(&self, frames: &[Frame]) -> Result<Vec<FeatureStack>> {
        self.apply_all_traced(frames, None)
    }

    pub fn apply_all_traced(&self, frames: &[Frame], trace: Option<&Trace>) -> Result<Vec<FeatureStack>> {
        frames.par_iter().map(|f| self.apply_traced(f, trace)).collect()
    }
}
