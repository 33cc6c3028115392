//! Synthetic lung-ultrasound-like video with landmark ground truth.
//!
//! A scene is a rectangular field with brighter soft tissue above an
//! oscillating pleura band, dimmer A-line reverberations at integer
//! multiples of the pleura depth, vertical B-lines running from the pleura
//! to the bottom, and multiplicative Rayleigh-like speckle.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fusion::Frame;

#[derive(Clone, Debug, PartialEq)]
pub struct BLine {
    /// lateral position at frame 0, normalized to `[0, 1]`
    pub position: f64,
    /// lateral drift per frame, normalized
    pub drift: f64,
    /// Gaussian half-width, normalized
    pub width: f64,
    pub brightness: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Boundary {
    Clamp,
    Wrap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub frames: usize,
    pub size: usize,
    /// mean pleura depth, normalized
    pub pleura_depth: f64,
    /// oscillation amplitude, normalized depth
    pub amplitude: f64,
    /// oscillation frequency, cycles per frame
    pub frequency: f64,
    pub pleura_brightness: f64,
    /// band thickness (Gaussian std), normalized
    pub pleura_thickness: f64,
    pub a_line_count: usize,
    /// brightness ratio between successive A-lines
    pub a_line_decay: f64,
    pub b_lines: Vec<BLine>,
    pub b_line_boundary: Boundary,
    /// soft tissue above the pleura
    pub tissue_brightness: f64,
    /// aerated lung below the pleura
    pub lung_brightness: f64,
    pub speckle_strength: f64,
    /// frame-to-frame correlation of the speckle field
    pub speckle_correlation: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            frames: 40,
            size: 64,
            pleura_depth: 0.25,
            amplitude: 0.03,
            frequency: 0.05,
            pleura_brightness: 0.9,
            pleura_thickness: 0.015,
            a_line_count: 2,
            a_line_decay: 0.55,
            b_lines: vec![BLine {
                position: 0.6,
                drift: 0.003,
                width: 0.02,
                brightness: 0.7,
            }],
            b_line_boundary: Boundary::Clamp,
            tissue_brightness: 0.3,
            lung_brightness: 0.08,
            speckle_strength: 0.3,
            speckle_correlation: 0.9,
            seed: 7,
        }
    }
}

/// Landmarks of one frame, in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameTruth {
    pub pleura_row: f64,
    pub a_line_rows: Vec<f64>,
    pub b_line_cols: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct GroundTruth {
    pub frames: Vec<FrameTruth>,
}

impl GroundTruth {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// One line per frame: `pleura a1 a2 ... | b1 b2 ...`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for f in &self.frames {
            write!(s, "{}", f.pleura_row).unwrap();
            for a in &f.a_line_rows {
                write!(s, " {a}").unwrap();
            }
            s.push_str(" |");
            for b in &f.b_line_cols {
                write!(s, " {b}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut frames = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let (rows, cols) = line
                .split_once('|')
                .ok_or_else(|| format!("line {}: missing '|' separator", i + 1))?;
            let num = |s: &str| s.parse::<f64>().map_err(|_| format!("line {}: bad number {s:?}", i + 1));
            let rows: Vec<f64> = rows.split_whitespace().map(num).collect::<std::result::Result<_, _>>()?;
            let cols: Vec<f64> = cols.split_whitespace().map(num).collect::<std::result::Result<_, _>>()?;
            let (&pleura_row, a_line_rows) = rows
                .split_first()
                .ok_or_else(|| format!("line {}: missing pleura row", i + 1))?;
            frames.push(FrameTruth {
                pleura_row,
                a_line_rows: a_line_rows.to_vec(),
                b_line_cols: cols,
            });
        }
        Ok(Self { frames })
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.frames == 0 {
            return bad("scene needs at least one frame".into());
        }
        if self.size < 16 {
            return bad(format!("scene size must be >= 16, got {}", self.size));
        }
        if !(self.pleura_depth > 0.15 && self.pleura_depth < 0.4) {
            return bad(format!("pleura_depth must lie in (0.15, 0.4), got {}", self.pleura_depth));
        }
        if !(self.amplitude >= 0.0) || self.pleura_depth + self.amplitude >= 0.5 {
            return bad(format!(
                "pleura must stay in the upper half: depth {} + amplitude {} must be < 0.5",
                self.pleura_depth, self.amplitude
            ));
        }
        if !self.frequency.is_finite() {
            return bad("frequency must be finite".into());
        }
        let unit = |name: &str, v: f64| -> Result<()> {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must lie in [0,1], got {v}")))
            }
        };
        unit("pleura_brightness", self.pleura_brightness)?;
        unit("tissue_brightness", self.tissue_brightness)?;
        unit("lung_brightness", self.lung_brightness)?;
        unit("a_line_decay", self.a_line_decay)?;
        unit("speckle_strength", self.speckle_strength)?;
        unit("speckle_correlation", self.speckle_correlation)?;
        if !(self.pleura_thickness > 0.0) {
            return bad(format!("pleura_thickness must be > 0, got {}", self.pleura_thickness));
        }
        for (i, b) in self.b_lines.iter().enumerate() {
            unit(&format!("b_line[{i}].brightness"), b.brightness)?;
            unit(&format!("b_line[{i}].position"), b.position)?;
            if !(b.width > 0.0) || !b.drift.is_finite() {
                return bad(format!("b_line[{i}]: width must be > 0 and drift finite"));
            }
        }
        Ok(())
    }

    /// Pleura depth of frame `t`, normalized.
    pub fn pleura_at(&self, t: usize) -> f64 {
        self.pleura_depth + self.amplitude * (2.0 * PI * self.frequency * t as f64).sin()
    }

    fn px(&self, normalized: f64) -> f64 {
        normalized * (self.size - 1) as f64
    }

    pub fn truth_at(&self, t: usize) -> FrameTruth {
        let p = self.px(self.pleura_at(t));
        let last = (self.size - 1) as f64;
        let a_line_rows = (2..2 + self.a_line_count)
            .map(|k| k as f64 * p)
            .filter(|&r| r <= last)
            .collect();
        let b_line_cols = self
            .b_lines
            .iter()
            .map(|b| {
                let x = b.position + b.drift * t as f64;
                let x = match self.b_line_boundary {
                    Boundary::Clamp => x.clamp(0.0, 1.0),
                    Boundary::Wrap => x.rem_euclid(1.0),
                };
                self.px(x)
            })
            .collect();
        FrameTruth {
            pleura_row: p,
            a_line_rows,
            b_line_cols,
        }
    }

    /// Landmark image without speckle.
    pub fn clean_frame(&self, t: usize) -> Frame {
        let truth = self.truth_at(t);
        let n = self.size;
        let sigma = self.px(self.pleura_thickness).max(0.5);
        let bump = |d: f64, s: f64| (-d * d / (2.0 * s * s)).exp();
        let b_sigma: Vec<f64> = self.b_lines.iter().map(|b| self.px(b.width).max(0.5)).collect();
        Frame::from_fn(n, n, |r, c| {
            let r = r as f64;
            let c = c as f64;
            let p = truth.pleura_row;
            // smooth tissue-to-lung transition across the pleura
            let below = 0.5 * (1.0 + ((r - p) / sigma).tanh());
            let mut v = self.tissue_brightness * (1.0 - below) + self.lung_brightness * below;
            v = v.max(self.pleura_brightness * bump(r - p, sigma));
            let mut level = self.pleura_brightness;
            for &a in &truth.a_line_rows {
                level *= self.a_line_decay;
                v = v.max(level * bump(r - a, sigma));
            }
            for ((b, &x), &s) in self.b_lines.iter().zip(&truth.b_line_cols).zip(&b_sigma) {
                if r >= p {
                    v = v.max(b.brightness * bump(c - x, s));
                }
            }
            v.clamp(0.0, 1.0)
        })
    }

    fn normals(&self, stream: u64) -> Vec<[f64; 2]> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        (0..self.size * self.size)
            .map(|_| [StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)])
            .collect()
    }

    fn render(&self, t: usize, fixed: &[[f64; 2]]) -> Frame {
        let clean = self.clean_frame(t);
        if self.speckle_strength == 0.0 {
            return clean;
        }
        let fresh = self.normals(t as u64 + 1);
        let rho = self.speckle_correlation;
        let mix = (1.0 - rho * rho).sqrt();
        let mean = (PI / 2.0).sqrt();
        let s = self.speckle_strength;
        let data = clean
            .data()
            .iter()
            .zip(fixed)
            .zip(&fresh)
            .map(|((&v, a), b)| {
                let n1 = rho * a[0] + mix * b[0];
                let n2 = rho * a[1] + mix * b[1];
                let rayleigh = n1.hypot(n2) / mean;
                (v * (1.0 + s * (rayleigh - 1.0))).clamp(0.0, 1.0)
            })
            .collect();
        Frame::new(self.size, self.size, data).expect("square frame")
    }
}

/// Render every frame of `spec` and its ground truth. Pure in `spec`.
pub fn generate(spec: &SceneSpec) -> Result<(Vec<Frame>, GroundTruth)> {
    spec.validate()?;
    let fixed = spec.normals(0);
    let video = (0..spec.frames)
        .into_par_iter()
        .map(|t| spec.render(t, &fixed))
        .collect();
    let truth = GroundTruth {
        frames: (0..spec.frames).map(|t| spec.truth_at(t)).collect(),
    };
    Ok((video, truth))
}

pub const TRUTH_FILE: &str = "truth.txt";

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:05}.pgm")
}

pub fn save_dataset(video: &[Frame], truth: &GroundTruth, dir: &Path) -> Result<()> {
    if video.len() != truth.len() {
        return Err(Error::invalid(format!(
            "dataset has {} frames but {} truth records",
            video.len(),
            truth.len()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in video.iter().enumerate() {
        f.write_pgm(&dir.join(frame_file_name(i)))?;
    }
    let path = dir.join(TRUTH_FILE);
    fs::write(&path, truth.to_text()).map_err(|e| Error::io(&path, e))
}

/// Frames `frame_00000.pgm ...` in order, stopping at the first gap.
pub fn load_frames(dir: &Path) -> Result<Vec<Frame>> {
    let mut frames = Vec::new();
    loop {
        let path = dir.join(frame_file_name(frames.len()));
        if !path.exists() {
            break;
        }
        frames.push(Frame::read_pgm(&path)?);
    }
    if frames.is_empty() {
        return Err(Error::Data(format!("{}: no frame_00000.pgm found", dir.display())));
    }
    Ok(frames)
}

pub fn load_truth(dir: &Path) -> Result<GroundTruth> {
    let path = dir.join(TRUTH_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    GroundTruth::parse(&text).map_err(|m| Error::format(&path, m))
}

pub fn load_dataset(dir: &Path) -> Result<(Vec<Frame>, GroundTruth)> {
    let truth = load_truth(dir)?;
    let mut video = Vec::with_capacity(truth.len());
    for i in 0..truth.len() {
        let path = dir.join(frame_file_name(i));
        if !path.exists() {
            return Err(Error::Data(format!(
                "{}: missing frame {i} ({})",
                dir.display(),
                frame_file_name(i)
            )));
        }
        video.push(Frame::read_pgm(&path)?);
    }
    Ok((video, truth))
}
