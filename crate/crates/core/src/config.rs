//! Flat `key = value` configuration.
//!
//! One assignment per line, `#` starts a comment. Every configurable struct
//! implements [`Section`]; [`RunConfig`] merges them (scene keys carry a
//! `scene.` prefix) and rejects unknown keys with file/line diagnostics.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fusion::{EnergyMode, FusionConfig, InputMode, PhasePolarity, Preprocess};
use crate::model::ModelConfig;
use crate::synth::{BLine, Boundary, SceneSpec};
use crate::train::TrainConfig;

type SetResult = std::result::Result<bool, String>;

/// A group of settings addressable by key.
pub trait Section {
    /// Current values, in canonical order.
    fn pairs(&self) -> Vec<(&'static str, String)>;
    /// Assign one key. `Ok(false)` means the key is not part of this section.
    fn set(&mut self, key: &str, value: &str) -> SetResult;
}

fn num<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
    v.parse()
        .map_err(|_| format!("{key}: cannot parse {v:?} as a number"))
}

fn flag(key: &str, v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(format!("{key}: expected true or false, got {v:?}")),
    }
}

fn list<T: FromStr>(key: &str, v: &str) -> std::result::Result<Vec<T>, String> {
    v.split(',').map(|x| num(key, x.trim())).collect()
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn assign<T>(slot: &mut T, value: std::result::Result<T, String>) -> SetResult {
    *slot = value?;
    Ok(true)
}

impl Section for FusionConfig {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("sigma0", self.sigma0.to_string()),
            ("lambdas", join(&self.lambdas)),
            ("thresh", self.thresh.to_string()),
            ("epsilon", self.epsilon.to_string()),
            ("attenuation_a", self.attenuation_a.to_string()),
            ("energy_mode", self.energy_mode.as_str().to_string()),
            ("polarity", self.polarity.as_str().to_string()),
        ]
    }

    fn set(&mut self, key: &str, v: &str) -> SetResult {
        match key {
            "sigma0" => assign(&mut self.sigma0, num(key, v)),
            "lambdas" => assign(&mut self.lambdas, list(key, v)),
            "thresh" => assign(&mut self.thresh, num(key, v)),
            "epsilon" => assign(&mut self.epsilon, num(key, v)),
            "attenuation_a" | "tga" => assign(&mut self.attenuation_a, num(key, v)),
            "energy_mode" => assign(
                &mut self.energy_mode,
                EnergyMode::parse(v).ok_or_else(|| format!("{key}: expected squared or sqrt_energy, got {v:?}")),
            ),
            "polarity" => assign(
                &mut self.polarity,
                PhasePolarity::parse(v).ok_or_else(|| format!("{key}: expected trough or ridge, got {v:?}")),
            ),
            _ => Ok(false),
        }
    }
}

fn input_mode(key: &str, v: &str) -> std::result::Result<InputMode, String> {
    InputMode::parse(v).ok_or_else(|| format!("{key}: expected fused or norm_stack, got {v:?}"))
}

impl Section for Preprocess {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        let mut out = vec![
            ("size", self.size.to_string()),
            ("use_tga", self.use_tga.to_string()),
            ("input_mode", self.input_mode.as_str().to_string()),
        ];
        out.extend(self.fusion.pairs());
        out
    }

    fn set(&mut self, key: &str, v: &str) -> SetResult {
        match key {
            "size" => assign(&mut self.size, num(key, v)),
            "use_tga" => assign(&mut self.use_tga, flag(key, v)),
            "input_mode" => assign(&mut self.input_mode, input_mode(key, v)),
            _ => self.fusion.set(key, v),
        }
    }
}

impl Section for ModelConfig {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("k", self.k.to_string()),
            ("input_channels", self.input_channels.to_string()),
            ("input_size", self.input_size.to_string()),
            ("feature_stride", self.feature_stride.to_string()),
            ("heatmap_sigma", self.heatmap_sigma.to_string()),
            ("cbam_enabled", self.cbam_enabled.to_string()),
            ("channels", join(&self.channels)),
            ("cbam_reduction", self.cbam_reduction.to_string()),
            ("stop_side", self.stop_side.to_string()),
        ]
    }

    fn set(&mut self, key: &str, v: &str) -> SetResult {
        match key {
            "k" => assign(&mut self.k, num(key, v)),
            "input_channels" => assign(&mut self.input_channels, num(key, v)),
            "input_size" => assign(&mut self.input_size, num(key, v)),
            "feature_stride" => assign(&mut self.feature_stride, num(key, v)),
            "heatmap_sigma" => assign(&mut self.heatmap_sigma, num(key, v)),
            "cbam_enabled" => assign(&mut self.cbam_enabled, flag(key, v)),
            "channels" => {
                let c: Vec<usize> = list(key, v)?;
                let c: [usize; 2] = c
                    .try_into()
                    .map_err(|_| format!("{key}: expected two comma-separated counts"))?;
                assign(&mut self.channels, Ok(c))
            }
            "cbam_reduction" => assign(&mut self.cbam_reduction, num(key, v)),
            "stop_side" => assign(&mut self.stop_side, v.parse().map_err(|e| format!("{key}: {e}"))),
            _ => Ok(false),
        }
    }
}

impl Section for TrainConfig {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("epochs", self.epochs.to_string()),
            ("batch", self.batch_size.to_string()),
            ("lr", self.lr0.to_string()),
            ("lr_decay", self.lr_decay.to_string()),
            ("lr_interval", self.lr_interval.to_string()),
            ("ssim_threshold", self.ssim_threshold.to_string()),
            ("max_pair_gap", self.max_pair_gap.to_string()),
            ("pairs", self.pairs.to_string()),
            ("pretrain_epochs", self.pretrain_epochs.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("seed", self.seed.to_string()),
            ("use_tga", self.use_tga.to_string()),
            ("use_ssim_gate", self.use_ssim_gate.to_string()),
            ("use_cbam", self.use_cbam.to_string()),
            ("input_mode", self.input_mode.as_str().to_string()),
        ]
    }

    fn set(&mut self, key: &str, v: &str) -> SetResult {
        match key {
            "epochs" => assign(&mut self.epochs, num(key, v)),
            "batch" | "batch_size" => assign(&mut self.batch_size, num(key, v)),
            "lr" | "lr0" => assign(&mut self.lr0, num(key, v)),
            "lr_decay" => assign(&mut self.lr_decay, num(key, v)),
            "lr_interval" => assign(&mut self.lr_interval, num(key, v)),
            "ssim_threshold" => assign(&mut self.ssim_threshold, num(key, v)),
            "max_pair_gap" => assign(&mut self.max_pair_gap, num(key, v)),
            "pairs" => assign(&mut self.pairs, num(key, v)),
            "pretrain_epochs" => assign(&mut self.pretrain_epochs, num(key, v)),
            "checkpoint_every" => assign(&mut self.checkpoint_every, num(key, v)),
            "seed" => assign(&mut self.seed, num(key, v)),
            "use_tga" => assign(&mut self.use_tga, flag(key, v)),
            "use_ssim_gate" => assign(&mut self.use_ssim_gate, flag(key, v)),
            "use_cbam" => assign(&mut self.use_cbam, flag(key, v)),
            "input_mode" => assign(&mut self.input_mode, input_mode(key, v)),
            _ => Ok(false),
        }
    }
}

fn b_lines_text(b: &[BLine]) -> String {
    if b.is_empty() {
        return "none".into();
    }
    b.iter()
        .map(|b| format!("{}:{}:{}:{}", b.position, b.drift, b.width, b.brightness))
        .collect::<Vec<_>>()
        .join(";")
}

fn parse_b_lines(key: &str, v: &str) -> std::result::Result<Vec<BLine>, String> {
    if v.is_empty() || v == "none" {
        return Ok(Vec::new());
    }
    v.split(';')
        .map(|item| {
            let f: Vec<f64> = item
                .split(':')
                .map(|x| num(key, x.trim()))
                .collect::<std::result::Result<_, _>>()?;
            match f.as_slice() {
                &[position, drift, width, brightness] => Ok(BLine {
                    position,
                    drift,
                    width,
                    brightness,
                }),
                _ => Err(format!("{key}: expected position:drift:width:brightness, got {item:?}")),
            }
        })
        .collect()
}

impl Section for SceneSpec {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("frames", self.frames.to_string()),
            ("size", self.size.to_string()),
            ("pleura_depth", self.pleura_depth.to_string()),
            ("amplitude", self.amplitude.to_string()),
            ("frequency", self.frequency.to_string()),
            ("pleura_brightness", self.pleura_brightness.to_string()),
            ("pleura_thickness", self.pleura_thickness.to_string()),
            ("a_line_count", self.a_line_count.to_string()),
            ("a_line_decay", self.a_line_decay.to_string()),
            ("b_lines", b_lines_text(&self.b_lines)),
            (
                "b_line_boundary",
                match self.b_line_boundary {
                    Boundary::Clamp => "clamp",
                    Boundary::Wrap => "wrap",
                }
                .to_string(),
            ),
            ("tissue_brightness", self.tissue_brightness.to_string()),
            ("lung_brightness", self.lung_brightness.to_string()),
            ("speckle_strength", self.speckle_strength.to_string()),
            ("speckle_correlation", self.speckle_correlation.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    fn set(&mut self, key: &str, v: &str) -> SetResult {
        match key {
            "frames" => assign(&mut self.frames, num(key, v)),
            "size" => assign(&mut self.size, num(key, v)),
            "pleura_depth" => assign(&mut self.pleura_depth, num(key, v)),
            "amplitude" => assign(&mut self.amplitude, num(key, v)),
            "frequency" => assign(&mut self.frequency, num(key, v)),
            "pleura_brightness" => assign(&mut self.pleura_brightness, num(key, v)),
            "pleura_thickness" => assign(&mut self.pleura_thickness, num(key, v)),
            "a_line_count" => assign(&mut self.a_line_count, num(key, v)),
            "a_line_decay" => assign(&mut self.a_line_decay, num(key, v)),
            "b_lines" => assign(&mut self.b_lines, parse_b_lines(key, v)),
            "b_line_boundary" => assign(
                &mut self.b_line_boundary,
                match v {
                    "clamp" => Ok(Boundary::Clamp),
                    "wrap" => Ok(Boundary::Wrap),
                    _ => Err(format!("{key}: expected clamp or wrap, got {v:?}")),
                },
            ),
            "tissue_brightness" => assign(&mut self.tissue_brightness, num(key, v)),
            "lung_brightness" => assign(&mut self.lung_brightness, num(key, v)),
            "speckle_strength" => assign(&mut self.speckle_strength, num(key, v)),
            "speckle_correlation" => assign(&mut self.speckle_correlation, num(key, v)),
            "seed" => assign(&mut self.seed, num(key, v)),
            _ => Ok(false),
        }
    }
}

/// One parsed `key = value` line.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

/// Split `text` into assignments. `file` labels diagnostics.
pub fn parse_text(text: &str, file: &str) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
            file: file.to_string(),
            line: i + 1,
            msg: format!("expected key = value, got {line:?}"),
        })?;
        let key = k.trim();
        if key.is_empty() {
            return Err(Error::Config {
                file: file.to_string(),
                line: i + 1,
                msg: "empty key".into(),
            });
        }
        out.push(Entry {
            line: i + 1,
            key: key.to_string(),
            value: v.trim().to_string(),
        });
    }
    Ok(out)
}

/// `key = value` lines.
pub fn to_text(pairs: &[(&str, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// Complete run configuration for the command-line tool.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub fusion: FusionConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub scene: SceneSpec,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub init: Option<PathBuf>,
}

const SCENE_PREFIX: &str = "scene.";

fn path_text(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Desk-scale defaults: 64×64 input.
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk(),
            ..Self::default()
        }
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut push = |pairs: Vec<(&'static str, String)>, prefix: &str| {
            for (k, v) in pairs {
                out.push((format!("{prefix}{k}"), v));
            }
        };
        push(self.fusion.pairs(), "");
        // the CBAM switch lives in the training section
        push(
            self.model.pairs().into_iter().filter(|(k, _)| *k != "cbam_enabled").collect(),
            "",
        );
        push(self.train.pairs(), "");
        push(self.scene.pairs(), SCENE_PREFIX);
        push(
            vec![
                ("data", path_text(&self.data)),
                ("out", path_text(&self.out)),
                ("init", path_text(&self.init)),
            ],
            "",
        );
        out
    }

    pub fn to_text(&self) -> String {
        self.to_pairs()
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Assign one key. `Ok(false)` for unknown keys.
    pub fn set(&mut self, key: &str, v: &str) -> SetResult {
        if let Some(k) = key.strip_prefix(SCENE_PREFIX) {
            return self.scene.set(k, v);
        }
        let path = |v: &str| (!v.is_empty()).then(|| PathBuf::from(v));
        match key {
            "data" => return assign(&mut self.data, Ok(path(v))),
            "out" => return assign(&mut self.out, Ok(path(v))),
            "init" => return assign(&mut self.init, Ok(path(v))),
            "cbam_enabled" => return Ok(false),
            _ => {}
        }
        if self.train.set(key, v)? {
            return Ok(true);
        }
        if self.model.set(key, v)? {
            return Ok(true);
        }
        self.fusion.set(key, v)
    }

    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.scene.validate()
    }

    /// Apply `entries` on top of `self`, then validate. Unknown keys are
    /// collected and reported together.
    pub fn apply(&mut self, entries: &[Entry], file: &str) -> Result<()> {
        let mut unknown = Vec::new();
        for e in entries {
            match self.set(&e.key, &e.value) {
                Ok(true) => {}
                Ok(false) => unknown.push(e),
                Err(msg) => {
                    return Err(Error::Config {
                        file: file.to_string(),
                        line: e.line,
                        msg,
                    })
                }
            }
        }
        if let Some(first) = unknown.first() {
            let names: Vec<&str> = unknown.iter().map(|e| e.key.as_str()).collect();
            return Err(Error::Config {
                file: file.to_string(),
                line: first.line,
                msg: format!("unknown key(s): {}", names.join(", ")),
            });
        }
        self.validate().map_err(|e| Error::Config {
            file: file.to_string(),
            line: entries.last().map_or(0, |e| e.line),
            msg: e.to_string(),
        })
    }

    pub fn parse(text: &str, file: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(&parse_text(text, file)?, file)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Apply `key=value` overrides given on the command line.
    pub fn override_with(&mut self, overrides: &[String]) -> Result<()> {
        let text = overrides.join("\n");
        let entries = parse_text(&text, "<command line>")?;
        self.apply(&entries, "<command line>")
    }
}
