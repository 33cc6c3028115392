use std::path::Path;

use super::{infer_keypoints, ModelConfig};
use crate::config::{parse_text, to_text, Section};
use crate::error::{Error, Result};
use crate::fusion::{Frame, Preprocess};
use crate::tensor::{read_records, write_records, Params, Record};

/// Record holding the [`ModelConfig`] as key=value text, one byte per value.
pub const MODEL_HEADER: &str = "__model__";
/// Record holding the [`Preprocess`] settings the weights were trained with.
pub const PIPELINE_HEADER: &str = "__pipeline__";

/// Weights plus everything needed to run them on raw frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub preprocess: Preprocess,
    pub params: Params<f32>,
}

fn text_record(name: &str, text: &str) -> Record {
    let values: Vec<f32> = text.bytes().map(f32::from).collect();
    Record {
        name: name.to_string(),
        dims: vec![values.len()],
        values,
    }
}

fn record_text(path: &Path, r: &Record) -> Result<String> {
    let bytes = r
        .values
        .iter()
        .map(|&v| {
            if v.fract() == 0.0 && (0.0..=255.0).contains(&v) {
                Ok(v as u8)
            } else {
                Err(Error::format(path, format!("{}: not a text record", r.name)))
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    String::from_utf8(bytes).map_err(|_| Error::format(path, format!("{}: invalid UTF-8", r.name)))
}

fn read_section<S: Section>(path: &Path, r: &Record, mut into: S) -> Result<S> {
    let text = record_text(path, r)?;
    let label = format!("{}#{}", path.display(), r.name);
    for entry in parse_text(&text, &label)? {
        match into.set(&entry.key, &entry.value) {
            Ok(true) => {}
            Ok(false) => {
                return Err(Error::format(path, format!("{}: unknown key {}", r.name, entry.key)))
            }
            Err(m) => return Err(Error::format(path, format!("{}: {m}", r.name))),
        }
    }
    Ok(into)
}

impl Checkpoint {
    pub fn new(model: ModelConfig, preprocess: Preprocess, params: Params<f32>) -> Result<Self> {
        model.validate()?;
        if preprocess.size != model.input_size {
            return Err(Error::invalid(format!(
                "preprocess size {} does not match model input_size {}",
                preprocess.size, model.input_size
            )));
        }
        Ok(Self {
            model,
            preprocess,
            params,
        })
    }

    pub fn to_records(&self) -> Vec<Record> {
        let mut out = vec![
            text_record(MODEL_HEADER, &to_text(&self.model.pairs())),
            text_record(PIPELINE_HEADER, &to_text(&self.preprocess.pairs())),
        ];
        out.extend(self.params.to_records());
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_records(path, &self.to_records())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut model = None;
        let mut preprocess = None;
        let mut params = Vec::new();
        for r in read_records(path)? {
            match r.name.as_str() {
                MODEL_HEADER => model = Some(read_section(path, &r, ModelConfig::default())?),
                PIPELINE_HEADER => preprocess = Some(read_section(path, &r, Preprocess::default())?),
                _ => params.push(r),
            }
        }
        let model = model.ok_or_else(|| Error::format(path, format!("missing {MODEL_HEADER} record")))?;
        let preprocess =
            preprocess.ok_or_else(|| Error::format(path, format!("missing {PIPELINE_HEADER} record")))?;
        Self::new(model, preprocess, Params::from_records(params)?)
    }

    /// Reject a requested config whose architecture differs from the
    /// checkpoint's.
    pub fn expect_model(&self, cfg: &ModelConfig) -> Result<()> {
        let have = &self.model;
        let fields = [
            ("k", have.k.to_string(), cfg.k.to_string()),
            ("input_channels", have.input_channels.to_string(), cfg.input_channels.to_string()),
            ("input_size", have.input_size.to_string(), cfg.input_size.to_string()),
            ("channels", format!("{:?}", have.channels), format!("{:?}", cfg.channels)),
            ("cbam_enabled", have.cbam_enabled.to_string(), cfg.cbam_enabled.to_string()),
            ("cbam_reduction", have.cbam_reduction.to_string(), cfg.cbam_reduction.to_string()),
        ];
        for (name, a, b) in fields {
            if a != b {
                return Err(Error::invalid(format!(
                    "checkpoint has {name}={a} but the config asks for {name}={b}"
                )));
            }
        }
        Ok(())
    }

    pub fn infer(&self, frame: &Frame) -> Result<Vec<[f64; 2]>> {
        self.model.check_params(&self.params)?;
        infer_keypoints(frame, &self.params, &self.model, &self.preprocess)
    }
}
