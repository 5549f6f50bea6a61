//! Checkpoint files: a versioned JSON container holding every parameter
//! array by name, the configs that shaped them, and the symbol tables that
//! map phonemes, speakers, and locales to embedding rows.
//!
//! Parameters are stored in double precision regardless of the training
//! scalar type.  Serialization is deterministic, so identical states produce
//! identical bytes.

use crate::backbone::{check_model_params, ModelConfig};
use crate::corpus::FrameSpec;
use crate::losses::LossWeights;
use crate::optim::ParamSet;
use crate::segmentation::SpanMode;
use crate::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NamedArray {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct FileSchema {
    format_version: u32,
    mode: SpanMode,
    seed: u64,
    min_silence_s: f64,
    max_silence_s: f64,
    frame_spec: FrameSpec,
    model: ModelConfig,
    loss: LossWeights,
    phonemes: Vec<String>,
    speakers: Vec<String>,
    locales: Vec<String>,
    params: Vec<NamedArray>,
}

/// A trained model ready to reload.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    /// Span layout the model was trained under.
    pub mode: SpanMode,
    pub seed: u64,
    /// Silence threshold used to segment phrases during training.
    pub min_silence_s: f64,
    /// Cap applied to long silences before segmentation.
    pub max_silence_s: f64,
    pub frame_spec: FrameSpec,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub phonemes: Vec<String>,
    pub speakers: Vec<String>,
    pub locales: Vec<String>,
    pub params: ParamSet<f64>,
}

fn check_table(kind: &'static str, table: &[String], expected: usize) -> Result<()> {
    if table.len() != expected {
        return Err(Error::CountMismatch {
            what: "symbol table size vs configured count",
            left: table.len(),
            right: expected,
        });
    }
    let mut seen = HashSet::new();
    for symbol in table {
        if !seen.insert(symbol.as_str()) {
            return Err(Error::config(format!(
                "duplicate {kind} `{symbol}` in table"
            )));
        }
    }
    Ok(())
}

fn lookup(kind: &'static str, table: &[String], symbol: &str) -> Result<usize> {
    table
        .iter()
        .position(|s| s == symbol)
        .ok_or_else(|| Error::UnknownSymbol {
            kind,
            symbol: symbol.to_owned(),
        })
}

impl Checkpoint {
    pub fn validate(&self) -> Result<()> {
        self.frame_spec.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        if !(self.min_silence_s.is_finite() && self.min_silence_s > 0.0) {
            return Err(Error::config(format!(
                "min_silence_s must be positive, got {}",
                self.min_silence_s
            )));
        }
        if !(self.max_silence_s.is_finite() && self.max_silence_s >= self.min_silence_s) {
            return Err(Error::config(format!(
                "max_silence_s must be at least min_silence_s, got {}",
                self.max_silence_s
            )));
        }
        if self.model.num_bins != self.frame_spec.num_bins {
            return Err(Error::CountMismatch {
                what: "model bins vs frame spec bins",
                left: self.model.num_bins,
                right: self.frame_spec.num_bins,
            });
        }
        check_table(
            "phoneme",
            &self.phonemes,
            self.model.backbone.phoneme_vocab_size,
        )?;
        check_table("speaker", &self.speakers, self.model.backbone.speaker_count)?;
        check_table("locale", &self.locales, self.model.backbone.locale_count)?;
        check_model_params(&self.params, &self.model)
    }

    pub fn phoneme_id(&self, symbol: &str) -> Result<usize> {
        lookup("phoneme", &self.phonemes, symbol)
    }

    pub fn phoneme_ids(&self, symbols: &[String]) -> Result<Vec<usize>> {
        symbols.iter().map(|s| self.phoneme_id(s)).collect()
    }

    pub fn speaker_id(&self, symbol: &str) -> Result<usize> {
        lookup("speaker", &self.speakers, symbol)
    }

    pub fn locale_id(&self, symbol: &str) -> Result<usize> {
        lookup("locale", &self.locales, symbol)
    }

    pub fn to_json(&self) -> String {
        let params = self
            .params
            .iter()
            .map(|(name, array)| NamedArray {
                name: name.to_owned(),
                rows: array.nrows(),
                cols: array.ncols(),
                data: array.iter().copied().collect(),
            })
            .collect();
        let file = FileSchema {
            format_version: FORMAT_VERSION,
            mode: self.mode,
            seed: self.seed,
            min_silence_s: self.min_silence_s,
            max_silence_s: self.max_silence_s,
            frame_spec: self.frame_spec.clone(),
            model: self.model.clone(),
            loss: self.loss,
            phonemes: self.phonemes.clone(),
            speakers: self.speakers.clone(),
            locales: self.locales.clone(),
            params,
        };
        serde_json::to_string(&file).expect("checkpoint serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Checkpoint> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint { msg: e.to_string() })?;
        let found = value
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::Checkpoint {
                msg: "missing format_version".into(),
            })?;
        if found != u64::from(FORMAT_VERSION) {
            return Err(Error::CheckpointVersion {
                found: found.try_into().unwrap_or(u32::MAX),
                supported: FORMAT_VERSION,
            });
        }
        let file: FileSchema =
            serde_json::from_value(value).map_err(|e| Error::Checkpoint { msg: e.to_string() })?;
        let mut params = ParamSet::new();
        for entry in file.params {
            let array =
                Array2::from_shape_vec((entry.rows, entry.cols), entry.data).map_err(|_| {
                    Error::Checkpoint {
                        msg: format!(
                            "parameter `{}` data does not fill a {}x{} array",
                            entry.name, entry.rows, entry.cols
                        ),
                    }
                })?;
            params.insert(entry.name, array);
        }
        let checkpoint = Checkpoint {
            mode: file.mode,
            seed: file.seed,
            min_silence_s: file.min_silence_s,
            max_silence_s: file.max_silence_s,
            frame_spec: file.frame_spec,
            model: file.model,
            loss: file.loss,
            phonemes: file.phonemes,
            speakers: file.speakers,
            locales: file.locales,
            params,
        };
        checkpoint.validate()?;
        Ok(checkpoint)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
