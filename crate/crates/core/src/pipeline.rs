//! End-to-end runs behind the CLI: training from a corpus manifest, dubbing
//! from a checkpoint, and metric computation over dubbed outputs.
//!
//! Every run is a pure function of its config file and seed.  Training logs
//! are JSON lines, checkpoints and metric reports are JSON, and rerunning
//! with the same inputs reproduces each artifact byte for byte.

use crate::backbone::{
    encode_text, init_model_params, synthesize, train_step, BackboneConfig, ModelConfig, TrainItem,
    BACKBONE_PREFIX, NOISE_PREFIX, PROSODY_PREFIX,
};
use crate::checkpoint::Checkpoint;
use crate::conditioning::{
    build_conditioning, clean_noise_embeddings, make_cross_lingual_plan, split_noise_streams,
    Denoiser, IdentityDenoiser,
};
use crate::corpus::{
    cap_long_silences, compute_features, cut_waveform, load_alignment, load_manifest, load_wav,
    AlignedToken, FrameSpec, UtteranceRecord,
};
use crate::encoder::{
    encode_chunked, encode_posteriors, sample_embedding, EncoderConfig, SampleMode,
};
use crate::evaluation::{cfdsd, word_error_rate, FeatureEmbedder, TranscriptPair};
use crate::losses::{LossBreakdown, LossWeights};
use crate::optim::AdamW;
use crate::segmentation::{
    phoneme_frame_durations, segment_phrases, spans_for_mode, SpanMode, DEFAULT_MAX_SILENCE_S,
    DEFAULT_MIN_SILENCE_S,
};
use crate::{Error, Result};
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

// ── Run configuration ─────────────────────────────────────────────────────

/// System variant.  `pvae` and `gvae` are training modes; `gvae-pp` shares
/// `gvae` training and differs only at inference, where it encodes each
/// phrase from a separate chunk.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    Pvae,
    Gvae,
    GvaePp,
}

impl RunMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RunMode::Pvae => "pvae",
            RunMode::Gvae => "gvae",
            RunMode::GvaePp => "gvae-pp",
        }
    }

    /// The span layout to train under.
    pub fn training_span_mode(self) -> Result<SpanMode> {
        match self {
            RunMode::Pvae => Ok(SpanMode::Pvae),
            RunMode::Gvae => Ok(SpanMode::Gvae),
            RunMode::GvaePp => Err(Error::config(
                "gvae-pp is an inference-time variant; train with mode \"gvae\"",
            )),
        }
    }

    /// The training mode this variant's checkpoints must come from.
    pub fn compatible_training_mode(self) -> SpanMode {
        match self {
            RunMode::Pvae => SpanMode::Pvae,
            RunMode::Gvae | RunMode::GvaePp => SpanMode::Gvae,
        }
    }
}

pub fn span_mode_name(mode: SpanMode) -> &'static str {
    match mode {
        SpanMode::Pvae => "pvae",
        SpanMode::Gvae => "gvae",
    }
}

/// `[backbone]` section of the run config.  Vocabulary, speaker, and locale
/// counts normally come from the corpus; when given here they must agree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSection {
    pub phoneme_vocab_size: Option<usize>,
    pub speaker_count: Option<usize>,
    pub locale_count: Option<usize>,
    pub text_channels: usize,
    pub speaker_embed_dim: usize,
    pub locale_embed_dim: usize,
    pub decoder_channels: usize,
    pub decoder_layers: usize,
    pub decoder_kernel: usize,
}

impl Default for BackboneSection {
    fn default() -> Self {
        let sizes = BackboneConfig::desk_scale(1, 1, 1);
        BackboneSection {
            phoneme_vocab_size: None,
            speaker_count: None,
            locale_count: None,
            text_channels: sizes.text_channels,
            speaker_embed_dim: sizes.speaker_embed_dim,
            locale_embed_dim: sizes.locale_embed_dim,
            decoder_channels: sizes.decoder_channels,
            decoder_layers: sizes.decoder_layers,
            decoder_kernel: sizes.decoder_kernel,
        }
    }
}

impl BackboneSection {
    /// Fill the counts from the corpus tables, checking any explicit values.
    pub fn resolve(
        &self,
        phonemes: usize,
        speakers: usize,
        locales: usize,
    ) -> Result<BackboneConfig> {
        for (name, given, derived) in [
            ("phoneme_vocab_size", self.phoneme_vocab_size, phonemes),
            ("speaker_count", self.speaker_count, speakers),
            ("locale_count", self.locale_count, locales),
        ] {
            if let Some(v) = given {
                if v != derived {
                    return Err(Error::config(format!(
                        "{name} is {v} in the config but the corpus has {derived}"
                    )));
                }
            }
        }
        Ok(BackboneConfig {
            phoneme_vocab_size: phonemes,
            speaker_count: speakers,
            locale_count: locales,
            text_channels: self.text_channels,
            speaker_embed_dim: self.speaker_embed_dim,
            locale_embed_dim: self.locale_embed_dim,
            decoder_channels: self.decoder_channels,
            decoder_layers: self.decoder_layers,
            decoder_kernel: self.decoder_kernel,
        })
    }
}

/// `[segmentation]` section: silence handling ahead of phrase splitting.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentationSection {
    pub min_silence_s: f64,
    pub max_silence_s: f64,
}

impl Default for SegmentationSection {
    fn default() -> Self {
        SegmentationSection {
            min_silence_s: DEFAULT_MIN_SILENCE_S,
            max_silence_s: DEFAULT_MAX_SILENCE_S,
        }
    }
}

/// A training run, loaded from a TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: RunMode,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub frame_spec: FrameSpec,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub backbone: BackboneSection,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub segmentation: SegmentationSection,
}

impl RunConfig {
    /// Parse a TOML config file.  Relative `manifest` and `out_dir` paths
    /// resolve against the file's directory.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: RunConfig =
            toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        if config.manifest.is_relative() {
            config.manifest = base.join(&config.manifest);
        }
        if config.out_dir.is_relative() {
            config.out_dir = base.join(&config.out_dir);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        self.frame_spec.validate()?;
        self.encoder.validate()?;
        self.loss.validate()?;
        let seg = &self.segmentation;
        if !(seg.min_silence_s.is_finite() && seg.min_silence_s > 0.0) {
            return Err(Error::config("min_silence_s must be positive"));
        }
        if !(seg.max_silence_s.is_finite() && seg.max_silence_s >= seg.min_silence_s) {
            return Err(Error::config(
                "max_silence_s must be at least min_silence_s",
            ));
        }
        Ok(())
    }
}

// ── Corpus preparation ────────────────────────────────────────────────────

/// Symbol tables derived from a corpus, in first-appearance order.
#[derive(Clone, Debug, PartialEq)]
pub struct SymbolTables {
    pub phonemes: Vec<String>,
    pub speakers: Vec<String>,
    pub locales: Vec<String>,
}

impl SymbolTables {
    pub fn from_records(records: &[UtteranceRecord]) -> Self {
        let mut phonemes = Vec::new();
        let mut speakers = Vec::new();
        let mut locales = Vec::new();
        let push_new = |table: &mut Vec<String>, symbol: &str| {
            if !table.iter().any(|s| s == symbol) {
                table.push(symbol.to_owned());
            }
        };
        for r in records {
            for p in &r.phonemes {
                push_new(&mut phonemes, p);
            }
            push_new(&mut speakers, &r.speaker_id);
            push_new(&mut locales, &r.locale);
        }
        SymbolTables {
            phonemes,
            speakers,
            locales,
        }
    }

    fn index(table: &[String], kind: &'static str, symbol: &str) -> Result<usize> {
        table
            .iter()
            .position(|s| s == symbol)
            .ok_or_else(|| Error::UnknownSymbol {
                kind,
                symbol: symbol.to_owned(),
            })
    }
}

fn check_record_phonemes(record: &UtteranceRecord, tokens: &[AlignedToken]) -> Result<()> {
    let speech: Vec<&str> = tokens
        .iter()
        .filter(|t| !t.is_silence())
        .map(|t| t.token.as_str())
        .collect();
    let manifest: Vec<&str> = record.phonemes.iter().map(String::as_str).collect();
    if speech != manifest {
        return Err(Error::config(format!(
            "utterance {}: alignment speech tokens do not match the manifest phonemes",
            record.utterance_id
        )));
    }
    Ok(())
}

/// Load audio and alignments for every record and build training items:
/// capped silences, noise-split features, phrase spans under `mode`, and
/// per-phoneme frame durations.
pub fn prepare_training_items<D: Denoiser + ?Sized>(
    records: &[UtteranceRecord],
    tables: &SymbolTables,
    spec: &FrameSpec,
    mode: SpanMode,
    min_silence_s: f64,
    max_silence_s: f64,
    denoiser: &D,
) -> Result<Vec<TrainItem<f64>>> {
    let mut items = Vec::with_capacity(records.len());
    for record in records {
        let tokens = load_alignment(&record.alignment_path)?;
        check_record_phonemes(record, &tokens)?;
        let (tokens, cuts) = cap_long_silences(&tokens, max_silence_s);
        let wave = cut_waveform(&load_wav(&record.audio_path)?, &cuts);
        let streams = split_noise_streams(&wave, denoiser)?;

        let target = compute_features::<f64>(&wave, spec)?;
        let denoised = compute_features::<f64>(&streams.denoised, spec)?;
        let noise = compute_features::<f64>(&streams.noise, spec)?;

        let phrases = segment_phrases(&tokens, spec, min_silence_s)?;
        if phrases.total_frames() != target.num_frames() {
            return Err(Error::CountMismatch {
                what: "alignment frames vs feature frames",
                left: phrases.total_frames(),
                right: target.num_frames(),
            });
        }
        let durations = phoneme_frame_durations(&tokens, spec)?;

        let phoneme_ids = record
            .phonemes
            .iter()
            .map(|p| SymbolTables::index(&tables.phonemes, "phoneme", p))
            .collect::<Result<Vec<usize>>>()?;
        items.push(TrainItem {
            utterance_id: record.utterance_id.clone(),
            target,
            denoised,
            noise,
            spans: spans_for_mode(&phrases, mode),
            phoneme_ids,
            speaker: SymbolTables::index(&tables.speakers, "speaker", &record.speaker_id)?,
            locale: SymbolTables::index(&tables.locales, "locale", &record.locale)?,
            durations,
        });
    }
    Ok(items)
}

// ── Training ──────────────────────────────────────────────────────────────

#[derive(Serialize)]
struct LogRecord {
    step: usize,
    #[serde(flatten)]
    loss: LossBreakdown,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
    pub steps: usize,
    pub final_loss: LossBreakdown,
}

/// Train per the config and write `checkpoint.json` plus `train_log.jsonl`
/// into the output directory.
pub fn run_train(config: &RunConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let span_mode = config.mode.training_span_mode()?;
    let records = load_manifest(&config.manifest)?;
    if records.is_empty() {
        return Err(Error::config("manifest has no utterances"));
    }
    let tables = SymbolTables::from_records(&records);
    let model = ModelConfig {
        encoder: config.encoder.clone(),
        backbone: config.backbone.resolve(
            tables.phonemes.len(),
            tables.speakers.len(),
            tables.locales.len(),
        )?,
        num_bins: config.frame_spec.num_bins,
    };
    model.validate()?;
    let items = prepare_training_items(
        &records,
        &tables,
        &config.frame_spec,
        span_mode,
        config.segmentation.min_silence_s,
        config.segmentation.max_silence_s,
        &IdentityDenoiser,
    )?;

    std::fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
    let log_path = config.out_dir.join("train_log.jsonl");
    let file = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = std::io::BufWriter::new(file);

    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let mut params = init_model_params::<f64, _>(&model, &mut rng);
    let mut optimizer = AdamW::new(config.learning_rate, config.weight_decay);
    let batches: Vec<&[TrainItem<f64>]> =
        items.chunks(config.batch_size.min(items.len())).collect();

    let mut final_loss = None;
    for step in 0..config.steps {
        let batch = batches[step % batches.len()];
        let loss = train_step(
            batch,
            &mut params,
            &mut optimizer,
            &model,
            &config.loss,
            &mut rng,
            step,
        )?;
        let line = serde_json::to_string(&LogRecord { step, loss })
            .expect("loss record serialization cannot fail");
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        final_loss = Some(loss);
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;

    let checkpoint = Checkpoint {
        mode: span_mode,
        seed: config.seed,
        min_silence_s: config.segmentation.min_silence_s,
        max_silence_s: config.segmentation.max_silence_s,
        frame_spec: config.frame_spec.clone(),
        model,
        loss: config.loss,
        phonemes: tables.phonemes,
        speakers: tables.speakers,
        locales: tables.locales,
        params,
    };
    let checkpoint_path = config.out_dir.join("checkpoint.json");
    checkpoint.save(&checkpoint_path)?;
    Ok(TrainOutcome {
        checkpoint_path,
        log_path,
        steps: config.steps,
        final_loss: final_loss.expect("steps >= 1"),
    })
}

// ── Feature files ─────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct FeatureFileSchema {
    utterance_id: String,
    frame_spec: FrameSpec,
    frames: Vec<Vec<f64>>,
}

pub fn write_feature_file(
    path: &Path,
    utterance_id: &str,
    spec: &FrameSpec,
    frames: &Array2<f64>,
) -> Result<()> {
    let schema = FeatureFileSchema {
        utterance_id: utterance_id.to_owned(),
        frame_spec: spec.clone(),
        frames: frames.rows().into_iter().map(|r| r.to_vec()).collect(),
    };
    let text = serde_json::to_string(&schema).expect("feature serialization cannot fail");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: &Path) -> Result<(String, FrameSpec, Array2<f64>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let schema: FeatureFileSchema = serde_json::from_str(&text)
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    let rows = schema.frames.len();
    let cols = schema.frames.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Err(Error::shape(format!(
            "{}: empty feature matrix",
            path.display()
        )));
    }
    let mut frames = Array2::zeros((rows, cols));
    for (i, row) in schema.frames.iter().enumerate() {
        if row.len() != cols {
            return Err(Error::shape(format!(
                "{}: row {i} has {} values, expected {cols}",
                path.display(),
                row.len()
            )));
        }
        for (j, &v) in row.iter().enumerate() {
            frames[(i, j)] = v;
        }
    }
    Ok((schema.utterance_id, schema.frame_spec, frames))
}

// ── Dubbing ───────────────────────────────────────────────────────────────

/// One dubbing request: transfer prosody from a source utterance onto
/// target-language phoneme text, rendered with a target speaker whose
/// acoustic conditions come from a clean reference recording.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DubRequest {
    #[serde(default)]
    pub request_id: Option<String>,
    pub source_utterance_id: String,
    /// Target phonemes with `|` between phrases; phrase count must match the
    /// source segmentation.
    pub target_text: String,
    pub target_locale: String,
    pub target_speaker_id: String,
    pub clean_audio_path: PathBuf,
    pub clean_alignment_path: PathBuf,
    /// Frames per target phoneme; a constant default is used when absent.
    #[serde(default)]
    pub durations: Option<Vec<usize>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RequestFileSchema {
    manifest: PathBuf,
    entries: Vec<DubRequest>,
}

/// A parsed request file with all paths resolved.
#[derive(Clone, Debug)]
pub struct DubRequestFile {
    pub manifest: PathBuf,
    pub entries: Vec<DubRequest>,
}

/// Load a JSON request file.  Relative paths (the source manifest and the
/// clean-reference files) resolve against the request file's directory.
pub fn load_requests(path: &Path) -> Result<DubRequestFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let schema: RequestFileSchema = serde_json::from_str(&text)
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let resolve = |p: PathBuf| if p.is_relative() { base.join(p) } else { p };
    Ok(DubRequestFile {
        manifest: resolve(schema.manifest),
        entries: schema
            .entries
            .into_iter()
            .map(|mut e| {
                e.clean_audio_path = resolve(std::mem::take(&mut e.clean_audio_path));
                e.clean_alignment_path = resolve(std::mem::take(&mut e.clean_alignment_path));
                e
            })
            .collect(),
    })
}

#[derive(Clone, Debug)]
pub struct DubOptions {
    /// Inference variant; defaults to the checkpoint's training mode.
    pub variant: Option<RunMode>,
    /// Permit a variant whose training mode differs from the checkpoint's.
    pub allow_mode_mismatch: bool,
    /// Frames per phoneme for requests without explicit durations.
    pub default_duration_frames: usize,
}

impl Default for DubOptions {
    fn default() -> Self {
        DubOptions {
            variant: None,
            allow_mode_mismatch: false,
            default_duration_frames: 6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DubOutput {
    pub request_id: String,
    pub source_utterance_id: String,
    /// Relative to the output directory.
    pub feature_path: PathBuf,
    pub num_frames: usize,
}

#[derive(Clone, Debug)]
pub struct DubFailure {
    pub request_id: String,
    pub message: String,
}

#[derive(Clone, Debug)]
pub struct DubOutcome {
    pub outputs: Vec<DubOutput>,
    pub failures: Vec<DubFailure>,
    pub outputs_manifest: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct OutputLine {
    request_id: String,
    status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    source_utterance_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    feature_path: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    num_frames: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    message: Option<String>,
}

fn sanitize_id(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Dub every request entry.  Entry-level problems (bad phrase counts,
/// missing files, unknown symbols) become per-entry failures without
/// aborting the batch; run-level problems (mode mismatch, unreadable
/// manifest) fail the whole call.
pub fn run_dub(
    ckpt: &Checkpoint,
    requests: &DubRequestFile,
    out_dir: &Path,
    options: &DubOptions,
) -> Result<DubOutcome> {
    let variant = options.variant.unwrap_or(match ckpt.mode {
        SpanMode::Pvae => RunMode::Pvae,
        SpanMode::Gvae => RunMode::Gvae,
    });
    if variant.compatible_training_mode() != ckpt.mode && !options.allow_mode_mismatch {
        return Err(Error::ModeMismatch {
            trained: span_mode_name(ckpt.mode).to_owned(),
            requested: variant.as_str().to_owned(),
        });
    }
    if options.default_duration_frames == 0 {
        return Err(Error::config("default duration must be at least 1 frame"));
    }
    let records = load_manifest(&requests.manifest)?;
    let by_id: BTreeMap<&str, &UtteranceRecord> = records
        .iter()
        .map(|r| (r.utterance_id.as_str(), r))
        .collect();

    let features_dir = out_dir.join("features");
    std::fs::create_dir_all(&features_dir).map_err(|e| Error::io(&features_dir, e))?;

    let mut outputs = Vec::new();
    let mut failures = Vec::new();
    let mut lines = Vec::new();
    let mut used_ids = HashSet::new();
    for (i, req) in requests.entries.iter().enumerate() {
        let request_id = sanitize_id(
            req.request_id
                .clone()
                .unwrap_or_else(|| format!("{}_{i:03}", req.source_utterance_id))
                .as_str(),
        );
        let result = if request_id.is_empty() {
            Err(Error::config(format!("entry {i}: empty request_id")))
        } else if !used_ids.insert(request_id.clone()) {
            Err(Error::config(format!(
                "entry {i}: duplicate request_id `{request_id}`"
            )))
        } else {
            dub_entry(ckpt, variant, &by_id, req, &request_id, out_dir, options)
        };
        match result {
            Ok(output) => {
                lines.push(OutputLine {
                    request_id: output.request_id.clone(),
                    status: "ok".into(),
                    source_utterance_id: Some(output.source_utterance_id.clone()),
                    feature_path: Some(output.feature_path.to_string_lossy().into_owned()),
                    num_frames: Some(output.num_frames),
                    message: None,
                });
                outputs.push(output);
            }
            Err(e) => {
                lines.push(OutputLine {
                    request_id: request_id.clone(),
                    status: "error".into(),
                    source_utterance_id: Some(req.source_utterance_id.clone()),
                    feature_path: None,
                    num_frames: None,
                    message: Some(e.to_string()),
                });
                failures.push(DubFailure {
                    request_id,
                    message: e.to_string(),
                });
            }
        }
    }

    let outputs_manifest = out_dir.join("outputs.jsonl");
    let mut text = String::new();
    for line in &lines {
        text.push_str(&serde_json::to_string(line).expect("output line serialization"));
        text.push('\n');
    }
    std::fs::write(&outputs_manifest, text).map_err(|e| Error::io(&outputs_manifest, e))?;
    Ok(DubOutcome {
        outputs,
        failures,
        outputs_manifest,
    })
}

fn dub_entry(
    ckpt: &Checkpoint,
    variant: RunMode,
    by_id: &BTreeMap<&str, &UtteranceRecord>,
    req: &DubRequest,
    request_id: &str,
    out_dir: &Path,
    options: &DubOptions,
) -> Result<DubOutput> {
    let record =
        by_id
            .get(req.source_utterance_id.as_str())
            .ok_or_else(|| Error::UnknownSymbol {
                kind: "utterance",
                symbol: req.source_utterance_id.clone(),
            })?;
    let tokens = load_alignment(&record.alignment_path)?;
    let (tokens, cuts) = cap_long_silences(&tokens, ckpt.max_silence_s);
    let wave = cut_waveform(&load_wav(&record.audio_path)?, &cuts);
    let streams = split_noise_streams(&wave, &IdentityDenoiser)?;
    let feats = compute_features::<f64>(&streams.denoised, &ckpt.frame_spec)?;
    let phrases = segment_phrases(&tokens, &ckpt.frame_spec, ckpt.min_silence_s)?;
    if phrases.total_frames() != feats.num_frames() {
        return Err(Error::CountMismatch {
            what: "alignment frames vs feature frames",
            left: phrases.total_frames(),
            right: feats.num_frames(),
        });
    }

    let enc = &ckpt.model.encoder;
    let (plan_spans, posteriors) = match variant {
        RunMode::Pvae => (
            phrases.clone(),
            encode_posteriors(&feats, &phrases, &ckpt.params, PROSODY_PREFIX, enc)?,
        ),
        RunMode::Gvae => {
            let global = spans_for_mode(&phrases, SpanMode::Gvae);
            let posteriors = encode_posteriors(&feats, &global, &ckpt.params, PROSODY_PREFIX, enc)?;
            (global, posteriors)
        }
        RunMode::GvaePp => (
            phrases.clone(),
            encode_chunked(&feats, &phrases, &ckpt.params, PROSODY_PREFIX, enc)?,
        ),
    };
    // Under gvae one embedding covers the utterance, so phrase marks in the
    // target text carry no constraint and collapse into a single phrase.
    let target_text = if variant == RunMode::Gvae {
        req.target_text.replace('|', " ")
    } else {
        req.target_text.clone()
    };
    let plan = make_cross_lingual_plan(
        &plan_spans,
        &target_text,
        &req.target_locale,
        &req.target_speaker_id,
    )?;

    let prosody: Vec<Array1<f64>> = posteriors
        .iter()
        .map(|p| sample_embedding(p, SampleMode::Inference, None).map(|e| e.values))
        .collect::<Result<_>>()?;
    let clean_wave = load_wav(&req.clean_audio_path)?;
    let clean_tokens = load_alignment(&req.clean_alignment_path)?;
    let noise = clean_noise_embeddings(
        &clean_wave,
        &clean_tokens,
        plan.phrase_count(),
        &IdentityDenoiser,
        &ckpt.params,
        NOISE_PREFIX,
        enc,
        &ckpt.frame_spec,
        ckpt.min_silence_s,
    )?;
    let conditioning = build_conditioning(&prosody, &noise, &plan)?;

    let phoneme_ids = ckpt.phoneme_ids(&plan.target_phrases.concat())?;
    let speaker = ckpt.speaker_id(&req.target_speaker_id)?;
    let locale = ckpt.locale_id(&req.target_locale)?;
    let durations = match &req.durations {
        Some(d) => {
            if d.len() != plan.total_phonemes() {
                return Err(Error::CountMismatch {
                    what: "request durations vs target phonemes",
                    left: d.len(),
                    right: plan.total_phonemes(),
                });
            }
            d.clone()
        }
        None => vec![options.default_duration_frames; plan.total_phonemes()],
    };
    let text = encode_text(
        &ckpt.params,
        BACKBONE_PREFIX,
        &ckpt.model.backbone,
        &phoneme_ids,
        speaker,
        locale,
    )?;
    let synth = synthesize(
        &ckpt.params,
        BACKBONE_PREFIX,
        &ckpt.model.backbone,
        &text,
        &conditioning,
        &durations,
    )?;

    let feature_path = Path::new("features").join(format!("{request_id}.json"));
    write_feature_file(
        &out_dir.join(&feature_path),
        request_id,
        &ckpt.frame_spec,
        &synth.predicted_features,
    )?;
    Ok(DubOutput {
        request_id: request_id.to_owned(),
        source_utterance_id: req.source_utterance_id.clone(),
        num_frames: synth.predicted_features.nrows(),
        feature_path,
    })
}

// ── Evaluation ────────────────────────────────────────────────────────────

#[derive(Deserialize)]
struct TranscriptLine {
    utterance_id: String,
    reference: String,
    hypothesis: String,
}

/// Load a JSONL transcript file into word-sequence pairs.
pub fn load_transcripts(path: &Path) -> Result<Vec<TranscriptPair>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TranscriptLine = serde_json::from_str(line)
            .map_err(|e| Error::config(format!("{} line {}: {e}", path.display(), i + 1)))?;
        if !seen.insert(parsed.utterance_id.clone()) {
            return Err(Error::config(format!(
                "duplicate transcript for utterance `{}`",
                parsed.utterance_id
            )));
        }
        pairs.push(TranscriptPair {
            utterance_id: parsed.utterance_id,
            reference_words: parsed
                .reference
                .split_whitespace()
                .map(str::to_owned)
                .collect(),
            hypothesis_words: parsed
                .hypothesis
                .split_whitespace()
                .map(str::to_owned)
                .collect(),
        });
    }
    Ok(pairs)
}

/// What to evaluate and which plug-ins to use.
pub struct EvalRequest<'a> {
    /// A dub output directory holding `outputs.jsonl` and feature files.
    pub out_dir: &'a Path,
    /// Reference/hypothesis transcripts; enables WER.
    pub transcripts: Option<&'a Path>,
    /// Manifest of reference recordings, keyed by the dubbed utterance ids;
    /// supplies phoneme counts and reference audio.
    pub reference_manifest: Option<&'a Path>,
    pub embedder: Option<&'a dyn FeatureEmbedder>,
    pub want_cfdsd: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct UtteranceMetrics {
    pub utterance_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phoneme_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub edits: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_words: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wer: Option<f64>,
    pub in_shortest_quartile: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus_wer: Option<f64>,
    /// WER over the quarter of scored utterances with the fewest phonemes.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shortest_quartile_wer: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cfdsd: Option<f64>,
    pub per_utterance: Vec<UtteranceMetrics>,
}

/// Ids of the ceil(n/4) utterances with the fewest phonemes, ties broken by
/// id so the subset is stable.
pub fn shortest_quartile(counts: &[(String, usize)]) -> HashSet<String> {
    let mut sorted: Vec<&(String, usize)> = counts.iter().collect();
    sorted.sort_by(|a, b| (a.1, &a.0).cmp(&(b.1, &b.0)));
    let take = counts.len().div_ceil(4);
    sorted.iter().take(take).map(|(id, _)| id.clone()).collect()
}

fn read_ok_outputs(out_dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let manifest = out_dir.join("outputs.jsonl");
    let text = std::fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: OutputLine = serde_json::from_str(line)
            .map_err(|e| Error::config(format!("{} line {}: {e}", manifest.display(), i + 1)))?;
        if parsed.status == "ok" {
            let rel = parsed.feature_path.ok_or_else(|| {
                Error::config(format!(
                    "output `{}` has no feature_path",
                    parsed.request_id
                ))
            })?;
            entries.push((parsed.request_id, out_dir.join(rel)));
        }
    }
    Ok(entries)
}

/// Compute the requested metrics over a dub output directory and write
/// `metrics.json` next to the outputs.
pub fn run_eval(request: &EvalRequest) -> Result<MetricsReport> {
    if request.transcripts.is_none() && !request.want_cfdsd {
        return Err(Error::config(
            "nothing to evaluate: provide transcripts and/or request cfdsd",
        ));
    }
    let reference_records = match request.reference_manifest {
        Some(path) => load_manifest(path)?,
        None => Vec::new(),
    };
    let phoneme_count_by_id: BTreeMap<&str, usize> = reference_records
        .iter()
        .map(|r| (r.utterance_id.as_str(), r.phonemes.len()))
        .collect();

    let mut corpus_wer = None;
    let mut shortest_quartile_wer = None;
    let mut rows: BTreeMap<String, UtteranceMetrics> = BTreeMap::new();
    let blank_row = |id: &str| UtteranceMetrics {
        utterance_id: id.to_owned(),
        phoneme_count: None,
        edits: None,
        reference_words: None,
        wer: None,
        in_shortest_quartile: false,
    };

    if let Some(path) = request.transcripts {
        if request.reference_manifest.is_none() {
            return Err(Error::config(
                "the shortest-quartile breakdown needs a reference manifest for phoneme counts",
            ));
        }
        let pairs = load_transcripts(path)?;
        let report = word_error_rate(&pairs)?;
        let counts = pairs
            .iter()
            .map(|p| {
                phoneme_count_by_id
                    .get(p.utterance_id.as_str())
                    .map(|&c| (p.utterance_id.clone(), c))
                    .ok_or_else(|| Error::UnknownSymbol {
                        kind: "utterance",
                        symbol: p.utterance_id.clone(),
                    })
            })
            .collect::<Result<Vec<(String, usize)>>>()?;
        let shortest = shortest_quartile(&counts);
        let (mut edits, mut words) = (0usize, 0usize);
        for detail in &report.per_pair {
            let in_shortest = shortest.contains(&detail.utterance_id);
            if in_shortest {
                edits += detail.edits;
                words += detail.reference_len;
            }
            let row = rows
                .entry(detail.utterance_id.clone())
                .or_insert_with(|| blank_row(&detail.utterance_id));
            row.phoneme_count = phoneme_count_by_id
                .get(detail.utterance_id.as_str())
                .copied();
            row.edits = Some(detail.edits);
            row.reference_words = Some(detail.reference_len);
            row.wer = Some(detail.edits as f64 / detail.reference_len as f64);
            row.in_shortest_quartile = in_shortest;
        }
        corpus_wer = Some(report.corpus_wer);
        shortest_quartile_wer = Some(edits as f64 / words as f64);
    }

    let mut cfdsd_value = None;
    if request.want_cfdsd {
        let embedder = request.embedder.ok_or_else(|| {
            Error::config("cfdsd requested but no feature extractor is configured")
        })?;
        if request.reference_manifest.is_none() {
            return Err(Error::config("cfdsd needs a reference manifest"));
        }
        let by_id: BTreeMap<&str, &UtteranceRecord> = reference_records
            .iter()
            .map(|r| (r.utterance_id.as_str(), r))
            .collect();
        let mut generated = Vec::new();
        let mut reference = Vec::new();
        let mut spec: Option<FrameSpec> = None;
        for (id, feature_path) in read_ok_outputs(request.out_dir)? {
            let (_, file_spec, frames) = read_feature_file(&feature_path)?;
            match &spec {
                None => spec = Some(file_spec.clone()),
                Some(s) if *s != file_spec => {
                    return Err(Error::config(format!(
                        "feature file `{id}` uses a different frame spec than the others"
                    )))
                }
                _ => {}
            }
            generated.push((id.clone(), embedder.embed(&frames)?));
            let record = by_id.get(id.as_str()).ok_or_else(|| Error::UnknownSymbol {
                kind: "utterance",
                symbol: id.clone(),
            })?;
            let wave = load_wav(&record.audio_path)?;
            let feats = compute_features::<f64>(&wave, &file_spec)?;
            reference.push((id.clone(), embedder.embed(feats.frames())?));
            let row = rows.entry(id.clone()).or_insert_with(|| blank_row(&id));
            if row.phoneme_count.is_none() {
                row.phoneme_count = phoneme_count_by_id.get(id.as_str()).copied();
            }
        }
        cfdsd_value = Some(cfdsd(&generated, &reference)?);
    }

    let report = MetricsReport {
        corpus_wer,
        shortest_quartile_wer,
        cfdsd: cfdsd_value,
        per_utterance: rows.into_values().collect(),
    };
    let report_path = request.out_dir.join("metrics.json");
    let text = serde_json::to_string_pretty(&report).expect("report serialization cannot fail");
    std::fs::write(&report_path, text + "\n").map_err(|e| Error::io(&report_path, e))?;
    Ok(report)
}

// ── Phrase inspection ─────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize)]
pub struct PhraseRow {
    pub index: usize,
    pub phoneme_start: usize,
    pub phoneme_end: usize,
    pub frame_start: usize,
    pub frame_end: usize,
    /// Phrase length: speech phonemes in the span.
    pub phoneme_count: usize,
    pub phonemes: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub boundary_silence_s: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct UtterancePhrases {
    pub utterance_id: String,
    pub total_frames: usize,
    pub rows: Vec<PhraseRow>,
}

/// Segment every utterance of a manifest (alignments only, no audio) and
/// report the phrase structure.
pub fn inspect_phrases(
    manifest: &Path,
    spec: &FrameSpec,
    min_silence_s: f64,
    max_silence_s: f64,
) -> Result<Vec<UtterancePhrases>> {
    let records = load_manifest(manifest)?;
    let mut out = Vec::with_capacity(records.len());
    for record in &records {
        let tokens = load_alignment(&record.alignment_path)?;
        check_record_phonemes(record, &tokens)?;
        let (tokens, _) = cap_long_silences(&tokens, max_silence_s);
        let phrases = segment_phrases(&tokens, spec, min_silence_s)?;
        let rows = phrases
            .spans()
            .iter()
            .map(|span| PhraseRow {
                index: span.index,
                phoneme_start: span.phoneme_range.start,
                phoneme_end: span.phoneme_range.end,
                frame_start: span.frame_range.start,
                frame_end: span.frame_range.end,
                phoneme_count: span.phoneme_count(),
                phonemes: record.phonemes[span.phoneme_range.clone()].to_vec(),
                boundary_silence_s: span.boundary_silence_s,
            })
            .collect();
        out.push(UtterancePhrases {
            utterance_id: record.utterance_id.clone(),
            total_frames: phrases.total_frames(),
            rows,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Downsample;
    use crate::evaluation::SpectralSummaryEmbedder;
    use crate::fixtures::{small_frame_spec, write_demo_corpus, DemoCorpus};

    fn tiny_encoder() -> EncoderConfig {
        EncoderConfig {
            conv_layers: 1,
            conv_channels: 6,
            kernel: 3,
            recurrent_channels: 6,
            latent_dim: 3,
            log_var_min: -12.0,
            log_var_max: 6.0,
            downsample: Downsample::MiddleFrame,
        }
    }

    fn tiny_backbone_section() -> BackboneSection {
        BackboneSection {
            phoneme_vocab_size: None,
            speaker_count: None,
            locale_count: None,
            text_channels: 6,
            speaker_embed_dim: 3,
            locale_embed_dim: 3,
            decoder_channels: 6,
            decoder_layers: 1,
            decoder_kernel: 1,
        }
    }

    fn tiny_config(
        corpus: &DemoCorpus,
        out_dir: PathBuf,
        mode: RunMode,
        steps: usize,
    ) -> RunConfig {
        RunConfig {
            seed: 11,
            mode,
            steps,
            batch_size: 2,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            manifest: corpus.manifest.clone(),
            out_dir,
            frame_spec: corpus.spec.clone(),
            encoder: tiny_encoder(),
            backbone: tiny_backbone_section(),
            loss: LossWeights::default(),
            segmentation: SegmentationSection::default(),
        }
    }

    fn write_requests(
        path: &Path,
        corpus: &DemoCorpus,
        entries: &[serde_json::Value],
    ) -> DubRequestFile {
        let body = serde_json::json!({
            "manifest": corpus.manifest.to_string_lossy(),
            "entries": entries,
        });
        std::fs::write(path, serde_json::to_string_pretty(&body).unwrap()).unwrap();
        load_requests(path).unwrap()
    }

    fn entry_for_line(corpus: &DemoCorpus, line: usize) -> serde_json::Value {
        let l = &corpus.lines[line];
        serde_json::json!({
            "request_id": l.target_id,
            "source_utterance_id": l.source_id,
            "target_text": l.target_text,
            "target_locale": corpus.target_locale,
            "target_speaker_id": corpus.target_speaker,
            "clean_audio_path": corpus.clean_audio.to_string_lossy(),
            "clean_alignment_path": corpus.clean_alignment.to_string_lossy(),
        })
    }

    #[test]
    fn five_step_training_writes_log_and_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = write_demo_corpus(&dir.path().join("corpus"), &small_frame_spec(), 3, 100);
        let config = tiny_config(&corpus, dir.path().join("run"), RunMode::Pvae, 5);
        let outcome = run_train(&config).unwrap();

        let log = std::fs::read_to_string(&outcome.log_path).unwrap();
        let records: Vec<serde_json::Value> = log
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(records.len(), 5);
        for (i, r) in records.iter().enumerate() {
            assert_eq!(r["step"], i as u64);
            for key in ["reconstruction", "prosody_kld", "noise_kld", "total"] {
                assert!(r[key].as_f64().unwrap().is_finite(), "{key} not finite");
            }
        }

        let ckpt = Checkpoint::load(&outcome.checkpoint_path).unwrap();
        assert_eq!(ckpt.mode, SpanMode::Pvae);
        assert_eq!(ckpt.seed, config.seed);
        assert!(ckpt.speakers.contains(&corpus.source_speaker));
        assert!(ckpt.speakers.contains(&corpus.target_speaker));
        assert!(ckpt.locales.contains(&corpus.target_locale));
    }

    #[test]
    fn training_is_reproducible_byte_for_byte() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = write_demo_corpus(&dir.path().join("corpus"), &small_frame_spec(), 2, 101);
        let a = run_train(&tiny_config(
            &corpus,
            dir.path().join("a"),
            RunMode::Gvae,
            3,
        ))
        .unwrap();
        let b = run_train(&tiny_config(
            &corpus,
            dir.path().join("b"),
            RunMode::Gvae,
            3,
        ))
        .unwrap();
        assert_eq!(
            std::fs::read(&a.checkpoint_path).unwrap(),
            std::fs::read(&b.checkpoint_path).unwrap()
        );
        assert_eq!(
            std::fs::read(&a.log_path).unwrap(),
            std::fs::read(&b.log_path).unwrap()
        );
    }

    #[test]
    fn gvae_pp_is_not_a_training_mode() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = write_demo_corpus(&dir.path().join("corpus"), &small_frame_spec(), 2, 102);
        let config = tiny_config(&corpus, dir.path().join("run"), RunMode::GvaePp, 3);
        assert!(matches!(run_train(&config), Err(Error::Config { .. })));
    }

    #[test]
    fn config_files_parse_with_defaults_and_reject_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "seed = 3\nmode = \"gvae\"\nsteps = 10\nbatch_size = 4\n\
             learning_rate = 1e-3\nweight_decay = 0.01\n\
             manifest = \"corpus/manifest.jsonl\"\nout_dir = \"out\"\n",
        )
        .unwrap();
        let config = RunConfig::load(&path).unwrap();
        assert_eq!(config.mode, RunMode::Gvae);
        assert_eq!(config.frame_spec, FrameSpec::default());
        assert_eq!(config.loss, LossWeights::default());
        assert_eq!(config.manifest, dir.path().join("corpus/manifest.jsonl"));

        std::fs::write(
            &path,
            "seed = 3\nmode = \"gvae\"\nsteps = 10\nbatch_size = 4\n\
             learning_rate = 1e-3\nweight_decay = 0.01\n\
             manifest = \"m.jsonl\"\nout_dir = \"out\"\nlerning_rate = 1.0\n",
        )
        .unwrap();
        assert!(matches!(RunConfig::load(&path), Err(Error::Config { .. })));
    }

    #[test]
    fn dubbing_is_reproducible_and_relative() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = write_demo_corpus(&dir.path().join("corpus"), &small_frame_spec(), 2, 103);
        let train = run_train(&tiny_config(
            &corpus,
            dir.path().join("run"),
            RunMode::Pvae,
            3,
        ))
        .unwrap();
        let ckpt = Checkpoint::load(&train.checkpoint_path).unwrap();
        let requests = write_requests(
            &dir.path().join("requests.json"),
            &corpus,
            &[entry_for_line(&corpus, 0), entry_for_line(&corpus, 1)],
        );

        let out_a = run_dub(
            &ckpt,
            &requests,
            &dir.path().join("dub_a"),
            &DubOptions::default(),
        )
        .unwrap();
        let out_b = run_dub(
            &ckpt,
            &requests,
            &dir.path().join("dub_b"),
            &DubOptions::default(),
        )
        .unwrap();
        assert_eq!(out_a.outputs.len(), 2);
        assert!(out_a.failures.is_empty());
        assert_eq!(
            std::fs::read(&out_a.outputs_manifest).unwrap(),
            std::fs::read(&out_b.outputs_manifest).unwrap()
        );
        for (a, b) in out_a.outputs.iter().zip(&out_b.outputs) {
            assert_eq!(a.feature_path, b.feature_path);
            assert!(a.feature_path.is_relative());
            assert_eq!(
                std::fs::read(dir.path().join("dub_a").join(&a.feature_path)).unwrap(),
                std::fs::read(dir.path().join("dub_b").join(&b.feature_path)).unwrap()
            );
        }
        let (id, spec, frames) = read_feature_file(
            &dir.path()
                .join("dub_a")
                .join(&out_a.outputs[0].feature_path),
        )
        .unwrap();
        assert_eq!(id, out_a.outputs[0].request_id);
        assert_eq!(spec, corpus.spec);
        assert_eq!(frames.nrows(), out_a.outputs[0].num_frames);
    }

    #[test]
    fn phrase_mismatch_fails_one_entry_not_the_batch() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = write_demo_corpus(&dir.path().join("corpus"), &small_frame_spec(), 3, 104);
        let train = run_train(&tiny_config(
            &corpus,
            dir.path().join("run"),
            RunMode::Pvae,
            2,
        ))
        .unwrap();
        let ckpt = Checkpoint::load(&train.checkpoint_path).unwrap();
        let mut bad = entry_for_line(&corpus, 1);
        bad["target_text"] = serde_json::Value::String(format!(
            "{} | {}",
            bad["target_text"].as_str().unwrap(),
            "ah ee"
        ));
        let requests = write_requests(
            &dir.path().join("requests.json"),
            &corpus,
            &[entry_for_line(&corpus, 0), bad, entry_for_line(&corpus, 2)],
        );
        let outcome = run_dub(
            &ckpt,
            &requests,
            &dir.path().join("dub"),
            &DubOptions::default(),
        )
        .unwrap();
        assert_eq!(outcome.outputs.len(), 2);
        assert_eq!(outcome.failures.len(), 1);
        assert_eq!(outcome.failures[0].request_id, corpus.lines[1].target_id);
        assert!(
            outcome.failures[0].message.contains("phrase count"),
            "unexpected message: {}",
            outcome.failures[0].message
        );
    }

    #[test]
    fn mode_matrix_is_enforced_and_overridable() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = write_demo_corpus(&dir.path().join("corpus"), &small_frame_spec(), 2, 105);
        let pvae = Checkpoint::load(
            &run_train(&tiny_config(
                &corpus,
                dir.path().join("p"),
                RunMode::Pvae,
                2,
            ))
            .unwrap()
            .checkpoint_path,
        )
        .unwrap();
        let gvae = Checkpoint::load(
            &run_train(&tiny_config(
                &corpus,
                dir.path().join("g"),
                RunMode::Gvae,
                2,
            ))
            .unwrap()
            .checkpoint_path,
        )
        .unwrap();
        let requests = write_requests(
            &dir.path().join("requests.json"),
            &corpus,
            &[entry_for_line(&corpus, 0)],
        );

        let gvae_on_pvae = DubOptions {
            variant: Some(RunMode::Gvae),
            ..DubOptions::default()
        };
        assert!(matches!(
            run_dub(&pvae, &requests, &dir.path().join("d1"), &gvae_on_pvae),
            Err(Error::ModeMismatch { .. })
        ));
        let forced = DubOptions {
            variant: Some(RunMode::Gvae),
            allow_mode_mismatch: true,
            ..DubOptions::default()
        };
        assert!(run_dub(&pvae, &requests, &dir.path().join("d2"), &forced).is_ok());

        // gvae-pp rides on gvae training without any override.
        let pp = DubOptions {
            variant: Some(RunMode::GvaePp),
            ..DubOptions::default()
        };
        let outcome = run_dub(&gvae, &requests, &dir.path().join("d3"), &pp).unwrap();
        assert_eq!(outcome.outputs.len(), 1);
        assert!(matches!(
            run_dub(
                &gvae,
                &requests,
                &dir.path().join("d4"),
                &DubOptions {
                    variant: Some(RunMode::Pvae),
                    ..DubOptions::default()
                }
            ),
            Err(Error::ModeMismatch { .. })
        ));
    }

    #[test]
    fn eval_scores_identical_outputs_as_perfect() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = write_demo_corpus(&dir.path().join("corpus"), &small_frame_spec(), 4, 106);
        let out_dir = dir.path().join("dub");
        std::fs::create_dir_all(out_dir.join("features")).unwrap();

        // Fake a dub run whose outputs are exactly the reference features.
        let records = load_manifest(&corpus.manifest).unwrap();
        let mut lines = String::new();
        let mut transcripts = String::new();
        for line in &corpus.lines {
            let record = records
                .iter()
                .find(|r| r.utterance_id == line.target_id)
                .unwrap();
            let wave = load_wav(&record.audio_path).unwrap();
            let feats = compute_features::<f64>(&wave, &corpus.spec).unwrap();
            let rel = format!("features/{}.json", line.target_id);
            write_feature_file(
                &out_dir.join(&rel),
                &line.target_id,
                &corpus.spec,
                feats.frames(),
            )
            .unwrap();
            lines.push_str(&format!(
                "{{\"request_id\":\"{}\",\"status\":\"ok\",\"feature_path\":\"{rel}\"}}\n",
                line.target_id
            ));
            transcripts.push_str(&format!(
                "{{\"utterance_id\":\"{}\",\"reference\":\"w1 w2 w3\",\"hypothesis\":\"w1 w2 w3\"}}\n",
                line.target_id
            ));
        }
        std::fs::write(out_dir.join("outputs.jsonl"), lines).unwrap();
        let transcript_path = dir.path().join("transcripts.jsonl");
        std::fs::write(&transcript_path, transcripts).unwrap();

        let embedder = SpectralSummaryEmbedder { bands: 4 };
        let report = run_eval(&EvalRequest {
            out_dir: &out_dir,
            transcripts: Some(&transcript_path),
            reference_manifest: Some(&corpus.manifest),
            embedder: Some(&embedder),
            want_cfdsd: true,
        })
        .unwrap();
        assert_eq!(report.corpus_wer, Some(0.0));
        assert_eq!(report.shortest_quartile_wer, Some(0.0));
        assert!(report.cfdsd.unwrap().abs() < 1e-8);
        assert_eq!(report.per_utterance.len(), corpus.lines.len());
        assert_eq!(
            report
                .per_utterance
                .iter()
                .filter(|r| r.in_shortest_quartile)
                .count(),
            corpus.lines.len().div_ceil(4)
        );
        assert!(out_dir.join("metrics.json").exists());
    }

    #[test]
    fn eval_plugin_requirements_are_checked() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = write_demo_corpus(&dir.path().join("corpus"), &small_frame_spec(), 2, 107);
        let out_dir = dir.path().join("dub");
        std::fs::create_dir_all(&out_dir).unwrap();
        std::fs::write(out_dir.join("outputs.jsonl"), "").unwrap();

        // cfdsd without an extractor is a configuration error.
        assert!(matches!(
            run_eval(&EvalRequest {
                out_dir: &out_dir,
                transcripts: None,
                reference_manifest: Some(&corpus.manifest),
                embedder: None,
                want_cfdsd: true,
            }),
            Err(Error::Config { .. })
        ));

        // Transcripts alone work without any plug-in.
        let transcript_path = dir.path().join("t.jsonl");
        std::fs::write(
            &transcript_path,
            format!(
                "{{\"utterance_id\":\"{}\",\"reference\":\"a b\",\"hypothesis\":\"a c\"}}\n",
                corpus.lines[0].target_id
            ),
        )
        .unwrap();
        let report = run_eval(&EvalRequest {
            out_dir: &out_dir,
            transcripts: Some(&transcript_path),
            reference_manifest: Some(&corpus.manifest),
            embedder: None,
            want_cfdsd: false,
        })
        .unwrap();
        assert_eq!(report.corpus_wer, Some(0.5));
        assert!(report.cfdsd.is_none());
    }

    #[test]
    fn quartile_selection_rounds_up_and_breaks_ties_by_id() {
        let counts = vec![
            ("a".to_string(), 3),
            ("b".to_string(), 1),
            ("c".to_string(), 2),
            ("d".to_string(), 5),
            ("e".to_string(), 2),
        ];
        let shortest = shortest_quartile(&counts);
        assert_eq!(shortest.len(), 2);
        assert!(shortest.contains("b"));
        assert!(shortest.contains("c"));
    }

    #[test]
    fn inspection_reports_the_phrase_structure() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = write_demo_corpus(&dir.path().join("corpus"), &small_frame_spec(), 3, 108);
        let report = inspect_phrases(
            &corpus.manifest,
            &corpus.spec,
            DEFAULT_MIN_SILENCE_S,
            DEFAULT_MAX_SILENCE_S,
        )
        .unwrap();
        let records = load_manifest(&corpus.manifest).unwrap();
        assert_eq!(report.len(), records.len());
        for (utterance, record) in report.iter().zip(&records) {
            assert_eq!(utterance.utterance_id, record.utterance_id);
            let joined: Vec<String> = utterance
                .rows
                .iter()
                .flat_map(|r| r.phonemes.iter().cloned())
                .collect();
            assert_eq!(joined, record.phonemes);
        }
        for line in &corpus.lines {
            let source = report
                .iter()
                .find(|u| u.utterance_id == line.source_id)
                .unwrap();
            assert_eq!(source.rows.len(), line.phrase_count);
            let target = report
                .iter()
                .find(|u| u.utterance_id == line.target_id)
                .unwrap();
            assert_eq!(target.rows.len(), line.phrase_count);
        }
    }

    #[test]
    fn request_files_resolve_relative_paths_and_reject_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("req.json");
        std::fs::write(
            &path,
            "{\"manifest\":\"corpus/m.jsonl\",\"entries\":[{\
             \"source_utterance_id\":\"u0\",\"target_text\":\"a b\",\
             \"target_locale\":\"de-de\",\"target_speaker_id\":\"s\",\
             \"clean_audio_path\":\"clean.wav\",\"clean_alignment_path\":\"clean.tsv\"}]}",
        )
        .unwrap();
        let parsed = load_requests(&path).unwrap();
        assert_eq!(parsed.manifest, dir.path().join("corpus/m.jsonl"));
        assert_eq!(
            parsed.entries[0].clean_audio_path,
            dir.path().join("clean.wav")
        );
        assert!(parsed.entries[0].request_id.is_none());

        std::fs::write(
            &path,
            "{\"manifest\":\"m.jsonl\",\"entries\":[],\"extra\":1}",
        )
        .unwrap();
        assert!(matches!(load_requests(&path), Err(Error::Config { .. })));
    }
}
