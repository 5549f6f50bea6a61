//! Minimal conditional synthesizer: a phoneme-embedding text encoder and a
//! duration-expanded convolutional decoder.
//!
//! This stands in for a full TTS backbone.  Its only job is to give the
//! phrase-conditioning path something to reconstruct through, so gradients
//! reach both reference encoders end to end.  The reconstruction term is a
//! plain L1 on feature frames, not a full synthesis objective.

use crate::autodiff::{Tape, Var};
use crate::conditioning::{build_conditioning_on_tape, ConditioningMatrix};
use crate::corpus::FeatureMatrix;
use crate::encoder::{encode_spans_on_tape, im2col, sample_on_tape, EncoderConfig};
use crate::losses::{length_weighted_kld_on_tape, LossBreakdown, LossWeights};
use crate::optim::{randn, AdamW, BoundParams, ParamSet};
use crate::segmentation::PhraseSet;
use crate::{Error, Result, Scalar};
use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Parameter prefixes shared by training, checkpointing, and inference.
pub const PROSODY_PREFIX: &str = "prosody_enc.";
pub const NOISE_PREFIX: &str = "noise_enc.";
pub const BACKBONE_PREFIX: &str = "backbone.";

/// Synthesizer sizes.  Counts come from the corpus tables; channel sizes are
/// free choices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub phoneme_vocab_size: usize,
    pub speaker_count: usize,
    pub locale_count: usize,
    pub text_channels: usize,
    pub speaker_embed_dim: usize,
    pub locale_embed_dim: usize,
    pub decoder_channels: usize,
    pub decoder_layers: usize,
    /// Kernel 1 keeps each output frame a function of its own phoneme only.
    pub decoder_kernel: usize,
}

impl BackboneConfig {
    pub fn desk_scale(
        phoneme_vocab_size: usize,
        speaker_count: usize,
        locale_count: usize,
    ) -> Self {
        BackboneConfig {
            phoneme_vocab_size,
            speaker_count,
            locale_count,
            text_channels: 32,
            speaker_embed_dim: 8,
            locale_embed_dim: 4,
            decoder_channels: 64,
            decoder_layers: 2,
            decoder_kernel: 1,
        }
    }

    pub fn tiny(phoneme_vocab_size: usize, speaker_count: usize, locale_count: usize) -> Self {
        BackboneConfig {
            phoneme_vocab_size,
            speaker_count,
            locale_count,
            text_channels: 8,
            speaker_embed_dim: 4,
            locale_embed_dim: 4,
            decoder_channels: 8,
            decoder_layers: 1,
            decoder_kernel: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("phoneme_vocab_size", self.phoneme_vocab_size),
            ("speaker_count", self.speaker_count),
            ("locale_count", self.locale_count),
            ("text_channels", self.text_channels),
            ("speaker_embed_dim", self.speaker_embed_dim),
            ("locale_embed_dim", self.locale_embed_dim),
            ("decoder_channels", self.decoder_channels),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        if self.decoder_kernel == 0 || self.decoder_kernel.is_multiple_of(2) {
            return Err(Error::config(format!(
                "decoder_kernel must be odd and positive, got {}",
                self.decoder_kernel
            )));
        }
        Ok(())
    }
}

/// Decoder output plus the expansion actually used.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthOutput<F: Scalar> {
    pub predicted_features: Array2<F>,
    pub per_phoneme_durations: Vec<usize>,
}

/// Names and shapes of the synthesizer parameters.  `cond_width` is the
/// width of the conditioning rows (prosody plus noise embedding dims).
pub fn backbone_param_shapes(
    prefix: &str,
    cfg: &BackboneConfig,
    cond_width: usize,
    num_bins: usize,
) -> Vec<(String, (usize, usize))> {
    let mut shapes = vec![
        (
            format!("{prefix}text.embedding"),
            (cfg.phoneme_vocab_size, cfg.text_channels),
        ),
        (
            format!("{prefix}text.speaker"),
            (cfg.speaker_count, cfg.speaker_embed_dim),
        ),
        (
            format!("{prefix}text.speaker_proj"),
            (cfg.speaker_embed_dim, cfg.text_channels),
        ),
        (
            format!("{prefix}text.locale"),
            (cfg.locale_count, cfg.locale_embed_dim),
        ),
        (
            format!("{prefix}text.locale_proj"),
            (cfg.locale_embed_dim, cfg.text_channels),
        ),
        (
            format!("{prefix}text.mix.weight"),
            (cfg.text_channels, cfg.text_channels),
        ),
        (format!("{prefix}text.mix.bias"), (1, cfg.text_channels)),
    ];
    let mut in_ch = cfg.text_channels + cond_width;
    for layer in 0..cfg.decoder_layers {
        shapes.push((
            format!("{prefix}dec{layer}.weight"),
            (cfg.decoder_kernel * in_ch, cfg.decoder_channels),
        ));
        shapes.push((
            format!("{prefix}dec{layer}.bias"),
            (1, cfg.decoder_channels),
        ));
        in_ch = cfg.decoder_channels;
    }
    shapes.push((format!("{prefix}out.weight"), (in_ch, num_bins)));
    shapes.push((format!("{prefix}out.bias"), (1, num_bins)));
    shapes
}

/// Add freshly initialized synthesizer parameters to `params`.
pub fn init_backbone_params<F: Scalar, R: Rng>(
    params: &mut ParamSet<F>,
    prefix: &str,
    cfg: &BackboneConfig,
    cond_width: usize,
    num_bins: usize,
    rng: &mut R,
) {
    for (name, (rows, cols)) in backbone_param_shapes(prefix, cfg, cond_width, num_bins) {
        let value = if name.ends_with(".bias") {
            Array2::from_elem((rows, cols), F::zero())
        } else {
            randn(rng, rows, cols, 1.0 / (rows as f64).sqrt())
        };
        params.insert(name, value);
    }
}

/// Check that `params` holds every synthesizer array with the right shape.
pub fn check_backbone_params<F: Scalar>(
    params: &ParamSet<F>,
    prefix: &str,
    cfg: &BackboneConfig,
    cond_width: usize,
    num_bins: usize,
) -> Result<()> {
    for (name, (rows, cols)) in backbone_param_shapes(prefix, cfg, cond_width, num_bins) {
        match params.try_get(&name) {
            None => return Err(Error::shape(format!("missing parameter {name}"))),
            Some(v) if v.dim() != (rows, cols) => {
                return Err(Error::shape(format!(
                    "parameter {name} has shape {:?}, config wants ({rows}, {cols})",
                    v.dim()
                )));
            }
            Some(_) => {}
        }
    }
    Ok(())
}

/// Embed phonemes and add projected speaker and locale embeddings to every
/// position, then mix pointwise.
pub fn encode_text_on_tape<F: Scalar>(
    tape: &mut Tape<F>,
    params: &BoundParams,
    prefix: &str,
    phoneme_ids: &[usize],
    speaker: usize,
    locale: usize,
) -> Var {
    let embedding = params.var(&format!("{prefix}text.embedding"));
    let x = tape.gather_rows(embedding, phoneme_ids);
    let spk_table = params.var(&format!("{prefix}text.speaker"));
    let spk = tape.gather_rows(spk_table, &[speaker]);
    let spk_proj = params.var(&format!("{prefix}text.speaker_proj"));
    let spk_row = tape.matmul(spk, spk_proj);
    let x = tape.add_row(x, spk_row);
    let loc_table = params.var(&format!("{prefix}text.locale"));
    let loc = tape.gather_rows(loc_table, &[locale]);
    let loc_proj = params.var(&format!("{prefix}text.locale_proj"));
    let loc_row = tape.matmul(loc, loc_proj);
    let x = tape.add_row(x, loc_row);
    let mix_w = params.var(&format!("{prefix}text.mix.weight"));
    let mix_b = params.var(&format!("{prefix}text.mix.bias"));
    let z = tape.matmul(x, mix_w);
    let z = tape.add_row(z, mix_b);
    tape.tanh(z)
}

fn check_text_inputs(
    cfg: &BackboneConfig,
    phoneme_ids: &[usize],
    speaker: usize,
    locale: usize,
) -> Result<()> {
    cfg.validate()?;
    if phoneme_ids.is_empty() {
        return Err(Error::shape("empty phoneme list"));
    }
    for &id in phoneme_ids {
        if id >= cfg.phoneme_vocab_size {
            return Err(Error::IndexRange {
                kind: "phoneme id",
                index: id,
                len: cfg.phoneme_vocab_size,
            });
        }
    }
    if speaker >= cfg.speaker_count {
        return Err(Error::IndexRange {
            kind: "speaker id",
            index: speaker,
            len: cfg.speaker_count,
        });
    }
    if locale >= cfg.locale_count {
        return Err(Error::IndexRange {
            kind: "locale id",
            index: locale,
            len: cfg.locale_count,
        });
    }
    Ok(())
}

/// One encoding row per phoneme, with identity embeddings added in.
pub fn encode_text<F: Scalar>(
    params: &ParamSet<F>,
    prefix: &str,
    cfg: &BackboneConfig,
    phoneme_ids: &[usize],
    speaker: usize,
    locale: usize,
) -> Result<Array2<F>> {
    check_text_inputs(cfg, phoneme_ids, speaker, locale)?;
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let v = encode_text_on_tape(&mut tape, &bound, prefix, phoneme_ids, speaker, locale);
    Ok(tape.value(v).clone())
}

fn expansion_indices(durations: &[usize]) -> Vec<usize> {
    durations
        .iter()
        .enumerate()
        .flat_map(|(i, &d)| std::iter::repeat_n(i, d))
        .collect()
}

/// Concatenate text and conditioning rows, expand phonemes to frames by
/// duration, and decode to feature frames.
pub fn synthesize_on_tape<F: Scalar>(
    tape: &mut Tape<F>,
    params: &BoundParams,
    prefix: &str,
    cfg: &BackboneConfig,
    text: Var,
    conditioning: Var,
    durations: &[usize],
) -> Var {
    let joined = tape.concat_cols(text, conditioning);
    let indices = expansion_indices(durations);
    let mut x = tape.gather_rows(joined, &indices);
    for layer in 0..cfg.decoder_layers {
        let w = params.var(&format!("{prefix}dec{layer}.weight"));
        let b = params.var(&format!("{prefix}dec{layer}.bias"));
        let cols = im2col(tape, x, cfg.decoder_kernel);
        let z = tape.matmul(cols, w);
        let z = tape.add_row(z, b);
        x = tape.tanh(z);
    }
    let w = params.var(&format!("{prefix}out.weight"));
    let b = params.var(&format!("{prefix}out.bias"));
    let y = tape.matmul(x, w);
    tape.add_row(y, b)
}

/// Plain synthesis from precomputed text encoding and conditioning rows.
pub fn synthesize<F: Scalar>(
    params: &ParamSet<F>,
    prefix: &str,
    cfg: &BackboneConfig,
    text_encoding: &Array2<F>,
    conditioning: &ConditioningMatrix<F>,
    durations: &[usize],
) -> Result<SynthOutput<F>> {
    cfg.validate()?;
    if text_encoding.nrows() != conditioning.rows.nrows() {
        return Err(Error::shape(format!(
            "text encoding has {} rows, conditioning has {}",
            text_encoding.nrows(),
            conditioning.rows.nrows()
        )));
    }
    if durations.len() != text_encoding.nrows() {
        return Err(Error::CountMismatch {
            what: "durations vs phoneme rows",
            left: durations.len(),
            right: text_encoding.nrows(),
        });
    }
    if durations.contains(&0) {
        return Err(Error::shape("every phoneme needs at least one frame"));
    }
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let text = tape.leaf(text_encoding.clone());
    let cond = tape.leaf(conditioning.rows.clone());
    let out = synthesize_on_tape(&mut tape, &bound, prefix, cfg, text, cond, durations);
    Ok(SynthOutput {
        predicted_features: tape.value(out).clone(),
        per_phoneme_durations: durations.to_vec(),
    })
}

/// Everything the training step needs for one utterance.
#[derive(Clone, Debug)]
pub struct TrainItem<F: Scalar> {
    pub utterance_id: String,
    /// Reconstruction target: features of the original audio.
    pub target: FeatureMatrix<F>,
    /// Prosody encoder input: features of the denoised stream.
    pub denoised: FeatureMatrix<F>,
    /// Noise encoder input: features of the noise stream.
    pub noise: FeatureMatrix<F>,
    /// Span layout under the training mode (per-phrase or global).
    pub spans: PhraseSet,
    pub phoneme_ids: Vec<usize>,
    pub speaker: usize,
    pub locale: usize,
    /// Frames per phoneme from the forced alignment; sums to the frame count.
    pub durations: Vec<usize>,
}

/// Model shape knobs shared by training and inference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub backbone: BackboneConfig,
    pub num_bins: usize,
}

impl ModelConfig {
    pub fn cond_width(&self) -> usize {
        2 * self.encoder.latent_dim
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.backbone.validate()?;
        if self.num_bins == 0 {
            return Err(Error::config("num_bins must be at least 1"));
        }
        Ok(())
    }
}

/// Initialize all three parameter groups in one deterministic order.
pub fn init_model_params<F: Scalar, R: Rng>(cfg: &ModelConfig, rng: &mut R) -> ParamSet<F> {
    let mut params = ParamSet::new();
    crate::encoder::init_encoder_params(
        &mut params,
        PROSODY_PREFIX,
        &cfg.encoder,
        cfg.num_bins,
        rng,
    );
    crate::encoder::init_encoder_params(&mut params, NOISE_PREFIX, &cfg.encoder, cfg.num_bins, rng);
    init_backbone_params(
        &mut params,
        BACKBONE_PREFIX,
        &cfg.backbone,
        cfg.cond_width(),
        cfg.num_bins,
        rng,
    );
    params
}

/// Check a full parameter set against the model configuration.
pub fn check_model_params<F: Scalar>(params: &ParamSet<F>, cfg: &ModelConfig) -> Result<()> {
    crate::encoder::check_encoder_params(params, PROSODY_PREFIX, &cfg.encoder, cfg.num_bins)?;
    crate::encoder::check_encoder_params(params, NOISE_PREFIX, &cfg.encoder, cfg.num_bins)?;
    check_backbone_params(
        params,
        BACKBONE_PREFIX,
        &cfg.backbone,
        cfg.cond_width(),
        cfg.num_bins,
    )
}

fn validate_item<F: Scalar>(item: &TrainItem<F>, cfg: &ModelConfig) -> Result<()> {
    if item.spans.is_empty() {
        return Err(Error::shape(format!(
            "utterance {} has no phrases",
            item.utterance_id
        )));
    }
    let frames = item.target.num_frames();
    if item.spans.total_frames() != frames {
        return Err(Error::shape(format!(
            "utterance {}: spans cover {} frames, features have {}",
            item.utterance_id,
            item.spans.total_frames(),
            frames
        )));
    }
    for (name, m) in [("denoised", &item.denoised), ("noise", &item.noise)] {
        if m.num_frames() != frames || m.num_bins() != item.target.num_bins() {
            return Err(Error::shape(format!(
                "utterance {}: {name} features are {}x{}, target is {}x{}",
                item.utterance_id,
                m.num_frames(),
                m.num_bins(),
                frames,
                item.target.num_bins()
            )));
        }
    }
    if item.target.num_bins() != cfg.num_bins {
        return Err(Error::shape(format!(
            "utterance {}: features have {} bins, model wants {}",
            item.utterance_id,
            item.target.num_bins(),
            cfg.num_bins
        )));
    }
    if item.phoneme_ids.len() != item.spans.total_phonemes() {
        return Err(Error::CountMismatch {
            what: "phoneme ids vs span phonemes",
            left: item.phoneme_ids.len(),
            right: item.spans.total_phonemes(),
        });
    }
    if item.durations.len() != item.phoneme_ids.len() {
        return Err(Error::CountMismatch {
            what: "durations vs phonemes",
            left: item.durations.len(),
            right: item.phoneme_ids.len(),
        });
    }
    if item.durations.iter().sum::<usize>() != frames {
        return Err(Error::shape(format!(
            "utterance {}: durations sum to {}, features have {} frames",
            item.utterance_id,
            item.durations.iter().sum::<usize>(),
            frames
        )));
    }
    check_text_inputs(&cfg.backbone, &item.phoneme_ids, item.speaker, item.locale)
}

/// Build one utterance's loss nodes on a shared batch tape.  Returns
/// (reconstruction, prosody KLD, noise KLD) as 1x1 nodes.  The KLD nodes
/// carry the length weighting but not the alpha multipliers.
pub fn item_loss_on_tape<F: Scalar, R: Rng>(
    tape: &mut Tape<F>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    weights: &LossWeights,
    item: &TrainItem<F>,
    rng: &mut R,
) -> (Var, Var, Var) {
    let denoised = tape.leaf(item.denoised.frames().clone());
    let prosody_posts = encode_spans_on_tape(
        tape,
        bound,
        PROSODY_PREFIX,
        &cfg.encoder,
        denoised,
        item.spans.spans(),
    );
    let noise_feat = tape.leaf(item.noise.frames().clone());
    let noise_posts = encode_spans_on_tape(
        tape,
        bound,
        NOISE_PREFIX,
        &cfg.encoder,
        noise_feat,
        item.spans.spans(),
    );

    let draw = |rng: &mut R| -> Array1<F> {
        randn::<F, R>(rng, 1, cfg.encoder.latent_dim, 1.0)
            .row(0)
            .to_owned()
    };
    let prosody_samples: Vec<Var> = prosody_posts
        .iter()
        .map(|p| {
            let eps = draw(rng);
            sample_on_tape(tape, p, &eps)
        })
        .collect();
    let noise_samples: Vec<Var> = noise_posts
        .iter()
        .map(|p| {
            let eps = draw(rng);
            sample_on_tape(tape, p, &eps)
        })
        .collect();

    let counts = item.spans.phoneme_counts();
    let cond = build_conditioning_on_tape(tape, &prosody_samples, &noise_samples, &counts);
    let text = encode_text_on_tape(
        tape,
        bound,
        BACKBONE_PREFIX,
        &item.phoneme_ids,
        item.speaker,
        item.locale,
    );
    let pred = synthesize_on_tape(
        tape,
        bound,
        BACKBONE_PREFIX,
        &cfg.backbone,
        text,
        cond,
        &item.durations,
    );

    let target = tape.leaf(item.target.frames().clone());
    let diff = tape.sub(pred, target);
    let abs = tape.abs(diff);
    let recon = tape.mean_all(abs);

    let lengths = counts;
    let p_kld = length_weighted_kld_on_tape(tape, &prosody_posts, &lengths, weights.beta_prosody);
    let n_kld = length_weighted_kld_on_tape(tape, &noise_posts, &lengths, weights.beta_noise);
    (recon, p_kld, n_kld)
}

/// One optimizer step over a batch.  All items are validated before any
/// state changes; a non-finite loss aborts the step before the update.
pub fn train_step<F: Scalar, R: Rng>(
    items: &[TrainItem<F>],
    params: &mut ParamSet<F>,
    optimizer: &mut AdamW<F>,
    cfg: &ModelConfig,
    weights: &LossWeights,
    rng: &mut R,
    step_index: usize,
) -> Result<LossBreakdown> {
    if items.is_empty() {
        return Err(Error::shape("empty training batch"));
    }
    cfg.validate()?;
    weights.validate()?;
    check_model_params(params, cfg)?;
    for item in items {
        validate_item(item, cfg)?;
    }

    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let mut recon_sum: Option<Var> = None;
    let mut p_sum: Option<Var> = None;
    let mut n_sum: Option<Var> = None;
    for item in items {
        let (r, p, n) = item_loss_on_tape(&mut tape, &bound, cfg, weights, item, rng);
        let join = |acc: Option<Var>, v: Var, tape: &mut Tape<F>| match acc {
            Some(a) => Some(tape.add(a, v)),
            None => Some(v),
        };
        recon_sum = join(recon_sum, r, &mut tape);
        p_sum = join(p_sum, p, &mut tape);
        n_sum = join(n_sum, n, &mut tape);
    }
    let inv = F::from_f64(1.0 / items.len() as f64);
    let recon = tape.scale(recon_sum.unwrap(), inv);
    let p_kld = tape.scale(p_sum.unwrap(), inv);
    let n_kld = tape.scale(n_sum.unwrap(), inv);
    let p_scaled = tape.scale(p_kld, F::from_f64(weights.alpha_prosody));
    let n_scaled = tape.scale(n_kld, F::from_f64(weights.alpha_noise));
    let partial = tape.add(recon, p_scaled);
    let total = tape.add(partial, n_scaled);

    let breakdown = LossBreakdown::new(
        tape.scalar(recon).to_f64(),
        tape.scalar(p_kld).to_f64(),
        tape.scalar(n_kld).to_f64(),
        weights,
    );
    if !breakdown.is_finite() {
        return Err(Error::Divergence { step: step_index });
    }
    let grads = tape.backward(total);
    let grad_set = bound.collect_grads(params, &grads);
    optimizer.step(params, &grad_set);
    Ok(breakdown)
}
