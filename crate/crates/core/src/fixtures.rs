//! Deterministic test and demo data: random alignments, a Monte-Carlo KLD
//! estimator, a toy denoiser, synthetic training batches, and a miniature
//! two-language corpus written to disk.
//!
//! Compiled into the library so integration tests and examples can share it.

use crate::backbone::{BackboneConfig, ModelConfig, TrainItem};
use crate::conditioning::Denoiser;
use crate::corpus::{
    manifest_line, serialize_alignment, write_wav, AlignedToken, FeatureMatrix, FrameSpec,
    UtteranceRecord, Waveform,
};
use crate::encoder::{EncoderConfig, GaussianPosterior};
use crate::segmentation::{
    phoneme_frame_durations, segment_phrases, spans_for_mode, SpanMode, DEFAULT_MIN_SILENCE_S,
};
use crate::{Result, Scalar};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use std::path::{Path, PathBuf};

// ── Random alignments ─────────────────────────────────────────────────────

fn ms(v: u64) -> f64 {
    v as f64 / 1000.0
}

/// A random contiguous alignment on a millisecond grid.  Draws cover the
/// interesting shapes: leading/trailing silences, back-to-back silence
/// tokens, silences on both sides of the split threshold, the occasional
/// phoneme shorter than a frame hop, and (rarely) no speech at all.
pub fn random_alignment(rng: &mut ChaCha20Rng) -> Vec<AlignedToken> {
    let mut tokens = Vec::new();
    let mut t = 0u64;
    let push = |tokens: &mut Vec<AlignedToken>, name: &str, dur_ms: u64, t: &mut u64| {
        tokens.push(AlignedToken::new(name, ms(*t), ms(*t + dur_ms)));
        *t += dur_ms;
    };

    if rng.random_bool(0.07) {
        for _ in 0..rng.random_range(1..=2) {
            let d = rng.random_range(30..400);
            push(&mut tokens, "sil", d, &mut t);
        }
        return tokens;
    }

    if rng.random_bool(0.4) {
        let d = rng.random_range(20..300);
        push(&mut tokens, "sil", d, &mut t);
    }
    let phrases = rng.random_range(1..=4);
    let mut phoneme = 0usize;
    for k in 0..phrases {
        for i in 0..rng.random_range(1..=5) {
            if i > 0 && rng.random_bool(0.3) {
                let d = rng.random_range(10..50);
                push(&mut tokens, "sil", d, &mut t);
            }
            let d = if rng.random_bool(0.05) {
                rng.random_range(3..10)
            } else {
                rng.random_range(40..250)
            };
            push(&mut tokens, &format!("P{phoneme}"), d, &mut t);
            phoneme += 1;
        }
        if k + 1 < phrases {
            let d = rng.random_range(50..400);
            if rng.random_bool(0.25) {
                // Same region expressed as two adjacent silence tokens.
                let first = d / 2;
                push(&mut tokens, "sil", first, &mut t);
                push(&mut tokens, "sil", d - first, &mut t);
            } else {
                push(&mut tokens, "sil", d, &mut t);
            }
        }
    }
    if rng.random_bool(0.3) {
        let d = rng.random_range(20..400);
        push(&mut tokens, "sil", d, &mut t);
    }
    tokens
}

// ── Monte-Carlo KLD ───────────────────────────────────────────────────────

/// Estimate KLD(q, standard normal) by sampling `z ~ q` and averaging
/// `log q(z) - log p(z)`.  Unbiased; the standard error shrinks as
/// 1/sqrt(samples).
pub fn mc_kld_estimate(
    posterior: &GaussianPosterior<f64>,
    samples: usize,
    rng: &mut ChaCha20Rng,
) -> f64 {
    let mut acc = 0.0;
    for _ in 0..samples {
        for j in 0..posterior.dim() {
            let log_var = posterior.log_variance[j];
            let eps: f64 = rng.sample(StandardNormal);
            let z = posterior.mean[j] + (0.5 * log_var).exp() * eps;
            acc += 0.5 * (z * z - log_var - eps * eps);
        }
    }
    acc / samples as f64
}

// ── Toy denoiser ──────────────────────────────────────────────────────────

/// Removes a known sinusoidal hum, the simplest non-trivial denoiser.
pub struct HumDenoiser {
    pub freq_hz: f64,
    pub amplitude: f64,
}

impl HumDenoiser {
    /// The hum's value at sample index `n`.
    pub fn sample(&self, n: usize, rate: u32) -> f64 {
        let phase = 2.0 * std::f64::consts::PI * self.freq_hz * n as f64 / rate as f64;
        self.amplitude * phase.sin()
    }
}

impl Denoiser for HumDenoiser {
    fn denoise(&self, audio: &Waveform) -> Result<Vec<f64>> {
        Ok(audio
            .samples
            .iter()
            .enumerate()
            .map(|(n, &x)| x - self.sample(n, audio.sample_rate_hz))
            .collect())
    }
}

// ── Synthetic training batches ────────────────────────────────────────────

/// A tiny model config plus `items` random multi-phrase training items with
/// `num_bins` feature bins.  Feature matrices are random non-negative
/// values, so these exercise shapes and gradients, not audio realism.
pub fn synthetic_batch<F: Scalar>(
    rng: &mut ChaCha20Rng,
    items: usize,
    num_bins: usize,
) -> (ModelConfig, Vec<TrainItem<F>>) {
    let cfg = ModelConfig {
        encoder: EncoderConfig::tiny(),
        backbone: BackboneConfig::tiny(6, 2, 2),
        num_bins,
    };
    let spec = FrameSpec {
        sample_rate_hz: 100,
        window: 2 * (num_bins - 1),
        hop: 5,
        num_bins,
    };

    let mut out = Vec::with_capacity(items);
    for item in 0..items {
        // Alignment on a 50 ms grid, one frame per grid step.
        let mut tokens = Vec::new();
        let mut t = 0u64;
        let mut phoneme_ids = Vec::new();
        let phrases = rng.random_range(2..=3);
        for k in 0..phrases {
            for _ in 0..rng.random_range(1..=3) {
                let d = rng.random_range(2..=4) * 50;
                tokens.push(AlignedToken::new(
                    format!("p{}", phoneme_ids.len()),
                    ms(t),
                    ms(t + d),
                ));
                t += d;
                phoneme_ids.push(rng.random_range(0..cfg.backbone.phoneme_vocab_size));
            }
            if k + 1 < phrases {
                tokens.push(AlignedToken::new("sil", ms(t), ms(t + 100)));
                t += 100;
            }
        }
        let phrases = segment_phrases(&tokens, &spec, DEFAULT_MIN_SILENCE_S)
            .expect("synthetic alignment always has speech");
        let durations =
            phoneme_frame_durations(&tokens, &spec).expect("synthetic phonemes span frames");
        let frames = phrases.total_frames();
        let mut random_features = || -> FeatureMatrix<F> {
            let values = Array2::from_shape_fn((frames, num_bins), |_| {
                F::from_f64(rng.random_range(0.05..1.0))
            });
            FeatureMatrix::new(values, spec.clone()).expect("entries are positive")
        };
        let target = random_features();
        let denoised = random_features();
        let noise = random_features();
        out.push(TrainItem {
            utterance_id: format!("synthetic_{item}"),
            target,
            denoised,
            noise,
            spans: spans_for_mode(&phrases, SpanMode::Pvae),
            phoneme_ids,
            speaker: rng.random_range(0..cfg.backbone.speaker_count),
            locale: rng.random_range(0..cfg.backbone.locale_count),
            durations,
        });
    }
    (cfg, out)
}

// ── Demo corpus ───────────────────────────────────────────────────────────

/// Small analysis settings that keep corpus-based tests fast.
pub fn small_frame_spec() -> FrameSpec {
    FrameSpec {
        sample_rate_hz: 8000,
        window: 64,
        hop: 80,
        num_bins: 33,
    }
}

/// One dialogue line of the demo corpus: an English source utterance and the
/// German rendition of the same line.
#[derive(Clone, Debug)]
pub struct DemoLine {
    pub dialogue_id: String,
    pub source_id: String,
    pub target_id: String,
    /// The German script as phrase-marked phoneme text, matching the target
    /// utterance's manifest entry.
    pub target_text: String,
    /// Phrase count shared by the source and target utterances.
    pub phrase_count: usize,
}

/// An on-disk corpus written by [`write_demo_corpus`].
#[derive(Clone, Debug)]
pub struct DemoCorpus {
    pub dir: PathBuf,
    pub manifest: PathBuf,
    pub spec: FrameSpec,
    pub source_locale: String,
    pub target_locale: String,
    pub source_speaker: String,
    pub target_speaker: String,
    /// Clean single-phrase recording of the target speaker.
    pub clean_audio: PathBuf,
    pub clean_alignment: PathBuf,
    pub lines: Vec<DemoLine>,
}

const EN_PHONES: [&str; 8] = ["aa", "eh", "iy", "ow", "uw", "mm", "nn", "ss"];
const DE_PHONES: [&str; 8] = ["ah", "ee", "oo", "uu", "ll", "rr", "tt", "kk"];

// Alignment grid in units of 1/32 s.  Times and sample counts on this grid
// are exact in floating point, so alignment frame totals always agree with
// the audio's frame count.
const GRID_PER_S: u64 = 32;

struct UtteranceSketch {
    tokens: Vec<AlignedToken>,
    /// (phone set index, grid units) per token, silence as None.
    plan: Vec<(Option<usize>, u64)>,
    phrases: Vec<Vec<String>>,
}

fn sketch_utterance(
    rng: &mut ChaCha20Rng,
    phones: &[&str],
    phrase_count: usize,
) -> UtteranceSketch {
    let mut plan: Vec<(Option<usize>, u64)> = Vec::new();
    let mut phrases = Vec::with_capacity(phrase_count);
    if rng.random_bool(0.3) {
        plan.push((None, 1));
    }
    for k in 0..phrase_count {
        let mut phrase = Vec::new();
        for i in 0..rng.random_range(1..=3) {
            if i > 0 && rng.random_bool(0.2) {
                plan.push((None, 1));
            }
            let phone = rng.random_range(0..phones.len());
            plan.push((Some(phone), rng.random_range(2..=4)));
            phrase.push(phones[phone].to_owned());
        }
        phrases.push(phrase);
        if k + 1 < phrase_count {
            plan.push((None, rng.random_range(2..=5)));
        }
    }
    if rng.random_bool(0.3) {
        plan.push((None, rng.random_range(1..=3)));
    }

    let mut tokens = Vec::with_capacity(plan.len());
    let mut t = 0u64;
    for &(phone, units) in &plan {
        let name = match phone {
            Some(i) => phones[i],
            None => "sil",
        };
        tokens.push(AlignedToken::new(
            name,
            t as f64 / GRID_PER_S as f64,
            (t + units) as f64 / GRID_PER_S as f64,
        ));
        t += units;
    }
    UtteranceSketch {
        tokens,
        plan,
        phrases,
    }
}

fn render_audio(sketch: &UtteranceSketch, rate: u32, amplitude: f64, pitch: f64) -> Waveform {
    let per_unit = (rate as u64 / GRID_PER_S) as usize;
    let total: u64 = sketch.plan.iter().map(|&(_, u)| u).sum();
    let mut samples = vec![0.0f64; total as usize * per_unit];
    let mut n = 0usize;
    for &(phone, units) in &sketch.plan {
        let len = units as usize * per_unit;
        if let Some(i) = phone {
            let freq = (300.0 + 170.0 * i as f64) * pitch;
            for k in 0..len {
                let phase = 2.0 * std::f64::consts::PI * freq * (n + k) as f64 / rate as f64;
                samples[n + k] = amplitude * phase.sin();
            }
        }
        n += len;
    }
    Waveform {
        samples,
        sample_rate_hz: rate,
    }
}

/// Write a deterministic bilingual demo corpus: `num_lines` dialogue lines,
/// each spoken in English by one speaker and in German by another, with
/// matching phrase structure, plus a clean German reference recording.
///
/// Returns the paths and per-line metadata tests and demos need.
pub fn write_demo_corpus(dir: &Path, spec: &FrameSpec, num_lines: usize, seed: u64) -> DemoCorpus {
    assert_eq!(
        spec.sample_rate_hz % GRID_PER_S as u32,
        0,
        "sample rate must sit on the alignment grid"
    );
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let audio_dir = dir.join("audio");
    let align_dir = dir.join("align");
    std::fs::create_dir_all(&audio_dir).expect("create demo audio dir");
    std::fs::create_dir_all(&align_dir).expect("create demo align dir");

    let mut manifest_text = String::new();
    let mut lines = Vec::with_capacity(num_lines);
    for j in 0..num_lines {
        let phrase_count = rng.random_range(1..=3);
        let dialogue_id = format!("dlg_{j}");
        let mut ids = Vec::new();
        for (prefix, phones, locale, speaker, amp) in [
            ("en", &EN_PHONES, "en-us", "spk_en", 0.05),
            ("de", &DE_PHONES, "de-de", "spk_de", 0.09),
        ] {
            let id = format!("{prefix}_{j}");
            let sketch = sketch_utterance(&mut rng, phones.as_slice(), phrase_count);
            let pitch = rng.random_range(0.9..1.1);
            let wave = render_audio(&sketch, spec.sample_rate_hz, amp, pitch);
            write_wav(&audio_dir.join(format!("{id}.wav")), &wave).expect("write demo wav");
            std::fs::write(
                align_dir.join(format!("{id}.tsv")),
                serialize_alignment(&sketch.tokens),
            )
            .expect("write demo alignment");
            let record = UtteranceRecord {
                utterance_id: id.clone(),
                audio_path: PathBuf::from(format!("audio/{id}.wav")),
                locale: locale.to_owned(),
                speaker_id: speaker.to_owned(),
                phonemes: sketch.phrases.concat(),
                alignment_path: PathBuf::from(format!("align/{id}.tsv")),
                dialogue_id: Some(dialogue_id.clone()),
            };
            manifest_text.push_str(&manifest_line(&record));
            manifest_text.push('\n');
            ids.push((id, sketch));
        }
        let (target_id, target_sketch) = ids.pop().unwrap();
        let (source_id, _) = ids.pop().unwrap();
        let target_text = target_sketch
            .phrases
            .iter()
            .map(|p| p.join(" "))
            .collect::<Vec<String>>()
            .join(" | ");
        lines.push(DemoLine {
            dialogue_id,
            source_id,
            target_id,
            target_text,
            phrase_count,
        });
    }
    let manifest = dir.join("manifest.jsonl");
    std::fs::write(&manifest, manifest_text).expect("write demo manifest");

    // Clean reference: one phrase of three German phonemes, framed by short
    // silences that never open a boundary.
    let clean_plan: Vec<(Option<usize>, u64)> = vec![
        (None, 1),
        (Some(0), 3),
        (Some(2), 3),
        (Some(4), 3),
        (None, 1),
    ];
    let clean_tokens: Vec<AlignedToken> = {
        let mut t = 0u64;
        clean_plan
            .iter()
            .map(|&(phone, units)| {
                let name = match phone {
                    Some(i) => DE_PHONES[i],
                    None => "sil",
                };
                let tok = AlignedToken::new(
                    name,
                    t as f64 / GRID_PER_S as f64,
                    (t + units) as f64 / GRID_PER_S as f64,
                );
                t += units;
                tok
            })
            .collect()
    };
    let clean_sketch = UtteranceSketch {
        tokens: clean_tokens,
        plan: clean_plan,
        phrases: vec![vec![
            DE_PHONES[0].into(),
            DE_PHONES[2].into(),
            DE_PHONES[4].into(),
        ]],
    };
    let clean_wave = render_audio(&clean_sketch, spec.sample_rate_hz, 0.09, 1.0);
    let clean_audio = dir.join("clean_spk_de.wav");
    let clean_alignment = dir.join("clean_spk_de.tsv");
    write_wav(&clean_audio, &clean_wave).expect("write clean wav");
    std::fs::write(&clean_alignment, serialize_alignment(&clean_sketch.tokens))
        .expect("write clean alignment");

    DemoCorpus {
        dir: dir.to_path_buf(),
        manifest,
        spec: spec.clone(),
        source_locale: "en-us".into(),
        target_locale: "de-de".into(),
        source_speaker: "spk_en".into(),
        target_speaker: "spk_de".into(),
        clean_audio,
        clean_alignment,
        lines,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{load_alignment, load_manifest, load_wav};
    use rand::SeedableRng;

    #[test]
    fn demo_corpus_is_consistent_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_frame_spec();
        let corpus = write_demo_corpus(&dir.path().join("a"), &spec, 3, 42);
        assert_eq!(corpus.lines.len(), 3);

        let records = load_manifest(&corpus.manifest).unwrap();
        assert_eq!(records.len(), 6);
        for record in &records {
            let tokens = load_alignment(&record.alignment_path).unwrap();
            let speech: Vec<&str> = tokens
                .iter()
                .filter(|t| !t.is_silence())
                .map(|t| t.token.as_str())
                .collect();
            let listed: Vec<&str> = record.phonemes.iter().map(String::as_str).collect();
            assert_eq!(speech, listed, "{}", record.utterance_id);

            // The frame totals from alignment and audio must agree exactly.
            let wave = load_wav(&record.audio_path).unwrap();
            let phrases = segment_phrases(&tokens, &spec, DEFAULT_MIN_SILENCE_S).unwrap();
            assert_eq!(
                phrases.total_frames(),
                spec.num_frames(wave.len()),
                "{}",
                record.utterance_id
            );
        }

        let again = write_demo_corpus(&dir.path().join("b"), &spec, 3, 42);
        for (a, b) in corpus.lines.iter().zip(&again.lines) {
            assert_eq!(a.target_text, b.target_text);
        }
        let wav_a = std::fs::read(corpus.dir.join("audio/en_0.wav")).unwrap();
        let wav_b = std::fs::read(again.dir.join("audio/en_0.wav")).unwrap();
        assert_eq!(wav_a, wav_b);
    }

    #[test]
    fn clean_reference_is_a_single_phrase() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_frame_spec();
        let corpus = write_demo_corpus(dir.path(), &spec, 1, 7);
        let tokens = load_alignment(&corpus.clean_alignment).unwrap();
        let phrases = segment_phrases(&tokens, &spec, DEFAULT_MIN_SILENCE_S).unwrap();
        assert_eq!(phrases.len(), 1);
        assert_eq!(phrases.total_phonemes(), 3);
        let wave = load_wav(&corpus.clean_audio).unwrap();
        assert_eq!(phrases.total_frames(), spec.num_frames(wave.len()));
    }

    #[test]
    fn synthetic_batches_are_internally_consistent() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let (cfg, items) = synthetic_batch::<f64>(&mut rng, 4, 9);
        assert_eq!(items.len(), 4);
        for item in &items {
            assert!(item.spans.len() >= 2);
            assert_eq!(item.durations.len(), item.phoneme_ids.len());
            assert_eq!(
                item.durations.iter().sum::<usize>(),
                item.target.num_frames()
            );
            assert_eq!(item.target.num_bins(), cfg.num_bins);
            assert!(item.speaker < cfg.backbone.speaker_count);
            assert!(item.locale < cfg.backbone.locale_count);
            assert!(item
                .phoneme_ids
                .iter()
                .all(|&p| p < cfg.backbone.phoneme_vocab_size));
        }
    }

    #[test]
    fn mc_estimate_of_the_standard_normal_is_zero() {
        let p = GaussianPosterior {
            mean: ndarray::arr1(&[0.0, 0.0]),
            log_variance: ndarray::arr1(&[0.0, 0.0]),
        };
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let kld = mc_kld_estimate(&p, 50_000, &mut rng);
        assert!(kld.abs() < 0.02, "got {kld}");
    }
}
