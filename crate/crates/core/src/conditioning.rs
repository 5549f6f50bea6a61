//! Phrase-conditioning plumbing between the reference encoders and the
//! synthesizer: denoised/noise stream separation, embedding concatenation and
//! broadcast to phoneme level, cross-lingual phrase pairing, and the clean
//! noise reference used at dubbing time.

use crate::autodiff::{Tape, Var};
use crate::corpus::{AlignedToken, FeatureMatrix, FrameSpec, Waveform};
use crate::encoder::{encode_posteriors, EncoderConfig};
use crate::optim::ParamSet;
use crate::segmentation::{segment_phrases, PhraseSet};
use crate::{Error, Result, Scalar};
use ndarray::{Array1, Array2};

/// Splits a waveform into a denoised part and the residue.  Implementations
/// return the denoised samples; the residue is derived so that the two
/// streams always sum back to the input.
pub trait Denoiser {
    fn denoise(&self, audio: &Waveform) -> Result<Vec<f64>>;
}

/// Default separation: everything is signal, the noise stream is silent.
pub struct IdentityDenoiser;

impl Denoiser for IdentityDenoiser {
    fn denoise(&self, audio: &Waveform) -> Result<Vec<f64>> {
        Ok(audio.samples.clone())
    }
}

/// The two streams feeding the two reference encoders.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseStreams {
    pub denoised: Waveform,
    pub noise: Waveform,
}

/// Run the denoiser and form the residual noise stream.
pub fn split_noise_streams<D: Denoiser + ?Sized>(
    audio: &Waveform,
    denoiser: &D,
) -> Result<NoiseStreams> {
    let denoised = denoiser.denoise(audio)?;
    if denoised.len() != audio.len() {
        return Err(Error::DenoiserContract {
            expected: audio.len(),
            found: denoised.len(),
        });
    }
    if denoised.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "denoiser output".into(),
        });
    }
    let noise: Vec<f64> = audio
        .samples
        .iter()
        .zip(&denoised)
        .map(|(&x, &d)| x - d)
        .collect();
    Ok(NoiseStreams {
        denoised: Waveform {
            samples: denoised,
            sample_rate_hz: audio.sample_rate_hz,
        },
        noise: Waveform {
            samples: noise,
            sample_rate_hz: audio.sample_rate_hz,
        },
    })
}

/// Pairing of K source phrases with K target phrases plus the target
/// identity, everything `build_conditioning` and the text encoder need.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningPlan {
    pub source_spans: PhraseSet,
    /// Phoneme symbols of each target phrase, in order.
    pub target_phrases: Vec<Vec<String>>,
    pub target_locale: String,
    pub target_speaker_id: String,
}

impl ConditioningPlan {
    pub fn phrase_count(&self) -> usize {
        self.target_phrases.len()
    }

    pub fn phrase_phoneme_counts(&self) -> Vec<usize> {
        self.target_phrases.iter().map(|p| p.len()).collect()
    }

    pub fn total_phonemes(&self) -> usize {
        self.target_phrases.iter().map(|p| p.len()).sum()
    }

    /// Target phonemes flattened across phrases.
    pub fn flat_phonemes(&self) -> Vec<&str> {
        self.target_phrases
            .iter()
            .flat_map(|p| p.iter().map(|s| s.as_str()))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_phrases.len() != self.source_spans.len() {
            return Err(Error::PhraseCountMismatch {
                source_phrases: self.source_spans.len(),
                target_phrases: self.target_phrases.len(),
            });
        }
        if self.target_phrases.iter().any(|p| p.is_empty()) {
            return Err(Error::config("a target phrase has no phonemes"));
        }
        Ok(())
    }
}

/// Phoneme-level conditioning rows, one per target phoneme, each the
/// concatenation of its phrase's prosody and noise embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningMatrix<F: Scalar> {
    pub rows: Array2<F>,
}

/// Split phrase-marked phoneme text on `|` into per-phrase symbol lists.
/// Unmarked text is a single phrase.
pub fn parse_phrase_marked_text(text: &str) -> Result<Vec<Vec<String>>> {
    let phrases: Vec<Vec<String>> = text
        .split('|')
        .map(|chunk| chunk.split_whitespace().map(str::to_owned).collect())
        .collect();
    if phrases.iter().any(|p: &Vec<String>| p.is_empty()) {
        return Err(Error::config(format!(
            "target text {text:?} contains an empty phrase"
        )));
    }
    Ok(phrases)
}

/// Pair source phrase k with target phrase k.  The phrase counts must agree
/// exactly; nothing is truncated or padded.
pub fn make_cross_lingual_plan(
    source_spans: &PhraseSet,
    target_text: &str,
    target_locale: &str,
    target_speaker_id: &str,
) -> Result<ConditioningPlan> {
    let target_phrases = parse_phrase_marked_text(target_text)?;
    if target_phrases.len() != source_spans.len() {
        return Err(Error::PhraseCountMismatch {
            source_phrases: source_spans.len(),
            target_phrases: target_phrases.len(),
        });
    }
    Ok(ConditioningPlan {
        source_spans: source_spans.clone(),
        target_phrases,
        target_locale: target_locale.to_owned(),
        target_speaker_id: target_speaker_id.to_owned(),
    })
}

fn check_embedding_counts<T>(prosody: &[T], noise: &[T], k: usize) -> Result<()> {
    if prosody.len() != k {
        return Err(Error::CountMismatch {
            what: "prosody embeddings vs plan phrases",
            left: prosody.len(),
            right: k,
        });
    }
    if noise.len() != k {
        return Err(Error::CountMismatch {
            what: "noise embeddings vs plan phrases",
            left: noise.len(),
            right: k,
        });
    }
    Ok(())
}

/// Broadcast per-phrase embeddings to phoneme level: the row for every
/// phoneme of target phrase k is `prosody[k] ++ noise[k]`.
pub fn build_conditioning<F: Scalar>(
    prosody: &[Array1<F>],
    noise: &[Array1<F>],
    plan: &ConditioningPlan,
) -> Result<ConditioningMatrix<F>> {
    plan.validate()?;
    check_embedding_counts(prosody, noise, plan.phrase_count())?;
    let width = prosody[0].len() + noise[0].len();
    let mut rows = Array2::from_elem((plan.total_phonemes(), width), F::zero());
    let mut row = 0;
    for (k, phrase) in plan.target_phrases.iter().enumerate() {
        if prosody[k].len() != prosody[0].len() || noise[k].len() != noise[0].len() {
            return Err(Error::shape("embedding dims differ across phrases"));
        }
        for _ in 0..phrase.len() {
            for (j, &v) in prosody[k].iter().enumerate() {
                rows[(row, j)] = v;
            }
            for (j, &v) in noise[k].iter().enumerate() {
                rows[(row, prosody[k].len() + j)] = v;
            }
            row += 1;
        }
    }
    Ok(ConditioningMatrix { rows })
}

/// Tape version of [`build_conditioning`] for the training path.  Embeddings
/// are 1 x dim nodes; the result is a total_phonemes x (2 dim) node.
pub fn build_conditioning_on_tape<F: Scalar>(
    tape: &mut Tape<F>,
    prosody: &[Var],
    noise: &[Var],
    phrase_phoneme_counts: &[usize],
) -> Var {
    assert_eq!(prosody.len(), phrase_phoneme_counts.len());
    assert_eq!(noise.len(), phrase_phoneme_counts.len());
    assert!(!prosody.is_empty(), "no phrases to broadcast");
    let mut stacked: Option<Var> = None;
    for (p, n) in prosody.iter().zip(noise) {
        let row = tape.concat_cols(*p, *n);
        stacked = Some(match stacked {
            Some(s) => tape.concat_rows(s, row),
            None => row,
        });
    }
    let stacked = stacked.unwrap();
    let indices: Vec<usize> = phrase_phoneme_counts
        .iter()
        .enumerate()
        .flat_map(|(k, &count)| std::iter::repeat_n(k, count))
        .collect();
    tape.gather_rows(stacked, &indices)
}

/// Noise embeddings for dubbing: encode the clean reference (which must
/// segment into exactly one phrase) with the noise encoder and replicate its
/// posterior mean once per target phrase.
#[allow(clippy::too_many_arguments)]
pub fn clean_noise_embeddings<F: Scalar, D: Denoiser + ?Sized>(
    clean_audio: &Waveform,
    clean_alignment: &[AlignedToken],
    k: usize,
    denoiser: &D,
    params: &ParamSet<F>,
    noise_prefix: &str,
    cfg: &EncoderConfig,
    spec: &FrameSpec,
    min_silence_s: f64,
) -> Result<Vec<Array1<F>>> {
    if k == 0 {
        return Err(Error::config(
            "clean noise embedding requested for zero phrases",
        ));
    }
    let spans = segment_phrases(clean_alignment, spec, min_silence_s)?;
    if spans.len() != 1 {
        return Err(Error::CleanReference {
            phrases: spans.len(),
        });
    }
    let streams = split_noise_streams(clean_audio, denoiser)?;
    let features: FeatureMatrix<F> = crate::corpus::compute_features(&streams.noise, spec)?;
    let posteriors = encode_posteriors(&features, &spans, params, noise_prefix, cfg)?;
    Ok(vec![posteriors[0].mean.clone(); k])
}
