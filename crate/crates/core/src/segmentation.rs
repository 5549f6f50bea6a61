//! Phrase segmentation from forced alignments.
//!
//! Utterances split into phrases at silences of at least the configured
//! minimum duration (50 ms by default).  Consecutive silence tokens count as
//! one region.  Silence frames belong to the phrase before them; a leading
//! silence belongs to the first phrase.  Phrase length `L_k` counts speech
//! phonemes only.

use crate::corpus::{check_contiguous, AlignedToken, FrameSpec};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::ops::Range;

/// Default minimum silence duration that opens a phrase boundary.
pub const DEFAULT_MIN_SILENCE_S: f64 = 0.05;

/// Default cap applied to long silences before segmentation.
pub const DEFAULT_MAX_SILENCE_S: f64 = 2.0;

/// One phrase of an utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct PhraseSpan {
    pub index: usize,
    /// Indices into the utterance's speech phoneme sequence.
    pub phoneme_range: Range<usize>,
    /// Half-open frame range on the feature timeline.
    pub frame_range: Range<usize>,
    /// Duration of the silence that closed this phrase, if any.
    pub boundary_silence_s: Option<f64>,
}

impl PhraseSpan {
    /// Phrase length `L_k`: the number of speech phonemes.
    pub fn phoneme_count(&self) -> usize {
        self.phoneme_range.len()
    }

    pub fn frame_count(&self) -> usize {
        self.frame_range.len()
    }
}

/// All phrases of one utterance; spans partition both the frame timeline and
/// the phoneme sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct PhraseSet {
    spans: Vec<PhraseSpan>,
    total_frames: usize,
    total_phonemes: usize,
}

impl PhraseSet {
    pub fn spans(&self) -> &[PhraseSpan] {
        &self.spans
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    pub fn total_frames(&self) -> usize {
        self.total_frames
    }

    pub fn total_phonemes(&self) -> usize {
        self.total_phonemes
    }

    pub fn phoneme_counts(&self) -> Vec<usize> {
        self.spans.iter().map(|s| s.phoneme_count()).collect()
    }
}

/// Span layout used for encoding: per-phrase or one global span.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpanMode {
    /// One span per phrase.
    Pvae,
    /// A single span covering the whole utterance.
    Gvae,
}

// Internal: a silence region or a single speech token, on the merged view.
struct Segment {
    is_silence: bool,
    start_s: f64,
    end_s: f64,
}

fn merge_silences(tokens: &[AlignedToken]) -> Vec<Segment> {
    let mut segments: Vec<Segment> = Vec::new();
    for t in tokens {
        if t.is_silence() {
            if let Some(last) = segments.last_mut() {
                if last.is_silence {
                    last.end_s = t.end_s;
                    continue;
                }
            }
        }
        segments.push(Segment {
            is_silence: t.is_silence(),
            start_s: t.start_s,
            end_s: t.end_s,
        });
    }
    segments
}

/// Split an utterance into phrases at long silences.
///
/// Tokens must be contiguous from 0 (run them through
/// [`crate::corpus::cap_long_silences`] first if silences may exceed the
/// cap).  The resulting spans partition `[0, total_frames)` on the frame
/// grid of `spec` and `[0, total_phonemes)` over the speech tokens.
pub fn segment_phrases(
    tokens: &[AlignedToken],
    spec: &FrameSpec,
    min_silence_s: f64,
) -> Result<PhraseSet> {
    if tokens.is_empty() {
        return Err(Error::EmptyAlignment);
    }
    check_contiguous(tokens)?;
    let segments = merge_silences(tokens);
    let num_speech = segments.iter().filter(|s| !s.is_silence).count();
    if num_speech == 0 {
        return Err(Error::NoSpeech);
    }

    // Phrase boundaries sit at the end of qualifying silences that still have
    // speech after them.  Leading and trailing silences never split.
    let mut boundaries: Vec<(f64, f64)> = Vec::new(); // (boundary time, silence duration)
    let mut speech_seen = 0usize;
    for (i, seg) in segments.iter().enumerate() {
        if !seg.is_silence {
            speech_seen += 1;
            continue;
        }
        let dur = seg.end_s - seg.start_s;
        let speech_after = segments[i + 1..].iter().any(|s| !s.is_silence);
        if dur >= min_silence_s && speech_seen > 0 && speech_after {
            boundaries.push((seg.end_s, dur));
        }
    }

    // Count speech phonemes per phrase by walking the segments again.
    let mut phoneme_splits: Vec<usize> = Vec::new(); // cumulative counts at boundaries
    {
        let mut count = 0usize;
        let mut next_boundary = 0usize;
        for seg in &segments {
            if seg.is_silence {
                if next_boundary < boundaries.len()
                    && (seg.end_s - boundaries[next_boundary].0).abs() < 1e-12
                {
                    phoneme_splits.push(count);
                    next_boundary += 1;
                }
            } else {
                count += 1;
            }
        }
    }

    let end_s = tokens.last().unwrap().end_s;
    let total_frames = spec.frame_for_time(end_s) + 1;
    let total_phonemes = num_speech;

    let mut spans = Vec::with_capacity(boundaries.len() + 1);
    let mut frame_start = 0usize;
    let mut phoneme_start = 0usize;
    for (k, (t_split, sil_dur)) in boundaries.iter().enumerate() {
        let frame_end = spec.frame_for_time(*t_split);
        let phoneme_end = phoneme_splits[k];
        spans.push(PhraseSpan {
            index: k,
            phoneme_range: phoneme_start..phoneme_end,
            frame_range: frame_start..frame_end,
            boundary_silence_s: Some(*sil_dur),
        });
        frame_start = frame_end;
        phoneme_start = phoneme_end;
    }
    spans.push(PhraseSpan {
        index: boundaries.len(),
        phoneme_range: phoneme_start..total_phonemes,
        frame_range: frame_start..total_frames,
        boundary_silence_s: None,
    });

    for s in &spans {
        if s.frame_range.is_empty() {
            return Err(Error::shape(format!(
                "phrase {} maps to an empty frame range; hop is too coarse for this alignment",
                s.index
            )));
        }
        if s.phoneme_range.is_empty() {
            return Err(Error::shape(format!("phrase {} has no phonemes", s.index)));
        }
    }

    Ok(PhraseSet {
        spans,
        total_frames,
        total_phonemes,
    })
}

/// Span layout for an encoding mode: phrase-level spans as-is, or one global
/// span covering the utterance.
pub fn spans_for_mode(set: &PhraseSet, mode: SpanMode) -> PhraseSet {
    match mode {
        SpanMode::Pvae => set.clone(),
        SpanMode::Gvae => PhraseSet {
            spans: vec![PhraseSpan {
                index: 0,
                phoneme_range: 0..set.total_phonemes,
                frame_range: 0..set.total_frames,
                boundary_silence_s: None,
            }],
            total_frames: set.total_frames,
            total_phonemes: set.total_phonemes,
        },
    }
}

/// Frames owned by each speech phoneme, for duration-based expansion.
///
/// Each phoneme owns the frames from its start to the next phoneme's start,
/// so silence frames follow the phoneme before them and a leading silence
/// goes to the first phoneme.  The counts sum exactly to the utterance's
/// frame total and agree with [`segment_phrases`] boundaries.
pub fn phoneme_frame_durations(tokens: &[AlignedToken], spec: &FrameSpec) -> Result<Vec<usize>> {
    check_contiguous(tokens)?;
    let starts: Vec<f64> = tokens
        .iter()
        .filter(|t| !t.is_silence())
        .map(|t| t.start_s)
        .collect();
    if starts.is_empty() {
        return Err(Error::NoSpeech);
    }
    let end_s = tokens.last().unwrap().end_s;
    let total = spec.frame_for_time(end_s) + 1;

    let mut boundaries = vec![0usize];
    for s in starts.iter().skip(1) {
        boundaries.push(spec.frame_for_time(*s));
    }
    boundaries.push(total);

    let mut durations = Vec::with_capacity(starts.len());
    for w in boundaries.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::shape(format!(
                "phoneme spans no frames (boundaries {} and {})",
                w[0], w[1]
            )));
        }
        durations.push(w[1] - w[0]);
    }
    Ok(durations)
}
