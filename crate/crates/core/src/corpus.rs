//! Corpus access: manifests, forced alignments, audio, and spectral features.
//!
//! A manifest is a JSON-lines file, one utterance per line, with fields
//! `utterance_id`, `audio_path`, `locale`, `speaker_id`, `phonemes`
//! (space-separated), `alignment_path`, and optional `dialogue_id`.
//! Relative paths resolve against the manifest's directory.
//!
//! Alignments are tab-separated `token<TAB>start_s<TAB>end_s` rows, UTF-8
//! with LF line endings; the literal token `sil` marks silence.

use crate::{Error, Result, Scalar};
use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Tolerance when checking that one token ends where the next starts.
pub const CONTIGUITY_EPS: f64 = 1e-6;

/// One utterance row of a corpus manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceRecord {
    pub utterance_id: String,
    pub audio_path: PathBuf,
    pub locale: String,
    pub speaker_id: String,
    pub phonemes: Vec<String>,
    pub alignment_path: PathBuf,
    pub dialogue_id: Option<String>,
}

/// One aligned token; `sil` is silence, anything else is a speech phoneme.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedToken {
    pub token: String,
    pub start_s: f64,
    pub end_s: f64,
}

impl AlignedToken {
    pub fn new(token: impl Into<String>, start_s: f64, end_s: f64) -> Self {
        AlignedToken {
            token: token.into(),
            start_s,
            end_s,
        }
    }

    pub fn is_silence(&self) -> bool {
        self.token == "sil"
    }

    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }
}

/// Spectrogram analysis settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameSpec {
    pub sample_rate_hz: u32,
    pub window: usize,
    pub hop: usize,
    pub num_bins: usize,
}

impl Default for FrameSpec {
    fn default() -> Self {
        FrameSpec {
            sample_rate_hz: 24_000,
            window: 1024,
            hop: 256,
            num_bins: 513,
        }
    }
}

impl FrameSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.window == 0 || self.sample_rate_hz == 0 {
            return Err(Error::config("frame spec fields must be positive"));
        }
        if self.num_bins != self.window / 2 + 1 {
            return Err(Error::config(format!(
                "num_bins must be window/2 + 1 ({} for window {}), got {}",
                self.window / 2 + 1,
                self.window,
                self.num_bins
            )));
        }
        Ok(())
    }

    /// Frame index holding time `t`: floor(t * rate / hop).
    pub fn frame_for_time(&self, t_s: f64) -> usize {
        let f = (t_s * self.sample_rate_hz as f64 / self.hop as f64).floor();
        if f < 0.0 {
            0
        } else {
            f as usize
        }
    }

    /// Frames produced for a waveform of `samples` samples.
    pub fn num_frames(&self, samples: usize) -> usize {
        1 + samples / self.hop
    }
}

/// Mono audio plus its sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

impl Waveform {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Record of one silence trim: `removed_s` seconds were cut starting at
/// `original_start_s` on the pre-cut timeline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SilenceCut {
    pub original_start_s: f64,
    pub removed_s: f64,
}

/// Magnitude spectrogram frames, one row per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix<F: Scalar> {
    frames: Array2<F>,
    spec: FrameSpec,
}

impl<F: Scalar> FeatureMatrix<F> {
    /// Wrap precomputed frames.  Entries must be finite and non-negative.
    pub fn new(frames: Array2<F>, spec: FrameSpec) -> Result<Self> {
        if frames.ncols() != spec.num_bins {
            return Err(Error::shape(format!(
                "feature matrix has {} bins, spec wants {}",
                frames.ncols(),
                spec.num_bins
            )));
        }
        for &v in &frames {
            if !v.is_finite() || v < F::zero() {
                return Err(Error::NonFinite {
                    context: "feature matrix entries must be finite and non-negative".into(),
                });
            }
        }
        Ok(FeatureMatrix { frames, spec })
    }

    pub fn frames(&self) -> &Array2<F> {
        &self.frames
    }

    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn num_bins(&self) -> usize {
        self.frames.ncols()
    }

    pub fn spec(&self) -> &FrameSpec {
        &self.spec
    }
}

// ── Manifest ──────────────────────────────────────────────────────────────

pub fn load_manifest(path: &Path) -> Result<Vec<UtteranceRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut records = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = parse_manifest_line(line, i + 1, base)?;
        if !seen.insert(record.utterance_id.clone()) {
            return Err(Error::DuplicateUtterance {
                id: record.utterance_id,
                line: i + 1,
            });
        }
        records.push(record);
    }
    Ok(records)
}

fn parse_manifest_line(line: &str, line_no: usize, base: &Path) -> Result<UtteranceRecord> {
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| Error::ManifestParse {
            line: line_no,
            msg: e.to_string(),
        })?;
    let obj = value.as_object().ok_or_else(|| Error::ManifestParse {
        line: line_no,
        msg: "expected a JSON object".into(),
    })?;
    let field = |name: &'static str| -> Result<String> {
        obj.get(name)
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .ok_or(Error::ManifestSchema {
                line: line_no,
                field: name,
            })
    };

    let phonemes: Vec<String> = field("phonemes")?
        .split_whitespace()
        .map(str::to_string)
        .collect();
    if phonemes.is_empty() {
        return Err(Error::ManifestParse {
            line: line_no,
            msg: "field `phonemes` is empty".into(),
        });
    }

    Ok(UtteranceRecord {
        utterance_id: field("utterance_id")?,
        audio_path: resolve(base, &field("audio_path")?),
        locale: field("locale")?,
        speaker_id: field("speaker_id")?,
        phonemes,
        alignment_path: resolve(base, &field("alignment_path")?),
        dialogue_id: obj
            .get("dialogue_id")
            .and_then(|v| v.as_str())
            .map(str::to_string),
    })
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let path = Path::new(p);
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

/// One manifest line for `record`; paths are written as given.
pub fn manifest_line(record: &UtteranceRecord) -> String {
    let mut obj = serde_json::Map::new();
    obj.insert("utterance_id".into(), record.utterance_id.clone().into());
    obj.insert(
        "audio_path".into(),
        record.audio_path.to_string_lossy().into_owned().into(),
    );
    obj.insert("locale".into(), record.locale.clone().into());
    obj.insert("speaker_id".into(), record.speaker_id.clone().into());
    obj.insert("phonemes".into(), record.phonemes.join(" ").into());
    obj.insert(
        "alignment_path".into(),
        record.alignment_path.to_string_lossy().into_owned().into(),
    );
    if let Some(d) = &record.dialogue_id {
        obj.insert("dialogue_id".into(), d.clone().into());
    }
    serde_json::Value::Object(obj).to_string()
}

// ── Alignments ────────────────────────────────────────────────────────────

pub fn load_alignment(path: &Path) -> Result<Vec<AlignedToken>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_alignment(&text)
}

/// Parse alignment rows and validate ordering: the first token starts at 0,
/// every token has positive duration, and tokens tile the timeline.
pub fn parse_alignment(text: &str) -> Result<Vec<AlignedToken>> {
    let mut tokens = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (tok, start, end) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
            (Some(t), Some(s), Some(e), None) => (t, s, e),
            _ => {
                return Err(Error::AlignmentRow {
                    line: i + 1,
                    msg: "expected token<TAB>start_s<TAB>end_s".into(),
                })
            }
        };
        let parse_time = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::AlignmentRow {
                    line: i + 1,
                    msg: format!("bad timestamp `{s}`"),
                })
        };
        let start_s = parse_time(start)?;
        let end_s = parse_time(end)?;
        if end_s <= start_s {
            return Err(Error::AlignmentRow {
                line: i + 1,
                msg: format!("end {end_s} does not exceed start {start_s}"),
            });
        }
        tokens.push(AlignedToken::new(tok, start_s, end_s));
    }
    if tokens.is_empty() {
        return Err(Error::EmptyAlignment);
    }
    check_contiguous(&tokens)?;
    Ok(tokens)
}

pub(crate) fn check_contiguous(tokens: &[AlignedToken]) -> Result<()> {
    if tokens[0].start_s.abs() > CONTIGUITY_EPS {
        return Err(Error::AlignmentInvalid {
            msg: format!("first token starts at {}, expected 0", tokens[0].start_s),
        });
    }
    for (i, pair) in tokens.windows(2).enumerate() {
        if (pair[0].end_s - pair[1].start_s).abs() > CONTIGUITY_EPS {
            return Err(Error::AlignmentContiguity {
                index: i,
                end_s: pair[0].end_s,
                next_start_s: pair[1].start_s,
            });
        }
    }
    Ok(())
}

/// Inverse of [`parse_alignment`]; float formatting round-trips exactly.
pub fn serialize_alignment(tokens: &[AlignedToken]) -> String {
    let mut out = String::new();
    for t in tokens {
        out.push_str(&format!("{}\t{}\t{}\n", t.token, t.start_s, t.end_s));
    }
    out
}

// ── Silence capping ───────────────────────────────────────────────────────

/// Trim every silence region down to `max_silence_s`, shifting later
/// timestamps left.  Consecutive silence tokens count as one region; the cut
/// removes the region's tail.  Returns the edited tokens plus the list of
/// cuts on the original timeline (for trimming the audio identically).
pub fn cap_long_silences(
    tokens: &[AlignedToken],
    max_silence_s: f64,
) -> (Vec<AlignedToken>, Vec<SilenceCut>) {
    let mut out: Vec<AlignedToken> = Vec::with_capacity(tokens.len());
    let mut cuts = Vec::new();
    let mut shift = 0.0;
    let mut i = 0;
    while i < tokens.len() {
        if !tokens[i].is_silence() {
            out.push(AlignedToken::new(
                tokens[i].token.clone(),
                tokens[i].start_s - shift,
                tokens[i].end_s - shift,
            ));
            i += 1;
            continue;
        }
        let mut j = i;
        while j < tokens.len() && tokens[j].is_silence() {
            j += 1;
        }
        let region_start = tokens[i].start_s;
        let region_end = tokens[j - 1].end_s;
        let region_dur = region_end - region_start;
        let local_shift = shift;
        if region_dur > max_silence_s {
            let cut_at = region_start + max_silence_s;
            cuts.push(SilenceCut {
                original_start_s: cut_at,
                removed_s: region_dur - max_silence_s,
            });
            for t in &tokens[i..j] {
                if t.start_s >= cut_at {
                    break;
                }
                out.push(AlignedToken::new(
                    t.token.clone(),
                    t.start_s - local_shift,
                    t.end_s.min(cut_at) - local_shift,
                ));
            }
            shift += region_dur - max_silence_s;
        } else {
            for t in &tokens[i..j] {
                out.push(AlignedToken::new(
                    t.token.clone(),
                    t.start_s - local_shift,
                    t.end_s - local_shift,
                ));
            }
        }
        i = j;
    }
    (out, cuts)
}

/// Remove the cut spans from the waveform, matching [`cap_long_silences`].
pub fn cut_waveform(wave: &Waveform, cuts: &[SilenceCut]) -> Waveform {
    let rate = wave.sample_rate_hz as f64;
    let mut samples = wave.samples.clone();
    for cut in cuts.iter().rev() {
        let a = ((cut.original_start_s * rate).round() as usize).min(samples.len());
        let b =
            (((cut.original_start_s + cut.removed_s) * rate).round() as usize).min(samples.len());
        samples.drain(a..b);
    }
    Waveform {
        samples,
        sample_rate_hz: wave.sample_rate_hz,
    }
}

// ── Audio files ───────────────────────────────────────────────────────────

pub fn load_wav(path: &Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path).map_err(|e| Error::Wav {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Wav {
            path: path.to_path_buf(),
            msg: format!("expected mono audio, found {} channels", spec.channels),
        });
    }
    if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Wav {
            path: path.to_path_buf(),
            msg: "expected 16-bit PCM samples".into(),
        });
    }
    let samples: std::result::Result<Vec<i16>, _> = reader.into_samples().collect();
    let samples = samples.map_err(|e| Error::Wav {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    Ok(Waveform {
        samples: samples.iter().map(|&s| s as f64 / 32768.0).collect(),
        sample_rate_hz: spec.sample_rate,
    })
}

pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| Error::Wav {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    for &s in &wave.samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(|e| Error::Wav {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
    }
    writer.finalize().map_err(|e| Error::Wav {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

// ── Features ──────────────────────────────────────────────────────────────

/// Magnitude spectrogram with centered frames and reflection padding.
/// Produces `1 + len/hop` frames of `window/2 + 1` bins each.
pub fn compute_features<F: Scalar>(wave: &Waveform, spec: &FrameSpec) -> Result<FeatureMatrix<F>> {
    spec.validate()?;
    if wave.is_empty() {
        return Err(Error::EmptyAudio);
    }
    if wave.sample_rate_hz != spec.sample_rate_hz {
        return Err(Error::SampleRate {
            expected: spec.sample_rate_hz,
            found: wave.sample_rate_hz,
        });
    }

    let n = wave.len();
    let t_frames = spec.num_frames(n);
    let half = (spec.window / 2) as isize;
    let hann: Vec<f64> = (0..spec.window)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / spec.window as f64).cos())
        .collect();

    let fft = FftPlanner::new().plan_fft_forward(spec.window);
    let mut frames = Array2::<F>::zeros((t_frames, spec.num_bins));
    let mut buf = vec![Complex::new(0.0, 0.0); spec.window];
    for t in 0..t_frames {
        let center = (t * spec.hop) as isize;
        for (i, w) in hann.iter().enumerate() {
            let src = reflect_index(center - half + i as isize, n);
            buf[i] = Complex::new(wave.samples[src] * w, 0.0);
        }
        fft.process(&mut buf);
        for b in 0..spec.num_bins {
            frames[(t, b)] = F::from_f64(buf[b].norm());
        }
    }
    FeatureMatrix::new(frames, spec.clone())
}

/// Fold an out-of-range index back into [0, len) by reflecting at the edges
/// without repeating the edge sample.
fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= len as isize {
        m = period - m;
    }
    m as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn spec() -> FrameSpec {
        FrameSpec::default()
    }

    // ── manifest ──────────────────────────────────────────────────────

    #[test]
    fn manifest_round_trips_two_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        let lines = concat!(
            "{\"utterance_id\":\"utt_0\",\"audio_path\":\"audio/a.wav\",\"locale\":\"en-US\",",
            "\"speaker_id\":\"spk0\",\"phonemes\":\"HH AH L OW\",\"alignment_path\":\"align/a.tsv\",",
            "\"dialogue_id\":\"d0\"}\n",
            "{\"utterance_id\":\"utt_1\",\"audio_path\":\"audio/b.wav\",\"locale\":\"es-ES\",",
            "\"speaker_id\":\"spk1\",\"phonemes\":\"OW L AA\",\"alignment_path\":\"align/b.tsv\"}\n",
        );
        std::fs::write(&path, lines).unwrap();
        let records = load_manifest(&path).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].utterance_id, "utt_0");
        assert_eq!(records[0].audio_path, dir.path().join("audio/a.wav"));
        assert_eq!(records[0].phonemes, vec!["HH", "AH", "L", "OW"]);
        assert_eq!(records[0].dialogue_id.as_deref(), Some("d0"));
        assert_eq!(records[1].locale, "es-ES");
        assert_eq!(records[1].dialogue_id, None);
    }

    #[test]
    fn empty_manifest_is_empty_not_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(load_manifest(&path).unwrap().is_empty());
    }

    #[test]
    fn missing_field_names_field_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        std::fs::write(
            &path,
            "{\"utterance_id\":\"u0\",\"audio_path\":\"a.wav\",\"locale\":\"en-US\",\
             \"speaker_id\":\"s\",\"phonemes\":\"AA\",\"alignment_path\":\"a.tsv\"}\n\
             {\"utterance_id\":\"u1\",\"audio_path\":\"b.wav\",\"locale\":\"en-US\",\
             \"speaker_id\":\"s\",\"phonemes\":\"AA\"}\n",
        )
        .unwrap();
        match load_manifest(&path) {
            Err(Error::ManifestSchema { line, field }) => {
                assert_eq!(line, 2);
                assert_eq!(field, "alignment_path");
            }
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_utterance_id_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        let row = "{\"utterance_id\":\"u0\",\"audio_path\":\"a.wav\",\"locale\":\"en-US\",\
                   \"speaker_id\":\"s\",\"phonemes\":\"AA\",\"alignment_path\":\"a.tsv\"}\n";
        std::fs::write(&path, format!("{row}{row}")).unwrap();
        assert!(matches!(
            load_manifest(&path),
            Err(Error::DuplicateUtterance { line: 2, .. })
        ));
    }

    // ── alignment ─────────────────────────────────────────────────────

    #[test]
    fn alignment_parses_tokens_and_silences() {
        let tokens = parse_alignment("sil\t0\t0.12\nHH\t0.12\t0.2\nAH\t0.2\t0.31\n").unwrap();
        assert_eq!(tokens.len(), 3);
        assert!(tokens[0].is_silence());
        assert_eq!(tokens[1].token, "HH");
        assert!((tokens[2].end_s - 0.31).abs() < 1e-12);
    }

    #[test]
    fn alignment_gap_is_a_contiguity_error() {
        let r = parse_alignment("HH\t0\t0.1\nAH\t0.2\t0.3\n");
        match r {
            Err(Error::AlignmentContiguity {
                index,
                end_s,
                next_start_s,
            }) => {
                assert_eq!(index, 0);
                assert_eq!(end_s, 0.1);
                assert_eq!(next_start_s, 0.2);
            }
            other => panic!("expected contiguity error, got {other:?}"),
        }
    }

    #[test]
    fn empty_alignment_is_an_error() {
        assert!(matches!(
            parse_alignment("\n\n"),
            Err(Error::EmptyAlignment)
        ));
    }

    #[test]
    fn alignment_must_start_at_zero() {
        assert!(matches!(
            parse_alignment("HH\t0.5\t0.9\n"),
            Err(Error::AlignmentInvalid { .. })
        ));
    }

    #[test]
    fn alignment_round_trips_through_serialization() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        for _ in 0..200 {
            let mut tokens = Vec::new();
            let mut t = 0.0;
            for k in 0..rng.random_range(1..12) {
                let d = rng.random_range(0.01..0.7);
                let tok = if rng.random_bool(0.3) {
                    "sil".to_string()
                } else {
                    format!("P{k}")
                };
                tokens.push(AlignedToken::new(tok, t, t + d));
                t += d;
            }
            let parsed = parse_alignment(&serialize_alignment(&tokens)).unwrap();
            assert_eq!(parsed, tokens);
        }
    }

    // ── silence capping ───────────────────────────────────────────────

    #[test]
    fn three_second_silence_is_capped_to_two() {
        let tokens = vec![
            AlignedToken::new("A", 0.0, 1.0),
            AlignedToken::new("sil", 1.0, 4.0),
            AlignedToken::new("B", 4.0, 4.5),
        ];
        let (capped, cuts) = cap_long_silences(&tokens, 2.0);
        assert_eq!(capped[1], AlignedToken::new("sil", 1.0, 3.0));
        assert_eq!(capped[2], AlignedToken::new("B", 3.0, 3.5));
        assert_eq!(
            cuts,
            vec![SilenceCut {
                original_start_s: 3.0,
                removed_s: 1.0
            }]
        );
    }

    #[test]
    fn short_silences_are_untouched() {
        let tokens = vec![
            AlignedToken::new("A", 0.0, 1.0),
            AlignedToken::new("sil", 1.0, 2.5),
            AlignedToken::new("B", 2.5, 3.0),
        ];
        let (capped, cuts) = cap_long_silences(&tokens, 2.0);
        assert_eq!(capped, tokens);
        assert!(cuts.is_empty());
    }

    #[test]
    fn cumulative_shift_covers_multiple_regions() {
        let tokens = vec![
            AlignedToken::new("A", 0.0, 1.0),
            AlignedToken::new("sil", 1.0, 3.5),
            AlignedToken::new("B", 3.5, 4.0),
            AlignedToken::new("sil", 4.0, 6.5),
            AlignedToken::new("C", 6.5, 7.0),
        ];
        let (capped, cuts) = cap_long_silences(&tokens, 2.0);
        assert_eq!(cuts.len(), 2);
        let last = capped.last().unwrap();
        assert!((last.start_s - 5.5).abs() < 1e-12);
        assert!((last.end_s - 6.0).abs() < 1e-12);
        // Total shift is 0.5 + 0.5 = 1.0 seconds.
        assert!((tokens.last().unwrap().end_s - last.end_s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn capping_preserves_speech_and_contiguity_on_random_alignments() {
        let mut rng = ChaCha20Rng::seed_from_u64(33);
        for _ in 0..300 {
            let mut tokens = Vec::new();
            let mut t = 0.0;
            for k in 0..rng.random_range(2..10) {
                let d = if rng.random_bool(0.4) {
                    rng.random_range(0.05..4.0)
                } else {
                    rng.random_range(0.02..0.4)
                };
                let tok = if rng.random_bool(0.45) {
                    "sil".to_string()
                } else {
                    format!("P{k}")
                };
                tokens.push(AlignedToken::new(tok, t, t + d));
                t += d;
            }
            let (capped, _) = cap_long_silences(&tokens, 2.0);
            check_contiguous(&capped).unwrap();
            let speech_before: f64 = tokens
                .iter()
                .filter(|t| !t.is_silence())
                .map(|t| t.duration_s())
                .sum();
            let speech_after: f64 = capped
                .iter()
                .filter(|t| !t.is_silence())
                .map(|t| t.duration_s())
                .sum();
            assert!((speech_before - speech_after).abs() < 1e-9);
            // No merged silence region may exceed the cap.
            let mut i = 0;
            while i < capped.len() {
                if capped[i].is_silence() {
                    let mut j = i;
                    while j < capped.len() && capped[j].is_silence() {
                        j += 1;
                    }
                    let dur = capped[j - 1].end_s - capped[i].start_s;
                    assert!(dur <= 2.0 + 1e-9, "silence region of {dur}s survived");
                    i = j;
                } else {
                    i += 1;
                }
            }
        }
    }

    #[test]
    fn waveform_cut_matches_alignment_cut() {
        let rate = 24_000u32;
        let wave = Waveform {
            samples: (0..rate as usize * 5)
                .map(|i| (i % 7) as f64 * 1e-3)
                .collect(),
            sample_rate_hz: rate,
        };
        let tokens = vec![
            AlignedToken::new("A", 0.0, 1.0),
            AlignedToken::new("sil", 1.0, 4.0),
            AlignedToken::new("B", 4.0, 5.0),
        ];
        let (capped, cuts) = cap_long_silences(&tokens, 2.0);
        let cut = cut_waveform(&wave, &cuts);
        let expect_len = (capped.last().unwrap().end_s * rate as f64).round() as usize;
        assert_eq!(cut.len(), expect_len);
        // The retained trailing speech is the original one, shifted.
        assert_eq!(
            &cut.samples[cut.len() - 100..],
            &wave.samples[wave.len() - 100..]
        );
    }

    // ── frame math & features ─────────────────────────────────────────

    #[test]
    fn frame_count_formula() {
        assert_eq!(spec().num_frames(24_000), 94);
    }

    #[test]
    fn time_to_frame_is_monotone() {
        let s = spec();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut times: Vec<f64> = (0..500).map(|_| rng.random_range(0.0..30.0)).collect();
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let frames: Vec<usize> = times.iter().map(|&t| s.frame_for_time(t)).collect();
        assert!(frames.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn zero_waveform_gives_zero_features() {
        let wave = Waveform {
            samples: vec![0.0; 4096],
            sample_rate_hz: 24_000,
        };
        let feats: FeatureMatrix<f64> = compute_features(&wave, &spec()).unwrap();
        assert!(feats.frames().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bin_centered_sinusoid_dominates_its_bin() {
        // Bin 64 of a 1024-point window at 24 kHz is exactly 1500 Hz.
        let rate = 24_000usize;
        let freq = 1500.0;
        let wave = Waveform {
            samples: (0..rate)
                .map(|n| 0.5 * (2.0 * std::f64::consts::PI * freq * n as f64 / rate as f64).sin())
                .collect(),
            sample_rate_hz: rate as u32,
        };
        let feats: FeatureMatrix<f64> = compute_features(&wave, &spec()).unwrap();
        assert_eq!(feats.num_frames(), 94);
        // Edge frames see reflection padding, which bends the tone into
        // sin(w|n|); only windows fully inside the signal stay pure.
        let s = spec();
        let first_inside = s.window / 2 / s.hop + 1;
        let last_inside = (wave.len() - s.window / 2) / s.hop;
        for (t, row) in feats
            .frames()
            .rows()
            .into_iter()
            .enumerate()
            .take(last_inside + 1)
            .skip(first_inside)
        {
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, 64, "frame {t} peaked at bin {argmax}");
        }
    }

    #[test]
    fn fft_frame_matches_naive_dft() {
        let s = spec();
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let wave = Waveform {
            samples: (0..8192).map(|_| rng.random_range(-0.8..0.8)).collect(),
            sample_rate_hz: 24_000,
        };
        let feats: FeatureMatrix<f64> = compute_features(&wave, &s).unwrap();

        // Recompute one interior frame with a direct O(n^2) transform.
        let t = 10usize;
        let center = (t * s.hop) as isize;
        let half = (s.window / 2) as isize;
        let windowed: Vec<f64> = (0..s.window)
            .map(|i| {
                let w = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / s.window as f64).cos();
                wave.samples[reflect_index(center - half + i as isize, wave.len())] * w
            })
            .collect();
        for b in 0..s.num_bins {
            let (mut re, mut im) = (0.0f64, 0.0f64);
            for (nn, &x) in windowed.iter().enumerate() {
                let ang = -2.0 * std::f64::consts::PI * b as f64 * nn as f64 / s.window as f64;
                re += x * ang.cos();
                im += x * ang.sin();
            }
            let mag = (re * re + im * im).sqrt();
            assert!(
                (mag - feats.frames()[(t, b)]).abs() < 1e-8,
                "bin {b}: naive {mag} vs fft {}",
                feats.frames()[(t, b)]
            );
        }
    }

    #[test]
    fn features_are_deterministic() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let wave = Waveform {
            samples: (0..6000).map(|_| rng.random_range(-1.0..1.0)).collect(),
            sample_rate_hz: 24_000,
        };
        let a: FeatureMatrix<f32> = compute_features(&wave, &spec()).unwrap();
        let b: FeatureMatrix<f32> = compute_features(&wave, &spec()).unwrap();
        assert_eq!(a.frames(), b.frames());
    }

    #[test]
    fn sample_rate_mismatch_is_an_error() {
        let wave = Waveform {
            samples: vec![0.1; 100],
            sample_rate_hz: 16_000,
        };
        assert!(matches!(
            compute_features::<f64>(&wave, &spec()),
            Err(Error::SampleRate {
                expected: 24_000,
                found: 16_000
            })
        ));
    }

    #[test]
    fn empty_audio_is_an_error() {
        let wave = Waveform {
            samples: vec![],
            sample_rate_hz: 24_000,
        };
        assert!(matches!(
            compute_features::<f64>(&wave, &spec()),
            Err(Error::EmptyAudio)
        ));
    }

    #[test]
    fn wav_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let wave = Waveform {
            samples: (0..2000).map(|i| (i as f64 * 0.01).sin() * 0.5).collect(),
            sample_rate_hz: 24_000,
        };
        write_wav(&path, &wave).unwrap();
        let back = load_wav(&path).unwrap();
        assert_eq!(back.sample_rate_hz, 24_000);
        assert_eq!(back.len(), wave.len());
        for (a, b) in back.samples.iter().zip(&wave.samples) {
            assert!((a - b).abs() <= 1.0 / 32768.0);
        }
    }
}
