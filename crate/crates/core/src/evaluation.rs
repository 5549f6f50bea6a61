//! Objective metrics: word error rate against reference transcripts and a
//! Fréchet distance between feature-vector populations, paired by utterance.
//!
//! Audio-to-text and audio-to-vector models are plug-ins behind the
//! [`Transcriber`] and [`FeatureEmbedder`] traits; the built-in
//! [`SpectralSummaryEmbedder`] is a deterministic stand-in good enough for
//! regression testing, not a perceptual model.

use crate::corpus::Waveform;
use crate::{Error, Result};
use ndarray::{Array1, Array2};
use std::collections::BTreeMap;

/// Reference and hypothesis word sequences for one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct TranscriptPair {
    pub utterance_id: String,
    pub reference_words: Vec<String>,
    pub hypothesis_words: Vec<String>,
}

/// Edit counts for one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct WerDetail {
    pub utterance_id: String,
    pub edits: usize,
    pub reference_len: usize,
}

/// Corpus-level WER plus the per-pair breakdown.
#[derive(Clone, Debug, PartialEq)]
pub struct WerReport {
    pub corpus_wer: f64,
    pub total_edits: usize,
    pub total_reference_words: usize,
    pub per_pair: Vec<WerDetail>,
}

/// Minimal number of substitutions, insertions, and deletions turning
/// `reference` into `hypothesis`.
pub fn edit_distance<T: AsRef<str>>(reference: &[T], hypothesis: &[T]) -> usize {
    let n = reference.len();
    let m = hypothesis.len();
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut cur = vec![0usize; m + 1];
    for i in 1..=n {
        cur[0] = i;
        for j in 1..=m {
            let sub_cost = usize::from(reference[i - 1].as_ref() != hypothesis[j - 1].as_ref());
            cur[j] = (prev[j - 1] + sub_cost)
                .min(prev[j] + 1)
                .min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

/// Corpus WER: total edits over total reference words.
pub fn word_error_rate(pairs: &[TranscriptPair]) -> Result<WerReport> {
    if pairs.is_empty() {
        return Err(Error::shape("no transcript pairs to score"));
    }
    let mut per_pair = Vec::with_capacity(pairs.len());
    let mut total_edits = 0;
    let mut total_words = 0;
    for pair in pairs {
        if pair.reference_words.is_empty() {
            return Err(Error::EmptyReference {
                id: pair.utterance_id.clone(),
            });
        }
        let edits = edit_distance(&pair.reference_words, &pair.hypothesis_words);
        total_edits += edits;
        total_words += pair.reference_words.len();
        per_pair.push(WerDetail {
            utterance_id: pair.utterance_id.clone(),
            edits,
            reference_len: pair.reference_words.len(),
        });
    }
    Ok(WerReport {
        corpus_wer: total_edits as f64 / total_words as f64,
        total_edits,
        total_reference_words: total_words,
        per_pair,
    })
}

/// Gaussian fit to a set of feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSetSummary {
    pub mean: Array1<f64>,
    pub covariance: Array2<f64>,
    pub count: usize,
}

/// Fit mean and unbiased covariance to the vectors.
pub fn summarize(vectors: &[Array1<f64>]) -> Result<FeatureSetSummary> {
    if vectors.len() < 2 {
        return Err(Error::TooFewSamples {
            count: vectors.len(),
        });
    }
    let dim = vectors[0].len();
    for v in vectors {
        if v.len() != dim {
            return Err(Error::CountMismatch {
                what: "feature vector dims",
                left: v.len(),
                right: dim,
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                context: "feature vector".into(),
            });
        }
    }
    let n = vectors.len() as f64;
    let mut mean = Array1::zeros(dim);
    for v in vectors {
        mean += v;
    }
    mean /= n;
    let mut cov = Array2::zeros((dim, dim));
    for v in vectors {
        let d = v - &mean;
        for i in 0..dim {
            for j in 0..dim {
                cov[(i, j)] += d[i] * d[j];
            }
        }
    }
    cov /= n - 1.0;
    Ok(FeatureSetSummary {
        mean,
        covariance: cov,
        count: vectors.len(),
    })
}

const EIGEN_CLIP_TOL: f64 = 1e-10;

// Cyclic Jacobi eigendecomposition of a symmetric matrix.  Returns
// eigenvalues and a matrix whose columns are the eigenvectors, so that
// m = v * diag(w) * v^T.
fn jacobi_eigh(m: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = m.nrows();
    debug_assert_eq!(n, m.ncols());
    let mut a = m.clone();
    let mut v = Array2::eye(n);
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|p| (p + 1..n).map(move |q| (p, q)))
            .map(|(p, q)| a[(p, q)] * a[(p, q)])
            .sum::<f64>()
            .sqrt();
        if off < 1e-14 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[(p, q)].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let w = Array1::from_shape_fn(n, |i| a[(i, i)]);
    (w, v)
}

// Square root of a positive semidefinite symmetric matrix.  Eigenvalues in
// [-EIGEN_CLIP_TOL, 0) count as rounding noise and clip to zero; anything
// more negative is a real failure.
fn sqrt_psd(m: &Array2<f64>) -> Result<Array2<f64>> {
    let sym = (m + &m.t()) * 0.5;
    let (w, v) = jacobi_eigh(&sym);
    let mut clipped = Array1::zeros(w.len());
    for (i, &x) in w.iter().enumerate() {
        if x < -EIGEN_CLIP_TOL {
            return Err(Error::NotPositiveSemidefinite { min_eigenvalue: x });
        }
        clipped[i] = x.max(0.0).sqrt();
    }
    // v * diag(sqrt(w)) * v^T
    let mut scaled = v.clone();
    for (j, &s) in clipped.iter().enumerate() {
        for i in 0..scaled.nrows() {
            scaled[(i, j)] *= s;
        }
    }
    Ok(scaled.dot(&v.t()))
}

fn trace(m: &Array2<f64>) -> f64 {
    (0..m.nrows()).map(|i| m[(i, i)]).sum()
}

/// Fréchet distance between two Gaussian summaries:
/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a^{1/2} S_b S_a^{1/2})^{1/2})`.
pub fn frechet_distance(a: &FeatureSetSummary, b: &FeatureSetSummary) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::CountMismatch {
            what: "summary dims",
            left: a.mean.len(),
            right: b.mean.len(),
        });
    }
    let root_a = sqrt_psd(&a.covariance)?;
    let inner = root_a.dot(&b.covariance).dot(&root_a);
    let cross = sqrt_psd(&inner)?;
    let diff = &a.mean - &b.mean;
    let d = diff.dot(&diff) + trace(&a.covariance) + trace(&b.covariance) - 2.0 * trace(&cross);
    Ok(d.max(0.0))
}

/// Fréchet distance between generated and reference vectors paired by
/// utterance id.  Both sides must cover exactly the same ids.
pub fn cfdsd(
    generated: &[(String, Array1<f64>)],
    reference: &[(String, Array1<f64>)],
) -> Result<f64> {
    let index =
        |side: &[(String, Array1<f64>)], name: &str| -> Result<BTreeMap<String, Array1<f64>>> {
            let mut map = BTreeMap::new();
            for (id, v) in side {
                if map.insert(id.clone(), v.clone()).is_some() {
                    return Err(Error::config(format!(
                        "duplicate utterance_id {id:?} in {name} set"
                    )));
                }
            }
            Ok(map)
        };
    let gen = index(generated, "generated")?;
    let refs = index(reference, "reference")?;
    let only_generated: Vec<String> = gen
        .keys()
        .filter(|k| !refs.contains_key(*k))
        .cloned()
        .collect();
    let only_reference: Vec<String> = refs
        .keys()
        .filter(|k| !gen.contains_key(*k))
        .cloned()
        .collect();
    if !only_generated.is_empty() || !only_reference.is_empty() {
        return Err(Error::PairingMismatch {
            only_generated,
            only_reference,
        });
    }
    let gen_vecs: Vec<Array1<f64>> = gen.values().cloned().collect();
    let ref_vecs: Vec<Array1<f64>> = refs.values().cloned().collect();
    let a = summarize(&gen_vecs)?;
    let b = summarize(&ref_vecs)?;
    frechet_distance(&a, &b)
}

/// Turns audio into a word sequence.  No implementation ships; evaluation
/// accepts precomputed transcripts instead.
pub trait Transcriber {
    fn transcribe(&self, audio: &Waveform) -> Result<Vec<String>>;
}

/// Turns a feature matrix into one fixed-length vector.
pub trait FeatureEmbedder {
    fn embed(&self, features: &Array2<f64>) -> Result<Array1<f64>>;
    fn dim(&self) -> usize;
}

/// Deterministic embedding: per frequency band, the mean and standard
/// deviation of band energy over time.
pub struct SpectralSummaryEmbedder {
    pub bands: usize,
}

impl Default for SpectralSummaryEmbedder {
    fn default() -> Self {
        SpectralSummaryEmbedder { bands: 8 }
    }
}

impl FeatureEmbedder for SpectralSummaryEmbedder {
    fn embed(&self, features: &Array2<f64>) -> Result<Array1<f64>> {
        if features.nrows() == 0 || features.ncols() == 0 {
            return Err(Error::shape("cannot embed an empty feature matrix"));
        }
        if self.bands == 0 || self.bands > features.ncols() {
            return Err(Error::config(format!(
                "band count {} does not fit {} bins",
                self.bands,
                features.ncols()
            )));
        }
        let t = features.nrows();
        let bins = features.ncols();
        let mut out = Array1::zeros(2 * self.bands);
        for band in 0..self.bands {
            let lo = band * bins / self.bands;
            let hi = ((band + 1) * bins / self.bands).max(lo + 1);
            let mut per_frame = Vec::with_capacity(t);
            for r in 0..t {
                let mut acc = 0.0;
                for c in lo..hi {
                    acc += features[(r, c)];
                }
                per_frame.push(acc / (hi - lo) as f64);
            }
            let mean: f64 = per_frame.iter().sum::<f64>() / t as f64;
            let var: f64 = per_frame
                .iter()
                .map(|x| (x - mean) * (x - mean))
                .sum::<f64>()
                / t as f64;
            out[band] = mean;
            out[self.bands + band] = var.sqrt();
        }
        Ok(out)
    }

    fn dim(&self) -> usize {
        2 * self.bands
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    fn pair(id: &str, reference: &str, hypothesis: &str) -> TranscriptPair {
        TranscriptPair {
            utterance_id: id.into(),
            reference_words: words(reference),
            hypothesis_words: words(hypothesis),
        }
    }

    #[test]
    fn identical_transcripts_score_zero() {
        let report = word_error_rate(&[pair("u1", "a b c", "a b c")]).unwrap();
        assert_eq!(report.corpus_wer, 0.0);
        assert_eq!(report.per_pair[0].edits, 0);
    }

    #[test]
    fn one_substitution_in_four_words_is_a_quarter() {
        let report = word_error_rate(&[pair("u1", "a b c d", "a x c d")]).unwrap();
        assert_eq!(report.corpus_wer, 0.25);
    }

    #[test]
    fn empty_hypothesis_deletes_everything() {
        let report = word_error_rate(&[pair("u1", "a b c d", "")]).unwrap();
        assert_eq!(report.corpus_wer, 1.0);
        assert_eq!(report.total_edits, 4);
    }

    #[test]
    fn empty_reference_is_a_pair_error() {
        let err = word_error_rate(&[pair("u1", "", "a")]);
        assert!(matches!(err, Err(Error::EmptyReference { .. })));
        assert!(word_error_rate(&[]).is_err());
    }

    #[test]
    fn corpus_wer_pools_edits_not_rates() {
        // 1 edit over 1 word plus 0 edits over 9 words: pooled 0.1, not 0.5.
        let report = word_error_rate(&[
            pair("a", "x", "y"),
            pair("b", "a b c d e f g h i", "a b c d e f g h i"),
        ])
        .unwrap();
        assert!((report.corpus_wer - 0.1).abs() < 1e-15);
    }

    // Exhaustive minimal-edit search by plain recursion, no memoization.
    fn oracle_distance(a: &[&str], b: &[&str]) -> usize {
        match (a.split_first(), b.split_first()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((ha, ta)), Some((hb, tb))) => {
                let sub = oracle_distance(ta, tb) + usize::from(ha != hb);
                let del = oracle_distance(ta, b) + 1;
                let ins = oracle_distance(a, tb) + 1;
                sub.min(del).min(ins)
            }
        }
    }

    #[test]
    fn edit_distance_matches_exhaustive_search() {
        // Every word-sequence pair over {a, b} up to length 3.
        let alphabet = ["a", "b"];
        let mut sequences: Vec<Vec<&str>> = vec![vec![]];
        for len in 1..=3 {
            let mut next = Vec::new();
            for seq in sequences.iter().filter(|s| s.len() == len - 1) {
                for w in alphabet {
                    let mut s = seq.clone();
                    s.push(w);
                    next.push(s);
                }
            }
            sequences.extend(next);
        }
        for x in &sequences {
            for y in &sequences {
                assert_eq!(
                    edit_distance(x, y),
                    oracle_distance(x, y),
                    "sequences {x:?} vs {y:?}"
                );
            }
        }
        // Random pairs over a 3-word alphabet up to length 5.
        let mut rng = ChaCha20Rng::seed_from_u64(50);
        let alphabet = ["a", "b", "c"];
        for _ in 0..300 {
            let draw = |rng: &mut ChaCha20Rng| -> Vec<&str> {
                let len = rng.random_range(0..=5);
                (0..len).map(|_| alphabet[rng.random_range(0..3)]).collect()
            };
            let x = draw(&mut rng);
            let y = draw(&mut rng);
            assert_eq!(edit_distance(&x, &y), oracle_distance(&x, &y));
        }
    }

    fn summary_1d(mean: f64, var: f64) -> FeatureSetSummary {
        FeatureSetSummary {
            mean: arr1(&[mean]),
            covariance: Array2::from_elem((1, 1), var),
            count: 10,
        }
    }

    #[test]
    fn one_dim_closed_form_mean_shift() {
        let d = frechet_distance(&summary_1d(0.0, 1.0), &summary_1d(1.0, 1.0)).unwrap();
        assert!((d - 1.0).abs() < 1e-8);
    }

    #[test]
    fn one_dim_closed_form_spread_change() {
        // Equal means, std 1 vs 2: (1 - 2)^2 = 1.
        let d = frechet_distance(&summary_1d(0.5, 1.0), &summary_1d(0.5, 4.0)).unwrap();
        assert!((d - 1.0).abs() < 1e-8);
    }

    fn random_cloud(rng: &mut ChaCha20Rng, n: usize, dim: usize, shift: f64) -> Vec<Array1<f64>> {
        (0..n)
            .map(|_| Array1::from_shape_fn(dim, |_| rng.random_range(-1.0..1.0) + shift))
            .collect()
    }

    #[test]
    fn identical_summaries_have_zero_distance() {
        let mut rng = ChaCha20Rng::seed_from_u64(51);
        let cloud = random_cloud(&mut rng, 40, 5, 0.0);
        let s = summarize(&cloud).unwrap();
        let d = frechet_distance(&s, &s).unwrap();
        assert!(d.abs() < 1e-8, "distance {d}");
    }

    #[test]
    fn distance_is_symmetric_and_nonnegative() {
        let mut rng = ChaCha20Rng::seed_from_u64(52);
        for _ in 0..20 {
            let a = summarize(&random_cloud(&mut rng, 30, 4, 0.0)).unwrap();
            let b = summarize(&random_cloud(&mut rng, 30, 4, 0.7)).unwrap();
            let ab = frechet_distance(&a, &b).unwrap();
            let ba = frechet_distance(&b, &a).unwrap();
            assert!(ab >= 0.0);
            assert!((ab - ba).abs() < 1e-8 * ab.max(1.0));
        }
    }

    #[test]
    fn diagonal_case_matches_the_per_axis_closed_form() {
        let a = FeatureSetSummary {
            mean: arr1(&[0.0, 1.0, -2.0]),
            covariance: Array2::from_diag(&arr1(&[1.0, 4.0, 0.25])),
            count: 10,
        };
        let b = FeatureSetSummary {
            mean: arr1(&[1.0, 1.0, 0.0]),
            covariance: Array2::from_diag(&arr1(&[4.0, 1.0, 1.0])),
            count: 10,
        };
        let want: f64 = (0..3)
            .map(|i| {
                let dm = a.mean[i] - b.mean[i];
                let ds = a.covariance[(i, i)].sqrt() - b.covariance[(i, i)].sqrt();
                dm * dm + ds * ds
            })
            .sum();
        let got = frechet_distance(&a, &b).unwrap();
        assert!((got - want).abs() < 1e-8, "got {got}, want {want}");
    }

    // Rotate a summary by an orthogonal matrix.
    fn rotate(s: &FeatureSetSummary, r: &Array2<f64>) -> FeatureSetSummary {
        FeatureSetSummary {
            mean: r.dot(&s.mean),
            covariance: r.dot(&s.covariance).dot(&r.t()),
            count: s.count,
        }
    }

    #[test]
    fn distance_is_rotation_invariant() {
        let mut rng = ChaCha20Rng::seed_from_u64(53);
        let a = summarize(&random_cloud(&mut rng, 50, 3, 0.0)).unwrap();
        let b = summarize(&random_cloud(&mut rng, 50, 3, 0.4)).unwrap();
        // Givens rotation in the (0, 2) plane.
        let angle: f64 = 0.83;
        let mut r = Array2::eye(3);
        r[(0, 0)] = angle.cos();
        r[(0, 2)] = -angle.sin();
        r[(2, 0)] = angle.sin();
        r[(2, 2)] = angle.cos();
        let d = frechet_distance(&a, &b).unwrap();
        let dr = frechet_distance(&rotate(&a, &r), &rotate(&b, &r)).unwrap();
        assert!((d - dr).abs() < 1e-8, "{d} vs {dr}");
    }

    #[test]
    fn eigensolver_reconstructs_symmetric_matrices() {
        let mut rng = ChaCha20Rng::seed_from_u64(54);
        for _ in 0..20 {
            let raw = Array2::from_shape_fn((5, 5), |_| rng.random_range(-1.0..1.0));
            let sym = (&raw + &raw.t()) * 0.5;
            let (w, v) = jacobi_eigh(&sym);
            let mut scaled = v.clone();
            for (j, &s) in w.iter().enumerate() {
                for i in 0..5 {
                    scaled[(i, j)] *= s;
                }
            }
            let back = scaled.dot(&v.t());
            for (x, y) in back.iter().zip(sym.iter()) {
                assert!((x - y).abs() < 1e-10);
            }
            let gram = v.t().dot(&v);
            for i in 0..5 {
                for j in 0..5 {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((gram[(i, j)] - want).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn matrix_root_squares_back() {
        let mut rng = ChaCha20Rng::seed_from_u64(55);
        for _ in 0..10 {
            let raw = Array2::from_shape_fn((4, 4), |_| rng.random_range(-1.0..1.0));
            let psd = raw.dot(&raw.t());
            let root = sqrt_psd(&psd).unwrap();
            let back = root.dot(&root);
            for (x, y) in back.iter().zip(psd.iter()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn negative_eigenvalues_beyond_tolerance_error_out() {
        let bad = Array2::from_diag(&arr1(&[1.0, -0.5]));
        match sqrt_psd(&bad) {
            Err(Error::NotPositiveSemidefinite { min_eigenvalue }) => {
                assert!((min_eigenvalue + 0.5).abs() < 1e-12);
            }
            other => panic!("expected PSD error, got {other:?}"),
        }
        // Rounding-level negatives clip to zero instead.
        let near = Array2::from_diag(&arr1(&[1.0, -5e-11]));
        let root = sqrt_psd(&near).unwrap();
        assert_eq!(root[(1, 1)], 0.0);
    }

    #[test]
    fn covariance_is_unbiased() {
        let s = summarize(&[arr1(&[0.0]), arr1(&[2.0])]).unwrap();
        assert_eq!(s.mean[0], 1.0);
        assert_eq!(s.covariance[(0, 0)], 2.0);
        assert!(matches!(
            summarize(&[arr1(&[0.0])]),
            Err(Error::TooFewSamples { count: 1 })
        ));
    }

    fn id_cloud(rng: &mut ChaCha20Rng, n: usize, shift: f64) -> Vec<(String, Array1<f64>)> {
        (0..n)
            .map(|i| {
                (
                    format!("u{i}"),
                    Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0) + shift),
                )
            })
            .collect()
    }

    #[test]
    fn identical_sets_score_zero() {
        let mut rng = ChaCha20Rng::seed_from_u64(56);
        let set = id_cloud(&mut rng, 20, 0.0);
        let d = cfdsd(&set, &set).unwrap();
        assert!(d.abs() < 1e-8);
    }

    #[test]
    fn supply_order_does_not_matter() {
        let mut rng = ChaCha20Rng::seed_from_u64(57);
        let gen = id_cloud(&mut rng, 20, 0.3);
        let refs = id_cloud(&mut rng, 20, 0.0);
        let d1 = cfdsd(&gen, &refs).unwrap();
        let mut gen_rev = gen.clone();
        gen_rev.reverse();
        let mut refs_rev = refs.clone();
        refs_rev.reverse();
        let d2 = cfdsd(&gen_rev, &refs_rev).unwrap();
        assert_eq!(d1, d2);
    }

    #[test]
    fn mismatched_id_sets_list_the_difference() {
        let mut rng = ChaCha20Rng::seed_from_u64(58);
        let gen = id_cloud(&mut rng, 4, 0.0);
        let mut refs = id_cloud(&mut rng, 4, 0.0);
        refs[2].0 = "other".into();
        match cfdsd(&gen, &refs) {
            Err(Error::PairingMismatch {
                only_generated,
                only_reference,
            }) => {
                assert_eq!(only_generated, vec!["u2".to_string()]);
                assert_eq!(only_reference, vec!["other".to_string()]);
            }
            other => panic!("expected pairing mismatch, got {other:?}"),
        }
    }

    #[test]
    fn growing_mean_shift_grows_the_distance() {
        let mut rng = ChaCha20Rng::seed_from_u64(59);
        let refs = id_cloud(&mut rng, 40, 0.0);
        let mut last = -1.0;
        for shift in [0.5, 1.5, 3.0] {
            let gen: Vec<(String, Array1<f64>)> =
                refs.iter().map(|(id, v)| (id.clone(), v + shift)).collect();
            let d = cfdsd(&gen, &refs).unwrap();
            assert!(d > last, "shift {shift}: {d} !> {last}");
            last = d;
        }
    }

    #[test]
    fn spectral_embedder_is_deterministic_and_content_sensitive() {
        let e = SpectralSummaryEmbedder { bands: 4 };
        let a = Array2::from_shape_fn((30, 16), |(r, c)| ((r + c) % 5) as f64);
        let b = Array2::from_shape_fn((30, 16), |(r, c)| ((r * c) % 7) as f64);
        let va = e.embed(&a).unwrap();
        assert_eq!(va.len(), e.dim());
        assert_eq!(va, e.embed(&a).unwrap());
        assert_ne!(va, e.embed(&b).unwrap());
        assert!(e.embed(&Array2::zeros((0, 4))).is_err());
    }
}
