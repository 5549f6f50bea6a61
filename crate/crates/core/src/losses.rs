//! Training losses.
//!
//! The phrase regularizer averages per-phrase KLD terms weighted by
//! `exp(-beta * L_k)` where `L_k` is the phrase's phoneme count, so shorter
//! phrases keep more weight and are pulled harder toward the standard-normal
//! prior.  The total objective is the feature reconstruction term plus one
//! weighted regularizer per reference stream.

use crate::autodiff::{Tape, Var};
use crate::encoder::{GaussianPosterior, PosteriorVars};
use crate::{Error, Result, Scalar};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Scales for the two KLD terms and their length-weighting exponents.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha_prosody: f64,
    pub alpha_noise: f64,
    pub beta_prosody: f64,
    pub beta_noise: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha_prosody: 0.04,
            alpha_noise: 0.04,
            beta_prosody: 0.08,
            beta_noise: 0.08,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha_prosody", self.alpha_prosody),
            ("alpha_noise", self.alpha_noise),
            ("beta_prosody", self.beta_prosody),
            ("beta_noise", self.beta_noise),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!(
                    "loss weight {name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-term loss values for one step.  `total` is always the weighted sum of
/// the other three fields.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub prosody_kld: f64,
    pub noise_kld: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(
        reconstruction: f64,
        prosody_kld: f64,
        noise_kld: f64,
        weights: &LossWeights,
    ) -> Self {
        LossBreakdown {
            reconstruction,
            prosody_kld,
            noise_kld,
            total: reconstruction
                + weights.alpha_prosody * prosody_kld
                + weights.alpha_noise * noise_kld,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.reconstruction.is_finite()
            && self.prosody_kld.is_finite()
            && self.noise_kld.is_finite()
            && self.total.is_finite()
    }
}

/// KLD between a diagonal Gaussian and the standard normal, summed over
/// dimensions: `0.5 * sum(mean^2 + exp(log_var) - log_var - 1)`.
pub fn kld_diag_standard<F: Scalar>(posterior: &GaussianPosterior<F>) -> Result<F> {
    let mut acc = F::zero();
    for (&m, &lv) in posterior.mean.iter().zip(posterior.log_variance.iter()) {
        if !m.is_finite() || !lv.is_finite() {
            return Err(Error::NonFinite {
                context: "posterior passed to kld_diag_standard".into(),
            });
        }
        acc = acc + m * m + lv.exp() - lv - F::one();
    }
    Ok(F::from_f64(0.5) * acc)
}

/// Length-weighted mean of per-phrase KLD terms:
/// `(1/K) * sum_k exp(-beta * L_k) * KLD_k`.
pub fn length_weighted_kld<F: Scalar>(
    posteriors: &[GaussianPosterior<F>],
    lengths: &[usize],
    beta: f64,
) -> Result<F> {
    if posteriors.is_empty() {
        return Err(Error::shape("length_weighted_kld on an empty phrase list"));
    }
    if posteriors.len() != lengths.len() {
        return Err(Error::CountMismatch {
            what: "posteriors vs phrase lengths",
            left: posteriors.len(),
            right: lengths.len(),
        });
    }
    if !beta.is_finite() || beta < 0.0 {
        return Err(Error::config(format!(
            "beta must be finite and non-negative, got {beta}"
        )));
    }
    let mut acc = F::zero();
    for (p, &l) in posteriors.iter().zip(lengths) {
        if l == 0 {
            return Err(Error::shape("phrase length of zero in length_weighted_kld"));
        }
        let w = F::from_f64((-beta * l as f64).exp());
        acc += w * kld_diag_standard(p)?;
    }
    Ok(acc / F::from_f64(posteriors.len() as f64))
}

/// Combine reconstruction and the two stream regularizers into a breakdown.
/// Phrase lengths are shared by both streams (they come from the same
/// segmentation).
pub fn total_loss<F: Scalar>(
    reconstruction: F,
    prosody: &[GaussianPosterior<F>],
    noise: &[GaussianPosterior<F>],
    lengths: &[usize],
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    weights.validate()?;
    let recon = reconstruction.to_f64();
    if !recon.is_finite() || recon < 0.0 {
        return Err(Error::NonFinite {
            context: format!("reconstruction loss {recon}"),
        });
    }
    let p = length_weighted_kld(prosody, lengths, weights.beta_prosody)?.to_f64();
    let n = length_weighted_kld(noise, lengths, weights.beta_noise)?.to_f64();
    Ok(LossBreakdown::new(recon, p, n, weights))
}

// ── Tape versions (training path) ─────────────────────────────────────────

/// KLD of a posterior given as tape nodes; returns a 1×1 node.
pub fn kld_on_tape<F: Scalar>(tape: &mut Tape<F>, posterior: &PosteriorVars) -> Var {
    let dim = tape.value(posterior.mean).ncols();
    let sq = tape.mul(posterior.mean, posterior.mean);
    let sq_sum = tape.sum_all(sq);
    let var = tape.exp(posterior.log_variance);
    let var_sum = tape.sum_all(var);
    let lv_sum = tape.sum_all(posterior.log_variance);
    let d = tape.leaf(Array2::from_elem((1, 1), F::from_f64(dim as f64)));
    let a = tape.add(sq_sum, var_sum);
    let b = tape.sub(a, lv_sum);
    let c = tape.sub(b, d);
    tape.scale(c, F::from_f64(0.5))
}

/// Tape version of [`length_weighted_kld`].
pub fn length_weighted_kld_on_tape<F: Scalar>(
    tape: &mut Tape<F>,
    posteriors: &[PosteriorVars],
    lengths: &[usize],
    beta: f64,
) -> Var {
    assert_eq!(posteriors.len(), lengths.len(), "posterior/length count");
    assert!(!posteriors.is_empty(), "empty phrase list");
    let mut acc: Option<Var> = None;
    for (p, &l) in posteriors.iter().zip(lengths) {
        let kld = kld_on_tape(tape, p);
        let weighted = tape.scale(kld, F::from_f64((-beta * l as f64).exp()));
        acc = Some(match acc {
            Some(a) => tape.add(a, weighted),
            None => weighted,
        });
    }
    tape.scale(acc.unwrap(), F::from_f64(1.0 / posteriors.len() as f64))
}
