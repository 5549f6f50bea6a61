//! Phrase-level reference encoder.
//!
//! Features pass through a stack of stride-1 convolutions (ReLU + layer norm
//! after each) and a bi-directional LSTM, so every frame keeps a one-to-one
//! output vector.  Each phrase is then downsampled to a single vector, which
//! a linear head maps to the mean and log-variance of a diagonal Gaussian.
//!
//! Everything runs on the autodiff tape; the plain entry points wrap a
//! throwaway tape and read the values back out.

use crate::autodiff::{Tape, Var};
use crate::corpus::FeatureMatrix;
use crate::optim::{randn, BoundParams, ParamSet};
use crate::segmentation::{PhraseSet, PhraseSpan};
use crate::{Error, Result, Scalar};
use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

const LAYER_NORM_EPS: f64 = 1e-5;

/// How a phrase's frame vectors collapse to one vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Downsample {
    /// Take the frame at `s + floor((e-s)/2)` for span `[s, e)`.
    MiddleFrame,
    /// Average all frame vectors of the span.
    MeanFrames,
}

/// Reference encoder sizes.  `conv_layers: 0` skips the convolution stack and
/// `recurrent_channels: 0` skips the LSTM; both exist so tests can wire the
/// head directly to the input frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub conv_layers: usize,
    pub conv_channels: usize,
    pub kernel: usize,
    /// LSTM hidden size per direction.
    pub recurrent_channels: usize,
    pub latent_dim: usize,
    pub log_var_min: f64,
    pub log_var_max: f64,
    pub downsample: Downsample,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig::desk_scale()
    }
}

impl EncoderConfig {
    /// Small configuration that trains in seconds on a CPU.
    pub fn desk_scale() -> Self {
        EncoderConfig {
            conv_layers: 5,
            conv_channels: 64,
            kernel: 3,
            recurrent_channels: 64,
            latent_dim: 8,
            log_var_min: -12.0,
            log_var_max: 6.0,
            downsample: Downsample::MiddleFrame,
        }
    }

    /// Full-size configuration (not exercised by the test suite).
    pub fn full_scale() -> Self {
        EncoderConfig {
            conv_channels: 512,
            recurrent_channels: 512,
            latent_dim: 32,
            ..EncoderConfig::desk_scale()
        }
    }

    /// Smallest useful configuration, for gradient checks.
    pub fn tiny() -> Self {
        EncoderConfig {
            conv_layers: 2,
            conv_channels: 8,
            kernel: 3,
            recurrent_channels: 8,
            latent_dim: 4,
            log_var_min: -12.0,
            log_var_max: 6.0,
            downsample: Downsample::MiddleFrame,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::config("latent_dim must be at least 1"));
        }
        if self.conv_layers > 0 && self.conv_channels == 0 {
            return Err(Error::config("conv_channels must be at least 1"));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::config(format!(
                "kernel must be odd and positive, got {}",
                self.kernel
            )));
        }
        if !(self.log_var_min.is_finite() && self.log_var_max.is_finite())
            || self.log_var_min >= self.log_var_max
        {
            return Err(Error::config(format!(
                "log-variance bounds must be finite with min < max, got [{}, {}]",
                self.log_var_min, self.log_var_max
            )));
        }
        Ok(())
    }

    fn frame_dim(&self, num_bins: usize) -> usize {
        let conv_out = if self.conv_layers > 0 {
            self.conv_channels
        } else {
            num_bins
        };
        if self.recurrent_channels > 0 {
            2 * self.recurrent_channels
        } else {
            conv_out
        }
    }
}

/// Diagonal Gaussian over the latent space of one phrase.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPosterior<F: Scalar> {
    pub mean: Array1<F>,
    pub log_variance: Array1<F>,
}

impl<F: Scalar> GaussianPosterior<F> {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.log_variance.len() {
            return Err(Error::CountMismatch {
                what: "posterior mean vs log-variance dims",
                left: self.mean.len(),
                right: self.log_variance.len(),
            });
        }
        if self
            .mean
            .iter()
            .chain(self.log_variance.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite {
                context: "Gaussian posterior".into(),
            });
        }
        Ok(())
    }
}

/// Where an embedding's values came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingSource {
    Sampled,
    Mean,
}

/// One phrase's prosody (or noise) embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct ProsodyEmbedding<F: Scalar> {
    pub values: Array1<F>,
    pub source: EmbeddingSource,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    Train,
    Inference,
}

/// Posterior of one phrase as tape nodes, both 1 x latent_dim.
#[derive(Clone, Copy, Debug)]
pub struct PosteriorVars {
    pub mean: Var,
    pub log_variance: Var,
}

/// Names and shapes of every parameter array the encoder needs, in creation
/// order.  `prefix` keeps multiple encoders apart in one [`ParamSet`].
pub fn encoder_param_shapes(
    prefix: &str,
    cfg: &EncoderConfig,
    num_bins: usize,
) -> Vec<(String, (usize, usize))> {
    let mut shapes = Vec::new();
    let mut in_ch = num_bins;
    for layer in 0..cfg.conv_layers {
        let out = cfg.conv_channels;
        shapes.push((
            format!("{prefix}conv{layer}.weight"),
            (cfg.kernel * in_ch, out),
        ));
        shapes.push((format!("{prefix}conv{layer}.bias"), (1, out)));
        shapes.push((format!("{prefix}conv{layer}.ln_gamma"), (1, out)));
        shapes.push((format!("{prefix}conv{layer}.ln_beta"), (1, out)));
        in_ch = out;
    }
    if cfg.recurrent_channels > 0 {
        let h = cfg.recurrent_channels;
        for dir in ["fw", "bw"] {
            shapes.push((format!("{prefix}lstm_{dir}.w_ih"), (in_ch, 4 * h)));
            shapes.push((format!("{prefix}lstm_{dir}.w_hh"), (h, 4 * h)));
            shapes.push((format!("{prefix}lstm_{dir}.bias"), (1, 4 * h)));
        }
    }
    let head_in = cfg.frame_dim(num_bins);
    shapes.push((
        format!("{prefix}head.weight"),
        (head_in, 2 * cfg.latent_dim),
    ));
    shapes.push((format!("{prefix}head.bias"), (1, 2 * cfg.latent_dim)));
    shapes
}

/// Add freshly initialized encoder parameters to `params`.
pub fn init_encoder_params<F: Scalar, R: Rng>(
    params: &mut ParamSet<F>,
    prefix: &str,
    cfg: &EncoderConfig,
    num_bins: usize,
    rng: &mut R,
) {
    for (name, (rows, cols)) in encoder_param_shapes(prefix, cfg, num_bins) {
        let value = if name.ends_with(".ln_gamma") {
            Array2::from_elem((rows, cols), F::one())
        } else if name.ends_with(".bias") || name.ends_with(".ln_beta") {
            Array2::from_elem((rows, cols), F::zero())
        } else {
            randn(rng, rows, cols, 1.0 / (rows as f64).sqrt())
        };
        params.insert(name, value);
    }
}

/// Check that `params` holds every array the config requires, with the right
/// shapes.
pub fn check_encoder_params<F: Scalar>(
    params: &ParamSet<F>,
    prefix: &str,
    cfg: &EncoderConfig,
    num_bins: usize,
) -> Result<()> {
    for (name, (rows, cols)) in encoder_param_shapes(prefix, cfg, num_bins) {
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

pub(crate) fn im2col<F: Scalar>(tape: &mut Tape<F>, x: Var, kernel: usize) -> Var {
    if kernel == 1 {
        return x;
    }
    let t = tape.value(x).nrows();
    let pad = (kernel - 1) / 2;
    let padded = tape.zero_pad_rows(x, pad, pad);
    let mut cols: Option<Var> = None;
    for tap in 0..kernel {
        let indices: Vec<usize> = (tap..tap + t).collect();
        let shifted = tape.gather_rows(padded, &indices);
        cols = Some(match cols {
            Some(c) => tape.concat_cols(c, shifted),
            None => shifted,
        });
    }
    cols.unwrap()
}

fn conv_stack<F: Scalar>(
    tape: &mut Tape<F>,
    params: &BoundParams,
    prefix: &str,
    cfg: &EncoderConfig,
    mut x: Var,
) -> Var {
    for layer in 0..cfg.conv_layers {
        let w = params.var(&format!("{prefix}conv{layer}.weight"));
        let b = params.var(&format!("{prefix}conv{layer}.bias"));
        let gamma = params.var(&format!("{prefix}conv{layer}.ln_gamma"));
        let beta = params.var(&format!("{prefix}conv{layer}.ln_beta"));
        let cols = im2col(tape, x, cfg.kernel);
        let z = tape.matmul(cols, w);
        let z = tape.add_row(z, b);
        let z = tape.relu(z);
        x = tape.layer_norm(z, gamma, beta, F::from_f64(LAYER_NORM_EPS));
    }
    x
}

// One LSTM direction over the frame sequence; returns h_t indexed by the
// original frame position regardless of direction.
fn lstm_direction<F: Scalar>(
    tape: &mut Tape<F>,
    params: &BoundParams,
    name: &str,
    x: Var,
    hidden: usize,
    reverse: bool,
) -> Vec<Var> {
    let t_frames = tape.value(x).nrows();
    let w_ih = params.var(&format!("{name}.w_ih"));
    let w_hh = params.var(&format!("{name}.w_hh"));
    let bias = params.var(&format!("{name}.bias"));
    let mut h = tape.leaf(Array2::from_elem((1, hidden), F::zero()));
    let mut c = tape.leaf(Array2::from_elem((1, hidden), F::zero()));
    let mut out = vec![h; t_frames];
    let order: Vec<usize> = if reverse {
        (0..t_frames).rev().collect()
    } else {
        (0..t_frames).collect()
    };
    for t in order {
        let x_t = tape.gather_rows(x, &[t]);
        let gx = tape.matmul(x_t, w_ih);
        let gh = tape.matmul(h, w_hh);
        let sum = tape.add(gx, gh);
        let gates = tape.add(sum, bias);
        let i_raw = tape.slice_cols(gates, 0, hidden);
        let f_raw = tape.slice_cols(gates, hidden, 2 * hidden);
        let g_raw = tape.slice_cols(gates, 2 * hidden, 3 * hidden);
        let o_raw = tape.slice_cols(gates, 3 * hidden, 4 * hidden);
        let i = tape.sigmoid(i_raw);
        let f = tape.sigmoid(f_raw);
        let g = tape.tanh(g_raw);
        let o = tape.sigmoid(o_raw);
        let keep = tape.mul(f, c);
        let write = tape.mul(i, g);
        c = tape.add(keep, write);
        let c_out = tape.tanh(c);
        h = tape.mul(o, c_out);
        out[t] = h;
    }
    out
}

/// Middle frame of a half-open span: the later central frame on even lengths.
pub fn middle_frame_index(span: &PhraseSpan) -> usize {
    span.frame_range.start + span.frame_range.len() / 2
}

/// Run the frame encoder over `features` (a T x num_bins node) and emit one
/// posterior per span.  Spans index into the row range of `features`.
pub fn encode_spans_on_tape<F: Scalar>(
    tape: &mut Tape<F>,
    params: &BoundParams,
    prefix: &str,
    cfg: &EncoderConfig,
    features: Var,
    spans: &[PhraseSpan],
) -> Vec<PosteriorVars> {
    let x = conv_stack(tape, params, prefix, cfg, features);
    let lstm_h = if cfg.recurrent_channels > 0 {
        let fw = lstm_direction(
            tape,
            params,
            &format!("{prefix}lstm_fw"),
            x,
            cfg.recurrent_channels,
            false,
        );
        let bw = lstm_direction(
            tape,
            params,
            &format!("{prefix}lstm_bw"),
            x,
            cfg.recurrent_channels,
            true,
        );
        Some((fw, bw))
    } else {
        None
    };

    let frame_vector = |tape: &mut Tape<F>, t: usize| match &lstm_h {
        Some((fw, bw)) => tape.concat_cols(fw[t], bw[t]),
        None => tape.gather_rows(x, &[t]),
    };

    let head_w = params.var(&format!("{prefix}head.weight"));
    let head_b = params.var(&format!("{prefix}head.bias"));
    let latent = cfg.latent_dim;
    spans
        .iter()
        .map(|span| {
            let v = match cfg.downsample {
                Downsample::MiddleFrame => {
                    let m = middle_frame_index(span);
                    frame_vector(tape, m)
                }
                Downsample::MeanFrames => {
                    let mut acc: Option<Var> = None;
                    for t in span.frame_range.clone() {
                        let v = frame_vector(tape, t);
                        acc = Some(match acc {
                            Some(a) => tape.add(a, v),
                            None => v,
                        });
                    }
                    let total = acc.expect("span has at least one frame");
                    tape.scale(total, F::from_f64(1.0 / span.frame_range.len() as f64))
                }
            };
            let y = tape.matmul(v, head_w);
            let y = tape.add(y, head_b);
            let mean = tape.slice_cols(y, 0, latent);
            let lv_raw = tape.slice_cols(y, latent, 2 * latent);
            let log_variance = tape.clamp(
                lv_raw,
                F::from_f64(cfg.log_var_min),
                F::from_f64(cfg.log_var_max),
            );
            PosteriorVars { mean, log_variance }
        })
        .collect()
}

fn read_posterior<F: Scalar>(tape: &Tape<F>, vars: &PosteriorVars) -> GaussianPosterior<F> {
    GaussianPosterior {
        mean: tape.value(vars.mean).row(0).to_owned(),
        log_variance: tape.value(vars.log_variance).row(0).to_owned(),
    }
}

fn check_inputs<F: Scalar>(
    features: &FeatureMatrix<F>,
    spans: &PhraseSet,
    params: &ParamSet<F>,
    prefix: &str,
    cfg: &EncoderConfig,
) -> Result<()> {
    cfg.validate()?;
    check_encoder_params(params, prefix, cfg, features.num_bins())?;
    if features.num_frames() != spans.total_frames() {
        return Err(Error::shape(format!(
            "features have {} frames but spans cover {}",
            features.num_frames(),
            spans.total_frames()
        )));
    }
    Ok(())
}

/// Encode every span of an utterance in one pass over the frame encoder.
pub fn encode_posteriors<F: Scalar>(
    features: &FeatureMatrix<F>,
    spans: &PhraseSet,
    params: &ParamSet<F>,
    prefix: &str,
    cfg: &EncoderConfig,
) -> Result<Vec<GaussianPosterior<F>>> {
    check_inputs(features, spans, params, prefix, cfg)?;
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let f = tape.leaf(features.frames().clone());
    let vars = encode_spans_on_tape(&mut tape, &bound, prefix, cfg, f, spans.spans());
    Ok(vars.iter().map(|v| read_posterior(&tape, v)).collect())
}

/// Encode each span's frame slice as its own one-phrase utterance.  The
/// posterior of a chunk depends only on that chunk's frames.
pub fn encode_chunked<F: Scalar>(
    features: &FeatureMatrix<F>,
    spans: &PhraseSet,
    params: &ParamSet<F>,
    prefix: &str,
    cfg: &EncoderConfig,
) -> Result<Vec<GaussianPosterior<F>>> {
    check_inputs(features, spans, params, prefix, cfg)?;
    let mut out = Vec::with_capacity(spans.len());
    for span in spans.spans() {
        let slice = features
            .frames()
            .slice(ndarray::s![span.frame_range.clone(), ..])
            .to_owned();
        let local = PhraseSpan {
            index: 0,
            phoneme_range: 0..span.phoneme_count(),
            frame_range: 0..span.frame_count(),
            boundary_silence_s: span.boundary_silence_s,
        };
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, params);
        let f = tape.leaf(slice);
        let vars = encode_spans_on_tape(&mut tape, &bound, prefix, cfg, f, &[local]);
        out.push(read_posterior(&tape, &vars[0]));
    }
    Ok(out)
}

/// Draw an embedding from a posterior.  Training mode applies the
/// reparameterized sample `mean + exp(0.5 log_var) * noise`; inference mode
/// returns the mean and ignores any supplied noise.
pub fn sample_embedding<F: Scalar>(
    posterior: &GaussianPosterior<F>,
    mode: SampleMode,
    noise: Option<&Array1<F>>,
) -> Result<ProsodyEmbedding<F>> {
    posterior.validate()?;
    match mode {
        SampleMode::Inference => Ok(ProsodyEmbedding {
            values: posterior.mean.clone(),
            source: EmbeddingSource::Mean,
        }),
        SampleMode::Train => {
            let eps = noise.ok_or_else(|| {
                Error::config("train-mode sampling needs a noise draw, none was supplied")
            })?;
            if eps.len() != posterior.dim() {
                return Err(Error::CountMismatch {
                    what: "noise draw vs latent dims",
                    left: eps.len(),
                    right: posterior.dim(),
                });
            }
            let half = F::from_f64(0.5);
            let values = posterior
                .mean
                .iter()
                .zip(posterior.log_variance.iter())
                .zip(eps.iter())
                .map(|((&m, &lv), &e)| m + (lv * half).exp() * e)
                .collect();
            Ok(ProsodyEmbedding {
                values,
                source: EmbeddingSource::Sampled,
            })
        }
    }
}

/// Reparameterized sample as a tape node: `mean + exp(0.5 log_var) * eps`.
pub fn sample_on_tape<F: Scalar>(
    tape: &mut Tape<F>,
    posterior: &PosteriorVars,
    noise: &Array1<F>,
) -> Var {
    let eps =
        tape.leaf(Array2::from_shape_vec((1, noise.len()), noise.to_vec()).expect("row vector"));
    let half = tape.scale(posterior.log_variance, F::from_f64(0.5));
    let sd = tape.exp(half);
    let scaled = tape.mul(sd, eps);
    tape.add(posterior.mean, scaled)
}
