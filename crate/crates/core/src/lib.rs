//! Phrase-level prosody transfer for machine dubbing.
//!
//! The crate trains a pair of variational reference encoders (one for the
//! denoised speech stream, one for the residual noise stream) on top of a
//! small synthesis backbone.  Utterances are segmented into phrases at long
//! silences; each phrase gets its own prosody and noise embedding, and the
//! KLD regularizer is weighted by phrase length so that short phrases are
//! pulled harder toward the prior.  At dubbing time the per-phrase source
//! embeddings condition target-language synthesis phrase by phrase.
//!
//! Modules follow the processing order: [`corpus`] (manifests, alignments,
//! spectrogram features), [`segmentation`], [`encoder`], [`conditioning`],
//! [`losses`], [`backbone`], [`evaluation`], and [`pipeline`] for the
//! end-to-end train / dub / eval entry points used by the CLI.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod conditioning;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod fixtures;
pub mod losses;
pub mod optim;
pub mod pipeline;
pub mod segmentation;

pub use error::{Error, Result};

use ndarray::LinalgScalar;
use ndarray::ScalarOperand;
use num_traits::{Float, NumAssign};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point element type for model math.
///
/// Everything numeric in the crate is generic over this so the same code runs
/// in `f32` for training speed and in `f64` for gradient checking.
pub trait Scalar:
    Float
    + NumAssign
    + ScalarOperand
    + LinalgScalar
    + Sum<Self>
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Single-precision feature matrix, the training default.
pub type FeatureMatrix32 = corpus::FeatureMatrix<f32>;
/// Double-precision feature matrix, used by gradient checks.
pub type FeatureMatrix64 = corpus::FeatureMatrix<f64>;
/// Single-precision phrase posterior.
pub type GaussianPosterior32 = encoder::GaussianPosterior<f32>;
/// Double-precision phrase posterior.
pub type GaussianPosterior64 = encoder::GaussianPosterior<f64>;
/// Single-precision parameter set.
pub type ParamSet32 = optim::ParamSet<f32>;
/// Double-precision parameter set, the pipeline's working type.
pub type ParamSet64 = optim::ParamSet<f64>;
