//! Algorithmic core for bird's-eye-view (BEV) cross-view retrieval.
//!
//! A street-view panorama is lifted into a camera-centred BEV feature map by
//! column-wise depth attention, and matched against an aerial feature map
//! over a regular grid of SE(2) pose hypotheses. The log-sum-exp of the
//! resulting score volume is the pair's retrieval logit, and its softmax is a
//! pose posterior. Both encoders are trained end to end with a symmetric
//! contrastive loss; a cheaper vector-embedding stage produces candidates and
//! priors that the BEV stage reranks.
//!
//! The crate is `no_std` (with `alloc`). Enable `std` for `std::error::Error`
//! integration and `parallel` to evaluate pair batches with rayon.
//!
//! # Modules
//! - [`tensor`], [`autodiff`], [`gradcheck`]: minimal reverse-mode engine.
//! - [`fft`]: mixed-radix complex FFT used by the fast matcher.
//! - [`geometry`]: poses, pose grids, resampling fields and masks.
//! - [`encoder`]: aerial and panorama encoders, depth attention, embeddings.
//! - [`matcher`]: score volumes (brute force and Fourier domain).
//! - [`retrieval`]: index, scores, reranking, pose estimates and metrics.
//! - [`train`]: contrastive loss, hard-negative mining, optimizer, trainer.
//! - [`synth`]: synthetic worlds and panorama observations.
//! - [`pipeline`]: two-stage retrieval over a dataset.
//! - [`selftest`]: backend equivalence, planted poses and score identities.
#![cfg_attr(not(any(feature = "std", test)), no_std)]
// Negated comparisons are how NaN gets rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod autodiff;
pub mod encoder;
mod error;
pub mod fft;
pub mod geometry;
pub mod gradcheck;
pub(crate) mod math;
pub mod matcher;
pub mod pipeline;
pub mod retrieval;
pub mod selftest;
pub mod synth;
pub mod tensor;
pub mod train;
mod util;

pub use error::{Error, Result};
pub use tensor::Tensor;
