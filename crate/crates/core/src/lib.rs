//! Streaming EEG motor-intention decoding.
//!
//! Offline, multichannel EEG is resampled, band-passed and differenced, cut
//! into sliding windows, and each window becomes the tangent-space projection
//! of its regularized covariance at the training-set Fréchet mean. An RBF
//! support vector machine with Platt-calibrated scores is trained on those
//! features. Online, the same chain runs sample by sample; confident
//! predictions feed a majority-vote queue whose verdict retargets a simulated
//! point robot.

// Parameter checks are written `!(x > 0.0)` so that NaN fails them too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod dsp;
pub mod features;
pub mod harness;
pub mod model;
pub mod online;
pub mod pipeline;
pub mod robot;
pub mod spd;
pub mod svm;
