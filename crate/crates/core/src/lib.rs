//! Diversity-regularized multi-head attention text classification.
//!
//! A BiLSTM encoder feeds a chain of attention heads, each head driving one
//! step of a decoder LSTM whose final state makes a binary prediction. An
//! overlap penalty between attention heads pushes the heads to attend
//! different tokens, which helps the classifier survive a domain shift
//! without ever seeing target-domain data. On top of the single model sit
//! one-step and full tri-training procedures with a cross-model overlap
//! penalty and agreement-based pseudo-labeling of unlabeled source data.
//!
//! Everything runs on a small reverse-mode autodiff tape over dense `f64`
//! matrices, validated by a central-finite-difference gradient checker.

pub mod autodiff;
pub mod checks;
pub mod config;
pub mod corpus;
pub mod error;
pub mod losses;
pub mod model;
pub mod parallel;
pub mod rng;
pub mod synth;
pub mod trainer;
pub mod tritrain;

pub use autodiff::{Tape, Tensor, ValueId};
pub use config::{HyperParams, Scoring};
pub use error::{Error, Result};
