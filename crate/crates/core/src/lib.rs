//! Next-location prediction with personalized LSTM models, model-inversion
//! attacks against them, and a temperature defense.

pub mod error;
pub mod harness;
pub mod inversion;
pub mod personalize;
pub mod seqnet;
pub mod synth;
pub mod trace;

pub use error::{Error, Result};
