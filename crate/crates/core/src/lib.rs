//! Decoding and score fusion for CTC, attention decoders and language models.
//!
//! The crate works on posteriorgrams (frame-wise CTC log-posteriors) and
//! small transformer decoders, so every decoding strategy can be checked
//! end to end without a pretrained model.

pub mod attn;
mod binio;
pub mod ctc;
pub mod error;
pub mod eval;
pub mod hypothesis;
pub mod lm;
pub mod logmath;
pub mod posteriorgram;
pub mod search;
pub mod synth;
pub mod vocab;

pub use error::{Error, Result};
pub use hypothesis::{Hypothesis, NBestList, ScorerWeights};
pub use posteriorgram::{EncoderOutput, Posteriorgram};
pub use vocab::Vocabulary;
