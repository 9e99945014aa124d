//! Semantic-ID generative recommendation.
//!
//! Items are described in text (metadata plus vision-model captions), enriched
//! with LLM-mined interests, embedded and residually quantized into short
//! hierarchical Semantic IDs. A compact autoregressive model over the SID
//! vocabulary is trained with supervised fine-tuning and refined with GRPO
//! under a quality-aware reward.

pub mod catalog;
pub mod cmsa;
pub mod dcim;
pub mod error;
pub mod eval;
pub mod gateway;
pub mod genmodel;
mod jsonl;
pub mod optim;
pub mod pipeline;
pub mod qarm;
pub mod quantizer;

pub use error::{Error, Result};
