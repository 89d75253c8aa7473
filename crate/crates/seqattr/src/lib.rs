//! Sequence-based person attribute recognition with a joint CTC-attention
//! model.
//!
//! Attributes are written as integer label sequences through a mapping table
//! ([`codec`]), images are encoded into feature sequences by a convolutional
//! trunk plus bidirectional recurrent layers ([`encoder`]), and one network is
//! trained under three losses at once: identity cross-entropy, CTC over the
//! encoded sequence ([`ctc`]), and attribute cross-entropy from an attention
//! decoder ([`decoder`]), composed as `lambda * L_id + L_ctc + L_at`
//! ([`objective`]). Evaluation covers per-attribute accuracy / mean accuracy
//! and CMC Rank-1 / mAP re-identification ([`metrics`]); [`data`] provides a
//! deterministic synthetic pedestrian dataset so the whole pipeline is
//! trainable and testable at desk scale.

pub mod cli;
pub mod codec;
pub mod config;
pub mod ctc;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod metrics;
pub mod objective;
pub mod trainer;
