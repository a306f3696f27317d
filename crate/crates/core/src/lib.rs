//! Multimodal-prompt tabletop manipulation.
//!
//! The crate contains a small deterministic numerics stack ([`tensor`]), a
//! grid tabletop simulator ([`sim`]), task families with scripted experts
//! ([`tasks`]), the object/prompt encoders and the decoder-only policy
//! ([`model`]), and the two-phase training and evaluation pipeline
//! ([`pipeline`]).

pub mod exec;
pub mod tensor;
pub mod sim;
pub mod tasks;
pub mod model;
pub mod pipeline;
