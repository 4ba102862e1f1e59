//! Confidence-guided claim verification.
//!
//! A claim is scored by the certainty of the model's verdict token and by the
//! consistency of rationales argued for and against it. The two signals route
//! the claim to one of four verification strategies.

pub mod backends;
pub mod cli;
pub mod config;
pub mod datasets;
pub mod eval;
pub mod label;
pub mod prompts;
pub mod router;
pub mod signals;
pub mod strategies;

pub use label::Label;
