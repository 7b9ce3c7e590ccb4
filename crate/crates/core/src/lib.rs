//! Evidence-seeking diagnostic engine.
//!
//! The crate is organised bottom-up:
//!
//! - [`store`]: patch-embedding corpora on disk
//! - [`highlight`]: prototype toolkits, similarity, RoI selection
//! - [`parser`] and [`prompt`]: reasoner output grammar and prompt templates
//! - [`reward`]: verifiable reward over parsed transcripts
//! - [`backends`]: wire-protocol clients and a scripted mock server
//! - [`protocol`]: the multi-turn diagnostic session state machine
//! - [`service`]: JSON-over-HTTP session service
//! - [`eval`]: batch protocols, metrics and ablations
//! - [`synth`]: synthetic slides, toolkits and a simulated backend

pub mod backends;
pub mod highlight;
pub mod parser;
pub mod prompt;
pub mod protocol;
pub mod reward;
pub mod service;
pub mod store;
pub mod eval;
pub mod synth;
