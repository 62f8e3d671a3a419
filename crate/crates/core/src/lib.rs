//! Core of the MORF experiment platform.
//!
//! Controller scripts ([`dsl`]) describe an extract/train/test/evaluate
//! workflow; the [`orchestrator`] expands them over the [`catalog`], runs
//! user images in the [`sandbox`], evaluates predictions platform-side
//! ([`eval`]) and archives every artifact in the [`registry`].

pub mod archive;
pub mod bundle;
pub mod catalog;
pub mod digest;
pub mod dsl;
pub mod eval;
pub mod orchestrator;
pub mod registry;
pub mod rules;
pub mod sandbox;
pub mod synth;
