//! NOTAM semantic parsing toolkit.
//!
//! Extracts structured foundational fields from raw NOTAM text via
//! configurable prompting strategies with deterministic post-normalization,
//! discovers emergent information fields through a two-stage multi-agent
//! pipeline (sequential discovery plus a debate-based refinement loop), and
//! scores both tasks with a strict entity-level evaluation harness.

pub mod corpus;
pub mod debate;
pub mod discovery;
pub mod evalkit;
pub mod gateway;
pub mod normalize;
pub mod schema;
pub mod strategies;
