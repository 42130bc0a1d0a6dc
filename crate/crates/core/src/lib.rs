//! Model-extraction defense gateway.
//!
//! The crate guards a trained classifier served over a query interface:
//! adversarially hardened training, per-query uncertainty scoring combined
//! with per-session behavioral tracking, tiered response perturbation that
//! degrades what query thieves learn while staying useful for honest
//! clients, and trigger/watermark machinery that proves ownership of a model
//! stolen despite all that. Attack simulators for the three extraction
//! families the defense is evaluated against live in [`attacks`].

pub mod adversarial;
pub mod attacks;
pub mod detection;
pub mod error;
pub mod evaluation;
pub mod gateway;
pub mod linalg;
pub mod model;
pub mod ownership;
pub mod response;
pub mod seed;

pub use error::{Error, Result};
pub use model::{argmax, Model, Target, TrainOptions, TrainTrace};
