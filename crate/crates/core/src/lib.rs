//! Desk-scale laboratory for semi-supervised RL on synthetic multiple-choice
//! questions.
//!
//! The pipeline: distribution-controlled question synthesis with optional
//! knowledge injection, offline majority-vote pseudo-labeling by the base
//! policy, and two-stage group-relative policy-gradient training — all on an
//! exact-probability toy policy so every quantity (ratios, advantages, KL) is
//! computable in closed form and testable without GPUs.

pub mod chart;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod labeling;
pub mod policy;
pub mod retrieval;
pub mod synthesis;
pub mod trainer;

pub use error::{Error, Result};
