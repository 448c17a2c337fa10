//! Few-shot semantic segmentation with prototypical heads over a feature
//! pyramid encoder.
//!
//! Images flow through [`encoder`] (shared weights for support and query),
//! optionally through one of the [`attention`] heads, then [`protohead`]
//! pools class prototypes from support masks and labels query pixels by
//! cosine similarity. [`trainer`] drives the two training stages and
//! [`metrics`] scores predictions.

pub mod attention;
pub mod data;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod numerics;
pub mod params;
pub mod protohead;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::{Real, Tape, Tensor, Var};
