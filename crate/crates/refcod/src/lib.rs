//! Reference-guided camouflaged object segmentation.
//!
//! A dual-branch segmentation model: a reference branch distills a common
//! category representation from salient referring images, and a segmentation
//! branch locates camouflaged objects of that category via a referring mask
//! and multi-scale feature enrichment. Ships with an on-disk dataset layout,
//! a synthetic toy-scene generator, the standard four evaluation metrics,
//! and training/evaluation entry points.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod head;
pub mod imageio;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod reference;
pub mod rfe;
pub mod rmg;
pub mod train;

pub use config::RunConfig;
pub use error::{Error, Result};
