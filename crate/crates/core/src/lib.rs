//! Cell-fate image classification.
//!
//! The crate covers the full path from labeled microscopy-style images to a
//! trained convolutional classifier and its evaluation:
//!
//! * [`dataset`]: directory ingestion, stratified hash splits, preprocessing.
//! * [`synth`]: procedural cell images with four morphology archetypes.
//! * [`model`]: convolutional backbones (a 50-layer residual network and a
//!   small three-block CNN) topped with a pooled dense head.
//! * [`training`]: mini-batch optimization and finite-difference checks.
//! * [`evaluation`]: accuracy, confusion matrices, one-vs-rest ROC/AUC, figures.
//! * [`interpretability`]: activation capture and heat overlays.

pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod interpretability;
pub mod model;
pub mod raster;
pub mod seed;
pub mod synth;
pub mod training;

pub use error::{Error, ErrorKind, Result};
