//! Coarse-to-fine semantic segmentation with per-level adaptive confidence
//! thresholds.
//!
//! An image is processed from the coarsest feature level down. At each level
//! a small per-pixel head predicts class probabilities for the pixels not yet
//! settled; pixels whose confidence clears that level's threshold are
//! finalized, the rest are handed to the next finer level. The finest level
//! accepts everything. Thresholds are learned alongside the weights from the
//! confidences of correctly classified pixels.

pub mod acm;
pub mod cascade;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod extractor;
pub mod grid;
pub mod linear;
pub mod model;
pub mod optim;
pub mod predictor;

pub use acm::{ConfidenceMeasure, PixelMask, ThresholdState};
pub use cascade::{infer, CascadeResult, Model, ModelParams};
pub use data::{Benchmark, LabeledScene, SceneConfig};
pub use error::{Error, Result};
pub use eval::{evaluate, EvalReport};
pub use extractor::{FusionMode, LevelRange};
pub use grid::{LabelMap, PlanarGrid};
pub use optim::{train, TrainConfig, TrainLog};
