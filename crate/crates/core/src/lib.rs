//! Segmentation adversarial-robustness laboratory.
//!
//! A small reverse-mode autodiff engine ([`graph`]), toy fully-convolutional
//! segmentation networks ([`model`]), the attack suite ([`attacks`]: PGD,
//! SegPGD with its weighting schedules, FGSM, SegFGSM, DAG, l2-BIM),
//! standard and adversarial training ([`training`]), metrics and attack traces
//! ([`metrics`]), and a deterministic synthetic dataset ([`data`]).

pub mod attacks;
pub mod campaign;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod training;

pub use attacks::{AdvResult, AttackConfig, AttackKind, Norm, PixelSplit, Schedule};
pub use checkpoint::{load_checkpoint, save_checkpoint, ModelCheckpoint, TrainingMeta, TrainingMode};
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use metrics::{AttackTrace, ConfusionMatrix, TraceRow};
pub use model::{build_model, Arch, SegModel, Segmenter};
pub use tensor::{LabelMap, Scalar, Tensor};
