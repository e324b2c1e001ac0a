//! Training-time machinery for a two-stage detector head whose IoU threshold
//! and SmoothL1 `beta` track the statistics of the proposals it is fed.
//!
//! The crate is organized bottom-up:
//!
//! - [`geometry`]: boxes, IoU, offset encoding and normalization.
//! - [`assignment`]: max-IoU matching, static and dynamic labels, batch sampling.
//! - [`loss`]: SmoothL1 / dynamic SmoothL1 values and analytic gradients.
//! - [`controller`]: the running order-statistic controller for `T_now` and `beta_now`.
//! - [`simulator`]: synthetic scenes, proposal generators and a toy detector
//!   that runs the whole loop end to end.
//! - [`metrics`]: NMS and COCO-style average precision.
//! - [`cli`]: the `simulate | train | eval | ablate` front end.

pub mod assignment;
pub mod cli;
pub mod controller;
pub mod geometry;
pub mod loss;
pub mod metrics;
pub mod simulator;

pub use assignment::{Label, MatchResult, SampledBatch};
pub use controller::{Controller, ControllerConfig, ControllerSnapshot, LabelReduction};
pub use geometry::{BBox, Delta, DeltaStats, GeometryError};
pub use loss::{LossError, LossValue};
pub use metrics::{Detection, EvalReport};
