//! Task-aligned one-stage object detection at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors, a taped reverse-mode graph for the handful of
//!   ops the head needs, and a finite-difference gradient oracle.
//! - [`geometry`]: IoU, GIoU, distance decoding and NMS.
//! - [`thead`]: the task-aligned head (interactive features, layer attention,
//!   task-aligned predictors, probability map and offset alignment).
//! - [`tal`]: alignment metric, top-m assignment, normalized labels and the
//!   task-aligned classification and regression losses.
//! - [`synthdata`]: deterministic synthetic shape scenes and their file format.
//! - [`trainer`]: backbone + head assembly, SGD, training loop, checkpoints.
//! - [`metrics`]: AP and the task-alignment diagnostics, plus CSV/SVG reports.
//! - [`selfcheck`]: gradient and identity suites behind `tood gradcheck`.

pub mod error;
pub mod geometry;
pub mod metrics;
pub mod selfcheck;
pub mod synthdata;
pub mod tal;
pub mod tensor;
pub mod thead;
pub mod trainer;

pub use error::{Error, Result};
pub use geometry::{BBox, Detection, Instance};
pub use tensor::{Graph, Scalar, Tensor, Var};
