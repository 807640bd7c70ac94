//! Person detection with a per-instance body orientation head.
//!
//! Each anchor channel of a multi-scale YOLO-style grid carries one seven-slot
//! embedding: objectness, box, class score and a normalized orientation. The
//! crate covers decoding, target assignment, the joint loss with analytic
//! gradients, post-processing, orientation and detection metrics, dataset
//! reconstruction from COCO person annotations, and a small deterministic
//! training loop used as an end-to-end check.

pub mod assignment;
pub mod config;
pub mod dataset;
pub mod embedding;
pub mod error;
pub mod gradcheck;
pub mod kinds;
pub mod losses;
pub mod metrics;
pub mod plot;
pub mod postprocess;
pub mod toytrain;

pub use error::{Error, Result};
pub use kinds::{Box2D, Corners, OrientationAngle};
