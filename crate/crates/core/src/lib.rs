//! Bounding-box evaluation and human-preference tooling.
//!
//! * [`geometry`]: box arithmetic, IoU, centered area scaling with clipping.
//! * [`coco`]: COCO annotation and result files.
//! * [`eval`]: greedy matching, PR curves, AP and the box-size census.
//! * [`loss`]: the asymmetric smooth-L1 loss and its gradient.
//! * [`regressor`]: a small gradient-descent model showing the loss's size bias.
//! * [`stats`]: Cochran's Q and post-hoc tests for preference judgments.

pub mod coco;
pub mod eval;
pub mod geometry;
pub mod loss;
pub mod regressor;
pub mod stats;

pub use coco::{DatasetBundle, Detection, GroundTruthObject, ImageRecord};
pub use geometry::{BBox, ImageSize, ScaleFactor, SizeCategory};
pub use loss::AsymmetricLossParams;
