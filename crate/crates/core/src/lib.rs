//! Learnable Chamfer Distance for point-cloud reconstruction.
//!
//! The loss reweights the nearest-neighbour matching distances of the
//! Chamfer distance with per-point weights predicted by small PointNet-style
//! networks. Those networks are trained adversarially against the
//! reconstruction network: they maximise the weighted loss, the
//! reconstruction network minimises it.
//!
//! Module map:
//! - [`autodiff`]: tape-based reverse-mode differentiation and the optimizer.
//! - [`geometry`]: point clouds, exact matching, Chamfer/Hausdorff/MCD metrics.
//! - [`lcdloss`]: the weight networks and the weighted and adversarial losses.
//! - [`reconnet`]: the PointNet encoder + fully connected decoder under training.
//! - [`trainer`]: alternating optimisation, metric logging, ablations.
//! - [`dataio`]: synthetic shapes, xyz files, normalisation.
//! - [`checkpoint`]: binary parameter files.

pub mod autodiff;
pub mod checkpoint;
pub mod dataio;
pub mod error;
pub mod geometry;
pub mod lcdloss;
pub mod nn;
pub mod par;
pub mod reconnet;
pub mod trainer;

pub use error::{Error, Result};
