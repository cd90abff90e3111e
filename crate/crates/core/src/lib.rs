//! RGB 6D object pose estimation at desk scale.
//!
//! The pipeline has three stages:
//!
//! 1. **Proposals** ([`ppn`]): a grid network predicts, per cell and class, a
//!    confidence, a rotation quaternion, a center offset and a depth. Poses are
//!    recovered through the pinhole model and duplicates removed by IoU NMS.
//! 2. **Rendering** ([`renderer`]): a z-buffered software rasterizer renders
//!    the object under the current estimate and cuts matching crops.
//! 3. **Refinement** ([`marn`]): visual embeddings, flow-guided feature warping
//!    and spatial multi-attention regress a residual pose, applied iteratively.
//!
//! [`losses`] and [`metrics`] implement the training objective and the
//! ADD / ADD-S / 2D projection evaluation; [`harness`] generates synthetic
//! scenes, trains and evaluates.

pub mod error;
pub mod geometry;
pub mod harness;
pub mod losses;
pub mod marn;
pub mod metrics;
pub mod ppn;
pub mod renderer;
pub mod tensornet;

pub use error::{Error, Result};
