//! Building blocks for a unified multi-camera 2D/3D query decoder.
//!
//! 3D object queries are projected into every camera to form per-view 2D
//! queries ([`allocation`]), which attend only within their camera group
//! ([`groupattn`]) and are fused back into the 3D queries ([`aggregation`]).
//! [`decoder`] stacks these into interleaved 2D/3D layers. [`crop_scale`]
//! adds zoomed long-range views, [`denoising`] carries noisy ground-truth
//! queries through both layer types, and [`matching`] holds assignment,
//! losses and metrics. [`simulator`] produces synthetic scenes for all of it.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregation;
pub mod allocation;
pub mod crop_scale;
pub mod decoder;
pub mod denoising;
pub mod error;
pub mod geometry;
pub mod groupattn;
pub mod interchange;
pub mod matching;
pub mod nn;
pub mod simulator;

pub use error::{Error, Result};
pub use geometry::{Anchor3D, Box2D, CameraView, Rig};
