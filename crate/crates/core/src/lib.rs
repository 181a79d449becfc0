//! Neural signed distance fields fitted to sparse, noisy, unoriented point
//! clouds.
//!
//! The crate covers the whole reconstruction path:
//!
//! - [`pointcloud`]: loading, normalization, noise and analytic test shapes
//! - [`spatial`]: kd-tree nearest neighbours and per-point local scale
//! - [`net`]: the SDF MLP with a fused value + input-gradient pass and
//!   reverse-mode parameter gradients through that gradient
//! - [`loss`]: Neural-Pull, NAP, Wasserstein-DRO and Sinkhorn-DRO objectives
//! - [`trainer`]: query pools, Adam, the training loop and model selection
//! - [`mesh`]: grid evaluation, marching cubes and mesh I/O
//! - [`metrics`]: Chamfer, F-Score and normal consistency

pub mod error;
pub mod geom;
pub mod loss;
pub mod mesh;
pub mod metrics;
pub mod net;
pub mod pointcloud;
pub mod rng;
pub mod spatial;
pub mod trainer;

pub use error::{Error, Result};
pub use geom::Vec3;
