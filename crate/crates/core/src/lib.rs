//! Mesh generation with denoising diffusion over deformable tetrahedral grids.

pub mod diffusion;
pub mod error;
pub mod fitting;
pub mod geom;
pub mod lattice;
pub mod marching;
pub mod meshops;
pub mod metrics;
pub mod scoremodel;
pub mod shapes;
pub mod tetgrid;

pub use error::{Error, Result};
