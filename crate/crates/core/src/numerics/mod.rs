//! Dense grids, Gaussian blur, 2-D DFT magnitudes, seeded random streams,
//! small symmetric eigensolves, the binary tensor dump and PNG export.

mod blur;
mod dft;
pub mod dump;
mod grid;
mod image;
mod linalg;
mod rng;

pub use blur::{blur, channel_mean, gaussian_kernel};
pub(crate) use blur::reflect;
pub use dft::dft_magnitude;
pub use dump::Tensor;
pub use grid::Grid;
pub use image::{encode_gray_png, heatmap_png, tile_png, to_gray};
pub use linalg::{sym_eig, SymEig, SymMatrix};
pub use rng::{standard_normal, RngStream};
