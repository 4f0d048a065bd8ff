//! Matrix-free high-rank Hessian approximation toolkit.
//!
//! Builds separated-symbol pseudo-differential approximations of data-misfit
//! Hessians from a handful of operator applications (PSF delta probing, PDO
//! sinusoid probing, and their PSF+ fusion), assembles SPD factored Laplace
//! approximations of the posterior, and uses them to precondition L-BFGS
//! inversion and to drive gpCN MCMC uncertainty quantification.

pub mod cg;
pub mod error;
pub mod fft;
pub mod config;
pub mod grid;
pub mod io;
pub mod laplace;
pub mod lowrank;
pub mod mcmc;
pub mod optimize;
pub mod pipeline;
pub mod prior;
pub mod probing;
pub mod psido;
pub mod quadratic;

pub use error::{CoreError, Result};
pub use fft::{forward_transform, inverse_transform, Spectrum};
pub use grid::{freq_coords, Field, FreqGrid, Grid2D};
pub use prior::{white_noise, BiharmonicPrior};
pub use psido::{dense_materialize, FnOperator, LinearOperator, LowRankSymbol, PsidoOperator};
