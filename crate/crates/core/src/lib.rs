//! Equivariant regularization by denoising.
//!
//! A stochastic gradient restoration loop whose regularization direction is a
//! denoiser residual averaged (or sampled) over a transformation group, with
//! an exact Gaussian-mixture prior so every convergence claim can be checked
//! numerically.
//!
//! Module map:
//! - [`imaging`]: image type, metrics, file I/O
//! - [`transform`]: groups, sampling, `G(x)` and `J_Gᵀ v`
//! - [`prior`], [`denoiser`]: GMM oracle and practical denoisers
//! - [`equivariant`]: equivariant denoiser, score estimates, oracle expectations
//! - [`forward`]: degradation operators and data terms
//! - [`optimizer`]: the iteration, schedules and traces
//! - [`verification`]: executable checks with JSON reports
//! - [`cli`]: the `ered` command implementation

pub mod cli;
pub mod denoiser;
pub mod ednz;
pub mod equivariant;
pub mod error;
pub mod fixtures;
pub mod forward;
pub mod imaging;
pub mod optimizer;
pub mod prior;
pub mod quadrature;
pub mod transform;
pub mod verification;

pub use error::{Error, Result};
pub use imaging::{Image, Shape};
