//! Gaussian algebra, block-rotation dynamics, state-space environments and
//! classic filtering baselines.

pub mod dynamics;
pub mod envs;
pub mod error;
pub mod filters;
pub mod gauss;
pub mod io;
pub mod linalg;

pub use dynamics::{BlockDynamics, DiagonalNoise, SpectrumReport};
pub use error::{Error, Result};
pub use gauss::{gauss_kl, info_combine, GaussianBelief, InfoTerm, LinearGaussianMap, SymBlock, SymMatrix};
