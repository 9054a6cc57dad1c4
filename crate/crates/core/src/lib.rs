//! Quantum state tomography from displace-and-measure data.
//!
//! Two reconstructors share one measurement model:
//!
//! * [`cgan`]: a conditional generative adversarial network whose generator
//!   ends in a density-matrix layer (`T†T / tr{T†T}` with `T` lower
//!   triangular) followed by an expectation layer computing `tr{Oᵢ ρ}`.
//! * [`imle`]: the iterative maximum-likelihood `ρ ← 𝒩[R ρ R]` baseline.
//!
//! The supporting modules cover truncated Fock-space algebra ([`fock`]),
//! Husimi/Wigner/generalized-Q observables ([`measure`]), a small
//! reverse-mode autodiff engine ([`autodiff`]), network layers and
//! optimizers ([`nn`]), state metrics ([`metrics`]), persistence
//! ([`store`]) and the benchmark drivers ([`bench`]).

pub mod autodiff;
pub mod bench;
pub mod cgan;
pub mod error;
pub mod fock;
pub mod imle;
pub mod linalg;
pub mod measure;
pub mod metrics;
pub mod nn;
pub mod store;

pub use error::{Error, Result};
pub use linalg::{ComplexMatrix, C64};

/// Library version recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
