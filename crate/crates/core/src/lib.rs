//! Solvers for the deformed Hermitian-Yang-Mills equation on line bundles
//! over flat complex tori.
//!
//! The crate is organized bottom-up:
//!
//! - [`grid`] and [`spectral`]: the periodic grid, field containers,
//!   Fourier-multiplier derivatives, quadrature and Poisson solves.
//! - [`linalg`] and [`geometry`]: pointwise Hermitian algebra (eigenvalues of
//!   `K = g⁻¹F`, the phase `θ`, the volume density `v`, `η`, `κ`, `Ω`).
//! - [`invariants`]: global quantities (`Z_L`, `θ̂`, `V`) and diagnostics.
//! - [`flow`] and [`checkpoint`]: the line bundle mean curvature flow.
//! - [`surface`]: the complex-surface Monge-Ampère route.

pub mod battery;
pub mod checkpoint;
pub mod flow;
pub mod geometry;
pub mod grid;
pub mod invariants;
pub mod linalg;
pub mod spectral;
pub mod surface;

pub use geometry::{BundleSpec, KahlerData};
pub use grid::{ComplexField, EigenField, GridSpec, HermitianField, RealField};
pub use linalg::CMat;
pub use spectral::Torus;
