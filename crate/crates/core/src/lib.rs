//! Gradient-scheme solver for the regularised total variation flow
//!
//! ```text
//! du/dt = div( grad u / sqrt(eps^2 + |grad u|^2) ) - lambda (u - g)   in (0, T) x Omega
//! ```
//!
//! with homogeneous Neumann boundary conditions, discretised by implicit Euler
//! in time and conforming P1 finite elements in space.

pub mod analysis;
pub mod assembly;
pub mod cli;
pub mod config;
pub mod diagnostics;
pub mod experiment;
pub mod gdm;
pub mod interpolator;
pub mod linalg;
pub mod mesh;
pub mod newton;
pub mod solver;

pub use assembly::quadrature::QuadratureRule;
pub use assembly::{FluxParams, ProblemData};
pub use gdm::{DiscreteField, GradientDiscretisation, P1Conforming};
pub use mesh::{QuasiUniformityReport, TriMesh};
pub use newton::NewtonConfig;
pub use solver::{InitialPolicy, SchemeParams, SolveReport, TimeGrid};
