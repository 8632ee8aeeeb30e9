//! Fractional mean curvature flow of star-shaped hypersurfaces in the half-space
//! with a capillary contact-angle condition on the supporting hyperplane.
//!
//! Surfaces are written radially over the upper hemisphere, `x -> rho(x) x`. The
//! evolution of `rho` couples a principal-value fractional Laplacian with
//! nonlinear remainder terms obtained from a homotopy between the unit
//! hemisphere and the current surface. Time stepping is backward Euler in the
//! fractional Laplacian with the remainder frozen inside a fixed-point loop.
//!
//! Modules:
//! - [`geometry`]: hemisphere / sphere grids, reflection, tangential calculus, quadrature.
//! - [`nonlocal`]: kernels, fractional Laplacian, remainder terms, curvature oracles.
//! - [`flow`]: the evolution equation, boundary condition and time stepper.
//! - [`diagnostics`]: Hölder norms, interpolation, divergence identity, volume.
//! - [`io`], [`validate`]: configuration, snapshots and the validation suites used by the CLI.

pub mod diagnostics;
pub mod error;
pub mod flow;
pub mod geometry;
pub mod io;
pub mod nonlocal;
#[cfg(test)]
mod proptests;
pub mod quadrature;
pub mod validate;

pub use error::{FlowError, Result};
pub use flow::{FlowConfig, FlowSolver, FlowState, HsRefMode, Trajectory};
pub use geometry::{RadialField, SphereGrid, Topology};
pub use nonlocal::{HomotopyRule, KernelParams};
