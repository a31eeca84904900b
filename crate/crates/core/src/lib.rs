//! Learning optimal-transport maps between empirical point clouds with
//! invertible flow networks.
//!
//! The transport map is a stack of affine coupling units (optionally with
//! ActNorm) trained on a sliced-Wasserstein fidelity term plus per-unit
//! transport costs and Jacobian energies. Each partial composition of units
//! is an intermediate transport that approximates a Wasserstein barycenter
//! between source and target. Exact discrete OT and Gaussian closed forms
//! in [`otoracle`] serve as ground truth.

pub mod datasets;
pub mod diffcore;
pub mod flows;
pub mod losstrain;
pub mod metrics;
pub mod otoracle;
pub mod swdist;

pub use datasets::PointCloud;
pub use diffcore::{ParamStore, Tape, Tensor, Var};
pub use flows::{FlowModel, ModelSpec};
pub use losstrain::{LossConfig, LossReport, Schedule};
pub use otoracle::GaussianParams;
pub use swdist::ProjectionSet;
