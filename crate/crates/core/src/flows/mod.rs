//! Invertible flow units and their composition into a transport map.
//!
//! A [`FlowModel`] is an ordered stack of [`FlowUnit`]s, each an optional
//! [`ActNormLayer`] followed by one [`CouplingLayer`]. Unit `m` (0-based)
//! changes the first `ceil(d/2)` coordinates when `m` is even and the
//! remaining ones when `m` is odd, so consecutive units change
//! complementary halves.
//!
//! Batches are evaluated on a [`Tape`]; the numeric entry points
//! ([`FlowModel::forward`], [`FlowModel::inverse`], ...) build a throwaway
//! tape so training and inference share one code path.

mod actnorm;
mod coupling;
mod mlp;


pub use actnorm::ActNormLayer;
pub use coupling::CouplingLayer;
pub use mlp::Mlp;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::PointCloud;
use crate::diffcore::{jvp, DiffError, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("flow unit {unit}: {source}")]
    Unit {
        unit: usize,
        #[source]
        source: DiffError,
    },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("dimension mismatch: model has d={expected}, input has d={found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("ActNorm layers are not initialized")]
    NotInitialized,
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("unit index {0} out of range")]
    NoSuchUnit(usize),
    #[error(transparent)]
    Data(#[from] crate::datasets::DataError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPattern {
    #[default]
    AlternatingHalves,
}

fn default_hidden() -> Vec<usize> {
    vec![8, 8]
}

fn default_clamp() -> f64 {
    5.0
}

/// Architecture of a [`FlowModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Number of flow units `M`.
    pub flows: usize,
    /// Hidden widths of both conditioner networks.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub actnorm: bool,
    #[serde(default)]
    pub mask: MaskPattern,
    /// Bound `c` of the log-scale squashing `c * tanh(E / c)`.
    #[serde(default = "default_clamp")]
    pub scale_clamp: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            flows: 4,
            hidden: default_hidden(),
            actnorm: false,
            mask: MaskPattern::AlternatingHalves,
            scale_clamp: default_clamp(),
        }
    }
}

impl ModelSpec {
    pub fn validate(&self, dim: usize) -> Result<(), FlowError> {
        if self.flows == 0 {
            return Err(FlowError::InvalidSpec("at least one flow unit required".into()));
        }
        if dim < 2 {
            return Err(FlowError::InvalidSpec("coupling layers need d >= 2".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(FlowError::InvalidSpec("hidden widths must be non-empty and positive".into()));
        }
        if !(self.scale_clamp > 0.0 && self.scale_clamp.is_finite()) {
            return Err(FlowError::InvalidSpec("scale_clamp must be positive".into()));
        }
        Ok(())
    }

    /// Changed-coordinate mask of unit `m`.
    pub fn mask_for(&self, dim: usize, m: usize) -> Vec<bool> {
        let head = dim.div_ceil(2);
        (0..dim).map(|i| (i < head) == (m % 2 == 0)).collect()
    }
}

/// Which Jacobian-energy estimator to record alongside the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum JacobianEstimator {
    /// Block-analytic Frobenius norm.
    Exact,
    /// `E_v ||J v||^2` with Rademacher probes.
    Hutchinson { probes: usize },
}

/// One transport step `T_m`.
#[derive(Debug, Clone)]
pub struct FlowUnit {
    actnorm: Option<ActNormLayer>,
    coupling: CouplingLayer,
}

impl FlowUnit {
    pub fn actnorm(&self) -> Option<&ActNormLayer> {
        self.actnorm.as_ref()
    }

    pub fn coupling(&self) -> &CouplingLayer {
        &self.coupling
    }

    fn forward(&self, tape: &mut Tape, bound: &[Var], x: Var) -> Result<Var, DiffError> {
        let z = match &self.actnorm {
            Some(a) => a.forward(tape, bound, x)?,
            None => x,
        };
        self.coupling.forward(tape, bound, z)
    }

    fn forward_with_energy(
        &self,
        tape: &mut Tape,
        bound: &[Var],
        x: Var,
        estimator: JacobianEstimator,
        rng: &mut dyn RngCore,
    ) -> Result<(Var, Var), DiffError> {
        match estimator {
            JacobianEstimator::Exact => {
                let (z, s2) = match &self.actnorm {
                    Some(a) => (a.forward(tape, bound, x)?, Some(a.scale_sq(tape, bound)?)),
                    None => (x, None),
                };
                self.coupling.forward_with_energy(tape, bound, z, s2)
            }
            JacobianEstimator::Hutchinson { probes } => {
                if probes == 0 {
                    return Err(DiffError::InvalidArgument("Hutchinson estimator needs probes >= 1"));
                }
                let y = self.forward(tape, bound, x)?;
                let (n, d) = tape.shape(x);
                let mut acc: Option<Var> = None;
                for _ in 0..probes {
                    let v: Vec<f64> = (0..n * d)
                        .map(|_| if rng.next_u32() & 1 == 0 { -1.0 } else { 1.0 })
                        .collect();
                    let v = tape.leaf(Tensor::new(n, d, v)?)?;
                    let (_, jv) = jvp(tape, x, v, |t, x| self.forward(t, bound, x))?;
                    let sq = tape.square(jv)?;
                    let norm = tape.row_sum(sq)?;
                    acc = Some(match acc {
                        Some(a) => tape.add(a, norm)?,
                        None => norm,
                    });
                }
                let energy = tape.scale(acc.expect("probes >= 1"), 1.0 / probes as f64)?;
                Ok((y, energy))
            }
        }
    }

    fn inverse(&self, tape: &mut Tape, bound: &[Var], y: Var) -> Result<Var, DiffError> {
        let z = self.coupling.inverse(tape, bound, y)?;
        match &self.actnorm {
            Some(a) => a.inverse(tape, bound, z),
            None => Ok(z),
        }
    }
}

/// Outputs of every unit (`outputs[0]` is the input) plus optional
/// per-point Jacobian energies (`N x 1` each).
#[derive(Debug, Clone)]
pub struct FlowTrace {
    pub outputs: Vec<Var>,
    pub energies: Vec<Var>,
}

/// The transport map `T = T_M o ... o T_1`.
#[derive(Debug, Clone)]
pub struct FlowModel {
    spec: ModelSpec,
    dim: usize,
    units: Vec<FlowUnit>,
    params: ParamStore,
}

impl FlowModel {
    /// Builds a model whose units all start as the identity map.
    pub fn new<R: Rng + ?Sized>(dim: usize, spec: ModelSpec, rng: &mut R) -> Result<Self, FlowError> {
        spec.validate(dim)?;
        let mut params = ParamStore::new();
        let mut units = Vec::with_capacity(spec.flows);
        for m in 0..spec.flows {
            let prefix = format!("unit{m}");
            let actnorm = if spec.actnorm {
                Some(ActNormLayer::build(&mut params, &prefix, dim)?)
            } else {
                None
            };
            let coupling = CouplingLayer::build(
                &mut params,
                &prefix,
                spec.mask_for(dim, m),
                &spec.hidden,
                spec.scale_clamp,
                rng,
            )?;
            units.push(FlowUnit { actnorm, coupling });
        }
        Ok(Self {
            spec,
            dim,
            units,
            params,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_flows(&self) -> usize {
        self.units.len()
    }

    pub fn units(&self) -> &[FlowUnit] {
        &self.units
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn is_initialized(&self) -> bool {
        self.units
            .iter()
            .all(|u| u.actnorm.as_ref().is_none_or(ActNormLayer::is_initialized))
    }

    /// Initialization flag of each unit's ActNorm (`None` without ActNorm).
    pub fn actnorm_flags(&self) -> Vec<Option<bool>> {
        self.units
            .iter()
            .map(|u| u.actnorm.as_ref().map(ActNormLayer::is_initialized))
            .collect()
    }

    pub fn set_actnorm_flags(&mut self, flags: &[bool]) -> Result<(), FlowError> {
        if flags.len() != self.units.len() {
            return Err(FlowError::InvalidSpec("one ActNorm flag per unit required".into()));
        }
        for (u, &f) in self.units.iter_mut().zip(flags) {
            if let Some(a) = &mut u.actnorm {
                a.initialized = f;
            }
        }
        Ok(())
    }

    /// Data-dependent ActNorm initialization: each uninitialized layer is
    /// fitted to the activations it receives when `batch` flows through.
    pub fn initialize_actnorm(&mut self, batch: &PointCloud) -> Result<(), FlowError> {
        self.check_dim(batch)?;
        let mut current = batch.points().clone();
        for m in 0..self.units.len() {
            if let Some(a) = &mut self.units[m].actnorm {
                if !a.initialized {
                    a.initialize(&mut self.params, &current)?;
                }
            }
            let mut tape = Tape::new();
            let bound = tape.bind_all(&self.params)?;
            let x = tape.leaf(current)?;
            let y = self.units[m]
                .forward(&mut tape, &bound, x)
                .map_err(|source| FlowError::Unit { unit: m, source })?;
            current = tape.value(y).clone();
        }
        Ok(())
    }

    fn check_dim(&self, x: &PointCloud) -> Result<(), FlowError> {
        if x.dim() != self.dim {
            return Err(FlowError::DimensionMismatch {
                expected: self.dim,
                found: x.dim(),
            });
        }
        Ok(())
    }

    fn check_ready(&self, x: &PointCloud) -> Result<(), FlowError> {
        self.check_dim(x)?;
        if !self.is_initialized() {
            return Err(FlowError::NotInitialized);
        }
        Ok(())
    }

    /// Records all unit outputs for a batch already on `tape`. With an
    /// estimator, each unit's Jacobian energy is evaluated at that unit's
    /// own input.
    pub fn trace(
        &self,
        tape: &mut Tape,
        bound: &[Var],
        x: Var,
        estimator: Option<JacobianEstimator>,
        rng: &mut dyn RngCore,
    ) -> Result<FlowTrace, FlowError> {
        if !self.is_initialized() {
            return Err(FlowError::NotInitialized);
        }
        let mut outputs = Vec::with_capacity(self.units.len() + 1);
        let mut energies = Vec::new();
        outputs.push(x);
        let mut h = x;
        for (m, unit) in self.units.iter().enumerate() {
            let wrap = |source| FlowError::Unit { unit: m, source };
            h = match estimator {
                Some(est) => {
                    let (y, e) = unit
                        .forward_with_energy(tape, bound, h, est, rng)
                        .map_err(wrap)?;
                    energies.push(e);
                    y
                }
                None => unit.forward(tape, bound, h).map_err(wrap)?,
            };
            outputs.push(h);
        }
        Ok(FlowTrace { outputs, energies })
    }

    /// `T_[m](x)` for `m = 0..=M`; entry 0 is `x` itself.
    pub fn intermediate_outputs(&self, x: &PointCloud) -> Result<Vec<PointCloud>, FlowError> {
        self.check_ready(x)?;
        let mut tape = Tape::new();
        let bound = tape.bind_all(&self.params)?;
        let xv = tape.leaf(x.points().clone())?;
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let trace = self.trace(&mut tape, &bound, xv, None, &mut unused)?;
        trace
            .outputs
            .iter()
            .map(|&v| Ok(PointCloud::new(tape.value(v).clone())?))
            .collect()
    }

    /// `T(x) = T_M o ... o T_1 (x)`.
    pub fn forward(&self, x: &PointCloud) -> Result<PointCloud, FlowError> {
        Ok(self
            .intermediate_outputs(x)?
            .pop()
            .expect("at least one output"))
    }

    /// `T^{-1}(y)`, applying unit inverses in reverse order.
    pub fn inverse(&self, y: &PointCloud) -> Result<PointCloud, FlowError> {
        self.check_ready(y)?;
        let mut tape = Tape::new();
        let bound = tape.bind_all(&self.params)?;
        let mut h = tape.leaf(y.points().clone())?;
        for (m, unit) in self.units.iter().enumerate().rev() {
            h = unit
                .inverse(&mut tape, &bound, h)
                .map_err(|source| FlowError::Unit { unit: m, source })?;
        }
        Ok(PointCloud::new(tape.value(h).clone())?)
    }

    /// Per-point `||J_{T_m}(x)||_F^2` for unit `m`, where `x` is that unit's
    /// input `T_[m-1](x_n)`.
    pub fn unit_jacobian_frobenius_sq(
        &self,
        m: usize,
        x: &PointCloud,
        estimator: JacobianEstimator,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<f64>, FlowError> {
        self.check_ready(x)?;
        let unit = self.units.get(m).ok_or(FlowError::NoSuchUnit(m))?;
        let mut tape = Tape::new();
        let bound = tape.bind_all(&self.params)?;
        let xv = tape.leaf(x.points().clone())?;
        let (_, e) = unit
            .forward_with_energy(&mut tape, &bound, xv, estimator, rng)
            .map_err(|source| FlowError::Unit { unit: m, source })?;
        Ok(tape.value(e).data().to_vec())
    }

    /// Applies unit `m` alone.
    pub fn unit_forward(&self, m: usize, x: &PointCloud) -> Result<PointCloud, FlowError> {
        self.check_ready(x)?;
        let unit = self.units.get(m).ok_or(FlowError::NoSuchUnit(m))?;
        let mut tape = Tape::new();
        let bound = tape.bind_all(&self.params)?;
        let xv = tape.leaf(x.points().clone())?;
        let y = unit
            .forward(&mut tape, &bound, xv)
            .map_err(|source| FlowError::Unit { unit: m, source })?;
        Ok(PointCloud::new(tape.value(y).clone())?)
    }

    /// Adds uniform noise in `[-scale, scale]` to every parameter entry.
    pub fn perturb<R: Rng + ?Sized>(&mut self, rng: &mut R, scale: f64) {
        let ids: Vec<_> = self.params.ids().collect();
        for id in ids {
            for v in self.params.value_mut(id).data_mut() {
                *v += rng.random_range(-scale..=scale);
            }
        }
    }
}
