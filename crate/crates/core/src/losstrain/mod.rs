//! Training objective, optimizer and the staged training loop.
//!
//! The loss on a batch is
//!
//! ```text
//! fidelity(T(x), y) + (1/N) sum_n sum_m [ lambda c(T_[m-1] x_n, T_[m] x_n)
//!                                        + gamma |J_{T_m}(T_[m-1] x_n)|_F^2 ]
//! ```
//!
//! where the fidelity is `SW_p^p` against target samples or, in the
//! semi-discrete variant, the mean negative log-likelihood under a
//! Gaussian target density.

mod adam;
mod train;

pub use adam::{AdamState, BETA1, BETA2, EPSILON};
pub use train::{
    read_history_csv, train, write_history_csv, EpochRecord, Schedule, Target, TrainError,
    TrainOutcome, HISTORY_COLUMNS,
};

use nalgebra::DMatrix;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::PointCloud;
use crate::diffcore::{finite_diff_check, DiffError, GradCheck, ParamStore, Tape, Tensor, Var};
use crate::flows::{FlowError, FlowModel, JacobianEstimator};
use crate::otoracle::{GaussianParams, OracleError};
use crate::swdist::{sliced_wasserstein_pow, ProjectionSet, SwError};

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Sliced(#[from] SwError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("batch sizes differ: {0} vs {1}")]
    SizeMismatch(usize, usize),
    #[error("dimension mismatch: model has d={expected}, data has d={found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid loss configuration: {0}")]
    InvalidConfig(String),
}

fn default_lambda() -> f64 {
    0.05
}

fn default_gamma() -> f64 {
    0.01
}

fn default_two() -> f64 {
    2.0
}

fn default_true() -> bool {
    true
}

fn default_estimator() -> JacobianEstimator {
    JacobianEstimator::Exact
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the per-unit transport cost.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Weight of the per-unit Jacobian energy.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Order of the sliced-Wasserstein fidelity.
    #[serde(default = "default_two")]
    pub p: f64,
    /// Transport cost is `|x - y|^cost_exponent`.
    #[serde(default = "default_two")]
    pub cost_exponent: f64,
    #[serde(default = "default_true")]
    pub regularization: bool,
    /// Replace the sliced fidelity with a Gaussian negative log-likelihood.
    #[serde(default)]
    pub semi_discrete: bool,
    #[serde(default = "default_estimator")]
    pub jacobian: JacobianEstimator,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: default_lambda(),
            gamma: default_gamma(),
            p: 2.0,
            cost_exponent: 2.0,
            regularization: true,
            semi_discrete: false,
            jacobian: JacobianEstimator::Exact,
        }
    }
}

impl LossConfig {
    /// Fidelity only.
    pub fn unregularized() -> Self {
        Self {
            lambda: 0.0,
            gamma: 0.0,
            regularization: false,
            ..Self::default()
        }
    }

    pub fn with_weights(lambda: f64, gamma: f64) -> Self {
        Self {
            lambda,
            gamma,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let bad = |m: &str| Err(LossError::InvalidConfig(m.into()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and >= 0");
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be finite and >= 0");
        }
        if !(self.p >= 1.0 && self.p.is_finite()) {
            return bad("p must be finite and >= 1");
        }
        if !(self.cost_exponent >= 2.0 && self.cost_exponent.is_finite()) {
            return bad("cost_exponent must be finite and >= 2");
        }
        if let JacobianEstimator::Hutchinson { probes: 0 } = self.jacobian {
            return bad("Hutchinson estimator needs at least one probe");
        }
        Ok(())
    }

    /// Weights actually applied: zero when regularization is disabled.
    pub fn effective_weights(&self) -> (f64, f64) {
        if self.regularization {
            (self.lambda, self.gamma)
        } else {
            (0.0, 0.0)
        }
    }
}

/// Numeric breakdown of one loss evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    /// `SW_p^p` (or the negative log-likelihood in semi-discrete mode).
    pub fidelity: f64,
    /// `SW_p`, the root of the fidelity; absent in semi-discrete mode.
    pub sw: Option<f64>,
    pub flow_costs: Vec<f64>,
    pub jacobian_energies: Vec<f64>,
    /// Number of slices used (0 in semi-discrete mode).
    pub slices: usize,
    pub lambda: f64,
    pub gamma: f64,
}

impl LossReport {
    /// `fidelity + lambda * sum(costs) + gamma * sum(energies)`.
    pub fn recomposed_total(&self) -> f64 {
        self.fidelity
            + self.lambda * self.flow_costs.iter().sum::<f64>()
            + self.gamma * self.jacobian_energies.iter().sum::<f64>()
    }

    /// Entry-wise mean of several reports (all with the same `M`).
    pub fn mean(reports: &[LossReport]) -> Option<LossReport> {
        let first = reports.first()?;
        let k = reports.len() as f64;
        let avg = |f: &dyn Fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
        let avg_vec = |f: &dyn Fn(&LossReport) -> &Vec<f64>| {
            (0..f(first).len())
                .map(|m| reports.iter().map(|r| f(r)[m]).sum::<f64>() / k)
                .collect::<Vec<_>>()
        };
        let fidelity = avg(&|r| r.fidelity);
        let lambda = first.lambda;
        let gamma = first.gamma;
        let flow_costs = avg_vec(&|r| &r.flow_costs);
        let jacobian_energies = avg_vec(&|r| &r.jacobian_energies);
        let mut out = LossReport {
            total: 0.0,
            fidelity,
            sw: first.sw.map(|_| avg(&|r| r.sw.unwrap_or(0.0))),
            flow_costs,
            jacobian_energies,
            slices: first.slices,
            lambda,
            gamma,
        };
        out.total = out.recomposed_total();
        Some(out)
    }
}

/// What the transported batch is compared against.
#[derive(Debug, Clone, Copy)]
pub enum Fidelity<'a> {
    Sliced {
        target: &'a Tensor,
        projections: &'a ProjectionSet,
    },
    Gaussian(&'a GaussianParams),
}

/// Tape handles for every term of the loss.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Var,
    pub fidelity: Var,
    pub costs: Vec<Var>,
    pub energies: Vec<Var>,
}

/// Mean Gaussian negative log-likelihood of the rows of `x`.
fn gaussian_nll(tape: &mut Tape, x: Var, target: &GaussianParams) -> Result<Var, LossError> {
    target.validate()?;
    let (n, d) = tape.shape(x);
    if d != target.dim() {
        return Err(LossError::DimensionMismatch {
            expected: d,
            found: target.dim(),
        });
    }
    let chol = nalgebra::Cholesky::new(target.covariance_matrix()).ok_or(OracleError::NotSpd(0.0))?;
    let l_inv = chol
        .l()
        .try_inverse()
        .ok_or(OracleError::NotSpd(0.0))?;
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let constant = 0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
    // Rows: z_n = (x_n - mu) L^{-T}.
    let l_inv_t: DMatrix<f64> = l_inv.transpose();
    let whiten = Tensor::new(d, d, (0..d * d).map(|k| l_inv_t[(k / d, k % d)]).collect())?;
    let neg_mean = Tensor::row_vector(target.mean.iter().map(|m| -m).collect());
    let neg_mean = tape.leaf(neg_mean)?;
    let centered = tape.add_row(x, neg_mean)?;
    let whiten = tape.leaf(whiten)?;
    let z = tape.matmul(centered, whiten)?;
    let sq = tape.square(z)?;
    let total = tape.sum(sq)?;
    Ok(tape.scale_shift(total, 0.5 / n as f64, constant)?)
}

/// Records the full loss for a batch on `tape`, with parameters already
/// bound as `bound`.
#[allow(clippy::too_many_arguments)]
pub fn record_loss(
    tape: &mut Tape,
    model: &FlowModel,
    bound: &[Var],
    x: &Tensor,
    fidelity: Fidelity<'_>,
    cfg: &LossConfig,
    probe_rng: &mut dyn RngCore,
) -> Result<LossTerms, LossError> {
    cfg.validate()?;
    if x.cols() != model.dim() {
        return Err(LossError::DimensionMismatch {
            expected: model.dim(),
            found: x.cols(),
        });
    }
    let n = x.rows();
    let (lambda, gamma) = cfg.effective_weights();
    let xv = tape.leaf(x.clone())?;
    let trace = model.trace(tape, bound, xv, Some(cfg.jacobian), probe_rng)?;
    let out = *trace.outputs.last().expect("at least one output");

    let fid = match fidelity {
        Fidelity::Sliced {
            target,
            projections,
        } => {
            if target.rows() != n {
                return Err(LossError::SizeMismatch(n, target.rows()));
            }
            sliced_wasserstein_pow(tape, out, target, projections)?
        }
        Fidelity::Gaussian(g) => gaussian_nll(tape, out, g)?,
    };

    let mut costs = Vec::with_capacity(model.num_flows());
    for pair in trace.outputs.windows(2) {
        let step = tape.sub(pair[1], pair[0])?;
        let sq = tape.square(step)?;
        let mut per_point = tape.row_sum(sq)?;
        if cfg.cost_exponent != 2.0 {
            per_point = tape.abs_pow(per_point, cfg.cost_exponent / 2.0)?;
        }
        costs.push(tape.mean(per_point)?);
    }
    let energies = trace
        .energies
        .iter()
        .map(|&e| tape.mean(e))
        .collect::<Result<Vec<_>, _>>()?;

    let mut total = fid;
    if lambda > 0.0 {
        for &c in &costs {
            let w = tape.scale(c, lambda)?;
            total = tape.add(total, w)?;
        }
    }
    if gamma > 0.0 {
        for &e in &energies {
            let w = tape.scale(e, gamma)?;
            total = tape.add(total, w)?;
        }
    }
    Ok(LossTerms {
        total,
        fidelity: fid,
        costs,
        energies,
    })
}

fn report_from(tape: &Tape, terms: &LossTerms, cfg: &LossConfig, fidelity: Fidelity<'_>) -> LossReport {
    let item = |v: Var| tape.value(v).item().expect("scalar");
    let (lambda, gamma) = cfg.effective_weights();
    let fid = item(terms.fidelity);
    let (sw, slices) = match fidelity {
        Fidelity::Sliced { projections, .. } => (Some(fid.powf(1.0 / projections.p())), projections.len()),
        Fidelity::Gaussian(_) => (None, 0),
    };
    LossReport {
        total: item(terms.total),
        fidelity: fid,
        sw,
        flow_costs: terms.costs.iter().map(|&c| item(c)).collect(),
        jacobian_energies: terms.energies.iter().map(|&e| item(e)).collect(),
        slices,
        lambda,
        gamma,
    }
}

/// Evaluates the loss and writes its parameter gradients into the model.
pub fn loss_and_gradients(
    model: &mut FlowModel,
    x: &Tensor,
    fidelity: Fidelity<'_>,
    cfg: &LossConfig,
    probe_rng: &mut dyn RngCore,
) -> Result<LossReport, LossError> {
    let mut tape = Tape::new();
    let bound = tape.bind_all(model.params())?;
    let terms = record_loss(&mut tape, model, &bound, x, fidelity, cfg, probe_rng)?;
    tape.backward(terms.total, model.params_mut())?;
    Ok(report_from(&tape, &terms, cfg, fidelity))
}

fn evaluate(
    model: &FlowModel,
    x: &PointCloud,
    fidelity: Fidelity<'_>,
    cfg: &LossConfig,
) -> Result<LossReport, LossError> {
    let mut tape = Tape::new();
    let bound = tape.bind_all(model.params())?;
    let mut probes = probe_stream();
    let terms = record_loss(&mut tape, model, &bound, x.points(), fidelity, cfg, &mut probes)?;
    Ok(report_from(&tape, &terms, cfg, fidelity))
}

/// Fixed probe stream for one-off evaluations.
fn probe_stream() -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(0)
}

/// Sliced-Wasserstein loss of `model` on a pair of equal-size batches.
pub fn swot_loss(
    model: &FlowModel,
    batch_x: &PointCloud,
    batch_y: &PointCloud,
    projections: &ProjectionSet,
    cfg: &LossConfig,
) -> Result<LossReport, LossError> {
    if batch_x.len() != batch_y.len() {
        return Err(LossError::SizeMismatch(batch_x.len(), batch_y.len()));
    }
    if batch_y.dim() != model.dim() {
        return Err(LossError::DimensionMismatch {
            expected: model.dim(),
            found: batch_y.dim(),
        });
    }
    evaluate(
        model,
        batch_x,
        Fidelity::Sliced {
            target: batch_y.points(),
            projections,
        },
        cfg,
    )
}

/// Loss with a Gaussian log-likelihood fidelity instead of target samples.
pub fn semi_discrete_loss(
    model: &FlowModel,
    batch_x: &PointCloud,
    target: &GaussianParams,
    cfg: &LossConfig,
) -> Result<LossReport, LossError> {
    evaluate(model, batch_x, Fidelity::Gaussian(target), cfg)
}

/// Compares the loss gradient with central differences over every
/// parameter entry.
pub fn loss_gradcheck(
    model: &FlowModel,
    x: &PointCloud,
    fidelity: Fidelity<'_>,
    cfg: &LossConfig,
    step: f64,
) -> Result<GradCheck, LossError> {
    finite_diff_check::<LossError, _>(model.params(), step, |tape, params: &ParamStore| {
        let bound = tape.bind_all(params)?;
        let mut probes = probe_stream();
        Ok(record_loss(tape, model, &bound, x.points(), fidelity, cfg, &mut probes)?.total)
    })
}
