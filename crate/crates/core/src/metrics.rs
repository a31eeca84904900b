//! Evaluation of learned transports.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::datasets::PointCloud;
use crate::flows::{FlowError, FlowModel};
use crate::otoracle::{mle_gaussian_fit, GaussianParams, OracleError};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("vector {index} of the {which} set has zero norm")]
    ZeroNorm { which: &'static str, index: usize },
    #[error("invalid arguments: {0}")]
    Invalid(String),
}

/// Mean squared displacement of every unit and their sum.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostBreakdown {
    pub per_flow: Vec<f64>,
    pub total: f64,
}

impl CostBreakdown {
    pub fn from_costs(per_flow: Vec<f64>) -> Self {
        let total = per_flow.iter().sum();
        Self { per_flow, total }
    }

    /// Largest relative deviation of a unit's cost from the mean cost.
    pub fn max_relative_spread(&self) -> f64 {
        let mean = self.total / self.per_flow.len() as f64;
        self.per_flow
            .iter()
            .map(|c| (c - mean).abs() / mean)
            .fold(0.0, f64::max)
    }
}

fn mean_sq_displacement(a: &PointCloud, b: &PointCloud) -> f64 {
    let total: f64 = (0..a.len())
        .map(|i| {
            a.point(i)
                .iter()
                .zip(b.point(i))
                .map(|(u, v)| (u - v) * (u - v))
                .sum::<f64>()
        })
        .sum();
    total / a.len() as f64
}

/// `c_m = mean_n |T_[m-1](x_n) - T_[m](x_n)|^2` for every unit.
pub fn elementary_costs(model: &FlowModel, x: &PointCloud) -> Result<CostBreakdown, MetricsError> {
    let stages = model.intermediate_outputs(x)?;
    Ok(CostBreakdown::from_costs(
        stages
            .windows(2)
            .map(|w| mean_sq_displacement(&w[0], &w[1]))
            .collect(),
    ))
}

/// Squared errors of the fitted mean and covariance against `reference`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BarycenterError {
    pub mean: f64,
    pub covariance: f64,
}

pub fn barycenter_mse(samples: &PointCloud, reference: &GaussianParams) -> Result<BarycenterError, MetricsError> {
    if samples.dim() != reference.dim() {
        return Err(MetricsError::Invalid(format!(
            "samples have d={}, reference has d={}",
            samples.dim(),
            reference.dim()
        )));
    }
    let fit = mle_gaussian_fit(samples)?;
    Ok(BarycenterError {
        mean: (fit.mean - reference.mean_vector()).norm_squared(),
        covariance: (fit.covariance - reference.covariance_matrix()).norm_squared(),
    })
}

fn normalized(cloud: &PointCloud, which: &'static str) -> Result<Vec<Vec<f64>>, MetricsError> {
    (0..cloud.len())
        .map(|i| {
            let p = cloud.point(i);
            let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                Err(MetricsError::ZeroNorm { which, index: i })
            } else {
                Ok(p.iter().map(|v| v / norm).collect())
            }
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

/// Percentage of rows `n` of `transported` whose true counterpart
/// `targets[pairing[n]]` ranks among the `k` targets of highest cosine
/// similarity to it. Ties count in the counterpart's favor.
pub fn knn_accuracy(
    transported: &PointCloud,
    targets: &PointCloud,
    pairing: &[usize],
    k: usize,
) -> Result<f64, MetricsError> {
    if pairing.len() != transported.len() {
        return Err(MetricsError::Invalid("one pairing entry per transported point".into()));
    }
    if transported.dim() != targets.dim() {
        return Err(MetricsError::Invalid("transported and target dimensions differ".into()));
    }
    if k == 0 || k > targets.len() {
        return Err(MetricsError::Invalid(format!("K must lie in 1..={}", targets.len())));
    }
    if let Some(&bad) = pairing.iter().find(|&&j| j >= targets.len()) {
        return Err(MetricsError::Invalid(format!("pairing index {bad} out of range")));
    }
    let q = normalized(transported, "transported")?;
    let t = normalized(targets, "target")?;
    let hits: usize = (0..q.len())
        .into_par_iter()
        .map(|n| {
            let truth = dot(&q[n], &t[pairing[n]]);
            let better = t.iter().filter(|tj| dot(&q[n], tj) > truth).count();
            usize::from(better < k)
        })
        .sum();
    Ok(100.0 * hits as f64 / q.len() as f64)
}

/// Largest coordinate error of `inverse_model(forward_model(x))` against
/// `x`; with one model this is the cycle-consistency error.
pub fn round_trip_error(
    forward_model: &FlowModel,
    inverse_model: &FlowModel,
    x: &PointCloud,
) -> Result<f64, MetricsError> {
    let back = inverse_model.inverse(&forward_model.forward(x)?)?;
    Ok(back
        .points()
        .data()
        .iter()
        .zip(x.points().data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

/// `max_n |T^{-1}(T(x_n)) - x_n|_inf`.
pub fn cycle_consistency_error(model: &FlowModel, x: &PointCloud) -> Result<f64, MetricsError> {
    round_trip_error(model, model, x)
}
