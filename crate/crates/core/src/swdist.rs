//! Sliced-Wasserstein distance between equal-size empirical measures.
//!
//! Both measures carry weights `1/N`, so the 1D distance along a slice is
//! the mean of `|a_(i) - b_(i)|^p` over matched order statistics. The
//! numeric routines return the distance itself; [`sliced_wasserstein_pow`]
//! records `SW_p^p` on a tape, differentiating through the sorting
//! permutation fixed at forward time.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::datasets::PointCloud;
use crate::diffcore::{DiffError, Tape, Tensor, Var};

#[derive(Debug, Error, PartialEq)]
pub enum SwError {
    #[error("sample sizes differ: {0} vs {1}")]
    SizeMismatch(usize, usize),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("order p must be finite and >= 1, got {0}")]
    InvalidOrder(f64),
    #[error("need at least one sample and one slice")]
    Empty,
    #[error("projection {0} is not a unit vector")]
    NotUnit(usize),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

fn check_order(p: f64) -> Result<(), SwError> {
    if p.is_finite() && p >= 1.0 {
        Ok(())
    } else {
        Err(SwError::InvalidOrder(p))
    }
}

/// `J` unit directions in `R^d` (stored as rows) and the order `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    directions: Tensor,
    p: f64,
}

impl ProjectionSet {
    pub fn new(directions: Tensor, p: f64) -> Result<Self, SwError> {
        check_order(p)?;
        if directions.is_empty() {
            return Err(SwError::Empty);
        }
        for j in 0..directions.rows() {
            let norm: f64 = directions.row(j).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-12 {
                return Err(SwError::NotUnit(j));
            }
        }
        Ok(Self { directions, p })
    }

    pub fn len(&self) -> usize {
        self.directions.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.directions.cols()
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    /// `J x d`, one direction per row.
    pub fn directions(&self) -> &Tensor {
        &self.directions
    }
}

/// `u_j = g_j / |g_j|` with standard Gaussian `g_j`.
pub fn sample_projections<R: Rng + ?Sized>(
    count: usize,
    dim: usize,
    p: f64,
    rng: &mut R,
) -> Result<ProjectionSet, SwError> {
    check_order(p)?;
    if count == 0 || dim == 0 {
        return Err(SwError::Empty);
    }
    let mut data = Vec::with_capacity(count * dim);
    let mut g = vec![0.0; dim];
    for _ in 0..count {
        let norm = loop {
            for v in g.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                break norm;
            }
        };
        data.extend(g.iter().map(|v| v / norm));
    }
    ProjectionSet::new(Tensor::new(count, dim, data)?, p)
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Mean of `|a_(i) - b_(i)|^p` over sorted samples.
fn sorted_cost(a: &[f64], b: &[f64], p: f64) -> f64 {
    let total: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let d = (x - y).abs();
            if p == 2.0 {
                d * d
            } else {
                d.powf(p)
            }
        })
        .sum();
    total / a.len() as f64
}

/// `W_p` between two equal-size samples on the line.
pub fn wasserstein_1d(a: &[f64], b: &[f64], p: f64) -> Result<f64, SwError> {
    check_order(p)?;
    if a.len() != b.len() {
        return Err(SwError::SizeMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(SwError::Empty);
    }
    Ok(sorted_cost(&sorted(a), &sorted(b), p).powf(1.0 / p))
}

fn check_clouds(x: &Tensor, y: &Tensor, proj: &ProjectionSet) -> Result<(), SwError> {
    if x.rows() != y.rows() {
        return Err(SwError::SizeMismatch(x.rows(), y.rows()));
    }
    for c in [x.cols(), y.cols()] {
        if c != proj.dim() {
            return Err(SwError::DimensionMismatch {
                expected: proj.dim(),
                found: c,
            });
        }
    }
    Ok(())
}

/// Projections `x u_j` as `N x J`.
fn project(x: &Tensor, proj: &ProjectionSet) -> Tensor {
    x.matmul(&proj.directions.transpose())
        .expect("dimensions checked")
}

fn column(t: &Tensor, j: usize) -> Vec<f64> {
    (0..t.rows()).map(|i| t.get(i, j)).collect()
}

/// Per-slice `W_p^p`, computed in parallel and returned in slice order.
pub fn slice_costs(x: &Tensor, y: &Tensor, proj: &ProjectionSet) -> Result<Vec<f64>, SwError> {
    check_clouds(x, y, proj)?;
    let (px, py) = (project(x, proj), project(y, proj));
    Ok((0..proj.len())
        .into_par_iter()
        .map(|j| sorted_cost(&sorted(&column(&px, j)), &sorted(&column(&py, j)), proj.p))
        .collect())
}

/// `SW_p(x, y)` estimated on the given slices.
pub fn sliced_wasserstein(x: &PointCloud, y: &PointCloud, proj: &ProjectionSet) -> Result<f64, SwError> {
    let costs = slice_costs(x.points(), y.points(), proj)?;
    let mean = costs.iter().sum::<f64>() / costs.len() as f64;
    Ok(mean.powf(1.0 / proj.p))
}

/// Stable argsort of every column of `t`.
fn column_orders(t: &Tensor) -> Vec<Vec<usize>> {
    (0..t.cols())
        .into_par_iter()
        .map(|j| {
            let mut idx: Vec<usize> = (0..t.rows()).collect();
            idx.sort_by(|&a, &b| t.get(a, j).total_cmp(&t.get(b, j)));
            idx
        })
        .collect()
}

/// Records `SW_p^p(x, y)` on `tape`; gradients flow into `x` only.
pub fn sliced_wasserstein_pow(
    tape: &mut Tape,
    x: Var,
    y: &Tensor,
    proj: &ProjectionSet,
) -> Result<Var, SwError> {
    let (n, j) = (y.rows(), proj.len());
    check_clouds(tape.value(x), y, proj)?;
    let dirs = tape.leaf(proj.directions.transpose())?;
    let px = tape.matmul(x, dirs)?;
    let orders = column_orders(tape.value(px));
    let mut index = vec![0; n * j];
    for (col, order) in orders.iter().enumerate() {
        for (r, &src) in order.iter().enumerate() {
            index[r * j + col] = src * j + col;
        }
    }
    let sorted_x = tape.gather(px, index, n, j)?;

    let py = project(y, proj);
    let mut sorted_y = Tensor::zeros(n, j);
    for col in 0..j {
        for (r, v) in sorted(&column(&py, col)).into_iter().enumerate() {
            sorted_y.set(r, col, v);
        }
    }
    let sorted_y = tape.leaf(sorted_y)?;
    let diff = tape.sub(sorted_x, sorted_y)?;
    let powered = tape.abs_pow(diff, proj.p)?;
    Ok(tape.mean(powered)?)
}
