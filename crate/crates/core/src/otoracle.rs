//! Reference solutions: exact discrete OT and Gaussian closed forms.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::PointCloud;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("sample sizes differ: {0} vs {1}")]
    SizeMismatch(usize, usize),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("matrix is not symmetric positive definite (min eigenvalue {0:e})")]
    NotSpd(f64),
    #[error("matrix is not symmetric")]
    NotSymmetric,
    #[error("fixed point did not converge in {0} iterations")]
    NoConvergence(usize),
    #[error("weight must lie in [0, 1], got {0}")]
    InvalidWeight(f64),
    #[error("assignment size {0} exceeds the solver budget of {MAX_ASSIGNMENT}")]
    TooLarge(usize),
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
}

/// Largest instance accepted by [`exact_ot_discrete`].
pub const MAX_ASSIGNMENT: usize = 4096;

/// Eigenvalues below this are treated as singular.
pub const EIGEN_FLOOR: f64 = 1e-12;

/// A permutation `target = permutation[source]` and its mean cost.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub permutation: Vec<usize>,
    pub cost: f64,
}

fn pair_cost(a: &[f64], b: &[f64], p: f64) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum();
    if p == 2.0 {
        sq
    } else {
        sq.sqrt().powf(p)
    }
}

fn cost_matrix(x: &PointCloud, y: &PointCloud, p: f64) -> Vec<Vec<f64>> {
    (0..x.len())
        .map(|i| (0..y.len()).map(|j| pair_cost(x.point(i), y.point(j), p)).collect())
        .collect()
}

/// Minimum-cost perfect matching on a square cost matrix
/// (shortest augmenting paths with potentials, `O(n^3)`).
pub fn solve_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    // 1-based arrays; index 0 is the virtual root column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[row_of[j] - 1] = j - 1;
    }
    perm
}

/// Optimal matching between two equal-size clouds under `|x - y|^p`.
pub fn exact_ot_discrete(x: &PointCloud, y: &PointCloud, p: f64) -> Result<Assignment, OracleError> {
    if x.len() != y.len() {
        return Err(OracleError::SizeMismatch(x.len(), y.len()));
    }
    if x.dim() != y.dim() {
        return Err(OracleError::DimensionMismatch {
            expected: x.dim(),
            found: y.dim(),
        });
    }
    if x.len() > MAX_ASSIGNMENT {
        return Err(OracleError::TooLarge(x.len()));
    }
    let cost = cost_matrix(x, y, p);
    let permutation = solve_assignment(&cost);
    let total: f64 = permutation.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    Ok(Assignment {
        cost: total / x.len() as f64,
        permutation,
    })
}

/// Mean and SPD covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub mean: Vec<f64>,
    /// Row-major `d x d`.
    pub covariance: Vec<Vec<f64>>,
}

impl GaussianParams {
    pub fn new(mean: Vec<f64>, covariance: Vec<Vec<f64>>) -> Result<Self, OracleError> {
        let g = Self { mean, covariance };
        g.validate()?;
        Ok(g)
    }

    pub fn isotropic(mean: Vec<f64>, variance: f64) -> Result<Self, OracleError> {
        let d = mean.len();
        let cov = (0..d)
            .map(|i| (0..d).map(|j| if i == j { variance } else { 0.0 }).collect())
            .collect();
        Self::new(mean, cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.mean)
    }

    pub fn covariance_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_fn(d, d, |i, j| self.covariance[i][j])
    }

    pub fn from_parts(mean: &DVector<f64>, cov: &DMatrix<f64>) -> Self {
        Self {
            mean: mean.iter().copied().collect(),
            covariance: (0..cov.nrows())
                .map(|i| (0..cov.ncols()).map(|j| cov[(i, j)]).collect())
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<(), OracleError> {
        let d = self.dim();
        if self.covariance.len() != d || self.covariance.iter().any(|r| r.len() != d) {
            return Err(OracleError::DimensionMismatch {
                expected: d,
                found: self.covariance.len(),
            });
        }
        let m = self.covariance_matrix();
        check_symmetric(&m)?;
        let min = SymmetricEigen::new(m).eigenvalues.min();
        if !(min > EIGEN_FLOOR) {
            return Err(OracleError::NotSpd(min));
        }
        Ok(())
    }

    /// `log` of the density at `x`.
    pub fn log_density(&self, x: &[f64]) -> Result<f64, OracleError> {
        let d = self.dim();
        let chol = nalgebra::Cholesky::new(self.covariance_matrix()).ok_or(OracleError::NotSpd(0.0))?;
        let diff = DVector::from_column_slice(x) - self.mean_vector();
        let z = chol.l().solve_lower_triangular(&diff).expect("non-singular");
        let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(-0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + z.norm_squared()))
    }
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<(), OracleError> {
    if !m.is_square() {
        return Err(OracleError::NotSymmetric);
    }
    let scale = m.amax().max(1.0);
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * scale {
                return Err(OracleError::NotSymmetric);
            }
        }
    }
    Ok(())
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

fn spectral(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> Result<DMatrix<f64>, OracleError> {
    check_symmetric(m)?;
    let eig = SymmetricEigen::new(symmetrize(m.clone()));
    let min = eig.eigenvalues.min();
    if min < EIGEN_FLOOR {
        return Err(OracleError::NotSpd(min));
    }
    let vals = eig.eigenvalues.map(f);
    let q = &eig.eigenvectors;
    Ok(symmetrize(q * DMatrix::from_diagonal(&vals) * q.transpose()))
}

/// Symmetric square root via eigendecomposition.
pub fn spd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>, OracleError> {
    spectral(m, f64::sqrt)
}

/// Symmetric inverse square root.
pub fn spd_inv_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>, OracleError> {
    spectral(m, |v| 1.0 / v.sqrt())
}

fn same_dim(a: &GaussianParams, b: &GaussianParams) -> Result<(), OracleError> {
    if a.dim() != b.dim() {
        return Err(OracleError::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    Ok(())
}

/// Bures cross term `tr (S2^{1/2} S1 S2^{1/2})^{1/2}`.
fn bures_cross(s1: &DMatrix<f64>, s2: &DMatrix<f64>) -> Result<f64, OracleError> {
    let r2 = spd_sqrt(s2)?;
    let inner = symmetrize(&r2 * s1 * &r2);
    Ok(spd_sqrt(&inner)?.trace())
}

/// Squared 2-Wasserstein distance between Gaussians.
pub fn gaussian_w2_sq(g1: &GaussianParams, g2: &GaussianParams) -> Result<f64, OracleError> {
    same_dim(g1, g2)?;
    g1.validate()?;
    g2.validate()?;
    let (s1, s2) = (g1.covariance_matrix(), g2.covariance_matrix());
    let mean_term = (g1.mean_vector() - g2.mean_vector()).norm_squared();
    let cov_term = s1.trace() + s2.trace() - 2.0 * bures_cross(&s1, &s2)?;
    Ok(mean_term + cov_term.max(0.0))
}

pub fn gaussian_w2(g1: &GaussianParams, g2: &GaussianParams) -> Result<f64, OracleError> {
    gaussian_w2_sq(g1, g2).map(f64::sqrt)
}

/// One step of the barycenter fixed-point map.
pub fn barycenter_step(
    sigma: &DMatrix<f64>,
    s1: &DMatrix<f64>,
    s2: &DMatrix<f64>,
    alpha: f64,
) -> Result<DMatrix<f64>, OracleError> {
    let root = spd_sqrt(sigma)?;
    let inv_root = spd_inv_sqrt(sigma)?;
    let t1 = spd_sqrt(&symmetrize(&root * s1 * &root))?;
    let t2 = spd_sqrt(&symmetrize(&root * s2 * &root))?;
    let mix = t1 * alpha + t2 * (1.0 - alpha);
    Ok(symmetrize(&inv_root * &mix * &mix * &inv_root))
}

/// Barycenter with weight `alpha` on `g1` and `1 - alpha` on `g2`.
pub fn gaussian_barycenter_fixedpoint(
    g1: &GaussianParams,
    g2: &GaussianParams,
    alpha: f64,
    tol: f64,
    max_iter: usize,
) -> Result<GaussianParams, OracleError> {
    same_dim(g1, g2)?;
    g1.validate()?;
    g2.validate()?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(OracleError::InvalidWeight(alpha));
    }
    if alpha == 1.0 {
        return Ok(g1.clone());
    }
    if alpha == 0.0 {
        return Ok(g2.clone());
    }
    let mean = g1.mean_vector() * alpha + g2.mean_vector() * (1.0 - alpha);
    let (s1, s2) = (g1.covariance_matrix(), g2.covariance_matrix());
    let mut sigma = &s1 * alpha + &s2 * (1.0 - alpha);
    for _ in 0..max_iter {
        let next = barycenter_step(&sigma, &s1, &s2, alpha)?;
        let change = (&next - &sigma).norm();
        sigma = next;
        if change <= tol {
            return Ok(GaussianParams::from_parts(&mean, &sigma));
        }
    }
    Err(OracleError::NoConvergence(max_iter))
}

/// Fixed-point defaults: tolerance and iteration cap.
pub const BARYCENTER_TOL: f64 = 1e-10;
pub const BARYCENTER_MAX_ITER: usize = 500;

/// Affine Monge map `x -> A x + b` between Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    pub matrix: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl AffineMap {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (&self.matrix * DVector::from_column_slice(x) + &self.offset)
            .iter()
            .copied()
            .collect()
    }

    /// Image of a Gaussian under the map.
    pub fn push_forward(&self, g: &GaussianParams) -> GaussianParams {
        let mean = &self.matrix * g.mean_vector() + &self.offset;
        let cov = symmetrize(&self.matrix * g.covariance_matrix() * self.matrix.transpose());
        GaussianParams::from_parts(&mean, &cov)
    }
}

pub fn gaussian_ot_map(g1: &GaussianParams, g2: &GaussianParams) -> Result<AffineMap, OracleError> {
    same_dim(g1, g2)?;
    g1.validate()?;
    g2.validate()?;
    let (s1, s2) = (g1.covariance_matrix(), g2.covariance_matrix());
    let r1 = spd_sqrt(&s1)?;
    let inv_r1 = spd_inv_sqrt(&s1)?;
    let middle = spd_sqrt(&symmetrize(&r1 * &s2 * &r1))?;
    let matrix = symmetrize(&inv_r1 * middle * &inv_r1);
    let offset = g2.mean_vector() - &matrix * g1.mean_vector();
    Ok(AffineMap { matrix, offset })
}

/// Sample mean and `1/N` covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFit {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    /// Smallest covariance eigenvalue is at or below [`EIGEN_FLOOR`].
    pub degenerate: bool,
}

impl GaussianFit {
    pub fn params(&self) -> Result<GaussianParams, OracleError> {
        let g = GaussianParams::from_parts(&self.mean, &self.covariance);
        g.validate()?;
        Ok(g)
    }
}

pub fn mle_gaussian_fit(samples: &PointCloud) -> Result<GaussianFit, OracleError> {
    let (n, d) = (samples.len(), samples.dim());
    if n < d + 1 {
        return Err(OracleError::TooFewSamples { needed: d + 1, got: n });
    }
    let mut mean = DVector::zeros(d);
    for i in 0..n {
        mean += DVector::from_column_slice(samples.point(i));
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for i in 0..n {
        let c = DVector::from_column_slice(samples.point(i)) - &mean;
        cov += &c * c.transpose();
    }
    cov /= n as f64;
    let cov = symmetrize(cov);
    let min = SymmetricEigen::new(cov.clone()).eigenvalues.min();
    Ok(GaussianFit {
        mean,
        covariance: cov,
        degenerate: min <= EIGEN_FLOOR,
    })
}
