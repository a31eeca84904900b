//! Point clouds, toy shape generators and file ingestion.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, Tensor};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("point cloud must contain at least one point")]
    Empty,
    #[error("point cloud contains a non-finite coordinate")]
    NonFinite,
    #[error("invalid shape parameters: {0}")]
    InvalidSpec(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] DiffError),
}

/// `N` points in `d` dimensions, each carrying weight `1/N`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Tensor,
    labels: Option<Vec<String>>,
    seed: Option<u64>,
}

impl PointCloud {
    pub fn new(points: Tensor) -> Result<Self, DataError> {
        if points.rows() == 0 || points.cols() == 0 {
            return Err(DataError::Empty);
        }
        if !points.is_finite() {
            return Err(DataError::NonFinite);
        }
        Ok(Self {
            points,
            labels: None,
            seed: None,
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, DataError> {
        if rows.is_empty() {
            return Err(DataError::Empty);
        }
        Self::new(Tensor::from_rows(rows)?)
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self, DataError> {
        if labels.len() != self.len() {
            return Err(DataError::DimensionMismatch {
                expected: self.len(),
                found: labels.len(),
            });
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    pub fn points(&self) -> &Tensor {
        &self.points
    }

    pub fn into_points(self) -> Tensor {
        self.points
    }

    pub fn point(&self, i: usize) -> &[f64] {
        self.points.row(i)
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// Rows in the given order; labels follow their points.
    pub fn select(&self, idx: &[usize]) -> Result<Self, DataError> {
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= self.len() {
                return Err(DataError::InvalidSpec(format!("row {i} out of range")));
            }
            data.extend_from_slice(self.point(i));
        }
        let mut out = Self::new(Tensor::new(idx.len(), d, data)?)?;
        if let Some(labels) = &self.labels {
            out.labels = Some(idx.iter().map(|&i| labels[i].clone()).collect());
        }
        out.seed = self.seed;
        Ok(out)
    }

    /// The first `n` points.
    pub fn head(&self, n: usize) -> Result<Self, DataError> {
        self.select(&(0..n.min(self.len())).collect::<Vec<_>>())
    }
}

fn default_radius() -> f64 {
    1.0
}

fn default_gap() -> f64 {
    0.5
}

fn default_moon_noise() -> f64 {
    0.05
}

fn default_side() -> f64 {
    2.0
}

fn default_center() -> Vec<f64> {
    vec![0.0, 0.0]
}

fn default_triangle() -> [[f64; 2]; 3] {
    [[0.0, 0.0], [1.0, 0.0], [0.5, 3f64.sqrt() / 2.0]]
}

/// A point-cloud family with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Shape {
    /// Two interleaved half circles; the lower one is shifted right by
    /// `radius` and down by `radius - gap`.
    TwoMoons {
        #[serde(default = "default_radius")]
        radius: f64,
        #[serde(default = "default_gap")]
        gap: f64,
        #[serde(default = "default_moon_noise")]
        noise: f64,
    },
    /// Uniform angle on a circle plus isotropic Gaussian noise.
    Circle {
        #[serde(default = "default_radius")]
        radius: f64,
        #[serde(default)]
        noise: f64,
        #[serde(default = "default_center")]
        center: Vec<f64>,
    },
    /// Uniform over an axis-aligned square.
    Square {
        #[serde(default = "default_side")]
        side: f64,
        #[serde(default = "default_center")]
        center: Vec<f64>,
    },
    /// Uniform over an axis-aligned rectangle.
    Rectangle {
        width: f64,
        height: f64,
        #[serde(default = "default_center")]
        center: Vec<f64>,
    },
    /// Uniform over a triangle.
    Triangle {
        #[serde(default = "default_triangle")]
        vertices: [[f64; 2]; 3],
    },
    Gaussian {
        mean: Vec<f64>,
        covariance: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    #[serde(flatten)]
    pub shape: Shape,
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
}

impl ShapeSpec {
    pub fn new(shape: Shape, n: usize, seed: u64) -> Self {
        Self { shape, n, seed }
    }

    pub fn dim(&self) -> usize {
        match &self.shape {
            Shape::Gaussian { mean, .. } => mean.len(),
            _ => 2,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidSpec(m.to_string()));
        if self.n == 0 {
            return bad("n must be positive");
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        match &self.shape {
            Shape::TwoMoons { radius, gap, noise } => {
                if !(*radius > 0.0 && gap.is_finite()) {
                    return bad("two_moons needs radius > 0");
                }
                if !(*noise >= 0.0 && noise.is_finite()) {
                    return bad("noise must be >= 0");
                }
            }
            Shape::Circle {
                radius,
                noise,
                center,
            } => {
                if !(*radius > 0.0 && radius.is_finite()) {
                    return bad("circle needs radius > 0");
                }
                if !(*noise >= 0.0 && noise.is_finite()) {
                    return bad("noise must be >= 0");
                }
                if center.len() != 2 || !finite(center) {
                    return bad("center must be a finite 2-vector");
                }
            }
            Shape::Square { side, center } => {
                if !(*side > 0.0 && side.is_finite()) {
                    return bad("square needs side > 0");
                }
                if center.len() != 2 || !finite(center) {
                    return bad("center must be a finite 2-vector");
                }
            }
            Shape::Rectangle {
                width,
                height,
                center,
            } => {
                if !(*width > 0.0 && *height > 0.0 && width.is_finite() && height.is_finite()) {
                    return bad("rectangle needs positive side lengths");
                }
                if center.len() != 2 || !finite(center) {
                    return bad("center must be a finite 2-vector");
                }
            }
            Shape::Triangle { vertices } => {
                let [a, b, c] = vertices;
                let area = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
                if !(area.abs() > 0.0 && area.is_finite()) {
                    return bad("triangle vertices must not be collinear");
                }
            }
            Shape::Gaussian { mean, covariance } => {
                if mean.is_empty() || !finite(mean) {
                    return bad("gaussian mean must be a non-empty finite vector");
                }
                cholesky(mean.len(), covariance)?;
            }
        }
        Ok(())
    }

    /// Whether `p` lies in the family's support, allowing `slack` extra
    /// distance (for noisy families pass a multiple of the noise std).
    pub fn contains(&self, p: &[f64], slack: f64) -> bool {
        match &self.shape {
            Shape::TwoMoons { radius, gap, .. } => {
                let upper = arc_distance(p, [0.0, 0.0], *radius, true);
                let lower = arc_distance(p, [*radius, radius - gap], *radius, false);
                upper.min(lower) <= slack
            }
            Shape::Circle { radius, center, .. } => {
                ((p[0] - center[0]).hypot(p[1] - center[1]) - radius).abs() <= slack
            }
            Shape::Square { side, center } => {
                (0..2).all(|i| (p[i] - center[i]).abs() <= side / 2.0 + slack)
            }
            Shape::Rectangle {
                width,
                height,
                center,
            } => {
                (p[0] - center[0]).abs() <= width / 2.0 + slack
                    && (p[1] - center[1]).abs() <= height / 2.0 + slack
            }
            Shape::Triangle { vertices } => {
                let [a, b, c] = vertices;
                let edge = |u: &[f64; 2], v: &[f64; 2]| {
                    (v[0] - u[0]) * (p[1] - u[1]) - (v[1] - u[1]) * (p[0] - u[0])
                };
                let (e1, e2, e3) = (edge(a, b), edge(b, c), edge(c, a));
                let tol = slack.max(0.0);
                (e1 >= -tol && e2 >= -tol && e3 >= -tol) || (e1 <= tol && e2 <= tol && e3 <= tol)
            }
            Shape::Gaussian { .. } => p.iter().all(|x| x.is_finite()),
        }
    }
}

/// Distance from `p` to the upper (or lower) half circle.
fn arc_distance(p: &[f64], center: [f64; 2], radius: f64, upper: bool) -> f64 {
    let (dx, dy) = (p[0] - center[0], p[1] - center[1]);
    let on_side = if upper { dy >= 0.0 } else { dy <= 0.0 };
    if on_side {
        (dx.hypot(dy) - radius).abs()
    } else {
        let e1 = (dx - radius).hypot(dy);
        let e2 = (dx + radius).hypot(dy);
        e1.min(e2)
    }
}

/// Lower Cholesky factor of a covariance given as rows.
pub(crate) fn cholesky(dim: usize, rows: &[Vec<f64>]) -> Result<DMatrix<f64>, DataError> {
    if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
        return Err(DataError::InvalidSpec(format!("covariance must be {dim}x{dim}")));
    }
    let m = DMatrix::from_fn(dim, dim, |i, j| rows[i][j]);
    if (0..dim).any(|i| (0..dim).any(|j| (m[(i, j)] - m[(j, i)]).abs() > 1e-12)) {
        return Err(DataError::InvalidSpec("covariance must be symmetric".into()));
    }
    nalgebra::Cholesky::new(m)
        .map(|c| c.l())
        .ok_or_else(|| DataError::InvalidSpec("covariance must be positive definite".into()))
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Draws a cloud; identical specs give bitwise identical output.
pub fn generate(spec: &ShapeSpec) -> Result<PointCloud, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n;
    let mut data = Vec::with_capacity(n * spec.dim());
    match &spec.shape {
        Shape::TwoMoons { radius, gap, noise } => {
            let upper = n.div_ceil(2);
            for i in 0..n {
                let t = rng.random_range(0.0..=PI);
                let (x, y) = if i < upper {
                    (radius * t.cos(), radius * t.sin())
                } else {
                    (radius - radius * t.cos(), radius - gap - radius * t.sin())
                };
                data.push(x + noise * normal(&mut rng));
                data.push(y + noise * normal(&mut rng));
            }
        }
        Shape::Circle {
            radius,
            noise,
            center,
        } => {
            for _ in 0..n {
                let t = rng.random_range(0.0..2.0 * PI);
                data.push(center[0] + radius * t.cos() + noise * normal(&mut rng));
                data.push(center[1] + radius * t.sin() + noise * normal(&mut rng));
            }
        }
        Shape::Square { side, center } => {
            let h = side / 2.0;
            for _ in 0..n {
                data.push(center[0] + rng.random_range(-h..=h));
                data.push(center[1] + rng.random_range(-h..=h));
            }
        }
        Shape::Rectangle {
            width,
            height,
            center,
        } => {
            let (hw, hh) = (width / 2.0, height / 2.0);
            for _ in 0..n {
                data.push(center[0] + rng.random_range(-hw..=hw));
                data.push(center[1] + rng.random_range(-hh..=hh));
            }
        }
        Shape::Triangle { vertices } => {
            let [a, b, c] = vertices;
            for _ in 0..n {
                let (mut u, mut v): (f64, f64) = (rng.random(), rng.random());
                if u + v > 1.0 {
                    u = 1.0 - u;
                    v = 1.0 - v;
                }
                for k in 0..2 {
                    data.push(a[k] + u * (b[k] - a[k]) + v * (c[k] - a[k]));
                }
            }
        }
        Shape::Gaussian { mean, covariance } => {
            let d = mean.len();
            let l = cholesky(d, covariance)?;
            let mu = DVector::from_column_slice(mean);
            for _ in 0..n {
                let z = DVector::from_fn(d, |_, _| normal(&mut rng));
                data.extend((&mu + &l * z).iter());
            }
        }
    }
    Ok(PointCloud::new(Tensor::new(n, spec.dim(), data)?)?.with_seed(spec.seed))
}

/// `x -> A x + t` applied to every point; `a` is `d x d`.
pub fn apply_affine(cloud: &PointCloud, a: &Tensor, t: &[f64]) -> Result<PointCloud, DataError> {
    let d = cloud.dim();
    if a.shape() != (d, d) {
        return Err(DataError::DimensionMismatch {
            expected: d,
            found: a.rows(),
        });
    }
    if t.len() != d {
        return Err(DataError::DimensionMismatch {
            expected: d,
            found: t.len(),
        });
    }
    let mut out = cloud.points.matmul(&a.transpose())?;
    for i in 0..out.rows() {
        for (j, tj) in t.iter().enumerate() {
            out.set(i, j, out.get(i, j) + tj);
        }
    }
    let mut cloud_out = PointCloud::new(out)?;
    cloud_out.labels = cloud.labels.clone();
    cloud_out.seed = cloud.seed;
    Ok(cloud_out)
}

/// Translation protocol: source circle and the same circle shifted.
pub fn protocol_translate(n: usize, seed: u64) -> Result<(PointCloud, PointCloud), DataError> {
    let source = generate(&ShapeSpec::new(
        Shape::Circle {
            radius: 1.0,
            noise: 0.0,
            center: default_center(),
        },
        n,
        seed,
    ))?;
    let target = generate(&ShapeSpec::new(
        Shape::Circle {
            radius: 1.0,
            noise: 0.0,
            center: default_center(),
        },
        n,
        seed.wrapping_add(1),
    ))?;
    let target = apply_affine(&target, &Tensor::identity(2), &[4.0, 0.0])?;
    Ok((source, target))
}

/// Translation-and-stretch protocol on a unit rectangle.
pub fn protocol_stretch(n: usize, seed: u64) -> Result<(PointCloud, PointCloud), DataError> {
    let rect = |s| {
        generate(&ShapeSpec::new(
            Shape::Rectangle {
                width: 1.0,
                height: 1.0,
                center: default_center(),
            },
            n,
            s,
        ))
    };
    let source = rect(seed)?;
    let a = Tensor::from_rows(&[[2.0, 0.0], [0.0, 1.0]])?;
    let target = apply_affine(&rect(seed.wrapping_add(1))?, &a, &[4.0, 0.0])?;
    Ok((source, target))
}

/// Source/target pair related by a known rotation.
#[derive(Debug, Clone)]
pub struct RotatedPair {
    pub source: PointCloud,
    pub target: PointCloud,
    /// `source` point `n` corresponds to `target` point `pairing[n]`.
    pub pairing: Vec<usize>,
    pub rotation: Tensor,
}

/// Haar-distributed rotation (`det = +1`) from the QR factorization of a
/// Gaussian matrix.
pub fn random_rotation<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Tensor {
    loop {
        let g = DMatrix::from_fn(d, d, |_, _| normal(rng));
        let qr = g.qr();
        let (mut q, r) = (qr.q(), qr.r());
        if (0..d).any(|i| r[(i, i)] == 0.0) {
            continue;
        }
        for j in 0..d {
            if r[(j, j)] < 0.0 {
                q.column_mut(j).neg_mut();
            }
        }
        if q.determinant() < 0.0 {
            q.column_mut(0).neg_mut();
        }
        let data = (0..d * d).map(|k| q[(k / d, k % d)]).collect();
        return Tensor::new(d, d, data).expect("square");
    }
}

/// Number of mixture components used by [`gen_rotated_embedding_pair`].
pub const EMBEDDING_CLUSTERS: usize = 20;

/// `x` from a fixed Gaussian mixture, `y_n = R x_n + noise`, with `y`
/// shuffled and the ground-truth pairing recorded.
///
/// The mixture has [`EMBEDDING_CLUSTERS`] components with means drawn
/// from `N(0, 9 I)` and unit isotropic covariance; it depends only on
/// `d`. The rotation, the sample draw and the shuffle all derive from
/// `seed`.
pub fn gen_rotated_embedding_pair(
    n: usize,
    d: usize,
    seed: u64,
    noise: f64,
) -> Result<RotatedPair, DataError> {
    if d < 2 {
        return Err(DataError::InvalidSpec("rotated pair needs d >= 2".into()));
    }
    if n == 0 {
        return Err(DataError::Empty);
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(DataError::InvalidSpec("noise must be >= 0".into()));
    }
    let mut mix_rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + d as u64);
    let means: Vec<Vec<f64>> = (0..EMBEDDING_CLUSTERS)
        .map(|_| (0..d).map(|_| 3.0 * normal(&mut mix_rng)).collect())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rotation = random_rotation(d, &mut rng);
    let mut xs = Vec::with_capacity(n * d);
    for _ in 0..n {
        let c = rng.random_range(0..EMBEDDING_CLUSTERS);
        xs.extend(means[c].iter().map(|m| m + normal(&mut rng)));
    }
    let x = Tensor::new(n, d, xs)?;
    let rx = x.matmul(&rotation.transpose())?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    // order[k] = source index placed at target row k
    let mut pairing = vec![0; n];
    let mut ys = Vec::with_capacity(n * d);
    for (k, &src) in order.iter().enumerate() {
        pairing[src] = k;
        ys.extend(rx.row(src).iter().map(|v| v + noise * normal(&mut rng)));
    }
    Ok(RotatedPair {
        source: PointCloud::new(x)?.with_seed(seed),
        target: PointCloud::new(Tensor::new(n, d, ys)?)?.with_seed(seed),
        pairing,
        rotation,
    })
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn parse_err(path: &str, line: usize, message: impl Into<String>) -> DataError {
    DataError::Parse {
        path: path.to_string(),
        line,
        message: message.into(),
    }
}

fn parse_float(path: &str, line: usize, field: &str) -> Result<f64, DataError> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| parse_err(path, line, format!("cannot parse {field:?} as a number")))?;
    if !v.is_finite() {
        return Err(parse_err(path, line, "non-finite value"));
    }
    Ok(v)
}

/// Parses comma-separated points, one per line. Blank lines are skipped.
/// `origin` names the source in error messages.
pub fn parse_pointcloud(text: &str, origin: &str) -> Result<PointCloud, DataError> {
    let mut dim = None;
    let mut data = Vec::new();
    let mut n = 0;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        match dim {
            None => dim = Some(fields.len()),
            Some(d) if d != fields.len() => {
                return Err(parse_err(
                    origin,
                    lineno,
                    format!("expected {d} fields, found {}", fields.len()),
                ))
            }
            _ => {}
        }
        for f in fields {
            data.push(parse_float(origin, lineno, f)?);
        }
        n += 1;
    }
    let d = dim.ok_or(DataError::Empty)?;
    PointCloud::new(Tensor::new(n, d, data)?)
}

pub fn load_pointcloud(path: impl AsRef<Path>) -> Result<PointCloud, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_pointcloud(&text, &path.display().to_string())
}

/// CSV text for a cloud; floats use the shortest round-trip form.
pub fn format_pointcloud(cloud: &PointCloud) -> String {
    let mut out = String::new();
    for i in 0..cloud.len() {
        let row: Vec<String> = cloud.point(i).iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn save_pointcloud(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(format_pointcloud(cloud).as_bytes())
        .map_err(|e| io_err(path, e))
}

/// Parses `<count> <dim>` followed by `<word> <v1> ... <vdim>` rows,
/// keeping at most `max_words` rows in file order.
pub fn parse_embeddings(
    text: &str,
    origin: &str,
    max_words: Option<usize>,
) -> Result<PointCloud, DataError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(DataError::Empty)?;
    let head: Vec<&str> = header.split_whitespace().collect();
    if head.len() != 2 {
        return Err(parse_err(origin, 1, "header must be \"<count> <dim>\""));
    }
    let count: usize = head[0]
        .parse()
        .map_err(|_| parse_err(origin, 1, "bad word count"))?;
    let dim: usize = head[1]
        .parse()
        .map_err(|_| parse_err(origin, 1, "bad dimension"))?;
    if dim == 0 {
        return Err(parse_err(origin, 1, "dimension must be positive"));
    }
    let limit = max_words.map_or(count, |m| m.min(count));
    let mut words = Vec::with_capacity(limit);
    let mut data = Vec::with_capacity(limit * dim);
    for (i, line) in lines {
        if words.len() == limit {
            break;
        }
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let word = fields.next().expect("non-empty line");
        let values: Vec<&str> = fields.collect();
        if values.len() != dim {
            return Err(parse_err(
                origin,
                lineno,
                format!("expected {dim} values after the word, found {}", values.len()),
            ));
        }
        for v in values {
            data.push(parse_float(origin, lineno, v)?);
        }
        words.push(word.to_string());
    }
    if words.len() < limit {
        return Err(parse_err(
            origin,
            1,
            format!("header announces {count} words, file has {}", words.len()),
        ));
    }
    PointCloud::new(Tensor::new(words.len(), dim, data)?)?.with_labels(words)
}

pub fn load_embeddings(
    path: impl AsRef<Path>,
    max_words: Option<usize>,
) -> Result<PointCloud, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_embeddings(&text, &path.display().to_string(), max_words)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn circle(n: usize, noise: f64, seed: u64) -> ShapeSpec {
        ShapeSpec::new(
            Shape::Circle {
                radius: 1.0,
                noise,
                center: vec![0.0, 0.0],
            },
            n,
            seed,
        )
    }

    #[test]
    fn noiseless_circle_has_unit_norms() {
        let c = generate(&circle(4, 0.0, 3)).unwrap();
        for i in 0..4 {
            let p = c.point(i);
            assert!((p[0].hypot(p[1]) - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn square_stays_in_bounds() {
        let spec = ShapeSpec::new(
            Shape::Square {
                side: 2.0,
                center: vec![0.0, 0.0],
            },
            500,
            1,
        );
        let c = generate(&spec).unwrap();
        assert!(c.points().data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn every_family_satisfies_its_region() {
        let specs = [
            ShapeSpec::new(
                Shape::TwoMoons {
                    radius: 1.0,
                    gap: 0.5,
                    noise: 0.0,
                },
                400,
                2,
            ),
            circle(400, 0.0, 4),
            ShapeSpec::new(
                Shape::Rectangle {
                    width: 3.0,
                    height: 0.5,
                    center: vec![1.0, -2.0],
                },
                400,
                5,
            ),
            ShapeSpec::new(
                Shape::Triangle {
                    vertices: default_triangle(),
                },
                400,
                6,
            ),
        ];
        for spec in &specs {
            let c = generate(spec).unwrap();
            for i in 0..c.len() {
                assert!(spec.contains(c.point(i), 1e-9), "{spec:?} {:?}", c.point(i));
            }
        }
        // Noisy moons: nearly all points within four noise widths.
        let noisy = ShapeSpec::new(
            Shape::TwoMoons {
                radius: 1.0,
                gap: 0.5,
                noise: 0.05,
            },
            2000,
            9,
        );
        let c = generate(&noisy).unwrap();
        let inside = (0..c.len()).filter(|&i| noisy.contains(c.point(i), 0.2)).count();
        assert!(inside >= 1990);
    }

    #[test]
    fn region_predicates_reject_outside_points() {
        let sq = ShapeSpec::new(
            Shape::Square {
                side: 2.0,
                center: vec![0.0, 0.0],
            },
            1,
            0,
        );
        assert!(!sq.contains(&[1.5, 0.0], 0.0));
        let tri = ShapeSpec::new(
            Shape::Triangle {
                vertices: default_triangle(),
            },
            1,
            0,
        );
        assert!(tri.contains(&[0.5, 0.2], 0.0));
        assert!(!tri.contains(&[0.9, 0.8], 0.0));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(generate(&circle(10, -1.0, 0)).is_err());
        assert!(generate(&circle(0, 0.0, 0)).is_err());
        let g = ShapeSpec::new(
            Shape::Gaussian {
                mean: vec![0.0, 0.0],
                covariance: vec![vec![1.0, 2.0], vec![2.0, 1.0]],
            },
            10,
            0,
        );
        assert!(generate(&g).is_err());
    }

    #[test]
    fn gaussian_sample_moments() {
        let spec = ShapeSpec::new(
            Shape::Gaussian {
                mean: vec![1.0, -2.0],
                covariance: vec![vec![2.0, 0.5], vec![0.5, 1.0]],
            },
            100_000,
            7,
        );
        let c = generate(&spec).unwrap();
        let n = c.len() as f64;
        let mx = (0..c.len()).map(|i| c.point(i)[0]).sum::<f64>() / n;
        let my = (0..c.len()).map(|i| c.point(i)[1]).sum::<f64>() / n;
        let cxy = (0..c.len())
            .map(|i| (c.point(i)[0] - mx) * (c.point(i)[1] - my))
            .sum::<f64>()
            / n;
        assert!((mx - 1.0).abs() < 0.03 && (my + 2.0).abs() < 0.03);
        assert!((cxy - 0.5).abs() < 0.03);
    }

    #[test]
    fn affine_examples() {
        let c = generate(&circle(50, 0.1, 1)).unwrap();
        let same = apply_affine(&c, &Tensor::identity(2), &[0.0, 0.0]).unwrap();
        assert_eq!(same.points(), c.points());

        let shifted = apply_affine(&c, &Tensor::identity(2), &[4.0, 0.0]).unwrap();
        for i in 0..c.len() {
            assert_eq!(shifted.point(i)[0], c.point(i)[0] + 4.0);
            assert_eq!(shifted.point(i)[1], c.point(i)[1]);
        }

        let (_, target) = protocol_stretch(1000, 3).unwrap();
        // Unit rectangle under diag(2, 1) then +(4, 0): [3, 5] x [-0.5, 0.5].
        for i in 0..target.len() {
            let p = target.point(i);
            assert!((3.0..=5.0).contains(&p[0]) && (-0.5..=0.5).contains(&p[1]));
        }
        assert!(apply_affine(&c, &Tensor::identity(3), &[0.0; 3]).is_err());
    }

    #[test]
    fn rotation_is_proper_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for d in [2, 5, 10] {
            let r = random_rotation(d, &mut rng);
            let rtr = r.transpose().matmul(&r).unwrap();
            assert!(rtr.max_abs_diff(&Tensor::identity(d)) < 1e-12);
            let m = DMatrix::from_row_slice(d, d, r.data());
            assert!((m.determinant() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn noiseless_rotated_pair_preserves_norms() {
        let pair = gen_rotated_embedding_pair(200, 6, 3, 0.0).unwrap();
        for n in 0..200 {
            let x = pair.source.point(n);
            let y = pair.target.point(pair.pairing[n]);
            let nx: f64 = x.iter().map(|v| v * v).sum();
            let ny: f64 = y.iter().map(|v| v * v).sum();
            assert!((nx.sqrt() - ny.sqrt()).abs() < 1e-10);
        }
    }

    #[test]
    fn noisy_rotated_pair_is_separable() {
        let pair = gen_rotated_embedding_pair(2000, 10, 11, 0.01).unwrap();
        let rx = pair.source.points().matmul(&pair.rotation.transpose()).unwrap();
        let t = pair.target.points();
        let mut hits = 0;
        for n in 0..rx.rows() {
            let q = rx.row(n);
            let best = (0..t.rows())
                .map(|k| {
                    let d: f64 = q.iter().zip(t.row(k)).map(|(a, b)| (a - b).powi(2)).sum();
                    (d, k)
                })
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .unwrap()
                .1;
            hits += usize::from(best == pair.pairing[n]);
        }
        assert!(hits as f64 >= 0.99 * 2000.0, "{hits}");
    }

    #[test]
    fn csv_parsing() {
        let c = parse_pointcloud("0.0,1.0\n2.0,3.0", "mem").unwrap();
        assert_eq!((c.len(), c.dim()), (2, 2));
        assert_eq!(c.point(1), &[2.0, 3.0]);
        let err = parse_pointcloud("0,1\n2,3,4\n", "mem").unwrap_err();
        assert!(err.to_string().contains("mem:2"), "{err}");
        let err = parse_pointcloud("0,1\n2,x\n", "mem").unwrap_err();
        assert!(err.to_string().contains("mem:2"));
        assert!(parse_pointcloud("\n\n", "mem").is_err());
    }

    #[test]
    fn embedding_parsing() {
        let text = "3 2\nhola 0.1 0.2\nmundo -1 2\ngato 3 4\n";
        let c = parse_embeddings(text, "emb", None).unwrap();
        assert_eq!((c.len(), c.dim()), (3, 2));
        assert_eq!(c.labels().unwrap(), ["hola", "mundo", "gato"]);
        let c = parse_embeddings(text, "emb", Some(2)).unwrap();
        assert_eq!(c.len(), 2);
        let err = parse_embeddings("2 2\na 1 2\nb 1\n", "emb", None).unwrap_err();
        assert!(err.to_string().contains("emb:3"), "{err}");
        assert!(parse_embeddings("2\n", "emb", None).is_err());
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        let c = generate(&circle(30, 0.3, 8)).unwrap();
        save_pointcloud(&c, &path).unwrap();
        let back = load_pointcloud(&path).unwrap();
        assert_eq!(back.points(), c.points());
        let missing = load_pointcloud(dir.path().join("none.csv")).unwrap_err();
        assert!(matches!(missing, DataError::Io { .. }));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn generation_is_deterministic(seed in any::<u64>(), n in 1usize..50) {
            let spec = ShapeSpec::new(Shape::TwoMoons { radius: 1.0, gap: 0.5, noise: 0.05 }, n, seed);
            prop_assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        }

        #[test]
        fn affine_commutes_with_generation(seed in any::<u64>(), tx in -5.0..5.0f64, s in 0.1..3.0f64) {
            let spec = circle(20, 0.1, seed);
            let a = Tensor::from_rows(&[[s, 0.0], [0.0, 1.0]]).unwrap();
            let once = apply_affine(&generate(&spec).unwrap(), &a, &[tx, 0.0]).unwrap();
            let twice = apply_affine(&generate(&spec).unwrap(), &a, &[tx, 0.0]).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
