//! Classification datasets and their orthogonal-separability certificate.
//!
//! Points are stored column-wise in a `D × n` matrix. Labels are class
//! indices in `[0, K)`. For binary problems class `0` plays the role of the
//! `+1` label and class `1` the role of `-1`.

mod idx;
mod io;

pub use idx::{load_idx, IdxError};
pub use io::{read_csv, read_manifest, write_csv, write_manifest, DatasetManifest};

use log::warn;
use nalgebra::{DMatrix, DVector, DVectorView};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;

/// Default tolerance used to classify a normalized correlation as "zero".
pub const DEFAULT_CORRELATION_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("point {index} has zero norm")]
    ZeroNorm { index: usize },
    #[error("class {class} has no points")]
    EmptyClass { class: usize },
    #[error("label {label} of point {index} is outside [0, {num_classes})")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        num_classes: usize,
    },
    #[error("{points} points but {labels} labels")]
    LengthMismatch { points: usize, labels: usize },
    #[error("at least two classes are required, got {0}")]
    TooFewClasses(usize),
    #[error("invalid generator configuration: {0}")]
    InvalidConfig(String),
    #[error("no orthogonally separable sample after {rounds} rounds (last mu_s = {mu_s:.6}, mu_d = {mu_d:.6})")]
    GenerationFailed { rounds: usize, mu_s: f64, mu_d: f64 },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error(transparent)]
    Idx(#[from] IdxError),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    points: DMatrix<f64>,
    labels: Vec<usize>,
    num_classes: usize,
    class_index: Vec<Vec<usize>>,
    class_names: Option<Vec<String>>,
}

impl Dataset {
    /// Builds a dataset from a `D × n` matrix of column points.
    pub fn new(points: DMatrix<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self, DatasetError> {
        if num_classes < 2 {
            return Err(DatasetError::TooFewClasses(num_classes));
        }
        if points.ncols() != labels.len() {
            return Err(DatasetError::LengthMismatch {
                points: points.ncols(),
                labels: labels.len(),
            });
        }
        let mut class_index = vec![Vec::new(); num_classes];
        for (i, &label) in labels.iter().enumerate() {
            if label >= num_classes {
                return Err(DatasetError::LabelOutOfRange {
                    index: i,
                    label,
                    num_classes,
                });
            }
            class_index[label].push(i);
        }
        if let Some(class) = class_index.iter().position(Vec::is_empty) {
            return Err(DatasetError::EmptyClass { class });
        }
        for (i, col) in points.column_iter().enumerate() {
            if col.norm() == 0.0 {
                return Err(DatasetError::ZeroNorm { index: i });
            }
        }
        Ok(Self {
            points,
            labels,
            num_classes,
            class_index,
            class_names: None,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<usize>, num_classes: usize) -> Result<Self, DatasetError> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(DatasetError::InvalidConfig("rows have inconsistent dimensions".into()));
        }
        let points = DMatrix::from_fn(dim, rows.len(), |r, c| rows[c][r]);
        Self::new(points, labels, num_classes)
    }

    /// Attaches display names for the classes (e.g. original digit identities).
    pub fn with_class_names(mut self, names: Vec<String>) -> Self {
        assert_eq!(names.len(), self.num_classes);
        self.class_names = Some(names);
        self
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    pub fn dim(&self) -> usize {
        self.points.nrows()
    }

    pub fn len(&self) -> usize {
        self.points.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn points(&self) -> &DMatrix<f64> {
        &self.points
    }

    pub fn point(&self, i: usize) -> DVectorView<'_, f64> {
        self.points.column(i)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn class_indices(&self, k: usize) -> &[usize] {
        &self.class_index[k]
    }

    /// `+1` for class 0 and `-1` for class 1 (binary convention).
    pub fn binary_sign(&self, i: usize) -> f64 {
        if self.labels[i] == 0 {
            1.0
        } else {
            -1.0
        }
    }

    pub fn norms(&self) -> Vec<f64> {
        self.points.column_iter().map(|c| c.norm()).collect()
    }

    pub fn x_max(&self) -> f64 {
        self.norms().into_iter().fold(0.0, f64::max)
    }

    pub fn x_min(&self) -> f64 {
        self.norms().into_iter().fold(f64::INFINITY, f64::min)
    }

    /// Sum of the class-`k` points.
    pub fn class_sum(&self, k: usize) -> DVector<f64> {
        let mut s = DVector::zeros(self.dim());
        for &i in &self.class_index[k] {
            s += self.points.column(i);
        }
        s
    }

    /// Unit direction of the class-`k` sum (the class average direction).
    pub fn class_mean_direction(&self, k: usize) -> DVector<f64> {
        let s = self.class_sum(k);
        let n = s.norm();
        if n == 0.0 {
            s
        } else {
            s / n
        }
    }

    /// `D × |I_k|` matrix of the class-`k` points.
    pub fn class_points(&self, k: usize) -> DMatrix<f64> {
        let idx = &self.class_index[k];
        DMatrix::from_fn(self.dim(), idx.len(), |r, c| self.points[(r, idx[c])])
    }

    /// Applies a permutation: point `i` of the result is point `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self, DatasetError> {
        let points = DMatrix::from_fn(self.dim(), perm.len(), |r, c| self.points[(r, perm[c])]);
        let labels = perm.iter().map(|&i| self.labels[i]).collect();
        let mut out = Self::new(points, labels, self.num_classes)?;
        out.class_names = self.class_names.clone();
        Ok(out)
    }

    pub fn scaled(&self, c: f64) -> Result<Self, DatasetError> {
        let mut out = Self::new(&self.points * c, self.labels.clone(), self.num_classes)?;
        out.class_names = self.class_names.clone();
        Ok(out)
    }

    /// Appends a constant homogeneous coordinate, so a bias-free network on the
    /// augmented data behaves like a network with biases on the original data.
    pub fn augment_homogeneous(&self, value: f64) -> Self {
        let d = self.dim();
        let points = DMatrix::from_fn(
            d + 1,
            self.len(),
            |r, c| {
                if r < d {
                    self.points[(r, c)]
                } else {
                    value
                }
            },
        );
        let mut out = self.clone();
        out.points = points;
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityCertificate {
    pub num_classes: usize,
    /// Minimum same-class normalized correlation (self pairs included).
    #[serde(deserialize_with = "crate::linalg::f64_or_nan")]
    pub mu_s: f64,
    /// Negated maximum cross-class normalized correlation.
    #[serde(deserialize_with = "crate::linalg::f64_or_nan")]
    pub mu_d: f64,
    #[serde(deserialize_with = "crate::linalg::f64_or_nan")]
    pub x_max: f64,
    #[serde(deserialize_with = "crate::linalg::f64_or_nan")]
    pub x_min: f64,
    /// `x_max² / (x_min² · mu_d · mu_s²)`; infinite when `mu_d` or `mu_s` is not positive.
    #[serde(deserialize_with = "crate::linalg::f64_or_nan")]
    pub strict_ratio: f64,
    pub is_orthogonally_separable: bool,
    /// `strict_ratio < 2K − 3`; only meaningful for `K > 2`.
    pub satisfies_strict_condition: bool,
    pub same_class_pairs: usize,
    pub cross_class_pairs: usize,
    /// Distinct same-class pairs whose correlation is not above the tolerance.
    pub same_class_violations: usize,
    /// Cross-class pairs whose correlation is not below `-tol`.
    pub cross_class_violations: usize,
}

impl SeparabilityCertificate {
    pub fn same_class_violation_fraction(&self) -> f64 {
        if self.same_class_pairs == 0 {
            0.0
        } else {
            self.same_class_violations as f64 / self.same_class_pairs as f64
        }
    }

    pub fn cross_class_violation_fraction(&self) -> f64 {
        if self.cross_class_pairs == 0 {
            0.0
        } else {
            self.cross_class_violations as f64 / self.cross_class_pairs as f64
        }
    }
}

pub fn validate_separability(data: &Dataset) -> Result<SeparabilityCertificate, DatasetError> {
    validate_separability_with_tol(data, DEFAULT_CORRELATION_TOL)
}

/// Exact pairwise scan of normalized correlations.
pub fn validate_separability_with_tol(data: &Dataset, tol: f64) -> Result<SeparabilityCertificate, DatasetError> {
    let norms = data.norms();
    if let Some(index) = norms.iter().position(|&n| n == 0.0) {
        return Err(DatasetError::ZeroNorm { index });
    }
    let mut unit = data.points().clone();
    for (mut col, &n) in unit.column_iter_mut().zip(&norms) {
        col /= n;
    }
    let gram = unit.transpose() * &unit;

    let n = data.len();
    let mut mu_s: f64 = 1.0;
    let mut max_cross = f64::NEG_INFINITY;
    let (mut same_pairs, mut cross_pairs) = (0usize, 0usize);
    let (mut same_viol, mut cross_viol) = (0usize, 0usize);
    for j in 0..n {
        for i in 0..j {
            let c = gram[(i, j)];
            if data.label(i) == data.label(j) {
                same_pairs += 1;
                mu_s = mu_s.min(c);
                if c <= tol {
                    same_viol += 1;
                }
            } else {
                cross_pairs += 1;
                max_cross = max_cross.max(c);
                if c >= -tol {
                    cross_viol += 1;
                }
            }
        }
    }
    let mu_d = -max_cross;
    let x_max = norms.iter().copied().fold(0.0, f64::max);
    let x_min = norms.iter().copied().fold(f64::INFINITY, f64::min);
    let separable = mu_s > tol && mu_d > tol;
    let strict_ratio = if separable {
        x_max * x_max / (x_min * x_min * mu_d * mu_s * mu_s)
    } else {
        f64::INFINITY
    };
    let k = data.num_classes();
    Ok(SeparabilityCertificate {
        num_classes: k,
        mu_s,
        mu_d,
        x_max,
        x_min,
        strict_ratio,
        is_orthogonally_separable: separable,
        satisfies_strict_condition: separable && strict_ratio < (2 * k) as f64 - 3.0,
        same_class_pairs: same_pairs,
        cross_class_pairs: cross_pairs,
        same_class_violations: same_viol,
        cross_class_violations: cross_viol,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub num_classes: usize,
    pub dim: usize,
    pub points_per_class: usize,
    /// Radians.
    pub cone_half_angle: f64,
    pub norm_range: [f64; 2],
    pub seed: u64,
    #[serde(default = "default_max_rounds")]
    pub max_rounds: usize,
}

fn default_max_rounds() -> usize {
    64
}

impl GeneratorConfig {
    pub fn new(
        num_classes: usize,
        dim: usize,
        points_per_class: usize,
        cone_half_angle: f64,
        norm_range: [f64; 2],
        seed: u64,
    ) -> Self {
        Self {
            num_classes,
            dim,
            points_per_class,
            cone_half_angle,
            norm_range,
            seed,
            max_rounds: default_max_rounds(),
        }
    }

    fn check(&self) -> Result<(), DatasetError> {
        let bad = |m: &str| Err(DatasetError::InvalidConfig(m.to_string()));
        if self.num_classes < 2 {
            return Err(DatasetError::TooFewClasses(self.num_classes));
        }
        if self.dim + 1 < self.num_classes {
            return bad("dim must be at least num_classes - 1");
        }
        if self.points_per_class == 0 {
            return bad("points_per_class must be positive");
        }
        if !(self.cone_half_angle >= 0.0 && self.cone_half_angle.is_finite()) {
            return bad("cone_half_angle must be a finite non-negative angle");
        }
        let [lo, hi] = self.norm_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return bad("norm_range must satisfy 0 < lo <= hi");
        }
        if self.max_rounds == 0 {
            return bad("max_rounds must be positive");
        }
        Ok(())
    }
}

/// `K` unit vectors in `R^D` with pairwise inner product `-1/(K-1)`, randomly
/// rotated. Column `k` is the anchor of class `k`.
pub fn simplex_frame<R: Rng + ?Sized>(num_classes: usize, dim: usize, rng: &mut R) -> DMatrix<f64> {
    let k = num_classes;
    let scale = (k as f64 / (k as f64 - 1.0)).sqrt();
    // Helmert basis of the complement of the all-ones vector in R^K.
    let helmert = DMatrix::from_fn(k, k - 1, |r, m| {
        let m1 = (m + 1) as f64;
        let norm = (m1 * (m1 + 1.0)).sqrt();
        if r <= m {
            1.0 / norm
        } else if r == m + 1 {
            -m1 / norm
        } else {
            0.0
        }
    });
    let rotation = linalg::random_orthogonal(dim, rng);
    let mut frame = DMatrix::zeros(dim, k);
    for c in 0..k {
        let mut centered = DVector::from_element(k, -1.0 / k as f64);
        centered[c] += 1.0;
        let coords = helmert.transpose() * centered * scale;
        let mut embedded = DVector::zeros(dim);
        embedded.rows_mut(0, k - 1).copy_from(&coords);
        let anchor = &rotation * embedded;
        let n = anchor.norm();
        frame.set_column(c, &(anchor / n));
    }
    frame
}

/// Samples orthogonally separable data: simplex anchors perturbed inside cones.
pub fn generate_separable(config: &GeneratorConfig) -> Result<Dataset, DatasetError> {
    config.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let k = config.num_classes;
    let d = config.dim;
    let anchors = simplex_frame(k, d, &mut rng);
    let [lo, hi] = config.norm_range;

    let (mut last_s, mut last_d) = (f64::NAN, f64::NAN);
    for _ in 0..config.max_rounds {
        let n = k * config.points_per_class;
        let mut points = DMatrix::zeros(d, n);
        let mut labels = Vec::with_capacity(n);
        for class in 0..k {
            let anchor = anchors.column(class).into_owned();
            for _ in 0..config.points_per_class {
                let angle = if d > 1 && config.cone_half_angle > 0.0 {
                    rng.random_range(0.0..=config.cone_half_angle)
                } else {
                    0.0
                };
                let dir = if angle > 0.0 {
                    let g = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                    let t = linalg::project_out(&g, &anchor);
                    let t = t.normalize();
                    &anchor * angle.cos() + t * angle.sin()
                } else {
                    anchor.clone()
                };
                let r = if hi > lo { rng.random_range(lo..=hi) } else { lo };
                points.set_column(labels.len(), &(dir * r));
                labels.push(class);
            }
        }
        let data = Dataset::new(points, labels, k)?;
        let cert = validate_separability(&data)?;
        if cert.is_orthogonally_separable {
            return Ok(data);
        }
        last_s = cert.mu_s;
        last_d = cert.mu_d;
    }
    Err(DatasetError::GenerationFailed {
        rounds: config.max_rounds,
        mu_s: last_s,
        mu_d: last_d,
    })
}

/// Subtracts the global mean; points that become exactly zero are dropped.
/// Returns the centered dataset and the number of dropped points.
pub fn center_dataset(data: &Dataset) -> Result<(Dataset, usize), DatasetError> {
    let n = data.len() as f64;
    let mean = data.points().column_sum() / n;
    let mut keep = Vec::with_capacity(data.len());
    let mut cols = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let c = data.point(i) - &mean;
        if c.iter().all(|&v| v == 0.0) {
            continue;
        }
        keep.push(i);
        cols.push(c);
    }
    let dropped = data.len() - keep.len();
    if dropped > 0 {
        warn!("centering produced {dropped} zero point(s); they were removed");
    }
    let points = if cols.is_empty() {
        DMatrix::zeros(data.dim(), 0)
    } else {
        DMatrix::from_columns(&cols)
    };
    let labels = keep.iter().map(|&i| data.label(i)).collect();
    let mut out = Dataset::new(points, labels, data.num_classes())?;
    out.class_names = data.class_names.clone();
    Ok((out, dropped))
}
