//! Neural Collapse metrics and the residuals of the limiting-direction
//! characterization.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::linalg;
use crate::margins::MarginCertificate;
use crate::model::{check_partition, pseudo_label_frame, LossKind, ModelError, NetParams};

/// Singular values below `PINV_RCOND · σ_max` are dropped in NC3.
pub const PINV_RCOND: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum CollapseError {
    #[error("{features} feature columns but {labels} labels")]
    LengthMismatch { features: usize, labels: usize },
    #[error("class {0} has no samples")]
    EmptyClass(usize),
    #[error("classifier has {got} columns, features have {expected} rows")]
    ClassifierShape { expected: usize, got: usize },
    #[error("at least two classes are required")]
    TooFewClasses,
    #[error("class {0} has no neuron in the partition")]
    EmptyGroup(usize),
    #[error("certificate covers {got} classes, dataset has {expected}")]
    CertificateMismatch { expected: usize, got: usize },
    #[error("direction has zero norm")]
    ZeroDirection,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NcMetrics {
    /// `None` when the inter-class variance is zero.
    pub nc1: Option<f64>,
    #[serde(deserialize_with = "crate::linalg::f64_or_nan")]
    pub nc2: f64,
    #[serde(deserialize_with = "crate::linalg::f64_or_nan")]
    pub nc3: f64,
}

/// Raw class means as the columns of an `h × K` matrix.
fn class_means(features: &DMatrix<f64>, labels: &[usize], k: usize) -> Result<DMatrix<f64>, CollapseError> {
    let mut sums = DMatrix::zeros(features.nrows(), k);
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        let mut col = sums.column_mut(l);
        col += features.column(i);
        counts[l] += 1;
    }
    for (c, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(CollapseError::EmptyClass(c));
        }
        let mut col = sums.column_mut(c);
        col /= n as f64;
    }
    Ok(sums)
}

fn unit_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut col in out.column_iter_mut() {
        let n = col.norm();
        if n > 0.0 {
            col /= n;
        }
    }
    out
}

/// NC1 (intra/inter-class variance ratio), NC2 (Gram of unit class-mean
/// directions against `I/√K`) and NC3 (normalized `V Φ̄†` against the
/// unit-norm centering matrix `(I − 𝟙𝟙ᵀ/K)/√(K−1)`, or `(1, −1)/√2` for a
/// single output row).
pub fn nc_metrics(
    features: &DMatrix<f64>,
    labels: &[usize],
    num_classes: usize,
    classifier: &DMatrix<f64>,
) -> Result<NcMetrics, CollapseError> {
    let k = num_classes;
    if k < 2 {
        return Err(CollapseError::TooFewClasses);
    }
    if features.ncols() != labels.len() {
        return Err(CollapseError::LengthMismatch {
            features: features.ncols(),
            labels: labels.len(),
        });
    }
    if classifier.ncols() != features.nrows() {
        return Err(CollapseError::ClassifierShape {
            expected: features.nrows(),
            got: classifier.ncols(),
        });
    }
    let means = class_means(features, labels, k)?;
    let mut counts = vec![0usize; k];
    labels.iter().for_each(|&l| counts[l] += 1);

    let global = means.column_sum() / k as f64;
    let mut within = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        within += (features.column(i) - means.column(l)).norm_squared() / counts[l] as f64;
    }
    let between: f64 = means.column_iter().map(|m| (m - &global).norm_squared()).sum();
    let nc1 = if between > 0.0 { Some(within / between) } else { None };

    let dirs = unit_columns(&means);
    let gram = dirs.transpose() * &dirs;
    let gn = gram.norm();
    let ident = DMatrix::<f64>::identity(k, k) / (k as f64).sqrt();
    let nc2 = if gn > 0.0 { (gram / gn - ident).norm() } else { f64::NAN };

    let phi_bar = dirs.transpose();
    let prod = classifier * linalg::pinv(&phi_bar, PINV_RCOND);
    let target = if classifier.nrows() == 1 && k == 2 {
        DMatrix::from_row_slice(1, 2, &[1.0, -1.0]) / 2f64.sqrt()
    } else {
        let kf = k as f64;
        DMatrix::from_fn(classifier.nrows(), k, |r, c| {
            let delta = if r == c { 1.0 } else { 0.0 };
            (delta - 1.0 / kf) / (kf - 1.0).sqrt()
        })
    };
    let pn = prod.norm();
    let nc3 = if pn > 0.0 && prod.shape() == target.shape() {
        (prod / pn - target).norm()
    } else {
        f64::NAN
    };
    Ok(NcMetrics { nc1, nc2, nc3 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCollapse {
    pub class: usize,
    pub neurons: Vec<usize>,
    /// `σ₂/σ₁` of the class feature matrix.
    #[serde(deserialize_with = "crate::linalg::f64_or_nan")]
    pub rank1_residual: f64,
    /// Unit class-mean feature direction `φ̄_k`.
    pub mean_direction: Vec<f64>,
    #[serde(deserialize_with = "crate::linalg::f64_or_nan")]
    pub min_mean_entry: f64,
    /// `max_i ‖φ(x_i) − ⟨s_k u_k, x_i⟩ φ̄_k‖ / ‖φ(x_i)‖` over samples with nonzero features.
    #[serde(deserialize_with = "crate::linalg::f64_or_nan")]
    pub directional_collapse_residual: f64,
    /// `|{i ∈ I_k : φ(x_i) = 0}|`
    pub zero_feature_samples: usize,
    /// Cosine between the top input-space singular vector of `W_k` and `u_k`.
    #[serde(deserialize_with = "crate::linalg::f64_or_nan")]
    pub w_direction_cosine: f64,
    /// `σ₂/σ₁` of `W_k`.
    #[serde(deserialize_with = "crate::linalg::f64_or_nan")]
    pub w_rank1_residual: f64,
    /// Multi-class: cosine between the group's summed output weights and `ẽ_k`.
    /// Binary: cosine between the group's summed output weights and the class sign.
    #[serde(deserialize_with = "crate::linalg::f64_or_nan")]
    pub v_direction_cosine: f64,
    /// Binary only: every output weight of the group carries the class sign.
    pub v_sign_pattern_ok: bool,
    #[serde(deserialize_with = "crate::linalg::f64_or_nan")]
    pub w_norm: f64,
    #[serde(deserialize_with = "crate::linalg::f64_or_nan")]
    pub v_norm: f64,
    #[serde(deserialize_with = "crate::linalg::f64_or_nan")]
    pub s: f64,
    /// `|‖W_k‖_F − s_k| / s_k`
    #[serde(deserialize_with = "crate::linalg::f64_or_nan")]
    pub w_norm_rel_error: f64,
    /// `|‖V_k‖_F − s_k| / s_k`
    #[serde(deserialize_with = "crate::linalg::f64_or_nan")]
    pub v_norm_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub nc: NcMetrics,
    pub classes: Vec<ClassCollapse>,
    /// `max_{k≠k'} |⟨φ̄_k, φ̄_k'⟩|`
    #[serde(deserialize_with = "crate::linalg::f64_or_nan")]
    pub orthogonality: f64,
    /// Smallest entry over all `φ̄_k`.
    #[serde(deserialize_with = "crate::linalg::f64_or_nan")]
    pub nonnegativity: f64,
    /// `‖V̂ − predicted‖_F / ‖V̂‖_F`
    #[serde(deserialize_with = "crate::linalg::f64_or_nan")]
    pub duality_residual: f64,
    /// Largest `|⟨φ(x_i), φ(x_i')⟩|` over cross-class sample pairs.
    #[serde(deserialize_with = "crate::linalg::f64_or_nan")]
    pub max_cross_class_feature_gram: f64,
    /// Classes whose features are all zero (collapse is vacuous there).
    pub vacuous_classes: Vec<usize>,
}

impl CollapseReport {
    pub fn max_rank1_residual(&self) -> f64 {
        self.classes.iter().map(|c| c.rank1_residual).fold(0.0, f64::max)
    }

    pub fn min_w_direction_cosine(&self) -> f64 {
        self.classes.iter().map(|c| c.w_direction_cosine).fold(1.0, f64::min)
    }

    pub fn min_v_direction_cosine(&self) -> f64 {
        self.classes.iter().map(|c| c.v_direction_cosine).fold(1.0, f64::min)
    }

    pub fn max_v_norm_rel_error(&self) -> f64 {
        self.classes.iter().map(|c| c.v_norm_rel_error).fold(0.0, f64::max)
    }

    pub fn max_w_norm_rel_error(&self) -> f64 {
        self.classes.iter().map(|c| c.w_norm_rel_error).fold(0.0, f64::max)
    }

    pub fn max_directional_collapse_residual(&self) -> f64 {
        self.classes
            .iter()
            .map(|c| c.directional_collapse_residual)
            .fold(0.0, f64::max)
    }
}

/// Top left singular vector of the class feature matrix, computed on the rows
/// that are nonzero for this class and embedded with exact zeros elsewhere.
/// The sign makes the entry sum nonnegative.
fn class_direction(class_features: &DMatrix<f64>) -> (DVector<f64>, f64) {
    let h = class_features.nrows();
    let rows: Vec<usize> = (0..h)
        .filter(|&r| class_features.row(r).iter().any(|&v| v != 0.0))
        .collect();
    let mut dir = DVector::zeros(h);
    if rows.is_empty() {
        return (dir, 0.0);
    }
    let sub = class_features.select_rows(&rows);
    let (s1, s2, left, _) = linalg::top_singular(&sub);
    let sign = if left.sum() < 0.0 { -1.0 } else { 1.0 };
    for (a, &r) in rows.iter().enumerate() {
        dir[r] = sign * left[a];
    }
    let ratio = if s1 > 0.0 { s2 / s1 } else { 0.0 };
    (dir, ratio)
}

/// Residuals of the limiting characterization at the direction `θ/‖θ‖`:
/// per-class rank-one collapse of the features, orthogonal nonnegative class
/// means, rank-one class weights aligned with `u_k` and the pseudo-labels,
/// class norms against `s_k`, and the projected self-duality of `V`.
pub fn collapse_residuals(
    direction: &NetParams,
    data: &Dataset,
    partition: &[usize],
    cert: &MarginCertificate,
) -> Result<CollapseReport, CollapseError> {
    direction.check_data(data)?;
    let k = data.num_classes();
    check_partition(partition, direction.width(), k)?;
    if cert.classes.len() != k {
        return Err(CollapseError::CertificateMismatch {
            expected: k,
            got: cert.classes.len(),
        });
    }
    let norm = direction.norm();
    if norm == 0.0 {
        return Err(CollapseError::ZeroDirection);
    }
    let theta = direction.scaled(1.0 / norm);
    let features = theta.features(data);
    let binary = theta.loss_kind.is_binary();
    let frame = pseudo_label_frame(k)?;

    let mut classes = Vec::with_capacity(k);
    let mut vacuous = Vec::new();
    let mut dirs = Vec::with_capacity(k);
    for c in 0..k {
        let neurons: Vec<usize> = (0..partition.len()).filter(|&j| partition[j] == c).collect();
        if neurons.is_empty() {
            return Err(CollapseError::EmptyGroup(c));
        }
        let idx = data.class_indices(c);
        let class_feats = features.select_columns(idx);
        let (dir, rank1) = class_direction(&class_feats);
        if dir.iter().all(|&v| v == 0.0) {
            vacuous.push(c);
        }
        let margin = &cert.classes[c];
        let s = cert.s[c];
        let mut collapse_res: f64 = 0.0;
        let mut zero_samples = 0;
        for (a, &i) in idx.iter().enumerate() {
            let phi = class_feats.column(a);
            let pn = phi.norm();
            if pn == 0.0 {
                zero_samples += 1;
                continue;
            }
            let predicted = &dir * (s * margin.u.dot(&data.point(i)));
            collapse_res = collapse_res.max((phi - predicted).norm() / pn);
        }

        let wk = theta.w.select_columns(&neurons);
        let vk = theta.v.select_columns(&neurons);
        let (w1, w2, w_left, _) = linalg::top_singular(&wk);
        let mean_dir = data.class_mean_direction(c);
        let oriented = if w_left.dot(&mean_dir) < 0.0 { -w_left } else { w_left };
        let w_cos = linalg::cosine(&oriented, &margin.u);
        let v_sum = vk.column_sum();
        let (v_cos, sign_ok) = if binary {
            let sign = if c == 0 { 1.0 } else { -1.0 };
            let target = DVector::from_element(1, sign);
            (linalg::cosine(&v_sum, &target), vk.iter().all(|&x| x * sign > 0.0))
        } else {
            (linalg::cosine(&v_sum, &frame.label(c)), true)
        };
        let (w_norm, v_norm) = (wk.norm(), vk.norm());
        classes.push(ClassCollapse {
            class: c,
            neurons,
            rank1_residual: rank1,
            min_mean_entry: dir.iter().copied().fold(f64::INFINITY, f64::min),
            mean_direction: dir.iter().copied().collect(),
            directional_collapse_residual: collapse_res,
            zero_feature_samples: zero_samples,
            w_direction_cosine: w_cos,
            w_rank1_residual: if w1 > 0.0 { w2 / w1 } else { 0.0 },
            v_direction_cosine: v_cos,
            v_sign_pattern_ok: sign_ok,
            w_norm,
            v_norm,
            s,
            w_norm_rel_error: (w_norm - s).abs() / s,
            v_norm_rel_error: (v_norm - s).abs() / s,
        });
        dirs.push(dir);
    }

    let mut orthogonality: f64 = 0.0;
    for a in 0..k {
        for b in 0..a {
            orthogonality = orthogonality.max(dirs[a].dot(&dirs[b]).abs());
        }
    }
    let nonnegativity = classes.iter().map(|c| c.min_mean_entry).fold(f64::INFINITY, f64::min);

    let predicted = predicted_classifier(&dirs, &cert.s, binary)?;
    let vn = theta.v.norm();
    let duality_residual = if vn > 0.0 {
        (&theta.v - predicted).norm() / vn
    } else {
        f64::INFINITY
    };

    let mut cross: f64 = 0.0;
    let gram = features.transpose() * &features;
    for i in 0..data.len() {
        for i2 in 0..i {
            if data.label(i) != data.label(i2) {
                cross = cross.max(gram[(i, i2)].abs());
            }
        }
    }

    let nc = nc_metrics(&features, data.labels(), k, &theta.v)?;
    Ok(CollapseReport {
        nc,
        classes,
        orthogonality,
        nonnegativity,
        duality_residual,
        max_cross_class_feature_gram: cross,
        vacuous_classes: vacuous,
    })
}

/// `s₊φ̄₊ᵀ − s₋φ̄₋ᵀ` for one output row, otherwise `Ẽ [s_1 φ̄_1, …, s_K φ̄_K]ᵀ`.
pub fn predicted_classifier(dirs: &[DVector<f64>], s: &[f64], binary: bool) -> Result<DMatrix<f64>, CollapseError> {
    let k = dirs.len();
    let h = dirs.first().map_or(0, |d| d.len());
    if binary {
        let mut v = DMatrix::zeros(1, h);
        for j in 0..h {
            v[(0, j)] = s[0] * dirs[0][j] - s[1] * dirs[1][j];
        }
        return Ok(v);
    }
    let frame = pseudo_label_frame(k)?;
    let mut scaled = DMatrix::zeros(k, h);
    for c in 0..k {
        for j in 0..h {
            scaled[(c, j)] = s[c] * dirs[c][j];
        }
    }
    Ok(&frame.e_tilde * scaled)
}

/// The limiting direction `W̄_k = s_k u_k g_kᵀ`, `V̄_k = s_k ẽ_k g_kᵀ` (binary:
/// `V̄_± = ±s_± g_±ᵀ`), with `g_k` spread uniformly over the neurons of group `k`.
pub fn closed_form_direction(
    cert: &MarginCertificate,
    partition: &[usize],
    loss_kind: LossKind,
) -> Result<NetParams, CollapseError> {
    let k = cert.classes.len();
    let h = partition.len();
    let d = cert.classes.first().map_or(0, |c| c.u.len());
    check_partition(partition, h, k)?;
    let dy = loss_kind.output_dim(k);
    let frame = pseudo_label_frame(k)?;
    let mut w = DMatrix::zeros(d, h);
    let mut v = DMatrix::zeros(dy, h);
    for c in 0..k {
        let group: Vec<usize> = (0..h).filter(|&j| partition[j] == c).collect();
        if group.is_empty() {
            return Err(CollapseError::EmptyGroup(c));
        }
        let g = 1.0 / (group.len() as f64).sqrt();
        let s = cert.s[c];
        for &j in &group {
            w.set_column(j, &(&cert.classes[c].u * (s * g)));
            if loss_kind.is_binary() {
                v[(0, j)] = if c == 0 { s * g } else { -s * g };
            } else {
                v.set_column(j, &(frame.label(c) * (s * g)));
            }
        }
    }
    Ok(NetParams::new(w, v, loss_kind)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaSummary {
    /// `σ_i² / Σ σ²` for the top `r` components, zero-padded beyond the rank.
    pub ratios: Vec<f64>,
    #[serde(deserialize_with = "crate::linalg::f64_or_nan")]
    pub explained: f64,
    /// `√(1 − explained)`: relative Frobenius error of the rank-`r` approximation.
    #[serde(deserialize_with = "crate::linalg::f64_or_nan")]
    pub relative_error: f64,
    /// `r × n` coordinates of the samples on the top components.
    pub coordinates: DMatrix<f64>,
}

/// Uncentered PCA of an `h × n` feature matrix. Each component's largest-magnitude
/// entry is made positive.
pub fn feature_pca_summary(features: &DMatrix<f64>, top_r: usize) -> PcaSummary {
    let r = top_r.max(1);
    let svd = linalg::svd_sorted(features);
    let total: f64 = svd.sigma.iter().map(|s| s * s).sum();
    let n = features.ncols();
    let mut ratios = vec![0.0; r];
    let mut coords = DMatrix::zeros(r, n);
    for (c, ratio) in ratios.iter_mut().enumerate().take(svd.sigma.len()) {
        *ratio = if total > 0.0 { svd.sigma[c].powi(2) / total } else { 0.0 };
        let mut comp = svd.u.column(c).into_owned();
        let imax = comp.iamax();
        if comp[imax] < 0.0 {
            comp.neg_mut();
        }
        coords.set_row(c, &(comp.transpose() * features));
    }
    let explained: f64 = ratios.iter().sum();
    PcaSummary {
        relative_error: (1.0 - explained).max(0.0).sqrt(),
        ratios,
        explained,
        coordinates: coords,
    }
}
