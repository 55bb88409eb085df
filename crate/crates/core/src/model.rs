//! Two-layer bias-free ReLU network `f(x) = V σ(Wᵀx)`, its losses and exact
//! (sub)gradients.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;

/// Pre-activations with magnitude below this count as boundary events.
pub const BOUNDARY_TOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("W has {w} columns but V has {v}")]
    WidthMismatch { w: usize, v: usize },
    #[error("{kind:?} loss needs {expected} output row(s), V has {got}")]
    OutputDimMismatch {
        kind: LossKind,
        expected: usize,
        got: usize,
    },
    #[error("{kind:?} loss is binary but the dataset has {classes} classes")]
    NotBinary { kind: LossKind, classes: usize },
    #[error("width {width} is below the number of classes {classes}")]
    TooNarrow { width: usize, classes: usize },
    #[error("the pseudo-label frame needs K >= 2, got {0}")]
    TooFewClasses(usize),
    #[error("partition has {got} entries for {width} neurons")]
    PartitionLength { width: usize, got: usize },
    #[error("partition assigns neuron {neuron} to class {class}, outside [0, {classes})")]
    PartitionClass {
        neuron: usize,
        class: usize,
        classes: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `exp(-y ŷ)` with `y = ±1`.
    Exponential,
    /// `2 log(1 + exp(-y ŷ))` with `y = ±1`.
    Logistic,
    /// Softmax cross-entropy with one-hot labels.
    CrossEntropy,
}

impl LossKind {
    pub fn is_binary(self) -> bool {
        !matches!(self, LossKind::CrossEntropy)
    }

    /// Output dimension `d_y` for `K` classes.
    pub fn output_dim(self, num_classes: usize) -> usize {
        if self.is_binary() {
            1
        } else {
            num_classes
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Exponential => "exponential",
            LossKind::Logistic => "logistic",
            LossKind::CrossEntropy => "cross_entropy",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exponential" | "exp" => Ok(LossKind::Exponential),
            "logistic" => Ok(LossKind::Logistic),
            "cross_entropy" | "ce" => Ok(LossKind::CrossEntropy),
            other => Err(format!("unknown loss kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetParams {
    /// `D × h`; column `j` is the input weight `w_j`.
    pub w: DMatrix<f64>,
    /// `d_y × h`; column `j` is the output weight `v_j`.
    pub v: DMatrix<f64>,
    pub loss_kind: LossKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub dw: DMatrix<f64>,
    pub dv: DMatrix<f64>,
}

impl Gradients {
    pub fn norm(&self) -> f64 {
        (self.dw.norm_squared() + self.dv.norm_squared()).sqrt()
    }
}

impl NetParams {
    pub fn new(w: DMatrix<f64>, v: DMatrix<f64>, loss_kind: LossKind) -> Result<Self, ModelError> {
        if w.ncols() != v.ncols() {
            return Err(ModelError::WidthMismatch {
                w: w.ncols(),
                v: v.ncols(),
            });
        }
        if loss_kind.is_binary() && v.nrows() != 1 {
            return Err(ModelError::OutputDimMismatch {
                kind: loss_kind,
                expected: 1,
                got: v.nrows(),
            });
        }
        Ok(Self { w, v, loss_kind })
    }

    pub fn input_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.v.nrows()
    }

    pub fn width(&self) -> usize {
        self.w.ncols()
    }

    /// Frobenius norm of `θ = (W, V)`.
    pub fn norm(&self) -> f64 {
        (self.w.norm_squared() + self.v.norm_squared()).sqrt()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            w: &self.w * c,
            v: &self.v * c,
            loss_kind: self.loss_kind,
        }
    }

    /// `θ ← θ + alpha · g`.
    pub fn axpy(&mut self, alpha: f64, g: &Gradients) {
        self.w.zip_apply(&g.dw, |a, b| *a += alpha * b);
        self.v.zip_apply(&g.dv, |a, b| *a += alpha * b);
    }

    pub fn w_norms_sq(&self) -> Vec<f64> {
        self.w.column_iter().map(|c| c.norm_squared()).collect()
    }

    pub fn v_norms_sq(&self) -> Vec<f64> {
        self.v.column_iter().map(|c| c.norm_squared()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().chain(self.v.iter()).all(|x| x.is_finite())
    }

    /// Checks that the loss kind, output dimension, input dimension and width fit `data`.
    pub fn check_data(&self, data: &Dataset) -> Result<(), ModelError> {
        if data.dim() != self.input_dim() {
            return Err(ModelError::DimensionMismatch {
                expected: self.input_dim(),
                got: data.dim(),
            });
        }
        let k = data.num_classes();
        if self.loss_kind.is_binary() && k != 2 {
            return Err(ModelError::NotBinary {
                kind: self.loss_kind,
                classes: k,
            });
        }
        let dy = self.loss_kind.output_dim(k);
        if self.output_dim() != dy {
            return Err(ModelError::OutputDimMismatch {
                kind: self.loss_kind,
                expected: dy,
                got: self.output_dim(),
            });
        }
        if self.width() < k {
            return Err(ModelError::TooNarrow {
                width: self.width(),
                classes: k,
            });
        }
        Ok(())
    }

    /// Single-point evaluation: `(σ(Wᵀx), V σ(Wᵀx))`.
    pub fn forward(&self, x: &[f64]) -> Result<(DVector<f64>, DVector<f64>), ModelError> {
        if x.len() != self.input_dim() {
            return Err(ModelError::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let x = DVector::from_column_slice(x);
        let feature = (self.w.transpose() * x).map(relu);
        let output = &self.v * &feature;
        Ok((feature, output))
    }

    /// Pre-activations `Z = WᵀX` (`h × n`).
    pub fn preactivations(&self, data: &Dataset) -> DMatrix<f64> {
        self.w.transpose() * data.points()
    }

    /// Last-layer features `σ(WᵀX)` (`h × n`).
    pub fn features(&self, data: &Dataset) -> DMatrix<f64> {
        self.preactivations(data).map(relu)
    }

    /// Network outputs `F` (`d_y × n`).
    pub fn outputs(&self, data: &Dataset) -> DMatrix<f64> {
        &self.v * self.features(data)
    }

    /// Number of `(neuron, sample)` pairs with `|⟨x_i, w_j⟩| < BOUNDARY_TOL`.
    pub fn boundary_events(&self, data: &Dataset) -> usize {
        self.preactivations(data)
            .iter()
            .filter(|z| z.abs() < BOUNDARY_TOL)
            .count()
    }
}

pub fn relu(z: f64) -> f64 {
    z.max(0.0)
}

/// `log(1 + exp(z))` without overflow.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Max-shifted log-sum-exp.
pub fn log_sum_exp(f: &[f64]) -> f64 {
    let m = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + f.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax(f: &[f64]) -> Vec<f64> {
    let m = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = f.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Loss of one sample given its output column. `label` is the class index.
pub fn sample_loss(kind: LossKind, output: &[f64], label: usize) -> f64 {
    match kind {
        LossKind::Exponential => (-binary_y(label) * output[0]).exp(),
        LossKind::Logistic => 2.0 * softplus(-binary_y(label) * output[0]),
        LossKind::CrossEntropy => cross_entropy(output, label),
    }
}

/// `∂ℓ/∂ŷ` for one sample, written into `out`.
fn sample_loss_grad(kind: LossKind, output: &[f64], label: usize, out: &mut [f64]) {
    match kind {
        LossKind::Exponential => {
            let y = binary_y(label);
            out[0] = -y * (-y * output[0]).exp();
        }
        LossKind::Logistic => {
            let y = binary_y(label);
            out[0] = -2.0 * y * sigmoid(-y * output[0]);
        }
        LossKind::CrossEntropy => {
            let p = softmax(output);
            let mut others = 0.0;
            for (j, (o, pj)) in out.iter_mut().zip(p).enumerate() {
                *o = pj;
                if j != label {
                    others += pj;
                }
            }
            // p_y − 1 cancels catastrophically when p_y ≈ 1
            out[label] = -others;
        }
    }
}

/// `lse(f) − f_y`, accurate when the sample is confidently classified.
fn cross_entropy(f: &[f64], label: usize) -> f64 {
    let fy = f[label];
    let m = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let rest: f64 = f
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != label)
        .map(|(_, &v)| (v - m).exp())
        .sum();
    if fy == m {
        rest.ln_1p()
    } else {
        (m - fy) + ((fy - m).exp() + rest).ln()
    }
}

fn binary_y(label: usize) -> f64 {
    if label == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Per-sample losses in index order.
pub fn per_sample_losses(params: &NetParams, data: &Dataset) -> Result<Vec<f64>, ModelError> {
    params.check_data(data)?;
    let f = params.outputs(data);
    Ok(f.column_iter()
        .zip(data.labels())
        .map(|(col, &label)| sample_loss(params.loss_kind, col.as_slice(), label))
        .collect())
}

/// `L(θ) = Σ_i ℓ(y_i, f(x_i; θ))`.
pub fn loss(params: &NetParams, data: &Dataset) -> Result<f64, ModelError> {
    Ok(per_sample_losses(params, data)?.into_iter().sum())
}

/// Loss and exact gradients in one pass. At `⟨x_i, w_j⟩ = 0` the ReLU
/// derivative takes the value `subgrad_at_zero`.
pub fn loss_and_gradients(
    params: &NetParams,
    data: &Dataset,
    subgrad_at_zero: f64,
) -> Result<(f64, Gradients), ModelError> {
    params.check_data(data)?;
    Ok(loss_and_gradients_raw(
        params,
        data.points(),
        data.labels(),
        subgrad_at_zero,
    ))
}

/// Loss and gradients restricted to the samples `idx` (a minibatch).
pub fn batch_loss_and_gradients(
    params: &NetParams,
    data: &Dataset,
    idx: &[usize],
    subgrad_at_zero: f64,
) -> Result<(f64, Gradients), ModelError> {
    params.check_data(data)?;
    let points = data.points().select_columns(idx);
    let labels: Vec<usize> = idx.iter().map(|&i| data.label(i)).collect();
    Ok(loss_and_gradients_raw(params, &points, &labels, subgrad_at_zero))
}

fn loss_and_gradients_raw(
    params: &NetParams,
    points: &DMatrix<f64>,
    labels: &[usize],
    subgrad_at_zero: f64,
) -> (f64, Gradients) {
    let z = params.w.transpose() * points;
    let phi = z.map(relu);
    let f = &params.v * &phi;
    let dy = params.output_dim();
    let mut r = DMatrix::zeros(dy, labels.len());
    let mut total = 0.0;
    let mut buf = vec![0.0; dy];
    for (i, &label) in labels.iter().enumerate() {
        let col = f.column(i);
        total += sample_loss(params.loss_kind, col.as_slice(), label);
        sample_loss_grad(params.loss_kind, col.as_slice(), label, &mut buf);
        r.column_mut(i).copy_from_slice(&buf);
    }
    let dv = &r * phi.transpose();
    let mut dz = params.v.transpose() * &r;
    dz.zip_apply(&z, |g, zz| *g *= relu_derivative(zz, subgrad_at_zero));
    let dw = points * dz.transpose();
    (total, Gradients { dw, dv })
}

pub fn gradients(params: &NetParams, data: &Dataset, subgrad_at_zero: f64) -> Result<Gradients, ModelError> {
    Ok(loss_and_gradients(params, data, subgrad_at_zero)?.1)
}

pub fn relu_derivative(z: f64, subgrad_at_zero: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else if z < 0.0 {
        0.0
    } else {
        subgrad_at_zero
    }
}

/// `Ẽ = √(K/(K−1)) (I − 𝟙𝟙ᵀ/K)`; column `k` is the pseudo-label `ẽ_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelFrame {
    pub e_tilde: DMatrix<f64>,
}

impl PseudoLabelFrame {
    pub fn num_classes(&self) -> usize {
        self.e_tilde.ncols()
    }

    pub fn label(&self, k: usize) -> DVector<f64> {
        self.e_tilde.column(k).into_owned()
    }
}

pub fn pseudo_label_frame(num_classes: usize) -> Result<PseudoLabelFrame, ModelError> {
    let k = num_classes;
    if k < 2 {
        return Err(ModelError::TooFewClasses(k));
    }
    let kf = k as f64;
    let scale = (kf / (kf - 1.0)).sqrt();
    let e_tilde = DMatrix::from_fn(k, k, |r, c| {
        let delta = if r == c { 1.0 } else { 0.0 };
        scale * (delta - 1.0 / kf)
    });
    Ok(PseudoLabelFrame { e_tilde })
}

/// Threshold on `‖f‖` below which the softmax-deviation bound applies.
pub const SOFTMAX_BOUND_RADIUS: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxBoundRecord {
    pub index: usize,
    pub output_norm: f64,
    /// `‖softmax(f) − 𝟙/K‖`
    pub lhs: f64,
    /// `(8/√K) ‖f‖`
    pub rhs: f64,
    pub holds: bool,
    /// `‖f‖ > 1/4`: the bound makes no claim.
    pub skipped: bool,
}

/// Evaluates the softmax-deviation bound for a single output vector.
pub fn softmax_deviation(f: &[f64]) -> (f64, f64) {
    let k = f.len() as f64;
    let p = softmax(f);
    let lhs = p.iter().map(|&v| (v - 1.0 / k).powi(2)).sum::<f64>().sqrt();
    let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
    (lhs, 8.0 / k.sqrt() * norm)
}

pub fn softmax_deviation_bound_check(
    params: &NetParams,
    data: &Dataset,
) -> Result<Vec<SoftmaxBoundRecord>, ModelError> {
    params.check_data(data)?;
    let f = params.outputs(data);
    Ok(f.column_iter()
        .enumerate()
        .map(|(index, col)| {
            let norm = col.norm();
            let (lhs, rhs) = softmax_deviation(col.as_slice());
            let skipped = norm > SOFTMAX_BOUND_RADIUS;
            SoftmaxBoundRecord {
                index,
                output_norm: norm,
                lhs,
                rhs,
                holds: skipped || lhs <= rhs,
                skipped,
            }
        })
        .collect())
}

/// Loss of the class-separated network: class-`k` samples evaluated only
/// through the neurons assigned to `k`. Equals the full loss exactly once the
/// separation sign pattern holds.
pub fn class_decomposed_loss(params: &NetParams, data: &Dataset, partition: &[usize]) -> Result<f64, ModelError> {
    params.check_data(data)?;
    check_partition(partition, params.width(), data.num_classes())?;
    let phi = params.features(data);
    let mut total = 0.0;
    let mut out = vec![0.0; params.output_dim()];
    for (i, &label) in data.labels().iter().enumerate() {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (j, &group) in partition.iter().enumerate() {
            if group != label {
                continue;
            }
            let a = phi[(j, i)];
            for (o, vv) in out.iter_mut().zip(params.v.column(j).iter()) {
                *o += vv * a;
            }
        }
        total += sample_loss(params.loss_kind, &out, label);
    }
    Ok(total)
}

pub fn check_partition(partition: &[usize], width: usize, classes: usize) -> Result<(), ModelError> {
    if partition.len() != width {
        return Err(ModelError::PartitionLength {
            width,
            got: partition.len(),
        });
    }
    if let Some((neuron, &class)) = partition.iter().enumerate().find(|(_, &c)| c >= classes) {
        return Err(ModelError::PartitionClass { neuron, class, classes });
    }
    Ok(())
}
