//! Alignment-phase and separation diagnostics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::linalg;
use crate::model::{pseudo_label_frame, relu_derivative, Gradients, ModelError, NetParams};

use super::{LogRecord, TrajectoryLog};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    pub separated: bool,
    /// `(neuron, sample)` pairs breaking the sign pattern of a live neuron.
    pub violations: Vec<(usize, usize)>,
    /// Neurons with no positive activation on any sample.
    pub dead_neurons: Vec<usize>,
    pub live_neurons_per_class: Vec<usize>,
    /// `max_{k≠k'} max_{i∈I_k, i'∈I_k'} ⟨φ(x_i), φ(x_i')⟩`
    #[serde(deserialize_with = "crate::linalg::f64_or_nan")]
    pub max_cross_class_feature_gram: f64,
}

/// Checks the inter-class separation pattern: every live neuron of group `k`
/// is active on all of class `k` and inactive on every other class, and each
/// group has at least one live neuron. Dead neurons are allowed.
pub fn detect_separation(params: &NetParams, data: &Dataset, partition: &[usize]) -> SeparationReport {
    let z = params.preactivations(data);
    let k = data.num_classes();
    let mut violations = Vec::new();
    let mut dead = Vec::new();
    let mut live = vec![0usize; k];
    for (j, &group) in partition.iter().enumerate() {
        let row = z.row(j);
        if row.iter().all(|&v| v <= 0.0) {
            dead.push(j);
            continue;
        }
        live[group] += 1;
        for (i, &label) in data.labels().iter().enumerate() {
            let a = row[i];
            let ok = if label == group { a > 0.0 } else { a <= 0.0 };
            if !ok {
                violations.push((j, i));
            }
        }
    }
    let phi = z.map(|v| v.max(0.0));
    let gram = phi.transpose() * &phi;
    let mut cross = f64::NEG_INFINITY;
    for i in 0..data.len() {
        for i2 in 0..i {
            if data.label(i) != data.label(i2) {
                cross = cross.max(gram[(i, i2)]);
            }
        }
    }
    SeparationReport {
        separated: violations.is_empty() && live.iter().all(|&c| c > 0),
        violations,
        dead_neurons: dead,
        live_neurons_per_class: live,
        max_cross_class_feature_gram: cross,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResidual {
    pub neuron: usize,
    /// Input-side residual `‖d/dt ŵ_j − predicted‖`.
    #[serde(deserialize_with = "crate::linalg::f64_or_nan")]
    pub residual: f64,
    /// Output-side residual (multi-class only).
    pub v_residual: Option<f64>,
    /// `(16/√K) ε n X_max² √h`
    #[serde(deserialize_with = "crate::linalg::f64_or_nan")]
    pub bound: f64,
    pub within_bound: bool,
    /// `‖w_j‖² ≤ ε/√h`; outside the regime the bound makes no claim.
    pub in_regime: bool,
}

/// `(16/√K) ε n X_max² √h`, with `K = 2` for a single output row.
pub fn alignment_bound(epsilon: f64, data: &Dataset, width: usize) -> f64 {
    let k = data.num_classes() as f64;
    let x = data.x_max();
    16.0 / k.sqrt() * epsilon * data.len() as f64 * x * x * (width as f64).sqrt()
}

/// Compares the exact angular velocity of each input weight, computed from the
/// exact gradient, with its small-output approximation:
/// binary `sign(v_j) Π(Σ ξ_ij y_i x_i)`, multi-class
/// `√((K−1)/K) Π(Σ ξ_ij ⟨ẽ_{y_i}, v̂_j⟩ x_i)`.
pub fn alignment_ode_residual(
    params: &NetParams,
    grads: &Gradients,
    data: &Dataset,
    epsilon: f64,
    subgrad_at_zero: f64,
) -> Result<Vec<AlignmentResidual>, ModelError> {
    params.check_data(data)?;
    let h = params.width();
    let k = data.num_classes();
    let kf = k as f64;
    let bound = alignment_bound(epsilon, data, h);
    let regime = epsilon / (h as f64).sqrt();
    let z = params.preactivations(data);
    let binary = params.loss_kind.is_binary();
    let frame = pseudo_label_frame(k)?;
    let c = ((kf - 1.0) / kf).sqrt();
    let mut out = Vec::with_capacity(h);
    for j in 0..h {
        let w = params.w.column(j).into_owned();
        let v = params.v.column(j).into_owned();
        let (wn, vn) = (w.norm(), v.norm());
        if wn == 0.0 || vn == 0.0 {
            out.push(AlignmentResidual {
                neuron: j,
                residual: f64::NAN,
                v_residual: None,
                bound,
                within_bound: false,
                in_regime: false,
            });
            continue;
        }
        let w_dot = -grads.dw.column(j).into_owned();
        let exact = linalg::project_out(&w_dot, &w) / wn;
        let mut drive = DVector::zeros(w.len());
        let v_hat = &v / vn;
        for i in 0..data.len() {
            let xi = relu_derivative(z[(j, i)], subgrad_at_zero);
            if xi == 0.0 {
                continue;
            }
            let coef = if binary {
                v[0].signum() * data.binary_sign(i)
            } else {
                c * frame.e_tilde.column(data.label(i)).dot(&v_hat)
            };
            drive.axpy(xi * coef, &data.point(i), 1.0);
        }
        let predicted = linalg::project_out(&drive, &w);
        let residual = (exact - predicted).norm();

        let v_residual = if binary {
            None
        } else {
            let v_dot = -grads.dv.column(j).into_owned();
            let exact_v = linalg::project_out(&v_dot, &v) / vn;
            let mut drive_v = DVector::zeros(k);
            let w_hat = &w / wn;
            for i in 0..data.len() {
                let a = data.point(i).dot(&w_hat).max(0.0);
                if a > 0.0 {
                    drive_v.axpy(c * a, &frame.e_tilde.column(data.label(i)), 1.0);
                }
            }
            let predicted_v = linalg::project_out(&drive_v, &v);
            Some((exact_v - predicted_v).norm())
        };
        let in_regime = wn * wn <= regime;
        out.push(AlignmentResidual {
            neuron: j,
            residual,
            v_residual,
            bound,
            within_bound: residual <= bound && v_residual.is_none_or(|r| r <= bound),
            in_regime,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmallNormReport {
    /// `T = ln(1/(√h ε)) / (4 n X_max)` in integrated time.
    #[serde(deserialize_with = "crate::linalg::f64_or_nan")]
    pub window: f64,
    /// Whether the log reaches `T`.
    pub covers_window: bool,
    pub records_checked: usize,
    #[serde(deserialize_with = "crate::linalg::f64_or_nan")]
    pub max_w_norm_sq: f64,
    /// `ε/√h`
    #[serde(deserialize_with = "crate::linalg::f64_or_nan")]
    pub w_norm_sq_bound: f64,
    #[serde(deserialize_with = "crate::linalg::f64_or_nan")]
    pub max_output_norm: f64,
    /// `2 ε X_max √h`
    #[serde(deserialize_with = "crate::linalg::f64_or_nan")]
    pub output_bound: f64,
    pub holds: bool,
    pub first_violation_step: Option<usize>,
}

pub fn small_norm_window(epsilon: f64, data: &Dataset, width: usize) -> f64 {
    let h = width as f64;
    (1.0 / (h.sqrt() * epsilon)).ln() / (4.0 * data.len() as f64 * data.x_max())
}

/// Checks `max_j ‖w_j‖² ≤ ε/√h` and `max_i ‖f(x_i)‖ ≤ 2 ε X_max √h` on every
/// logged record with integrated time at most `T`, and always on the initial one.
pub fn small_norm_envelope_check(log: &TrajectoryLog, epsilon: f64, data: &Dataset) -> SmallNormReport {
    let h = log.final_params.width();
    let window = small_norm_window(epsilon, data, h);
    let w_bound = epsilon / (h as f64).sqrt();
    let out_bound = 2.0 * epsilon * data.x_max() * (h as f64).sqrt();
    let in_window: Vec<&LogRecord> = log.records.iter().filter(|r| r.step == 0 || r.time <= window).collect();
    let covers = log.records.iter().any(|r| r.time >= window) || log.time >= window;
    let mut max_w: f64 = 0.0;
    let mut max_f: f64 = 0.0;
    let mut first = None;
    for r in &in_window {
        max_w = max_w.max(r.max_w_norm_sq);
        max_f = max_f.max(r.max_output_norm);
        if first.is_none() && (r.max_w_norm_sq > w_bound || r.max_output_norm > out_bound) {
            first = Some(r.step);
        }
    }
    SmallNormReport {
        window,
        covers_window: covers,
        records_checked: in_window.len(),
        max_w_norm_sq: max_w,
        w_norm_sq_bound: w_bound,
        max_output_norm: max_f,
        output_bound: out_bound,
        holds: first.is_none() && !in_window.is_empty(),
        first_violation_step: first,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronDiagnostics {
    #[serde(deserialize_with = "crate::linalg::f64_or_nan")]
    pub w_norm_sq: f64,
    #[serde(deserialize_with = "crate::linalg::f64_or_nan")]
    pub v_norm_sq: f64,
    /// `‖w_j‖² − ‖v_j‖²`
    #[serde(deserialize_with = "crate::linalg::f64_or_nan")]
    pub balance_gap: f64,
    /// Binary only.
    pub v_sign: Option<f64>,
    /// `|I_k^{w_j}|` per class.
    pub active_counts: Vec<usize>,
    /// `A_k^{w_j}` per class.
    pub aggregate_alignment: Vec<f64>,
    /// `B_k^{v_j}` per class (multi-class only).
    pub label_alignment: Vec<f64>,
    /// `cos(w_j, x̄_k)` per class.
    pub class_cosines: Vec<f64>,
}

pub fn neuron_diagnostics(params: &NetParams, data: &Dataset, class_means: &[DVector<f64>]) -> Vec<NeuronDiagnostics> {
    let k = data.num_classes();
    let z = params.preactivations(data);
    let binary = params.loss_kind.is_binary();
    let frame = if binary { None } else { pseudo_label_frame(k).ok() };
    (0..params.width())
        .map(|j| {
            let w = params.w.column(j).into_owned();
            let v = params.v.column(j).into_owned();
            let (wn, vn) = (w.norm(), v.norm());
            let mut counts = vec![0usize; k];
            let mut align = vec![0.0; k];
            for (i, &l) in data.labels().iter().enumerate() {
                if z[(j, i)] > 0.0 {
                    counts[l] += 1;
                    align[l] += z[(j, i)] / wn;
                }
            }
            let label_alignment = match &frame {
                Some(f) if vn > 0.0 => (0..k).map(|c| f.e_tilde.column(c).dot(&v) / vn).collect(),
                _ => Vec::new(),
            };
            NeuronDiagnostics {
                w_norm_sq: wn * wn,
                v_norm_sq: vn * vn,
                balance_gap: wn * wn - vn * vn,
                v_sign: binary.then(|| v[0].signum()),
                active_counts: counts,
                aggregate_alignment: align,
                label_alignment,
                class_cosines: class_means.iter().map(|m| linalg::cosine(&w, m)).collect(),
            }
        })
        .collect()
}

/// Largest `‖f(x_i)‖` over the samples.
pub fn max_output_norm(outputs: &DMatrix<f64>) -> f64 {
    outputs.column_iter().map(|c| c.norm()).fold(0.0, f64::max)
}
