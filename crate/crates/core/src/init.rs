//! Small balanced initializations and checks of the initialization assumptions.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::model::{pseudo_label_frame, LossKind, ModelError, NetParams};

/// Relative tolerance for the per-neuron norm balance of a shape.
pub const BALANCE_TOL: f64 = 1e-12;
/// Equality margin for the strict repeller test.
pub const STRICT_TOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum InitError {
    #[error("width must be positive")]
    ZeroWidth,
    #[error("epsilon must be positive and finite, got {0}")]
    BadEpsilon(f64),
    #[error("W shape has {w} columns but V shape has {v}")]
    WidthMismatch { w: usize, v: usize },
    #[error("shape of neuron {0} has a zero vector")]
    ZeroShape(usize),
    #[error("neuron {neuron} is unbalanced: |w| = {w_norm}, |v| = {v_norm}")]
    Unbalanced { neuron: usize, w_norm: f64, v_norm: f64 },
    #[error("this check needs {needed} classes, the dataset has {got}")]
    WrongClassCount { needed: &'static str, got: usize },
    #[error("shape dimensions ({d}, {dy}) do not fit the dataset ({data_d}, {data_dy})")]
    DimensionMismatch {
        d: usize,
        dy: usize,
        data_d: usize,
        data_dy: usize,
    },
    #[error("width {width} is below the number of classes {classes}")]
    TooNarrow { width: usize, classes: usize },
    #[error("partition has {got} entries for {width} neurons")]
    PartitionLength { width: usize, got: usize },
    #[error("partition assigns neuron {neuron} to class {class}, outside [0, {classes})")]
    PartitionClass {
        neuron: usize,
        class: usize,
        classes: usize,
    },
    #[error("output weight of neuron {0} is zero, its class is undefined")]
    ZeroOutputWeight(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Initialization shape `(w_j0, v_j0)` and scale ε: `θ(0) = ε · shape`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitShape {
    pub w: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub epsilon: f64,
}

/// `1e-4 / √h`.
pub fn default_epsilon(width: usize) -> f64 {
    1e-4 / (width as f64).sqrt()
}

impl InitShape {
    pub fn new(w: DMatrix<f64>, v: DMatrix<f64>, epsilon: f64) -> Result<Self, InitError> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(InitError::BadEpsilon(epsilon));
        }
        if w.ncols() != v.ncols() {
            return Err(InitError::WidthMismatch {
                w: w.ncols(),
                v: v.ncols(),
            });
        }
        if w.ncols() == 0 {
            return Err(InitError::ZeroWidth);
        }
        for j in 0..w.ncols() {
            let (wn, vn) = (w.column(j).norm(), v.column(j).norm());
            if wn == 0.0 || vn == 0.0 {
                return Err(InitError::ZeroShape(j));
            }
            if (wn - vn).abs() > BALANCE_TOL * wn.max(vn).max(1.0) {
                return Err(InitError::Unbalanced {
                    neuron: j,
                    w_norm: wn,
                    v_norm: vn,
                });
            }
        }
        Ok(Self { w, v, epsilon })
    }

    pub fn width(&self) -> usize {
        self.w.ncols()
    }

    /// Largest `|‖w_j0‖ − ‖v_j0‖|`.
    pub fn balance_error(&self) -> f64 {
        self.w
            .column_iter()
            .zip(self.v.column_iter())
            .map(|(a, b)| (a.norm() - b.norm()).abs())
            .fold(0.0, f64::max)
    }

    /// `θ(0) = ε · (W_0, V_0)`.
    pub fn materialize(&self, loss_kind: LossKind) -> Result<NetParams, ModelError> {
        NetParams::new(&self.w * self.epsilon, &self.v * self.epsilon, loss_kind)
    }

    /// Same shape at another scale.
    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self, InitError> {
        Self::new(self.w.clone(), self.v.clone(), epsilon)
    }
}

/// Gaussian shapes with each output shape rescaled to the norm of its input shape.
pub fn random_balanced(
    input_dim: usize,
    output_dim: usize,
    width: usize,
    epsilon: f64,
    seed: u64,
) -> Result<InitShape, InitError> {
    if width == 0 {
        return Err(InitError::ZeroWidth);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = DMatrix::from_fn(input_dim, width, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut v = DMatrix::from_fn(output_dim, width, |_, _| rng.sample::<f64, _>(StandardNormal));
    for j in 0..width {
        // a zero draw has probability zero; redraw for completeness
        while w.column(j).norm() == 0.0 {
            for r in 0..input_dim {
                w[(r, j)] = rng.sample(StandardNormal);
            }
        }
        while v.column(j).norm() == 0.0 {
            for r in 0..output_dim {
                v[(r, j)] = rng.sample(StandardNormal);
            }
        }
        let scale = w.column(j).norm() / v.column(j).norm();
        v.column_mut(j).scale_mut(scale);
    }
    InitShape::new(w, v, epsilon)
}

/// Neuron pairs drawn from the (data, pseudo-label) pairs `(x_i/‖x_i‖, ẽ_{y_i})`.
/// The first `K` neurons are stratified, one per class. Returns the shape and
/// the partition `neuron → class`.
pub fn data_seeded_shapes(
    data: &Dataset,
    width: usize,
    epsilon: f64,
    seed: u64,
) -> Result<(InitShape, Vec<usize>), InitError> {
    let k = data.num_classes();
    if width < k {
        return Err(InitError::TooNarrow { width, classes: k });
    }
    let frame = pseudo_label_frame(k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = DMatrix::zeros(data.dim(), width);
    let mut v = DMatrix::zeros(k, width);
    let mut partition = Vec::with_capacity(width);
    for j in 0..width {
        let i = if j < k {
            let members = data.class_indices(j);
            members[rng.random_range(0..members.len())]
        } else {
            rng.random_range(0..data.len())
        };
        let x = data.point(i);
        w.set_column(j, &(x / x.norm()));
        let label = data.label(i);
        v.set_column(j, &frame.e_tilde.column(label));
        partition.push(label);
    }
    Ok((InitShape::new(w, v, epsilon)?, partition))
}

/// Neuron groups read off the output weights: for one output row, positive
/// `v_j` belongs to class 0 and negative to class 1; otherwise neuron `j`
/// belongs to `argmax_k ⟨ẽ_k, v_j⟩` (lowest index on ties).
pub fn derive_partition(v: &DMatrix<f64>, num_classes: usize) -> Result<Vec<usize>, InitError> {
    if v.nrows() == 1 {
        return v
            .iter()
            .enumerate()
            .map(|(j, &x)| {
                if x > 0.0 {
                    Ok(0)
                } else if x < 0.0 {
                    Ok(1)
                } else {
                    Err(InitError::ZeroOutputWeight(j))
                }
            })
            .collect();
    }
    let frame = pseudo_label_frame(num_classes)?;
    if v.nrows() != num_classes {
        return Err(InitError::DimensionMismatch {
            d: 0,
            dy: v.nrows(),
            data_d: 0,
            data_dy: num_classes,
        });
    }
    let scores = frame.e_tilde.transpose() * v;
    (0..v.ncols())
        .map(|j| {
            let col = scores.column(j);
            if v.column(j).norm() == 0.0 {
                return Err(InitError::ZeroOutputWeight(j));
            }
            let mut best = 0;
            for c in 1..num_classes {
                if col[c] > col[best] {
                    best = c;
                }
            }
            Ok(best)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonDegeneracyReport {
    /// `N_+ = {j : v_j0 > 0}`
    pub positive_neurons: Vec<usize>,
    /// `N_- = {j : v_j0 < 0}`
    pub negative_neurons: Vec<usize>,
    /// Neurons with `v_j0 = 0`; their presence fails the check.
    pub zero_output_neurons: Vec<usize>,
    /// `max_{i∈I_+, j∈N_+} ⟨x_i, w_j0⟩` (−∞ when `N_+` is empty).
    pub max_activation_positive: f64,
    pub max_activation_negative: f64,
    /// `max_{j∈N_+} ⟨x̄_-, ŵ_j0⟩` (−∞ when `N_+` is empty).
    pub repeller_alignment_positive: f64,
    pub repeller_alignment_negative: f64,
    /// `1 − repeller alignment`; must exceed `STRICT_TOL`.
    pub repeller_slack_positive: f64,
    pub repeller_slack_negative: f64,
    pub satisfied: bool,
}

/// Binary non-degeneracy: both sign groups non-empty, each with an input
/// weight activated by its own class, and none aligned with the opposite
/// class average.
pub fn check_non_degenerate(shape: &InitShape, data: &Dataset) -> Result<NonDegeneracyReport, InitError> {
    if data.num_classes() != 2 {
        return Err(InitError::WrongClassCount {
            needed: "exactly 2",
            got: data.num_classes(),
        });
    }
    if shape.v.nrows() != 1 || shape.w.nrows() != data.dim() {
        return Err(InitError::DimensionMismatch {
            d: shape.w.nrows(),
            dy: shape.v.nrows(),
            data_d: data.dim(),
            data_dy: 1,
        });
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    let mut zero = Vec::new();
    for (j, &vj) in shape.v.iter().enumerate() {
        if vj > 0.0 {
            pos.push(j);
        } else if vj < 0.0 {
            neg.push(j);
        } else {
            zero.push(j);
        }
    }
    let mean = [data.class_mean_direction(0), data.class_mean_direction(1)];
    let group = |neurons: &[usize], own: usize| -> (f64, f64) {
        let mut act = f64::NEG_INFINITY;
        let mut rep = f64::NEG_INFINITY;
        for &j in neurons {
            let w = shape.w.column(j);
            for &i in data.class_indices(own) {
                act = act.max(data.point(i).dot(&w));
            }
            rep = rep.max(mean[1 - own].dot(&w) / w.norm());
        }
        (act, rep)
    };
    let (act_p, rep_p) = group(&pos, 0);
    let (act_n, rep_n) = group(&neg, 1);
    let slack_p = 1.0 - rep_p;
    let slack_n = 1.0 - rep_n;
    let satisfied = !pos.is_empty()
        && !neg.is_empty()
        && zero.is_empty()
        && act_p > 0.0
        && act_n > 0.0
        && slack_p > STRICT_TOL
        && slack_n > STRICT_TOL;
    Ok(NonDegeneracyReport {
        positive_neurons: pos,
        negative_neurons: neg,
        zero_output_neurons: zero,
        max_activation_positive: act_p,
        max_activation_negative: act_n,
        repeller_alignment_positive: rep_p,
        repeller_alignment_negative: rep_n,
        repeller_slack_positive: slack_p,
        repeller_slack_negative: slack_n,
        satisfied,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronSemiLocal {
    pub neuron: usize,
    pub class: usize,
    /// `|I_k'^{w}|` for every class `k'`.
    pub active_counts: Vec<usize>,
    /// `A_k'^{w}` for every class `k'`.
    pub aggregate_alignment: Vec<f64>,
    /// `B_k'^{v}` for every class `k'`.
    pub label_alignment: Vec<f64>,
    /// `|I_k|² − Σ_{k'≠k} |I_k'|²`
    pub count_slack: f64,
    /// `A_k − 2 Σ_{k'≠k} A_k'`
    pub alignment_slack: f64,
    /// `B_k − (1 − 1/(2(K−1)))`
    pub label_slack: f64,
    pub satisfied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemiLocalReport {
    pub partition: Vec<usize>,
    pub neurons: Vec<NeuronSemiLocal>,
    /// Classes that received no neuron.
    pub empty_classes: Vec<usize>,
    pub all_satisfied: bool,
}

impl SemiLocalReport {
    pub fn pass_fraction(&self) -> f64 {
        let ok = self.neurons.iter().filter(|n| n.satisfied).count();
        ok as f64 / self.neurons.len().max(1) as f64
    }
}

/// Evaluates the three semi-local inequalities for every neuron against its
/// assigned class.
pub fn check_semi_local(shape: &InitShape, data: &Dataset, partition: &[usize]) -> Result<SemiLocalReport, InitError> {
    let k = data.num_classes();
    if k < 3 {
        return Err(InitError::WrongClassCount {
            needed: "more than 2",
            got: k,
        });
    }
    if shape.v.nrows() != k || shape.w.nrows() != data.dim() {
        return Err(InitError::DimensionMismatch {
            d: shape.w.nrows(),
            dy: shape.v.nrows(),
            data_d: data.dim(),
            data_dy: k,
        });
    }
    let h = shape.width();
    if partition.len() != h {
        return Err(InitError::PartitionLength {
            width: h,
            got: partition.len(),
        });
    }
    if let Some((neuron, &class)) = partition.iter().enumerate().find(|(_, &c)| c >= k) {
        return Err(InitError::PartitionClass {
            neuron,
            class,
            classes: k,
        });
    }
    let frame = pseudo_label_frame(k)?;
    let label_threshold = 1.0 - 1.0 / (2.0 * (k as f64 - 1.0));
    let mut neurons = Vec::with_capacity(h);
    for (j, &class) in partition.iter().enumerate() {
        let w = shape.w.column(j);
        let v = shape.v.column(j);
        let (wn, vn) = (w.norm(), v.norm());
        if wn == 0.0 || vn == 0.0 {
            return Err(InitError::ZeroShape(j));
        }
        let mut counts = vec![0usize; k];
        let mut align = vec![0.0; k];
        for i in 0..data.len() {
            let a = data.point(i).dot(&w) / wn;
            if a > 0.0 {
                counts[data.label(i)] += 1;
                align[data.label(i)] += a;
            }
        }
        let labels: Vec<f64> = (0..k).map(|c| frame.e_tilde.column(c).dot(&v) / vn).collect();
        let other_sq: f64 = (0..k)
            .filter(|&c| c != class)
            .map(|c| (counts[c] * counts[c]) as f64)
            .sum();
        let other_a: f64 = (0..k).filter(|&c| c != class).map(|c| align[c]).sum();
        let count_slack = (counts[class] * counts[class]) as f64 - other_sq;
        let alignment_slack = align[class] - 2.0 * other_a;
        let label_slack = labels[class] - label_threshold;
        neurons.push(NeuronSemiLocal {
            neuron: j,
            class,
            satisfied: count_slack > 0.0 && alignment_slack > 0.0 && label_slack >= -STRICT_TOL,
            active_counts: counts,
            aggregate_alignment: align,
            label_alignment: labels,
            count_slack,
            alignment_slack,
            label_slack,
        });
    }
    let empty_classes: Vec<usize> = (0..k).filter(|c| !partition.contains(c)).collect();
    let all_satisfied = empty_classes.is_empty() && neurons.iter().all(|n| n.satisfied);
    Ok(SemiLocalReport {
        partition: partition.to_vec(),
        neurons,
        empty_classes,
        all_satisfied,
    })
}
