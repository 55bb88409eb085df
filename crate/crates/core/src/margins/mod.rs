//! Class-wise max-margin directions, the limiting scales `s_k`, and KKT
//! residuals of the network margin problem.

mod nnls;

pub use nnls::{nnls, NnlsSolution};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::model::{check_partition, relu_derivative, ModelError, NetParams};

/// Default termination tolerance on the duality gap.
pub const DEFAULT_GAP_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum MarginError {
    #[error("no points given")]
    Empty,
    #[error("minimum-norm point has norm {norm:e}: the points are not positively correlated")]
    NonPositiveMargin { norm: f64 },
    #[error("solver stopped after {iterations} iterations with duality gap {gap:e}")]
    NotConverged { iterations: usize, gap: f64 },
    #[error("margin {gamma} of class {class} is not positive")]
    NonPositiveGamma { class: usize, gamma: f64 },
    #[error("{count} cross-class activations are positive; the class decomposition does not apply")]
    NotSeparated { count: usize },
    #[error("direction has zero norm")]
    ZeroDirection,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMargin {
    #[serde(deserialize_with = "crate::linalg::f64_or_nan")]
    pub gamma: f64,
    pub u: DVector<f64>,
    /// `‖p‖ − min_i ⟨x_i, p/‖p‖⟩`
    #[serde(deserialize_with = "crate::linalg::f64_or_nan")]
    pub duality_gap: f64,
    /// Convex coefficients over the class points reproducing the minimum-norm point.
    pub support_weights: Vec<f64>,
    pub iterations: usize,
}

/// Minimum-norm point of the convex hull of the columns of `points`, by
/// Wolfe's active-set (corral) algorithm. Ties between equally good vertices
/// go to the lowest index.
pub fn min_norm_point(points: &DMatrix<f64>, tol: f64) -> Result<ClassMargin, MarginError> {
    let m = points.ncols();
    if m == 0 {
        return Err(MarginError::Empty);
    }
    let norms_sq: Vec<f64> = points.column_iter().map(|c| c.norm_squared()).collect();
    let scale_sq = norms_sq.iter().copied().fold(0.0, f64::max);
    let mut start = 0;
    for i in 1..m {
        if norms_sq[i] < norms_sq[start] {
            start = i;
        }
    }
    let mut corral = vec![start];
    let mut lambda = vec![1.0];
    let max_iter = 50 * m + 200;
    let mut iterations = 0;

    let combine = |corral: &[usize], lambda: &[f64]| -> DVector<f64> {
        let mut p = DVector::zeros(points.nrows());
        for (&i, &l) in corral.iter().zip(lambda) {
            p.axpy(l, &points.column(i), 1.0);
        }
        p
    };

    loop {
        let p = combine(&corral, &lambda);
        let pp = p.norm_squared();
        let dots = points.transpose() * &p;
        let mut j = 0;
        for i in 1..m {
            if dots[i] < dots[j] {
                j = i;
            }
        }
        // Wolfe's optimality test, relative to the data scale.
        if dots[j] >= pp - 1e-15 * scale_sq || corral.contains(&j) || iterations >= max_iter {
            break;
        }
        iterations += 1;
        corral.push(j);
        lambda.push(0.0);
        loop {
            let alpha = affine_minimizer(points, &corral);
            if alpha.iter().all(|&a| a > 1e-14) {
                lambda = alpha;
                break;
            }
            let mut theta = 1.0f64;
            for (a, l) in alpha.iter().zip(&lambda) {
                if *a <= 1e-14 && l - a > 0.0 {
                    theta = theta.min(l / (l - a));
                }
            }
            for (l, a) in lambda.iter_mut().zip(&alpha) {
                *l = (1.0 - theta) * *l + theta * a;
            }
            let mut keep_c = Vec::with_capacity(corral.len());
            let mut keep_l = Vec::with_capacity(corral.len());
            for (&c, &l) in corral.iter().zip(&lambda) {
                if l > 1e-14 {
                    keep_c.push(c);
                    keep_l.push(l);
                }
            }
            if keep_c.is_empty() {
                // numerical breakdown; fall back to the entering vertex
                keep_c.push(j);
                keep_l.push(1.0);
            }
            let total: f64 = keep_l.iter().sum();
            keep_l.iter_mut().for_each(|l| *l /= total);
            corral = keep_c;
            lambda = keep_l;
            if corral.len() == 1 {
                break;
            }
        }
    }

    let p = combine(&corral, &lambda);
    let norm = p.norm();
    let max_norm = scale_sq.sqrt();
    if norm <= 1e-12 * max_norm {
        return Err(MarginError::NonPositiveMargin { norm });
    }
    let u = &p / norm;
    let min_dot = points.column_iter().map(|c| c.dot(&u)).fold(f64::INFINITY, f64::min);
    let gap = (norm - min_dot).max(0.0);
    if gap > tol {
        return Err(MarginError::NotConverged { iterations, gap });
    }
    let mut support_weights = vec![0.0; m];
    for (&c, &l) in corral.iter().zip(&lambda) {
        support_weights[c] += l;
    }
    Ok(ClassMargin {
        gamma: norm,
        u,
        duality_gap: gap,
        support_weights,
        iterations,
    })
}

/// Minimizer of `‖Σ α_s x_s‖` over the affine hull of the corral (`Σ α_s = 1`),
/// solved as an unconstrained least-squares problem in difference coordinates.
fn affine_minimizer(points: &DMatrix<f64>, corral: &[usize]) -> Vec<f64> {
    let base = points.column(corral[0]).into_owned();
    if corral.len() == 1 {
        return vec![1.0];
    }
    let diffs = DMatrix::from_fn(points.nrows(), corral.len() - 1, |r, c| {
        points[(r, corral[c + 1])] - base[r]
    });
    let svd = diffs.svd(true, true);
    let smax = svd.singular_values.max();
    let beta = svd.solve(&(-&base), smax * 1e-13).expect("U and V were computed");
    let mut alpha = Vec::with_capacity(corral.len());
    alpha.push(1.0 - beta.sum());
    alpha.extend(beta.iter());
    alpha
}

/// Solves `γ = max_{‖u‖=1} min_i ⟨x_i, u⟩` for the columns of `points`.
pub fn class_max_margin(points: &DMatrix<f64>) -> Result<ClassMargin, MarginError> {
    min_norm_point(points, DEFAULT_GAP_TOL)
}

/// `s_k = √(γ_k⁻¹ / (2 Σ γ_k'⁻¹))`.
pub fn scales(gammas: &[f64]) -> Result<Vec<f64>, MarginError> {
    if let Some((class, &gamma)) = gammas.iter().enumerate().find(|(_, &g)| !(g > 0.0)) {
        return Err(MarginError::NonPositiveGamma { class, gamma });
    }
    let total: f64 = gammas.iter().map(|g| 1.0 / g).sum();
    Ok(gammas.iter().map(|g| (1.0 / g / (2.0 * total)).sqrt()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginCertificate {
    pub classes: Vec<ClassMargin>,
    pub s: Vec<f64>,
}

impl MarginCertificate {
    pub fn gammas(&self) -> Vec<f64> {
        self.classes.iter().map(|c| c.gamma).collect()
    }
}

/// Per-class max margins (solved in parallel) and the scales.
pub fn margin_certificate(data: &Dataset) -> Result<MarginCertificate, MarginError> {
    let classes = (0..data.num_classes())
        .into_par_iter()
        .map(|k| class_max_margin(&data.class_points(k)))
        .collect::<Result<Vec<_>, _>>()?;
    let s = scales(&classes.iter().map(|c| c.gamma).collect::<Vec<_>>())?;
    Ok(MarginCertificate { classes, s })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    /// Factor applied to the direction so that the smallest margin equals 1
    /// (1 when no positive rescaling can make the direction feasible).
    #[serde(deserialize_with = "crate::linalg::f64_or_nan")]
    pub scale: f64,
    /// Smallest constraint value of the unit-norm direction.
    #[serde(deserialize_with = "crate::linalg::f64_or_nan")]
    pub min_margin_of_direction: f64,
    pub num_constraints: usize,
    /// `max_c max(0, 1 − c(θ))`
    #[serde(deserialize_with = "crate::linalg::f64_or_nan")]
    pub feasibility_violation: f64,
    /// `‖2θ − Σ λ_c ∇c(θ)‖`
    #[serde(deserialize_with = "crate::linalg::f64_or_nan")]
    pub stationarity: f64,
    /// `stationarity / ‖2θ‖`
    #[serde(deserialize_with = "crate::linalg::f64_or_nan")]
    pub stationarity_relative: f64,
    /// `max_c |λ_c (c(θ) − 1)|`
    #[serde(deserialize_with = "crate::linalg::f64_or_nan")]
    pub complementary_slackness: f64,
    pub multipliers: Vec<f64>,
    /// Constraints with margin within `1e-6` of 1.
    pub active_constraints: usize,
}

/// Number of `(neuron, sample)` pairs with a positive activation across the
/// partition (neuron assigned to another class than the sample).
pub fn cross_class_activations(params: &NetParams, data: &Dataset, partition: &[usize]) -> usize {
    let z = params.preactivations(data);
    let mut count = 0;
    for (i, &label) in data.labels().iter().enumerate() {
        for (j, &g) in partition.iter().enumerate() {
            if g != label && z[(j, i)] > 0.0 {
                count += 1;
            }
        }
    }
    count
}

/// Constraint values and their gradients (flattened `[W row-major, V row-major]`).
/// Binary: `y_i f(x_i) ≥ 1`; multi-class: `f_k(x_i) − f_l(x_i) ≥ 1` for `l ≠ k`.
fn constraints(params: &NetParams, data: &Dataset) -> (Vec<f64>, DMatrix<f64>) {
    let z = params.preactivations(data);
    let phi = z.map(|v| v.max(0.0));
    let f = &params.v * &phi;
    let (d, h, dy) = (params.input_dim(), params.width(), params.output_dim());
    let dim = d * h + dy * h;
    let mut values = Vec::new();
    let mut grads: Vec<DVector<f64>> = Vec::new();
    let mut push = |coef: &DVector<f64>, i: usize| {
        // c = coefᵀ f(x_i); ∇_{w_j} c = ξ_ij ⟨coef, v_j⟩ x_i, ∇_{v_j} c = coef φ_j(x_i)
        let mut g = DVector::zeros(dim);
        for j in 0..h {
            let xi = relu_derivative(z[(j, i)], 0.0);
            if xi != 0.0 {
                let a = coef.dot(&params.v.column(j)) * xi;
                for r in 0..d {
                    g[r * h + j] = a * data.point(i)[r];
                }
            }
            for r in 0..dy {
                g[d * h + r * h + j] = coef[r] * phi[(j, i)];
            }
        }
        grads.push(g);
        values.push(coef.dot(&f.column(i)));
    };
    if params.loss_kind.is_binary() {
        for i in 0..data.len() {
            let coef = DVector::from_element(1, data.binary_sign(i));
            push(&coef, i);
        }
    } else {
        for i in 0..data.len() {
            let k = data.label(i);
            for l in 0..dy {
                if l == k {
                    continue;
                }
                let mut coef = DVector::zeros(dy);
                coef[k] = 1.0;
                coef[l] = -1.0;
                push(&coef, i);
            }
        }
    }
    let jac = if grads.is_empty() {
        DMatrix::zeros(dim, 0)
    } else {
        DMatrix::from_columns(&grads)
    };
    (values, jac)
}

fn flatten(params: &NetParams) -> DVector<f64> {
    let mut out = Vec::with_capacity(params.w.len() + params.v.len());
    for m in [&params.w, &params.v] {
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                out.push(m[(r, c)]);
            }
        }
    }
    DVector::from_vec(out)
}

/// KKT residuals of `min ‖θ‖² s.t. margins ≥ 1` at the given direction,
/// with multipliers from a nonnegative least-squares fit of the stationarity
/// condition. The direction is rescaled by a single global factor.
pub fn kkt_residual(direction: &NetParams, data: &Dataset, partition: &[usize]) -> Result<KktReport, MarginError> {
    direction.check_data(data)?;
    check_partition(partition, direction.width(), data.num_classes())?;
    let count = cross_class_activations(direction, data, partition);
    if count > 0 {
        return Err(MarginError::NotSeparated { count });
    }
    let norm = direction.norm();
    if norm == 0.0 {
        return Err(MarginError::ZeroDirection);
    }
    let unit = direction.scaled(1.0 / norm);
    let (values, _) = constraints(&unit, data);
    let min_margin = values.iter().copied().fold(f64::INFINITY, f64::min);
    // margins are 2-homogeneous in θ
    let scale = if min_margin > 0.0 { 1.0 / min_margin.sqrt() } else { 1.0 };
    let theta = unit.scaled(scale);
    let (values, jac) = constraints(&theta, data);
    let target = flatten(&theta) * 2.0;
    let sol = nnls(&jac, &target);
    let feasibility = values.iter().map(|c| (1.0 - c).max(0.0)).fold(0.0, f64::max);
    let slackness = values
        .iter()
        .zip(sol.x.iter())
        .map(|(c, l)| (l * (c - 1.0)).abs())
        .fold(0.0, f64::max);
    let active = values.iter().filter(|c| (*c - 1.0).abs() <= 1e-6).count();
    Ok(KktReport {
        scale,
        min_margin_of_direction: min_margin,
        num_constraints: values.len(),
        feasibility_violation: feasibility,
        stationarity: sol.residual,
        stationarity_relative: sol.residual / target.norm(),
        complementary_slackness: slackness,
        multipliers: sol.x.iter().copied().collect(),
        active_constraints: active,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LossKind;

    fn cols(pts: &[[f64; 2]]) -> DMatrix<f64> {
        DMatrix::from_fn(2, pts.len(), |r, c| pts[c][r])
    }

    #[test]
    fn single_point() {
        let m = class_max_margin(&cols(&[[3.0, 4.0]])).unwrap();
        assert!((m.gamma - 5.0).abs() < 1e-15);
        assert!((m.u[0] - 0.6).abs() < 1e-15);
        assert_eq!(m.support_weights, vec![1.0]);
    }

    #[test]
    fn orthogonal_pair_gives_bisector() {
        let m = class_max_margin(&cols(&[[1.0, 0.0], [0.0, 1.0]])).unwrap();
        let h = 2f64.sqrt() / 2.0;
        assert!((m.gamma - h).abs() < 1e-15);
        assert!((m.u[0] - h).abs() < 1e-15 && (m.u[1] - h).abs() < 1e-15);
        assert!(m.duality_gap <= 1e-9);
    }

    #[test]
    fn unequal_pair() {
        let m = class_max_margin(&cols(&[[2.0, 0.0], [0.0, 1.0]])).unwrap();
        // minimum-norm point of the segment: (0.4, 0.8)
        assert!((m.gamma - 0.8f64.hypot(0.4)).abs() < 1e-14);
        assert!((m.gamma - 0.894427).abs() < 1e-6);
        assert!((m.u[0] - 0.447214).abs() < 1e-6);
        assert!((m.u[1] - 0.894427).abs() < 1e-6);
        let w = &m.support_weights;
        assert!((w[0] - 0.2).abs() < 1e-14 && (w[1] - 0.8).abs() < 1e-14);
    }

    #[test]
    fn interior_points_get_zero_weight() {
        let m = class_max_margin(&cols(&[[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]])).unwrap();
        assert_eq!(m.support_weights[2], 0.0);
    }

    #[test]
    fn origin_in_hull_is_rejected() {
        let err = class_max_margin(&cols(&[[1.0, 0.0], [-1.0, 0.0]])).unwrap_err();
        assert!(matches!(err, MarginError::NonPositiveMargin { .. }));
    }

    #[test]
    fn scale_examples() {
        assert_eq!(scales(&[1.0, 1.0]).unwrap(), vec![0.5, 0.5]);
        for s in scales(&[1.0, 1.0, 1.0]).unwrap() {
            assert!((s - 0.408248).abs() < 1e-6);
        }
        let s = scales(&[1.0, 2.0]).unwrap();
        assert!((s[0] - (1.0f64 / 3.0).sqrt()).abs() < 1e-15);
        // γ₂⁻¹ / (2 (γ₁⁻¹ + γ₂⁻¹)) = 0.5 / 3
        assert!((s[1] - (1.0f64 / 6.0).sqrt()).abs() < 1e-15);
        assert!(matches!(
            scales(&[1.0, 0.0]),
            Err(MarginError::NonPositiveGamma { class: 1, .. })
        ));
    }

    #[test]
    fn binary_antipodal_closed_form_is_kkt() {
        let data = Dataset::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]], vec![0, 1], 2).unwrap();
        let p = NetParams::new(
            DMatrix::from_row_slice(2, 2, &[0.5, -0.5, 0.0, 0.0]),
            DMatrix::from_row_slice(1, 2, &[0.5, -0.5]),
            LossKind::Exponential,
        )
        .unwrap();
        let r = kkt_residual(&p, &data, &[0, 1]).unwrap();
        assert!((r.scale - 2.0).abs() < 1e-12);
        assert!(r.feasibility_violation <= 1e-12);
        assert!(r.stationarity <= 1e-8, "{r:?}");
        assert!(r.complementary_slackness <= 1e-8);
    }
}
