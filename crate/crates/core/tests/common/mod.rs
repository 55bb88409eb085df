//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

/// `min_i ⟨x_i, u⟩` for unit `u`.
pub fn worst_margin(points: &DMatrix<f64>, u: &[f64]) -> f64 {
    let mut best = f64::INFINITY;
    for c in 0..points.ncols() {
        let mut dot = 0.0;
        for r in 0..points.nrows() {
            dot += points[(r, c)] * u[r];
        }
        best = best.min(dot);
    }
    best
}

/// Dense angular grid at `step` radians, then ternary search around the best cell.
pub fn grid_margin_2d(points: &DMatrix<f64>, step: f64) -> (f64, [f64; 2]) {
    let g = |t: f64| worst_margin(points, &[t.cos(), t.sin()]);
    let n = (std::f64::consts::TAU / step).ceil() as usize;
    let mut best_t = 0.0;
    let mut best = f64::NEG_INFINITY;
    for k in 0..n {
        let t = k as f64 * step;
        let v = g(t);
        if v > best {
            best = v;
            best_t = t;
        }
    }
    let (mut lo, mut hi) = (best_t - step, best_t + step);
    for _ in 0..200 {
        let a = lo + (hi - lo) / 3.0;
        let b = hi - (hi - lo) / 3.0;
        if g(a) < g(b) {
            lo = a;
        } else {
            hi = b;
        }
    }
    let t = 0.5 * (lo + hi);
    (g(t), [t.cos(), t.sin()])
}

fn sphere(theta: f64, phi: f64) -> [f64; 3] {
    [theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()]
}

/// Spherical grid followed by repeatedly shrinking local grids around the best point.
pub fn grid_margin_3d(points: &DMatrix<f64>) -> (f64, [f64; 3]) {
    let (nt, np) = (400, 800);
    let mut best = f64::NEG_INFINITY;
    let mut best_u = [0.0, 0.0, 1.0];
    for a in 0..=nt {
        let theta = std::f64::consts::PI * a as f64 / nt as f64;
        for b in 0..np {
            let phi = std::f64::consts::TAU * b as f64 / np as f64;
            let u = sphere(theta, phi);
            let v = worst_margin(points, &u);
            if v > best {
                best = v;
                best_u = u;
            }
        }
    }
    let mut radius = 0.02;
    for _ in 0..60 {
        // tangent basis at best_u
        let u = DVector::from_column_slice(&best_u);
        let helper = if u[0].abs() < 0.9 {
            DVector::from_vec(vec![1.0, 0.0, 0.0])
        } else {
            DVector::from_vec(vec![0.0, 1.0, 0.0])
        };
        let e1 = (&helper - &u * u.dot(&helper)).normalize();
        let e2 = u.cross(&e1);
        let center = best_u;
        let steps = 20;
        for a in -steps..=steps {
            for b in -steps..=steps {
                let c = &u + &e1 * (radius * a as f64 / steps as f64) + &e2 * (radius * b as f64 / steps as f64);
                let c = c.normalize();
                let cand = [c[0], c[1], c[2]];
                let v = worst_margin(points, &cand);
                if v > best {
                    best = v;
                    best_u = cand;
                }
            }
        }
        if best_u == center {
            radius *= 0.3;
        }
    }
    (best, best_u)
}

/// Exact minimum-norm point by enumerating every subset of at most `D`
/// points, minimizing over its affine hull with the bordered Gram system,
/// and keeping the candidate that is a convex combination satisfying the
/// optimality condition `⟨x_i, p⟩ ≥ ‖p‖²` for all `i`.
pub fn enumerate_min_norm(points: &DMatrix<f64>) -> Option<(f64, DVector<f64>)> {
    let (d, m) = (points.nrows(), points.ncols());
    let mut best: Option<(f64, DVector<f64>)> = None;
    for mask in 1u32..(1 << m) {
        let idx: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        if idx.len() > d {
            continue;
        }
        let s = idx.len();
        let mut sys = DMatrix::zeros(s + 1, s + 1);
        let mut rhs = DVector::zeros(s + 1);
        for a in 0..s {
            for b in 0..s {
                sys[(a, b)] = points.column(idx[a]).dot(&points.column(idx[b]));
            }
            sys[(a, s)] = 1.0;
            sys[(s, a)] = 1.0;
        }
        rhs[s] = 1.0;
        let Some(sol) = sys.lu().solve(&rhs) else { continue };
        if (0..s).any(|a| sol[a] < -1e-12) {
            continue;
        }
        let mut p = DVector::zeros(d);
        for a in 0..s {
            p += points.column(idx[a]) * sol[a];
        }
        let pp = p.norm_squared();
        let optimal = (0..m).all(|i| points.column(i).dot(&p) >= pp - 1e-10);
        if optimal && best.as_ref().is_none_or(|(n, _)| p.norm() < *n) {
            best = Some((p.norm(), p));
        }
    }
    best
}

/// `m` points in a cone of half-angle below π/4 around a random axis, so
/// every pair is positively correlated.
pub fn random_cone_points<R: Rng>(rng: &mut R, d: usize, m: usize) -> DMatrix<f64> {
    let axis = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal)).normalize();
    let mut cols = Vec::with_capacity(m);
    for _ in 0..m {
        let g = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let t = (&g - &axis * axis.dot(&g)).normalize();
        let angle: f64 = rng.random_range(0.0..0.7);
        let r: f64 = rng.random_range(0.5..2.0);
        cols.push((&axis * angle.cos() + t * angle.sin()) * r);
    }
    DMatrix::from_columns(&cols)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// `Σ_i ℓ(y_i, Σ_j v_j max(0, ⟨w_j, x_i⟩))` by explicit loops.
pub fn naive_loss(
    kind: ncflow::model::LossKind,
    w: &DMatrix<f64>,
    v: &DMatrix<f64>,
    x: &DMatrix<f64>,
    labels: &[usize],
) -> f64 {
    use ncflow::model::LossKind;
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let mut f = vec![0.0; v.nrows()];
        for j in 0..w.ncols() {
            let mut z = 0.0;
            for r in 0..w.nrows() {
                z += w[(r, j)] * x[(r, i)];
            }
            let a = z.max(0.0);
            for (o, fo) in f.iter_mut().enumerate() {
                *fo += v[(o, j)] * a;
            }
        }
        let sign = if y == 0 { 1.0 } else { -1.0 };
        total += match kind {
            LossKind::Exponential => (-sign * f[0]).exp(),
            LossKind::Logistic => 2.0 * (1.0 + (-sign * f[0]).exp()).ln(),
            LossKind::CrossEntropy => {
                let m = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                m + f.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - f[y]
            }
        };
    }
    total
}

pub struct FdOutcome {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
}

/// Central differences (step 1e−6) of [`naive_loss`] against the analytic
/// gradient on `count` random instances with `D ≤ 6`, `h ≤ 8`, `n ≤ 10`.
/// Instances with a preactivation within `boundary` of zero are skipped.
pub fn finite_difference_check(kind: ncflow::model::LossKind, count: usize, seed: u64) -> FdOutcome {
    use ncflow::dataset::Dataset;
    use ncflow::model::{loss_and_gradients, NetParams};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (step, boundary) = (1e-6, 1e-3);
    let mut out = FdOutcome {
        checked: 0,
        skipped: 0,
        max_rel_err: 0.0,
    };
    while out.checked < count {
        let d = rng.random_range(1..=6);
        let k = if kind.is_binary() { 2 } else { rng.random_range(3..=5) };
        let h = rng.random_range(k..=8);
        let n = rng.random_range(k..=10);
        let dy = kind.output_dim(k);
        let mut labels: Vec<usize> = (0..n).map(|i| if i < k { i } else { rng.random_range(0..k) }).collect();
        labels.rotate_left(rng.random_range(0..n));
        let x = DMatrix::from_fn(d, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let w = DMatrix::from_fn(d, h, |_, _| rng.sample::<f64, _>(StandardNormal) * 0.7);
        let v = DMatrix::from_fn(dy, h, |_, _| rng.sample::<f64, _>(StandardNormal) * 0.7);
        let pre = w.transpose() * &x;
        if pre.iter().any(|z| z.abs() < boundary) {
            out.skipped += 1;
            continue;
        }
        let data = Dataset::new(x.clone(), labels.clone(), k).expect("valid instance");
        let params = NetParams::new(w.clone(), v.clone(), kind).expect("valid params");
        let (_, g) = loss_and_gradients(&params, &data, 0.0).expect("gradients");
        let mut fd_w = DMatrix::zeros(d, h);
        for idx in 0..w.len() {
            let (mut a, mut b) = (w.clone(), w.clone());
            a[idx] += step;
            b[idx] -= step;
            fd_w[idx] = (naive_loss(kind, &a, &v, &x, &labels) - naive_loss(kind, &b, &v, &x, &labels)) / (2.0 * step);
        }
        let mut fd_v = DMatrix::zeros(dy, h);
        for idx in 0..v.len() {
            let (mut a, mut b) = (v.clone(), v.clone());
            a[idx] += step;
            b[idx] -= step;
            fd_v[idx] = (naive_loss(kind, &w, &a, &x, &labels) - naive_loss(kind, &w, &b, &x, &labels)) / (2.0 * step);
        }
        let diff = ((&g.dw - &fd_w).norm_squared() + (&g.dv - &fd_v).norm_squared()).sqrt();
        let scale = (fd_w.norm_squared() + fd_v.norm_squared()).sqrt().max(1e-8);
        out.max_rel_err = out.max_rel_err.max(diff / scale);
        out.checked += 1;
    }
    out
}

/// Random binary dataset whose two classes sit in opposite cones, plus a
/// random balanced init of width `h`.
pub fn random_problem(
    seed: u64,
    k: usize,
    h: usize,
    scale: f64,
) -> (ncflow::dataset::Dataset, ncflow::model::NetParams) {
    use ncflow::dataset::{generate_separable, GeneratorConfig};
    use ncflow::init::random_balanced;
    use ncflow::model::LossKind;
    let data = generate_separable(&GeneratorConfig::new(k, 4, 5, 0.4, [0.5, 1.5], seed)).expect("generator");
    let kind = if k == 2 {
        LossKind::Logistic
    } else {
        LossKind::CrossEntropy
    };
    let shape = random_balanced(4, kind.output_dim(k), h, scale, seed ^ 0x9e37).expect("init");
    let params = shape.materialize(kind).expect("params");
    (data, params)
}
