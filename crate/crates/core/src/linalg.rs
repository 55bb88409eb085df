//! Small dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

/// Thin SVD with singular values sorted in descending order.
pub struct SortedSvd {
    pub u: DMatrix<f64>,
    pub sigma: Vec<f64>,
    pub v: DMatrix<f64>,
}

pub fn svd_sorted(m: &DMatrix<f64>) -> SortedSvd {
    if m.nrows() == 0 || m.ncols() == 0 {
        return SortedSvd {
            u: DMatrix::zeros(m.nrows(), 0),
            sigma: Vec::new(),
            v: DMatrix::zeros(m.ncols(), 0),
        };
    }
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let sigma = order.iter().map(|&i| svd.singular_values[i]).collect();
    let u = DMatrix::from_fn(u.nrows(), order.len(), |r, c| u[(r, order[c])]);
    let v = DMatrix::from_fn(vt.ncols(), order.len(), |r, c| vt[(order[c], r)]);
    SortedSvd { u, sigma, v }
}

/// Top singular triple `(σ₁, σ₂, left, right)`; σ₂ is zero for rank-one input.
pub fn top_singular(m: &DMatrix<f64>) -> (f64, f64, DVector<f64>, DVector<f64>) {
    let svd = svd_sorted(m);
    if svd.sigma.is_empty() {
        return (0.0, 0.0, DVector::zeros(m.nrows()), DVector::zeros(m.ncols()));
    }
    let s1 = svd.sigma[0];
    let s2 = svd.sigma.get(1).copied().unwrap_or(0.0);
    (s1, s2, svd.u.column(0).into_owned(), svd.v.column(0).into_owned())
}

/// Moore–Penrose pseudo-inverse; singular values below `rcond * σ_max` are dropped.
pub fn pinv(m: &DMatrix<f64>, rcond: f64) -> DMatrix<f64> {
    let svd = svd_sorted(m);
    let mut out = DMatrix::zeros(m.ncols(), m.nrows());
    let smax = svd.sigma.first().copied().unwrap_or(0.0);
    for (k, &s) in svd.sigma.iter().enumerate() {
        if s <= rcond * smax || s == 0.0 {
            continue;
        }
        out += svd.v.column(k) * svd.u.column(k).transpose() / s;
    }
    out
}

/// Orthogonal projection of `x` onto the complement of `dir` (`dir` need not be unit).
pub fn project_out(x: &DVector<f64>, dir: &DVector<f64>) -> DVector<f64> {
    let nn = dir.norm_squared();
    if nn == 0.0 {
        return x.clone();
    }
    x - dir * (dir.dot(x) / nn)
}

pub fn cosine(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (a.dot(b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Haar-ish random orthogonal matrix from the QR factorization of a Gaussian matrix,
/// with column signs fixed by the diagonal of R.
pub fn random_orthogonal<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for c in 0..dim {
        if r[(c, c)] < 0.0 {
            let mut col = q.column_mut(c);
            col.neg_mut();
        }
    }
    q
}

pub fn frobenius(m: &DMatrix<f64>) -> f64 {
    m.norm()
}

/// Reads a JSON `null` (how serde_json writes NaN and infinities) back as NaN.
pub(crate) fn f64_or_nan<'de, D: serde::Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    use serde::Deserialize;
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}
