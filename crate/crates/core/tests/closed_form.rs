use nalgebra::DMatrix;
use ncflow::collapse::{closed_form_direction, collapse_residuals};
use ncflow::dataset::Dataset;
use ncflow::margins::{kkt_residual, margin_certificate};
use ncflow::model::LossKind;

/// Unit simplex vertices in R³, one point per class.
fn simplex_singletons() -> Dataset {
    let p = |k: usize| {
        (0..3)
            .map(|r| 1.5f64.sqrt() * (if r == k { 1.0 } else { 0.0 } - 1.0 / 3.0))
            .collect::<Vec<f64>>()
    };
    Dataset::from_rows(&[p(0), p(1), p(2)], vec![0, 1, 2], 3).unwrap()
}

#[test]
fn fixture_is_the_unit_simplex() {
    let d = simplex_singletons();
    for i in 0..3 {
        assert!((d.point(i).norm() - 1.0).abs() < 1e-14);
        for j in 0..i {
            assert!((d.point(i).dot(&d.point(j)) + 0.5).abs() < 1e-14);
        }
    }
}

#[test]
fn closed_form_direction_is_self_consistent() {
    let data = simplex_singletons();
    let cert = margin_certificate(&data).unwrap();
    // unit singletons: γ_k = 1 and s_k² · 2 · 3 = 1
    for (g, s) in cert.gammas().iter().zip(&cert.s) {
        assert!((g - 1.0).abs() < 1e-12);
        assert!((s - 1.0 / 6f64.sqrt()).abs() < 1e-12);
    }
    for partition in [vec![0, 1, 2], vec![0, 1, 2, 0, 1, 2], vec![2, 0, 1, 1, 2]] {
        let dir = closed_form_direction(&cert, &partition, LossKind::CrossEntropy).unwrap();
        let h = partition.len();
        let sizes: Vec<usize> = (0..3).map(|k| partition.iter().filter(|&&p| p == k).count()).collect();
        let e = DMatrix::from_fn(3, 3, |r, c| {
            1.5f64.sqrt() * (if r == c { 1.0 } else { 0.0 } - 1.0 / 3.0)
        });
        let want_w = DMatrix::from_fn(3, h, |r, j| {
            let k = partition[j];
            cert.s[k] / (sizes[k] as f64).sqrt() * data.point(k)[r]
        });
        let want_v = DMatrix::from_fn(3, h, |r, j| {
            let k = partition[j];
            cert.s[k] / (sizes[k] as f64).sqrt() * e[(r, k)]
        });
        assert!((&dir.w - want_w).norm() < 1e-14);
        assert!((&dir.v - want_v).norm() < 1e-14);

        let r = collapse_residuals(&dir, &data, &partition, &cert).unwrap();
        let tol = 1e-8;
        assert!(
            r.nc.nc1.unwrap_or(0.0) <= tol && r.nc.nc2 <= tol && r.nc.nc3 <= tol,
            "{:?}",
            r.nc
        );
        assert!(r.orthogonality <= tol && r.nonnegativity >= -tol);
        assert!(r.duality_residual <= tol && r.max_cross_class_feature_gram <= tol);
        for c in &r.classes {
            assert!(c.rank1_residual <= tol && c.w_rank1_residual <= tol);
            assert!(c.directional_collapse_residual <= tol);
            assert!(1.0 - c.w_direction_cosine <= tol && 1.0 - c.v_direction_cosine <= tol);
            assert!(c.w_norm_rel_error <= tol && c.v_norm_rel_error <= tol);
        }
        let kkt = kkt_residual(&dir, &data, &partition).unwrap();
        assert!(kkt.stationarity <= tol, "{kkt:?}");
        assert!(kkt.feasibility_violation <= tol && kkt.complementary_slackness <= tol);
    }
}
