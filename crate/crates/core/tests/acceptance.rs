//! One pass/fail line per acceptance criterion.

mod common;

use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use common::{cosine, finite_difference_check, grid_margin_2d, grid_margin_3d, random_cone_points, random_problem};
use nalgebra::{DMatrix, DVector};
use ncflow::collapse::{closed_form_direction, collapse_residuals, nc_metrics};
use ncflow::dataset::{validate_separability, Dataset};
use ncflow::experiment::{execute, ExperimentConfig, RunManifest, RunStatus};
use ncflow::flow::{run, FlowConfig, StepMode};
use ncflow::margins::{class_max_margin, kkt_residual, margin_certificate};
use ncflow::model::{softmax, LossKind, NetParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = (bool, String);

fn example(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("examples").join(name)).unwrap()
}

fn summarize(m: &RunManifest) -> String {
    let failed: Vec<String> = m
        .checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| format!("{}={:e}", c.name, c.value))
        .collect();
    let mut s = format!(
        "status {:?}, {}/{} checks",
        m.status,
        m.checks.len() - failed.len(),
        m.checks.len()
    );
    if !failed.is_empty() {
        s += &format!(", failed {}", failed.join(" "));
    }
    if let Some(r) = &m.reason {
        s += &format!(", reason {r}");
    }
    s
}

fn has_checks(m: &RunManifest, names: &[&str]) -> bool {
    names.iter().all(|n| m.checks.iter().any(|c| c.name == *n && c.passed))
}

fn gradients() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (i, kind) in [LossKind::Exponential, LossKind::Logistic, LossKind::CrossEntropy]
        .into_iter()
        .enumerate()
    {
        let r = finite_difference_check(kind, 100, 1000 + i as u64);
        ok &= r.checked == 100 && r.max_rel_err <= 1e-5;
        parts.push(format!(
            "{} max rel err {:.1e} ({} boundary skips)",
            kind.name(),
            r.max_rel_err,
            r.skipped
        ));
    }
    (ok, parts.join("; "))
}

fn max_margin_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let (mut dg, mut dc, mut gap) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..50 {
        let d = if i % 2 == 0 { 2 } else { 3 };
        let m = rng.random_range(1..=8);
        let pts = random_cone_points(&mut rng, d, m);
        let got = class_max_margin(&pts).unwrap();
        let (g, u) = if d == 2 {
            let (g, u) = grid_margin_2d(&pts, 1e-5);
            (g, u.to_vec())
        } else {
            let (g, u) = grid_margin_3d(&pts);
            (g, u.to_vec())
        };
        dg = dg.max((got.gamma - g).abs());
        dc = dc.max(1.0 - cosine(got.u.as_slice(), &u));
        gap = gap.max(got.duality_gap);
    }
    let ok = dg <= 1e-4 && dc <= 1e-6 && gap <= 1e-9;
    (ok, format!("max |dγ| {dg:.1e}, max 1-cos {dc:.1e}, max gap {gap:.1e}"))
}

fn closed_form() -> Outcome {
    let e = |k: usize| {
        (0..3)
            .map(|r| 1.5f64.sqrt() * (f64::from(u8::from(r == k)) - 1.0 / 3.0))
            .collect::<Vec<f64>>()
    };
    let data = Dataset::from_rows(&[e(0), e(1), e(2)], vec![0, 1, 2], 3).unwrap();
    let cert = margin_certificate(&data).unwrap();
    let partition = [0, 1, 2, 0, 1, 2];
    let dir = closed_form_direction(&cert, &partition, LossKind::CrossEntropy).unwrap();
    let r = collapse_residuals(&dir, &data, &partition, &cert).unwrap();
    let kkt = kkt_residual(&dir, &data, &partition).unwrap();
    let mut worst = [
        r.nc.nc1.unwrap_or(0.0),
        r.nc.nc2,
        r.nc.nc3,
        r.orthogonality,
        -r.nonnegativity.min(0.0),
        r.duality_residual,
        r.max_cross_class_feature_gram,
    ]
    .into_iter()
    .fold(0.0f64, f64::max);
    for c in &r.classes {
        for v in [
            c.rank1_residual,
            c.w_rank1_residual,
            c.directional_collapse_residual,
            1.0 - c.w_direction_cosine,
            1.0 - c.v_direction_cosine,
            c.w_norm_rel_error,
            c.v_norm_rel_error,
        ] {
            worst = worst.max(v);
        }
    }
    let ok = worst <= 1e-8 && kkt.stationarity <= 1e-8 && kkt.feasibility_violation <= 1e-8;
    (
        ok,
        format!("max residual {worst:.1e}, KKT stationarity {:.1e}", kkt.stationarity),
    )
}

fn binary_end_to_end() -> Outcome {
    let out = execute(&example("binary_collapse.toml"), false);
    let m = &out.manifest;
    let ok = m.status == RunStatus::Passed
        && has_checks(
            m,
            &[
                "init_assumption",
                "final_loss",
                "rank1_residual",
                "cross_class_feature_gram",
                "w_direction_cosine",
                "duality_residual",
                "v_norm_rel_error",
            ],
        );
    (ok, summarize(m))
}

fn multiclass_end_to_end() -> Outcome {
    let out = execute(&example("multiclass_collapse.toml"), false);
    let m = &out.manifest;
    let t_star = out.trajectory.as_ref().and_then(|t| t.t_star.as_ref()).map(|t| t.step);
    let ok = m.status == RunStatus::Passed
        && t_star.is_some()
        && has_checks(
            m,
            &[
                "strict_condition",
                "init_assumption",
                "separation_persists",
                "decomposition_error",
                "rank1_residual",
                "cross_class_feature_gram",
                "w_direction_cosine",
                "v_direction_cosine",
                "duality_residual",
                "v_norm_rel_error",
            ],
        );
    let ratio = m.dataset.as_ref().map_or(f64::NAN, |d| d.certificate.strict_ratio);
    (
        ok,
        format!("strict ratio {ratio:.3}, T* step {t_star:?}, {}", summarize(m)),
    )
}

fn envelopes() -> Outcome {
    let out = execute(&example("alignment_envelope.toml"), false);
    let m = &out.manifest;
    let flow = m.flow.as_ref();
    let detail = match (flow.and_then(|f| f.small_norm.as_ref()), flow.and_then(|f| f.alignment.as_ref())) {
        (Some(s), Some(a)) => format!(
            "window {:.3e} over {} records, ‖w‖² margin x{:.0}, output margin x{:.0}, worst residual/bound {:.1e} over {} in-regime records",
            s.window,
            s.records_checked,
            s.w_norm_sq_bound / s.max_w_norm_sq,
            s.output_bound / s.max_output_norm,
            a.max_ratio,
            a.in_regime_records
        ),
        _ => summarize(m),
    };
    let ok = m.status == RunStatus::Passed && has_checks(m, &["small_norm_envelope", "alignment_bound"]);
    (ok, detail)
}

fn softmax_bound() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let k = rng.random_range(2..=10);
        let f =
            DVector::<f64>::from_fn(k, |_, _| rng.random_range(-1.0..1.0)).normalize() * rng.random_range(0.0..=0.25);
        let p = DVector::from_vec(softmax(f.as_slice()));
        let lhs = (p - DVector::from_element(k, 1.0 / k as f64)).norm();
        let rhs = 8.0 / (k as f64).sqrt() * f.norm();
        if f.norm() > 0.0 {
            worst = worst.max(lhs / rhs);
        }
    }
    (worst <= 1.0, format!("worst lhs/rhs {worst:.4}"))
}

fn invariances() -> Outcome {
    let mut failed = Vec::new();
    let (data, params) = random_problem(3, 2, 6, 0.5);
    let gaps: Vec<f64> = [0.02, 0.01, 0.005]
        .iter()
        .map(|&eta| {
            let cfg = FlowConfig::new(StepMode::Fixed { eta }, (4.0 / eta) as usize, 1);
            run(&params, &data, None, &cfg).unwrap().max_balance_gap()
        })
        .collect();
    if !gaps.windows(2).all(|p| (1.6..=2.4).contains(&(p[0] / p[1]))) {
        failed.push("balance drift");
    }

    let (data, params) = random_problem(5, 2, 6, 0.05);
    let mut cfg = FlowConfig::new(StepMode::Fixed { eta: 0.01 }, 1500, 25);
    cfg.record_neurons = true;
    let log = run(&params, &data, None, &cfg).unwrap();
    let start: Vec<f64> = params.v.iter().map(|v| v.signum()).collect();
    if !log.records.iter().all(|r| {
        r.neurons
            .as_ref()
            .unwrap()
            .iter()
            .map(|n| n.v_sign.unwrap())
            .eq(start.iter().copied())
    }) {
        failed.push("sign invariance");
    }

    let pts = DMatrix::from_fn(3, 8, |r, c| 0.1 + 0.1 * ((r * 8 + c) % 7) as f64);
    let pos = Dataset::new(pts, (0..8).map(|i| i % 2).collect(), 2).unwrap();
    let w = DMatrix::from_row_slice(3, 3, &[0.5, -0.3, -0.2, 0.1, 0.4, -0.7, -0.2, 0.3, -0.1]);
    let v = DMatrix::from_row_slice(1, 3, &[0.4, -0.6, 0.9]);
    let p = NetParams::new(w, v, LossKind::Logistic).unwrap();
    let log = run(
        &p,
        &pos,
        Some(&[0, 1, 0]),
        &FlowConfig::new(StepMode::Fixed { eta: 0.05 }, 200, 50),
    )
    .unwrap();
    if log.final_params.w.column(2) != p.w.column(2) || log.final_params.v.column(2) != p.v.column(2) {
        failed.push("dead-neuron absorption");
    }
    if !log.final_params.features(&pos).iter().all(|&a| a >= 0.0) {
        failed.push("feature nonnegativity");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let feats = DMatrix::from_fn(6, 15, |_, _| rng.random_range(0.0..1.0));
    let cls = DMatrix::from_fn(3, 6, |_, _| rng.random_range(-1.0..1.0));
    let labels: Vec<usize> = (0..15).map(|i| i % 3).collect();
    let a = nc_metrics(&feats, &labels, 3, &cls).unwrap();
    let b = nc_metrics(&(&feats * 37.0), &labels, 3, &cls).unwrap();
    let rel = |x: f64, y: f64| (x - y).abs() <= 1e-9 * x.abs().max(1.0);
    if !(rel(a.nc1.unwrap(), b.nc1.unwrap()) && rel(a.nc2, b.nc2) && rel(a.nc3, b.nc3)) {
        failed.push("NC scale invariance");
    }

    let (data, _) = random_problem(11, 3, 3, 1.0);
    let perm: Vec<usize> = (0..data.len()).rev().collect();
    let c0 = validate_separability(&data).unwrap();
    let c1 = validate_separability(&data.permuted(&perm).unwrap()).unwrap();
    let c2 = validate_separability(&data.scaled(4.5).unwrap()).unwrap();
    if !(rel(c0.mu_s, c1.mu_s)
        && rel(c0.mu_d, c1.mu_d)
        && rel(c0.mu_s, c2.mu_s)
        && rel(c0.mu_d, c2.mu_d)
        && rel(4.5 * c0.x_max, c2.x_max))
    {
        failed.push("certificate permutation/scale");
    }
    let ok = failed.is_empty();
    (
        ok,
        if ok {
            "6 invariants hold".into()
        } else {
            format!("failed: {}", failed.join(", "))
        },
    )
}

fn mnist() -> Outcome {
    let base = example("mnist.toml");
    let mut passes = 0;
    let mut parts = Vec::new();
    for seed in 0..3u64 {
        let mut cfg = base.clone();
        cfg.seed = seed;
        let m = execute(&cfg, false).manifest;
        let get = |n: &str| m.checks.iter().find(|c| c.name == n).map_or(f64::NAN, |c| c.value);
        passes += usize::from(m.status == RunStatus::Passed);
        parts.push(format!(
            "seed {seed}: {} pca {:.4} nc1 x{:.3} nc2 x{:.3}",
            if m.status == RunStatus::Passed { "pass" } else { "fail" },
            get("pca_explained"),
            get("nc1_ratio"),
            get("nc2_ratio")
        ));
    }
    (passes >= 2, format!("{passes}/3 seeds; {}", parts.join("; ")))
}

/// Number, name, check and time budget in seconds.
type Criterion = (u32, &'static str, fn() -> Outcome, u64);

#[test]
fn acceptance_criteria() {
    let criteria: [Criterion; 9] = [
        (1, "gradient correctness", gradients, 10),
        (2, "max-margin oracle", max_margin_oracle, 30),
        (3, "closed-form self-consistency", closed_form, 5),
        (4, "binary end-to-end", binary_end_to_end, 300),
        (5, "multi-class end-to-end", multiclass_end_to_end, 600),
        (6, "small-norm and alignment envelopes", envelopes, 300),
        (7, "softmax deviation bound", softmax_bound, 5),
        (8, "invariance suite", invariances, 60),
        (9, "MNIST replication", mnist, 900),
    ];
    let results: Vec<(u32, &str, bool, String, Duration, u64)> = std::thread::scope(|s| {
        let handles: Vec<_> = criteria
            .iter()
            .map(|&(n, name, f, budget)| {
                s.spawn(move || {
                    let t = Instant::now();
                    let (ok, detail) = f();
                    (n, name, ok, detail, t.elapsed(), budget)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut all = true;
    let mut out = std::io::stdout().lock();
    writeln!(out).unwrap();
    for (n, name, ok, detail, elapsed, budget) in &results {
        let in_time = elapsed.as_secs_f64() < *budget as f64;
        let pass = *ok && in_time;
        all &= pass;
        writeln!(
            out,
            "criterion {n} [{}] {name}: {detail} ({:.2}s of {budget}s)",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        )
        .unwrap();
    }
    assert!(all, "some acceptance criteria failed");
}
