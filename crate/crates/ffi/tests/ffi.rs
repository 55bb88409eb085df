use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use ncflow_ffi::*;

fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn last_error() -> Option<String> {
    let p = ncflow_last_error_message();
    (!p.is_null()).then(|| unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned())
}

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn dataset(points: &[f64], n: usize, d: usize, labels: &[u32], k: usize) -> *mut NcflowDataset {
    let mut ds = ptr::null_mut();
    let st = unsafe { ncflow_dataset_new(points.as_ptr(), n, d, labels.as_ptr(), k, &mut ds) };
    assert_eq!(st, NcflowStatus::Ok, "{:?}", last_error());
    ds
}

fn generated(k: usize, seed: u64) -> *mut NcflowDataset {
    let mut ds = ptr::null_mut();
    let st = unsafe { ncflow_dataset_generate(k, 10, 20, 0.05, 1.0, 1.0, seed, &mut ds) };
    assert_eq!(st, NcflowStatus::Ok, "{:?}", last_error());
    ds
}

#[test]
fn version_matches_package() {
    let v = unsafe { CStr::from_ptr(ncflow_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn dataset_round_trip_and_certificate() {
    let ds = dataset(&[1.0, 0.5, -1.0, -0.5], 2, 2, &[0, 1], 2);
    let (mut n, mut d, mut k) = (0, 0, 0);
    unsafe {
        assert_eq!(ncflow_dataset_shape(ds, &mut n, &mut d, &mut k), NcflowStatus::Ok);
        assert_eq!((n, d, k), (2, 2, 2));
        let mut c = NcflowCertificate::default();
        assert_eq!(ncflow_dataset_certificate(ds, &mut c), NcflowStatus::Ok);
        assert!(c.separable);
        assert_eq!(c.mu_s, 1.0);
        assert!((c.mu_d - 1.0).abs() < 1e-15);
        let norm = 1.25f64.sqrt();
        assert!((c.x_max - norm).abs() < 1e-15 && (c.x_min - norm).abs() < 1e-15);

        // A single point per class gives γ_k = ‖x‖ for a binary problem.
        let (mut g, mut s) = ([0.0; 2], [0.0; 2]);
        assert_eq!(
            ncflow_dataset_margins(ds, g.as_mut_ptr(), s.as_mut_ptr(), 2),
            NcflowStatus::Ok
        );
        for gk in g {
            assert!((gk - norm).abs() < 1e-8, "{g:?}");
        }
        assert_eq!(
            ncflow_dataset_margins(ds, g.as_mut_ptr(), s.as_mut_ptr(), 3),
            NcflowStatus::InvalidArgument
        );
        ncflow_dataset_free(ds);
    }
}

#[test]
fn points_are_read_row_major() {
    // Row 0 is (1, 2, 3); column-major reading would make it (1, 4, ...).
    let ds = dataset(&[1.0, 2.0, 3.0, -4.0, -5.0, -6.0], 2, 3, &[0, 1], 2);
    let mut c = NcflowCertificate::default();
    unsafe {
        assert_eq!(ncflow_dataset_certificate(ds, &mut c), NcflowStatus::Ok);
        ncflow_dataset_free(ds);
    }
    assert!((c.x_min - 14f64.sqrt()).abs() < 1e-12, "{c:?}");
    assert!((c.x_max - 77f64.sqrt()).abs() < 1e-12, "{c:?}");
}

#[test]
fn null_pointers_are_rejected_with_a_message() {
    let mut ds = ptr::null_mut();
    unsafe {
        let st = ncflow_dataset_new(ptr::null(), 2, 2, [0u32, 1].as_ptr(), 2, &mut ds);
        assert_eq!(st, NcflowStatus::InvalidArgument);
        assert!(ds.is_null());
        assert!(last_error().unwrap().contains("points"));

        let mut n = 0;
        assert_eq!(
            ncflow_dataset_shape(ptr::null(), &mut n, &mut n, &mut n),
            NcflowStatus::InvalidArgument
        );
        assert_eq!(
            ncflow_trajectory_len(ptr::null(), &mut n),
            NcflowStatus::InvalidArgument
        );
        assert_eq!(
            ncflow_run_config(ptr::null(), ptr::null(), ptr::null_mut()),
            NcflowStatus::InvalidArgument
        );

        ncflow_dataset_free(ptr::null_mut());
        ncflow_params_free(ptr::null_mut());
        ncflow_trajectory_free(ptr::null_mut());
    }
}

#[test]
fn success_clears_the_last_error() {
    let mut ds = ptr::null_mut();
    unsafe {
        ncflow_dataset_new(ptr::null(), 1, 1, ptr::null(), 2, &mut ds);
    }
    assert!(last_error().is_some());
    let ds = dataset(&[1.0, -1.0], 2, 1, &[0, 1], 2);
    assert!(last_error().is_none());
    unsafe { ncflow_dataset_free(ds) };
}

#[test]
fn invalid_data_maps_to_data_status() {
    let mut ds = ptr::null_mut();
    unsafe {
        let st = ncflow_dataset_new([1.0, 2.0].as_ptr(), 2, 1, [0u32, 5].as_ptr(), 2, &mut ds);
        assert_eq!(st, NcflowStatus::Data);
        assert!(ds.is_null());
        let missing = cstr(Path::new("/nonexistent/points.csv"));
        assert_eq!(
            ncflow_dataset_read_csv(missing.as_ptr(), 0, &mut ds),
            NcflowStatus::Data
        );
        assert!(last_error().is_some());
    }
}

#[test]
fn exponential_loss_and_gradients_in_neuron_major_layout() {
    // x1 = e1 (y = +1), x2 = e2 (y = -1); neuron j sees only x_j.
    let ds = dataset(&[1.0, 0.0, 0.0, 1.0], 2, 2, &[0, 1], 2);
    let (w, v) = ([1.0, 0.0, 0.0, 1.0], [1.0, -1.0]);
    let mut p = ptr::null_mut();
    unsafe {
        assert_eq!(
            ncflow_params_new(w.as_ptr(), v.as_ptr(), 2, 1, 2, NcflowLoss::Exponential, &mut p),
            NcflowStatus::Ok
        );
        let (mut d, mut dy, mut h) = (0, 0, 0);
        ncflow_params_shape(p, &mut d, &mut dy, &mut h);
        assert_eq!((d, dy, h), (2, 1, 2));

        let (mut w2, mut v2) = ([0.0; 4], [0.0; 2]);
        assert_eq!(
            ncflow_params_weights(p, w2.as_mut_ptr(), 4, v2.as_mut_ptr(), 2),
            NcflowStatus::Ok
        );
        assert_eq!((w2, v2), (w, v));
        assert_eq!(
            ncflow_params_weights(p, w2.as_mut_ptr(), 3, v2.as_mut_ptr(), 2),
            NcflowStatus::InvalidArgument
        );

        let (mut loss, mut dw, mut dv) = (0.0, [0.0; 4], [0.0; 2]);
        let st = ncflow_loss_and_gradients(p, ds, 0.0, &mut loss, dw.as_mut_ptr(), dv.as_mut_ptr());
        assert_eq!(st, NcflowStatus::Ok);
        let e = (-1.0f64).exp();
        assert!((loss - 2.0 * e).abs() < 1e-15);
        let want_dw = [-e, 0.0, 0.0, -e];
        let want_dv = [-e, e];
        for (a, b) in dw.iter().zip(want_dw).chain(dv.iter().zip(want_dv)) {
            assert!((a - b).abs() < 1e-15, "{dw:?} {dv:?}");
        }

        let mut only = 0.0;
        let st = ncflow_loss_and_gradients(p, ds, 0.0, &mut only, ptr::null_mut(), ptr::null_mut());
        assert_eq!(st, NcflowStatus::Ok);
        assert_eq!(only, loss);
        ncflow_params_free(p);
        ncflow_dataset_free(ds);
    }
}

#[test]
fn mismatched_params_are_invalid() {
    let ds = dataset(&[1.0, 0.0, 0.0, 1.0], 2, 2, &[0, 1], 2);
    let mut p = ptr::null_mut();
    unsafe {
        let st = ncflow_params_new(
            [1.0, 0.0, 0.0].as_ptr(),
            [1.0].as_ptr(),
            3,
            1,
            1,
            NcflowLoss::Logistic,
            &mut p,
        );
        assert_eq!(st, NcflowStatus::Ok);
        let mut l = 0.0;
        let st = ncflow_loss_and_gradients(p, ds, 0.0, &mut l, ptr::null_mut(), ptr::null_mut());
        assert_eq!(st, NcflowStatus::InvalidArgument);
        assert!(last_error().unwrap().contains("dimension"));
        ncflow_params_free(p);
        ncflow_dataset_free(ds);
    }
}

#[test]
fn random_balanced_init_is_balanced_and_scaled() {
    let mut p = ptr::null_mut();
    unsafe {
        assert_eq!(
            ncflow_params_random_balanced(4, 1, 6, 1e-3, 9, NcflowLoss::Logistic, &mut p),
            NcflowStatus::Ok
        );
        let (mut w, mut v) = ([0.0; 24], [0.0; 6]);
        ncflow_params_weights(p, w.as_mut_ptr(), 24, v.as_mut_ptr(), 6);
        for j in 0..6 {
            let wn: f64 = w[4 * j..4 * j + 4].iter().map(|x| x * x).sum();
            assert!((wn - v[j] * v[j]).abs() < 1e-18, "neuron {j}");
            assert!(wn > 0.0 && wn < 1e-4);
        }
        ncflow_params_free(p);

        assert_eq!(
            ncflow_params_random_balanced(4, 1, 6, -1.0, 9, NcflowLoss::Logistic, &mut p),
            NcflowStatus::Config
        );
    }
}

#[test]
fn multiclass_flow_separates_and_collapses() {
    let ds = generated(3, 21);
    let mut p = ptr::null_mut();
    let mut part = [usize::MAX; 12];
    unsafe {
        let st = ncflow_params_data_seeded(ds, 12, 1e-4, 21, part.as_mut_ptr(), &mut p);
        assert_eq!(st, NcflowStatus::Ok, "{:?}", last_error());
        assert!(part.iter().all(|&k| k < 3));
        for k in 0..3 {
            assert!(part.contains(&k));
        }

        let cfg = NcflowFlowConfig {
            adaptive: true,
            eta: 0.5,
            cap: 1000.0,
            max_steps: 200_000,
            log_every: 100,
            loss_threshold: 1e-4,
        };
        let mut t = ptr::null_mut();
        assert_eq!(
            ncflow_flow_run(p, ds, part.as_ptr(), &cfg, &mut t),
            NcflowStatus::Ok,
            "{:?}",
            last_error()
        );

        let mut len = 0;
        ncflow_trajectory_len(t, &mut len);
        assert!(len >= 2);
        let (mut first, mut last) = (NcflowRecord::default(), NcflowRecord::default());
        ncflow_trajectory_record(t, 0, &mut first);
        ncflow_trajectory_record(t, len - 1, &mut last);
        assert_eq!(first.step, 0);
        assert!(last.loss <= 1e-4 && last.loss < first.loss);
        assert_eq!(
            ncflow_trajectory_record(t, len, &mut last),
            NcflowStatus::InvalidArgument
        );

        let (mut t_star, mut reverts) = (0i64, 0usize);
        ncflow_trajectory_separation(t, &mut t_star, &mut reverts);
        assert!(t_star >= 0);
        assert_eq!(reverts, 0);

        let mut fin = ptr::null_mut();
        assert_eq!(ncflow_trajectory_final_params(t, &mut fin), NcflowStatus::Ok);
        let mut r = NcflowCollapse::default();
        assert_eq!(
            ncflow_collapse_report(fin, ds, part.as_ptr(), &mut r),
            NcflowStatus::Ok,
            "{:?}",
            last_error()
        );
        assert_eq!(r.max_cross_class_feature_gram, 0.0);
        assert!(r.min_w_direction_cosine > 0.9, "{r:?}");
        assert!(r.min_v_direction_cosine > 0.9, "{r:?}");
        assert!(r.nc1 < 1e-3, "{r:?}");

        let mut derived = NcflowCollapse::default();
        assert_eq!(
            ncflow_collapse_report(fin, ds, ptr::null(), &mut derived),
            NcflowStatus::Ok
        );
        assert_eq!(derived.max_cross_class_feature_gram, 0.0);

        ncflow_params_free(fin);
        ncflow_trajectory_free(t);
        ncflow_params_free(p);
        ncflow_dataset_free(ds);
    }
}

#[test]
fn nonpositive_step_is_a_config_error() {
    let ds = dataset(&[1.0, 0.5, -1.0, -0.5], 2, 2, &[0, 1], 2);
    let mut p = ptr::null_mut();
    let mut t = ptr::null_mut();
    let cfg = NcflowFlowConfig {
        adaptive: false,
        eta: 0.0,
        cap: 0.0,
        max_steps: 10,
        log_every: 1,
        loss_threshold: 0.0,
    };
    unsafe {
        ncflow_params_random_balanced(2, 1, 2, 1e-3, 1, NcflowLoss::Logistic, &mut p);
        assert_eq!(ncflow_flow_run(p, ds, ptr::null(), &cfg, &mut t), NcflowStatus::Config);
        assert!(t.is_null());
        ncflow_params_free(p);
        ncflow_dataset_free(ds);
    }
}

#[test]
fn run_config_and_verify() {
    let tmp = tempfile::tempdir().unwrap();
    let config = crate_dir().join("../core/examples/binary_antipodal.toml");
    let (cfg, out) = (cstr(&config), cstr(tmp.path()));
    let mut code = -1;
    unsafe {
        assert_eq!(
            ncflow_run_config(cfg.as_ptr(), out.as_ptr(), &mut code),
            NcflowStatus::Ok
        );
        assert_eq!(code, 0);
        assert!(tmp.path().join("manifest.json").exists());
        let mut passed = false;
        assert_eq!(ncflow_verify_run(out.as_ptr(), &mut passed), NcflowStatus::Ok);
        assert!(passed);

        let missing = cstr(&tmp.path().join("missing.toml"));
        assert_eq!(
            ncflow_run_config(missing.as_ptr(), out.as_ptr(), &mut code),
            NcflowStatus::Config
        );
    }
}

fn exported_functions() -> Vec<String> {
    let src = std::fs::read_to_string(crate_dir().join("src/lib.rs")).unwrap();
    src.lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap().to_string())
        .collect()
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(crate_dir().join("include/ncflow.h")).unwrap();
    let fns = exported_functions();
    assert!(fns.len() > 20);
    for f in fns {
        let declared = header.contains(&format!(" {f}(")) || header.contains(&format!("*{f}("));
        assert!(declared, "{f} missing from header");
    }
    for ty in ["NcflowDataset", "NcflowParams", "NcflowTrajectory"] {
        assert!(
            header.contains(&format!("typedef struct {ty} {ty};")),
            "{ty} is not opaque"
        );
    }
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let include = crate_dir().join("include");
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("probe.c");
    std::fs::write(
        &src,
        "#include \"ncflow.h\"\nint main(void) {\n  NcflowDataset *ds = 0;\n  NcflowStatus st = ncflow_dataset_generate(3, 10, 5, 0.1, 1.0, 1.0, 7, &ds);\n  ncflow_dataset_free(ds);\n  return st == NCFLOW_STATUS_OK ? 0 : 1;\n}\n",
    )
    .unwrap();
    for (compiler, lang) in [("cc", "c"), ("c++", "c++")] {
        let status = Command::new(compiler)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang, "-I"])
            .arg(&include)
            .arg(&src)
            .status();
        match status {
            Ok(s) => assert!(s.success(), "{compiler} rejected the header"),
            Err(e) => eprintln!("skipping {compiler}: {e}"),
        }
    }
}

#[test]
fn c_program_links_and_runs() {
    let deps = std::env::current_exe().unwrap().parent().unwrap().to_path_buf();
    let lib = deps.join(format!(
        "{}ncflow_ffi{}",
        std::env::consts::DLL_PREFIX,
        std::env::consts::DLL_SUFFIX
    ));
    assert!(lib.exists(), "{} not built", lib.display());
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("main.c");
    let exe = tmp.path().join("main");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include "ncflow.h"
int main(void) {
  double pts[] = {1.0, 0.5, -1.0, -0.5};
  uint32_t labels[] = {0, 1};
  NcflowDataset *ds = NULL;
  NcflowParams *p = NULL;
  NcflowTrajectory *t = NULL;
  if (ncflow_dataset_new(pts, 2, 2, labels, 2, &ds) != NCFLOW_STATUS_OK) return 2;
  if (ncflow_params_random_balanced(2, 1, 2, 1e-3, 1, NCFLOW_LOSS_LOGISTIC, &p) != NCFLOW_STATUS_OK) return 3;
  NcflowFlowConfig cfg = {true, 0.5, 1000.0, 100000, 1000, 1e-6};
  if (ncflow_flow_run(p, ds, NULL, &cfg, &t) != NCFLOW_STATUS_OK) return 4;
  size_t len = 0;
  NcflowRecord last;
  ncflow_trajectory_len(t, &len);
  ncflow_trajectory_record(t, len - 1, &last);
  if (!(last.loss <= 1e-6)) return 5;
  if (ncflow_dataset_new(NULL, 2, 2, labels, 2, &ds) != NCFLOW_STATUS_INVALID_ARGUMENT) return 6;
  if (ncflow_last_error_message() == NULL) return 7;
  printf("%s %zu %.3e\n", ncflow_version(), len, last.loss);
  ncflow_trajectory_free(t);
  ncflow_params_free(p);
  ncflow_dataset_free(ds);
  return 0;
}
"#,
    )
    .unwrap();
    let compiled = Command::new("cc")
        .arg("-I")
        .arg(crate_dir().join("include"))
        .arg(&src)
        .arg("-o")
        .arg(&exe)
        .arg(format!("-L{}", deps.display()))
        .arg("-lncflow_ffi")
        .arg(format!("-Wl,-rpath,{}", deps.display()))
        .status();
    match compiled {
        Ok(s) => assert!(s.success(), "cc failed"),
        Err(e) => {
            eprintln!("skipping: no C compiler ({e})");
            return;
        }
    }
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with(env!("CARGO_PKG_VERSION")), "{stdout}");
}
