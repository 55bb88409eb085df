//! C ABI over the `ncflow` library.
//!
//! Every fallible function returns an [`NcflowStatus`] and writes its result
//! through an out-pointer. On failure the message is available from
//! [`ncflow_last_error_message`] on the same thread. Handles are opaque and
//! must be released with their `_free` function.
//!
//! Matrices cross the boundary row-major. Points are `n` rows of length `d`.
//! Weights are neuron-major: row `j` of `w` is `w_j` (length `d`) and row `j`
//! of `v` is `v_j` (length `d_y`).

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use nalgebra::DMatrix;
use ncflow::collapse::collapse_residuals;
use ncflow::dataset::{generate_separable, read_csv, validate_separability, Dataset, GeneratorConfig};
use ncflow::experiment::{resolve_out_dir, run_experiment, verify_run, ExperimentConfig, ExperimentError};
use ncflow::flow::{self, FlowConfig, FlowError, StepMode, TrajectoryLog};
use ncflow::init::{data_seeded_shapes, derive_partition, random_balanced};
use ncflow::margins::margin_certificate;
use ncflow::model::{loss_and_gradients, LossKind, NetParams};

/// Status codes. Values 2 to 5 match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NcflowStatus {
    Ok = 0,
    /// Null pointer, bad length, non-UTF-8 string or out-of-range value.
    InvalidArgument = 1,
    Config = 2,
    Data = 3,
    Flow = 4,
    Verification = 5,
    /// A Rust panic was caught at the boundary.
    Internal = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NcflowLoss {
    Exponential = 0,
    Logistic = 1,
    CrossEntropy = 2,
}

impl From<NcflowLoss> for LossKind {
    fn from(l: NcflowLoss) -> Self {
        match l {
            NcflowLoss::Exponential => LossKind::Exponential,
            NcflowLoss::Logistic => LossKind::Logistic,
            NcflowLoss::CrossEntropy => LossKind::CrossEntropy,
        }
    }
}

/// Opaque dataset handle.
pub struct NcflowDataset(Dataset);

/// Opaque network-parameter handle.
pub struct NcflowParams(NetParams);

/// Opaque trajectory handle.
pub struct NcflowTrajectory(TrajectoryLog);

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct NcflowCertificate {
    pub mu_s: f64,
    pub mu_d: f64,
    pub x_max: f64,
    pub x_min: f64,
    pub strict_ratio: f64,
    pub separable: bool,
    pub strict: bool,
}

/// Flow settings. `adaptive = false` uses the fixed step `eta`; otherwise
/// `η = min(cap, eta / L)`. A non-positive `loss_threshold` disables that stop.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct NcflowFlowConfig {
    pub adaptive: bool,
    pub eta: f64,
    pub cap: f64,
    pub max_steps: usize,
    pub log_every: usize,
    pub loss_threshold: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct NcflowRecord {
    pub step: usize,
    pub time: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub max_balance_gap: f64,
    pub separated: bool,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct NcflowCollapse {
    pub nc1: f64,
    pub nc2: f64,
    pub nc3: f64,
    pub max_rank1_residual: f64,
    pub min_w_direction_cosine: f64,
    pub min_v_direction_cosine: f64,
    pub duality_residual: f64,
    pub orthogonality: f64,
    pub max_cross_class_feature_gram: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl std::fmt::Display) {
    let s = CString::new(msg.to_string().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(s));
}

struct Fail(NcflowStatus, String);

type Res<T> = Result<T, Fail>;

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(NcflowStatus::InvalidArgument, msg.into())
}

fn data(e: impl std::fmt::Display) -> Fail {
    Fail(NcflowStatus::Data, e.to_string())
}

fn flow_err(e: FlowError) -> Fail {
    match e {
        FlowError::InvalidConfig(m) => Fail(NcflowStatus::Config, m),
        other => Fail(NcflowStatus::Flow, other.to_string()),
    }
}

fn experiment_err(e: ExperimentError) -> Fail {
    let status = match e.exit_code() {
        2 => NcflowStatus::Config,
        3 => NcflowStatus::Data,
        4 => NcflowStatus::Flow,
        _ => NcflowStatus::Verification,
    };
    Fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> Res<()>) -> NcflowStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            NcflowStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            NcflowStatus::Internal
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Res<&'a T> {
    p.as_ref().ok_or_else(|| invalid(format!("{what} is null")))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Res<&'a mut T> {
    p.as_mut().ok_or_else(|| invalid(format!("{what} is null")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Res<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(invalid(format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Res<&'a mut [T]> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(invalid(format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn path<'a>(p: *const c_char, what: &str) -> Res<&'a Path> {
    if p.is_null() {
        return Err(invalid(format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| invalid(format!("{what} is not UTF-8")))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next `ncflow_*` call on the same thread.
#[no_mangle]
pub extern "C" fn ncflow_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ncflow_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Dataset from `n` row-major points of dimension `d` and labels in `0..num_classes`.
#[no_mangle]
pub unsafe extern "C" fn ncflow_dataset_new(
    points: *const f64,
    n: usize,
    d: usize,
    labels: *const u32,
    num_classes: usize,
    out_dataset: *mut *mut NcflowDataset,
) -> NcflowStatus {
    guard(|| {
        let o = out(out_dataset, "out_dataset")?;
        let len = n.checked_mul(d).ok_or_else(|| invalid("n * d overflows"))?;
        let pts = slice(points, len, "points")?;
        let labels = slice(labels, n, "labels")?;
        let m = DMatrix::from_fn(d, n, |r, c| pts[c * d + r]);
        let ds = Dataset::new(m, labels.iter().map(|&l| l as usize).collect(), num_classes).map_err(data)?;
        *o = boxed(NcflowDataset(ds));
        Ok(())
    })
}

/// Orthogonally separable data around a random simplex frame.
#[no_mangle]
pub unsafe extern "C" fn ncflow_dataset_generate(
    num_classes: usize,
    dim: usize,
    points_per_class: usize,
    cone_half_angle: f64,
    norm_min: f64,
    norm_max: f64,
    seed: u64,
    out_dataset: *mut *mut NcflowDataset,
) -> NcflowStatus {
    guard(|| {
        let o = out(out_dataset, "out_dataset")?;
        let cfg = GeneratorConfig::new(
            num_classes,
            dim,
            points_per_class,
            cone_half_angle,
            [norm_min, norm_max],
            seed,
        );
        *o = boxed(NcflowDataset(generate_separable(&cfg).map_err(data)?));
        Ok(())
    })
}

/// Reads a dataset CSV. `num_classes = 0` infers the count from the labels.
#[no_mangle]
pub unsafe extern "C" fn ncflow_dataset_read_csv(
    csv_path: *const c_char,
    num_classes: usize,
    out_dataset: *mut *mut NcflowDataset,
) -> NcflowStatus {
    guard(|| {
        let o = out(out_dataset, "out_dataset")?;
        let p = path(csv_path, "csv_path")?;
        let k = (num_classes > 0).then_some(num_classes);
        *o = boxed(NcflowDataset(read_csv(p, k).map_err(data)?));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ncflow_dataset_free(dataset: *mut NcflowDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Writes the number of points, the dimension and the number of classes.
#[no_mangle]
pub unsafe extern "C" fn ncflow_dataset_shape(
    dataset: *const NcflowDataset,
    out_n: *mut usize,
    out_dim: *mut usize,
    out_num_classes: *mut usize,
) -> NcflowStatus {
    guard(|| {
        let ds = &deref(dataset, "dataset")?.0;
        *out(out_n, "out_n")? = ds.len();
        *out(out_dim, "out_dim")? = ds.dim();
        *out(out_num_classes, "out_num_classes")? = ds.num_classes();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ncflow_dataset_certificate(
    dataset: *const NcflowDataset,
    out_certificate: *mut NcflowCertificate,
) -> NcflowStatus {
    guard(|| {
        let ds = &deref(dataset, "dataset")?.0;
        let o = out(out_certificate, "out_certificate")?;
        let c = validate_separability(ds).map_err(data)?;
        *o = NcflowCertificate {
            mu_s: c.mu_s,
            mu_d: c.mu_d,
            x_max: c.x_max,
            x_min: c.x_min,
            strict_ratio: c.strict_ratio,
            separable: c.is_orthogonally_separable,
            strict: c.satisfies_strict_condition,
        };
        Ok(())
    })
}

/// Class-wise max margins `γ_k` and scales `s_k`; both buffers hold `num_classes` entries.
#[no_mangle]
pub unsafe extern "C" fn ncflow_dataset_margins(
    dataset: *const NcflowDataset,
    out_gammas: *mut f64,
    out_scales: *mut f64,
    len: usize,
) -> NcflowStatus {
    guard(|| {
        let ds = &deref(dataset, "dataset")?.0;
        if len != ds.num_classes() {
            return Err(invalid(format!("len {len} != num_classes {}", ds.num_classes())));
        }
        let g = slice_mut(out_gammas, len, "out_gammas")?;
        let s = slice_mut(out_scales, len, "out_scales")?;
        let cert = margin_certificate(ds).map_err(data)?;
        g.copy_from_slice(&cert.gammas());
        s.copy_from_slice(&cert.s);
        Ok(())
    })
}

/// Parameters from neuron-major weights: `w` is `width × dim`, `v` is `width × output_dim`.
#[no_mangle]
pub unsafe extern "C" fn ncflow_params_new(
    w: *const f64,
    v: *const f64,
    dim: usize,
    output_dim: usize,
    width: usize,
    loss: NcflowLoss,
    out_params: *mut *mut NcflowParams,
) -> NcflowStatus {
    guard(|| {
        let o = out(out_params, "out_params")?;
        let ws = slice(w, dim * width, "w")?;
        let vs = slice(v, output_dim * width, "v")?;
        let wm = DMatrix::from_fn(dim, width, |r, j| ws[j * dim + r]);
        let vm = DMatrix::from_fn(output_dim, width, |r, j| vs[j * output_dim + r]);
        let p = NetParams::new(wm, vm, loss.into()).map_err(|e| invalid(e.to_string()))?;
        *o = boxed(NcflowParams(p));
        Ok(())
    })
}

/// Balanced Gaussian shapes scaled by `epsilon`.
#[no_mangle]
pub unsafe extern "C" fn ncflow_params_random_balanced(
    dim: usize,
    output_dim: usize,
    width: usize,
    epsilon: f64,
    seed: u64,
    loss: NcflowLoss,
    out_params: *mut *mut NcflowParams,
) -> NcflowStatus {
    guard(|| {
        let o = out(out_params, "out_params")?;
        let shape = random_balanced(dim, output_dim, width, epsilon, seed)
            .map_err(|e| Fail(NcflowStatus::Config, e.to_string()))?;
        let p = shape.materialize(loss.into()).map_err(|e| invalid(e.to_string()))?;
        *o = boxed(NcflowParams(p));
        Ok(())
    })
}

/// Cross-entropy parameters seeded from data points and pseudo-labels. The
/// neuron-to-class partition (`width` entries) is written to `out_partition`.
#[no_mangle]
pub unsafe extern "C" fn ncflow_params_data_seeded(
    dataset: *const NcflowDataset,
    width: usize,
    epsilon: f64,
    seed: u64,
    out_partition: *mut usize,
    out_params: *mut *mut NcflowParams,
) -> NcflowStatus {
    guard(|| {
        let ds = &deref(dataset, "dataset")?.0;
        let o = out(out_params, "out_params")?;
        let part = slice_mut(out_partition, width, "out_partition")?;
        let (shape, partition) =
            data_seeded_shapes(ds, width, epsilon, seed).map_err(|e| Fail(NcflowStatus::Config, e.to_string()))?;
        let p = shape
            .materialize(LossKind::CrossEntropy)
            .map_err(|e| invalid(e.to_string()))?;
        part.copy_from_slice(&partition);
        *o = boxed(NcflowParams(p));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ncflow_params_free(params: *mut NcflowParams) {
    if !params.is_null() {
        drop(Box::from_raw(params));
    }
}

/// Writes the input dimension, output dimension and width.
#[no_mangle]
pub unsafe extern "C" fn ncflow_params_shape(
    params: *const NcflowParams,
    out_dim: *mut usize,
    out_output_dim: *mut usize,
    out_width: *mut usize,
) -> NcflowStatus {
    guard(|| {
        let p = &deref(params, "params")?.0;
        *out(out_dim, "out_dim")? = p.input_dim();
        *out(out_output_dim, "out_output_dim")? = p.output_dim();
        *out(out_width, "out_width")? = p.width();
        Ok(())
    })
}

fn neuron_major(m: &DMatrix<f64>, dst: &mut [f64]) {
    let rows = m.nrows();
    for (j, col) in m.column_iter().enumerate() {
        dst[j * rows..(j + 1) * rows].copy_from_slice(col.as_slice());
    }
}

/// Copies the weights out in neuron-major order; the buffers hold
/// `width · dim` and `width · output_dim` entries.
#[no_mangle]
pub unsafe extern "C" fn ncflow_params_weights(
    params: *const NcflowParams,
    out_w: *mut f64,
    w_len: usize,
    out_v: *mut f64,
    v_len: usize,
) -> NcflowStatus {
    guard(|| {
        let p = &deref(params, "params")?.0;
        if w_len != p.w.len() || v_len != p.v.len() {
            return Err(invalid(format!(
                "buffer lengths must be {} and {}",
                p.w.len(),
                p.v.len()
            )));
        }
        neuron_major(&p.w, slice_mut(out_w, w_len, "out_w")?);
        neuron_major(&p.v, slice_mut(out_v, v_len, "out_v")?);
        Ok(())
    })
}

/// Loss and gradients (neuron-major, same sizes as the weights). Gradient
/// buffers may be null when only the loss is wanted.
#[no_mangle]
pub unsafe extern "C" fn ncflow_loss_and_gradients(
    params: *const NcflowParams,
    dataset: *const NcflowDataset,
    subgrad_at_zero: f64,
    out_loss: *mut f64,
    out_dw: *mut f64,
    out_dv: *mut f64,
) -> NcflowStatus {
    guard(|| {
        let p = &deref(params, "params")?.0;
        let ds = &deref(dataset, "dataset")?.0;
        let l = out(out_loss, "out_loss")?;
        let (loss, g) = loss_and_gradients(p, ds, subgrad_at_zero).map_err(|e| invalid(e.to_string()))?;
        *l = loss;
        if !out_dw.is_null() {
            neuron_major(&g.dw, slice_mut(out_dw, g.dw.len(), "out_dw")?);
        }
        if !out_dv.is_null() {
            neuron_major(&g.dv, slice_mut(out_dv, g.dv.len(), "out_dv")?);
        }
        Ok(())
    })
}

unsafe fn partition_or_derive(partition: *const usize, p: &NetParams, k: usize) -> Res<Vec<usize>> {
    if partition.is_null() {
        derive_partition(&p.v, k).map_err(|e| invalid(e.to_string()))
    } else {
        Ok(slice(partition, p.width(), "partition")?.to_vec())
    }
}

/// Explicit-Euler gradient flow. `partition` (`width` entries) may be null to
/// read it off the output weights.
#[no_mangle]
pub unsafe extern "C" fn ncflow_flow_run(
    params: *const NcflowParams,
    dataset: *const NcflowDataset,
    partition: *const usize,
    config: *const NcflowFlowConfig,
    out_trajectory: *mut *mut NcflowTrajectory,
) -> NcflowStatus {
    guard(|| {
        let p = &deref(params, "params")?.0;
        let ds = &deref(dataset, "dataset")?.0;
        let c = deref(config, "config")?;
        let o = out(out_trajectory, "out_trajectory")?;
        let part = partition_or_derive(partition, p, ds.num_classes())?;
        let mode = if c.adaptive {
            StepMode::LossAdaptive {
                base: c.eta,
                cap: c.cap,
            }
        } else {
            StepMode::Fixed { eta: c.eta }
        };
        let mut cfg = FlowConfig::new(mode, c.max_steps, c.log_every);
        cfg.stop.loss_threshold = (c.loss_threshold > 0.0).then_some(c.loss_threshold);
        let log = flow::run(p, ds, Some(&part), &cfg).map_err(flow_err)?;
        *o = boxed(NcflowTrajectory(log));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ncflow_trajectory_free(trajectory: *mut NcflowTrajectory) {
    if !trajectory.is_null() {
        drop(Box::from_raw(trajectory));
    }
}

/// Number of logged records.
#[no_mangle]
pub unsafe extern "C" fn ncflow_trajectory_len(
    trajectory: *const NcflowTrajectory,
    out_len: *mut usize,
) -> NcflowStatus {
    guard(|| {
        *out(out_len, "out_len")? = deref(trajectory, "trajectory")?.0.records.len();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ncflow_trajectory_record(
    trajectory: *const NcflowTrajectory,
    index: usize,
    out_record: *mut NcflowRecord,
) -> NcflowStatus {
    guard(|| {
        let t = &deref(trajectory, "trajectory")?.0;
        let o = out(out_record, "out_record")?;
        let r = t
            .records
            .get(index)
            .ok_or_else(|| invalid(format!("record {index} of {}", t.records.len())))?;
        *o = NcflowRecord {
            step: r.step,
            time: r.time,
            loss: r.loss,
            grad_norm: r.grad_norm,
            max_balance_gap: r.max_balance_gap,
            separated: r.separated,
        };
        Ok(())
    })
}

/// First separated step, or −1 when separation never occurred. `out_reverts`
/// receives the number of later records where it failed.
#[no_mangle]
pub unsafe extern "C" fn ncflow_trajectory_separation(
    trajectory: *const NcflowTrajectory,
    out_t_star: *mut i64,
    out_reverts: *mut usize,
) -> NcflowStatus {
    guard(|| {
        let t = &deref(trajectory, "trajectory")?.0;
        *out(out_t_star, "out_t_star")? = t.t_star.as_ref().map_or(-1, |e| e.step as i64);
        *out(out_reverts, "out_reverts")? = t.reverts.len();
        Ok(())
    })
}

/// New handle holding the final parameters of the trajectory.
#[no_mangle]
pub unsafe extern "C" fn ncflow_trajectory_final_params(
    trajectory: *const NcflowTrajectory,
    out_params: *mut *mut NcflowParams,
) -> NcflowStatus {
    guard(|| {
        let t = &deref(trajectory, "trajectory")?.0;
        *out(out_params, "out_params")? = boxed(NcflowParams(t.final_params.clone()));
        Ok(())
    })
}

/// Collapse residuals of the direction `params/‖params‖`. `partition` may be null.
#[no_mangle]
pub unsafe extern "C" fn ncflow_collapse_report(
    params: *const NcflowParams,
    dataset: *const NcflowDataset,
    partition: *const usize,
    out_report: *mut NcflowCollapse,
) -> NcflowStatus {
    guard(|| {
        let p = &deref(params, "params")?.0;
        let ds = &deref(dataset, "dataset")?.0;
        let o = out(out_report, "out_report")?;
        let part = partition_or_derive(partition, p, ds.num_classes())?;
        let norm = p.norm();
        if norm == 0.0 {
            return Err(invalid("parameters are zero"));
        }
        let cert = margin_certificate(ds).map_err(data)?;
        let r = collapse_residuals(&p.scaled(1.0 / norm), ds, &part, &cert).map_err(data)?;
        *o = NcflowCollapse {
            nc1: r.nc.nc1.unwrap_or(f64::NAN),
            nc2: r.nc.nc2,
            nc3: r.nc.nc3,
            max_rank1_residual: r.max_rank1_residual(),
            min_w_direction_cosine: r.min_w_direction_cosine(),
            min_v_direction_cosine: r.min_v_direction_cosine(),
            duality_residual: r.duality_residual,
            orthogonality: r.orthogonality,
            max_cross_class_feature_gram: r.max_cross_class_feature_gram,
        };
        Ok(())
    })
}

/// Runs an experiment config like `ncflow run`. `out_dir` may be null for the
/// default location. `out_exit_code` receives the command-line exit code.
#[no_mangle]
pub unsafe extern "C" fn ncflow_run_config(
    config_path: *const c_char,
    out_dir: *const c_char,
    out_exit_code: *mut i32,
) -> NcflowStatus {
    guard(|| {
        let code = out(out_exit_code, "out_exit_code")?;
        let cfg = ExperimentConfig::load(path(config_path, "config_path")?).map_err(experiment_err)?;
        let explicit = if out_dir.is_null() {
            None
        } else {
            Some(path(out_dir, "out_dir")?)
        };
        let dir = resolve_out_dir(&cfg, explicit);
        let m = run_experiment(&cfg, &dir);
        *code = m.exit_code;
        Ok(())
    })
}

/// Re-verifies a run directory like `ncflow verify`.
#[no_mangle]
pub unsafe extern "C" fn ncflow_verify_run(run_dir: *const c_char, out_passed: *mut bool) -> NcflowStatus {
    guard(|| {
        let o = out(out_passed, "out_passed")?;
        let r = verify_run(path(run_dir, "run_dir")?, None).map_err(experiment_err)?;
        *o = r.passed;
        Ok(())
    })
}
