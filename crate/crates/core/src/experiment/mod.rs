//! Config-driven pipeline: dataset → certificate → initialization checks →
//! training → margin certificate → collapse report, with on-disk artifacts
//! that can be re-verified without retraining.

mod config;
mod sweep;

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use config::{
    derive_seed, DatasetSpec, ExperimentConfig, InitScheme, InitSpec, OutputSpec, SgdSpec, SweepSpec, VerifySpec,
    MNIST_DIR_ENV, STREAM_DATASET, STREAM_INIT, STREAM_SGD,
};
pub use sweep::{run_sweep, sweep_cells, SweepCell, SweepSummary};

use crate::checkpoint::{self, CheckpointMeta};
use crate::collapse::{collapse_residuals, feature_pca_summary, nc_metrics, CollapseReport, NcMetrics};
use crate::dataset::{
    center_dataset, generate_separable, load_idx, read_csv, validate_separability, write_csv, Dataset, GeneratorConfig,
    SeparabilityCertificate,
};
use crate::flow::sgd::{gaussian_init, train_sgd, write_nc_series, EpochRecord, SgdConfig, SgdLog};
use crate::flow::{
    run as run_flow, small_norm_envelope_check, write_neuron_csv, write_trajectory_csv, FlowError, SeparationEvent,
    SmallNormReport, StopReason, TrajectoryLog,
};
use crate::init::{
    check_non_degenerate, check_semi_local, data_seeded_shapes, derive_partition, random_balanced, InitShape,
    NonDegeneracyReport, SemiLocalReport,
};
use crate::margins::{kkt_residual, margin_certificate, KktReport, MarginCertificate};
use crate::model::{loss, NetParams};

pub const MANIFEST_FORMAT: &str = "ncflow-run/1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATASET_FILE: &str = "dataset.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";
pub const NEURONS_FILE: &str = "neurons.csv";
pub const NC_SERIES_FILE: &str = "nc_series.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const OUT_ROOT_ENV: &str = "NCFLOW_OUT";
/// Stored and recomputed values must agree to this absolute (or relative, for large values) tolerance.
pub const REVERIFY_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("flow: {0}")]
    Flow(String),
    #[error("verification: {0}")]
    Verification(String),
}

impl ExperimentError {
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 2,
            ExperimentError::Data(_) => 3,
            ExperimentError::Flow(_) => 4,
            ExperimentError::Verification(_) => 5,
        }
    }
}

fn data_err(e: impl std::fmt::Display) -> ExperimentError {
    ExperimentError::Data(e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Passed,
    VerificationFailed,
    ConfigError,
    DataError,
    FlowError,
}

impl RunStatus {
    pub fn exit_code(self) -> i32 {
        match self {
            RunStatus::Passed => 0,
            RunStatus::ConfigError => 2,
            RunStatus::DataError => 3,
            RunStatus::FlowError => 4,
            RunStatus::VerificationFailed => 5,
        }
    }

    fn of(e: &ExperimentError) -> Self {
        match e {
            ExperimentError::Config(_) => RunStatus::ConfigError,
            ExperimentError::Data(_) => RunStatus::DataError,
            ExperimentError::Flow(_) => RunStatus::FlowError,
            ExperimentError::Verification(_) => RunStatus::VerificationFailed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub num_points: usize,
    pub dim: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub class_names: Option<Vec<String>>,
    #[serde(deserialize_with = "crate::linalg::f64_or_nan")]
    pub x_max: f64,
    #[serde(deserialize_with = "crate::linalg::f64_or_nan")]
    pub x_min: f64,
    /// Points removed because centering made them zero.
    pub centered_dropped: usize,
    pub certificate: SeparabilityCertificate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitSummary {
    pub scheme: InitScheme,
    pub seed: u64,
    /// Draws used, including the accepted one.
    pub attempts: usize,
    pub epsilon: Option<f64>,
    pub width: usize,
    pub partition: Vec<usize>,
    pub assumption_satisfied: Option<bool>,
    #[serde(default)]
    pub non_degeneracy: Option<NonDegeneracyReport>,
    #[serde(default)]
    pub semi_local: Option<SemiLocalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSummary {
    /// Logged records with at least one in-regime neuron.
    pub in_regime_records: usize,
    /// Largest `residual / bound` over in-regime neurons.
    #[serde(deserialize_with = "crate::linalg::f64_or_nan")]
    pub max_ratio: f64,
    pub all_within: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSummary {
    pub stop_reason: Option<StopReason>,
    pub steps: usize,
    #[serde(deserialize_with = "crate::linalg::f64_or_nan")]
    pub time: f64,
    #[serde(deserialize_with = "crate::linalg::f64_or_nan")]
    pub final_loss: f64,
    pub t_star: Option<SeparationEvent>,
    pub reverts: Vec<usize>,
    #[serde(deserialize_with = "crate::linalg::f64_or_nan")]
    pub max_balance_gap: f64,
    /// Largest `|L − L_decomposed|` over separated records.
    pub max_decomposition_error: Option<f64>,
    pub small_norm: Option<SmallNormReport>,
    pub alignment: Option<AlignmentSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalFeatures {
    pub nc: NcMetrics,
    pub pca_ratios: Vec<f64>,
    #[serde(deserialize_with = "crate::linalg::f64_or_nan")]
    pub pca_explained: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    #[serde(deserialize_with = "crate::linalg::f64_or_nan")]
    pub value: f64,
    /// `None` for boolean checks (value 1 = true).
    pub threshold: Option<f64>,
    /// `"<="`, `">="` or `"true"`.
    pub relation: String,
    pub passed: bool,
}

impl Check {
    fn le(name: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold: Some(threshold),
            relation: "<=".into(),
            passed: value <= threshold,
        }
    }

    fn ge(name: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold: Some(threshold),
            relation: ">=".into(),
            passed: value >= threshold,
        }
    }

    fn holds(name: &str, ok: bool) -> Self {
        Self {
            name: name.into(),
            value: if ok { 1.0 } else { 0.0 },
            threshold: None,
            relation: "true".into(),
            passed: ok,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub file: String,
    pub step: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunFiles {
    pub dataset_csv: Option<String>,
    pub diagnostics_csv: Option<String>,
    pub neurons_csv: Option<String>,
    pub nc_series_csv: Option<String>,
    pub checkpoints: Vec<CheckpointEntry>,
    pub final_checkpoint: Option<CheckpointEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub name: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub status: RunStatus,
    pub exit_code: i32,
    pub reason: Option<String>,
    pub dataset: Option<DatasetSummary>,
    pub init: Option<InitSummary>,
    pub flow: Option<FlowSummary>,
    pub sgd: Option<Vec<EpochRecord>>,
    pub margins: Option<MarginCertificate>,
    pub collapse: Option<CollapseReport>,
    pub kkt: Option<KktReport>,
    pub final_features: Option<FinalFeatures>,
    pub checks: Vec<Check>,
    pub files: RunFiles,
    #[serde(deserialize_with = "crate::linalg::f64_or_nan")]
    pub elapsed_secs: f64,
}

impl RunManifest {
    pub fn failed_checks(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

/// Everything a run produced, before it is written to disk.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub manifest: RunManifest,
    pub dataset: Option<Dataset>,
    pub initial: Option<NetParams>,
    pub trajectory: Option<TrajectoryLog>,
    pub sgd_log: Option<SgdLog>,
}

impl RunOutput {
    pub fn final_params(&self) -> Option<&NetParams> {
        self.trajectory
            .as_ref()
            .map(|t| &t.final_params)
            .or(self.sgd_log.as_ref().map(|s| &s.final_params))
    }
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<(Dataset, usize), ExperimentError> {
    let data = match &cfg.dataset {
        DatasetSpec::Generate {
            num_classes,
            dim,
            points_per_class,
            cone_half_angle,
            norm_range,
            max_rounds,
        } => {
            let mut g = GeneratorConfig::new(
                *num_classes,
                *dim,
                *points_per_class,
                *cone_half_angle,
                *norm_range,
                derive_seed(cfg.seed, STREAM_DATASET),
            );
            if let Some(r) = max_rounds {
                g.max_rounds = *r;
            }
            generate_separable(&g).map_err(data_err)?
        }
        DatasetSpec::Idx {
            images,
            labels,
            classes,
            max_per_class,
            center,
        } => {
            let d = load_idx(images, labels, classes, *max_per_class).map_err(data_err)?;
            if *center {
                return center_dataset(&d).map_err(data_err);
            }
            d
        }
        DatasetSpec::Csv { path, num_classes } => read_csv(path, *num_classes).map_err(data_err)?,
        DatasetSpec::Inline {
            points,
            labels,
            num_classes,
        } => Dataset::from_rows(points, labels.clone(), *num_classes).map_err(data_err)?,
    };
    Ok((data, 0))
}

fn init_params(cfg: &ExperimentConfig, data: &Dataset) -> Result<(NetParams, InitSummary), ExperimentError> {
    let spec = &cfg.init;
    let k = data.num_classes();
    let dy = cfg.loss.output_dim(k);
    let cfg_err = |e: &dyn std::fmt::Display| ExperimentError::Config(e.to_string());
    if spec.scheme == InitScheme::Gaussian {
        let seed = derive_seed(cfg.seed, STREAM_INIT);
        let std = spec.std.expect("validated");
        let p = gaussian_init(data.dim(), dy, spec.width, std, cfg.loss, seed).map_err(|e| cfg_err(&e))?;
        let partition = derive_partition(&p.v, k).map_err(|e| cfg_err(&e))?;
        return Ok((
            p,
            InitSummary {
                scheme: spec.scheme,
                seed,
                attempts: 1,
                epsilon: None,
                width: spec.width,
                partition,
                assumption_satisfied: None,
                non_degeneracy: None,
                semi_local: None,
            },
        ));
    }
    let eps = cfg.epsilon();
    let mut last = None;
    for attempt in 0..=spec.max_resamples {
        let seed = derive_seed(cfg.seed, STREAM_INIT + 256 * attempt as u64);
        let (shape, partition): (InitShape, Vec<usize>) = match spec.scheme {
            InitScheme::RandomBalanced => {
                let s = random_balanced(data.dim(), dy, spec.width, eps, seed).map_err(|e| cfg_err(&e))?;
                let p = derive_partition(&s.v, k).map_err(|e| cfg_err(&e))?;
                (s, p)
            }
            InitScheme::DataSeeded => data_seeded_shapes(data, spec.width, eps, seed).map_err(|e| cfg_err(&e))?,
            InitScheme::Gaussian => unreachable!(),
        };
        let (nd, sl) = if cfg.loss.is_binary() {
            (Some(check_non_degenerate(&shape, data).map_err(|e| cfg_err(&e))?), None)
        } else {
            (
                None,
                Some(check_semi_local(&shape, data, &partition).map_err(|e| cfg_err(&e))?),
            )
        };
        let ok = nd
            .as_ref()
            .map_or_else(|| sl.as_ref().is_some_and(|r| r.all_satisfied), |r| r.satisfied);
        let params = shape.materialize(cfg.loss).map_err(|e| cfg_err(&e))?;
        let summary = InitSummary {
            scheme: spec.scheme,
            seed,
            attempts: attempt + 1,
            epsilon: Some(eps),
            width: spec.width,
            partition,
            assumption_satisfied: Some(ok),
            non_degeneracy: nd,
            semi_local: sl,
        };
        if ok {
            return Ok((params, summary));
        }
        last = Some((params, summary));
    }
    Ok(last.expect("at least one attempt"))
}

fn summarize_flow(log: &TrajectoryLog, data: &Dataset, epsilon: Option<f64>) -> FlowSummary {
    let max_decomposition_error = log
        .records
        .iter()
        .filter_map(|r| r.decomposition_error)
        .reduce(f64::max);
    let alignment = log.records.iter().any(|r| r.alignment_bound.is_some()).then(|| {
        let reg: Vec<_> = log.records.iter().filter(|r| r.alignment_in_regime > 0).collect();
        AlignmentSummary {
            in_regime_records: reg.len(),
            max_ratio: reg
                .iter()
                .filter_map(|r| r.alignment_max_residual.zip(r.alignment_bound))
                .map(|(a, b)| a / b)
                .fold(0.0, f64::max),
            all_within: reg.iter().all(|r| r.alignment_within_bound == Some(true)),
        }
    });
    FlowSummary {
        stop_reason: log.stop_reason,
        steps: log.steps,
        time: log.time,
        final_loss: log.final_record().map_or(f64::NAN, |r| r.loss),
        t_star: log.t_star.clone(),
        reverts: log.reverts.clone(),
        max_balance_gap: log.max_balance_gap(),
        max_decomposition_error,
        small_norm: epsilon.map(|e| small_norm_envelope_check(log, e, data)),
        alignment,
    }
}

/// Post-training analysis shared by `run` and `verify`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub margins: Option<MarginCertificate>,
    pub collapse: Option<CollapseReport>,
    pub kkt: Option<KktReport>,
    pub final_features: Option<FinalFeatures>,
    pub notes: Vec<String>,
}

pub fn analyze(cfg: &ExperimentConfig, data: &Dataset, params: &NetParams, partition: &[usize]) -> Analysis {
    let v = &cfg.verify;
    let mut notes = Vec::new();
    let features = params.features(data);
    let final_features = match nc_metrics(&features, data.labels(), data.num_classes(), &params.v) {
        Ok(nc) => {
            let pca = feature_pca_summary(&features, cfg.sgd.as_ref().map_or(3, |s| s.pca_components));
            Some(FinalFeatures {
                nc,
                pca_ratios: pca.ratios,
                pca_explained: pca.explained,
            })
        }
        Err(e) => {
            notes.push(format!("nc metrics: {e}"));
            None
        }
    };
    let want_margins = v.needs_collapse() || v.kkt_stationarity_tol.is_some();
    let margins = if want_margins {
        match margin_certificate(data) {
            Ok(m) => Some(m),
            Err(e) => {
                notes.push(format!("margin certificate: {e}"));
                None
            }
        }
    } else {
        None
    };
    let collapse = match (&margins, v.needs_collapse()) {
        (Some(m), true) => match collapse_residuals(params, data, partition, m) {
            Ok(r) => Some(r),
            Err(e) => {
                notes.push(format!("collapse report: {e}"));
                None
            }
        },
        _ => None,
    };
    let kkt = if v.kkt_stationarity_tol.is_some() {
        match kkt_residual(params, data, partition) {
            Ok(r) => Some(r),
            Err(e) => {
                notes.push(format!("kkt residual: {e}"));
                None
            }
        }
    } else {
        None
    };
    Analysis {
        margins,
        collapse,
        kkt,
        final_features,
        notes,
    }
}

fn nan_if_none(x: Option<f64>) -> f64 {
    x.unwrap_or(f64::NAN)
}

/// Evaluates every enabled check against the manifest contents.
pub fn evaluate_checks(v: &VerifySpec, m: &RunManifest) -> Vec<Check> {
    let mut out = Vec::new();
    let cert = m.dataset.as_ref().map(|d| &d.certificate);
    if v.require_separable {
        out.push(Check::holds(
            "separable",
            cert.is_some_and(|c| c.is_orthogonally_separable),
        ));
    }
    if v.require_strict_condition {
        out.push(Check::holds(
            "strict_condition",
            cert.is_some_and(|c| c.satisfies_strict_condition),
        ));
    }
    if v.require_init_assumption {
        let ok = m.init.as_ref().and_then(|i| i.assumption_satisfied).unwrap_or(false);
        out.push(Check::holds("init_assumption", ok));
    }
    let flow = m.flow.as_ref();
    if v.require_separation {
        out.push(Check::holds(
            "separation_persists",
            flow.is_some_and(|f| f.t_star.is_some() && f.reverts.is_empty()),
        ));
    }
    if let Some(t) = v.max_final_loss {
        out.push(Check::le("final_loss", nan_if_none(flow.map(|f| f.final_loss)), t));
    }
    if let Some(t) = v.decomposition_tol {
        out.push(Check::le(
            "decomposition_error",
            nan_if_none(flow.and_then(|f| f.max_decomposition_error)),
            t,
        ));
    }
    let c = m.collapse.as_ref();
    if let Some(t) = v.rank1_tol {
        out.push(Check::le(
            "rank1_residual",
            nan_if_none(c.map(|c| c.max_rank1_residual())),
            t,
        ));
    }
    if let Some(t) = v.cross_gram_max {
        out.push(Check::le(
            "cross_class_feature_gram",
            nan_if_none(c.map(|c| c.max_cross_class_feature_gram)),
            t,
        ));
        out.push(Check::le(
            "class_mean_orthogonality",
            nan_if_none(c.map(|c| c.orthogonality)),
            t,
        ));
    }
    if let Some(t) = v.w_cosine_min {
        out.push(Check::ge(
            "w_direction_cosine",
            nan_if_none(c.map(|c| c.min_w_direction_cosine())),
            t,
        ));
    }
    if let Some(t) = v.v_cosine_min {
        out.push(Check::ge(
            "v_direction_cosine",
            nan_if_none(c.map(|c| c.min_v_direction_cosine())),
            t,
        ));
    }
    if let Some(t) = v.duality_tol {
        out.push(Check::le(
            "duality_residual",
            nan_if_none(c.map(|c| c.duality_residual)),
            t,
        ));
    }
    if let Some(t) = v.norm_rel_tol {
        out.push(Check::le(
            "v_norm_rel_error",
            nan_if_none(c.map(|c| c.max_v_norm_rel_error())),
            t,
        ));
        out.push(Check::le(
            "w_norm_rel_error",
            nan_if_none(c.map(|c| c.max_w_norm_rel_error())),
            t,
        ));
    }
    if let Some(t) = v.kkt_stationarity_tol {
        out.push(Check::le(
            "kkt_stationarity_relative",
            nan_if_none(m.kkt.as_ref().map(|k| k.stationarity_relative)),
            t,
        ));
    }
    if v.require_small_norm {
        let ok = flow
            .and_then(|f| f.small_norm.as_ref())
            .is_some_and(|s| s.holds && s.covers_window);
        out.push(Check::holds("small_norm_envelope", ok));
    }
    if v.require_alignment_bound {
        let ok = flow
            .and_then(|f| f.alignment.as_ref())
            .is_some_and(|a| a.all_within && a.in_regime_records > 0);
        out.push(Check::holds("alignment_bound", ok));
    }
    if let Some(t) = v.pca_explained_min {
        let val = m
            .sgd
            .as_ref()
            .and_then(|e| e.last())
            .map(|r| r.pca_explained)
            .or(m.final_features.as_ref().map(|f| f.pca_explained));
        out.push(Check::ge("pca_explained", nan_if_none(val), t));
    }
    if let Some(factor) = v.nc_decrease_factor {
        let epochs = m.sgd.as_deref().unwrap_or(&[]);
        let at = |e: usize| epochs.iter().find(|r| r.epoch == e);
        let (r0, r1) = (at(v.nc_reference_epoch), epochs.last());
        let ratio = |f: fn(&EpochRecord) -> Option<f64>| match (r0.and_then(f), r1.and_then(f)) {
            (Some(a), Some(b)) if a > 0.0 => b / a,
            _ => f64::NAN,
        };
        out.push(Check::le("nc1_ratio", ratio(|r| r.nc.nc1), factor));
        out.push(Check::le("nc2_ratio", ratio(|r| Some(r.nc.nc2)), factor));
    }
    out
}

fn new_manifest(cfg: &ExperimentConfig) -> RunManifest {
    RunManifest {
        format: MANIFEST_FORMAT.into(),
        name: cfg.name.clone(),
        seed: cfg.seed,
        config: cfg.clone(),
        status: RunStatus::Passed,
        exit_code: 0,
        reason: None,
        dataset: None,
        init: None,
        flow: None,
        sgd: None,
        margins: None,
        collapse: None,
        kkt: None,
        final_features: None,
        checks: Vec::new(),
        files: RunFiles::default(),
        elapsed_secs: 0.0,
    }
}

fn fail(out: &mut RunOutput, e: ExperimentError) {
    warn!("{e}");
    out.manifest.status = RunStatus::of(&e);
    out.manifest.exit_code = out.manifest.status.exit_code();
    out.manifest.reason = Some(e.to_string());
}

/// Runs the pipeline in memory. Failures are recorded in the manifest status.
pub fn execute(cfg: &ExperimentConfig, init_only: bool) -> RunOutput {
    let start = std::time::Instant::now();
    let mut out = RunOutput {
        manifest: new_manifest(cfg),
        dataset: None,
        initial: None,
        trajectory: None,
        sgd_log: None,
    };
    if let Err(e) = execute_stages(cfg, init_only, &mut out) {
        fail(&mut out, e);
    }
    out.manifest.elapsed_secs = start.elapsed().as_secs_f64();
    out
}

fn execute_stages(cfg: &ExperimentConfig, init_only: bool, out: &mut RunOutput) -> Result<(), ExperimentError> {
    cfg.validate()?;
    let (data, dropped) = load_dataset(cfg)?;
    cfg.check_loss_classes(data.num_classes())?;
    let certificate = validate_separability(&data).map_err(data_err)?;
    info!(
        "dataset: {} points, D = {}, K = {}, strict ratio {:.4}",
        data.len(),
        data.dim(),
        data.num_classes(),
        certificate.strict_ratio
    );
    out.manifest.dataset = Some(DatasetSummary {
        num_points: data.len(),
        dim: data.dim(),
        num_classes: data.num_classes(),
        class_names: data.class_names().map(<[String]>::to_vec),
        x_max: data.x_max(),
        x_min: data.x_min(),
        centered_dropped: dropped,
        certificate,
    });
    let (params0, init) = init_params(cfg, &data)?;
    info!(
        "init: {:?}, {} attempt(s), assumption {:?}",
        init.scheme, init.attempts, init.assumption_satisfied
    );
    let partition = init.partition.clone();
    let epsilon = init.epsilon;
    out.manifest.init = Some(init);
    out.initial = Some(params0.clone());
    out.dataset = Some(data.clone());
    if init_only {
        finish_checks(cfg, out);
        return Ok(());
    }

    let final_params = if let Some(flow_cfg) = &cfg.flow {
        let mut fc = flow_cfg.clone();
        if cfg.verify.require_alignment_bound && fc.alignment_epsilon.is_none() {
            fc.alignment_epsilon = epsilon;
        }
        fc.record_neurons |= cfg.output.neuron_table;
        let log = match run_flow(&params0, &data, Some(&partition), &fc) {
            Ok(log) => log,
            Err(FlowError::NonFinite { what, step, log }) => {
                out.manifest.flow = Some(summarize_flow(&log, &data, epsilon));
                out.trajectory = Some(*log);
                return Err(ExperimentError::Flow(format!("non-finite {what} at step {step}")));
            }
            Err(FlowError::InvalidConfig(m)) => return Err(ExperimentError::Config(m)),
            Err(e) => return Err(ExperimentError::Flow(e.to_string())),
        };
        info!(
            "flow: {} steps, stop {:?}, final loss {:e}",
            log.steps,
            log.stop_reason,
            log.final_record().map_or(f64::NAN, |r| r.loss)
        );
        out.manifest.flow = Some(summarize_flow(&log, &data, epsilon));
        let p = log.final_params.clone();
        out.trajectory = Some(log);
        p
    } else {
        let s = cfg.sgd.as_ref().expect("validated");
        let sc = SgdConfig {
            epochs: s.epochs,
            batch_size: s.batch_size,
            learning_rate: s.learning_rate,
            seed: derive_seed(cfg.seed, STREAM_SGD),
            subgrad_at_zero: s.subgrad_at_zero,
            pca_components: s.pca_components,
        };
        let log = train_sgd(&params0, &data, &sc).map_err(|e| ExperimentError::Flow(e.to_string()))?;
        if let Some(last) = log.epochs.last() {
            info!(
                "sgd: {} epochs, loss {:.4e}, nc1 {:?}, pca {:.5}",
                last.epoch, last.loss, last.nc.nc1, last.pca_explained
            );
        }
        out.manifest.sgd = Some(log.epochs.clone());
        let p = log.final_params.clone();
        out.sgd_log = Some(log);
        p
    };
    if !final_params.is_finite() || loss(&final_params, &data).is_err() {
        return Err(ExperimentError::Flow("final parameters are unusable".into()));
    }
    let analysis = analyze(cfg, &data, &final_params, &partition);
    for n in &analysis.notes {
        warn!("{n}");
    }
    out.manifest.margins = analysis.margins;
    out.manifest.collapse = analysis.collapse;
    out.manifest.kkt = analysis.kkt;
    out.manifest.final_features = analysis.final_features;
    finish_checks(cfg, out);
    Ok(())
}

fn finish_checks(cfg: &ExperimentConfig, out: &mut RunOutput) {
    out.manifest.checks = evaluate_checks(&cfg.verify, &out.manifest);
    let failed: Vec<String> = out
        .manifest
        .failed_checks()
        .iter()
        .map(|c| format!("{} = {:e}", c.name, c.value))
        .collect();
    if !failed.is_empty() {
        out.manifest.status = RunStatus::VerificationFailed;
        out.manifest.exit_code = 5;
        out.manifest.reason = Some(format!("failed checks: {}", failed.join(", ")));
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> ExperimentError {
    ExperimentError::Data(format!("{}: {e}", path.display()))
}

fn save_checkpoint(
    dir: &Path,
    rel: &str,
    params: &NetParams,
    meta: CheckpointMeta,
) -> Result<CheckpointEntry, ExperimentError> {
    let bytes = checkpoint::encode(params, meta);
    let path = dir.join(rel);
    fs::write(&path, &bytes).map_err(|e| io_err(&path, e))?;
    Ok(CheckpointEntry {
        file: rel.into(),
        step: meta.step.unwrap_or(0),
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

/// Writes the artifacts of `out` into `dir` and fills in the manifest file list.
pub fn write_run(out: &mut RunOutput, dir: &Path) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir.join("checkpoints")).map_err(|e| io_err(dir, e))?;
    let m = &mut out.manifest;
    let epsilon = m.init.as_ref().and_then(|i| i.epsilon);
    if let Some(data) = &out.dataset {
        write_csv(data, dir.join(DATASET_FILE)).map_err(data_err)?;
        m.files.dataset_csv = Some(DATASET_FILE.into());
    }
    let meta = |step: usize, time: Option<f64>| CheckpointMeta {
        epsilon,
        seed: Some(m.seed),
        step: Some(step),
        time,
    };
    if let Some(p) = &out.initial {
        let e = save_checkpoint(dir, "checkpoints/step-00000000.ckpt", p, meta(0, Some(0.0)))?;
        m.files.checkpoints.push(e);
    }
    if let Some(log) = &out.trajectory {
        let path = dir.join(DIAGNOSTICS_FILE);
        let f = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
        write_trajectory_csv(log, std::io::BufWriter::new(f)).map_err(|e| io_err(&path, e))?;
        m.files.diagnostics_csv = Some(DIAGNOSTICS_FILE.into());
        if log.records.iter().any(|r| r.neurons.is_some()) {
            let path = dir.join(NEURONS_FILE);
            let f = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
            write_neuron_csv(log, std::io::BufWriter::new(f)).map_err(|e| io_err(&path, e))?;
            m.files.neurons_csv = Some(NEURONS_FILE.into());
        }
        for s in &log.snapshots {
            if s.step == 0 {
                continue;
            }
            let rel = format!("checkpoints/step-{:08}.ckpt", s.step);
            m.files
                .checkpoints
                .push(save_checkpoint(dir, &rel, &s.params, meta(s.step, Some(s.time)))?);
        }
        m.files.final_checkpoint = Some(save_checkpoint(
            dir,
            FINAL_CHECKPOINT,
            &log.final_params,
            meta(log.steps, Some(log.time)),
        )?);
    }
    if let Some(log) = &out.sgd_log {
        let path = dir.join(NC_SERIES_FILE);
        let f = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
        write_nc_series(log, std::io::BufWriter::new(f)).map_err(|e| io_err(&path, e))?;
        m.files.nc_series_csv = Some(NC_SERIES_FILE.into());
        let steps = log.epochs.len().saturating_sub(1);
        m.files.final_checkpoint = Some(save_checkpoint(
            dir,
            FINAL_CHECKPOINT,
            &log.final_params,
            meta(steps, None),
        )?);
    }
    write_manifest(m, dir)
}

pub fn write_manifest(m: &RunManifest, dir: &Path) -> Result<(), ExperimentError> {
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(m).map_err(|e| io_err(&path, e))?;
    fs::write(&path, text).map_err(|e| io_err(&path, e))
}

/// Output directory: explicit, then the config's, then `$NCFLOW_OUT/<name>`, then `runs/<name>`.
pub fn resolve_out_dir(cfg: &ExperimentConfig, explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    if let Some(p) = &cfg.output.dir {
        return p.clone();
    }
    let root = std::env::var_os(OUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    root.join(&cfg.name)
}

/// Runs the pipeline and writes its artifacts. Returns the manifest; its
/// `exit_code` says whether every stage and check passed.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path) -> RunManifest {
    let mut out = execute(cfg, false);
    if let Err(e) = write_run(&mut out, dir) {
        fail(&mut out, e);
        let _ = write_manifest(&out.manifest, dir);
    }
    out.manifest
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mismatch {
    pub field: String,
    pub stored: String,
    pub recomputed: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub run_dir: PathBuf,
    pub mismatches: Vec<Mismatch>,
    pub checks: Vec<Check>,
    pub passed: bool,
}

fn compare_json(path: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<Mismatch>) {
    use serde_json::Value;
    let mismatch = |out: &mut Vec<Mismatch>| {
        out.push(Mismatch {
            field: path.to_string(),
            stored: a.to_string(),
            recomputed: b.to_string(),
        })
    };
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => {
            let (x, y) = (x.as_f64().unwrap_or(f64::NAN), y.as_f64().unwrap_or(f64::NAN));
            if !((x - y).abs() <= REVERIFY_TOL * x.abs().max(y.abs()).max(1.0)) {
                mismatch(out);
            }
        }
        (Value::Array(x), Value::Array(y)) => {
            if x.len() != y.len() {
                return mismatch(out);
            }
            for (i, (p, q)) in x.iter().zip(y).enumerate() {
                compare_json(&format!("{path}[{i}]"), p, q, out);
            }
        }
        (Value::Object(x), Value::Object(y)) => {
            for (k, p) in x {
                match y.get(k) {
                    Some(q) => compare_json(&format!("{path}.{k}"), p, q, out),
                    None => mismatch(out),
                }
            }
            if y.keys().any(|k| !x.contains_key(k)) {
                mismatch(out);
            }
        }
        _ => {
            if a != b {
                mismatch(out);
            }
        }
    }
}

fn compare<T: Serialize>(name: &str, stored: &Option<T>, recomputed: &Option<T>, out: &mut Vec<Mismatch>) {
    let a = serde_json::to_value(stored).unwrap_or_default();
    let b = serde_json::to_value(recomputed).unwrap_or_default();
    compare_json(name, &a, &b, out);
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest, ExperimentError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(&path, e))
}

/// Recomputes the margin certificate, collapse report, KKT residual and final
/// feature metrics from the stored dataset and final checkpoint, compares them
/// with the manifest, and re-evaluates the checks (optionally with other tolerances).
pub fn verify_run(dir: &Path, tolerances: Option<&VerifySpec>) -> Result<VerifyReport, ExperimentError> {
    let m = read_manifest(dir)?;
    if m.format != MANIFEST_FORMAT {
        return Err(ExperimentError::Data(format!("unknown manifest format {:?}", m.format)));
    }
    let ds = m
        .files
        .dataset_csv
        .as_ref()
        .ok_or_else(|| ExperimentError::Data("manifest lists no dataset".into()))?;
    let k = m.dataset.as_ref().map(|d| d.num_classes);
    let data = read_csv(dir.join(ds), k).map_err(data_err)?;
    let fin = m
        .files
        .final_checkpoint
        .as_ref()
        .ok_or_else(|| ExperimentError::Data("manifest lists no final checkpoint".into()))?;
    let ckpt_path = dir.join(&fin.file);
    let bytes = fs::read(&ckpt_path).map_err(|e| io_err(&ckpt_path, e))?;
    if hex::encode(Sha256::digest(&bytes)) != fin.sha256 {
        return Err(io_err(&ckpt_path, "checksum does not match the manifest"));
    }
    let (params, _) = checkpoint::decode(&bytes).map_err(|e| io_err(&ckpt_path, e))?;
    let partition = m
        .init
        .as_ref()
        .map(|i| i.partition.clone())
        .ok_or_else(|| ExperimentError::Data("manifest has no partition".into()))?;
    let mut cfg = m.config.clone();
    if let Some(t) = tolerances {
        cfg.verify = t.clone();
    }
    // recompute what the original run computed, then whatever the new tolerances need
    let mut union = m.config.verify.clone();
    if let Some(t) = tolerances {
        union.rank1_tol = union.rank1_tol.or(t.rank1_tol);
        union.w_cosine_min = union.w_cosine_min.or(t.w_cosine_min);
        union.v_cosine_min = union.v_cosine_min.or(t.v_cosine_min);
        union.duality_tol = union.duality_tol.or(t.duality_tol);
        union.norm_rel_tol = union.norm_rel_tol.or(t.norm_rel_tol);
        union.cross_gram_max = union.cross_gram_max.or(t.cross_gram_max);
        union.kkt_stationarity_tol = union.kkt_stationarity_tol.or(t.kkt_stationarity_tol);
    }
    let mut acfg = m.config.clone();
    acfg.verify = union;
    let a = analyze(&acfg, &data, &params, &partition);
    let mut mismatches = Vec::new();
    let dcert = validate_separability(&data).map_err(data_err)?;
    compare(
        "dataset.certificate",
        &m.dataset.as_ref().map(|d| d.certificate.clone()),
        &Some(dcert),
        &mut mismatches,
    );
    if m.margins.is_some() {
        compare("margins", &m.margins, &a.margins, &mut mismatches);
    }
    if m.collapse.is_some() {
        compare("collapse", &m.collapse, &a.collapse, &mut mismatches);
    }
    if m.kkt.is_some() {
        compare("kkt", &m.kkt, &a.kkt, &mut mismatches);
    }
    if m.final_features.is_some() {
        compare("final_features", &m.final_features, &a.final_features, &mut mismatches);
    }
    let mut recomputed = m.clone();
    recomputed.margins = a.margins.or(m.margins.clone());
    recomputed.collapse = a.collapse.or(m.collapse.clone());
    recomputed.kkt = a.kkt.or(m.kkt.clone());
    let checks = evaluate_checks(&cfg.verify, &recomputed);
    let passed = mismatches.is_empty()
        && checks.iter().all(|c| c.passed)
        && (tolerances.is_some() || m.status == RunStatus::Passed);
    Ok(VerifyReport {
        run_dir: dir.to_path_buf(),
        mismatches,
        checks,
        passed,
    })
}
