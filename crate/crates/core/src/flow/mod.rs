//! Explicit-Euler discretization of gradient flow with trajectory logging and
//! separation tracking.

pub mod diagnostics;
pub mod sgd;

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::init::{derive_partition, InitError};
use crate::model::{check_partition, class_decomposed_loss, loss_and_gradients, ModelError, NetParams};

pub use diagnostics::{
    alignment_bound, alignment_ode_residual, detect_separation, max_output_norm, neuron_diagnostics,
    small_norm_envelope_check, small_norm_window, AlignmentResidual, NeuronDiagnostics, SeparationReport,
    SmallNormReport,
};

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("invalid flow config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Init(#[from] InitError),
    #[error("non-finite {what} at step {step}")]
    NonFinite {
        what: &'static str,
        step: usize,
        /// Log up to the last finite state; `final_params` is that state.
        log: Box<TrajectoryLog>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StepMode {
    Fixed {
        eta: f64,
    },
    /// `η_t = min(cap, base / L(θ_t))`
    LossAdaptive {
        base: f64,
        cap: f64,
    },
}

impl StepMode {
    pub fn step(&self, loss: f64) -> f64 {
        match *self {
            StepMode::Fixed { eta } => eta,
            StepMode::LossAdaptive { base, cap } => {
                if loss > 0.0 {
                    (base / loss).min(cap)
                } else {
                    cap
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopConfig {
    #[serde(default)]
    pub loss_threshold: Option<f64>,
    /// Stop once `‖θ̂_t − θ̂_{t−Δ}‖_F` falls below this, with `Δ` counted in logged records.
    #[serde(default)]
    pub directional_stationarity_tol: Option<f64>,
    #[serde(default = "default_window")]
    pub stationarity_window: usize,
    #[serde(default)]
    pub max_wall_time_secs: Option<f64>,
}

fn default_window() -> usize {
    10
}

impl Default for StopConfig {
    fn default() -> Self {
        Self {
            loss_threshold: None,
            directional_stationarity_tol: None,
            stationarity_window: default_window(),
            max_wall_time_secs: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub step_mode: StepMode,
    pub max_steps: usize,
    pub log_every: usize,
    #[serde(default)]
    pub stop: StopConfig,
    #[serde(default)]
    pub subgrad_at_zero: f64,
    /// Initialization scale; enables the alignment residual columns.
    #[serde(default)]
    pub alignment_epsilon: Option<f64>,
    /// Record per-neuron diagnostics at every logged step.
    #[serde(default)]
    pub record_neurons: bool,
    /// Growth factor of the step gaps between post-separation snapshots.
    #[serde(default = "default_snapshot_ratio")]
    pub snapshot_ratio: f64,
}

fn default_snapshot_ratio() -> f64 {
    2.0
}

impl FlowConfig {
    pub fn new(step_mode: StepMode, max_steps: usize, log_every: usize) -> Self {
        Self {
            step_mode,
            max_steps,
            log_every,
            stop: StopConfig::default(),
            subgrad_at_zero: 0.0,
            alignment_epsilon: None,
            record_neurons: false,
            snapshot_ratio: default_snapshot_ratio(),
        }
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        let bad = |m: &str| Err(FlowError::InvalidConfig(m.to_string()));
        let pos = |x: f64| x.is_finite() && x > 0.0;
        match self.step_mode {
            StepMode::Fixed { eta } if !pos(eta) => return bad("step eta must be positive"),
            StepMode::LossAdaptive { base, cap } if !pos(base) || !pos(cap) => {
                return bad("adaptive base and cap must be positive")
            }
            _ => {}
        }
        if self.log_every == 0 {
            return bad("log_every must be positive");
        }
        if self.stop.loss_threshold.is_some_and(|t| !pos(t)) {
            return bad("loss_threshold must be positive");
        }
        if self.stop.directional_stationarity_tol.is_some_and(|t| !pos(t)) {
            return bad("directional_stationarity_tol must be positive");
        }
        if self.stop.directional_stationarity_tol.is_some() && self.stop.stationarity_window == 0 {
            return bad("stationarity_window must be positive");
        }
        if self.stop.max_wall_time_secs.is_some_and(|t| !pos(t)) {
            return bad("max_wall_time_secs must be positive");
        }
        if self.alignment_epsilon.is_some_and(|t| !pos(t)) {
            return bad("alignment_epsilon must be positive");
        }
        if !(self.snapshot_ratio.is_finite() && self.snapshot_ratio > 1.0) {
            return bad("snapshot_ratio must exceed 1");
        }
        if !self.subgrad_at_zero.is_finite() {
            return bad("subgrad_at_zero must be finite");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    LossThreshold,
    DirectionalStationarity,
    MaxWallTime,
    MaxSteps,
}

/// State before the update of its step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    /// Integrated time `Σ η` up to this step.
    pub time: f64,
    /// Step size applied after this record (0 at the final record).
    pub eta: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub param_norm: f64,
    pub max_w_norm_sq: f64,
    pub max_v_norm_sq: f64,
    /// `max_j |‖w_j‖² − ‖v_j‖²|`
    pub max_balance_gap: f64,
    pub max_output_norm: f64,
    pub separated: bool,
    pub separation_violations: usize,
    pub max_cross_class_feature_gram: f64,
    /// `|L − L_decomposed|`, only once separated.
    pub decomposition_error: Option<f64>,
    /// `‖θ̂_t − θ̂_{t−Δ}‖_F` over the stationarity window.
    pub direction_change: Option<f64>,
    pub alignment_max_residual: Option<f64>,
    pub alignment_bound: Option<f64>,
    pub alignment_in_regime: usize,
    /// Every in-regime neuron is within the bound.
    pub alignment_within_bound: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub neurons: Option<Vec<NeuronDiagnostics>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub step: usize,
    pub time: f64,
    pub params: NetParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationEvent {
    pub step: usize,
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub records: Vec<LogRecord>,
    pub partition: Vec<usize>,
    pub stop_reason: Option<StopReason>,
    pub steps: usize,
    pub time: f64,
    /// First logged step with the separation pattern.
    pub t_star: Option<SeparationEvent>,
    /// Logged steps after `T*` where the pattern failed.
    pub reverts: Vec<usize>,
    /// Geometrically spaced states after `T*`.
    pub snapshots: Vec<Snapshot>,
    pub final_params: NetParams,
}

impl TrajectoryLog {
    pub fn final_record(&self) -> Option<&LogRecord> {
        self.records.last()
    }

    /// Separation held from `T*` to the end.
    pub fn separation_persisted(&self) -> bool {
        self.t_star.is_some() && self.reverts.is_empty()
    }

    pub fn max_balance_gap(&self) -> f64 {
        self.records.iter().map(|r| r.max_balance_gap).fold(0.0, f64::max)
    }
}

struct Recorder<'a> {
    data: &'a Dataset,
    config: &'a FlowConfig,
    partition: Vec<usize>,
    class_means: Vec<nalgebra::DVector<f64>>,
    directions: Vec<NetParams>,
}

impl Recorder<'_> {
    fn record(
        &mut self,
        params: &NetParams,
        grads: &crate::model::Gradients,
        loss: f64,
        step: usize,
        time: f64,
    ) -> Result<LogRecord, FlowError> {
        let data = self.data;
        let w_sq = params.w_norms_sq();
        let v_sq = params.v_norms_sq();
        let gap = w_sq.iter().zip(&v_sq).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let sep = detect_separation(params, data, &self.partition);
        let decomposition_error = if sep.separated {
            Some((class_decomposed_loss(params, data, &self.partition)? - loss).abs())
        } else {
            None
        };
        let norm = params.norm();
        let direction_change = if self.config.stop.directional_stationarity_tol.is_some() && norm > 0.0 {
            let dir = params.scaled(1.0 / norm);
            let window = self.config.stop.stationarity_window;
            let change = (self.directions.len() >= window).then(|| {
                let old = &self.directions[self.directions.len() - window];
                let dw = &dir.w - &old.w;
                let dv = &dir.v - &old.v;
                (dw.norm_squared() + dv.norm_squared()).sqrt()
            });
            self.directions.push(dir);
            if self.directions.len() > window {
                self.directions.remove(0);
            }
            change
        } else {
            None
        };
        let (mut a_max, mut a_bound, mut in_regime, mut within) = (None, None, 0, None);
        if let Some(eps) = self.config.alignment_epsilon {
            let res = alignment_ode_residual(params, grads, data, eps, self.config.subgrad_at_zero)?;
            a_bound = Some(alignment_bound(eps, data, params.width()));
            let reg: Vec<_> = res.iter().filter(|r| r.in_regime).collect();
            in_regime = reg.len();
            a_max = reg
                .iter()
                .map(|r| r.residual.max(r.v_residual.unwrap_or(0.0)))
                .reduce(f64::max);
            within = Some(reg.iter().all(|r| r.within_bound));
        }
        let neurons = self
            .config
            .record_neurons
            .then(|| neuron_diagnostics(params, data, &self.class_means));
        Ok(LogRecord {
            step,
            time,
            eta: 0.0,
            loss,
            grad_norm: grads.norm(),
            param_norm: norm,
            max_w_norm_sq: w_sq.iter().copied().fold(0.0, f64::max),
            max_v_norm_sq: v_sq.iter().copied().fold(0.0, f64::max),
            max_balance_gap: gap,
            max_output_norm: max_output_norm(&params.outputs(data)),
            separated: sep.separated,
            separation_violations: sep.violations.len(),
            max_cross_class_feature_gram: sep.max_cross_class_feature_gram,
            decomposition_error,
            direction_change,
            alignment_max_residual: a_max,
            alignment_bound: a_bound,
            alignment_in_regime: in_regime,
            alignment_within_bound: within,
            neurons,
        })
    }
}

/// Runs `θ ← θ − η_t ∇L(θ)` from `params0`. The neuron partition defaults to
/// the one read off the initial output weights.
pub fn run(
    params0: &NetParams,
    data: &Dataset,
    partition: Option<&[usize]>,
    config: &FlowConfig,
) -> Result<TrajectoryLog, FlowError> {
    config.validate()?;
    params0.check_data(data)?;
    let k = data.num_classes();
    let partition = match partition {
        Some(p) => p.to_vec(),
        None => derive_partition(&params0.v, k)?,
    };
    check_partition(&partition, params0.width(), k)?;
    let mut rec = Recorder {
        data,
        config,
        partition,
        class_means: (0..k).map(|c| data.class_sum(c)).collect(),
        directions: Vec::new(),
    };
    let start = Instant::now();
    let mut log = TrajectoryLog {
        records: Vec::new(),
        partition: rec.partition.clone(),
        stop_reason: None,
        steps: 0,
        time: 0.0,
        t_star: None,
        reverts: Vec::new(),
        snapshots: Vec::new(),
        final_params: params0.clone(),
    };
    let mut params = params0.clone();
    let mut time = 0.0;
    let mut next_snapshot: Option<(usize, f64)> = None;
    let mut step = 0usize;
    loop {
        let (loss, grads) = loss_and_gradients(&params, data, config.subgrad_at_zero)?;
        if !loss.is_finite() || !grads.dw.iter().chain(grads.dv.iter()).all(|g| g.is_finite()) {
            log.steps = step;
            log.time = time;
            log.final_params = params;
            return Err(FlowError::NonFinite {
                what: "loss or gradient",
                step,
                log: Box::new(log),
            });
        }
        let mut stop = None;
        if config.stop.loss_threshold.is_some_and(|t| loss <= t) {
            stop = Some(StopReason::LossThreshold);
        } else if step >= config.max_steps {
            stop = Some(StopReason::MaxSteps);
        } else if config
            .stop
            .max_wall_time_secs
            .is_some_and(|t| start.elapsed().as_secs_f64() >= t)
        {
            stop = Some(StopReason::MaxWallTime);
        }
        let eta = config.step_mode.step(loss);
        if step.is_multiple_of(config.log_every) || stop.is_some() {
            let mut r = rec.record(&params, &grads, loss, step, time)?;
            if stop.is_none() {
                r.eta = eta;
            }
            if r.separated {
                if log.t_star.is_none() {
                    log.t_star = Some(SeparationEvent { step, time });
                    next_snapshot = Some((step, 1.0));
                }
            } else if log.t_star.is_some() {
                log.reverts.push(step);
            }
            if stop.is_none()
                && r.direction_change
                    .zip(config.stop.directional_stationarity_tol)
                    .is_some_and(|(c, tol)| c < tol)
            {
                stop = Some(StopReason::DirectionalStationarity);
                r.eta = 0.0;
            }
            log.records.push(r);
        }
        if let Some((at, gap)) = next_snapshot {
            if step >= at {
                log.snapshots.push(Snapshot {
                    step,
                    time,
                    params: params.clone(),
                });
                let g = gap * config.snapshot_ratio;
                next_snapshot = Some((step + gap.ceil() as usize, g));
            }
        }
        if let Some(reason) = stop {
            log.stop_reason = Some(reason);
            break;
        }
        params.axpy(-eta, &grads);
        time += eta;
        step += 1;
        if !params.is_finite() {
            log.steps = step - 1;
            log.time = time - eta;
            params.axpy(eta, &grads);
            log.final_params = params;
            return Err(FlowError::NonFinite {
                what: "parameters",
                step,
                log: Box::new(log),
            });
        }
    }
    log.steps = step;
    log.time = time;
    log.final_params = params;
    Ok(log)
}

pub const CSV_HEADER: &str = "step,time,eta,loss,grad_norm,param_norm,max_w_norm_sq,max_v_norm_sq,max_balance_gap,\
max_output_norm,separated,separation_violations,max_cross_class_feature_gram,decomposition_error,\
direction_change,alignment_max_residual,alignment_bound,alignment_in_regime,alignment_within_bound";

fn opt<T: std::fmt::Debug>(v: Option<T>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

/// One row per logged step, floats in shortest round-trip form.
pub fn write_trajectory_csv<W: Write>(log: &TrajectoryLog, mut out: W) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in &log.records {
        writeln!(
            out,
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{},{},{:?},{},{},{},{},{},{}",
            r.step,
            r.time,
            r.eta,
            r.loss,
            r.grad_norm,
            r.param_norm,
            r.max_w_norm_sq,
            r.max_v_norm_sq,
            r.max_balance_gap,
            r.max_output_norm,
            r.separated,
            r.separation_violations,
            r.max_cross_class_feature_gram,
            opt(r.decomposition_error),
            opt(r.direction_change),
            opt(r.alignment_max_residual),
            opt(r.alignment_bound),
            r.alignment_in_regime,
            opt(r.alignment_within_bound),
        )?;
    }
    Ok(())
}

/// Long-format per-neuron table: `step,neuron,w_norm_sq,v_norm_sq,balance_gap,v_sign,
/// active_counts,aggregate_alignment,label_alignment,class_cosines` with list
/// fields joined by `;`.
pub fn write_neuron_csv<W: Write>(log: &TrajectoryLog, mut out: W) -> std::io::Result<()> {
    writeln!(
        out,
        "step,neuron,w_norm_sq,v_norm_sq,balance_gap,v_sign,active_counts,aggregate_alignment,label_alignment,class_cosines"
    )?;
    let join = |xs: &[f64]| xs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(";");
    for r in &log.records {
        let Some(ns) = &r.neurons else { continue };
        for (j, n) in ns.iter().enumerate() {
            let counts = n
                .active_counts
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(";");
            writeln!(
                out,
                "{},{},{:?},{:?},{:?},{},{},{},{},{}",
                r.step,
                j,
                n.w_norm_sq,
                n.v_norm_sq,
                n.balance_gap,
                opt(n.v_sign),
                counts,
                join(&n.aggregate_alignment),
                join(&n.label_alignment),
                join(&n.class_cosines),
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LossKind;
    use nalgebra::DMatrix;

    fn antipodal() -> Dataset {
        Dataset::from_rows(&[vec![1.0, 0.5], vec![-1.0, -0.5]], vec![0, 1], 2).unwrap()
    }

    fn binary_init() -> NetParams {
        let w = DMatrix::from_row_slice(2, 2, &[0.3, -0.2, 0.1, -0.4]);
        let v = DMatrix::from_row_slice(1, 2, &[(0.1f64).sqrt(), -(0.2f64).sqrt()]);
        NetParams::new(w, v, LossKind::Logistic).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = FlowConfig::new(StepMode::Fixed { eta: 0.1 }, 10, 1);
        assert!(c.validate().is_ok());
        c.log_every = 0;
        assert!(c.validate().is_err());
        let c = FlowConfig::new(StepMode::Fixed { eta: -1.0 }, 10, 1);
        assert!(c.validate().is_err());
        let c = FlowConfig::new(StepMode::LossAdaptive { base: 1.0, cap: 0.0 }, 10, 1);
        assert!(c.validate().is_err());
    }

    #[test]
    fn adaptive_step_is_capped() {
        let m = StepMode::LossAdaptive { base: 0.5, cap: 2.0 };
        assert_eq!(m.step(1.0), 0.5);
        assert_eq!(m.step(0.1), 2.0);
        assert_eq!(m.step(0.0), 2.0);
    }

    #[test]
    fn loss_threshold_stops_and_records_final_state() {
        let mut c = FlowConfig::new(StepMode::Fixed { eta: 0.05 }, 100_000, 100);
        c.stop.loss_threshold = Some(0.1);
        let log = run(&binary_init(), &antipodal(), None, &c).unwrap();
        assert_eq!(log.stop_reason, Some(StopReason::LossThreshold));
        let last = log.final_record().unwrap();
        assert!(last.loss <= 0.1);
        assert_eq!(last.step, log.steps);
        assert_eq!(log.records[0].step, 0);
        assert_eq!(log.partition, vec![0, 1]);
    }

    #[test]
    fn max_steps_stop() {
        let c = FlowConfig::new(StepMode::Fixed { eta: 0.01 }, 7, 3);
        let log = run(&binary_init(), &antipodal(), None, &c).unwrap();
        assert_eq!(log.stop_reason, Some(StopReason::MaxSteps));
        let steps: Vec<_> = log.records.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 3, 6, 7]);
        assert!((log.time - 0.07).abs() < 1e-15);
    }

    #[test]
    fn directional_stationarity_stop() {
        let mut c = FlowConfig::new(StepMode::LossAdaptive { base: 0.5, cap: 1e3 }, 1_000_000, 10);
        c.stop.directional_stationarity_tol = Some(1e-3);
        c.stop.stationarity_window = 5;
        let log = run(&binary_init(), &antipodal(), None, &c).unwrap();
        assert_eq!(log.stop_reason, Some(StopReason::DirectionalStationarity));
        assert!(log.final_record().unwrap().direction_change.unwrap() < 1e-3);
    }

    #[test]
    fn divergence_is_reported_with_partial_log() {
        let c = FlowConfig::new(StepMode::Fixed { eta: 1e10 }, 100, 1);
        let mut big = binary_init().scaled(10.0);
        big.v.neg_mut();
        big.loss_kind = LossKind::Exponential;
        match run(&big, &antipodal(), None, &c) {
            Err(FlowError::NonFinite { log, .. }) => {
                assert!(log.final_params.is_finite());
                assert!(!log.records.is_empty());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn csv_has_one_row_per_record() {
        let c = FlowConfig::new(StepMode::Fixed { eta: 0.01 }, 20, 5);
        let log = run(&binary_init(), &antipodal(), None, &c).unwrap();
        let mut buf = Vec::new();
        write_trajectory_csv(&log, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), log.records.len() + 1);
        let cols = CSV_HEADER.split(',').count();
        assert!(text.lines().all(|l| l.split(',').count() == cols));
    }

    #[test]
    fn snapshots_are_geometric_after_separation() {
        let c = FlowConfig::new(StepMode::Fixed { eta: 0.05 }, 200, 1);
        let log = run(&binary_init(), &antipodal(), None, &c).unwrap();
        let t = log.t_star.as_ref().unwrap().step;
        let steps: Vec<_> = log.snapshots.iter().map(|s| s.step - t).collect();
        assert_eq!(&steps[..5], &[0, 1, 3, 7, 15]);
    }
}
