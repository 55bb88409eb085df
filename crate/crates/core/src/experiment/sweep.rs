//! Parameter grids over independent runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::flow::StepMode;

use super::{execute, write_run, DatasetSpec, ExperimentConfig, ExperimentError, RunStatus, SweepSpec};

pub const SUMMARY_FILE: &str = "summary.csv";
pub const AGGREGATE_FILE: &str = "aggregate.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub index: usize,
    pub seed: u64,
    pub epsilon: Option<f64>,
    pub cone_half_angle: Option<f64>,
    pub step_mode: Option<StepMode>,
}

impl SweepCell {
    /// The base config with this cell's overrides.
    pub fn apply(&self, base: &ExperimentConfig) -> Result<ExperimentConfig, ExperimentError> {
        let mut c = base.clone();
        c.seed = self.seed;
        c.sweep = None;
        c.name = format!("{}-cell{:04}", base.name, self.index);
        if let Some(e) = self.epsilon {
            c.init.epsilon = Some(e);
        }
        if let Some(a) = self.cone_half_angle {
            match &mut c.dataset {
                DatasetSpec::Generate { cone_half_angle, .. } => *cone_half_angle = a,
                _ => {
                    return Err(ExperimentError::Config(
                        "cone_half_angle sweeps need a generated dataset".into(),
                    ))
                }
            }
        }
        if let Some(m) = self.step_mode {
            match &mut c.flow {
                Some(f) => f.step_mode = m,
                None => return Err(ExperimentError::Config("step_mode sweeps need a [flow] section".into())),
            }
        }
        Ok(c)
    }
}

fn axis<T: Clone>(v: &Option<Vec<T>>) -> Vec<Option<T>> {
    match v {
        Some(xs) => xs.iter().cloned().map(Some).collect(),
        None => vec![None],
    }
}

/// Cartesian product of the given axes; no axes means no cells.
pub fn sweep_cells(spec: &SweepSpec, base_seed: u64) -> Vec<SweepCell> {
    if spec.seed.is_none() && spec.epsilon.is_none() && spec.cone_half_angle.is_none() && spec.step_mode.is_none() {
        return Vec::new();
    }
    let mut cells = Vec::new();
    for seed in axis(&spec.seed) {
        for eps in axis(&spec.epsilon) {
            for angle in axis(&spec.cone_half_angle) {
                for mode in axis(&spec.step_mode) {
                    cells.push(SweepCell {
                        index: cells.len(),
                        seed: seed.unwrap_or(base_seed),
                        epsilon: eps,
                        cone_half_angle: angle,
                        step_mode: mode,
                    });
                }
            }
        }
    }
    cells
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: SweepCell,
    pub status: RunStatus,
    pub exit_code: i32,
    pub reason: Option<String>,
    pub checks_passed: usize,
    pub checks_total: usize,
    /// Check values plus run metrics, by name.
    pub metrics: BTreeMap<String, f64>,
    pub check_passed: BTreeMap<String, bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub metric: String,
    pub count: usize,
    /// Only for checks.
    pub pass_rate: Option<f64>,
    pub min: f64,
    pub q10: f64,
    pub median: f64,
    pub q90: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub cells: Vec<CellResult>,
    pub aggregates: Vec<Aggregate>,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn run_cell(base: &ExperimentConfig, spec: &SweepSpec, cell: &SweepCell, out: Option<&Path>) -> CellResult {
    let (status, reason, manifest) = match cell.apply(base) {
        Err(e) => (RunStatus::ConfigError, Some(e.to_string()), None),
        Ok(cfg) => {
            let mut o = execute(&cfg, spec.init_only);
            if let (true, Some(dir)) = (spec.write_runs, out) {
                if let Err(e) = write_run(&mut o, &dir.join(format!("cell-{:04}", cell.index))) {
                    log::warn!("cell {}: {e}", cell.index);
                }
            }
            (o.manifest.status, o.manifest.reason.clone(), Some(o.manifest))
        }
    };
    let mut metrics = BTreeMap::new();
    let mut check_passed = BTreeMap::new();
    let (mut passed, mut total) = (0, 0);
    if let Some(m) = &manifest {
        for c in &m.checks {
            metrics.insert(format!("check.{}", c.name), c.value);
            check_passed.insert(format!("check.{}", c.name), c.passed);
            total += 1;
            passed += usize::from(c.passed);
        }
        if let Some(i) = &m.init {
            if let Some(ok) = i.assumption_satisfied {
                metrics.insert("init_assumption".into(), f64::from(u8::from(ok)));
            }
        }
        if let Some(f) = &m.flow {
            metrics.insert("final_loss".into(), f.final_loss);
            metrics.insert("steps".into(), f.steps as f64);
            if let Some(s) = &f.small_norm {
                metrics.insert("small_norm_w_margin".into(), s.w_norm_sq_bound / s.max_w_norm_sq);
                metrics.insert("small_norm_output_margin".into(), s.output_bound / s.max_output_norm);
            }
            if let Some(a) = &f.alignment {
                metrics.insert("alignment_max_ratio".into(), a.max_ratio);
            }
        }
    }
    CellResult {
        cell: cell.clone(),
        status,
        exit_code: status.exit_code(),
        reason,
        checks_passed: passed,
        checks_total: total,
        metrics,
        check_passed,
    }
}

fn aggregate(cells: &[CellResult]) -> Vec<Aggregate> {
    let mut by: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for c in cells {
        for (k, v) in &c.metrics {
            by.entry(k).or_default().push(*v);
        }
    }
    by.into_iter()
        .map(|(name, vals)| {
            let mut sorted: Vec<f64> = vals.iter().copied().filter(|v| !v.is_nan()).collect();
            sorted.sort_by(f64::total_cmp);
            let pass_rate = name.starts_with("check.").then(|| {
                let ok = cells.iter().filter(|c| c.check_passed.get(name) == Some(&true)).count();
                ok as f64 / vals.len() as f64
            });
            Aggregate {
                metric: name.to_string(),
                count: vals.len(),
                pass_rate,
                min: sorted.first().copied().unwrap_or(f64::NAN),
                q10: quantile(&sorted, 0.1),
                median: quantile(&sorted, 0.5),
                q90: quantile(&sorted, 0.9),
                max: sorted.last().copied().unwrap_or(f64::NAN),
            }
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

fn step_mode_label(m: Option<StepMode>) -> String {
    match m {
        None => String::new(),
        Some(StepMode::Fixed { eta }) => format!("fixed:{eta:?}"),
        Some(StepMode::LossAdaptive { base, cap }) => format!("loss_adaptive:{base:?}:{cap:?}"),
    }
}

pub fn summary_csv(s: &SweepSummary) -> String {
    let names: Vec<&String> = {
        let mut set = std::collections::BTreeSet::new();
        s.cells.iter().flat_map(|c| c.metrics.keys()).for_each(|k| {
            set.insert(k);
        });
        set.into_iter().collect()
    };
    let mut out =
        String::from("cell,seed,epsilon,cone_half_angle,step_mode,status,exit_code,checks_passed,checks_total");
    for n in &names {
        let _ = write!(out, ",{n}");
    }
    out.push('\n');
    for c in &s.cells {
        let _ = write!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            c.cell.index,
            c.cell.seed,
            fmt_opt(c.cell.epsilon),
            fmt_opt(c.cell.cone_half_angle),
            step_mode_label(c.cell.step_mode),
            serde_json::to_value(c.status)
                .ok()
                .and_then(|v| v.as_str().map(String::from))
                .unwrap_or_default(),
            c.exit_code,
            c.checks_passed,
            c.checks_total
        );
        for n in &names {
            let _ = write!(out, ",{}", fmt_opt(c.metrics.get(*n).copied()));
        }
        out.push('\n');
    }
    out
}

pub fn aggregate_csv(s: &SweepSummary) -> String {
    let mut out = String::from("metric,count,pass_rate,min,q10,median,q90,max\n");
    for a in &s.aggregates {
        let _ = writeln!(
            out,
            "{},{},{},{:?},{:?},{:?},{:?},{:?}",
            a.metric,
            a.count,
            fmt_opt(a.pass_rate),
            a.min,
            a.q10,
            a.median,
            a.q90,
            a.max
        );
    }
    out
}

/// Runs every cell (in parallel on `jobs` threads, 0 = all cores). Cell
/// failures are recorded and do not stop the sweep.
pub fn run_sweep(
    base: &ExperimentConfig,
    spec: &SweepSpec,
    out: Option<&Path>,
    jobs: usize,
) -> Result<SweepSummary, ExperimentError> {
    let cells = sweep_cells(spec, base.seed);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| ExperimentError::Config(format!("thread pool: {e}")))?;
    let results: Vec<CellResult> = pool.install(|| cells.par_iter().map(|c| run_cell(base, spec, c, out)).collect());
    let summary = SweepSummary {
        aggregates: aggregate(&results),
        cells: results,
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| ExperimentError::Data(format!("{}: {e}", dir.display())))?;
        for (name, text) in [
            (SUMMARY_FILE, summary_csv(&summary)),
            (AGGREGATE_FILE, aggregate_csv(&summary)),
        ] {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| ExperimentError::Data(format!("{}: {e}", p.display())))?;
        }
    }
    Ok(summary)
}
