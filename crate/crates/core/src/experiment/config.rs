//! TOML experiment configuration.

use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::flow::{FlowConfig, StepMode};
use crate::model::LossKind;

use super::ExperimentError;

pub const MNIST_DIR_ENV: &str = "NCFLOW_MNIST_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Master seed; every random stream of the run is derived from it.
    pub seed: u64,
    pub loss: LossKind,
    pub dataset: DatasetSpec,
    pub init: InitSpec,
    #[serde(default)]
    pub flow: Option<FlowConfig>,
    #[serde(default)]
    pub sgd: Option<SgdSpec>,
    #[serde(default)]
    pub verify: VerifySpec,
    #[serde(default)]
    pub output: OutputSpec,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Generate {
        num_classes: usize,
        dim: usize,
        points_per_class: usize,
        cone_half_angle: f64,
        norm_range: [f64; 2],
        #[serde(default)]
        max_rounds: Option<usize>,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        classes: Vec<u8>,
        max_per_class: usize,
        #[serde(default)]
        center: bool,
    },
    Csv {
        path: PathBuf,
        #[serde(default)]
        num_classes: Option<usize>,
    },
    Inline {
        points: Vec<Vec<f64>>,
        labels: Vec<usize>,
        num_classes: usize,
    },
}

impl DatasetSpec {
    /// Number of classes when it is known without loading data.
    pub fn declared_classes(&self) -> Option<usize> {
        match self {
            DatasetSpec::Generate { num_classes, .. } | DatasetSpec::Inline { num_classes, .. } => Some(*num_classes),
            DatasetSpec::Idx { classes, .. } => Some(classes.len()),
            DatasetSpec::Csv { num_classes, .. } => *num_classes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    RandomBalanced,
    DataSeeded,
    /// i.i.d. `N(0, std²)` entries, unbalanced.
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSpec {
    pub scheme: InitScheme,
    pub width: usize,
    /// Defaults to `1e-4/√h`. Unused by `gaussian`.
    #[serde(default)]
    pub epsilon: Option<f64>,
    /// Entry standard deviation for `gaussian`.
    #[serde(default)]
    pub std: Option<f64>,
    /// Redraw up to this many extra times until the initialization assumption holds.
    #[serde(default)]
    pub max_resamples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub subgrad_at_zero: f64,
    #[serde(default = "default_pca")]
    pub pca_components: usize,
}

fn default_pca() -> usize {
    3
}

/// Enabled checks and their tolerances. An absent tolerance disables the check.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySpec {
    #[serde(default)]
    pub require_separable: bool,
    #[serde(default)]
    pub require_strict_condition: bool,
    /// Assumption 3 (binary) or all semi-local inequalities (multi-class).
    #[serde(default)]
    pub require_init_assumption: bool,
    /// `T*` exists and the pattern never reverts.
    #[serde(default)]
    pub require_separation: bool,
    #[serde(default)]
    pub max_final_loss: Option<f64>,
    #[serde(default)]
    pub decomposition_tol: Option<f64>,
    #[serde(default)]
    pub rank1_tol: Option<f64>,
    #[serde(default)]
    pub cross_gram_max: Option<f64>,
    #[serde(default)]
    pub w_cosine_min: Option<f64>,
    #[serde(default)]
    pub v_cosine_min: Option<f64>,
    #[serde(default)]
    pub duality_tol: Option<f64>,
    #[serde(default)]
    pub norm_rel_tol: Option<f64>,
    #[serde(default)]
    pub kkt_stationarity_tol: Option<f64>,
    #[serde(default)]
    pub require_small_norm: bool,
    #[serde(default)]
    pub require_alignment_bound: bool,
    #[serde(default)]
    pub pca_explained_min: Option<f64>,
    /// `NC(final) ≤ factor · NC(reference epoch)` for NC1 and NC2.
    #[serde(default)]
    pub nc_decrease_factor: Option<f64>,
    #[serde(default = "default_reference_epoch")]
    pub nc_reference_epoch: usize,
}

fn default_reference_epoch() -> usize {
    10
}

impl VerifySpec {
    /// Whether the margin certificate and collapse report are needed.
    pub fn needs_collapse(&self) -> bool {
        self.rank1_tol.is_some()
            || self.w_cosine_min.is_some()
            || self.v_cosine_min.is_some()
            || self.duality_tol.is_some()
            || self.norm_rel_tol.is_some()
            || self.cross_gram_max.is_some()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    /// Write the per-neuron diagnostics table.
    #[serde(default)]
    pub neuron_table: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default)]
    pub seed: Option<Vec<u64>>,
    #[serde(default)]
    pub epsilon: Option<Vec<f64>>,
    #[serde(default)]
    pub cone_half_angle: Option<Vec<f64>>,
    #[serde(default)]
    pub step_mode: Option<Vec<StepMode>>,
    /// Stop each cell after the initialization checks.
    #[serde(default)]
    pub init_only: bool,
    /// Keep each cell's run directory.
    #[serde(default)]
    pub write_runs: bool,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    /// Parses the file and resolves relative data paths against its directory.
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExperimentError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.dataset {
            DatasetSpec::Idx { images, labels, .. } => {
                if let Some(dir) = std::env::var_os(MNIST_DIR_ENV) {
                    let dir = PathBuf::from(dir);
                    for p in [&mut *images, &mut *labels] {
                        if let Some(name) = p.file_name() {
                            *p = dir.join(name);
                        }
                    }
                } else {
                    fix(images);
                    fix(labels);
                }
            }
            DatasetSpec::Csv { path, .. } => fix(path),
            _ => {}
        }
        if let Some(d) = &mut self.output.dir {
            fix(d);
        }
    }

    /// Static checks that need no data.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad(format!("name {:?} must be a non-empty file name", self.name));
        }
        match (&self.flow, &self.sgd) {
            (Some(_), Some(_)) => return bad("configure exactly one of [flow] and [sgd]".into()),
            (None, None) => return bad("missing [flow] or [sgd] section".into()),
            (Some(f), None) => f.validate().map_err(|e| ExperimentError::Config(e.to_string()))?,
            (None, Some(s)) => {
                if s.epochs == 0 || s.batch_size == 0 || !(s.learning_rate > 0.0) || s.pca_components == 0 {
                    return bad("sgd epochs, batch_size, learning_rate and pca_components must be positive".into());
                }
                if self.loss.is_binary() {
                    return bad("the sgd mode trains a softmax classifier; use loss = \"cross_entropy\"".into());
                }
            }
        }
        if let Some(k) = self.dataset.declared_classes() {
            self.check_loss_classes(k)?;
        }
        if let DatasetSpec::Inline { points, labels, .. } = &self.dataset {
            if points.len() != labels.len() {
                return bad(format!("{} inline points but {} labels", points.len(), labels.len()));
            }
        }
        let i = &self.init;
        if i.width == 0 {
            return bad("init.width must be positive".into());
        }
        if i.epsilon.is_some_and(|e| !(e > 0.0 && e.is_finite())) {
            return bad("init.epsilon must be positive".into());
        }
        match (i.scheme, i.std) {
            (InitScheme::Gaussian, None) => return bad("init.std is required for the gaussian scheme".into()),
            (InitScheme::Gaussian, Some(s)) if !(s > 0.0 && s.is_finite()) => {
                return bad("init.std must be positive".into())
            }
            (InitScheme::DataSeeded, _) if self.loss.is_binary() => {
                return bad("data_seeded shapes use pseudo-labels; use loss = \"cross_entropy\"".into())
            }
            _ => {}
        }
        let v = &self.verify;
        for (name, tol) in [
            ("max_final_loss", v.max_final_loss),
            ("decomposition_tol", v.decomposition_tol),
            ("rank1_tol", v.rank1_tol),
            ("duality_tol", v.duality_tol),
            ("norm_rel_tol", v.norm_rel_tol),
            ("kkt_stationarity_tol", v.kkt_stationarity_tol),
            ("nc_decrease_factor", v.nc_decrease_factor),
        ] {
            if tol.is_some_and(|t| !(t > 0.0 && t.is_finite())) {
                return bad(format!("verify.{name} must be positive"));
            }
        }
        if v.cross_gram_max.is_some_and(|t| !(t >= 0.0)) {
            return bad("verify.cross_gram_max must be non-negative".into());
        }
        for (name, c) in [
            ("w_cosine_min", v.w_cosine_min),
            ("v_cosine_min", v.v_cosine_min),
            ("pca_explained_min", v.pca_explained_min),
        ] {
            if c.is_some_and(|c| !(c > 0.0 && c <= 1.0)) {
                return bad(format!("verify.{name} must lie in (0, 1]"));
            }
        }
        Ok(())
    }

    pub fn check_loss_classes(&self, k: usize) -> Result<(), ExperimentError> {
        if self.loss.is_binary() && k != 2 {
            return Err(ExperimentError::Config(format!(
                "loss {} needs 2 classes, the dataset has {k}",
                self.loss.name()
            )));
        }
        if !self.loss.is_binary() && k < 3 {
            return Err(ExperimentError::Config(format!(
                "cross_entropy expects K >= 3 classes; for K = {k} use a binary loss with ±1 labels"
            )));
        }
        Ok(())
    }

    pub fn epsilon(&self) -> f64 {
        self.init
            .epsilon
            .unwrap_or_else(|| crate::init::default_epsilon(self.init.width))
    }
}

pub const STREAM_DATASET: u64 = 1;
pub const STREAM_INIT: u64 = 2;
pub const STREAM_SGD: u64 = 3;

/// Independent 64-bit seed for `stream`, derived from the master seed.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng.next_u64()
}
