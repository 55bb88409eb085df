//! Minibatch SGD with per-epoch collapse metrics. Approximate by design: the
//! gradient-flow results are only checked against full-batch runs.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::collapse::{feature_pca_summary, nc_metrics, CollapseError, NcMetrics};
use crate::dataset::Dataset;
use crate::model::{batch_loss_and_gradients, loss, ModelError, NetParams};

use super::FlowError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Seeds the per-epoch shuffles.
    pub seed: u64,
    #[serde(default)]
    pub subgrad_at_zero: f64,
    #[serde(default = "default_components")]
    pub pca_components: usize,
}

fn default_components() -> usize {
    3
}

impl SgdConfig {
    pub fn validate(&self) -> Result<(), FlowError> {
        let bad = |m: &str| Err(FlowError::InvalidConfig(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.pca_components == 0 {
            return bad("pca_components must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 is the initialization.
    pub epoch: usize,
    /// Mean training loss.
    pub loss: f64,
    pub accuracy: f64,
    pub nc: NcMetrics,
    pub pca_ratios: Vec<f64>,
    pub pca_explained: f64,
    pub pca_relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdLog {
    pub epochs: Vec<EpochRecord>,
    pub final_params: NetParams,
}

impl SgdLog {
    pub fn epoch(&self, e: usize) -> Option<&EpochRecord> {
        self.epochs.iter().find(|r| r.epoch == e)
    }
}

fn evaluate(params: &NetParams, data: &Dataset, epoch: usize, r: usize) -> Result<EpochRecord, FlowError> {
    let features = params.features(data);
    let outputs = &params.v * &features;
    let correct = outputs
        .column_iter()
        .zip(data.labels())
        .filter(|(col, &l)| col.argmax().0 == l)
        .count();
    let nc = nc_metrics(&features, data.labels(), data.num_classes(), &params.v).map_err(|e| match e {
        CollapseError::Model(m) => FlowError::Model(m),
        other => FlowError::InvalidConfig(other.to_string()),
    })?;
    let pca = feature_pca_summary(&features, r);
    Ok(EpochRecord {
        epoch,
        loss: loss(params, data)? / data.len() as f64,
        accuracy: correct as f64 / data.len() as f64,
        nc,
        pca_ratios: pca.ratios,
        pca_explained: pca.explained,
        pca_relative_error: pca.relative_error,
    })
}

/// Shuffled minibatch SGD on the mean batch loss; metrics on the full
/// training set after every epoch. Multi-class only (softmax classifier).
pub fn train_sgd(params0: &NetParams, data: &Dataset, config: &SgdConfig) -> Result<SgdLog, FlowError> {
    config.validate()?;
    params0.check_data(data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = params0.clone();
    let mut epochs = vec![evaluate(&params, data, 0, config.pca_components)?];
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let (l, g) = batch_loss_and_gradients(&params, data, chunk, config.subgrad_at_zero)?;
            let eta = config.learning_rate / chunk.len() as f64;
            params.axpy(-eta, &g);
            step += 1;
            if !l.is_finite() || !params.is_finite() {
                params.axpy(eta, &g);
                return Err(FlowError::NonFinite {
                    what: "sgd iterate",
                    step,
                    log: Box::new(super::TrajectoryLog {
                        records: Vec::new(),
                        partition: Vec::new(),
                        stop_reason: None,
                        steps: step - 1,
                        time: 0.0,
                        t_star: None,
                        reverts: Vec::new(),
                        snapshots: Vec::new(),
                        final_params: params,
                    }),
                });
            }
        }
        epochs.push(evaluate(&params, data, epoch, config.pca_components)?);
    }
    Ok(SgdLog {
        epochs,
        final_params: params,
    })
}

/// Width-`h` Gaussian weights with the given standard deviation.
pub fn gaussian_init(
    input_dim: usize,
    output_dim: usize,
    width: usize,
    std: f64,
    loss_kind: crate::model::LossKind,
    seed: u64,
) -> Result<NetParams, ModelError> {
    use rand::Rng;
    use rand_distr::StandardNormal;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = DMatrix::from_fn(input_dim, width, |_, _| std * rng.sample::<f64, _>(StandardNormal));
    let v = DMatrix::from_fn(output_dim, width, |_, _| std * rng.sample::<f64, _>(StandardNormal));
    NetParams::new(w, v, loss_kind)
}

pub const NC_SERIES_HEADER: &str = "epoch,metric,value";

/// Long-format series: `loss`, `accuracy`, `nc1`, `nc2`, `nc3`, `pca_explained`,
/// `pca_ratio_<r>` per epoch.
pub fn write_nc_series<W: std::io::Write>(log: &SgdLog, mut out: W) -> std::io::Result<()> {
    writeln!(out, "{NC_SERIES_HEADER}")?;
    for r in &log.epochs {
        let mut row = |m: &str, v: f64| writeln!(out, "{},{},{:?}", r.epoch, m, v);
        row("loss", r.loss)?;
        row("accuracy", r.accuracy)?;
        row("nc1", r.nc.nc1.unwrap_or(f64::NAN))?;
        row("nc2", r.nc.nc2)?;
        row("nc3", r.nc.nc3)?;
        row("pca_explained", r.pca_explained)?;
        for (c, v) in r.pca_ratios.iter().enumerate() {
            row(&format!("pca_ratio_{}", c + 1), *v)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_separable, GeneratorConfig};
    use crate::model::LossKind;

    #[test]
    fn sgd_reduces_loss_and_records_every_epoch() {
        let data = generate_separable(&GeneratorConfig::new(3, 8, 20, 0.4, [0.8, 1.2], 1)).unwrap();
        let p = gaussian_init(8, 3, 12, 1e-2, LossKind::CrossEntropy, 2).unwrap();
        let cfg = SgdConfig {
            epochs: 30,
            batch_size: 16,
            learning_rate: 0.5,
            seed: 3,
            subgrad_at_zero: 0.0,
            pca_components: 3,
        };
        let log = train_sgd(&p, &data, &cfg).unwrap();
        assert_eq!(log.epochs.len(), 31);
        assert!(log.epochs[30].loss < 0.5 * log.epochs[0].loss);
        assert_eq!(log.epoch(30).unwrap().accuracy, 1.0);
        let mut buf = Vec::new();
        write_nc_series(&log, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + 31 * 9);
    }

    #[test]
    fn sgd_is_deterministic() {
        let data = generate_separable(&GeneratorConfig::new(3, 5, 6, 0.4, [0.8, 1.2], 9)).unwrap();
        let p = gaussian_init(5, 3, 6, 1e-2, LossKind::CrossEntropy, 2).unwrap();
        let cfg = SgdConfig {
            epochs: 3,
            batch_size: 4,
            learning_rate: 0.1,
            seed: 7,
            subgrad_at_zero: 0.0,
            pca_components: 2,
        };
        assert_eq!(train_sgd(&p, &data, &cfg).unwrap(), train_sgd(&p, &data, &cfg).unwrap());
    }
}
