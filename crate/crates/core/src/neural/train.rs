use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::data::{Dataset, Record, Split};
use super::loss::{mse_loss, physics_loss, LossGrad};
use super::mlp::Adam;
use super::model::{InitModel, Scheme};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub scheme: Scheme,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Weight of the MSE term in the semisupervised loss.
    pub data_weight: f64,
    pub hidden: Vec<usize>,
    /// Learning rate at the last epoch as a fraction of the initial one,
    /// reached along a cosine schedule.
    pub final_lr_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Supervised,
            learning_rate: 1e-3,
            epochs: 500,
            batch_size: 32,
            seed: 0,
            data_weight: 0.5,
            hidden: vec![64, 64],
            final_lr_fraction: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning_rate must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.data_weight) {
            return Err(Error::InvalidArgument(
                "data_weight must lie in [0, 1]".into(),
            ));
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return Err(Error::InvalidArgument(
                "final_lr_fraction must lie in (0, 1]".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::InvalidArgument(
                "hidden layer sizes must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean minibatch loss seen during the epoch.
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{}", e.epoch, e.loss);
        }
        s
    }
}

/// Loss of `scheme` on one batch. Semisupervised batches apply the data term
/// to their labeled members only.
pub fn scheme_loss(
    model: &InitModel,
    batch: &[&Record],
    scheme: Scheme,
    data_weight: f64,
) -> Result<LossGrad> {
    match scheme {
        Scheme::Supervised => mse_loss(model, batch),
        Scheme::Unsupervised => physics_loss(model, batch),
        Scheme::Semisupervised => {
            let physics = physics_loss(model, batch)?;
            let labeled: Vec<&Record> = batch
                .iter()
                .copied()
                .filter(|r| r.labels.is_some())
                .collect();
            if labeled.is_empty() {
                return Ok(physics.scaled(1.0 - data_weight));
            }
            let data = mse_loss(model, &labeled)?;
            Ok(data.blend(data_weight, &physics, 1.0 - data_weight))
        }
    }
}

fn lr_factor(epoch: usize, epochs: usize, last: f64) -> f64 {
    if epochs < 2 {
        return 1.0;
    }
    let t = epoch as f64 / (epochs - 1) as f64;
    last + (1.0 - last) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Training records used by a scheme.
pub fn training_records(dataset: &Dataset, scheme: Scheme) -> Vec<&Record> {
    dataset
        .split(Split::Train)
        .into_iter()
        .filter(|r| scheme != Scheme::Supervised || r.labels.is_some())
        .collect()
}

pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<(InitModel, TrainLog)> {
    config.validate()?;
    let records = training_records(dataset, config.scheme);
    if records.is_empty() {
        return Err(Error::InvalidArgument("no training records".into()));
    }
    if config.scheme.needs_labels() && !records.iter().any(|r| r.labels.is_some()) {
        return Err(Error::InvalidArgument(format!(
            "{} training needs labeled records",
            config.scheme
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (mean, std) = Dataset::feature_stats(&records);
    let mut model = InitModel::new(
        config.scheme,
        dataset.n_buses,
        &config.hidden,
        mean,
        std,
        &mut rng,
    )?;
    let mut opt = Adam::new(model.net().n_params(), config.learning_rate);
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut log = TrainLog::default();

    for epoch in 0..config.epochs {
        opt.learning_rate =
            config.learning_rate * lr_factor(epoch, config.epochs, config.final_lr_fraction);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Record> = chunk.iter().map(|&i| records[i]).collect();
            let lg = scheme_loss(&model, &batch, config.scheme, config.data_weight)?;
            if !lg.loss.is_finite() || lg.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    message: format!("{} loss became {}", config.scheme, lg.loss),
                });
            }
            total += lg.loss;
            batches += 1;
            opt.step(model.net_mut().params_mut(), &lg.grad);
        }
        log.epochs.push(EpochLog {
            epoch,
            loss: total / batches as f64,
        });
    }
    Ok((model, log))
}
