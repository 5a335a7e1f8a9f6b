use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{loss, CostModel, LabelScaler, Sample, TrainingMeta};
use crate::error::{Error, Result};
use crate::models::Mode;
use crate::numerics::{adam_step, derive_seed, AdamConfig, Gradients, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub dropout: f64,
    pub seed: u64,
    pub folds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 100,
            patience: 20,
            dropout: 0.1,
            seed: 0,
            folds: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidInput(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::InvalidInput("batch size and max epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidInput(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.folds < 2 {
            return Err(Error::InvalidInput(format!("need at least 2 folds, got {}", self.folds)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Squared-error sum over the training split (dropout active).
    pub train_loss: f64,
    /// Squared-error sum over the validation split.
    pub valid_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid_loss: f64,
}

struct SampleResult {
    output: f64,
    grads: Gradients,
}

fn sample_step(model: &CostModel, sample: &Sample, target: f64, weight: f64, rate: f64, seed: u64) -> Result<SampleResult> {
    let mut tape = Tape::new(model.spec.precision);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mode = Mode::train(rate, &mut rng);
    let y = model.forward(&mut tape, &sample.graph, &mut mode)?;
    let t = tape.constant(Tensor::scalar(target));
    let d = tape.sub(y, t)?;
    let sq = tape.mul(d, d)?;
    let l = tape.scale(sq, weight)?;
    let grads = tape.backward(l)?;
    Ok(SampleResult {
        output: tape.value(y).data()[0],
        grads,
    })
}

/// Trains `model` in place with mini-batch Adam on the mean squared error of
/// each batch; keeps the parameters of the epoch with the lowest validation
/// loss. The label scaler is fitted to `train` only.
pub fn fit(model: &mut CostModel, train: &[Sample], valid: &[Sample], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::InvalidInput("training and validation splits must be non-empty".into()));
    }
    let train_labels: Vec<f64> = train.iter().map(|s| s.latency_ms).collect();
    let scaler = LabelScaler::fit(&train_labels)?;
    model.scaler = Some(scaler);
    let targets = train
        .iter()
        .map(|s| scaler.scale(s.latency_ms))
        .collect::<Result<Vec<_>>>()?;
    let valid_labels: Vec<f64> = valid.iter().map(|s| s.latency_ms).collect();
    let adam = AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    };

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;
    let mut since_best = 0;
    for epoch in 1..=cfg.max_epochs {
        let mut shuffle = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[epoch as u64]));
        order.shuffle(&mut shuffle);
        let mut outputs = vec![0.0; train.len()];
        for batch in order.chunks(cfg.batch_size) {
            let weight = 1.0 / batch.len() as f64;
            let results = {
                let m: &CostModel = model;
                batch
                    .par_iter()
                    .map(|&i| {
                        let seed = derive_seed(cfg.seed, &[epoch as u64, i as u64]);
                        sample_step(m, &train[i], targets[i], weight, cfg.dropout, seed)
                    })
                    .collect::<Result<Vec<_>>>()?
            };
            // Reduce in batch order so the sum does not depend on scheduling.
            for (&i, r) in batch.iter().zip(&results) {
                outputs[i] = r.output;
                model.store.accumulate(&r.grads);
            }
            adam_step(&mut model.store, &adam)?;
        }
        let train_loss = loss(&outputs, &train_labels, &scaler)?;
        let valid_out = predict_outputs(model, valid)?;
        let valid_loss = loss(&valid_out, &valid_labels, &scaler)?;
        if !valid_loss.is_finite() {
            return Err(Error::NonFinite(format!("validation loss at epoch {epoch}")));
        }
        log::debug!("epoch {epoch}: train {train_loss:.6} valid {valid_loss:.6}");
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            valid_loss,
        });
        if best.as_ref().is_none_or(|(b, _, _)| valid_loss < *b) {
            best = Some((valid_loss, epoch, model.store.snapshot()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        if since_best >= cfg.patience {
            break;
        }
    }
    let (best_valid_loss, best_epoch, snapshot) = best.expect("at least one epoch");
    model.store.restore(&snapshot);
    model.training = Some(TrainingMeta {
        seed: cfg.seed,
        epochs_run: epochs.len(),
        best_epoch,
    });
    Ok(TrainReport {
        epochs,
        best_epoch,
        best_valid_loss,
    })
}

fn predict_outputs(model: &CostModel, samples: &[Sample]) -> Result<Vec<f64>> {
    samples.par_iter().map(|s| model.predict_output(&s.graph)).collect()
}

/// Splits sample indices into `k` (train, test) pairs. Samples sharing a
/// query id always land in the same fold; folds differ by at most one query.
pub fn kfold(query_ids: &[String], k: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 folds, got {k}")));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, q) in query_ids.iter().enumerate() {
        groups.entry(q.as_str()).or_default().push(i);
    }
    if groups.len() < k {
        return Err(Error::InvalidInput(format!(
            "{} distinct queries cannot fill {k} folds",
            groups.len()
        )));
    }
    let mut groups: Vec<Vec<usize>> = groups.into_values().collect();
    groups.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut tests = vec![Vec::new(); k];
    for (g, members) in groups.into_iter().enumerate() {
        tests[g % k].extend(members);
    }
    Ok(tests
        .into_iter()
        .map(|mut test| {
            test.sort_unstable();
            let in_test: std::collections::HashSet<usize> = test.iter().copied().collect();
            let train = (0..query_ids.len()).filter(|i| !in_test.contains(i)).collect();
            (train, test)
        })
        .collect())
}
