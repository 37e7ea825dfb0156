use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::{Adam, AdamConfig, Network};
use crate::error::{Error, Result};
use crate::keyvalue::KeyValues;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation-accuracy improvement before stopping.
    pub patience: usize,
    pub val_fraction: f64,
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            batch_size: 32,
            max_epochs: 5,
            patience: 2,
            val_fraction: 0.2,
            shuffle_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "validation fraction must lie in (0, 1), got {}",
                self.val_fraction
            )));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::InvalidArgument(
                "batch size and epoch count must be positive".into(),
            ));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::InvalidArgument(
                "learning rate must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.push("optimizer", "adam")
            .push("lr", self.adam.lr)
            .push("beta1", self.adam.beta1)
            .push("beta2", self.adam.beta2)
            .push("epsilon", self.adam.eps)
            .push("loss", "sparse_categorical_crossentropy")
            .push("batch_size", self.batch_size)
            .push("max_epochs", self.max_epochs)
            .push("patience", self.patience)
            .push("checkpoint_metric", "val_accuracy")
            .push("val_fraction", self.val_fraction)
            .push("shuffle_seed", self.shuffle_seed);
        kv
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Running accuracy over the epoch's minibatches, dropout active.
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights of the best validation-accuracy epoch.
    pub network: Network<f32>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stratified split: `round(n_label * fraction)` of each label (at least one,
/// never all) goes to validation.
pub fn stratified_split(
    labels: &[usize],
    fraction: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> (Vec<usize>, Vec<usize>) {
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(rng);
        let n = idx.len();
        let n_val = if n >= 2 {
            ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
        } else {
            0
        };
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Fraction of `indices` classified correctly (argmax, inference mode).
pub fn accuracy(net: &Network<f32>, data: &[(Vec<f32>, usize)], indices: &[usize]) -> Result<f64> {
    let (acc, _) = evaluate(net, data, indices)?;
    Ok(acc)
}

fn evaluate(
    net: &Network<f32>,
    data: &[(Vec<f32>, usize)],
    indices: &[usize],
) -> Result<(f64, f64)> {
    if indices.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let results: Vec<[f64; 2]> = indices
        .par_iter()
        .map(|&i| net.predict(&data[i].0))
        .collect::<Result<_>>()?;
    let mut correct = 0usize;
    let mut loss = 0.0;
    for (&i, probs) in indices.iter().zip(&results) {
        let label = data[i].1;
        if predicted(probs) == label {
            correct += 1;
        }
        loss -= probs[label].max(1e-12).ln();
    }
    let n = indices.len() as f64;
    Ok((correct as f64 / n, loss / n))
}

fn predicted(probs: &[f64; 2]) -> usize {
    usize::from(probs[1] > probs[0])
}

pub fn train(
    net: Network<f32>,
    data: &[(Vec<f32>, usize)],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with_progress(net, data, config, |_| {})
}

/// Minibatch Adam with early stopping on validation accuracy. Per-sample
/// gradients are computed in parallel and summed in sample order, so results
/// do not depend on the thread count.
pub fn train_with_progress<F: FnMut(&EpochRecord)>(
    mut net: Network<f32>,
    data: &[(Vec<f32>, usize)],
    config: &TrainConfig,
    mut progress: F,
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::DatasetTooSmall("no samples".into()));
    }
    let classes = net.architecture().classes;
    if let Some((_, bad)) = data.iter().find(|(_, l)| *l >= classes) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range")));
    }
    let labels: Vec<usize> = data.iter().map(|(_, l)| *l).collect();
    if !(0..classes).all(|c| labels.contains(&c)) {
        return Err(Error::DatasetTooSmall("every class must be present".into()));
    }
    let mut rng = crate::seeded_rng(config.shuffle_seed);
    let (train_indices, val_indices) = stratified_split(&labels, config.val_fraction, &mut rng);
    if train_indices.len() < config.batch_size {
        return Err(Error::DatasetTooSmall(format!(
            "{} training samples cannot fill a batch of {}",
            train_indices.len(),
            config.batch_size
        )));
    }

    let mut adam = Adam::new(config.adam, net.param_count());
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Vec<f32>)> = None;
    let mut stale = 0usize;
    let mut order = train_indices.clone();
    let mut grad_sum = vec![0.0f64; net.param_count()];

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(config.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let step = adam.steps_taken();
            let net_ref = &net;
            let results = batch
                .par_iter()
                .enumerate()
                .map(|(pos, &i)| {
                    let seed =
                        mix(config.shuffle_seed ^ mix(step.wrapping_mul(1 << 20) + pos as u64));
                    net_ref.sample_grad(&data[i].0, data[i].1, Some(seed), scale)
                })
                .collect::<Result<Vec<_>>>()?;
            grad_sum.iter_mut().for_each(|g| *g = 0.0);
            for (r, &i) in results.iter().zip(batch) {
                loss_sum += r.loss;
                if predicted(&r.probs) == data[i].1 {
                    correct += 1;
                }
                for (acc, &g) in grad_sum.iter_mut().zip(&r.grad) {
                    *acc += g as f64;
                }
            }
            if grad_sum.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!("gradient in epoch {epoch}")));
            }
            adam.step(net.params_mut(), &grad_sum);
        }
        let n = order.len() as f64;
        let (val_accuracy, val_loss) = evaluate(&net, data, &val_indices)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / n,
            train_accuracy: correct as f64 / n,
            val_loss,
            val_accuracy,
        };
        progress(&record);
        history.push(record);

        let improved = best.as_ref().is_none_or(|(acc, _, _)| val_accuracy > *acc);
        if improved {
            best = Some((val_accuracy, epoch, net.params().to_vec()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }

    let (_, best_epoch, params) = best.expect("at least one epoch ran");
    net.params_mut().copy_from_slice(&params);
    Ok(TrainOutcome {
        network: net,
        history,
        best_epoch,
        train_indices,
        val_indices,
    })
}
