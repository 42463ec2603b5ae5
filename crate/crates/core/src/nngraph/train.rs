use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{Batch, Labels, Network};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Forward/backward on M-bit rounded weights, update latent weights
    /// (straight-through estimator).
    pub quant_aware: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            lr: 0.1,
            batch_size: 32,
            quant_aware: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    /// Training-set accuracy (fraction) of the network used in the forward
    /// pass; `None` for regression targets.
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
}

impl TrainLog {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.accuracy)
    }
}

fn effective(net: &Network, quant_aware: bool) -> Network {
    if quant_aware {
        net.quantized_copy()
    } else {
        net.clone()
    }
}

fn accuracy_of(net: &Network, data: &Batch<'_>) -> Result<Option<f64>> {
    match data.labels {
        Labels::Classes(c) => Ok(Some(net.accuracy(data.inputs, c)?)),
        Labels::Values(_) => Ok(None),
    }
}

/// Minibatch SGD. Deterministic for a fixed seed; the layer scales are
/// refreshed from the final latent weights.
pub fn train_sgd(net: &mut Network, data: &Batch<'_>, cfg: &TrainConfig) -> Result<TrainLog> {
    if !(cfg.lr >= 0.0) || !cfg.lr.is_finite() {
        return Err(Error::arg(format!("learning rate must be finite and non-negative, got {}", cfg.lr)));
    }
    if cfg.batch_size == 0 {
        return Err(Error::arg("batch size must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let fwd = effective(net, cfg.quant_aware);
            let mut grad = vec![0.0; net.param_count()];
            let mut loss = 0.0;
            for &i in chunk {
                let (_, tape) = fwd.forward(&data.inputs[i])?;
                let (l, g) = fwd.gradient_from_tape(&tape, data.labels.get(i))?;
                loss += l;
                grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
            let n = chunk.len() as f64;
            loss /= n;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, step, loss });
            }
            grad.iter_mut().for_each(|g| *g /= n);
            net.apply_step(&grad, cfg.lr)?;
            if net.params().iter().any(|p| !p.is_finite()) {
                return Err(Error::Divergence { epoch, step, loss });
            }
            loss_sum += loss;
            steps += 1;
        }
        let accuracy = accuracy_of(&effective(net, cfg.quant_aware), data)?;
        log.epochs.push(EpochStats {
            epoch,
            loss: loss_sum / steps.max(1) as f64,
            accuracy,
        });
    }
    net.refresh_scales();
    Ok(log)
}
