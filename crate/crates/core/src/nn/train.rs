use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, OptimizerState};
use super::unet::{ScorerModel, UNetConfig};
use crate::augment::{make_pair, uniform_target, AugmentConfig, CellDistribution};
use crate::error::{Error, Result};
use crate::roll::PianoRoll;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the newest batch in the running batch-norm statistics.
    pub bn_momentum: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            learning_rate: 0.001,
            bn_momentum: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ScorerModel,
    /// Mean loss per epoch, in order.
    pub loss_trace: Vec<f64>,
}

/// Initialize a model from `opts.seed` and train it on `corpus`.
pub fn train(
    corpus: &[PianoRoll],
    aug: &AugmentConfig,
    config: UNetConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let model = ScorerModel::new(config, &mut rng)?;
    train_model(model, corpus, aug, opts, &mut rng)
}

/// Continue training an existing model. Each epoch draws fresh augmented
/// pairs for every target, shuffles them and takes one Adam step per batch.
pub fn train_model(
    mut model: ScorerModel,
    corpus: &[PianoRoll],
    aug: &AugmentConfig,
    opts: &TrainOptions,
    rng: &mut ChaCha8Rng,
) -> Result<TrainOutcome> {
    if corpus.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    aug.validate()?;
    if opts.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut opt = OptimizerState::new(&model.params, opts.learning_rate);
    let mut loss_trace = Vec::with_capacity(opts.epochs);

    for epoch in 0..opts.epochs {
        let mut pairs: Vec<(PianoRoll, CellDistribution)> = Vec::new();
        for target in corpus {
            for _ in 0..aug.pairs_per_target {
                let pair = make_pair(target, aug, rng);
                if let Ok(dist) = uniform_target(&pair) {
                    pairs.push((pair.input, dist));
                }
            }
        }
        if pairs.is_empty() {
            return Err(Error::Config(format!(
                "epoch {}: every augmented pair has an empty support",
                epoch + 1
            )));
        }
        pairs.shuffle(rng);

        let mut total = 0.0;
        for chunk in pairs.chunks(opts.batch_size) {
            let batch: Vec<(&PianoRoll, &CellDistribution)> = chunk.iter().map(|(r, d)| (r, d)).collect();
            let (grads, loss, stats) = model.backward_batch(&batch, rng)?;
            adam_step(&mut model, &grads, &mut opt)?;
            model.update_running_stats(&stats, opts.bn_momentum);
            total += loss * chunk.len() as f64;
        }
        let mean = total / pairs.len() as f64;
        log::info!("epoch {} mean loss {mean:.6}", epoch + 1);
        loss_trace.push(mean);
    }
    Ok(TrainOutcome { model, loss_trace })
}

/// `epoch,mean_loss` rows, epochs counted from 1.
pub fn loss_trace_csv(trace: &[f64]) -> String {
    let mut s = String::from("epoch,mean_loss\n");
    for (i, l) in trace.iter().enumerate() {
        writeln!(s, "{},{}", i + 1, l).expect("writing to a String");
    }
    s
}
