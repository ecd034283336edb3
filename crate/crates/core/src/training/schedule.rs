//! Three-stage schedule:
//!
//! 1. time-invariant guidance, image embedding frozen
//! 2. time-invariant guidance, image embedding trained at `lr_img`
//! 3. target guidance with a fresh `W_c`, image embedding frozen again
//!
//! The first two stages use the target mode's transfer function. Each stage
//! starts with fresh optimizer moments.

use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamState};
use super::checkpoint::{Checkpoint, TrainMetadata};
use super::config::{ModelConfig, TrainConfig};
use super::objective::batch_objective;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{cond_seed, GuidanceMode, GuidanceVariant, ModelParams};
use crate::numerics::SeededRng;

const BATCH_SEED_SALT: u64 = 0x5EED_BA7C_0000_0001;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    /// 1-based, counted across stages.
    pub iteration: usize,
    pub stage: u8,
    /// Mean regularized loss of the minibatch.
    pub loss: f64,
}

/// Cycles through the examples in seeded random order, reshuffling after each
/// pass.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
    rng: SeededRng,
}

impl Batcher {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = SeededRng::new(seed);
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        Batcher { order, pos: 0, rng }
    }

    /// Returned indices are ascending, the order the gradient is reduced in.
    fn next(&mut self, size: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(size);
        for _ in 0..size {
            if self.pos == self.order.len() {
                self.rng.shuffle(&mut self.order);
                self.pos = 0;
            }
            batch.push(self.order[self.pos]);
            self.pos += 1;
        }
        batch.sort_unstable();
        batch
    }
}

pub(crate) fn stage_mode(stage: u8, target: GuidanceMode) -> GuidanceMode {
    if stage < 3 {
        GuidanceMode::new(GuidanceVariant::TimeInvariant, target.transfer)
    } else {
        target
    }
}

pub fn train(dataset: &Dataset, config: &TrainConfig, model: &ModelConfig, mode: GuidanceMode) -> Result<Checkpoint> {
    train_with_observer(dataset, config, model, mode, |_| {})
}

/// Like [`train`], calling `observe` after every iteration.
pub fn train_with_observer(
    dataset: &Dataset,
    config: &TrainConfig,
    model: &ModelConfig,
    mode: GuidanceMode,
    mut observe: impl FnMut(&LossRecord),
) -> Result<Checkpoint> {
    config.validate()?;
    mode.validate()?;
    if dataset.examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dims = model.dims(dataset.vocab.len(), dataset.features.dim())?;
    let with_tensor = mode.variant == GuidanceVariant::FullTensor;
    let mut params = ModelParams::init(dims, &model.init, with_tensor, config.seed)?;

    let pool = if config.threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(config.threads)
                .build()
                .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };

    let mut batcher = Batcher::new(dataset.examples.len(), config.seed ^ BATCH_SEED_SALT);
    let mut losses = Vec::with_capacity(config.iterations.iter().sum());
    let mut optimizer = None;
    for stage in 1u8..=3 {
        let stage_mode = stage_mode(stage, mode);
        if stage == 3 {
            params.init_cond(model.init.cond, cond_seed(config.seed))?;
        }
        let mut state = AdamState::new(&params);
        let freeze_image = stage != 2;
        for _ in 0..config.iterations[stage as usize - 1] {
            let batch = batcher.next(config.batch_size);
            let (loss, mut grads) = match &pool {
                Some(pool) => pool.install(|| batch_objective(&params, dataset, &batch, stage_mode, config.lambda, true)),
                None => batch_objective(&params, dataset, &batch, stage_mode, config.lambda, false),
            }?;
            let record = LossRecord {
                iteration: losses.len() + 1,
                stage,
                loss,
            };
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    stage,
                    iteration: record.iteration,
                    loss,
                });
            }
            if let Some(clip) = config.grad_clip {
                let norm = grads.squared_norm().sqrt();
                if norm > clip {
                    grads.scale(clip / norm);
                }
            }
            adam_step(&mut params, &grads, &mut state, config, freeze_image)?;
            observe(&record);
            losses.push(record);
        }
        optimizer = Some(state);
    }

    Ok(Checkpoint {
        params,
        mode,
        vocab: dataset.vocab.ordinary_words().to_vec(),
        metadata: TrainMetadata {
            train: config.clone(),
            model: model.clone(),
            losses,
        },
        optimizer,
    })
}

/// `iteration,stage,loss` with a header row.
pub fn loss_csv(records: &[LossRecord]) -> String {
    let mut out = String::from("iteration,stage,loss\n");
    for r in records {
        out.push_str(&format!("{},{},{}\n", r.iteration, r.stage, r.loss));
    }
    out
}
