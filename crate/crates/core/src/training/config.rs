use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::model::{InitConfig, ModelDims};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight decay on the image embedding.
    pub lambda: f64,
    pub lr_lm: f64,
    /// Learning rate of the image embedding while it is unfrozen.
    pub lr_img: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    /// Iterations of stages 1, 2 and 3.
    pub iterations: [usize; 3],
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Worker threads for per-example gradients. 1 runs inline.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1e-3,
            lr_lm: 4e-4,
            lr_img: 1e-5,
            adam_beta1: 0.8,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 16,
            iterations: [1500, 500, 2500],
            grad_clip: None,
            seed: 1234,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.lambda >= 0.0 && self.lambda.is_finite(), "lambda must be >= 0, got {}", self.lambda);
        for (name, v) in [("lr_lm", self.lr_lm), ("lr_img", self.lr_img), ("adam_eps", self.adam_eps)] {
            ensure!(v > 0.0 && v.is_finite(), "{name} must be positive, got {v}");
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            ensure!(v > 0.0 && v < 1.0, "{name} must lie in (0, 1), got {v}");
        }
        ensure!(self.batch_size > 0, "batch_size must be positive");
        ensure!(self.threads > 0, "threads must be positive");
        if let Some(c) = self.grad_clip {
            ensure!(c > 0.0 && c.is_finite(), "grad_clip must be positive, got {c}");
        }
        Ok(())
    }
}

/// Sizes of the learned layers and their initialization. Vocabulary and raw
/// feature sizes come from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed: usize,
    pub hidden: usize,
    /// Embedded image size, which is also the guidance size.
    pub image: usize,
    pub init: InitConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed: 16,
            hidden: 32,
            image: 16,
            init: InitConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn dims(&self, vocab: usize, raw: usize) -> Result<ModelDims> {
        let dims = ModelDims {
            vocab,
            embed: self.embed,
            hidden: self.hidden,
            image: self.image,
            raw,
        };
        dims.validate()?;
        Ok(dims)
    }
}
