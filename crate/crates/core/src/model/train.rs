//! Full-parameter base-model training on a byte corpus.

use super::backward::train_forward_backward;
use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::numeric::Rng;
use crate::optim::{Optimizer, OptimizerConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub window: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            window: 256,
            seed: 0,
            optimizer: OptimizerConfig::adamw(3e-3),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean next-token cross entropy at every step, in order.
    pub step_losses: Vec<f64>,
}

impl TrainReport {
    pub fn first_loss(&self) -> f64 {
        self.step_losses.first().copied().unwrap_or(f64::NAN)
    }

    pub fn final_loss(&self) -> f64 {
        self.step_losses.last().copied().unwrap_or(f64::NAN)
    }
}

/// Train a model from seeded initialization on windows sampled from the
/// corpus documents. Batch size is one window per step. Divergence (a
/// non-finite loss) is an error, not something to clip over.
pub fn train_base_model(
    config: &ModelConfig,
    corpus: &[Vec<u32>],
    train: &TrainConfig,
) -> Result<(ModelParams, TrainReport)> {
    if corpus.iter().all(|doc| doc.len() < 2) {
        return Err(Error::EmptyInput("training corpus has no usable document"));
    }
    let mut params = ModelParams::init(config, train.seed)?;
    let mut rng = Rng::new(train.seed ^ 0x7261696e);
    let mut opt = Optimizer::new(train.optimizer);
    let mut report = TrainReport { step_losses: Vec::with_capacity(train.steps) };

    for step in 0..train.steps {
        let doc = loop {
            let d = &corpus[rng.below(corpus.len() as u64) as usize];
            if d.len() >= 2 {
                break d;
            }
        };
        let window = train.window.min(doc.len());
        let start = if doc.len() == window {
            0
        } else {
            rng.below((doc.len() - window) as u64 + 1) as usize
        };
        let slice = &doc[start..start + window];
        let (loss, mut grads) = train_forward_backward(&params, slice)?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Diverged { step });
        }
        opt.step(&mut params, &mut grads);
        report.step_losses.push(loss);
    }
    Ok((params, report))
}
