use serde::{Deserialize, Serialize};

use super::{refine_full_batch, training_loss, tune_prompts, LabelSpace, TrainConfig, TuneLog};
use crate::aggregation::{AggregationStrategy, PromptConfig, PromptLearner};
use crate::backbone::Backbone;
use crate::data::LabeledExample;
use crate::tensor::Result;

/// Continuation schedule for the warm-started gated arm.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct CorollaryConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
}

impl Default for CorollaryConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            lr: 0.02,
            momentum: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorollaryResult {
    /// Full-set training loss of the tuned independent prompts.
    pub loss_independent: f64,
    /// Gated arm before its first update.
    pub loss_bmip_step0: f64,
    pub loss_bmip_final: f64,
    /// Full-set loss of the gated arm before each step and after the last.
    pub bmip_losses: Vec<f64>,
    pub independent_log: TuneLog,
}

/// Arm A tunes independent prompts. Arm B copies them into a gated learner
/// whose gates sit at `w = 1` and keeps training on the full training set.
pub fn corollary1_experiment(
    backbone: &Backbone,
    prompt: &PromptConfig,
    train_cfg: &TrainConfig,
    cfg: &CorollaryConfig,
    train: &[LabeledExample],
    space: &LabelSpace,
    seed: u64,
) -> Result<CorollaryResult> {
    let arm_a_cfg = PromptConfig {
        aggregation: AggregationStrategy::Independent,
        ..prompt.clone()
    };
    let mut arm_a = PromptLearner::new(&backbone.config, arm_a_cfg, seed)?;
    let independent_log = tune_prompts(backbone, &mut arm_a, train, space, train_cfg)?;
    let loss_independent = training_loss(backbone, &arm_a, train, space)?;

    let arm_b_cfg = PromptConfig {
        aggregation: AggregationStrategy::Bmip,
        ..prompt.clone()
    };
    let mut arm_b = PromptLearner::new(&backbone.config, arm_b_cfg, seed)?;
    arm_b.copy_prompts_from(&arm_a)?;
    arm_b.saturate_gates();
    let bmip_losses = refine_full_batch(backbone, &mut arm_b, train, space, cfg.steps, cfg.lr, cfg.momentum)?;
    Ok(CorollaryResult {
        loss_independent,
        loss_bmip_step0: bmip_losses[0],
        loss_bmip_final: *bmip_losses.last().expect("at least one loss"),
        bmip_losses,
        independent_log,
    })
}
