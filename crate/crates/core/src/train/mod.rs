//! Few-shot prompt tuning on a frozen backbone, and the evaluation protocols.

mod corollary;
mod eval;

pub use corollary::{corollary1_experiment, CorollaryConfig, CorollaryResult};
pub use eval::{
    accuracy, argmax, eval_closed, eval_cross_dataset, eval_domain_generalization, eval_open_world, harmonic_mean,
    mean_std, ClosedEval, CrossDatasetRecord, DomainRecord, FeatureModel, OpenWorldRecord, PromptedModel,
    ZeroShotModel,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{interactive_forward, PromptLearner};
use crate::backbone::Backbone;
use crate::data::{Dataset, LabeledExample};
use crate::tensor::{LrSchedule, Result, Sgd, Tape, TensorError, Var};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub schedule: LrSchedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch: 16,
            lr: 0.005,
            momentum: 0.9,
            schedule: LrSchedule::Cosine,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(TensorError::Config("train.epochs must be at least 1".into()));
        }
        if self.batch == 0 {
            return Err(TensorError::Config("train.batch must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(TensorError::Config("train.lr must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TensorError::Config("train.momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Classes a classifier chooses between, with their captions in the same order.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelSpace {
    pub classes: Vec<usize>,
    pub captions: Vec<Vec<usize>>,
}

impl LabelSpace {
    pub fn new(dataset: &Dataset, classes: &[usize]) -> Result<Self> {
        if classes.is_empty() {
            return Err(TensorError::Invalid {
                op: "label_space",
                reason: "empty label space".into(),
            });
        }
        let n = dataset.num_classes();
        if let Some(&c) = classes.iter().find(|&&c| c >= n) {
            return Err(TensorError::IndexOutOfRange {
                op: "label_space",
                index: c,
                limit: n,
            });
        }
        Ok(Self {
            classes: classes.to_vec(),
            captions: dataset.captions(classes),
        })
    }

    pub fn all(dataset: &Dataset) -> Self {
        let classes: Vec<usize> = (0..dataset.num_classes()).collect();
        Self {
            captions: dataset.captions(&classes),
            classes,
        }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn index_of(&self, class: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }

    fn targets(&self, examples: &[&LabeledExample]) -> Result<Vec<usize>> {
        examples
            .iter()
            .map(|e| {
                self.index_of(e.class).ok_or_else(|| TensorError::Invalid {
                    op: "label_space",
                    reason: format!("class {} is outside the label space", e.class),
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TuneLog {
    /// Mean minibatch loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Mean cross-entropy of `examples` against the label space.
pub fn batch_loss(
    tape: &mut Tape,
    backbone: &Backbone,
    learner: &PromptLearner,
    examples: &[&LabeledExample],
    space: &LabelSpace,
) -> Result<Var> {
    let targets = space.targets(examples)?;
    let images: Vec<_> = examples.iter().map(|e| &e.image).collect();
    let trace = interactive_forward(tape, backbone, learner, &images, &space.captions)?;
    tape.cross_entropy(trace.logits, &targets)
}

/// Full-set training loss without updating anything.
pub fn training_loss(
    backbone: &Backbone,
    learner: &PromptLearner,
    examples: &[LabeledExample],
    space: &LabelSpace,
) -> Result<f64> {
    let refs: Vec<&LabeledExample> = examples.iter().collect();
    let mut tape = Tape::new();
    let loss = batch_loss(&mut tape, backbone, learner, &refs, space)?;
    Ok(tape.value(loss).data()[0])
}

/// Minibatch momentum SGD over the learner's trainable parameters. The
/// backbone must already be frozen; its parameters never receive updates.
pub fn tune_prompts(
    backbone: &Backbone,
    learner: &mut PromptLearner,
    train: &[LabeledExample],
    space: &LabelSpace,
    cfg: &TrainConfig,
) -> Result<TuneLog> {
    cfg.validate()?;
    if !backbone.params.is_frozen() {
        return Err(TensorError::Config("prompt tuning needs a frozen backbone".into()));
    }
    if train.is_empty() {
        return Err(TensorError::Invalid {
            op: "tune_prompts",
            reason: "no training examples".into(),
        });
    }
    let ids = learner.trainable_ids();
    let mut opt = Sgd::new(&learner.params, cfg.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let batches_per_epoch = train.len().div_ceil(cfg.batch);
    let total = cfg.epochs * batches_per_epoch;
    let mut log = TuneLog::default();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<&LabeledExample> = chunk.iter().map(|&i| &train[i]).collect();
            let mut tape = Tape::new();
            let loss = batch_loss(&mut tape, backbone, learner, &batch, space)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(TensorError::Invalid {
                    op: "tune_prompts",
                    reason: format!("non-finite loss at step {}", log.steps),
                });
            }
            sum += value;
            let grads = tape.backward(loss)?;
            let lr = cfg.schedule.at(cfg.lr, log.steps, total);
            opt.step(&mut learner.params, &ids, &grads, lr)?;
            log.steps += 1;
        }
        log.epoch_losses.push(sum / batches_per_epoch as f64);
    }
    Ok(log)
}

/// Full-batch momentum SGD for `steps` steps; returns the full-set loss
/// before every step and after the last one.
pub fn refine_full_batch(
    backbone: &Backbone,
    learner: &mut PromptLearner,
    train: &[LabeledExample],
    space: &LabelSpace,
    steps: usize,
    lr: f64,
    momentum: f64,
) -> Result<Vec<f64>> {
    if !backbone.params.is_frozen() {
        return Err(TensorError::Config("prompt tuning needs a frozen backbone".into()));
    }
    let refs: Vec<&LabeledExample> = train.iter().collect();
    let ids = learner.trainable_ids();
    let mut opt = Sgd::new(&learner.params, momentum);
    let mut losses = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let mut tape = Tape::new();
        let loss = batch_loss(&mut tape, backbone, learner, &refs, space)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(TensorError::Invalid {
                op: "refine_full_batch",
                reason: format!("non-finite loss at step {step}"),
            });
        }
        losses.push(value);
        if step == steps {
            break;
        }
        let grads = tape.backward(loss)?;
        opt.step(&mut learner.params, &ids, &grads, lr)?;
    }
    Ok(losses)
}
