use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Backbone, Modality};
use crate::data::{class_position, LabeledExample};
use crate::tensor::{cosine_lr, Adam, Result, Tape, TensorError, Var};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    /// Image/caption pairs per step; every pair in a batch has a distinct class.
    pub batch: usize,
    pub lr: f64,
    /// Pairs generated per class for the pretraining corpus.
    pub per_class: usize,
    /// Visual variance of the pretraining corpus; lower than the downstream
    /// data so that the downstream task carries a domain gap.
    pub visual_variance: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch: 10,
            lr: 2e-3,
            per_class: 64,
            visual_variance: 0.3,
            seed: 11,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub losses: Vec<f64>,
}

/// Symmetric in-batch cross-entropy over the `B × B` similarity matrix.
pub fn contrastive_loss(tape: &mut Tape, backbone: &Backbone, batch: &[&LabeledExample]) -> Result<Var> {
    if batch.len() < 2 {
        return Err(TensorError::Invalid {
            op: "contrastive_loss",
            reason: "a contrastive batch needs at least two pairs".into(),
        });
    }
    let mut img_feats = Vec::with_capacity(batch.len());
    let mut txt_feats = Vec::with_capacity(batch.len());
    for ex in batch {
        let tokens = backbone.embed_image_tokens(tape, &ex.image)?;
        let out = backbone.plain_forward(tape, Modality::Vision, tokens)?;
        img_feats.push(backbone.image_feature(tape, out)?);

        let words = backbone.embed_caption(tape, &ex.caption)?;
        let out = backbone.plain_forward(tape, Modality::Language, words)?;
        let pos = class_position(&ex.caption).ok_or(TensorError::Invalid {
            op: "contrastive_loss",
            reason: "caption is all padding".into(),
        })?;
        txt_feats.push(backbone.text_feature(tape, out, pos)?);
    }
    let x = tape.concat_rows(&img_feats)?;
    let z = tape.concat_rows(&txt_feats)?;
    let logits = backbone.logits(tape, x, z)?;
    let logits_t = tape.transpose(logits)?;
    let targets: Vec<usize> = (0..batch.len()).collect();
    let l1 = tape.cross_entropy(logits, &targets)?;
    let l2 = tape.cross_entropy(logits_t, &targets)?;
    let s = tape.add(l1, l2)?;
    Ok(tape.scale(s, 0.5))
}

/// Train every backbone parameter (including log τ) with Adam on the
/// paired corpus, then freeze the backbone.
pub fn pretrain_contrastive(backbone: &mut Backbone, corpus: &[LabeledExample], cfg: &PretrainConfig) -> Result<PretrainLog> {
    if cfg.batch < 2 {
        return Err(TensorError::Config("pretraining batch must be at least 2".into()));
    }
    let mut classes: Vec<usize> = corpus.iter().map(|e| e.class).collect();
    classes.sort_unstable();
    classes.dedup();
    if cfg.batch > classes.len() {
        return Err(TensorError::Config(format!(
            "batch {} exceeds the {} distinct classes in the corpus",
            cfg.batch,
            classes.len()
        )));
    }
    let by_class: Vec<Vec<&LabeledExample>> =
        classes.iter().map(|&c| corpus.iter().filter(|e| e.class == c).collect()).collect();

    backbone.params.unfreeze();
    let mut opt = Adam::new(&backbone.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = PretrainLog::default();
    let mut order: Vec<usize> = (0..classes.len()).collect();
    for step in 0..cfg.steps {
        order.shuffle(&mut rng);
        let batch: Vec<&LabeledExample> = order[..cfg.batch]
            .iter()
            .map(|&ci| by_class[ci][rng.gen_range(0..by_class[ci].len())])
            .collect();
        let mut tape = Tape::new();
        let loss = contrastive_loss(&mut tape, backbone, &batch)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "pretrain_contrastive" });
        }
        log.losses.push(value);
        let grads = tape.backward(loss)?;
        let lr = cosine_lr(cfg.lr, step, cfg.steps);
        opt.step(&mut backbone.params, &grads, lr)?;
    }
    backbone.freeze();
    Ok(log)
}
