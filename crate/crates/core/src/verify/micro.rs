//! A tiny randomly initialised model for the verification suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aggregation::{AggregationStrategy, PromptConfig, PromptLearner};
use crate::backbone::{Backbone, BackboneConfig};
use crate::data::{Image, LabeledExample};
use crate::tensor::Result;

pub fn config(depth: usize) -> BackboneConfig {
    BackboneConfig {
        depth,
        text_width: 8,
        vision_width: 12,
        shared_width: 6,
        heads: 2,
        mlp_ratio: 2,
        caption_len: 5,
        vocab_size: 16,
        image_side: 8,
        patch_size: 4,
        channels: 3,
        tau: 0.07,
        init_seed: 1,
    }
}

/// Frozen `K`-layer backbone, a learner with `J` prompted layers of length 1,
/// three images and three captions.
pub fn setup(
    strategy: AggregationStrategy,
    seed: u64,
    k: usize,
    j: usize,
) -> Result<(Backbone, PromptLearner, Vec<Image>, Vec<Vec<usize>>)> {
    let mut bb = Backbone::new(BackboneConfig {
        init_seed: seed.wrapping_add(100),
        ..config(k)
    })?;
    bb.freeze();
    let learner = PromptLearner::new(
        &bb.config,
        PromptConfig {
            depth: j,
            length: 1,
            init_std: 0.5,
            aggregation: strategy,
            ..PromptConfig::default()
        },
        seed,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let images = (0..3)
        .map(|_| Image::new(3, 8, (0..192).map(|_| rng.gen_range(0.0..1.0)).collect()).expect("image extents"))
        .collect();
    let captions = (0..3)
        .map(|i| {
            let mut c: Vec<usize> = (0..4).map(|_| rng.gen_range(1..16)).collect();
            c[3] = 4 + i;
            c.push(0);
            c
        })
        .collect();
    Ok((bb, learner, images, captions))
}

/// Move gates off their initial value so every path carries gradient.
pub fn randomize_gates(learner: &mut PromptLearner, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9a7e);
    let gates: Vec<_> = learner
        .interaction
        .language_gate
        .iter()
        .chain(&learner.interaction.vision_gate)
        .copied()
        .collect();
    for g in gates {
        learner.params.get_mut(g.scale).data_mut()[0] = rng.gen_range(-3.0..3.0);
        learner.params.get_mut(g.bias).data_mut()[0] = rng.gen_range(-1.0..1.0);
    }
}

pub fn pairs(images: &[Image], captions: &[Vec<usize>]) -> Vec<LabeledExample> {
    images
        .iter()
        .zip(captions)
        .enumerate()
        .map(|(i, (im, c))| LabeledExample {
            image: im.clone(),
            caption: c.clone(),
            class: i,
        })
        .collect()
}
