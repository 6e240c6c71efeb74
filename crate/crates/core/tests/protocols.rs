use std::sync::OnceLock;

use bmip_core::aggregation::{AggregationStrategy, PromptConfig, PromptLearner};
use bmip_core::backbone::Backbone;
use bmip_core::data::{
    filter_classes, generate, make_shifted_variant, split_base_new, Dataset, Shift, SyntheticSpec,
};
use bmip_core::experiment::{backbone_for, ExperimentConfig};
use bmip_core::train::{
    accuracy, corollary1_experiment, eval_cross_dataset, eval_domain_generalization, eval_open_world,
    harmonic_mean, training_loss, tune_prompts, CorollaryConfig, LabelSpace, PromptedModel, TrainConfig,
    ZeroShotModel,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn backbone() -> &'static Backbone {
    static BB: OnceLock<(tempfile::TempDir, Backbone)> = OnceLock::new();
    &BB.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.run.output_dir = Some(dir.path().to_path_buf());
        let (bb, _) = backbone_for(&cfg, dir.path()).unwrap();
        (dir, bb)
    })
    .1
}

fn dataset(seed: u64) -> Dataset {
    generate(&SyntheticSpec {
        sample_seed: seed,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

fn within_class_variance(sigma: f64) -> f64 {
    let d = generate(&SyntheticSpec {
        visual_variance: sigma,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let mut total = 0.0;
    for c in 0..d.num_classes() {
        let imgs: Vec<_> = d.train.iter().filter(|e| e.class == c).map(|e| &e.image.data).collect();
        let n = imgs.len() as f64;
        for p in 0..imgs[0].len() {
            let mean = imgs.iter().map(|v| v[p]).sum::<f64>() / n;
            total += imgs.iter().map(|v| (v[p] - mean).powi(2)).sum::<f64>() / n;
        }
    }
    total
}

#[test]
fn pixel_variance_grows_with_visual_variance() {
    let v: Vec<f64> = [0.0, 0.1, 0.3].iter().map(|&s| within_class_variance(s)).collect();
    assert!(v[0] < 1e-20);
    assert!(v[0] < v[1] && v[1] < v[2], "{v:?}");
}

#[test]
fn split_is_a_stable_partition() {
    let (b1, n1) = split_base_new(10, 0.5).unwrap();
    let (b2, n2) = split_base_new(10, 0.5).unwrap();
    assert_eq!((&b1, &n1), (&b2, &n2));
    let mut all: Vec<usize> = b1.iter().chain(&n1).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..10).collect::<Vec<_>>());
    assert!(b1.iter().all(|c| !n1.contains(c)));
}

#[test]
fn accuracy_examples() {
    let perfect: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| (i == j) as u8 as f64).collect()).collect();
    assert_eq!(accuracy(&perfect, &[0, 1, 2, 3]).unwrap(), 1.0);
    let single = accuracy(&[vec![0.2, 0.9]], &[0]).unwrap();
    assert!(single == 0.0 || single == 1.0);

    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let scores: Vec<Vec<f64>> = (0..10_000).map(|_| (0..4).map(|_| rng.gen::<f64>()).collect()).collect();
    let targets: Vec<usize> = (0..10_000).map(|_| rng.gen_range(0..4)).collect();
    assert!((accuracy(&scores, &targets).unwrap() - 0.25).abs() < 0.02);
}

#[test]
fn harmonic_mean_examples() {
    assert!((harmonic_mean(0.8, 0.7) - 0.746_666_666_666_666_6).abs() < 1e-12);
    assert_eq!(harmonic_mean(0.8, 0.0), 0.0);
}

#[test]
fn open_world_pooling_and_label_space_monotonicity() {
    let bb = backbone();
    let model = ZeroShotModel { backbone: bb };
    let (base, new) = split_base_new(10, 0.5).unwrap();
    for seed in 1..=3 {
        let data = dataset(seed);
        let r = eval_open_world(&model, &data, &base, &new).unwrap();
        assert_eq!(r.base_total, r.new_total);
        assert_eq!(r.open_world_acc, (r.base_acc + r.new_acc) / 2.0);
        assert!(r.base_acc <= r.closed_base_acc);
        assert!(r.new_acc <= r.closed_new_acc);
    }
}

#[test]
fn identity_target_and_zero_shift_reproduce_source() {
    let bb = backbone();
    let model = ZeroShotModel { backbone: bb };
    let data = dataset(2);
    let cross = eval_cross_dataset(&model, &data, &[("self".into(), data.clone())]).unwrap();
    assert_eq!(cross.targets["self"], cross.source_acc);

    let variants: Vec<(String, Dataset)> = Shift::ALL
        .iter()
        .map(|&s| (format!("{s}"), make_shifted_variant(&data, s, 0.0).unwrap()))
        .collect();
    let dom = eval_domain_generalization(&model, &data, &variants).unwrap();
    for v in dom.variants.values() {
        assert_eq!(*v, dom.source_acc);
    }
    let mean = dom.variants.values().sum::<f64>() / dom.variants.len() as f64;
    assert_eq!(dom.ood_average, mean);
}

#[test]
fn shifted_accuracy_does_not_increase_with_magnitude() {
    let bb = backbone();
    let model = ZeroShotModel { backbone: bb };
    let mut by_magnitude = [0.0; 3];
    for seed in 1..=5 {
        let data = dataset(seed);
        for (k, m) in [0.0, 0.15, 0.3].into_iter().enumerate() {
            let variants: Vec<(String, Dataset)> = Shift::ALL
                .iter()
                .map(|&s| (format!("{s}"), make_shifted_variant(&data, s, m).unwrap()))
                .collect();
            by_magnitude[k] += eval_domain_generalization(&model, &data, &variants).unwrap().ood_average / 5.0;
        }
    }
    assert!(by_magnitude[1] <= by_magnitude[0] && by_magnitude[2] <= by_magnitude[1], "{by_magnitude:?}");
}

#[test]
fn permuted_targets_stay_above_chance() {
    let bb = backbone();
    let model = ZeroShotModel { backbone: bb };
    let mut mean = 0.0;
    for seed in 1..=5u64 {
        let mut perm: Vec<usize> = (0..10).collect();
        perm.rotate_left(seed as usize);
        let target = dataset(seed + 100).permute_classes(&perm).unwrap();
        let r = eval_cross_dataset(&model, &dataset(seed), &[("t".into(), target)]).unwrap();
        mean += r.average / 5.0;
    }
    assert!(mean > 0.1, "{mean}");
}

fn tuning_setup(seed: u64) -> (Dataset, Vec<bmip_core::data::LabeledExample>, LabelSpace) {
    let data = dataset(seed);
    let (base, _) = split_base_new(10, 0.5).unwrap();
    let train = filter_classes(&data.train, &base);
    let space = LabelSpace::new(&data, &base).unwrap();
    (data, train, space)
}

#[test]
fn zero_learning_rate_is_a_fixed_point() {
    let bb = backbone();
    let (data, train, space) = tuning_setup(1);
    let mut learner = PromptLearner::new(&bb.config, PromptConfig::default(), 1).unwrap();
    let before = learner.params.digest();
    let (base, new) = split_base_new(10, 0.5).unwrap();
    let m0 = eval_open_world(&PromptedModel { backbone: bb, learner: &learner }, &data, &base, &new).unwrap();
    let cfg = TrainConfig {
        lr: 0.0,
        epochs: 1,
        ..TrainConfig::default()
    };
    tune_prompts(bb, &mut learner, &train, &space, &cfg).unwrap();
    assert_eq!(learner.params.digest(), before);
    let m1 = eval_open_world(&PromptedModel { backbone: bb, learner: &learner }, &data, &base, &new).unwrap();
    assert_eq!(m0, m1);
}

#[test]
fn one_class_loss_vanishes() {
    let bb = backbone();
    let data = dataset(1);
    let train = filter_classes(&data.train, &[3]);
    let space = LabelSpace::new(&data, &[3]).unwrap();
    let learner = PromptLearner::new(&bb.config, PromptConfig::default(), 0).unwrap();
    assert_eq!(training_loss(bb, &learner, &train, &space).unwrap(), 0.0);
}

#[test]
fn backbone_is_untouched_by_tuning_every_strategy() {
    let bb = backbone();
    let (_, train, space) = tuning_setup(4);
    let before = bb.digest();
    for strategy in AggregationStrategy::ALL {
        let mut learner = PromptLearner::new(
            &bb.config,
            PromptConfig {
                aggregation: strategy,
                ..PromptConfig::default()
            },
            4,
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        tune_prompts(bb, &mut learner, &train, &space, &cfg).unwrap();
        assert_eq!(bb.digest(), before, "{strategy}");
    }
}

#[test]
fn corollary_with_zero_rate_keeps_the_loss() {
    let bb = backbone();
    let (_, train, space) = tuning_setup(2);
    let train_cfg = TrainConfig {
        epochs: 2,
        seed: 2,
        ..TrainConfig::default()
    };
    let cfg = CorollaryConfig {
        steps: 3,
        lr: 0.0,
        ..CorollaryConfig::default()
    };
    let r = corollary1_experiment(bb, &PromptConfig::default(), &train_cfg, &cfg, &train, &space, 2).unwrap();
    assert!((r.loss_bmip_step0 - r.loss_independent).abs() < 1e-6);
    assert!(r.bmip_losses.iter().all(|&l| l == r.loss_bmip_step0));
}
