use bmip_core::backbone::{
    classify, contrastive_loss, patchify, pretrain_contrastive, Backbone, BackboneConfig, PretrainConfig,
};
use bmip_core::data::{filter_classes, generate, generate_pretraining, split_base_new, Image, SyntheticSpec, PAD_TOKEN};
use bmip_core::tensor::Tape;
use bmip_core::train::{eval_closed, LabelSpace, ZeroShotModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(seed: u64, side: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(3, side, (0..3 * side * side).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

#[test]
fn all_pad_caption_embeds_pad_plus_positions() {
    let bb = Backbone::new(BackboneConfig::default()).unwrap();
    let x = bb.config.caption_len;
    let w = bb.embed_text(&[vec![PAD_TOKEN; x]]).unwrap();
    let table = bb.params.by_name("text.token_embedding").unwrap();
    let pos = bb.params.by_name("text.positions").unwrap();
    let d = bb.config.text_width;
    for r in 0..x {
        for c in 0..d {
            assert_eq!(w.data()[r * d + c], table.row(PAD_TOKEN)[c] + pos.row(r)[c]);
        }
    }
}

#[test]
fn identical_captions_embed_identically() {
    let bb = Backbone::new(BackboneConfig::default()).unwrap();
    let cap = vec![1, 2, 3, 4, 5, 0, 0, 0];
    let w = bb.embed_text(&[cap.clone(), cap]).unwrap();
    let half = w.numel() / 2;
    assert_eq!(w.data()[..half], w.data()[half..]);
}

#[test]
fn embedding_gradient_touches_only_used_rows() {
    let bb = Backbone::new(BackboneConfig::default()).unwrap();
    let cap = vec![3, 9, 9, 17, 0, 0, 0, 0];
    let mut tape = Tape::new();
    let w = bb.embed_caption(&mut tape, &cap).unwrap();
    let out = bb.plain_forward(&mut tape, bmip_core::backbone::Modality::Language, w).unwrap();
    let s = tape.sum(out);
    let grads = tape.backward(s).unwrap();
    let id = bb.params.find("text.token_embedding").unwrap();
    let g = grads.param(id).unwrap();
    for row in 0..bb.config.vocab_size {
        let norm: f64 = g.row(row).iter().map(|v| v.abs()).sum();
        assert_eq!(norm > 0.0, cap.contains(&row), "row {row}");
    }
}

#[test]
fn patch_grid_and_brute_force_extraction() {
    let img = random_image(4, 16);
    let p = patchify(&img, 4).unwrap();
    assert_eq!(p.rows(), 16);
    for gy in 0..4 {
        for gx in 0..4 {
            let row = p.row(gy * 4 + gx);
            let mut k = 0;
            for c in 0..3 {
                for y in 0..4 {
                    for x in 0..4 {
                        assert_eq!(row[k], img.at(c, gy * 4 + y, gx * 4 + x));
                        k += 1;
                    }
                }
            }
        }
    }
}

#[test]
fn zero_image_patch_embeddings_share_the_bias() {
    let bb = Backbone::new(BackboneConfig::default()).unwrap();
    let (_, e) = bb.embed_image(&Image::zeros(3, 16)).unwrap();
    let pos = bb.params.by_name("vision.positions").unwrap();
    let d = e.cols();
    let first: Vec<f64> = (0..d).map(|c| e.row(0)[c] - pos.row(1)[c]).collect();
    for r in 1..e.rows() {
        for c in 0..d {
            assert!((e.row(r)[c] - pos.row(r + 1)[c] - first[c]).abs() < 1e-15);
        }
    }
}

#[test]
fn classify_matches_scalar_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let unit = |rng: &mut ChaCha8Rng| {
        let v: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.into_iter().map(|a| a / n).collect::<Vec<f64>>()
    };
    let x = unit(&mut rng);
    let z: Vec<Vec<f64>> = (0..3).map(|_| unit(&mut rng)).collect();
    let tau = 0.07;
    let p = classify(&x, &z, tau).unwrap();
    let e: Vec<f64> = z
        .iter()
        .map(|zi| (zi.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() / tau).exp())
        .collect();
    let total: f64 = e.iter().sum();
    for (pi, ei) in p.iter().zip(&e) {
        assert!((pi - ei / total).abs() < 1e-12);
    }
}

#[test]
fn uniform_similarities_give_log_batch_loss() {
    let mut bb = Backbone::new(BackboneConfig::default()).unwrap();
    bb.set_tau(1e9);
    let corpus = generate_pretraining(&SyntheticSpec::default(), 1).unwrap();
    let batch: Vec<_> = corpus.iter().take(6).collect();
    let mut tape = Tape::new();
    let loss = contrastive_loss(&mut tape, &bb, &batch).unwrap();
    assert!((tape.value(loss).data()[0] - 6f64.ln()).abs() < 1e-6);
}

fn short_pretrain() -> PretrainConfig {
    PretrainConfig {
        steps: 5,
        per_class: 4,
        ..PretrainConfig::default()
    }
}

#[test]
fn pretraining_is_deterministic() {
    let spec = SyntheticSpec::default();
    let cfg = short_pretrain();
    let corpus = generate_pretraining(&spec, cfg.per_class).unwrap();
    let digests: Vec<String> = (0..2)
        .map(|_| {
            let mut bb = Backbone::new(BackboneConfig::default()).unwrap();
            pretrain_contrastive(&mut bb, &corpus, &cfg).unwrap();
            bb.digest()
        })
        .collect();
    assert_eq!(digests[0], digests[1]);
}

#[test]
fn pretrained_backbone_beats_chance_zero_shot() {
    let spec = SyntheticSpec::default();
    let cfg = PretrainConfig::default();
    let world = SyntheticSpec {
        visual_variance: cfg.visual_variance,
        ..spec.clone()
    };
    let corpus = generate_pretraining(&world, cfg.per_class).unwrap();
    let mut bb = Backbone::new(BackboneConfig::default()).unwrap();
    pretrain_contrastive(&mut bb, &corpus, &cfg).unwrap();
    let (base, _) = split_base_new(spec.classes, 0.5).unwrap();
    let chance = 1.0 / spec.classes as f64;
    for seed in 1..=5 {
        let data = generate(&SyntheticSpec {
            sample_seed: seed,
            ..spec.clone()
        })
        .unwrap();
        let test = filter_classes(&data.test, &base);
        let r = eval_closed(&ZeroShotModel { backbone: &bb }, &test, &LabelSpace::all(&data)).unwrap();
        assert!(r.accuracy > 2.0 * chance, "seed {seed}: {}", r.accuracy);
    }
}
