use bmip_core::aggregation::{
    baseline_aggregate, bmip_aggregate, encode_image, encode_text, extract_prompt_attention, gated_mix,
    interactive_forward, project_partners, AggregationStrategy, BoundPrompts,
};
use bmip_core::data::class_position;
use bmip_core::prompt::{text_forward_with_prompts, vision_forward_with_prompts};
use bmip_core::tensor::{Tape, Tensor};
use bmip_core::verify::micro;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn half_gate_hand_example() {
    let mut t = Tape::new();
    let own = t.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
    let other = t.constant(Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap());
    let w = t.constant(Tensor::matrix(1, 1, vec![0.5]).unwrap());
    let mixed = gated_mix(&mut t, own, other, w).unwrap();
    assert_eq!(t.value(mixed).data(), &[0.5, 0.5]);
}

fn set_gates(learner: &mut bmip_core::aggregation::PromptLearner, scale: f64, bias: f64) {
    let gates: Vec<_> = learner
        .interaction
        .language_gate
        .iter()
        .chain(&learner.interaction.vision_gate)
        .cloned()
        .collect();
    for g in gates {
        learner.params.get_mut(g.scale).data_mut()[0] = scale;
        learner.params.get_mut(g.bias).data_mut()[0] = bias;
    }
}

#[test]
fn gates_at_zero_substitute_the_projection() {
    let (_, mut learner, _, _) = micro::setup(AggregationStrategy::Bmip, 4, 2, 2).unwrap();
    set_gates(&mut learner, 0.0, -40.0);
    let mut t = Tape::new();
    for depth in 1..=2 {
        let p = learner.text.bind(&mut t, &learner.params, depth);
        let pv = learner.vision.bind(&mut t, &learner.params, depth);
        let a = t.constant(Tensor::full(&[1, 1], 0.3));
        let (p2, pv2) = bmip_aggregate(&mut t, &learner, p, pv, a, a, depth).unwrap();
        let (fl, fv) = project_partners(&mut t, &learner, p, pv, depth).unwrap();
        assert!(t.value(p2).max_abs_diff(t.value(fl.unwrap())) < 1e-9);
        assert!(t.value(pv2).max_abs_diff(t.value(fv.unwrap())) < 1e-9);
    }
}

#[test]
fn gates_at_one_keep_own_prompts() {
    let (_, mut learner, _, _) = micro::setup(AggregationStrategy::Bmip, 5, 2, 1).unwrap();
    learner.saturate_gates();
    let mut t = Tape::new();
    let p = learner.text.bind(&mut t, &learner.params, 1);
    let pv = learner.vision.bind(&mut t, &learner.params, 1);
    let a = t.constant(Tensor::full(&[1, 1], 0.9));
    let (p2, pv2) = bmip_aggregate(&mut t, &learner, p, pv, a, a, 1).unwrap();
    assert!(t.value(p2).max_abs_diff(t.value(p)) < 1e-9);
    assert!(t.value(pv2).max_abs_diff(t.value(pv)) < 1e-9);
}

#[test]
fn addition_with_zero_map_is_identity() {
    let (_, mut learner, _, _) = micro::setup(AggregationStrategy::Addition, 6, 2, 2).unwrap();
    let projections: Vec<_> = learner
        .interaction
        .language_projection
        .iter()
        .chain(&learner.interaction.vision_projection)
        .cloned()
        .collect();
    for f in projections {
        learner.params.get_mut(f.weight).data_mut().fill(0.0);
        learner.params.get_mut(f.bias).data_mut().fill(0.0);
    }
    let mut t = Tape::new();
    for depth in 1..=2 {
        let p = learner.text.bind(&mut t, &learner.params, depth);
        let pv = learner.vision.bind(&mut t, &learner.params, depth);
        let (p2, pv2) = baseline_aggregate(&mut t, &learner, p, pv, depth).unwrap();
        assert_eq!(t.value(p2).data(), t.value(p).data());
        assert_eq!(t.value(pv2).data(), t.value(pv).data());
    }
}

#[test]
fn joint_doubles_prompt_tokens() {
    let (bb, learner, images, captions) = micro::setup(AggregationStrategy::Joint, 7, 2, 2).unwrap();
    let mut t = Tape::new();
    let bound = BoundPrompts::bind(&mut t, &learner).unwrap();
    let text = encode_text(&mut t, &bb, &learner, &bound, &captions[0]).unwrap();
    let image = encode_image(&mut t, &bb, &learner, &bound, &images[0]).unwrap();
    let b = learner.config.length;
    for trace in [&text.trace, &image.trace] {
        assert!(trace.prompt_rows.iter().all(|r| r.len() == 2 * b));
    }
    let m = bb.config.patches();
    assert_eq!(t.value(image.trace.layer_outputs[0]).rows(), 1 + m + 2 * b);
}

#[test]
fn only_the_gated_strategy_reads_attention() {
    for strategy in AggregationStrategy::ALL {
        let (bb, learner, images, captions) = micro::setup(strategy, 8, 3, 2).unwrap();
        let mut t = Tape::new();
        let refs: Vec<_> = images.iter().collect();
        let trace = interactive_forward(&mut t, &bb, &learner, &refs, &captions).unwrap();
        if strategy == AggregationStrategy::Bmip {
            // one read per prompted layer per encoder pass
            assert_eq!(trace.attention_reads, 2 * (images.len() + captions.len()));
        } else {
            assert_eq!(trace.attention_reads, 0, "{strategy}");
        }
    }
}

#[test]
fn attention_scalar_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (h, nq, nk) = (2, 6, 6);
    let mut data = Vec::new();
    for _ in 0..h * nq {
        let row: Vec<f64> = (0..nk).map(|_| rng.gen_range(0.01..1.0)).collect();
        let s: f64 = row.iter().sum();
        data.extend(row.into_iter().map(|v| v / s));
    }
    let map = Tensor::new(vec![h, nq, nk], data.clone()).unwrap();
    let prompts = [4, 5];
    let got = extract_prompt_attention(&map, &prompts).unwrap();
    for (i, &key) in prompts.iter().enumerate() {
        let mut acc = 0.0;
        let mut count = 0.0;
        for head in 0..h {
            for q in (0..nq).filter(|q| !prompts.contains(q)) {
                acc += data[(head * nq + q) * nk + key];
                count += 1.0;
            }
        }
        assert!((got[i] - acc / count).abs() < 1e-15);
    }
}

#[test]
fn independent_matches_plain_deep_prompting() {
    let (bb, learner, images, captions) = micro::setup(AggregationStrategy::Independent, 9, 3, 2).unwrap();
    let mut t = Tape::new();
    let bound = BoundPrompts::bind(&mut t, &learner).unwrap();
    for c in &captions {
        let got = encode_text(&mut t, &bb, &learner, &bound, c).unwrap();
        let words = bb.embed_caption(&mut t, c).unwrap();
        let trace = text_forward_with_prompts(&mut t, &bb, &learner.params, words, &learner.text).unwrap();
        let z = bb
            .text_feature(&mut t, trace.output, trace.content_start + class_position(c).unwrap())
            .unwrap();
        assert_eq!(t.value(got.feature).data(), t.value(z).data());
    }
    for img in &images {
        let got = encode_image(&mut t, &bb, &learner, &bound, img).unwrap();
        let tokens = bb.embed_image_tokens(&mut t, img).unwrap();
        let trace = vision_forward_with_prompts(&mut t, &bb, &learner.params, tokens, &learner.vision).unwrap();
        let x = bb.image_feature(&mut t, trace.output).unwrap();
        assert_eq!(t.value(got.feature).data(), t.value(x).data());
    }
}

#[test]
fn full_depth_prompts_every_layer() {
    let (bb, learner, _, captions) = micro::setup(AggregationStrategy::Independent, 10, 3, 3).unwrap();
    let mut t = Tape::new();
    let words = bb.embed_caption(&mut t, &captions[0]).unwrap();
    let trace = text_forward_with_prompts(&mut t, &bb, &learner.params, words, &learner.text).unwrap();
    assert_eq!(trace.prompt_rows.len(), 3);
    assert!(trace.prompt_rows.iter().all(|r| r.len() == learner.config.length));
    assert_eq!(trace.attention.len(), 3);
}

#[test]
fn later_prompts_leave_earlier_layers_untouched() {
    let (bb, learner, _, captions) = micro::setup(AggregationStrategy::Independent, 11, 3, 2).unwrap();
    let mut t = Tape::new();
    let words = bb.embed_caption(&mut t, &captions[0]).unwrap();
    let base = text_forward_with_prompts(&mut t, &bb, &learner.params, words, &learner.text).unwrap();
    let mut bumped = learner.clone();
    let id = bumped.text.prompts[1];
    bumped.params.get_mut(id).data_mut()[0] += 0.5;
    let mut t2 = Tape::new();
    let words2 = bb.embed_caption(&mut t2, &captions[0]).unwrap();
    let other = text_forward_with_prompts(&mut t2, &bb, &bumped.params, words2, &bumped.text).unwrap();
    assert_eq!(t.value(base.layer_outputs[0]).data(), t2.value(other.layer_outputs[0]).data());
    assert!(t.value(base.layer_outputs[1]).max_abs_diff(t2.value(other.layer_outputs[1])) > 0.0);
}
