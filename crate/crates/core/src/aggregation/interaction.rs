use crate::backbone::{Backbone, Modality};
use crate::data::{class_position, Image};
use crate::prompt::{forward_with_prompts, EncoderTrace, LayerView};
use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

use super::{aggregate_one, baseline_aggregate, project_partners, AggregationStrategy, PromptLearner};

/// Prompts, projections and (for fixed-rule strategies) the final augmented
/// prompts, bound once per tape and shared by every encoder pass on it.
#[derive(Clone, Debug)]
pub struct BoundPrompts {
    pub text: Vec<Var>,
    pub vision: Vec<Var>,
    /// F_l(P̃ᵢ)
    pub language_projected: Vec<Option<Var>>,
    /// F_v(Pᵢ)
    pub vision_projected: Vec<Option<Var>>,
    /// Augmented prompts when they do not depend on the input.
    fixed: Option<(Vec<Var>, Vec<Var>)>,
}

impl BoundPrompts {
    pub fn bind(tape: &mut Tape, learner: &PromptLearner) -> Result<Self> {
        let j = learner.config.depth;
        let store = &learner.params;
        let text: Vec<Var> = (1..=j).map(|i| learner.text.bind(tape, store, i)).collect();
        let vision: Vec<Var> = (1..=j).map(|i| learner.vision.bind(tape, store, i)).collect();
        let mut language_projected = Vec::with_capacity(j);
        let mut vision_projected = Vec::with_capacity(j);
        let mut fixed = None;
        if learner.strategy() == AggregationStrategy::Bmip {
            for i in 1..=j {
                let (fl, fv) = project_partners(tape, learner, text[i - 1], vision[i - 1], i)?;
                language_projected.push(fl);
                vision_projected.push(fv);
            }
        } else {
            let (mut ft, mut fvis) = (Vec::with_capacity(j), Vec::with_capacity(j));
            for i in 1..=j {
                let (p, pv) = baseline_aggregate(tape, learner, text[i - 1], vision[i - 1], i)?;
                ft.push(p);
                fvis.push(pv);
            }
            fixed = Some((ft, fvis));
        }
        Ok(Self {
            text,
            vision,
            language_projected,
            vision_projected,
            fixed,
        })
    }
}

/// One prompted encoder pass plus how often it consulted prompt attention.
#[derive(Clone, Debug)]
pub struct EncodedInput {
    /// `[1 × d_s]`
    pub feature: Var,
    pub trace: EncoderTrace,
    /// Augmented prompt fed to each prompted layer.
    pub prompts: Vec<Var>,
    pub attention_reads: usize,
}

/// Batched result of [`interactive_forward`].
#[derive(Clone, Debug)]
pub struct InteractiveTrace {
    /// `[B × N]`
    pub logits: Var,
    pub image_features: Var,
    pub class_features: Var,
    pub attention_reads: usize,
}

fn encode(
    tape: &mut Tape,
    backbone: &Backbone,
    learner: &PromptLearner,
    bound: &BoundPrompts,
    modality: Modality,
    embedded: Var,
) -> Result<(EncoderTrace, Vec<Var>, usize)> {
    let content_rows = tape.value(embedded).rows();
    let strategy = learner.strategy();
    let mut reads = 0;
    let mut prompts = Vec::new();
    let trace = forward_with_prompts(
        tape,
        backbone,
        modality,
        embedded,
        learner.config.depth,
        |tape: &mut Tape, i: usize, prev: Option<&LayerView>| {
            let p = match (&bound.fixed, modality) {
                (Some((t, _)), Modality::Language) => t[i - 1],
                (Some((_, v)), Modality::Vision) => v[i - 1],
                (None, _) => {
                    let (own, projected) = match modality {
                        Modality::Language => (bound.text[i - 1], bound.language_projected[i - 1]),
                        Modality::Vision => (bound.vision[i - 1], bound.vision_projected[i - 1]),
                    };
                    let b = tape.value(own).rows();
                    let attention = match prev {
                        None => {
                            let n_k = content_rows + b;
                            tape.constant(Tensor::full(&[b, 1], 1.0 / n_k as f64))
                        }
                        Some(view) => tape.prompt_attention(
                            view.map.probs,
                            view.map.heads,
                            &view.non_prompt_queries(),
                            &view.prompt_keys(),
                        )?,
                    };
                    reads += 1;
                    aggregate_one(tape, learner, modality, strategy, own, projected, Some(attention), i)?
                }
            };
            prompts.push(p);
            Ok(p)
        },
    )?;
    Ok((trace, prompts, reads))
}

/// Class feature for one caption under the learner's prompts.
pub fn encode_text(
    tape: &mut Tape,
    backbone: &Backbone,
    learner: &PromptLearner,
    bound: &BoundPrompts,
    caption: &[usize],
) -> Result<EncodedInput> {
    let pos = class_position(caption).ok_or(TensorError::Invalid {
        op: "encode_text",
        reason: "caption is all padding".into(),
    })?;
    let words = backbone.embed_caption(tape, caption)?;
    let (trace, prompts, attention_reads) = encode(tape, backbone, learner, bound, Modality::Language, words)?;
    let feature = backbone.text_feature(tape, trace.output, trace.content_start + pos)?;
    Ok(EncodedInput {
        feature,
        trace,
        prompts,
        attention_reads,
    })
}

/// Image feature for one image under the learner's prompts.
pub fn encode_image(
    tape: &mut Tape,
    backbone: &Backbone,
    learner: &PromptLearner,
    bound: &BoundPrompts,
    image: &Image,
) -> Result<EncodedInput> {
    let tokens = backbone.embed_image_tokens(tape, image)?;
    let (trace, prompts, attention_reads) = encode(tape, backbone, learner, bound, Modality::Vision, tokens)?;
    let feature = backbone.image_feature(tape, trace.output)?;
    Ok(EncodedInput {
        feature,
        trace,
        prompts,
        attention_reads,
    })
}

/// `[N × d_s]` class features and the number of attention reads.
pub fn text_features(
    tape: &mut Tape,
    backbone: &Backbone,
    learner: &PromptLearner,
    bound: &BoundPrompts,
    captions: &[Vec<usize>],
) -> Result<(Var, usize)> {
    let mut feats = Vec::with_capacity(captions.len());
    let mut reads = 0;
    for c in captions {
        let e = encode_text(tape, backbone, learner, bound, c)?;
        feats.push(e.feature);
        reads += e.attention_reads;
    }
    Ok((tape.concat_rows(&feats)?, reads))
}

/// `[B × d_s]` image features and the number of attention reads.
pub fn image_features(
    tape: &mut Tape,
    backbone: &Backbone,
    learner: &PromptLearner,
    bound: &BoundPrompts,
    images: &[&Image],
) -> Result<(Var, usize)> {
    let mut feats = Vec::with_capacity(images.len());
    let mut reads = 0;
    for im in images {
        let e = encode_image(tape, backbone, learner, bound, im)?;
        feats.push(e.feature);
        reads += e.attention_reads;
    }
    Ok((tape.concat_rows(&feats)?, reads))
}

/// Full prompted forward: image features, class features and `[B × N]` logits.
pub fn interactive_forward(
    tape: &mut Tape,
    backbone: &Backbone,
    learner: &PromptLearner,
    images: &[&Image],
    captions: &[Vec<usize>],
) -> Result<InteractiveTrace> {
    if images.is_empty() || captions.is_empty() {
        return Err(TensorError::Invalid {
            op: "interactive_forward",
            reason: "need at least one image and one caption".into(),
        });
    }
    let bound = BoundPrompts::bind(tape, learner)?;
    let (class_features, r1) = text_features(tape, backbone, learner, &bound, captions)?;
    let (image_feats, r2) = image_features(tape, backbone, learner, &bound, images)?;
    let logits = backbone.logits(tape, image_feats, class_features)?;
    Ok(InteractiveTrace {
        logits,
        image_features: image_feats,
        class_features,
        attention_reads: r1 + r2,
    })
}
