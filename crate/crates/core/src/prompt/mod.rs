//! Deep prompt insertion.
//!
//! For layers `1..=J` a fresh prompt matrix occupies the prompt slots of the
//! layer input and the prompt-slot outputs of that layer are dropped; from
//! layer `J + 1` on, the full output of the previous layer (including the
//! prompt positions that survived layer `J`) is passed through unchanged.
//! Text prompts are prefixed (`[P, W]`); vision prompts are appended after
//! the class token and patches (`[CLS, E, P̃]`). Prompt tokens carry no
//! positional embedding.

use std::ops::Range;

use rand::Rng;

use crate::backbone::{Backbone, Modality};
use crate::tensor::{AttentionMap, ParamId, ParamStore, Result, Tape, Tensor, TensorError, Var};

/// Learnable per-depth prompts for one modality.
#[derive(Clone, Debug)]
pub struct PromptStack {
    pub modality: Modality,
    /// J
    pub depth: usize,
    /// b
    pub length: usize,
    pub width: usize,
    /// `prompts[i - 1]` is consumed at the input of layer `i`.
    pub prompts: Vec<ParamId>,
}

impl PromptStack {
    /// Gaussian-initialised stack registered in `store` as `prompt.<modality>.<i>`.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        modality: Modality,
        depth: usize,
        length: usize,
        width: usize,
        init_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if length == 0 {
            return Err(TensorError::Config("prompt length must be at least 1".into()));
        }
        let prompts = (1..=depth)
            .map(|i| {
                store.insert(
                    format!("prompt.{}.{i}", modality.as_str()),
                    Tensor::randn(&[length, width], init_std, rng),
                )
            })
            .collect();
        Ok(Self {
            modality,
            depth,
            length,
            width,
            prompts,
        })
    }

    /// Number of scalar prompt parameters, `J·b·width`.
    pub fn census(&self) -> usize {
        self.depth * self.length * self.width
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore, depth: usize) -> Var {
        tape.param(store, self.prompts[depth - 1])
    }
}

/// What a prompt provider sees of the previous prompted layer.
#[derive(Clone, Debug)]
pub struct LayerView {
    pub map: AttentionMap,
    /// Key (and query) rows occupied by prompt tokens in that layer's input.
    pub prompt_rows: Range<usize>,
    pub tokens: usize,
}

impl LayerView {
    pub fn prompt_keys(&self) -> Vec<usize> {
        self.prompt_rows.clone().collect()
    }

    pub fn non_prompt_queries(&self) -> Vec<usize> {
        (0..self.tokens).filter(|r| !self.prompt_rows.contains(r)).collect()
    }
}

/// Everything recorded during one prompted encoder pass.
#[derive(Clone, Debug)]
pub struct EncoderTrace {
    /// Full output of layer K (`W_K` with surviving prompt rows, or `[CLS_K, E_K, P̃_K]`).
    pub output: Var,
    /// Row of `output` where the caption (text) or image tokens begin.
    pub content_start: usize,
    pub attention: Vec<AttentionMap>,
    /// Full output of each layer, before prompt-slot outputs are discarded.
    pub layer_outputs: Vec<Var>,
    /// Prompt rows in each layer's input.
    pub prompt_rows: Vec<Range<usize>>,
}

/// Walk every layer of one encoder, asking `prompt_for(tape, i, prev)` for
/// the prompt tokens of layer `i ≤ depth`. `prev` describes layer `i − 1`
/// and is `None` for `i = 1`.
pub fn forward_with_prompts<F>(
    tape: &mut Tape,
    backbone: &Backbone,
    modality: Modality,
    embedded: Var,
    depth: usize,
    mut prompt_for: F,
) -> Result<EncoderTrace>
where
    F: FnMut(&mut Tape, usize, Option<&LayerView>) -> Result<Var>,
{
    let k = backbone.config.depth;
    if depth > k {
        return Err(TensorError::Config(format!("prompt depth {depth} exceeds encoder depth {k}")));
    }
    let content_rows = tape.value(embedded).rows();
    let mut content = embedded;
    let mut carried: Option<(Var, Range<usize>)> = None;
    let mut prev: Option<LayerView> = None;
    let mut attention = Vec::with_capacity(k);
    let mut layer_outputs = Vec::with_capacity(k);
    let mut prompt_rows = Vec::with_capacity(k);
    let mut content_start = 0;

    for i in 1..=k {
        let (input, rows) = if i <= depth {
            let p = prompt_for(tape, i, prev.as_ref())?;
            let b = tape.value(p).rows();
            match modality {
                Modality::Language => (tape.concat_rows(&[p, content])?, 0..b),
                Modality::Vision => (tape.concat_rows(&[content, p])?, content_rows..content_rows + b),
            }
        } else if let Some((full, rows)) = carried.take() {
            (full, rows)
        } else {
            (content, 0..0)
        };
        let tokens = tape.value(input).rows();
        let (out, map) = backbone.layer(tape, modality, i - 1, input)?;
        attention.push(map);
        layer_outputs.push(out);
        prompt_rows.push(rows.clone());

        content_start = if modality == Modality::Language { rows.len() } else { 0 };
        if i < depth {
            content = match modality {
                Modality::Language => tape.slice_rows(out, rows.end, tokens)?,
                Modality::Vision => tape.slice_rows(out, 0, content_rows)?,
            };
        } else {
            carried = Some((out, rows.clone()));
        }
        prev = Some(LayerView {
            map,
            prompt_rows: rows,
            tokens,
        });
    }
    Ok(EncoderTrace {
        output: *layer_outputs.last().expect("depth >= 1"),
        content_start,
        attention,
        layer_outputs,
        prompt_rows,
    })
}

/// Deep language prompting without interaction: returns `W_K` and the per-layer maps.
pub fn text_forward_with_prompts(
    tape: &mut Tape,
    backbone: &Backbone,
    store: &ParamStore,
    words: Var,
    stack: &PromptStack,
) -> Result<EncoderTrace> {
    if stack.modality != Modality::Language {
        return Err(TensorError::Config("text forward needs a language prompt stack".into()));
    }
    forward_with_prompts(tape, backbone, Modality::Language, words, stack.depth, |tape, i, _| {
        Ok(stack.bind(tape, store, i))
    })
}

/// Deep vision prompting without interaction: `CLS_K` is row 0 of the output.
pub fn vision_forward_with_prompts(
    tape: &mut Tape,
    backbone: &Backbone,
    store: &ParamStore,
    tokens: Var,
    stack: &PromptStack,
) -> Result<EncoderTrace> {
    if stack.modality != Modality::Vision {
        return Err(TensorError::Config("vision forward needs a vision prompt stack".into()));
    }
    forward_with_prompts(tape, backbone, Modality::Vision, tokens, stack.depth, |tape, i, _| {
        Ok(stack.bind(tape, store, i))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::data::Image;
    use crate::tensor::Namespace;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> Backbone {
        Backbone::new(BackboneConfig {
            depth: 3,
            text_width: 8,
            vision_width: 12,
            shared_width: 6,
            heads: 2,
            caption_len: 5,
            vocab_size: 20,
            image_side: 8,
            patch_size: 4,
            ..BackboneConfig::default()
        })
        .unwrap()
    }

    fn image() -> Image {
        Image::new(3, 8, (0..192).map(|i| (i as f64 * 0.37).sin().abs()).collect()).unwrap()
    }

    #[test]
    fn depth_zero_matches_plain_forward_bitwise() {
        let bb = tiny();
        let mut store = ParamStore::new(Namespace::Tunable);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ts = PromptStack::new(&mut store, Modality::Language, 0, 2, 8, 0.02, &mut rng).unwrap();
        let vs = PromptStack::new(&mut store, Modality::Vision, 0, 2, 12, 0.02, &mut rng).unwrap();

        let mut tape = Tape::new();
        let w = bb.embed_caption(&mut tape, &[1, 2, 3, 4, 0]).unwrap();
        let plain = bb.plain_forward(&mut tape, Modality::Language, w).unwrap();
        let prompted = text_forward_with_prompts(&mut tape, &bb, &store, w, &ts).unwrap();
        assert_eq!(tape.value(plain), tape.value(prompted.output));

        let e = bb.embed_image_tokens(&mut tape, &image()).unwrap();
        let plain = bb.plain_forward(&mut tape, Modality::Vision, e).unwrap();
        let prompted = vision_forward_with_prompts(&mut tape, &bb, &store, e, &vs).unwrap();
        assert_eq!(tape.value(plain), tape.value(prompted.output));
    }

    #[test]
    fn vision_token_count_with_prompts() {
        let bb = tiny();
        let mut store = ParamStore::new(Namespace::Tunable);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let vs = PromptStack::new(&mut store, Modality::Vision, 2, 2, 12, 0.02, &mut rng).unwrap();
        let mut tape = Tape::new();
        let e = bb.embed_image_tokens(&mut tape, &image()).unwrap();
        let trace = vision_forward_with_prompts(&mut tape, &bb, &store, e, &vs).unwrap();
        let m = bb.config.patches();
        for map in &trace.attention {
            assert_eq!(map.n_key, m + 3);
        }
        assert_eq!(trace.prompt_rows[0], m + 1..m + 3);
        assert_eq!(trace.prompt_rows[2], m + 1..m + 3);
    }

    #[test]
    fn depth_beyond_encoder_is_rejected() {
        let bb = tiny();
        let mut store = ParamStore::new(Namespace::Tunable);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ts = PromptStack::new(&mut store, Modality::Language, 4, 1, 8, 0.02, &mut rng).unwrap();
        let mut tape = Tape::new();
        let w = bb.embed_caption(&mut tape, &[1, 2, 3, 4, 0]).unwrap();
        assert!(matches!(
            text_forward_with_prompts(&mut tape, &bb, &store, w, &ts),
            Err(TensorError::Config(_))
        ));
    }

    #[test]
    fn census_counts_every_prompt() {
        let mut store = ParamStore::new(Namespace::Tunable);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ts = PromptStack::new(&mut store, Modality::Language, 3, 2, 32, 0.02, &mut rng).unwrap();
        let vs = PromptStack::new(&mut store, Modality::Vision, 3, 2, 48, 0.02, &mut rng).unwrap();
        assert_eq!(ts.census() + vs.census(), 3 * 2 * (32 + 48));
        assert_eq!(store.numel(), 3 * 2 * (32 + 48));
    }
}
