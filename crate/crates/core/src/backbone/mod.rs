//! Toy-scale dual encoder: a causal text transformer and a patch-based
//! vision transformer, each followed by a projection head into a shared
//! embedding space, plus the temperature-scaled cosine classifier.

mod pretrain;

pub use pretrain::{contrastive_loss, pretrain_contrastive, PretrainConfig, PretrainLog};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::tensor::{
    multi_head_attention, AttentionMap, AttentionWeights, Namespace, ParamId, ParamStore, Result, Tape, Tensor,
    TensorError, Var,
};

/// Which encoder a tensor or prompt belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Language,
    Vision,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Language => "language",
            Modality::Vision => "vision",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Layers K, shared by both encoders.
    pub depth: usize,
    /// d_l
    pub text_width: usize,
    /// d_v
    pub vision_width: usize,
    pub shared_width: usize,
    pub heads: usize,
    /// Feed-forward hidden width as a multiple of the model width.
    pub mlp_ratio: usize,
    /// Caption length x.
    pub caption_len: usize,
    pub vocab_size: usize,
    pub image_side: usize,
    pub patch_size: usize,
    pub channels: usize,
    /// Initial temperature τ.
    pub tau: f64,
    pub init_seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            depth: 6,
            text_width: 32,
            vision_width: 48,
            shared_width: 32,
            heads: 4,
            mlp_ratio: 2,
            caption_len: 8,
            vocab_size: 64,
            image_side: 16,
            patch_size: 4,
            channels: 3,
            tau: 0.07,
            init_seed: 1,
        }
    }
}

/// Per-encoder view of the configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub modality: Modality,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    /// Caption length for text, patch count m for vision.
    pub tokens: usize,
}

pub type TextEncoderConfig = EncoderConfig;
pub type VisionEncoderConfig = EncoderConfig;

impl BackboneConfig {
    pub fn patches(&self) -> usize {
        (self.image_side / self.patch_size).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn text(&self) -> TextEncoderConfig {
        EncoderConfig {
            modality: Modality::Language,
            depth: self.depth,
            width: self.text_width,
            heads: self.heads,
            tokens: self.caption_len,
        }
    }

    pub fn vision(&self) -> VisionEncoderConfig {
        EncoderConfig {
            modality: Modality::Vision,
            depth: self.depth,
            width: self.vision_width,
            heads: self.heads,
            tokens: self.patches(),
        }
    }

    pub fn width(&self, m: Modality) -> usize {
        match m {
            Modality::Language => self.text_width,
            Modality::Vision => self.vision_width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TensorError::Config(msg));
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        for (name, w) in [("text_width", self.text_width), ("vision_width", self.vision_width)] {
            if self.heads == 0 || w == 0 || w % self.heads != 0 {
                return bad(format!("{name} {w} is not divisible by {} heads", self.heads));
            }
        }
        if self.shared_width == 0 || self.mlp_ratio == 0 || self.caption_len == 0 || self.vocab_size == 0 {
            return bad("widths, mlp_ratio, caption_len and vocab_size must be positive".into());
        }
        if self.patch_size == 0 || self.image_side % self.patch_size != 0 {
            return bad(format!(
                "image side {} is not divisible by patch size {}",
                self.image_side, self.patch_size
            ));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("temperature {} must be positive", self.tau));
        }
        Ok(())
    }
}

/// Parameter ids of one pre-LN transformer block.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct TextTower {
    pub token_embedding: ParamId,
    pub positions: ParamId,
    pub blocks: Vec<BlockParams>,
    pub ln_final_gain: ParamId,
    pub ln_final_bias: ParamId,
    pub projection: ParamId,
}

#[derive(Clone, Debug)]
pub struct VisionTower {
    pub patch_weight: ParamId,
    pub patch_bias: ParamId,
    pub class_token: ParamId,
    pub positions: ParamId,
    pub blocks: Vec<BlockParams>,
    pub ln_post_gain: ParamId,
    pub ln_post_bias: ParamId,
    pub projection: ParamId,
}

/// The dual encoder: configuration, parameter store and parameter layout.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub params: ParamStore,
    pub text: TextTower,
    pub vision: VisionTower,
    /// log τ; τ stays positive under any update.
    pub log_tau: ParamId,
}

fn linear_init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, gain: f64) -> Tensor {
    Tensor::randn(&[fan_in, fan_out], gain / (fan_in as f64).sqrt(), rng)
}

fn add_block(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, width: usize, hidden: usize, depth: usize) -> BlockParams {
    let resid = 1.0 / (2.0 * depth as f64).sqrt();
    let mut p = |name: &str, t: Tensor| store.insert(format!("{prefix}.{name}"), t);
    BlockParams {
        ln1_gain: p("ln1.gain", Tensor::full(&[width], 1.0)),
        ln1_bias: p("ln1.bias", Tensor::zeros(&[width])),
        wq: p("attn.wq", linear_init(rng, width, width, 1.0)),
        bq: p("attn.bq", Tensor::zeros(&[width])),
        wk: p("attn.wk", linear_init(rng, width, width, 1.0)),
        bk: p("attn.bk", Tensor::zeros(&[width])),
        wv: p("attn.wv", linear_init(rng, width, width, 1.0)),
        bv: p("attn.bv", Tensor::zeros(&[width])),
        wo: p("attn.wo", linear_init(rng, width, width, resid)),
        bo: p("attn.bo", Tensor::zeros(&[width])),
        ln2_gain: p("ln2.gain", Tensor::full(&[width], 1.0)),
        ln2_bias: p("ln2.bias", Tensor::zeros(&[width])),
        w1: p("mlp.w1", linear_init(rng, width, hidden, 1.0)),
        b1: p("mlp.b1", Tensor::zeros(&[hidden])),
        w2: p("mlp.w2", linear_init(rng, hidden, width, resid)),
        b2: p("mlp.b2", Tensor::zeros(&[width])),
    }
}

impl Backbone {
    /// Randomly initialised backbone; deterministic in `config.init_seed`.
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new(Namespace::Backbone);
        let (dl, dv, ds, k) = (config.text_width, config.vision_width, config.shared_width, config.depth);

        let token_embedding = store.insert("text.token_embedding", Tensor::randn(&[config.vocab_size, dl], 0.5, &mut rng));
        let text_positions = store.insert("text.positions", Tensor::randn(&[config.caption_len, dl], 0.1, &mut rng));
        let text_blocks = (0..k)
            .map(|i| add_block(&mut store, &mut rng, &format!("text.blocks.{i}"), dl, dl * config.mlp_ratio, k))
            .collect();
        let text = TextTower {
            token_embedding,
            positions: text_positions,
            blocks: text_blocks,
            ln_final_gain: store.insert("text.ln_final.gain", Tensor::full(&[dl], 1.0)),
            ln_final_bias: store.insert("text.ln_final.bias", Tensor::zeros(&[dl])),
            projection: store.insert("text.projection", linear_init(&mut rng, dl, ds, 1.0)),
        };

        let m = config.patches();
        let patch_weight = store.insert("vision.patch.weight", linear_init(&mut rng, config.patch_dim(), dv, 1.0));
        let patch_bias = store.insert("vision.patch.bias", Tensor::zeros(&[dv]));
        let class_token = store.insert("vision.class_token", Tensor::randn(&[1, dv], 0.5, &mut rng));
        let vision_positions = store.insert("vision.positions", Tensor::randn(&[1 + m, dv], 0.1, &mut rng));
        let vision_blocks = (0..k)
            .map(|i| add_block(&mut store, &mut rng, &format!("vision.blocks.{i}"), dv, dv * config.mlp_ratio, k))
            .collect();
        let vision = VisionTower {
            patch_weight,
            patch_bias,
            class_token,
            positions: vision_positions,
            blocks: vision_blocks,
            ln_post_gain: store.insert("vision.ln_post.gain", Tensor::full(&[dv], 1.0)),
            ln_post_bias: store.insert("vision.ln_post.bias", Tensor::zeros(&[dv])),
            projection: store.insert("vision.projection", linear_init(&mut rng, dv, ds, 1.0)),
        };
        let log_tau = store.insert("log_tau", Tensor::scalar(config.tau.ln()));
        Ok(Self {
            config,
            params: store,
            text,
            vision,
            log_tau,
        })
    }

    /// Current temperature τ.
    pub fn tau(&self) -> f64 {
        self.params.get(self.log_tau).data()[0].exp()
    }

    pub fn set_tau(&mut self, tau: f64) {
        self.params.get_mut(self.log_tau).data_mut()[0] = tau.ln();
    }

    pub fn digest(&self) -> String {
        self.params.digest()
    }

    pub fn freeze(&mut self) {
        self.params.freeze();
    }

    fn blocks(&self, m: Modality) -> &[BlockParams] {
        match m {
            Modality::Language => &self.text.blocks,
            Modality::Vision => &self.vision.blocks,
        }
    }

    /// Word embeddings plus positions for one caption: `[x × d_l]`.
    pub fn embed_caption(&self, tape: &mut Tape, tokens: &[usize]) -> Result<Var> {
        let x = self.config.caption_len;
        if tokens.len() != x {
            return Err(TensorError::Invalid {
                op: "embed_text",
                reason: format!("caption has {} tokens, expected {x}", tokens.len()),
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(TensorError::IndexOutOfRange {
                op: "embed_text",
                index: bad,
                limit: self.config.vocab_size,
            });
        }
        let table = tape.param(&self.params, self.text.token_embedding);
        let words = tape.gather_rows(table, tokens)?;
        let pos = tape.param(&self.params, self.text.positions);
        tape.add(words, pos)
    }

    /// W_0 for a set of captions as a `[N, x, d_l]` tensor.
    pub fn embed_text(&self, captions: &[Vec<usize>]) -> Result<Tensor> {
        let mut data = Vec::new();
        let mut tape = Tape::new();
        for c in captions {
            let v = self.embed_caption(&mut tape, c)?;
            data.extend_from_slice(tape.value(v).data());
        }
        Tensor::new(vec![captions.len(), self.config.caption_len, self.config.text_width], data)
    }

    /// `[CLS_0; E_0]` for one image: `[(1 + m) × d_v]` with positions added.
    pub fn embed_image_tokens(&self, tape: &mut Tape, image: &Image) -> Result<Var> {
        let patches = patchify(image, self.config.patch_size)?;
        if image.channels != self.config.channels || image.side != self.config.image_side {
            return Err(TensorError::InvalidShape {
                shape: vec![image.channels, image.side, image.side],
                reason: format!(
                    "expected a {}×{}×{} image",
                    self.config.channels, self.config.image_side, self.config.image_side
                ),
            });
        }
        let p = tape.constant(patches);
        let w = tape.param(&self.params, self.vision.patch_weight);
        let b = tape.param(&self.params, self.vision.patch_bias);
        let e = tape.matmul(p, w)?;
        let e = tape.add_row(e, b)?;
        let cls = tape.param(&self.params, self.vision.class_token);
        let tokens = tape.concat_rows(&[cls, e])?;
        let pos = tape.param(&self.params, self.vision.positions);
        tape.add(tokens, pos)
    }

    /// `(CLS_0, E_0)` as plain tensors.
    pub fn embed_image(&self, image: &Image) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let t = self.embed_image_tokens(&mut tape, image)?;
        let all = tape.value(t);
        let d = all.cols();
        let cls = Tensor::matrix(1, d, all.row(0).to_vec())?;
        let rest = Tensor::matrix(all.rows() - 1, d, all.data()[d..].to_vec())?;
        Ok((cls, rest))
    }

    /// Layer `index` (0-based) of the given encoder. Text layers are causal.
    pub fn layer(&self, tape: &mut Tape, modality: Modality, index: usize, x: Var) -> Result<(Var, AttentionMap)> {
        let blk = self.blocks(modality).get(index).ok_or(TensorError::IndexOutOfRange {
            op: "layer",
            index,
            limit: self.config.depth,
        })?;
        let p = |tape: &mut Tape, id: ParamId| tape.param(&self.params, id);
        let h = {
            let (g, b) = (p(tape, blk.ln1_gain), p(tape, blk.ln1_bias));
            tape.layer_norm(x, g, b)?
        };
        let w = AttentionWeights {
            wq: p(tape, blk.wq),
            bq: p(tape, blk.bq),
            wk: p(tape, blk.wk),
            bk: p(tape, blk.bk),
            wv: p(tape, blk.wv),
            bv: p(tape, blk.bv),
            wo: p(tape, blk.wo),
            bo: p(tape, blk.bo),
        };
        let causal = modality == Modality::Language;
        let (attn, map) = multi_head_attention(tape, h, h, h, &w, self.config.heads, causal)?;
        let x = tape.add(x, attn)?;
        let h = {
            let (g, b) = (p(tape, blk.ln2_gain), p(tape, blk.ln2_bias));
            tape.layer_norm(x, g, b)?
        };
        let (w1, b1, w2, b2) = (p(tape, blk.w1), p(tape, blk.b1), p(tape, blk.w2), p(tape, blk.b2));
        let h = tape.matmul(h, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.gelu(h);
        let h = tape.matmul(h, w2)?;
        let h = tape.add_row(h, b2)?;
        Ok((tape.add(x, h)?, map))
    }

    /// Every layer in sequence with no prompt tokens.
    pub fn plain_forward(&self, tape: &mut Tape, modality: Modality, mut x: Var) -> Result<Var> {
        for i in 0..self.config.depth {
            x = self.layer(tape, modality, i, x)?.0;
        }
        Ok(x)
    }

    /// Class feature z: final representation at `class_row`, normalised and projected.
    pub fn text_feature(&self, tape: &mut Tape, final_tokens: Var, class_row: usize) -> Result<Var> {
        let row = tape.slice_rows(final_tokens, class_row, class_row + 1)?;
        let (g, b) = (
            tape.param(&self.params, self.text.ln_final_gain),
            tape.param(&self.params, self.text.ln_final_bias),
        );
        let h = tape.layer_norm(row, g, b)?;
        let proj = tape.param(&self.params, self.text.projection);
        tape.matmul(h, proj)
    }

    /// Image feature x: final class token, normalised and projected.
    pub fn image_feature(&self, tape: &mut Tape, final_tokens: Var) -> Result<Var> {
        let row = tape.slice_rows(final_tokens, 0, 1)?;
        let (g, b) = (
            tape.param(&self.params, self.vision.ln_post_gain),
            tape.param(&self.params, self.vision.ln_post_bias),
        );
        let h = tape.layer_norm(row, g, b)?;
        let proj = tape.param(&self.params, self.vision.projection);
        tape.matmul(h, proj)
    }

    /// `cos(x_b, z_n) / τ` for image features `[B × d_s]` and class features `[N × d_s]`.
    pub fn logits(&self, tape: &mut Tape, image_features: Var, class_features: Var) -> Result<Var> {
        let x = tape.normalize_rows(image_features)?;
        let z = tape.normalize_rows(class_features)?;
        let zt = tape.transpose(z)?;
        let cos = tape.matmul(x, zt)?;
        let log_tau = tape.param(&self.params, self.log_tau);
        let inv_tau = {
            let neg = tape.scale(log_tau, -1.0);
            tape.exp(neg)
        };
        tape.mul_scalar(cos, inv_tau)
    }
}

/// Split an image into non-overlapping `patch × patch` blocks, row-major over
/// the patch grid. Each row holds one patch, channel-major then row then column.
pub fn patchify(image: &Image, patch: usize) -> Result<Tensor> {
    if patch == 0 || image.side % patch != 0 {
        return Err(TensorError::InvalidShape {
            shape: vec![image.channels, image.side, image.side],
            reason: format!("side {} is not divisible by patch size {patch}", image.side),
        });
    }
    let grid = image.side / patch;
    let dim = image.channels * patch * patch;
    let mut out = Vec::with_capacity(grid * grid * dim);
    for gy in 0..grid {
        for gx in 0..grid {
            for c in 0..image.channels {
                for y in 0..patch {
                    let start = (c * image.side + gy * patch + y) * image.side + gx * patch;
                    out.extend_from_slice(&image.data[start..start + patch]);
                }
            }
        }
    }
    Tensor::matrix(grid * grid, dim, out)
}

/// Class probabilities `softmax_i(cos(x, z_i) / τ)`.
pub fn classify(image_feature: &[f64], class_features: &[Vec<f64>], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(TensorError::Config(format!("temperature {tau} must be positive")));
    }
    if class_features.is_empty() {
        return Err(TensorError::Invalid {
            op: "classify",
            reason: "no classes".into(),
        });
    }
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nx = norm(image_feature);
    if !(nx > 0.0) {
        return Err(TensorError::Invalid {
            op: "classify",
            reason: "zero-norm image feature".into(),
        });
    }
    let mut logits = Vec::with_capacity(class_features.len());
    for z in class_features {
        if z.len() != image_feature.len() {
            return Err(TensorError::ShapeMismatch {
                op: "classify",
                left: vec![image_feature.len()],
                right: vec![z.len()],
            });
        }
        let nz = norm(z);
        if !(nz > 0.0) {
            return Err(TensorError::Invalid {
                op: "classify",
                reason: "zero-norm class feature".into(),
            });
        }
        let dot: f64 = image_feature.iter().zip(z).map(|(a, b)| a * b).sum();
        logits.push(dot / (nx * nz) / tau);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            depth: 2,
            text_width: 8,
            vision_width: 12,
            shared_width: 6,
            heads: 2,
            caption_len: 5,
            vocab_size: 20,
            image_side: 8,
            patch_size: 4,
            ..BackboneConfig::default()
        }
    }

    #[test]
    fn patch_count_arithmetic() {
        let cfg = BackboneConfig::default();
        assert_eq!(cfg.patches(), 16);
        let img = Image::zeros(3, 16);
        assert_eq!(patchify(&img, 4).unwrap().shape(), &[16, 48]);
        assert!(patchify(&img, 5).is_err());
    }

    #[test]
    fn width_must_divide_heads() {
        let cfg = BackboneConfig {
            text_width: 30,
            ..BackboneConfig::default()
        };
        assert!(matches!(Backbone::new(cfg), Err(TensorError::Config(_))));
    }

    #[test]
    fn unknown_token_rejected() {
        let bb = Backbone::new(tiny()).unwrap();
        let err = bb.embed_text(&[vec![0, 1, 2, 3, 99]]).unwrap_err();
        assert!(matches!(err, TensorError::IndexOutOfRange { index: 99, .. }));
    }

    #[test]
    fn zero_image_patches_differ_only_by_position() {
        let bb = Backbone::new(tiny()).unwrap();
        let (_, e) = bb.embed_image(&Image::zeros(3, 8)).unwrap();
        let pos = bb.params.get(bb.vision.positions);
        let d = e.cols();
        let base: Vec<f64> = (0..d).map(|j| e.at2(0, j) - pos.at2(1, j)).collect();
        for r in 1..e.rows() {
            for j in 0..d {
                assert!((e.at2(r, j) - pos.at2(r + 1, j) - base[j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn classify_symmetry_and_saturation() {
        let x = vec![0.3, -1.0, 2.0];
        let p = classify(&x, &[x.clone(), x.clone()], 0.07).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        let p = classify(&[1.0, 0.0], &[vec![0.0, 1.0], vec![1.0, 0.0]], 0.01).unwrap();
        assert!(p[1] > 1.0 - 1e-10);
        assert!(classify(&[0.0, 0.0], &[vec![1.0, 0.0]], 0.07).is_err());
    }
}
