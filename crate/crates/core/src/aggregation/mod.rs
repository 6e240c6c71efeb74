//! Cross-modal prompt aggregation.
//!
//! At every prompted depth `i` each modality's prompt is combined with a
//! projection of the other modality's prompt before it enters layer `i`.
//! The bi-directional variant gates the combination per prompt token:
//!
//! ```text
//! w_v = σ(a_v·A_v + c_v)    P̃ᵢ' = w_v ⊙ P̃ᵢ + (1 − w_v) ⊙ F_v(Pᵢ)
//! w_l = σ(a_l·A_l + c_l)    Pᵢ' = w_l ⊙ Pᵢ + (1 − w_l) ⊙ F_l(P̃ᵢ)
//! ```
//!
//! where `A` is the mean attention that non-prompt tokens paid to each
//! prompt token in layer `i − 1` of the same encoder (uniform `1/n_k` at
//! depth 1). The baselines replace the gate with fixed rules.

mod interaction;

pub use interaction::{
    encode_image, encode_text, image_features, interactive_forward, text_features, BoundPrompts, EncodedInput,
    InteractiveTrace,
};

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, Modality};
use crate::prompt::PromptStack;
use crate::tensor::{Namespace, ParamId, ParamStore, Result, Tape, Tensor, TensorError, Var};

/// Gate bias that drives `σ(·)` to exactly 1.0 in double precision.
pub const SATURATED_GATE_BIAS: f64 = 40.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AggregationStrategy {
    /// Attention-gated bi-directional aggregation.
    #[default]
    Bmip,
    /// `P' = P + F(P̃)` with unit weights.
    Addition,
    /// Gate from cosine similarity between a prompt and its projected partner.
    AttentionSim,
    /// Concatenate `[P, F(P̃)]`, doubling the prompt tokens per layer.
    Joint,
    /// Vision prompts are projections of language prompts; no reverse flow.
    #[serde(rename = "unidirectional")]
    UniDirectional,
    /// No interaction (IVLP).
    Independent,
}

impl AggregationStrategy {
    pub const ALL: [AggregationStrategy; 6] = [
        AggregationStrategy::Bmip,
        AggregationStrategy::Independent,
        AggregationStrategy::UniDirectional,
        AggregationStrategy::Addition,
        AggregationStrategy::AttentionSim,
        AggregationStrategy::Joint,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AggregationStrategy::Bmip => "bmip",
            AggregationStrategy::Addition => "addition",
            AggregationStrategy::AttentionSim => "attention_sim",
            AggregationStrategy::Joint => "joint",
            AggregationStrategy::UniDirectional => "unidirectional",
            AggregationStrategy::Independent => "independent",
        }
    }

    /// Row label used in rendered tables.
    pub fn label(self) -> &'static str {
        match self {
            AggregationStrategy::Bmip => "BMIP",
            AggregationStrategy::Addition => "Addition",
            AggregationStrategy::AttentionSim => "Attention",
            AggregationStrategy::Joint => "Joint",
            AggregationStrategy::UniDirectional => "Uni-directional",
            AggregationStrategy::Independent => "IVLP",
        }
    }

    /// Prompt tokens consumed per prompted layer for prompt length `b`.
    pub fn tokens_per_layer(self, length: usize) -> usize {
        match self {
            AggregationStrategy::Joint => 2 * length,
            _ => length,
        }
    }

    fn needs_language_projection(self) -> bool {
        !matches!(self, AggregationStrategy::Independent | AggregationStrategy::UniDirectional)
    }

    fn needs_vision_projection(self) -> bool {
        self != AggregationStrategy::Independent
    }
}

impl fmt::Display for AggregationStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AggregationStrategy {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        AggregationStrategy::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| {
                TensorError::Config(format!(
                    "unknown aggregation {s:?} (expected bmip|addition|attention_sim|joint|unidirectional|independent)"
                ))
            })
    }
}

/// Whether a family of per-depth modules shares one set of weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sharing {
    PerDepth,
    Shared,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    /// J
    pub depth: usize,
    /// b
    pub length: usize,
    pub init_std: f64,
    pub aggregation: AggregationStrategy,
    /// F_l / F_v: one affine map per prompted depth, or one shared map.
    pub projection_sharing: Sharing,
    /// L_l / L_v: one gate per modality, or one per depth.
    pub gate_sharing: Sharing,
    pub gate_init_scale: f64,
    pub gate_init_bias: f64,
    /// Fixed temperature of the cosine-similarity baseline gate.
    pub similarity_temperature: f64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            length: 2,
            init_std: 0.02,
            aggregation: AggregationStrategy::Bmip,
            projection_sharing: Sharing::PerDepth,
            gate_sharing: Sharing::Shared,
            gate_init_scale: 1.0,
            gate_init_bias: 2.0,
            similarity_temperature: 0.1,
        }
    }
}

/// Affine map between prompt widths.
#[derive(Clone, Copy, Debug)]
pub struct Projection {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Projection {
    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

/// The 1×1 gate layer: `logit = a·A + c`.
#[derive(Clone, Copy, Debug)]
pub struct Gate {
    pub scale: ParamId,
    pub bias: ParamId,
}

impl Gate {
    /// `σ(a·A + c)` for an attention column `[b × 1]`.
    pub fn weights(&self, tape: &mut Tape, store: &ParamStore, attention: Var) -> Result<Var> {
        let a = tape.param(store, self.scale);
        let c = tape.param(store, self.bias);
        let z = tape.mul_scalar(attention, a)?;
        let z = tape.add_scalar(z, c)?;
        Ok(tape.sigmoid(z))
    }
}

/// Projection heads and gates; which ones exist depends on the strategy.
#[derive(Clone, Debug, Default)]
pub struct InteractionParams {
    /// F_l: d_v → d_l
    pub language_projection: Vec<Projection>,
    /// F_v: d_l → d_v
    pub vision_projection: Vec<Projection>,
    pub language_gate: Vec<Gate>,
    pub vision_gate: Vec<Gate>,
}

fn pick<T>(v: &[T], depth: usize) -> Option<&T> {
    match v.len() {
        0 => None,
        1 => v.first(),
        _ => v.get(depth - 1),
    }
}

impl InteractionParams {
    pub fn projection(&self, target: Modality, depth: usize) -> Option<&Projection> {
        match target {
            Modality::Language => pick(&self.language_projection, depth),
            Modality::Vision => pick(&self.vision_projection, depth),
        }
    }

    pub fn gate(&self, target: Modality, depth: usize) -> Option<&Gate> {
        match target {
            Modality::Language => pick(&self.language_gate, depth),
            Modality::Vision => pick(&self.vision_gate, depth),
        }
    }

    fn ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for p in self.language_projection.iter().chain(&self.vision_projection) {
            ids.extend([p.weight, p.bias]);
        }
        for g in self.language_gate.iter().chain(&self.vision_gate) {
            ids.extend([g.scale, g.bias]);
        }
        ids
    }
}

/// Prompt stacks plus interaction modules for one tuning run.
#[derive(Clone, Debug)]
pub struct PromptLearner {
    pub config: PromptConfig,
    pub params: ParamStore,
    pub text: PromptStack,
    pub vision: PromptStack,
    pub interaction: InteractionParams,
}

impl PromptLearner {
    pub fn new(backbone: &BackboneConfig, config: PromptConfig, seed: u64) -> Result<Self> {
        if config.depth > backbone.depth {
            return Err(TensorError::Config(format!(
                "prompt depth {} exceeds encoder depth {}",
                config.depth, backbone.depth
            )));
        }
        if !(config.similarity_temperature > 0.0) {
            return Err(TensorError::Config("similarity_temperature must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new(Namespace::Tunable);
        let (j, b, dl, dv) = (config.depth, config.length, backbone.text_width, backbone.vision_width);
        let text = PromptStack::new(&mut params, Modality::Language, j, b, dl, config.init_std, &mut rng)?;
        let vision = PromptStack::new(&mut params, Modality::Vision, j, b, dv, config.init_std, &mut rng)?;

        let strategy = config.aggregation;
        let proj_count = match config.projection_sharing {
            Sharing::PerDepth => j,
            Sharing::Shared => j.min(1),
        };
        let mut make_proj = |params: &mut ParamStore, name: &str, d_in: usize, d_out: usize| -> Vec<Projection> {
            (1..=proj_count)
                .map(|i| Projection {
                    weight: params.insert(
                        format!("{name}.{i}.weight"),
                        Tensor::randn(&[d_in, d_out], 1.0 / (d_in as f64).sqrt(), &mut rng),
                    ),
                    bias: params.insert(format!("{name}.{i}.bias"), Tensor::zeros(&[d_out])),
                })
                .collect()
        };
        let mut interaction = InteractionParams::default();
        if strategy.needs_language_projection() {
            interaction.language_projection = make_proj(&mut params, "interaction.language_projection", dv, dl);
        }
        if strategy.needs_vision_projection() {
            interaction.vision_projection = make_proj(&mut params, "interaction.vision_projection", dl, dv);
        }
        if strategy == AggregationStrategy::Bmip && j > 0 {
            let gates = match config.gate_sharing {
                Sharing::Shared => 1,
                Sharing::PerDepth => j,
            };
            for (m, slot) in [
                (Modality::Language, &mut interaction.language_gate),
                (Modality::Vision, &mut interaction.vision_gate),
            ] {
                for i in 1..=gates {
                    slot.push(Gate {
                        scale: params.insert(
                            format!("interaction.{}_gate.{i}.scale", m.as_str()),
                            Tensor::scalar(config.gate_init_scale),
                        ),
                        bias: params.insert(
                            format!("interaction.{}_gate.{i}.bias", m.as_str()),
                            Tensor::scalar(config.gate_init_bias),
                        ),
                    });
                }
            }
        }
        Ok(Self {
            config,
            params,
            text,
            vision,
            interaction,
        })
    }

    pub fn strategy(&self) -> AggregationStrategy {
        self.config.aggregation
    }

    /// Parameters the optimizer may update. Uni-directional runs learn no
    /// independent vision prompts.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        let mut ids = self.text.prompts.clone();
        if self.strategy() != AggregationStrategy::UniDirectional {
            ids.extend(&self.vision.prompts);
        }
        ids.extend(self.interaction.ids());
        ids
    }

    /// Learnable prompt scalars (prompts only, not projections or gates).
    pub fn prompt_census(&self) -> usize {
        match self.strategy() {
            AggregationStrategy::UniDirectional => self.text.census(),
            _ => self.text.census() + self.vision.census(),
        }
    }

    pub fn trainable_census(&self) -> usize {
        self.trainable_ids().iter().map(|&id| self.params.get(id).numel()).sum()
    }

    /// Drive every gate to `w = 1` (`a = 0`, `c` saturated).
    pub fn saturate_gates(&mut self) {
        let gates: Vec<Gate> = self
            .interaction
            .language_gate
            .iter()
            .chain(&self.interaction.vision_gate)
            .copied()
            .collect();
        for g in gates {
            self.params.get_mut(g.scale).data_mut()[0] = 0.0;
            self.params.get_mut(g.bias).data_mut()[0] = SATURATED_GATE_BIAS;
        }
    }

    /// Copy prompt values from another learner with the same depth, length and widths.
    pub fn copy_prompts_from(&mut self, other: &PromptLearner) -> Result<()> {
        for (dst, src) in [(&self.text, &other.text), (&self.vision, &other.vision)] {
            if dst.prompts.len() != src.prompts.len() {
                return Err(TensorError::Config("prompt depth differs".into()));
            }
            for (&d, &s) in dst.prompts.iter().zip(&src.prompts) {
                let value = other.params.get(s).clone();
                let name = self.params.name(d).to_string();
                self.params.assign(&name, value)?;
            }
        }
        Ok(())
    }
}

/// One gated combination `w ⊙ own + (1 − w) ⊙ other` with `w` per row.
pub fn gated_mix(tape: &mut Tape, own: Var, other: Var, w: Var) -> Result<Var> {
    let keep = tape.scale_rows(own, w)?;
    let rest_w = tape.affine(w, -1.0, 1.0);
    let rest = tape.scale_rows(other, rest_w)?;
    tape.add(keep, rest)
}

/// Bi-directional aggregation at `depth`:
/// returns `(P', P̃')` from raw prompts and the attention columns `[b × 1]`.
#[allow(clippy::too_many_arguments)]
pub fn bmip_aggregate(
    tape: &mut Tape,
    learner: &PromptLearner,
    language_prompt: Var,
    vision_prompt: Var,
    language_attention: Var,
    vision_attention: Var,
    depth: usize,
) -> Result<(Var, Var)> {
    let s = AggregationStrategy::Bmip;
    let (fl, fv) = project_partners(tape, learner, language_prompt, vision_prompt, depth)?;
    let p = aggregate_one(tape, learner, Modality::Language, s, language_prompt, fl, Some(language_attention), depth)?;
    let pv = aggregate_one(tape, learner, Modality::Vision, s, vision_prompt, fv, Some(vision_attention), depth)?;
    Ok((p, pv))
}

/// Baseline aggregation at `depth` for any non-gated strategy.
pub fn baseline_aggregate(
    tape: &mut Tape,
    learner: &PromptLearner,
    language_prompt: Var,
    vision_prompt: Var,
    depth: usize,
) -> Result<(Var, Var)> {
    let s = learner.strategy();
    if s == AggregationStrategy::Bmip {
        return Err(TensorError::Config("baseline_aggregate called with the gated strategy".into()));
    }
    let (fl, fv) = project_partners(tape, learner, language_prompt, vision_prompt, depth)?;
    let p = aggregate_one(tape, learner, Modality::Language, s, language_prompt, fl, None, depth)?;
    let pv = aggregate_one(tape, learner, Modality::Vision, s, vision_prompt, fv, None, depth)?;
    Ok((p, pv))
}

/// `(F_l(P̃ᵢ), F_v(Pᵢ))` for the projections the strategy owns.
pub fn project_partners(
    tape: &mut Tape,
    learner: &PromptLearner,
    language_prompt: Var,
    vision_prompt: Var,
    depth: usize,
) -> Result<(Option<Var>, Option<Var>)> {
    let store = &learner.params;
    let fl = match learner.interaction.projection(Modality::Language, depth) {
        Some(f) => Some(f.apply(tape, store, vision_prompt)?),
        None => None,
    };
    let fv = match learner.interaction.projection(Modality::Vision, depth) {
        Some(f) => Some(f.apply(tape, store, language_prompt)?),
        None => None,
    };
    Ok((fl, fv))
}

/// Augmented prompt for `target` from its own prompt and the projected partner.
#[allow(clippy::too_many_arguments)]
pub(crate) fn aggregate_one(
    tape: &mut Tape,
    learner: &PromptLearner,
    target: Modality,
    strategy: AggregationStrategy,
    own: Var,
    projected: Option<Var>,
    attention: Option<Var>,
    depth: usize,
) -> Result<Var> {
    let j = learner.config.depth;
    if depth == 0 || depth > j {
        return Err(TensorError::Config(format!("aggregation depth {depth} outside 1..={j}")));
    }
    let projected = || {
        projected.ok_or_else(|| TensorError::Config(format!("{strategy} has no {} projection", target.as_str())))
    };
    match (strategy, target) {
        (AggregationStrategy::Independent, _) | (AggregationStrategy::UniDirectional, Modality::Language) => Ok(own),
        (AggregationStrategy::UniDirectional, Modality::Vision) => projected(),
        (AggregationStrategy::Addition, _) => {
            let f = projected()?;
            tape.add(own, f)
        }
        (AggregationStrategy::Joint, _) => {
            let f = projected()?;
            tape.concat_rows(&[own, f])
        }
        (AggregationStrategy::AttentionSim, _) => {
            let f = projected()?;
            let a = tape.normalize_rows(own)?;
            let b = tape.normalize_rows(f)?;
            let ab = tape.mul(a, b)?;
            let cos = tape.row_sums(ab)?;
            let z = tape.scale(cos, 1.0 / learner.config.similarity_temperature);
            let w = tape.sigmoid(z);
            gated_mix(tape, own, f, w)
        }
        (AggregationStrategy::Bmip, _) => {
            let attention = attention.ok_or_else(|| TensorError::Config("gated aggregation needs attention".into()))?;
            let gate = learner
                .interaction
                .gate(target, depth)
                .ok_or_else(|| TensorError::Config("missing gate parameters".into()))?;
            let w = gate.weights(tape, &learner.params, attention)?;
            let f = projected()?;
            gated_mix(tape, own, f, w)
        }
    }
}

/// Mean attention paid to each prompt key, over heads and non-prompt queries.
///
/// `map` is `[heads, n_query, n_key]`; queries whose index is itself a prompt
/// position are excluded.
pub fn extract_prompt_attention(map: &Tensor, prompt_keys: &[usize]) -> Result<Vec<f64>> {
    if map.rank() != 3 {
        return Err(TensorError::InvalidShape {
            shape: map.shape().to_vec(),
            reason: "attention map must be [heads, n_query, n_key]".into(),
        });
    }
    let (h, nq, nk) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let queries: Vec<usize> = (0..nq).filter(|q| !prompt_keys.contains(q)).collect();
    let mut tape = Tape::new();
    let probs = tape.constant(Tensor::matrix(h * nq, nk, map.data().to_vec())?);
    let a = tape.prompt_attention(probs, h, &queries, prompt_keys)?;
    Ok(tape.value(a).data().to_vec())
}
