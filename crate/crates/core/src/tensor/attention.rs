use super::{Result, Tape, Tensor, TensorError, Var};

/// Projection weights of one attention sublayer, already bound on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Attention probabilities of one layer, `[heads·n_query × n_key]` on the tape.
#[derive(Clone, Copy, Debug)]
pub struct AttentionMap {
    pub probs: Var,
    pub heads: usize,
    pub n_query: usize,
    pub n_key: usize,
}

impl AttentionMap {
    /// Materialise as a `[heads, n_query, n_key]` tensor.
    pub fn to_tensor(&self, tape: &Tape) -> Tensor {
        tape.value(self.probs)
            .clone()
            .reshape(vec![self.heads, self.n_query, self.n_key])
            .expect("attention map extents")
    }
}

/// Multi-head attention with input and output projections.
///
/// Returns the projected output `[n_query × width]` and the per-head
/// attention map. `causal` restricts query `i` to keys `0..=i`.
pub fn multi_head_attention(
    tape: &mut Tape,
    queries: Var,
    keys: Var,
    values: Var,
    w: &AttentionWeights,
    heads: usize,
    causal: bool,
) -> Result<(Var, AttentionMap)> {
    let width = tape.value(queries).cols();
    if heads == 0 || width % heads != 0 {
        return Err(TensorError::Config(format!(
            "model width {width} is not divisible by {heads} heads"
        )));
    }
    let q = tape.matmul(queries, w.wq)?;
    let q = tape.add_row(q, w.bq)?;
    let k = tape.matmul(keys, w.wk)?;
    let k = tape.add_row(k, w.bk)?;
    let v = tape.matmul(values, w.wv)?;
    let v = tape.add_row(v, w.bv)?;
    let probs = tape.attention_probs(q, k, heads, causal)?;
    let mixed = tape.attention_apply(probs, v, heads)?;
    let out = tape.matmul(mixed, w.wo)?;
    let out = tape.add_row(out, w.bo)?;
    let map = AttentionMap {
        probs,
        heads,
        n_query: tape.value(queries).rows(),
        n_key: tape.value(keys).rows(),
    };
    Ok((out, map))
}
