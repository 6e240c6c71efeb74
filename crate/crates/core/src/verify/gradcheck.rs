use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::micro;
use crate::aggregation::{interactive_forward, AggregationStrategy};
use crate::backbone::contrastive_loss;
use crate::tensor::{multi_head_attention, AttentionWeights, ParamStore, Result, Tape, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub seed: u64,
    pub entries: usize,
    pub rel_error: f64,
    pub passed: bool,
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`; 0 when both gradients vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let l2 = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = l2(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = l2(&mut analytic.iter().copied()).max(l2(&mut numeric.iter().copied()));
    if scale < 1e-300 {
        diff
    } else {
        diff / scale
    }
}

/// Fixed non-uniform weights so that reductions of normalised outputs
/// (softmax rows, unit vectors) still have a non-zero gradient.
fn probe(numel: usize) -> Tensor {
    let data = (0..numel).map(|i| (0.37 * i as f64 + 0.1).cos()).collect();
    Tensor::vector(data).expect("vector")
}

fn reduce(tape: &mut Tape, y: Var) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let w = probe(tape.value(y).numel()).reshape(shape)?;
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

type OpFn = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

/// Central differences on every entry of every input of `f`.
fn check_leaves(name: &str, seed: u64, inputs: Vec<Tensor>, f: &OpFn) -> Result<GradCheck> {
    let eval = |inputs: &[Tensor], record: bool| -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), record)).collect();
        let y = f(&mut tape, &vars)?;
        let loss = reduce(&mut tape, y)?;
        let value = tape.value(loss).data()[0];
        let mut grad = Vec::new();
        if record {
            let g = tape.backward(loss)?;
            for (v, t) in vars.iter().zip(inputs) {
                match g.get(*v) {
                    Some(gt) => grad.extend_from_slice(gt.data()),
                    None => grad.extend(std::iter::repeat(0.0).take(t.numel())),
                }
            }
        }
        Ok((value, grad))
    };
    let (_, analytic) = eval(&inputs, true)?;
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work = inputs.clone();
    for t in 0..inputs.len() {
        for i in 0..inputs[t].numel() {
            let orig = inputs[t].data()[i];
            work[t].data_mut()[i] = orig + STEP;
            let plus = eval(&work, false)?.0;
            work[t].data_mut()[i] = orig - STEP;
            let minus = eval(&work, false)?.0;
            work[t].data_mut()[i] = orig;
            numeric.push((plus - minus) / (2.0 * STEP));
        }
    }
    Ok(finish(name, seed, &analytic, &numeric))
}

/// Central differences on every entry of a parameter store.
fn check_store(
    name: &str,
    seed: u64,
    store: &mut ParamStore,
    f: &dyn Fn(&mut Tape, &ParamStore) -> Result<Var>,
) -> Result<GradCheck> {
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let grads = tape.backward(loss)?;
    let ids: Vec<_> = store.ids().collect();
    let mut analytic = Vec::new();
    for &id in &ids {
        match grads.param(id) {
            Some(g) => analytic.extend_from_slice(g.data()),
            None => analytic.extend(std::iter::repeat(0.0).take(store.get(id).numel())),
        }
    }
    let value = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store)?;
        Ok(tape.value(loss).data()[0])
    };
    let mut numeric = Vec::with_capacity(analytic.len());
    for &id in &ids {
        for i in 0..store.get(id).numel() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + STEP;
            let plus = value(store)?;
            store.get_mut(id).data_mut()[i] = orig - STEP;
            let minus = value(store)?;
            store.get_mut(id).data_mut()[i] = orig;
            numeric.push((plus - minus) / (2.0 * STEP));
        }
    }
    Ok(finish(name, seed, &analytic, &numeric))
}

fn finish(name: &str, seed: u64, analytic: &[f64], numeric: &[f64]) -> GradCheck {
    let rel_error = relative_error(analytic, numeric);
    GradCheck {
        name: name.to_string(),
        seed,
        entries: analytic.len(),
        rel_error,
        passed: rel_error < TOLERANCE && analytic.iter().all(|g| g.is_finite()),
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(0.5..1.5)).collect()).expect("shape")
}

/// Every differentiable tape operation, one seed.
pub fn op_checks(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();
    macro_rules! check {
        ($name:expr, [$($input:expr),* $(,)?], $f:expr) => {{
            let inputs = vec![$($input),*];
            out.push(check_leaves($name, seed, inputs, &$f)?);
        }};
    }
    check!("add", [randn(r, &[3, 4]), randn(r, &[3, 4])], |t: &mut Tape, v: &[Var]| t.add(v[0], v[1]));
    check!("sub", [randn(r, &[3, 4]), randn(r, &[3, 4])], |t: &mut Tape, v: &[Var]| t.sub(v[0], v[1]));
    check!("mul", [randn(r, &[3, 4]), randn(r, &[3, 4])], |t: &mut Tape, v: &[Var]| t.mul(v[0], v[1]));
    check!("add_row", [randn(r, &[3, 4]), randn(r, &[4])], |t: &mut Tape, v: &[Var]| t.add_row(v[0], v[1]));
    check!("scale_rows", [randn(r, &[3, 4]), randn(r, &[3, 1])], |t: &mut Tape, v: &[Var]| t.scale_rows(v[0], v[1]));
    check!("mul_scalar", [randn(r, &[3, 4]), randn(r, &[1])], |t: &mut Tape, v: &[Var]| t.mul_scalar(v[0], v[1]));
    check!("add_scalar", [randn(r, &[3, 4]), randn(r, &[1])], |t: &mut Tape, v: &[Var]| t.add_scalar(v[0], v[1]));
    check!("affine", [randn(r, &[3, 4])], |t: &mut Tape, v: &[Var]| Ok(t.affine(v[0], -0.7, 0.3)));
    check!("matmul", [randn(r, &[3, 5]), randn(r, &[5, 2])], |t: &mut Tape, v: &[Var]| t.matmul(v[0], v[1]));
    check!("transpose", [randn(r, &[3, 5])], |t: &mut Tape, v: &[Var]| t.transpose(v[0]));
    check!("concat_rows", [randn(r, &[2, 3]), randn(r, &[1, 3])], |t: &mut Tape, v: &[Var]| t.concat_rows(v));
    check!("concat_cols", [randn(r, &[2, 3]), randn(r, &[2, 1])], |t: &mut Tape, v: &[Var]| t.concat_cols(v));
    check!("slice_rows", [randn(r, &[5, 3])], |t: &mut Tape, v: &[Var]| t.slice_rows(v[0], 1, 4));
    check!("slice_cols", [randn(r, &[3, 5])], |t: &mut Tape, v: &[Var]| t.slice_cols(v[0], 2, 5));
    check!("sum", [randn(r, &[3, 4])], |t: &mut Tape, v: &[Var]| Ok(t.sum(v[0])));
    check!("mean", [randn(r, &[3, 4])], |t: &mut Tape, v: &[Var]| Ok(t.mean(v[0])));
    check!("mean_rows", [randn(r, &[3, 4])], |t: &mut Tape, v: &[Var]| t.mean_rows(v[0]));
    check!("row_sums", [randn(r, &[3, 4])], |t: &mut Tape, v: &[Var]| t.row_sums(v[0]));
    check!("softmax_rows", [randn(r, &[3, 4])], |t: &mut Tape, v: &[Var]| t.softmax(v[0], 1));
    check!("softmax_cols", [randn(r, &[3, 4])], |t: &mut Tape, v: &[Var]| t.softmax(v[0], 0));
    check!("layer_norm", [randn(r, &[3, 6]), randn(r, &[6]), randn(r, &[6])], |t: &mut Tape, v: &[Var]| {
        t.layer_norm(v[0], v[1], v[2])
    });
    check!("gelu", [randn(r, &[3, 4])], |t: &mut Tape, v: &[Var]| Ok(t.gelu(v[0])));
    check!("sigmoid", [randn(r, &[3, 4])], |t: &mut Tape, v: &[Var]| Ok(t.sigmoid(v[0])));
    check!("exp", [randn(r, &[3, 4])], |t: &mut Tape, v: &[Var]| Ok(t.exp(v[0])));
    check!("normalize_rows", [randn(r, &[3, 4])], |t: &mut Tape, v: &[Var]| t.normalize_rows(v[0]));
    check!("attention_probs", [randn(r, &[4, 6]), randn(r, &[5, 6])], |t: &mut Tape, v: &[Var]| {
        t.attention_probs(v[0], v[1], 2, false)
    });
    check!("attention_probs_causal", [randn(r, &[4, 6]), randn(r, &[4, 6])], |t: &mut Tape, v: &[Var]| {
        t.attention_probs(v[0], v[1], 3, true)
    });
    check!("attention_apply", [positive(r, &[8, 5]), randn(r, &[5, 6])], |t: &mut Tape, v: &[Var]| {
        t.attention_apply(v[0], v[1], 2)
    });
    check!("prompt_attention", [positive(r, &[10, 5])], |t: &mut Tape, v: &[Var]| {
        t.prompt_attention(v[0], 2, &[0, 2, 4], &[1, 3])
    });
    check!("gather_rows", [randn(r, &[6, 3])], |t: &mut Tape, v: &[Var]| t.gather_rows(v[0], &[4, 0, 4, 2]));
    check!("cross_entropy", [randn(r, &[4, 5])], |t: &mut Tape, v: &[Var]| t.cross_entropy(v[0], &[0, 3, 3, 1]));
    let mha_inputs: Vec<Tensor> = vec![
        randn(r, &[4, 6]),
        randn(r, &[6, 6]),
        randn(r, &[6]),
        randn(r, &[6, 6]),
        randn(r, &[6]),
        randn(r, &[6, 6]),
        randn(r, &[6]),
        randn(r, &[6, 6]),
        randn(r, &[6]),
    ];
    for causal in [false, true] {
        let name = if causal { "multi_head_attention_causal" } else { "multi_head_attention" };
        out.push(check_leaves(name, seed, mha_inputs.clone(), &move |t: &mut Tape, v: &[Var]| {
            let w = AttentionWeights {
                wq: v[1],
                bq: v[2],
                wk: v[3],
                bk: v[4],
                wv: v[5],
                bv: v[6],
                wo: v[7],
                bo: v[8],
            };
            Ok(multi_head_attention(t, v[0], v[0], v[0], &w, 2, causal)?.0)
        })?);
    }
    Ok(out)
}

/// Cross-entropy of the full prompted model on a K = 2, J = 1 micro-model,
/// differentiated with respect to every tunable parameter.
pub fn model_checks(seed: u64) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    for strategy in AggregationStrategy::ALL {
        let (bb, mut learner, images, captions) = micro::setup(strategy, seed, 2, 1)?;
        if strategy == AggregationStrategy::Bmip {
            micro::randomize_gates(&mut learner, seed);
        }
        let name = format!("interactive_forward[{strategy}]");
        let mut store = learner.params.clone();
        let learner_ref = &learner;
        let f = |tape: &mut Tape, store: &ParamStore| -> Result<Var> {
            let mut l = learner_ref.clone();
            l.params = store.clone();
            let refs: Vec<_> = images.iter().collect();
            let trace = interactive_forward(tape, &bb, &l, &refs, &captions)?;
            let targets: Vec<usize> = (0..refs.len()).map(|i| i % captions.len()).collect();
            tape.cross_entropy(trace.logits, &targets)
        };
        out.push(check_store(&name, seed, &mut store, &f)?);
    }
    let (mut bb, _, images, captions) = micro::setup(AggregationStrategy::Independent, seed, 2, 1)?;
    bb.params.unfreeze();
    let examples = micro::pairs(&images, &captions);
    let refs: Vec<_> = examples.iter().collect();
    let mut store = bb.params.clone();
    let bb_ref = &bb;
    let f = |tape: &mut Tape, store: &ParamStore| -> Result<Var> {
        let mut b = bb_ref.clone();
        b.params = store.clone();
        contrastive_loss(tape, &b, &refs)
    };
    out.push(check_store("contrastive_loss[backbone]", seed, &mut store, &f)?);
    Ok(out)
}

/// The whole finite-difference suite over `seeds`.
pub fn gradcheck_suite(seeds: &[u64]) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    for &s in seeds {
        out.extend(op_checks(s)?);
        out.extend(model_checks(s)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert!((relative_error(&[1.0], &[0.0]) - 1.0).abs() < 1e-15);
    }
}
