//! Brute-force forward pass written with plain nested loops over `Vec<f64>`.
//!
//! Nothing here calls into the tape or the tensor kernels; parameter values
//! are copied out of the stores as flat slices and every operation is
//! re-derived from its definition. It exists only to cross-check
//! `interactive_forward`.

use crate::aggregation::{AggregationStrategy, PromptLearner, Sharing};
use crate::backbone::{Backbone, BlockParams};
use crate::data::Image;
use crate::tensor::{ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq)]
struct Mat {
    r: usize,
    c: usize,
    v: Vec<f64>,
}

impl Mat {
    fn zeros(r: usize, c: usize) -> Self {
        Self { r, c, v: vec![0.0; r * c] }
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        self.v[i * self.c + j]
    }

    fn set(&mut self, i: usize, j: usize, x: f64) {
        self.v[i * self.c + j] = x;
    }

    fn rows(&self, start: usize, end: usize) -> Mat {
        Mat {
            r: end - start,
            c: self.c,
            v: self.v[start * self.c..end * self.c].to_vec(),
        }
    }

    fn stack(a: &Mat, b: &Mat) -> Mat {
        let mut v = a.v.clone();
        v.extend_from_slice(&b.v);
        Mat { r: a.r + b.r, c: a.c, v }
    }
}

fn load(store: &ParamStore, id: ParamId) -> Mat {
    let t = store.get(id);
    let shape = t.shape();
    let c = *shape.last().unwrap_or(&1);
    Mat {
        r: t.numel() / c.max(1),
        c,
        v: t.data().to_vec(),
    }
}

fn scalar(store: &ParamStore, id: ParamId) -> f64 {
    store.get(id).data()[0]
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.c, b.r, "oracle matmul extents");
    let mut out = Mat::zeros(a.r, b.c);
    for i in 0..a.r {
        for j in 0..b.c {
            let mut s = 0.0;
            for k in 0..a.c {
                s += a.get(i, k) * b.get(k, j);
            }
            out.set(i, j, s);
        }
    }
    out
}

fn affine(x: &Mat, w: &Mat, b: &Mat) -> Mat {
    let mut y = matmul(x, w);
    for i in 0..y.r {
        for j in 0..y.c {
            y.set(i, j, y.get(i, j) + b.v[j]);
        }
    }
    y
}

fn plus(a: &Mat, b: &Mat) -> Mat {
    Mat {
        r: a.r,
        c: a.c,
        v: a.v.iter().zip(&b.v).map(|(x, y)| x + y).collect(),
    }
}

fn layer_norm(x: &Mat, g: &Mat, b: &Mat) -> Mat {
    let mut out = Mat::zeros(x.r, x.c);
    for i in 0..x.r {
        let mut mean = 0.0;
        for j in 0..x.c {
            mean += x.get(i, j);
        }
        mean /= x.c as f64;
        let mut var = 0.0;
        for j in 0..x.c {
            var += (x.get(i, j) - mean) * (x.get(i, j) - mean);
        }
        var /= x.c as f64;
        let denom = (var + 1e-5).sqrt();
        for j in 0..x.c {
            out.set(i, j, (x.get(i, j) - mean) / denom * g.v[j] + b.v[j]);
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    let pi = std::f64::consts::PI;
    0.5 * x * (1.0 + ((2.0 / pi).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    for k in 0..a.len() {
        dot += a[k] * b[k];
    }
    dot / (norm(a) * norm(b))
}

/// Attention probabilities as `probs[h][q][k]`.
type Probs = Vec<Vec<Vec<f64>>>;

fn block(store: &ParamStore, blk: &BlockParams, heads: usize, causal: bool, x: &Mat) -> (Mat, Probs) {
    let p = |id| load(store, id);
    let h = layer_norm(x, &p(blk.ln1_gain), &p(blk.ln1_bias));
    let q = affine(&h, &p(blk.wq), &p(blk.bq));
    let k = affine(&h, &p(blk.wk), &p(blk.bk));
    let v = affine(&h, &p(blk.wv), &p(blk.bv));
    let n = x.r;
    let d = q.c;
    let dh = d / heads;
    let mut probs = vec![vec![vec![0.0; n]; n]; heads];
    let mut mixed = Mat::zeros(n, d);
    for hh in 0..heads {
        for i in 0..n {
            let visible = if causal { i + 1 } else { n };
            let mut scores = vec![0.0; visible];
            for (j, s) in scores.iter_mut().enumerate() {
                let mut dot = 0.0;
                for t in 0..dh {
                    dot += q.get(i, hh * dh + t) * k.get(j, hh * dh + t);
                }
                *s = dot / (dh as f64).sqrt();
            }
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = scores.iter().map(|s| (s - top).exp()).sum();
            for j in 0..visible {
                probs[hh][i][j] = (scores[j] - top).exp() / total;
            }
            for t in 0..dh {
                let mut acc = 0.0;
                for j in 0..visible {
                    acc += probs[hh][i][j] * v.get(j, hh * dh + t);
                }
                mixed.set(i, hh * dh + t, acc);
            }
        }
    }
    let attn = affine(&mixed, &p(blk.wo), &p(blk.bo));
    let x1 = plus(x, &attn);
    let h2 = layer_norm(&x1, &p(blk.ln2_gain), &p(blk.ln2_bias));
    let mut m = affine(&h2, &p(blk.w1), &p(blk.b1));
    for val in m.v.iter_mut() {
        *val = gelu(*val);
    }
    let m = affine(&m, &p(blk.w2), &p(blk.b2));
    (plus(&x1, &m), probs)
}

/// Mean over heads and non-prompt queries of the attention on each prompt key.
fn prompt_attention(probs: &Probs, prompt_keys: &[usize]) -> Vec<f64> {
    let heads = probs.len();
    let n = probs[0].len();
    let queries: Vec<usize> = (0..n).filter(|q| !prompt_keys.contains(q)).collect();
    prompt_keys
        .iter()
        .map(|&key| {
            let mut s = 0.0;
            for h in probs {
                for &q in &queries {
                    s += h[q][key];
                }
            }
            s / (heads * queries.len()) as f64
        })
        .collect()
}

#[derive(Clone, Copy, PartialEq)]
enum Side {
    Text,
    Vision,
}

struct OracleModel<'a> {
    bb: &'a Backbone,
    learner: &'a PromptLearner,
}

impl OracleModel<'_> {
    fn projected(&self, side: Side, depth: usize) -> Option<Mat> {
        let l = self.learner;
        let (list, partner) = match side {
            Side::Text => (&l.interaction.language_projection, &l.vision.prompts),
            Side::Vision => (&l.interaction.vision_projection, &l.text.prompts),
        };
        let f = match l.config.projection_sharing {
            Sharing::Shared => list.first()?,
            Sharing::PerDepth => list.get(depth - 1)?,
        };
        let partner = load(&l.params, partner[depth - 1]);
        Some(affine(&partner, &load(&l.params, f.weight), &load(&l.params, f.bias)))
    }

    fn gate(&self, side: Side, depth: usize) -> (f64, f64) {
        let l = self.learner;
        let list = match side {
            Side::Text => &l.interaction.language_gate,
            Side::Vision => &l.interaction.vision_gate,
        };
        let g = if list.len() == 1 { &list[0] } else { &list[depth - 1] };
        (scalar(&l.params, g.scale), scalar(&l.params, g.bias))
    }

    fn prompt(&self, side: Side, depth: usize, attention: &[f64]) -> Mat {
        let l = self.learner;
        let own = load(
            &l.params,
            match side {
                Side::Text => l.text.prompts[depth - 1],
                Side::Vision => l.vision.prompts[depth - 1],
            },
        );
        let f = || self.projected(side, depth).expect("projection exists");
        let mix = |w: &[f64], f: &Mat| {
            let mut out = Mat::zeros(own.r, own.c);
            for i in 0..own.r {
                for j in 0..own.c {
                    out.set(i, j, w[i] * own.get(i, j) + (1.0 - w[i]) * f.get(i, j));
                }
            }
            out
        };
        match (l.config.aggregation, side) {
            (AggregationStrategy::Independent, _) | (AggregationStrategy::UniDirectional, Side::Text) => own,
            (AggregationStrategy::UniDirectional, Side::Vision) => f(),
            (AggregationStrategy::Addition, _) => plus(&own, &f()),
            (AggregationStrategy::Joint, _) => Mat::stack(&own, &f()),
            (AggregationStrategy::AttentionSim, _) => {
                let f = f();
                let t = l.config.similarity_temperature;
                let w: Vec<f64> = (0..own.r)
                    .map(|i| sigmoid(cosine(&own.v[i * own.c..(i + 1) * own.c], &f.v[i * f.c..(i + 1) * f.c]) / t))
                    .collect();
                mix(&w, &f)
            }
            (AggregationStrategy::Bmip, _) => {
                let (a, c) = self.gate(side, depth);
                let w: Vec<f64> = attention.iter().map(|&x| sigmoid(a * x + c)).collect();
                mix(&w, &f())
            }
        }
    }

    /// Walk one encoder; returns the last layer's full output and where content starts.
    fn encode(&self, side: Side, embedded: Mat) -> (Mat, usize) {
        let bb = self.bb;
        let blocks = match side {
            Side::Text => &bb.text.blocks,
            Side::Vision => &bb.vision.blocks,
        };
        let j = self.learner.config.depth;
        let n_content = embedded.r;
        let mut content = embedded;
        let mut carried: Option<(Mat, usize)> = None;
        let mut last_probs: Option<(Probs, Vec<usize>)> = None;
        let mut out = Mat::zeros(0, 0);
        let mut start = 0;
        for (i, blk) in blocks.iter().enumerate() {
            let depth = i + 1;
            let (input, nb) = if depth <= j {
                let b = self.learner.config.length;
                let attention = match &last_probs {
                    None => vec![1.0 / (n_content + b) as f64; b],
                    Some((probs, keys)) => prompt_attention(probs, keys),
                };
                let p = self.prompt(side, depth, &attention);
                let nb = p.r;
                match side {
                    Side::Text => (Mat::stack(&p, &content), nb),
                    Side::Vision => (Mat::stack(&content, &p), nb),
                }
            } else if let Some((full, nb)) = carried.take() {
                (full, nb)
            } else {
                (content.clone(), 0)
            };
            let keys: Vec<usize> = match side {
                Side::Text => (0..nb).collect(),
                Side::Vision => (n_content..n_content + nb).collect(),
            };
            let (o, probs) = block(&bb.params, blk, bb.config.heads, side == Side::Text, &input);
            start = if side == Side::Text { nb } else { 0 };
            if depth < j {
                content = match side {
                    Side::Text => o.rows(nb, o.r),
                    Side::Vision => o.rows(0, n_content),
                };
            } else {
                carried = Some((o.clone(), nb));
            }
            last_probs = Some((probs, keys));
            out = o;
        }
        (out, start)
    }

    fn text_feature(&self, caption: &[usize]) -> Vec<f64> {
        let bb = self.bb;
        let table = load(&bb.params, bb.text.token_embedding);
        let pos = load(&bb.params, bb.text.positions);
        let mut w = Mat::zeros(caption.len(), table.c);
        for (i, &t) in caption.iter().enumerate() {
            for j in 0..table.c {
                w.set(i, j, table.get(t, j) + pos.get(i, j));
            }
        }
        let class_pos = caption.iter().rposition(|&t| t != 0).expect("caption has a class token");
        let (out, start) = self.encode(Side::Text, w);
        let row = out.rows(start + class_pos, start + class_pos + 1);
        let h = layer_norm(
            &row,
            &load(&bb.params, bb.text.ln_final_gain),
            &load(&bb.params, bb.text.ln_final_bias),
        );
        matmul(&h, &load(&bb.params, bb.text.projection)).v
    }

    fn image_feature(&self, image: &Image) -> Vec<f64> {
        let bb = self.bb;
        let p = bb.config.patch_size;
        let grid = image.side / p;
        let mut patches = Mat::zeros(grid * grid, image.channels * p * p);
        for gy in 0..grid {
            for gx in 0..grid {
                let mut col = 0;
                for c in 0..image.channels {
                    for y in 0..p {
                        for x in 0..p {
                            patches.set(gy * grid + gx, col, image.at(c, gy * p + y, gx * p + x));
                            col += 1;
                        }
                    }
                }
            }
        }
        let e = affine(
            &patches,
            &load(&bb.params, bb.vision.patch_weight),
            &load(&bb.params, bb.vision.patch_bias),
        );
        let tokens = Mat::stack(&load(&bb.params, bb.vision.class_token), &e);
        let tokens = plus(&tokens, &load(&bb.params, bb.vision.positions));
        let (out, _) = self.encode(Side::Vision, tokens);
        let h = layer_norm(
            &out.rows(0, 1),
            &load(&bb.params, bb.vision.ln_post_gain),
            &load(&bb.params, bb.vision.ln_post_bias),
        );
        matmul(&h, &load(&bb.params, bb.vision.projection)).v
    }
}

/// `cos(x_b, z_n) / τ` computed without the tape, as `[B][N]`.
pub fn naive_logits(backbone: &Backbone, learner: &PromptLearner, images: &[&Image], captions: &[Vec<usize>]) -> Vec<Vec<f64>> {
    let model = OracleModel { bb: backbone, learner };
    let tau = scalar(&backbone.params, backbone.log_tau).exp();
    let z: Vec<Vec<f64>> = captions.iter().map(|c| model.text_feature(c)).collect();
    images
        .iter()
        .map(|im| {
            let x = model.image_feature(im);
            z.iter().map(|zn| cosine(&x, zn) / tau).collect()
        })
        .collect()
}
