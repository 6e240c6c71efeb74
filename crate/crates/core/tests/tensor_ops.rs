use bmip_core::tensor::{multi_head_attention, AttentionWeights, Tape, Tensor};
use bmip_core::verify::relative_error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mat(r: usize, c: usize, v: Vec<f64>) -> Tensor {
    Tensor::matrix(r, c, v).unwrap()
}

/// Central differences of a scalar function of one input tensor.
fn numeric_grad(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
    let h = 1e-5;
    (0..x.numel())
        .map(|i| {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

#[test]
fn matmul_of_ones() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::full(&[2, 3], 1.0));
    let b = t.constant(Tensor::full(&[3, 2], 1.0));
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.value(c).shape(), &[2, 2]);
    assert!(t.value(c).data().iter().all(|&v| v == 3.0));
}

#[test]
fn concat_rows_keeps_leading_block() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut t = Tape::new();
    let p = t.constant(Tensor::randn(&[2, 4], 1.0, &mut rng));
    let q = t.constant(Tensor::randn(&[2, 4], 1.0, &mut rng));
    let c = t.concat_rows(&[p, q]).unwrap();
    assert_eq!(t.value(c).shape(), &[4, 4]);
    assert_eq!(&t.value(c).data()[..8], t.value(p).data());
}

#[test]
fn matmul_sum_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a0 = Tensor::randn(&[3, 3], 1.0, &mut rng);
    let b0 = Tensor::randn(&[3, 3], 1.0, &mut rng);
    let f = |a: &Tensor| {
        let mut t = Tape::new();
        let a = t.constant(a.clone());
        let b = t.constant(b0.clone());
        let c = t.matmul(a, b).unwrap();
        let s = t.sum(c);
        t.value(s).data()[0]
    };
    let mut t = Tape::new();
    let a = t.leaf(a0.clone(), true);
    let b = t.constant(b0.clone());
    let c = t.matmul(a, b).unwrap();
    let s = t.sum(c);
    let g = t.backward(s).unwrap();
    let analytic = g.get(a).unwrap().data().to_vec();
    assert!(relative_error(&analytic, &numeric_grad(&a0, f)) < 1e-6);
}

#[test]
fn softmax_symmetry_and_overflow() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::vector(vec![0.0, 0.0]).unwrap());
    let s = t.softmax(x, 0).unwrap();
    assert_eq!(t.value(s).data(), &[0.5, 0.5]);
    let y = t.constant(Tensor::vector(vec![1000.0, 0.0]).unwrap());
    let s = t.softmax(y, 0).unwrap();
    let v = t.value(s).data();
    assert!((v[0] - 1.0).abs() < 1e-12 && v[1].abs() < 1e-12);
}

#[test]
fn softmax_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x0 = Tensor::randn(&[5], 1.0, &mut rng);
    let w0 = Tensor::randn(&[5], 1.0, &mut rng);
    let build = |t: &mut Tape, x| {
        let s = t.softmax(x, 0).unwrap();
        let w = t.constant(w0.clone());
        let m = t.mul(s, w).unwrap();
        t.sum(m)
    };
    let f = |x: &Tensor| {
        let mut t = Tape::new();
        let x = t.constant(x.clone());
        let out = build(&mut t, x);
        t.value(out).data()[0]
    };
    let mut t = Tape::new();
    let x = t.leaf(x0.clone(), true);
    let out = build(&mut t, x);
    let g = t.backward(out).unwrap();
    assert!(relative_error(g.get(x).unwrap().data(), &numeric_grad(&x0, f)) < 1e-6);
}

fn unit_affine(t: &mut Tape, d: usize) -> (bmip_core::tensor::Var, bmip_core::tensor::Var) {
    (t.constant(Tensor::full(&[d], 1.0)), t.constant(Tensor::zeros(&[d])))
}

#[test]
fn layer_norm_edge_cases() {
    let mut t = Tape::new();
    let x = t.constant(mat(1, 4, vec![2.5; 4]));
    let (g, b) = unit_affine(&mut t, 4);
    let y = t.layer_norm(x, g, b).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == 0.0));

    let x = t.constant(mat(1, 2, vec![1.0, -1.0]));
    let (g, b) = unit_affine(&mut t, 2);
    let y = t.layer_norm(x, g, b).unwrap();
    let v = t.value(y).data();
    assert!((v[0] - 1.0).abs() < 1e-4 && (v[1] + 1.0).abs() < 1e-4);
}

#[test]
fn layer_norm_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x0 = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let w0 = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let gain = Tensor::randn(&[4], 1.0, &mut rng);
    let bias = Tensor::randn(&[4], 1.0, &mut rng);
    let build = |t: &mut Tape, x| {
        let g = t.constant(gain.clone());
        let b = t.constant(bias.clone());
        let y = t.layer_norm(x, g, b).unwrap();
        let w = t.constant(w0.clone());
        let m = t.mul(y, w).unwrap();
        t.sum(m)
    };
    let f = |x: &Tensor| {
        let mut t = Tape::new();
        let x = t.constant(x.clone());
        let out = build(&mut t, x);
        t.value(out).data()[0]
    };
    let mut t = Tape::new();
    let x = t.leaf(x0.clone(), true);
    let out = build(&mut t, x);
    let g = t.backward(out).unwrap();
    assert!(relative_error(g.get(x).unwrap().data(), &numeric_grad(&x0, f)) < 1e-5);
}

fn weights(t: &mut Tape, d: usize, rng: &mut ChaCha8Rng) -> AttentionWeights {
    let mut w = || t.constant(Tensor::randn(&[d, d], 0.5, rng));
    let (wq, wk, wv, wo) = (w(), w(), w(), w());
    let mut b = || t.constant(Tensor::zeros(&[d]));
    AttentionWeights {
        wq,
        bq: b(),
        wk,
        bk: b(),
        wv,
        bv: b(),
        wo,
        bo: b(),
    }
}

#[test]
fn attention_over_one_token() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut t = Tape::new();
    let w = weights(&mut t, 4, &mut rng);
    let x = t.constant(Tensor::randn(&[1, 4], 1.0, &mut rng));
    let (out, map) = multi_head_attention(&mut t, x, x, x, &w, 2, false).unwrap();
    assert!(map.to_tensor(&t).data().iter().all(|&p| p == 1.0));
    let v = t.matmul(x, w.wv).unwrap();
    let expected = t.matmul(v, w.wo).unwrap();
    assert!(t.value(out).max_abs_diff(t.value(expected)) < 1e-14);
}

#[test]
fn identical_keys_split_attention_evenly() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut t = Tape::new();
    let w = weights(&mut t, 4, &mut rng);
    let q = t.constant(Tensor::randn(&[3, 4], 1.0, &mut rng));
    let row = Tensor::randn(&[1, 4], 1.0, &mut rng);
    let k = t.constant(mat(2, 4, [row.data(), row.data()].concat()));
    let (_, map) = multi_head_attention(&mut t, q, k, k, &w, 2, false).unwrap();
    for p in map.to_tensor(&t).data() {
        assert!((p - 0.5).abs() < 1e-15);
    }
}
