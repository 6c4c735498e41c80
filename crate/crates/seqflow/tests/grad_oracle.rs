//! Finite-difference oracles for the reverse-mode tape.
//!
//! Every gradient rule is checked against central differences computed
//! from nothing but the forward pass, and matrix multiplication is checked
//! against an independent triple loop.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seqflow::numerics::{
    attention_block_tape, standard_normal, AttentionLayer, MaskKind, ParamStore, Tape, Tensor,
};

fn leaf(tape: &mut Tape, rows: usize, cols: usize, data: Vec<f64>) -> usize {
    let mut t = Tensor::from_rows(rows, cols, data).unwrap();
    t.requires_grad = true;
    tape.leaf(t)
}

/// Central-difference check of d(loss)/d(x) for a scalar-valued graph.
/// `build` must construct the same graph from scratch for any input.
fn fd_check(rows: usize, cols: usize, x0: &[f64], build: impl Fn(&mut Tape, usize) -> usize, tol: f64) {
    let mut tape = Tape::new();
    let x = leaf(&mut tape, rows, cols, x0.to_vec());
    let loss = build(&mut tape, x);
    assert!(tape.value(loss).is_scalar(), "loss must be scalar");
    tape.backward(loss).unwrap();
    let grad = tape.grad(x).expect("input gradient").to_vec();

    let eval = |data: &[f64]| -> f64 {
        let mut t = Tape::new();
        let x = leaf(&mut t, rows, cols, data.to_vec());
        let l = build(&mut t, x);
        t.value(l).data[0]
    };
    let h = 1e-5;
    for i in 0..x0.len() {
        let mut plus = x0.to_vec();
        let mut minus = x0.to_vec();
        plus[i] += h;
        minus[i] -= h;
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let denom = fd.abs().max(grad[i].abs()).max(1e-4);
        assert!(
            (fd - grad[i]).abs() / denom < tol,
            "entry {i}: analytic {} vs fd {fd}",
            grad[i]
        );
    }
}

fn randn(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| standard_normal(&mut rng)).collect()
}

#[test]
fn matmul_matches_triple_loop_oracle() {
    let (m, k, n) = (5, 7, 4);
    let a = randn(m * k, 1);
    let b = randn(k * n, 2);
    let got = seqflow::numerics::tape::matmul_raw(&a, &b, m, k, n);
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            assert!((got[i * n + j] - s).abs() < 1e-12);
        }
    }
}

#[test]
fn elementwise_chain_gradients() {
    let x0 = randn(12, 3);
    fd_check(4, 3, &x0, |t, x| {
        let e = t.exp(x).unwrap();
        let s = t.add_scalar(e, 1.5).unwrap();
        let l = t.log(s).unwrap();
        let th = t.tanh(l).unwrap();
        let sp = t.softplus(th).unwrap();
        let sc = t.scale(sp, 0.7).unwrap();
        t.sum_all(sc).unwrap()
    }, 1e-4);
}

#[test]
fn binary_op_gradients() {
    let x0 = randn(8, 5);
    fd_check(4, 2, &x0, |t, x| {
        let w = t.constant(Tensor::from_rows(4, 2, randn(8, 77).iter().map(|v| v + 3.0).collect()).unwrap());
        let a = t.mul(x, w).unwrap();
        let b = t.add(a, x).unwrap();
        let c = t.sub(b, w).unwrap();
        let d = t.div(c, w).unwrap();
        let n = t.neg(d).unwrap();
        t.sum_all(n).unwrap()
    }, 1e-4);
}

#[test]
fn clamp_gradient_is_pass_through_inside_only() {
    // values straddling the clamp bounds; FD is valid away from the kinks
    let x0 = vec![-2.0, -0.4, 0.1, 0.9, 2.5, 0.3];
    fd_check(2, 3, &x0, |t, x| {
        let c = t.clamp(x, -1.0, 1.0).unwrap();
        let w = t.constant(Tensor::from_rows(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let m = t.mul(c, w).unwrap();
        t.sum_all(m).unwrap()
    }, 1e-4);
}

#[test]
fn matmul_gradients_both_sides() {
    let x0 = randn(6, 11);
    fd_check(2, 3, &x0, |t, x| {
        let b = t.constant(Tensor::from_rows(3, 4, randn(12, 13)).unwrap());
        let y = t.matmul(x, b).unwrap();
        let w = t.constant(Tensor::from_rows(2, 4, randn(8, 14)).unwrap());
        let m = t.mul(y, w).unwrap();
        t.sum_all(m).unwrap()
    }, 1e-4);
    // transpose-B side: scores = x @ k^T
    fd_check(3, 4, &randn(12, 15), |t, x| {
        let k = t.constant(Tensor::from_rows(5, 4, randn(20, 16)).unwrap());
        let s = t.matmul_tb(x, k).unwrap();
        let w = t.constant(Tensor::from_rows(3, 5, randn(15, 17)).unwrap());
        let m = t.mul(s, w).unwrap();
        t.sum_all(m).unwrap()
    }, 1e-4);
}

#[test]
fn structural_op_gradients() {
    let x0 = randn(20, 21);
    fd_check(4, 5, &x0, |t, x| {
        let a = t.slice_cols(x, 1, 2).unwrap();
        let b = t.slice_cols(x, 3, 2).unwrap();
        let c = t.concat_cols(&[a, b]).unwrap();
        let g = t.gather_rows(c, std::rc::Rc::new(vec![2, 0, 0, 3])).unwrap();
        let rowsum = t.reduce_sum(g, &[1]).unwrap();
        let w = t.constant(Tensor::new(vec![4], vec![1.0, -2.0, 0.5, 3.0]).unwrap());
        let m = t.mul(rowsum, w).unwrap();
        t.sum_all(m).unwrap()
    }, 1e-4);
    fd_check(2, 3, &randn(6, 22), |t, x| {
        let y = t.concat_rows(&[x, x]).unwrap();
        let mn = t.mean_all(y).unwrap();
        t.scale(mn, 5.0).unwrap()
    }, 1e-4);
}

#[test]
fn add_row_broadcast_gradient() {
    let x0 = randn(3, 31);
    fd_check(1, 3, &x0, |t, x| {
        let a = t.constant(Tensor::from_rows(4, 3, randn(12, 32)).unwrap());
        let y = t.add_row(a, x).unwrap();
        let e = t.exp(y).unwrap();
        t.sum_all(e).unwrap()
    }, 1e-4);
}

#[test]
fn masked_softmax_gradient() {
    let n = 4;
    let mask = MaskKind::Causal.materialize(n);
    let x0 = randn(n * n, 41);
    fd_check(n, n, &x0, |t, x| {
        let p = t.masked_softmax(x, mask.clone()).unwrap();
        let w = t.constant(Tensor::from_rows(n, n, randn(n * n, 42)).unwrap());
        let m = t.mul(p, w).unwrap();
        t.sum_all(m).unwrap()
    }, 1e-4);
}

#[test]
fn layer_norm_gradient_wrt_input_gain_and_bias() {
    let x0 = randn(12, 51);
    fd_check(3, 4, &x0, |t, x| {
        let g = t.constant(Tensor::from_rows(1, 4, vec![1.1, 0.9, 1.3, 0.7]).unwrap());
        let b = t.constant(Tensor::from_rows(1, 4, vec![0.1, -0.2, 0.0, 0.4]).unwrap());
        let y = t.layer_norm(x, g, b).unwrap();
        let w = t.constant(Tensor::from_rows(3, 4, randn(12, 52)).unwrap());
        let m = t.mul(y, w).unwrap();
        t.sum_all(m).unwrap()
    }, 1e-4);
    // gain and bias side, via a graph whose input is the gain
    fd_check(1, 4, &randn(4, 53), |t, g| {
        let x = t.constant(Tensor::from_rows(3, 4, randn(12, 54)).unwrap());
        let b = t.constant(Tensor::from_rows(1, 4, vec![0.0; 4]).unwrap());
        let y = t.layer_norm(x, g, b).unwrap();
        let e = t.tanh(y).unwrap();
        t.sum_all(e).unwrap()
    }, 1e-4);
}

#[test]
fn attention_block_gradient_wrt_input() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let layer = AttentionLayer::new(&mut store, "t", 8, 2, &mut rng);
    let x0 = randn(5 * 8, 62);
    fd_check(5, 8, &x0, |t, x| {
        let y = attention_block_tape(t, &store, &layer, x, MaskKind::Causal).unwrap();
        let w = t.constant(Tensor::from_rows(5, 8, randn(40, 63)).unwrap());
        let m = t.mul(y, w).unwrap();
        t.sum_all(m).unwrap()
    }, 2e-4);
}

#[test]
fn attention_parameter_gradients_match_fd() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let layer = AttentionLayer::new(&mut store, "t", 8, 2, &mut rng);
    let x0 = randn(4 * 8, 72);
    let w0 = randn(32, 73);

    let eval = |store: &ParamStore| -> f64 {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(4, 8, x0.clone()).unwrap());
        let y = attention_block_tape(&mut t, store, &layer, x, MaskKind::Causal).unwrap();
        let w = t.constant(Tensor::from_rows(4, 8, w0.clone()).unwrap());
        let m = t.mul(y, w).unwrap();
        let l = t.sum_all(m).unwrap();
        t.value(l).data[0]
    };

    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_rows(4, 8, x0.clone()).unwrap());
    let y = attention_block_tape(&mut tape, &store, &layer, x, MaskKind::Causal).unwrap();
    let w = tape.constant(Tensor::from_rows(4, 8, w0.clone()).unwrap());
    let m = tape.mul(y, w).unwrap();
    let l = tape.sum_all(m).unwrap();
    tape.backward(l).unwrap();
    let grads = tape.param_grads();

    let h = 1e-5;
    for pid in [layer.wq, layer.wv, layer.w1, layer.ln1_g, layer.bo] {
        let g = grads.get(&pid).expect("parameter gradient").to_vec();
        for i in (0..g.len()).step_by(7) {
            let mut s = store.clone();
            s.get_mut(pid).data[i] += h;
            let up = eval(&s);
            let mut s = store.clone();
            s.get_mut(pid).data[i] -= h;
            let dn = eval(&s);
            let fd = (up - dn) / (2.0 * h);
            let denom = fd.abs().max(g[i].abs()).max(1e-4);
            assert!(
                (fd - g[i]).abs() / denom < 2e-4,
                "param {pid:?} entry {i}: analytic {} vs fd {fd}",
                g[i]
            );
        }
    }
}

#[test]
fn backward_twice_is_an_error() {
    let mut t = Tape::new();
    let x = leaf(&mut t, 1, 1, vec![2.0]);
    let l = t.sum_all(x).unwrap();
    t.backward(l).unwrap();
    assert!(t.backward(l).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn prop_elementwise_gradients(seed in 0u64..1000, rows in 1usize..4, cols in 1usize..4) {
        let x0: Vec<f64> = randn(rows * cols, seed).iter().map(|v| v * 0.5).collect();
        fd_check(rows, cols, &x0, |t, x| {
            let e = t.tanh(x).unwrap();
            let s = t.mul(e, x).unwrap();
            let p = t.softplus(s).unwrap();
            t.sum_all(p).unwrap()
        }, 2e-4);
    }

    #[test]
    fn prop_matmul_gradients(seed in 0u64..1000, m in 1usize..4, k in 1usize..4, n in 1usize..4) {
        let x0 = randn(m * k, seed);
        let b0 = randn(k * n, seed.wrapping_add(1));
        let w0 = randn(m * n, seed.wrapping_add(2));
        fd_check(m, k, &x0, |t, x| {
            let b = t.constant(Tensor::from_rows(k, n, b0.clone()).unwrap());
            let y = t.matmul(x, b).unwrap();
            let w = t.constant(Tensor::from_rows(m, n, w0.clone()).unwrap());
            let mm = t.mul(y, w).unwrap();
            t.sum_all(mm).unwrap()
        }, 2e-4);
    }
}
