//! Finite-difference checks for every differentiable op.
//!
//! Elementwise ops are held to 1e-4 relative error, structured ops to 1e-3.
//! Inputs to kinked ops (relu, max pooling) are drawn away from the kinks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use weaksig_tensor::gradcheck::{finite_difference_check, weighted_sum, Coords};
use weaksig_tensor::nn::{self, AttentionWeights, BatchNormOptions, GruLayer, GruWeights};
use weaksig_tensor::{Result, Tensor};

const STEP: f64 = 1e-5;
const ELEMENTWISE_TOL: f64 = 1e-4;
const STRUCTURED_TOL: f64 = 1e-3;

type Input = (Vec<f64>, Vec<usize>);

fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Input {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    ((0..n).map(|_| rng.random_range(lo..hi)).collect(), shape.to_vec())
}

/// Values bounded away from zero: |x| in [0.1, 1].
fn off_zero(shape: &[usize], seed: u64) -> Input {
    let (d, s) = uniform(shape, 0.1, 1.0, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    (d.into_iter().map(|v| if rng.random_bool(0.5) { v } else { -v }).collect(), s)
}

/// Distinct values with pairwise gaps of at least 0.05, so max selections
/// are stable under the finite-difference step.
fn distinct(shape: &[usize], seed: u64) -> Input {
    let n: usize = shape.iter().product();
    let mut d: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - n as f64 * 0.025).collect();
    d.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    (d, shape.to_vec())
}

fn check<F>(name: &str, f: F, inputs: &[Input], tol: f64)
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let total: usize = inputs.iter().map(|(d, _)| d.len()).sum();
    let coords = if total <= 60 { Coords::All } else { Coords::Random { count: 40, seed: 11 } };
    let report = finite_difference_check(|t| weighted_sum(&f(t)?, 3), inputs, coords, STEP).unwrap();
    assert!(report.checked >= 20.min(total), "{name}: only {} coordinates", report.checked);
    assert!(
        report.max_rel_error < tol,
        "{name}: relative error {:.3e} at {:?}",
        report.max_rel_error,
        report.worst
    );
}

#[test]
fn elementwise_unary_ops() {
    let x = uniform(&[4, 6], -1.5, 1.5, 1);
    let pos = uniform(&[4, 6], 0.2, 2.0, 2);
    check("neg", |t| Ok(t[0].neg()), &[x.clone()], ELEMENTWISE_TOL);
    check("add_scalar", |t| Ok(t[0].add_scalar(0.7)), &[x.clone()], ELEMENTWISE_TOL);
    check("mul_scalar", |t| Ok(t[0].mul_scalar(-1.3)), &[x.clone()], ELEMENTWISE_TOL);
    check("exp", |t| Ok(t[0].exp()), &[x.clone()], ELEMENTWISE_TOL);
    check("ln", |t| Ok(t[0].ln()), &[pos.clone()], ELEMENTWISE_TOL);
    check("square", |t| Ok(t[0].square()), &[x.clone()], ELEMENTWISE_TOL);
    check("sqrt", |t| Ok(t[0].sqrt()), &[pos.clone()], ELEMENTWISE_TOL);
    check("powf", |t| Ok(t[0].powf(-0.5)), &[pos], ELEMENTWISE_TOL);
    check("relu", |t| Ok(t[0].relu()), &[off_zero(&[4, 6], 3)], ELEMENTWISE_TOL);
    check("sigmoid", |t| Ok(t[0].sigmoid()), &[x.clone()], ELEMENTWISE_TOL);
    check("tanh", |t| Ok(t[0].tanh()), &[x.clone()], ELEMENTWISE_TOL);
    check("softplus", |t| Ok(t[0].softplus()), &[x], ELEMENTWISE_TOL);
}

#[test]
fn elementwise_binary_ops_with_broadcasting() {
    let a = uniform(&[3, 4], -1.0, 1.0, 4);
    let b = uniform(&[3, 4], -1.0, 1.0, 5);
    let row = uniform(&[4], -1.0, 1.0, 6);
    let col = uniform(&[3, 1], 0.5, 1.5, 7);
    check("add", |t| t[0].add(&t[1]), &[a.clone(), b.clone()], ELEMENTWISE_TOL);
    check("sub", |t| t[0].sub(&t[1]), &[a.clone(), b.clone()], ELEMENTWISE_TOL);
    check("mul", |t| t[0].mul(&t[1]), &[a.clone(), b], ELEMENTWISE_TOL);
    check("div", |t| t[0].div(&t[1]), &[a.clone(), col.clone()], ELEMENTWISE_TOL);
    check("add_row", |t| t[0].add(&t[1]), &[a.clone(), row.clone()], ELEMENTWISE_TOL);
    check("mul_row", |t| t[1].mul(&t[0]), &[a.clone(), row], ELEMENTWISE_TOL);
    check("sub_col", |t| t[0].sub(&t[1]), &[a, col], ELEMENTWISE_TOL);
}

#[test]
fn reductions() {
    let x = uniform(&[2, 3, 4], -1.0, 1.0, 8);
    check("sum", |t| Ok(t[0].sum()), &[x.clone()], ELEMENTWISE_TOL);
    check("mean", |t| Ok(t[0].mean()), &[x.clone()], ELEMENTWISE_TOL);
    check("sum_axes", |t| t[0].sum_axes(&[0, 2], false), &[x.clone()], ELEMENTWISE_TOL);
    check("mean_axes", |t| t[0].mean_axes(&[1], true), &[x], ELEMENTWISE_TOL);
    check("max_axis", |t| t[0].max_axis(1, false), &[distinct(&[2, 3, 4], 9)], ELEMENTWISE_TOL);
}

#[test]
fn shape_ops() {
    let x = uniform(&[2, 3, 4], -1.0, 1.0, 10);
    check("reshape", |t| t[0].reshape(&[6, 4]), &[x.clone()], ELEMENTWISE_TOL);
    check("permute", |t| t[0].permute(&[2, 0, 1]), &[x.clone()], ELEMENTWISE_TOL);
    check("transpose_last", |t| t[0].transpose_last(), &[x.clone()], ELEMENTWISE_TOL);
    check("narrow", |t| t[0].narrow(2, 1, 2), &[x.clone()], ELEMENTWISE_TOL);
    let y = uniform(&[2, 1, 4], -1.0, 1.0, 11);
    check("concat", |t| Tensor::concat(&[t[0].clone(), t[1].clone(), t[0].clone()], 1), &[x, y], ELEMENTWISE_TOL);
    let logits = uniform(&[5, 3], -2.0, 2.0, 12);
    check("gather_rows", |t| t[0].gather_rows(&[0, 2, 1, 1, 0]), &[logits], ELEMENTWISE_TOL);
}

#[test]
fn matmul_variants() {
    check(
        "matmul_2d",
        |t| t[0].matmul(&t[1]),
        &[uniform(&[3, 4], -1.0, 1.0, 13), uniform(&[4, 5], -1.0, 1.0, 14)],
        STRUCTURED_TOL,
    );
    check(
        "matmul_batched",
        |t| t[0].matmul(&t[1]),
        &[uniform(&[2, 3, 4], -1.0, 1.0, 15), uniform(&[2, 4, 2], -1.0, 1.0, 16)],
        STRUCTURED_TOL,
    );
    check(
        "matmul_shared_rhs",
        |t| t[0].matmul(&t[1]),
        &[uniform(&[2, 3, 4], -1.0, 1.0, 17), uniform(&[4, 3], -1.0, 1.0, 18)],
        STRUCTURED_TOL,
    );
}

#[test]
fn softmax_family() {
    let x = uniform(&[3, 5], -2.0, 2.0, 19);
    check("softmax", |t| t[0].softmax(), &[x.clone()], ELEMENTWISE_TOL);
    check("log_softmax", |t| t[0].log_softmax(), &[x], ELEMENTWISE_TOL);
}

#[test]
fn conv1d_gradients() {
    for &(stride, pad) in &[(1, 0), (2, 1), (1, 3)] {
        check(
            &format!("conv1d s{stride} p{pad}"),
            |t| t[0].conv1d(&t[1], Some(&t[2]), stride, pad),
            &[uniform(&[2, 3, 9], -1.0, 1.0, 20), uniform(&[4, 3, 3], -1.0, 1.0, 21), uniform(&[4], -1.0, 1.0, 22)],
            STRUCTURED_TOL,
        );
    }
    check(
        "conv1d unbatched",
        |t| t[0].conv1d(&t[1], None, 1, 1),
        &[uniform(&[2, 7], -1.0, 1.0, 23), uniform(&[3, 2, 3], -1.0, 1.0, 24)],
        STRUCTURED_TOL,
    );
}

#[test]
fn conv2d_gradients() {
    for &(stride, pad) in &[(1, 0), (1, 1), (2, 1)] {
        check(
            &format!("conv2d s{stride} p{pad}"),
            |t| t[0].conv2d(&t[1], Some(&t[2]), stride, pad),
            &[
                uniform(&[2, 2, 5, 6], -1.0, 1.0, 25),
                uniform(&[3, 2, 3, 3], -1.0, 1.0, 26),
                uniform(&[3], -1.0, 1.0, 27),
            ],
            STRUCTURED_TOL,
        );
    }
}

#[test]
fn reverse_conv2d_gradients() {
    check(
        "reverse_conv2d",
        |t| t[0].reverse_conv2d(&t[1], Some(&t[2])),
        &[uniform(&[2, 2, 6, 5], -1.0, 1.0, 28), uniform(&[2, 3, 5, 5], -1.0, 1.0, 29), uniform(&[3], -1.0, 1.0, 30)],
        STRUCTURED_TOL,
    );
}

#[test]
fn pooling_gradients() {
    let x = uniform(&[2, 2, 6, 8], -1.0, 1.0, 31);
    check("max_pool2d", |t| t[0].max_pool2d(2, 2), &[distinct(&[2, 2, 6, 8], 32)], STRUCTURED_TOL);
    check("avg_pool2d", |t| t[0].avg_pool2d(3, 2), &[x.clone()], STRUCTURED_TOL);
    check("adaptive_avg_pool2d", |t| t[0].adaptive_avg_pool2d(4, 3), &[x.clone()], STRUCTURED_TOL);
    check("upsample_nearest2d", |t| t[0].upsample_nearest2d(2), &[x], STRUCTURED_TOL);
    let s = uniform(&[2, 3, 10], -1.0, 1.0, 33);
    check("max_pool1d", |t| t[0].max_pool1d(2, 2), &[distinct(&[2, 3, 10], 34)], STRUCTURED_TOL);
    check("avg_pool1d", |t| t[0].avg_pool1d(3, 1), &[s.clone()], STRUCTURED_TOL);
    check("adaptive_avg_pool1d", |t| t[0].adaptive_avg_pool1d(3), &[s], STRUCTURED_TOL);
}

#[test]
fn linear_and_normalisation_gradients() {
    check(
        "linear",
        |t| nn::linear(&t[0], &t[1], Some(&t[2])),
        &[uniform(&[3, 4], -1.0, 1.0, 35), uniform(&[4, 2], -1.0, 1.0, 36), uniform(&[2], -1.0, 1.0, 37)],
        STRUCTURED_TOL,
    );
    check(
        "layer_norm",
        |t| nn::layer_norm(&t[0], &[1], &t[1], &t[2], 1e-5),
        &[uniform(&[3, 5], -2.0, 2.0, 38), uniform(&[5], 0.5, 1.5, 39), uniform(&[5], -0.5, 0.5, 40)],
        STRUCTURED_TOL,
    );
    let bn_inputs = [uniform(&[3, 2, 4], -2.0, 2.0, 41), uniform(&[2], 0.5, 1.5, 42), uniform(&[2], -0.5, 0.5, 43)];
    check(
        "batch_norm train",
        |t| Ok(nn::batch_norm(&t[0], &t[1], &t[2], &[0.0; 2], &[1.0; 2], BatchNormOptions::default())?.0),
        &bn_inputs,
        STRUCTURED_TOL,
    );
    let eval = BatchNormOptions { training: false, ..Default::default() };
    check(
        "batch_norm eval",
        |t| Ok(nn::batch_norm(&t[0], &t[1], &t[2], &[0.3, -0.2], &[1.5, 0.7], eval)?.0),
        &bn_inputs,
        STRUCTURED_TOL,
    );
}

fn gru_inputs(input: usize, hidden: usize, layers: usize, seed: u64) -> Vec<Input> {
    let mut out = Vec::new();
    for l in 0..layers {
        let fan_in = if l == 0 { input } else { 2 * hidden };
        for d in 0..2 {
            let s = seed + (l * 10 + d * 4) as u64;
            out.push(uniform(&[fan_in, 3 * hidden], -0.6, 0.6, s));
            out.push(uniform(&[hidden, 3 * hidden], -0.6, 0.6, s + 1));
            out.push(uniform(&[3 * hidden], -0.3, 0.3, s + 2));
            out.push(uniform(&[3 * hidden], -0.3, 0.3, s + 3));
        }
    }
    out
}

fn gru_layers(t: &[Tensor]) -> Vec<GruLayer> {
    let w = |c: &[Tensor]| GruWeights {
        w_ih: c[0].clone(),
        w_hh: c[1].clone(),
        b_ih: c[2].clone(),
        b_hh: c[3].clone(),
    };
    t.chunks(8).map(|c| GruLayer { forward: w(&c[..4]), backward: w(&c[4..]) }).collect()
}

#[test]
fn gru_gradients_on_three_step_toy() {
    let mut inputs = vec![uniform(&[3, 2], -1.0, 1.0, 44)];
    inputs.extend(gru_inputs(2, 3, 2, 100));
    check("gru_bidirectional", |t| nn::gru_bidirectional(&t[0], &gru_layers(&t[1..])), &inputs, STRUCTURED_TOL);

    let mut batched = vec![uniform(&[2, 3, 2], -1.0, 1.0, 45)];
    batched.extend(gru_inputs(2, 2, 4, 200));
    check("gru four layers", |t| nn::gru_bidirectional(&t[0], &gru_layers(&t[1..])), &batched, STRUCTURED_TOL);
}

#[test]
fn attention_gradients() {
    let d = 4;
    let mut inputs = vec![uniform(&[2, 3, d], -1.0, 1.0, 46)];
    for i in 0..4 {
        inputs.push(uniform(&[d, d], -0.8, 0.8, 47 + 2 * i));
        inputs.push(uniform(&[d], -0.3, 0.3, 48 + 2 * i));
    }
    let f = |t: &[Tensor]| {
        let w = AttentionWeights {
            wq: t[1].clone(),
            bq: t[2].clone(),
            wk: t[3].clone(),
            bk: t[4].clone(),
            wv: t[5].clone(),
            bv: t[6].clone(),
            wo: t[7].clone(),
            bo: t[8].clone(),
        };
        Ok(nn::multi_head_attention(&t[0], &w, 2)?.0)
    };
    check("multi_head_attention", f, &inputs, STRUCTURED_TOL);
}

#[test]
fn fd_check_on_quadratic_is_tight() {
    let x = uniform(&[6], -2.0, 2.0, 60);
    let r = finite_difference_check(|t| Ok(t[0].square().mul_scalar(1.5).sum()), &[x], Coords::All, STEP).unwrap();
    assert!(r.max_rel_error < 1e-8, "{}", r.max_rel_error);
}

#[test]
fn fd_check_on_linear_is_exact_to_roundoff() {
    let x = uniform(&[6], -2.0, 2.0, 61);
    let w = Tensor::new(vec![0.5, -1.0, 2.0, 0.25, 3.0, -0.75], &[6]).unwrap();
    let r = finite_difference_check(|t| Ok(t[0].mul(&w)?.sum()), &[x], Coords::All, STEP).unwrap();
    assert!(r.max_rel_error < 1e-9, "{}", r.max_rel_error);
}

#[test]
fn fd_check_flags_corrupted_gradient() {
    let x = uniform(&[5], 0.5, 2.0, 62);
    // forward is x^2 but the declared derivative is 3x
    let r = finite_difference_check(|t| Ok(t[0].map(|v| v * v, |v, _| 3.0 * v).sum()), &[x], Coords::All, STEP)
        .unwrap();
    assert!(r.max_rel_error > 1e-2, "{}", r.max_rel_error);
    assert!(r.worst.is_some());
}

#[test]
fn store_check_covers_a_small_network() {
    use weaksig_tensor::gradcheck::store_gradient_check;
    use weaksig_tensor::ParamStore;
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let mut store = ParamStore::new();
    let w1 = store.uniform("w1", &[3, 5], 3, &mut rng);
    let b1 = store.uniform("b1", &[5], 3, &mut rng);
    let w2 = store.uniform("w2", &[5, 2], 5, &mut rng);
    store.buffer("unused", &[2], 1.0);
    let x = Tensor::new(uniform(&[4, 3], -1.0, 1.0, 71).0, &[4, 3]).unwrap();
    let loss = |s: &weaksig_tensor::Session| {
        let h = nn::linear(&x, s.var(w1), Some(s.var(b1)))?.tanh();
        weighted_sum(&nn::linear(&h, s.var(w2), None)?, 4)
    };
    let r = store_gradient_check(&store, loss, 20, 1, STEP).unwrap();
    assert_eq!(r.checked, 20);
    assert!(r.max_rel_error < STRUCTURED_TOL, "{:?}", r.worst);
}
