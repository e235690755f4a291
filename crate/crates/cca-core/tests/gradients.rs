//! Finite-difference verification of every differentiable tape op on
//! randomized shapes, with a generic downstream weighting so output
//! gradients are non-trivial.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use cca_core::rng::{sub_rng, Domain};
use cca_core::tape::{Tape, TensorId};
use cca_core::tensor::{Precision, Tensor};

const H: f64 = 1e-5;
const TOL: f64 = 1e-5;

fn rng(seed: u64) -> ChaCha8Rng {
    sub_rng(seed, Domain::Aux, 100)
}

fn random_data(rng: &mut ChaCha8Rng, numel: usize) -> Vec<f64> {
    (0..numel).map(|_| rng.gen_range(-2.0..2.0)).collect()
}

/// Keep relu inputs away from the kink so the difference quotient is exact.
fn random_data_off_kink(rng: &mut ChaCha8Rng, numel: usize) -> Vec<f64> {
    (0..numel)
        .map(|_| {
            let x: f64 = rng.gen_range(-2.0..2.0);
            if x.abs() < 0.05 {
                x + 0.1 * x.signum() + if x == 0.0 { 0.1 } else { 0.0 }
            } else {
                x
            }
        })
        .collect()
}

struct Case {
    /// Gradient-tracked inputs.
    inputs: Vec<Tensor>,
    /// Builds the expression under test; the harness adds the weighting.
    build: Box<dyn Fn(&mut Tape, &[TensorId]) -> TensorId>,
}

fn check(name: &str, case: Case, weight_seed: u64) {
    // analytic
    let mut tape = Tape::new(Precision::F64);
    let ids: Vec<TensorId> = case.inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = (case.build)(&mut tape, &ids);
    let mut wrng = rng(weight_seed);
    let weight = random_data(&mut wrng, tape.data(out).len());
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(shape, weight.clone()).unwrap();
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum_all(prod).unwrap();
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| tape.grad(id).unwrap().to_vec()).collect();

    // numeric
    let loss_at = |inputs: &[Tensor]| -> f64 {
        let mut t = Tape::new(Precision::F64);
        let ids: Vec<TensorId> = inputs.iter().map(|x| t.leaf(x)).collect();
        let out = (case.build)(&mut t, &ids);
        let shape = t.shape(out).to_vec();
        let w = t.constant(shape, weight.clone()).unwrap();
        let prod = t.mul(out, w).unwrap();
        let l = t.sum_all(prod).unwrap();
        t.data(l)[0]
    };
    for (pi, base) in case.inputs.iter().enumerate() {
        for j in 0..base.numel() {
            let mut plus = case.inputs.clone();
            plus[pi].data_mut()[j] += H;
            let mut minus = case.inputs.clone();
            minus[pi].data_mut()[j] -= H;
            let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * H);
            let a = analytic[pi][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            assert!(
                rel < TOL,
                "{name}: input {pi} coord {j}: analytic {a} vs numeric {numeric} (rel {rel:.3e})"
            );
        }
    }
}

fn tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, random_data(rng, n)).unwrap().with_grad()
}

#[test]
fn matmul_gradients_over_random_shapes() {
    for seed in 0..5 {
        let mut r = rng(seed);
        let (m, k, n) = (r.gen_range(1..=8), r.gen_range(1..=8), r.gen_range(1..=8));
        let a = tensor(&mut r, vec![m, k]);
        let b = tensor(&mut r, vec![k, n]);
        check(
            "matmul",
            Case {
                inputs: vec![a, b],
                build: Box::new(|t, ids| t.matmul(ids[0], ids[1]).unwrap()),
            },
            seed + 1000,
        );
    }
}

#[test]
fn elementwise_gradients_over_random_shapes() {
    for seed in 0..4 {
        let mut r = rng(seed + 10);
        let rows = r.gen_range(1..=8);
        let cols = r.gen_range(1..=8);
        let a = tensor(&mut r, vec![rows, cols]);
        let b = tensor(&mut r, vec![rows, cols]);
        check(
            "add",
            Case {
                inputs: vec![a.clone(), b.clone()],
                build: Box::new(|t, ids| t.add(ids[0], ids[1]).unwrap()),
            },
            seed + 1100,
        );
        check(
            "sub",
            Case {
                inputs: vec![a.clone(), b.clone()],
                build: Box::new(|t, ids| t.sub(ids[0], ids[1]).unwrap()),
            },
            seed + 1200,
        );
        check(
            "mul",
            Case {
                inputs: vec![a.clone(), b],
                build: Box::new(|t, ids| t.mul(ids[0], ids[1]).unwrap()),
            },
            seed + 1300,
        );
        check(
            "scale",
            Case {
                inputs: vec![a.clone()],
                build: Box::new(|t, ids| t.scale(ids[0], -1.7).unwrap()),
            },
            seed + 1400,
        );
        check(
            "add_scalar",
            Case {
                inputs: vec![a],
                build: Box::new(|t, ids| t.add_scalar(ids[0], 0.4).unwrap()),
            },
            seed + 1500,
        );
    }
}

#[test]
fn bias_row_gradients() {
    for seed in 0..4 {
        let mut r = rng(seed + 20);
        let rows = r.gen_range(1..=8);
        let cols = r.gen_range(1..=8);
        let a = tensor(&mut r, vec![rows, cols]);
        let row = tensor(&mut r, vec![1, cols]);
        check(
            "add_row",
            Case {
                inputs: vec![a, row],
                build: Box::new(|t, ids| t.add_row(ids[0], ids[1]).unwrap()),
            },
            seed + 1600,
        );
    }
}

#[test]
fn activation_gradients() {
    for seed in 0..4 {
        let mut r = rng(seed + 30);
        let rows = r.gen_range(1..=8);
        let cols = r.gen_range(1..=8);
        let n = rows * cols;
        let relu_in = Tensor::new(vec![rows, cols], random_data_off_kink(&mut r, n))
            .unwrap()
            .with_grad();
        check(
            "relu",
            Case {
                inputs: vec![relu_in],
                build: Box::new(|t, ids| t.relu(ids[0]).unwrap()),
            },
            seed + 1700,
        );
        let gelu_in = tensor(&mut r, vec![rows, cols]);
        check(
            "gelu",
            Case {
                inputs: vec![gelu_in],
                build: Box::new(|t, ids| t.gelu(ids[0]).unwrap()),
            },
            seed + 1800,
        );
    }
}

#[test]
fn softmax_gradients_both_axes() {
    for seed in 0..4 {
        let mut r = rng(seed + 40);
        let rows = r.gen_range(1..=8);
        let cols = r.gen_range(1..=8);
        for axis in [0usize, 1] {
            let a = tensor(&mut r, vec![rows, cols]);
            check(
                "softmax",
                Case {
                    inputs: vec![a],
                    build: Box::new(move |t, ids| t.softmax(ids[0], axis).unwrap()),
                },
                seed + 1900 + axis as u64,
            );
        }
    }
}

#[test]
fn layernorm_gradients() {
    for seed in 0..4 {
        let mut r = rng(seed + 50);
        let rows = r.gen_range(1..=8);
        let cols = r.gen_range(2..=8);
        let x = tensor(&mut r, vec![rows, cols]);
        let gamma = tensor(&mut r, vec![cols]);
        let beta = tensor(&mut r, vec![cols]);
        check(
            "layernorm",
            Case {
                inputs: vec![x, gamma, beta],
                build: Box::new(|t, ids| t.layernorm(ids[0], ids[1], ids[2], 1e-5).unwrap()),
            },
            seed + 2000,
        );
    }
}

#[test]
fn l2_normalize_gradients() {
    for seed in 0..4 {
        let mut r = rng(seed + 60);
        let rows = r.gen_range(1..=8);
        let cols = r.gen_range(1..=8);
        // keep rows clearly longer than eps so the smooth branch is active
        let mut x = tensor(&mut r, vec![rows, cols]);
        x.data_mut()[0] += 3.0;
        check(
            "l2_normalize",
            Case {
                inputs: vec![x],
                build: Box::new(|t, ids| t.l2_normalize(ids[0], 1e-9).unwrap()),
            },
            seed + 2100,
        );
    }
}

#[test]
fn shape_op_gradients() {
    for seed in 0..4 {
        let mut r = rng(seed + 70);
        let rows = r.gen_range(2..=8);
        let cols = r.gen_range(2..=8);
        let a = tensor(&mut r, vec![rows, cols]);
        let b = tensor(&mut r, vec![rows, cols]);
        check(
            "transpose",
            Case {
                inputs: vec![a.clone()],
                build: Box::new(|t, ids| t.transpose(ids[0]).unwrap()),
            },
            seed + 2200,
        );
        check(
            "concat_rows",
            Case {
                inputs: vec![a.clone(), b.clone()],
                build: Box::new(|t, ids| t.concat_rows(&[ids[0], ids[1]]).unwrap()),
            },
            seed + 2300,
        );
        check(
            "concat_cols",
            Case {
                inputs: vec![a.clone(), b],
                build: Box::new(|t, ids| t.concat_cols(&[ids[0], ids[1]]).unwrap()),
            },
            seed + 2400,
        );
        let lo = r.gen_range(0..rows - 1);
        let hi = r.gen_range(lo + 1..=rows);
        check(
            "slice_rows",
            Case {
                inputs: vec![a.clone()],
                build: Box::new(move |t, ids| t.slice_rows(ids[0], lo, hi).unwrap()),
            },
            seed + 2500,
        );
        let lo = r.gen_range(0..cols - 1);
        let hi = r.gen_range(lo + 1..=cols);
        check(
            "slice_cols",
            Case {
                inputs: vec![a],
                build: Box::new(move |t, ids| t.slice_cols(ids[0], lo, hi).unwrap()),
            },
            seed + 2600,
        );
    }
}

#[test]
fn reduction_gradients() {
    for seed in 0..4 {
        let mut r = rng(seed + 80);
        let rows = r.gen_range(1..=8);
        let cols = r.gen_range(1..=8);
        let a = tensor(&mut r, vec![rows, cols]);
        check(
            "sum_all",
            Case {
                inputs: vec![a.clone()],
                build: Box::new(|t, ids| t.sum_all(ids[0]).unwrap()),
            },
            seed + 2700,
        );
        check(
            "mean_all",
            Case {
                inputs: vec![a],
                build: Box::new(|t, ids| t.mean_all(ids[0]).unwrap()),
            },
            seed + 2800,
        );
    }
}
