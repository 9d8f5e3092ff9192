//! Finite-difference verification of every tape kernel.
//!
//! Shared by the test suite and the `gradcheck` CLI command. Each kernel is
//! wrapped in a scalar loss (a fixed random linear functional of its output),
//! backpropagated analytically, and compared coordinate-by-coordinate against
//! [`finite_diff_grad`]. Inputs come from a seeded stream, so a passing suite
//! stays passing.

use std::sync::Arc;

use crate::error::Result;
use crate::numerics::gradcheck::{check_gradient, finite_diff_grad};
use crate::numerics::tape::{BnState, Tape, Var};
use crate::numerics::tensor::Tensor;
use crate::rng::Rng;

/// Result of one kernel check.
#[derive(Debug, Clone)]
pub struct KernelCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub pass: bool,
}

const FD_STEP: f64 = 1e-5;

fn random_tensor(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.uniform(-2.0, 2.0)).collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

/// Random tensor with no coordinate near zero, for kernels with a kink at
/// the origin (SELU, leaky ReLU, max) where finite differences straddle it.
fn random_tensor_off_origin(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let mag = rng.uniform(0.05, 2.0);
            if rng.bernoulli(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

fn random_probabilities(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.uniform(0.1, 0.9)).collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

/// Check one kernel: `build` maps input vars to an output var; the gradient
/// w.r.t. each input in turn is compared against finite differences.
fn check_op<F>(name: &str, inputs: &[Tensor], rng: &mut Rng, tol: f64, build: F) -> KernelCheck
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let run = |tensors: &[Tensor], track: usize| -> Result<(f64, Tensor)> {
        let mut tape = Tape::new();
        let mut vars = Vec::with_capacity(tensors.len());
        for (k, t) in tensors.iter().enumerate() {
            vars.push(if k == track { tape.param(t.clone(), 0)? } else { tape.leaf(t.clone())? });
        }
        let out = build(&mut tape, &vars)?;
        let (r, c) = tape.shape(out);
        // Fixed functional of the output; varied entries catch transposed
        // or misrouted gradients that a plain sum would miss.
        let w = Tensor::from_vec(r, c, (0..r * c).map(|i| 0.3 + 0.1 * (i as f64 % 7.0)).collect())?;
        let wl = tape.leaf(w)?;
        let prod = tape.hadamard(out, wl)?;
        let loss = tape.sum_all(prod)?;
        let value = tape.value(loss).item()?;
        let grad = tape
            .backward(loss, 1)?
            .take(0)
            .unwrap_or_else(|| Tensor::zeros(tensors[track].rows(), tensors[track].cols()));
        Ok((value, grad))
    };

    let mut worst = 0.0f64;
    for track in 0..inputs.len() {
        let analytic = match run(inputs, track) {
            Ok((_, g)) => g,
            Err(e) => {
                return KernelCheck { name: format!("{} (error: {})", name, e), max_rel_error: f64::INFINITY, pass: false }
            }
        };
        let numeric = finite_diff_grad(
            |x| {
                let mut probe: Vec<Tensor> = inputs.to_vec();
                probe[track] = x.clone();
                run(&probe, track).map(|(v, _)| v)
            },
            &inputs[track],
            FD_STEP,
        );
        let numeric = match numeric {
            Ok(n) => n,
            Err(e) => {
                return KernelCheck { name: format!("{} (error: {})", name, e), max_rel_error: f64::INFINITY, pass: false }
            }
        };
        let chk = check_gradient(&analytic, &numeric).expect("shapes match");
        worst = worst.max(chk.max_rel_error);
    }
    let _ = rng;
    KernelCheck { name: name.to_string(), max_rel_error: worst, pass: worst <= tol }
}

/// Run the full kernel suite at the given tolerance (1e-4 in the acceptance
/// gate). Covers edge-case shapes 1x1, 1xN, Nx1 alongside generic matrices.
pub fn run_kernel_suite(seed: u64, tol: f64) -> Vec<KernelCheck> {
    let mut rng = Rng::from_seed(seed);
    let mut out = Vec::new();
    let shapes: [(usize, usize); 4] = [(1, 1), (1, 5), (5, 1), (3, 4)];

    for &(r, c) in &shapes {
        let x = random_tensor(&mut rng, r, c);
        let y = random_tensor(&mut rng, r, c);
        out.push(check_op(&format!("add {}x{}", r, c), &[x.clone(), y.clone()], &mut rng, tol, |t, v| t.add(v[0], v[1])));
        out.push(check_op(&format!("hadamard {}x{}", r, c), &[x.clone(), y.clone()], &mut rng, tol, |t, v| {
            t.hadamard(v[0], v[1])
        }));
        out.push(check_op(&format!("scale {}x{}", r, c), &[x.clone()], &mut rng, tol, |t, v| t.scale(v[0], -1.7)));
        out.push(check_op(&format!("sigmoid {}x{}", r, c), &[x.clone()], &mut rng, tol, |t, v| t.sigmoid(v[0])));
        out.push(check_op(&format!("tanh {}x{}", r, c), &[x.clone()], &mut rng, tol, |t, v| t.tanh(v[0])));
        let xo = random_tensor_off_origin(&mut rng, r, c);
        out.push(check_op(&format!("selu {}x{}", r, c), &[xo.clone()], &mut rng, tol, |t, v| t.selu(v[0])));
        out.push(check_op(&format!("leaky_relu {}x{}", r, c), &[xo.clone()], &mut rng, tol, |t, v| {
            t.leaky_relu(v[0], 0.2)
        }));
        out.push(check_op(&format!("row_softmax {}x{}", r, c), &[x.clone()], &mut rng, tol, |t, v| t.row_softmax(v[0])));
        out.push(check_op(&format!("row_log_softmax {}x{}", r, c), &[x.clone()], &mut rng, tol, |t, v| {
            t.row_log_softmax(v[0])
        }));
        out.push(check_op(&format!("mean_rows {}x{}", r, c), &[x.clone()], &mut rng, tol, |t, v| t.mean_rows(v[0])));
        out.push(check_op(&format!("mean_cols {}x{}", r, c), &[x.clone()], &mut rng, tol, |t, v| t.mean_cols(v[0])));
        out.push(check_op(&format!("sum_all {}x{}", r, c), &[x.clone()], &mut rng, tol, |t, v| t.sum_all(v[0])));
        out.push(check_op(&format!("transpose {}x{}", r, c), &[x.clone()], &mut rng, tol, |t, v| t.transpose(v[0])));
        let p = random_probabilities(&mut rng, r, c);
        out.push(check_op(&format!("bernoulli_entropy {}x{}", r, c), &[p], &mut rng, tol, |t, v| {
            t.bernoulli_entropy(v[0])
        }));
    }

    // matmul over mixed shapes, including degenerate ones.
    for &(m, k, n) in &[(1usize, 1usize, 1usize), (1, 4, 3), (4, 1, 2), (3, 4, 2)] {
        let a = random_tensor(&mut rng, m, k);
        let b = random_tensor(&mut rng, k, n);
        out.push(check_op(&format!("matmul {}x{}x{}", m, k, n), &[a, b], &mut rng, tol, |t, v| t.matmul(v[0], v[1])));
    }

    // Broadcast add of a 1xC bias over rows.
    let x = random_tensor(&mut rng, 4, 3);
    let bias = random_tensor(&mut rng, 1, 3);
    out.push(check_op("add broadcast 4x3+1x3", &[x, bias], &mut rng, tol, |t, v| t.add(v[0], v[1])));

    // Concatenation both ways.
    let a = random_tensor(&mut rng, 3, 2);
    let b = random_tensor(&mut rng, 3, 4);
    out.push(check_op("concat_cols", &[a, b], &mut rng, tol, |t, v| t.concat_cols(&[v[0], v[1]])));
    let a = random_tensor(&mut rng, 2, 3);
    let b = random_tensor(&mut rng, 4, 3);
    out.push(check_op("concat_rows", &[a, b], &mut rng, tol, |t, v| t.concat_rows(&[v[0], v[1]])));

    // Masked softmax with a mix of masked rows.
    let x = random_tensor(&mut rng, 3, 4);
    let mask = Arc::new(vec![
        true, false, true, true, //
        true, true, true, true, //
        false, false, true, false,
    ]);
    out.push(check_op("masked_row_softmax", &[x], &mut rng, tol, move |t, v| {
        t.masked_row_softmax(v[0], mask.clone())
    }));

    // Layer norm: gradient w.r.t. input, gamma, and beta.
    let x = random_tensor(&mut rng, 3, 5);
    let gamma = random_tensor(&mut rng, 1, 5);
    let beta = random_tensor(&mut rng, 1, 5);
    out.push(check_op("layer_norm", &[x, gamma, beta], &mut rng, tol, |t, v| {
        t.layer_norm(v[0], v[1], v[2], 1e-5)
    }));

    // Batch norm in both modes.
    let x = random_tensor(&mut rng, 6, 3);
    let gamma = random_tensor(&mut rng, 1, 3);
    let beta = random_tensor(&mut rng, 1, 3);
    out.push(check_op("batch_norm_1d train", &[x.clone(), gamma.clone(), beta.clone()], &mut rng, tol, |t, v| {
        let mut state = BnState::new(3);
        t.batch_norm_1d(v[0], v[1], v[2], &mut state, true)
    }));
    out.push(check_op("batch_norm_1d infer", &[x, gamma, beta], &mut rng, tol, |t, v| {
        let mut state = BnState::new(3);
        state.mean = vec![0.3, -0.1, 0.7];
        state.var = vec![1.7, 0.4, 2.2];
        t.batch_norm_1d(v[0], v[1], v[2], &mut state, false)
    }));

    // Slicing and gathering.
    let x = random_tensor(&mut rng, 5, 4);
    out.push(check_op("slice_rows", &[x.clone()], &mut rng, tol, |t, v| t.slice_rows(v[0], 1, 3)));
    out.push(check_op("slice_cols", &[x.clone()], &mut rng, tol, |t, v| t.slice_cols(v[0], 1, 2)));
    let idx = Arc::new(vec![4usize, 0, 2, 0]);
    out.push(check_op("gather_rows", &[x.clone()], &mut rng, tol, move |t, v| {
        t.gather_rows(v[0], idx.clone())
    }));
    out.push(check_op("tile_rows", &[x], &mut rng, tol, |t, v| t.tile_rows(v[0], 3)));

    // Block ops: two 3-node graphs stacked.
    let x = random_tensor(&mut rng, 6, 4);
    let m1 = Arc::new(random_tensor(&mut rng, 3, 3));
    let m2 = Arc::new(random_tensor(&mut rng, 3, 3));
    let mats = Arc::new(vec![m1, m2]);
    out.push(check_op("block_lmul", &[x.clone()], &mut rng, tol, move |t, v| {
        t.block_lmul(v[0], mats.clone())
    }));
    out.push(check_op("block_mean_rows", &[x.clone()], &mut rng, tol, |t, v| t.block_mean_rows(v[0], 3)));
    let xo = random_tensor_off_origin(&mut rng, 6, 4);
    out.push(check_op("block_max_rows", &[xo], &mut rng, tol, |t, v| t.block_max_rows(v[0], 3)));

    // Symmetric edge expansion used by the explainer.
    let vals = random_probabilities(&mut rng, 1, 3);
    let edges = Arc::new(vec![(0usize, 1usize), (1, 2), (0, 3)]);
    out.push(check_op("symmetric_edge_expand", &[vals], &mut rng, tol, move |t, v| {
        t.symmetric_edge_expand(v[0], edges.clone(), 4)
    }));

    out
}
