use super::*;
use crate::rng::Rng;

// ── finite-difference oracle ────────────────────────────────────────
//
// Central differences at step 1e-3, evaluated in f64. Independent of the
// backward pass: it only re-runs forward construction with perturbed
// leaf data.

const FD_STEP: f64 = 1e-3;

fn rand_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.next_f64() * 4.0 - 2.0).collect()
}

/// Scalar loss `w · flatten(out)` with fixed weights, so gradients of
/// symmetric ops (softmax rows, layer norm rows) do not cancel.
fn weighted_loss(g: &mut Graph<f64>, out: TensorId, weights: &[f64]) -> TensorId {
    let n = g.data(out).len();
    assert_eq!(weights.len(), n);
    let flat = g.reshape(out, &[1, n]).unwrap();
    let w = g.leaf(weights.to_vec(), &[n, 1], false).unwrap();
    g.matmul(flat, w).unwrap()
}

/// Checks analytic gradients of every leaf against central differences.
/// `build` must construct the graph from leaf values alone.
fn check_grads(
    inputs: &[(Vec<f64>, Vec<usize>)],
    build: impl Fn(&mut Graph<f64>, &[TensorId]) -> TensorId,
    tol: f64,
) {
    let eval = |datasets: &[Vec<f64>]| -> f64 {
        let mut g = Graph::<f64>::new();
        let ids: Vec<TensorId> = datasets
            .iter()
            .zip(inputs)
            .map(|(d, (_, sh))| g.leaf(d.clone(), sh, false).unwrap())
            .collect();
        let loss = build(&mut g, &ids);
        g.data(loss)[0]
    };

    let mut g = Graph::<f64>::new();
    let ids: Vec<TensorId> = inputs
        .iter()
        .map(|(d, sh)| g.leaf(d.clone(), sh, true).unwrap())
        .collect();
    let loss = build(&mut g, &ids);
    g.backward(loss).unwrap();

    let base: Vec<Vec<f64>> = inputs.iter().map(|(d, _)| d.clone()).collect();
    for (i, id) in ids.iter().enumerate() {
        let analytic = g.grad(*id).expect("leaf gradient missing").to_vec();
        for e in 0..base[i].len() {
            let mut plus = base.clone();
            plus[i][e] += FD_STEP;
            let mut minus = base.clone();
            minus[i][e] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            let a = analytic[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            assert!(
                rel <= tol,
                "leaf {i} elem {e}: analytic {a} vs fd {numeric} (rel {rel:.2e})"
            );
        }
    }
}

// ── matmul ──────────────────────────────────────────────────────────

#[test]
fn matmul_identity() {
    let mut g = Graph::<f32>::new();
    let i = g.leaf(vec![1.0, 0.0, 0.0, 1.0], &[2, 2], false).unwrap();
    let b = g.leaf(vec![3.0, 4.0, 5.0, 6.0], &[2, 2], false).unwrap();
    let c = g.matmul(i, b).unwrap();
    assert_eq!(g.data(c), &[3.0, 4.0, 5.0, 6.0]);
}

#[test]
fn matmul_row_times_column() {
    let mut g = Graph::<f32>::new();
    let a = g.leaf(vec![1.0, 2.0], &[1, 2], false).unwrap();
    let b = g.leaf(vec![3.0, 4.0], &[2, 1], false).unwrap();
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.shape(c), &[1, 1]);
    assert_eq!(g.data(c), &[11.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut g = Graph::<f32>::new();
    let a = g.zeros(&[2, 3], false).unwrap();
    let b = g.zeros(&[4, 2], false).unwrap();
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = Rng::new(11);
    let a = (rand_vec(&mut rng, 12), vec![3usize, 4]);
    let b = (rand_vec(&mut rng, 8), vec![4usize, 2]);
    check_grads(&[a, b], |g, ids| {
        let c = g.matmul(ids[0], ids[1]).unwrap();
        g.sum_all(c).unwrap()
    }, 1e-4);
}

#[test]
fn matmul_broadcast_batch_gradient() {
    let mut rng = Rng::new(12);
    let a = (rand_vec(&mut rng, 2 * 3 * 4), vec![2usize, 3, 4]);
    let b = (rand_vec(&mut rng, 4 * 2), vec![4usize, 2]);
    check_grads(&[a, b], |g, ids| {
        let c = g.matmul(ids[0], ids[1]).unwrap();
        g.sum_all(c).unwrap()
    }, 1e-4);
}

// ── softmax ─────────────────────────────────────────────────────────

#[test]
fn softmax_uniform_input() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(vec![0.0; 4], &[4], false).unwrap();
    let y = g.softmax(x, 0).unwrap();
    for &v in g.data(y) {
        assert!((v - 0.25).abs() < 1e-7);
    }
}

#[test]
fn softmax_analytic_ratio() {
    let mut g = Graph::<f32>::new();
    let x = g
        .leaf(vec![1.0f32.ln(), 3.0f32.ln()], &[2], false)
        .unwrap();
    let y = g.softmax(x, 0).unwrap();
    assert!((g.data(y)[0] - 0.25).abs() < 1e-6);
    assert!((g.data(y)[1] - 0.75).abs() < 1e-6);
}

#[test]
fn softmax_rejects_non_finite() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(vec![f32::NAN, 0.0], &[2], false).unwrap();
    assert!(matches!(g.softmax(x, 0), Err(Error::Numeric(_))));
}

#[test]
fn softmax_gradient_matches_finite_differences() {
    let mut rng = Rng::new(21);
    let x = (rand_vec(&mut rng, 8), vec![8usize]);
    let w = rand_vec(&mut rng, 8);
    check_grads(&[x], |g, ids| {
        let y = g.softmax(ids[0], 0).unwrap();
        weighted_loss(g, y, &w)
    }, 1e-4);
}

// ── layer norm ──────────────────────────────────────────────────────

#[test]
fn layer_norm_constant_row_collapses_to_beta() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(vec![5.0; 3], &[1, 3], false).unwrap();
    let gamma = g.leaf(vec![1.0; 3], &[3], false).unwrap();
    let beta = g.leaf(vec![0.0; 3], &[3], false).unwrap();
    let y = g.layer_norm(x, gamma, beta, 1e-6).unwrap();
    for &v in g.data(y) {
        assert!(v.abs() < 1e-4);
    }
}

#[test]
fn layer_norm_hand_arithmetic() {
    // mean 2, population variance 2/3
    let mut g = Graph::<f64>::new();
    let x = g.leaf(vec![1.0, 2.0, 3.0], &[1, 3], false).unwrap();
    let gamma = g.leaf(vec![1.0; 3], &[3], false).unwrap();
    let beta = g.leaf(vec![0.0; 3], &[3], false).unwrap();
    let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
    let expect = [-1.224745, 0.0, 1.224745];
    for (v, e) in g.data(y).iter().zip(expect) {
        assert!((v - e).abs() < 1e-4, "{v} vs {e}");
    }
}

#[test]
fn layer_norm_gradient_matches_finite_differences() {
    let mut rng = Rng::new(31);
    let x = (rand_vec(&mut rng, 2 * 5), vec![2usize, 5]);
    let gamma = (rand_vec(&mut rng, 5), vec![5usize]);
    let beta = (rand_vec(&mut rng, 5), vec![5usize]);
    let w = rand_vec(&mut rng, 10);
    check_grads(&[x, gamma, beta], |g, ids| {
        let y = g.layer_norm(ids[0], ids[1], ids[2], 1e-6).unwrap();
        weighted_loss(g, y, &w)
    }, 1e-4);
}

// ── gelu ────────────────────────────────────────────────────────────

#[test]
fn gelu_zero_and_saturation() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(vec![0.0, 6.0], &[2], false).unwrap();
    let y = g.gelu(x).unwrap();
    assert_eq!(g.data(y)[0], 0.0);
    assert!((g.data(y)[1] - 6.0).abs() < 1e-3);
}

#[test]
fn gelu_gradient_matches_finite_differences() {
    let mut rng = Rng::new(41);
    let x = (rand_vec(&mut rng, 9), vec![9usize]);
    let w = rand_vec(&mut rng, 9);
    check_grads(&[x], |g, ids| {
        let y = g.gelu(ids[0]).unwrap();
        weighted_loss(g, y, &w)
    }, 1e-4);
}

// ── elementwise add / scale / shape ops ─────────────────────────────

#[test]
fn add_simple_and_broadcast() {
    let mut g = Graph::<f32>::new();
    let a = g.leaf(vec![1.0, 2.0], &[2], false).unwrap();
    let b = g.leaf(vec![3.0, 4.0], &[2], false).unwrap();
    let c = g.add(a, b).unwrap();
    assert_eq!(g.data(c), &[4.0, 6.0]);

    let m = g.leaf(vec![0.0, 10.0, 20.0, 30.0], &[2, 2], false).unwrap();
    let bias = g.leaf(vec![1.0, 2.0], &[2], false).unwrap();
    let s = g.add(m, bias).unwrap();
    assert_eq!(g.data(s), &[1.0, 12.0, 21.0, 32.0]);
}

#[test]
fn transpose_involution() {
    let mut rng = Rng::new(51);
    let data: Vec<f32> = rand_vec(&mut rng, 15).iter().map(|&v| v as f32).collect();
    let mut g = Graph::<f32>::new();
    let x = g.leaf(data.clone(), &[3, 5], false).unwrap();
    let t = g.transpose(x, 0, 1).unwrap();
    let tt = g.transpose(t, 0, 1).unwrap();
    assert_eq!(g.data(tt), data.as_slice());
    assert_eq!(g.shape(t), &[5, 3]);
}

#[test]
fn shape_op_gradients_match_finite_differences() {
    let mut rng = Rng::new(61);
    let x = (rand_vec(&mut rng, 12), vec![3usize, 4]);
    let y = (rand_vec(&mut rng, 12), vec![3usize, 4]);
    let w = rand_vec(&mut rng, 24);
    // add -> scale -> transpose -> reshape -> concat -> slice chain
    check_grads(&[x, y], |g, ids| {
        let s = g.add(ids[0], ids[1]).unwrap();
        let sc = g.scale(s, 1.7).unwrap();
        let t = g.transpose(sc, 0, 1).unwrap();
        let r = g.reshape(t, &[2, 6]).unwrap();
        let cat = g.concat(&[r, r], 0).unwrap();
        let sl = g.slice(cat, 0, 0, 4).unwrap();
        weighted_loss(g, sl, &w)
    }, 1e-4);
}

#[test]
fn concat_and_slice_forward() {
    let mut g = Graph::<f32>::new();
    let a = g.leaf(vec![1.0, 2.0, 3.0, 4.0], &[2, 2], false).unwrap();
    let b = g.leaf(vec![5.0, 6.0], &[1, 2], false).unwrap();
    let c = g.concat(&[a, b], 0).unwrap();
    assert_eq!(g.shape(c), &[3, 2]);
    assert_eq!(g.data(c), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let s = g.slice(c, 0, 1, 2).unwrap();
    assert_eq!(g.data(s), &[3.0, 4.0, 5.0, 6.0]);
    let col = g.slice(c, 1, 1, 1).unwrap();
    assert_eq!(g.data(col), &[2.0, 4.0, 6.0]);
}

// ── cross entropy ───────────────────────────────────────────────────

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let mut rng = Rng::new(71);
    let logits = (rand_vec(&mut rng, 3 * 4), vec![3usize, 4]);
    check_grads(&[logits], |g, ids| {
        g.cross_entropy(ids[0], &[2, 0, 3]).unwrap()
    }, 1e-4);
}

// ── backward contract ───────────────────────────────────────────────

#[test]
fn backward_square_at_three() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(vec![3.0], &[1, 1], true).unwrap();
    let y = g.matmul(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[6.0]);
}

#[test]
fn backward_constant_loss_gives_zero_grad() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(vec![1.0, 2.0], &[2], true).unwrap();
    let c = g.leaf(vec![5.0], &[1], false).unwrap();
    let loss = g.sum_all(c).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(vec![1.0, 2.0], &[2], true).unwrap();
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));
}

#[test]
fn backward_accumulates_across_paths() {
    // loss = sum(x + x): dx = 2 everywhere
    let mut g = Graph::<f32>::new();
    let x = g.leaf(vec![1.0, -2.0, 0.5], &[3], true).unwrap();
    let s = g.add(x, x).unwrap();
    let loss = g.sum_all(s).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0, 2.0]);
}

#[test]
fn backward_is_deterministic() {
    let run = || -> Vec<u32> {
        let mut rng = Rng::new(99);
        let xd: Vec<f32> = rand_vec(&mut rng, 12).iter().map(|&v| v as f32).collect();
        let wd: Vec<f32> = rand_vec(&mut rng, 8).iter().map(|&v| v as f32).collect();
        let mut g = Graph::<f32>::new();
        let x = g.leaf(xd, &[3, 4], true).unwrap();
        let w = g.leaf(wd, &[4, 2], true).unwrap();
        let h = g.matmul(x, w).unwrap();
        let a = g.gelu(h).unwrap();
        let sm = g.softmax(a, 1).unwrap();
        let loss = g.sum_all(sm).unwrap();
        g.backward(loss).unwrap();
        let mut bits: Vec<u32> = g.grad(x).unwrap().iter().map(|v| v.to_bits()).collect();
        bits.extend(g.grad(w).unwrap().iter().map(|v| v.to_bits()));
        bits
    };
    assert_eq!(run(), run());
}

// ── property tests ──────────────────────────────────────────────────

mod properties {
    use super::*;
    use crate::rng::Rng as SeededRng;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant(
            rows in 1usize..4,
            cols in 1usize..8,
            seed in 0u64..1000,
            shift in -5.0f32..5.0,
        ) {
            let mut rng = SeededRng::new(seed);
            let data: Vec<f32> = (0..rows * cols)
                .map(|_| (rng.next_f64() * 8.0 - 4.0) as f32)
                .collect();
            let shifted: Vec<f32> = data.iter().map(|&v| v + shift).collect();

            let mut g = Graph::<f32>::new();
            let x = g.leaf(data, &[rows, cols], false).unwrap();
            let y = g.softmax(x, 1).unwrap();
            let xs = g.leaf(shifted, &[rows, cols], false).unwrap();
            let ys = g.softmax(xs, 1).unwrap();

            for r in 0..rows {
                let row = &g.data(y)[r * cols..(r + 1) * cols];
                let sum: f32 = row.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
                prop_assert!(row.iter().all(|&v| v > 0.0 && v < 1.0 + 1e-6));
            }
            for (a, b) in g.data(y).iter().zip(g.data(ys)) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }

        #[test]
        fn layer_norm_rows_standardized(rows in 1usize..4, seed in 0u64..1000) {
            let d = 16usize;
            let mut rng = SeededRng::new(seed);
            let data: Vec<f32> = (0..rows * d)
                .map(|_| (rng.next_f64() * 4.0 - 2.0) as f32)
                .collect();
            let mut g = Graph::<f32>::new();
            let x = g.leaf(data, &[rows, d], false).unwrap();
            let gamma = g.leaf(vec![1.0; d], &[d], false).unwrap();
            let beta = g.leaf(vec![0.0; d], &[d], false).unwrap();
            let y = g.layer_norm(x, gamma, beta, 1e-6).unwrap();
            for r in 0..rows {
                let row = &g.data(y)[r * d..(r + 1) * d];
                let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
                let var: f64 =
                    row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
                // source rows here always have variance well above 1e-3
                prop_assert!(mean.abs() < 1e-6);
                prop_assert!((var - 1.0).abs() < 1e-5);
            }
        }
    }
}
