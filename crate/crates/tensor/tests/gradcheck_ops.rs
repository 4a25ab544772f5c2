//! Finite-difference checks for every op kind, in 64-bit mode.
//!
//! Each check composes the op with a fixed quadratic readout so the loss is
//! scalar and the op's backward receives non-trivial upstream gradients.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tabtl_tensor::gradcheck;
use tabtl_tensor::{NodeId, Tape, Tensor};

const H: f64 = 1e-4;
const TOL: f64 = 1e-6;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn targets(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn assert_check<F>(name: &str, build: F, inputs: &[Tensor<f64>])
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> tabtl_tensor::Result<NodeId>,
{
    let report = gradcheck::check(build, inputs, H, None, 99).unwrap();
    assert!(
        report.max_rel_err < TOL,
        "{name}: max rel err {} over {} coords",
        report.max_rel_err,
        report.checked
    );
}

#[test]
fn matmul_2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&[3, 4], &mut rng, -1.0, 1.0);
    let b = rand_tensor(&[4, 2], &mut rng, -1.0, 1.0);
    let t = targets(6, &mut rng);
    assert_check(
        "matmul2d",
        |tape, ids| {
            let c = tape.matmul(ids[0], ids[1])?;
            tape.mse_mean(c, &t)
        },
        &[a, b],
    );
}

#[test]
fn matmul_3d_batched() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(&[2, 3, 4], &mut rng, -1.0, 1.0);
    let b = rand_tensor(&[2, 4, 2], &mut rng, -1.0, 1.0);
    let t = targets(12, &mut rng);
    assert_check(
        "matmul3d",
        |tape, ids| {
            let c = tape.matmul(ids[0], ids[1])?;
            tape.mse_mean(c, &t)
        },
        &[a, b],
    );
}

#[test]
fn add_same_shape_and_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_tensor(&[3, 4], &mut rng, -1.0, 1.0);
    let b = rand_tensor(&[3, 4], &mut rng, -1.0, 1.0);
    let t = targets(12, &mut rng);
    assert_check(
        "add",
        |tape, ids| {
            let c = tape.add(ids[0], ids[1])?;
            tape.mse_mean(c, &t)
        },
        &[a.clone(), b],
    );

    let bias = rand_tensor(&[4], &mut rng, -1.0, 1.0);
    let t2 = targets(12, &mut rng);
    assert_check(
        "add_broadcast",
        |tape, ids| {
            let c = tape.add(ids[0], ids[1])?;
            tape.mse_mean(c, &t2)
        },
        &[a, bias],
    );
}

#[test]
fn mul_and_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = rand_tensor(&[2, 5], &mut rng, -1.0, 1.0);
    let b = rand_tensor(&[2, 5], &mut rng, -1.0, 1.0);
    let t = targets(10, &mut rng);
    assert_check(
        "mul",
        |tape, ids| {
            let c = tape.mul(ids[0], ids[1])?;
            let c = tape.scale(c, 1.7)?;
            tape.mse_mean(c, &t)
        },
        &[a, b],
    );
}

#[test]
fn relu_gelu() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // keep inputs away from the ReLU kink
    let data: Vec<f64> = (0..12)
        .map(|_| {
            let v: f64 = rng.gen_range(0.1..1.5);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    let x = Tensor::new(vec![3, 4], data).unwrap();
    let t = targets(12, &mut rng);
    assert_check(
        "relu",
        |tape, ids| {
            let c = tape.relu(ids[0])?;
            tape.mse_mean(c, &t)
        },
        &[x.clone()],
    );
    let t2 = targets(12, &mut rng);
    assert_check(
        "gelu",
        |tape, ids| {
            let c = tape.gelu(ids[0])?;
            tape.mse_mean(c, &t2)
        },
        &[x],
    );
}

#[test]
fn softmax_last_axis() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&[3, 5], &mut rng, -2.0, 2.0);
    let t = targets(15, &mut rng);
    assert_check(
        "softmax",
        |tape, ids| {
            let c = tape.softmax(ids[0])?;
            tape.mse_mean(c, &t)
        },
        &[x],
    );
}

#[test]
fn layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&[4, 6], &mut rng, -2.0, 2.0);
    let gamma = rand_tensor(&[6], &mut rng, 0.5, 1.5);
    let beta = rand_tensor(&[6], &mut rng, -0.5, 0.5);
    let t = targets(24, &mut rng);
    assert_check(
        "layer_norm",
        |tape, ids| {
            let c = tape.layer_norm(ids[0], ids[1], ids[2])?;
            tape.mse_mean(c, &t)
        },
        &[x, gamma, beta],
    );
}

#[test]
fn batch_norm_train_and_eval() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&[5, 3], &mut rng, -2.0, 2.0);
    let gamma = rand_tensor(&[3], &mut rng, 0.5, 1.5);
    let beta = rand_tensor(&[3], &mut rng, -0.5, 0.5);
    let t = targets(15, &mut rng);
    assert_check(
        "batch_norm_train",
        |tape, ids| {
            let (c, _, _) = tape.batch_norm_train(ids[0], ids[1], ids[2])?;
            tape.mse_mean(c, &t)
        },
        &[x.clone(), gamma.clone(), beta.clone()],
    );

    let mean = vec![0.1, -0.2, 0.05];
    let var = vec![0.9, 1.2, 0.7];
    let t2 = targets(15, &mut rng);
    assert_check(
        "batch_norm_eval",
        |tape, ids| {
            let c = tape.batch_norm_eval(ids[0], ids[1], ids[2], &mean, &var)?;
            tape.mse_mean(c, &t2)
        },
        &[x, gamma, beta],
    );
}

#[test]
fn dropout_with_fixed_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&[3, 4], &mut rng, -1.0, 1.0);
    let mask: Vec<f64> = (0..12)
        .map(|_| if rng.gen_bool(0.3) { 0.0 } else { 1.0 / 0.7 })
        .collect();
    let t = targets(12, &mut rng);
    assert_check(
        "dropout",
        |tape, ids| {
            let c = tape.dropout_with_mask(ids[0], mask.clone())?;
            tape.mse_mean(c, &t)
        },
        &[x],
    );
}

#[test]
fn embedding_lookup() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let table = rand_tensor(&[5, 3], &mut rng, -1.0, 1.0);
    let codes = [0u32, 2, 4, 2];
    let t = targets(12, &mut rng);
    assert_check(
        "embedding",
        |tape, ids| {
            let c = tape.embedding(ids[0], &codes)?;
            tape.mse_mean(c, &t)
        },
        &[table],
    );
}

#[test]
fn num_tokens_and_replace_token() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&[3, 4], &mut rng, -1.0, 1.0);
    let w = rand_tensor(&[4, 3], &mut rng, -1.0, 1.0);
    let b = rand_tensor(&[4, 3], &mut rng, -1.0, 1.0);
    let repl = rand_tensor(&[4, 3], &mut rng, -1.0, 1.0);
    let pos = [1usize, 3, 0];
    let t = targets(36, &mut rng);
    assert_check(
        "num_tokens+replace_token",
        |tape, ids| {
            let tok = tape.num_tokens(ids[0], ids[1], ids[2])?;
            let tok = tape.replace_token(tok, ids[3], &pos)?;
            tape.mse_mean(tok, &t)
        },
        &[x, w, b, repl],
    );
}

#[test]
fn concat_expand_reshape_permute() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = rand_tensor(&[2, 3], &mut rng, -1.0, 1.0);
    let b = rand_tensor(&[2, 2], &mut rng, -1.0, 1.0);
    let v = rand_tensor(&[5], &mut rng, -1.0, 1.0);
    let t = targets(20, &mut rng);
    assert_check(
        "concat+expand+reshape+permute",
        |tape, ids| {
            let cat = tape.concat(&[ids[0], ids[1]], 1)?; // [2,5]
            let ex = tape.expand(ids[2], 2)?; // [2,5]
            let sum = tape.add(cat, ex)?;
            let r = tape.reshape(sum, vec![2, 5, 1])?;
            let p = tape.permute(r, &[1, 0, 2])?; // [5,2,1]
            let stacked = tape.concat(&[r, r], 2)?; // [2,5,2]
            let flat_p = tape.reshape(p, vec![10])?;
            let flat_s = tape.reshape(stacked, vec![20])?;
            let joined = tape.concat(&[flat_p, flat_s], 0)?; // [30]
            let head = tape.gather_rows(joined, &(0..20).collect::<Vec<_>>())?;
            tape.mse_mean(head, &t)
        },
        &[a, b, v],
    );
}

#[test]
fn gather_rows_and_token_at() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = rand_tensor(&[3, 4, 2], &mut rng, -1.0, 1.0);
    let pos = [0usize, 2, 3];
    let t = targets(4, &mut rng);
    assert_check(
        "token_at+gather_rows",
        |tape, ids| {
            let sel = tape.token_at(ids[0], &pos)?; // [3,2]
            let g = tape.gather_rows(sel, &[2, 0])?; // [2,2]
            tape.mse_mean(g, &t)
        },
        &[x],
    );
}

#[test]
fn l2_normalize_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = rand_tensor(&[3, 4], &mut rng, 0.3, 1.5);
    let t = targets(12, &mut rng);
    assert_check(
        "l2_normalize",
        |tape, ids| {
            let c = tape.l2_normalize_rows(ids[0])?;
            tape.mse_mean(c, &t)
        },
        &[x],
    );
}

#[test]
fn reductions_and_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = rand_tensor(&[3, 4], &mut rng, -1.5, 1.5);

    assert_check("mean_all", |tape, ids| tape.mean_all(ids[0]), &[x.clone()]);

    let z: Vec<f64> = (0..12).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
    assert_check(
        "bce_with_logits",
        |tape, ids| tape.bce_with_logits_mean(ids[0], &z),
        &[x.clone()],
    );

    let classes = [1usize, 0, 3];
    assert_check(
        "softmax_xent",
        |tape, ids| tape.softmax_xent_mean(ids[0], &classes),
        &[x.clone()],
    );

    let t = targets(12, &mut rng);
    assert_check("mse", |tape, ids| tape.mse_mean(ids[0], &t), &[x]);
}

/// Random 2-layer MLP: analytic gradients vs central differences at h = 1e-3.
#[test]
fn two_layer_mlp_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = rand_tensor(&[4, 5], &mut rng, -1.0, 1.0);
    let w1 = rand_tensor(&[5, 6], &mut rng, -0.6, 0.6);
    let b1 = rand_tensor(&[6], &mut rng, -0.2, 0.2);
    let w2 = rand_tensor(&[6, 2], &mut rng, -0.6, 0.6);
    let b2 = rand_tensor(&[2], &mut rng, -0.2, 0.2);
    let labels: Vec<f64> = (0..8).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
    let xc = x.clone();
    let report = gradcheck::check(
        move |tape, ids| {
            let xin = tape.constant(xc.clone());
            let h = tape.matmul(xin, ids[0])?;
            let h = tape.add(h, ids[1])?;
            let h = tape.relu(h)?;
            let o = tape.matmul(h, ids[2])?;
            let o = tape.add(o, ids[3])?;
            tape.bce_with_logits_mean(o, &labels)
        },
        &[w1, b1, w2, b2],
        1e-3,
        None,
        77,
    )
    .unwrap();
    assert!(
        report.max_rel_err < 1e-6,
        "max rel err {} over {} params",
        report.max_rel_err,
        report.checked
    );
}
