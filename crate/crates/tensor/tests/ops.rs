//! Behavioral tests for individual tape operations.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tabtl_tensor::{Tape, Tensor};

#[test]
fn relu_definition() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn softmax_symmetry() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_vec(vec![0.0, 0.0]));
    let y = tape.softmax(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let data: Vec<f64> = (0..60).map(|_| rng.gen_range(-5.0..5.0)).collect();
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new(vec![10, 6], data).unwrap());
    let y = tape.softmax(x).unwrap();
    for row in tape.value(y).data().chunks(6) {
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
}

#[test]
fn layer_norm_of_constant_vector_is_zero_before_affine() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_vec(vec![3.0; 8]));
    let x = tape.reshape(x, vec![1, 8]).unwrap();
    let gamma = tape.constant(Tensor::from_vec(vec![1.0; 8]));
    let beta = tape.constant(Tensor::from_vec(vec![0.0; 8]));
    let y = tape.layer_norm(x, gamma, beta).unwrap();
    for &v in tape.value(y).data() {
        assert_eq!(v, 0.0, "zero-variance row must normalize to zero, not NaN");
    }
}

#[test]
fn square_gradient() {
    // f(x) = x*x at x = 3 -> df/dx = 6
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::scalar(3.0).with_grad());
    let y = tape.mul(x, x).unwrap();
    let grads = tape.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[6.0]);
}

#[test]
fn constant_loss_gives_zero_param_gradients() {
    let mut tape = Tape::<f64>::new();
    let _w = tape.param("w", Tensor::from_vec(vec![1.0, 2.0]).with_grad(), true);
    let c = tape.constant(Tensor::scalar(5.0));
    let loss = tape.mean_all(c).unwrap();
    let grads = tape.backward(loss).unwrap();
    let by_name = tape.param_grads(&grads);
    assert_eq!(by_name["w"], vec![0.0, 0.0]);
}

#[test]
fn non_scalar_loss_rejected() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]).with_grad());
    assert!(tape.backward(x).is_err());
}

#[test]
fn shape_mismatch_error_names_op_and_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(vec![2, 3]));
    let b = tape.constant(Tensor::zeros(vec![2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn dropout_eval_mode_is_identity_and_train_mean_preserving() {
    // Eval path: the layer skips the op entirely, p = 0 behaves as identity.
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let y = tape.dropout(x, 0.0, &mut rng).unwrap();
    assert_eq!(tape.value(y).data(), tape.value(x).data());

    // Train mode: E[output] = input. Monte-Carlo over many draws; the mean
    // of each output entry is input * mean(mask) with mask in {0, 1/(1-p)}.
    let p = 0.3;
    let n = 200_000usize;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut sum = 0.0f64;
    for _ in 0..n {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::scalar(1.0));
        let y = tape.dropout(x, p, &mut rng).unwrap();
        sum += tape.value(y).item();
    }
    let mean = sum / n as f64;
    // Var of a single draw: E[m^2] - 1 = 1/(1-p) - 1
    let sigma = ((1.0 / (1.0 - p) - 1.0) / n as f64).sqrt();
    assert!(
        (mean - 1.0).abs() < 3.0 * sigma,
        "mean {mean} deviates more than 3 sigma ({sigma})"
    );
}

#[test]
fn tape_determinism_bit_identical() {
    let run = || -> (u64, Vec<u64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let xd: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wd: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![3, 4], xd).unwrap());
        let w = tape.param("w", Tensor::new(vec![4, 3], wd).unwrap().with_grad(), true);
        let h = tape.matmul(x, w).unwrap();
        let h = tape.gelu(h).unwrap();
        let mut drop_rng = ChaCha8Rng::seed_from_u64(7);
        let h = tape.dropout(h, 0.5, &mut drop_rng).unwrap();
        let loss = tape.mse_mean(h, &vec![0.25; 9]).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = tape.param_grads(&grads)["w"].clone();
        (
            tape.value(loss).item().to_bits(),
            g.iter().map(|v| v.to_bits()).collect(),
        )
    };
    assert_eq!(run(), run());
}

#[test]
fn concat_and_gather_roundtrip() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = tape.constant(Tensor::new(vec![2, 1], vec![9.0, 8.0]).unwrap());
    let c = tape.concat(&[a, b], 1).unwrap();
    assert_eq!(tape.shape(c), &[2, 3]);
    assert_eq!(tape.value(c).data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);

    let g = tape.gather_rows(c, &[1, 0, 1]).unwrap();
    assert_eq!(tape.shape(g), &[3, 3]);
    assert_eq!(tape.value(g).data()[0..3], [3.0, 4.0, 8.0]);
}

#[test]
fn unreachable_tensors_get_zero_gradient() {
    let mut tape = Tape::<f64>::new();
    let used = tape.param("used", Tensor::from_vec(vec![2.0]).with_grad(), true);
    let _unused = tape.param("unused", Tensor::from_vec(vec![5.0, 5.0]).with_grad(), true);
    let sq = tape.mul(used, used).unwrap();
    let loss = tape.mean_all(sq).unwrap();
    let grads = tape.backward(loss).unwrap();
    let by_name = tape.param_grads(&grads);
    assert_eq!(by_name["used"], vec![4.0]);
    assert_eq!(by_name["unused"], vec![0.0, 0.0]);
}
