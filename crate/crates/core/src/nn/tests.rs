use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn max_grad_error<F>(params: &[Tensor<f64>], build: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    max_relative_error(params, 1e-3, build)
}

#[test]
fn sum_of_linear_gradient_is_input() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap(), false);
    let w = g.leaf(Tensor::full(&[3, 2], 0.25), true);
    let y = g.matmul(x, w).unwrap();
    let loss = g.sum(y);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(w).unwrap().data(), &[0.5, 0.5, -1.0, -1.0, 2.0, 2.0]);
    assert!(grads.get(x).is_none());
    assert_eq!(grads.len(), 1);
}

#[test]
fn non_scalar_loss_rejected() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::zeros(&[2, 2]), true);
    let y = g.relu(x);
    assert!(matches!(g.backward(y), Err(Error::Contract(_))));
}

#[test]
fn shape_mismatch_lists_both_shapes() {
    let mut g = Graph::<f32>::new();
    let a = g.leaf(Tensor::zeros(&[2, 3]), false);
    let b = g.leaf(Tensor::zeros(&[4, 2]), false);
    match g.matmul(a, b) {
        Err(Error::Dimension { left, right, .. }) => {
            assert_eq!(left, vec![2, 3]);
            assert_eq!(right, vec![4, 2]);
        }
        _ => panic!("expected dimension error"),
    }
}

#[test]
fn softmax_basics() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap(), false);
    let y = g.softmax_lastdim(x, None).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);

    let x = g.leaf(Tensor::new(vec![2, 3], vec![1.0, 5.0, 2.0, 0.3, 0.1, 9.0]).unwrap(), false);
    let mask = [1, 0, 1, 1, 1, 0];
    let y = g.softmax_lastdim(x, Some(&mask)).unwrap();
    let v = g.value(y).data();
    assert_eq!(v[1], 0.0);
    assert_eq!(v[5], 0.0);
    assert!((v[0] + v[2] - 1.0).abs() < 1e-12);
    assert!((v[3] + v[4] - 1.0).abs() < 1e-12);

    let x = g.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap(), false);
    let y = g.softmax_lastdim(x, Some(&[0, 0])).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0]);
}

#[test]
fn relu_values() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::new(vec![2], vec![-1.5, 2.0]).unwrap(), false);
    let y = g.relu(x);
    assert_eq!(g.value(y).data(), &[0.0, 2.0]);
}

#[test]
fn dropout_identity_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::full(&[4, 4], 3.0), true);
    assert_eq!(g.dropout(x, 0.5, false, &mut rng).unwrap(), x);
    assert_eq!(g.dropout(x, 0.0, true, &mut rng).unwrap(), x);
    assert!(g.dropout(x, 1.0, true, &mut rng).is_err());
    let y = g.dropout(x, 0.5, true, &mut rng).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0 || v == 6.0));
}

#[test]
fn batchnorm_constant_input_is_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::full(&[5, 3], 7.0), false);
    let gamma = g.leaf(Tensor::full(&[3], 1.0), false);
    let beta = g.leaf(Tensor::zeros(&[3]), false);
    let (y, stats) = g.batchnorm(x, gamma, beta, &[1; 5], NormMode::Train).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    assert_eq!(stats.unwrap().mean, vec![7.0; 3]);
}

#[test]
fn batchnorm_ignores_padded_rows_for_stats() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::new(vec![3, 1], vec![1.0, 3.0, 100.0]).unwrap(), false);
    let gamma = g.leaf(Tensor::full(&[1], 1.0), false);
    let beta = g.leaf(Tensor::zeros(&[1]), false);
    let (y, stats) = g.batchnorm(x, gamma, beta, &[1, 1, 0], NormMode::Train).unwrap();
    let stats = stats.unwrap();
    assert_eq!(stats.mean, vec![2.0]);
    assert_eq!(stats.var, vec![2.0]);
    let v = g.value(y).data();
    assert!((v[0] + 1.0).abs() < 1e-4 && (v[1] - 1.0).abs() < 1e-4);
}

#[test]
fn batchnorm_eval_is_deterministic() {
    let run = || {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), false);
        let gamma = g.leaf(Tensor::full(&[2], 2.0), false);
        let beta = g.leaf(Tensor::full(&[2], 0.5), false);
        let (y, stats) = g
            .batchnorm(x, gamma, beta, &[1, 1], NormMode::Eval { mean: &[1.0, 1.0], var: &[4.0, 4.0] })
            .unwrap();
        assert!(stats.is_none());
        g.value(y).clone()
    };
    let a = run();
    assert_eq!(a, run());
    assert!((a.data()[2] - (2.0 * 2.0 / (4.0f32 + 1e-5).sqrt() + 0.5)).abs() < 1e-6);
}

#[test]
fn gradcheck_matmul_bias_relu_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = randn(&mut rng, &[4, 3], 1.0);
    let w1 = randn(&mut rng, &[3, 5], 1.0);
    let b1 = randn(&mut rng, &[5], 0.5);
    let w2 = randn(&mut rng, &[5, 2], 1.0);
    let b2 = randn(&mut rng, &[2], 0.5);
    let target: Vec<f64> = (0..8).map(|i| f64::from(i) * 0.1).collect();
    let err = max_grad_error(&[x, w1, b1, w2, b2], |g, v| {
        let h = g.linear(v[0], v[1], v[2]).unwrap();
        let h = g.relu(h);
        let y = g.linear(h, v[3], v[4]).unwrap();
        g.masked_mse(y, &target, &[1; 8]).unwrap()
    });
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn gradcheck_bmm_both_layouts() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = randn(&mut rng, &[2, 3, 4], 1.0);
    let b = randn(&mut rng, &[2, 4, 5], 1.0);
    let c = randn(&mut rng, &[2, 5, 4], 1.0);
    let err = max_grad_error(&[a, b, c], |g, v| {
        let ab = g.bmm(v[0], v[1], false).unwrap();
        let abct = g.bmm(ab, v[2], false).unwrap();
        let sq = g.bmm(abct, v[0], true).unwrap();
        let s = g.scale(sq, 0.3);
        g.sum(s)
    });
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn gradcheck_masked_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = randn(&mut rng, &[3, 4], 2.0);
    let t = randn(&mut rng, &[3, 4], 1.0).into_data();
    let mask = [1, 1, 0, 1, 0, 1, 1, 1, 1, 0, 0, 1];
    let err = max_grad_error(&[x], |g, v| {
        let p = g.softmax_lastdim(v[0], Some(&mask)).unwrap();
        g.masked_mse(p, &t, &[1; 12]).unwrap()
    });
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn gradcheck_batchnorm_train_and_eval() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = randn(&mut rng, &[6, 3], 2.0);
    let gamma = randn(&mut rng, &[3], 1.0);
    let beta = randn(&mut rng, &[3], 1.0);
    let target: Vec<f64> = (0..18).map(|i| (f64::from(i) * 0.37).sin()).collect();
    let valid = [1, 1, 0, 1, 1, 0];
    let err = max_grad_error(&[x.clone(), gamma.clone(), beta.clone()], |g, v| {
        let (y, _) = g.batchnorm(v[0], v[1], v[2], &valid, NormMode::Train).unwrap();
        g.masked_mse(y, &target, &[1; 18]).unwrap()
    });
    assert!(err < 1e-4, "train-mode relative error {err}");
    let err = max_grad_error(&[x, gamma, beta], |g, v| {
        let (y, _) = g
            .batchnorm(v[0], v[1], v[2], &valid, NormMode::Eval { mean: &[0.1, 0.2, -0.3], var: &[1.5, 0.7, 2.0] })
            .unwrap();
        g.masked_mse(y, &target, &[1; 18]).unwrap()
    });
    assert!(err < 1e-4, "eval-mode relative error {err}");
}

#[test]
fn gradcheck_heads_table_dropout() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = randn(&mut rng, &[2 * 3, 4], 1.0);
    let table = randn(&mut rng, &[3, 4], 1.0);
    let err = max_grad_error(&[x, table], |g, v| {
        let mut drop_rng = ChaCha8Rng::seed_from_u64(99);
        let h = g.add_table(v[0], v[1]).unwrap();
        let h = g.dropout(h, 0.3, true, &mut drop_rng).unwrap();
        let s = g.split_heads(h, 2, 3, 2).unwrap();
        let att = g.bmm(s, s, true).unwrap();
        let o = g.bmm(att, s, false).unwrap();
        let m = g.merge_heads(o, 2, 3, 2).unwrap();
        let y = g.add(m, v[0]).unwrap();
        let target = vec![0.5; 24];
        let mut weight = vec![1u8; 24];
        weight[3] = 0;
        g.masked_mse(y, &target, &weight).unwrap()
    });
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn masked_mse_ignores_unweighted_targets() {
    let mut g = Graph::<f64>::new();
    let p = g.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
    let loss = g.masked_mse(p, &[1.0, 2.0, 99.0, 4.0], &[1, 1, 0, 1]).unwrap();
    assert_eq!(g.value(loss).data()[0], 0.0);
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(p).unwrap().data().iter().all(|&v| v == 0.0));
}
