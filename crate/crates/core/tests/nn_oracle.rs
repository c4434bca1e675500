mod common;

use common::*;
use fedwind::nn::{
    self, backward, forward, init_weights, sgd_nesterov_step, Architecture, Batch, Matrix,
    ModelParams, OptimizerState,
};
use rand::Rng;

fn random_batch(
    rng: &mut rand_chacha::ChaCha8Rng,
    dim: usize,
    rows: usize,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let xs: Vec<Vec<f64>> = (0..rows)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.5)).collect())
        .collect();
    let ys = (0..rows).map(|_| rng.random_range(-1.0..2.0)).collect();
    (xs, ys)
}

fn to_batch(xs: &[Vec<f64>], ys: &[f64]) -> Batch {
    Batch::new(Matrix::from_rows(xs).unwrap(), ys.to_vec()).unwrap()
}

#[test]
fn forward_matches_reference() {
    let mut r = rng(1);
    for seed in 0..50 {
        let arch = random_search_arch(&mut r);
        let mut params = init_weights(&arch, seed);
        // Non-zero biases so every term of the layout is exercised.
        let mut flat = params.flatten();
        for v in flat.iter_mut() {
            *v += r.random_range(-0.1..0.1);
        }
        params = ModelParams::unflatten(&arch, &flat).unwrap();
        let (xs, _) = random_batch(&mut r, arch.input_dim, 7);
        let got = forward(&params, &Matrix::from_rows(&xs).unwrap()).unwrap();
        for (x, g) in xs.iter().zip(got) {
            let want = forward_flat(&arch, &flat, x).0;
            assert!(
                (g - want).abs() <= 1e-12 * (1.0 + want.abs()),
                "{g} vs {want}"
            );
        }
    }
}

#[test]
fn gradients_match_finite_differences_on_case_models() {
    let mut r = rng(2);
    for arch in [
        Architecture::power_curve(),
        Architecture::bearing_temperature(),
    ] {
        let mut flat = init_weights(&arch, 4).flatten();
        for v in flat.iter_mut() {
            *v += r.random_range(-0.05..0.05);
        }
        let params = ModelParams::unflatten(&arch, &flat).unwrap();
        let (xs, ys) = random_batch(&mut r, arch.input_dim, 16);
        let analytic = backward(&params, &to_batch(&xs, &ys)).unwrap().flatten();
        let numeric = numeric_gradient(&arch, &flat, &xs, &ys, 1e-5);
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!(
                (a - n).abs() <= 1e-4 * a.abs().max(n.abs()) + 1e-7,
                "{a} vs {n}"
            );
        }
    }
}

#[test]
fn nesterov_matches_reference_recurrence() {
    let arch = Architecture::new(1, vec![], nn::Activation::Linear).unwrap();
    let mut params = ModelParams::unflatten(&arch, &[1.0, -2.0]).unwrap();
    let mut opt = OptimizerState::new(&arch, 0.1, 0.9, 32).unwrap();
    let grads = [[0.5, -1.0], [0.2, 0.3], [-0.4, 0.0], [1.0, 1.0]];
    let (mut w, mut v) = ([1.0f64, -2.0], [0.0f64; 2]);
    for g in grads {
        let gp = ModelParams::unflatten(&arch, &g).unwrap();
        sgd_nesterov_step(&mut params, &gp, &mut opt).unwrap();
        for k in 0..2 {
            v[k] = 0.9 * v[k] - 0.1 * g[k];
            w[k] += 0.9 * v[k] - 0.1 * g[k];
        }
        let got = params.flatten();
        for k in 0..2 {
            assert!((got[k] - w[k]).abs() < 1e-15, "{got:?} vs {w:?}");
        }
    }
}

#[test]
fn initialization_respects_glorot_limits() {
    for arch in [
        Architecture::power_curve(),
        Architecture::bearing_temperature(),
    ] {
        let p = init_weights(&arch, 11);
        for l in p.layers() {
            let limit = (6.0 / (l.shape.fan_in + l.shape.fan_out) as f64).sqrt();
            assert!(l.weights.iter().all(|w| w.abs() <= limit));
            assert!(l.biases.iter().all(|&b| b == 0.0));
        }
    }
}

#[test]
fn training_reduces_loss_on_a_smooth_target() {
    let arch = Architecture::power_curve();
    let mut params = init_weights(&arch, 0);
    let xs: Vec<Vec<f64>> = (0..200).map(|i| vec![i as f64 / 200.0]).collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|x| 3.0 / (1.0 + (-10.0 * (x[0] - 0.5)).exp()))
        .collect();
    let batch = to_batch(&xs, &ys);
    let before = nn::evaluate_mse(&params, &batch).unwrap();
    let mut opt = OptimizerState::new(&arch, 0.013, 0.9, 32).unwrap();
    nn::train_epochs(&mut params, &mut opt, &batch, 200, &mut rng(0)).unwrap();
    let after = nn::evaluate_mse(&params, &batch).unwrap();
    assert!(after < 0.05 * before, "{before} -> {after}");
}
