//! Independent reference implementations used as test oracles. They work on flat
//! parameter vectors and share no code with the library beyond its data types.
#![allow(dead_code)]

use fedwind::nn::{Activation, Architecture};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn act(a: Activation, z: f64) -> f64 {
    match a {
        Activation::Elu => {
            if z > 0.0 {
                z
            } else {
                z.exp() - 1.0
            }
        }
        Activation::Relu => z.max(0.0),
        Activation::Linear => z,
    }
}

/// Layer sizes and activations: `[(fan_in, fan_out, activation)]`.
pub fn layers(arch: &Architecture) -> Vec<(usize, usize, Activation)> {
    let mut out = Vec::new();
    let mut fan_in = arch.input_dim;
    for h in &arch.hidden_layers {
        out.push((fan_in, h.units, h.activation));
        fan_in = h.units;
    }
    out.push((fan_in, 1, arch.output_activation));
    out
}

/// Forward pass over a flat vector laid out as `[W0 (row-major out×in), b0, W1, b1, ...]`.
/// Also returns every layer's pre-activations.
pub fn forward_flat(arch: &Architecture, flat: &[f64], x: &[f64]) -> (f64, Vec<Vec<f64>>) {
    let mut a = x.to_vec();
    let mut off = 0;
    let mut pre = Vec::new();
    for (fan_in, fan_out, activation) in layers(arch) {
        let w = &flat[off..off + fan_in * fan_out];
        let b = &flat[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
        off += fan_in * fan_out + fan_out;
        let z: Vec<f64> = (0..fan_out)
            .map(|o| b[o] + (0..fan_in).map(|i| w[o * fan_in + i] * a[i]).sum::<f64>())
            .collect();
        a = z.iter().map(|&v| act(activation, v)).collect();
        pre.push(z);
    }
    assert_eq!(off, flat.len(), "flat vector does not match architecture");
    (a[0], pre)
}

pub fn mse_flat(arch: &Architecture, flat: &[f64], xs: &[Vec<f64>], ys: &[f64]) -> f64 {
    xs.iter()
        .zip(ys)
        .map(|(x, y)| {
            let d = forward_flat(arch, flat, x).0 - y;
            d * d
        })
        .sum::<f64>()
        / ys.len() as f64
}

/// Central finite differences of the MSE.
pub fn numeric_gradient(
    arch: &Architecture,
    flat: &[f64],
    xs: &[Vec<f64>],
    ys: &[f64],
    h: f64,
) -> Vec<f64> {
    let mut p = flat.to_vec();
    (0..flat.len())
        .map(|k| {
            let orig = p[k];
            p[k] = orig + h;
            let up = mse_flat(arch, &p, xs, ys);
            p[k] = orig - h;
            let down = mse_flat(arch, &p, xs, ys);
            p[k] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Weighted mean in ascending client-id order, accumulating from the first term.
pub fn brute_force_weighted_mean(updates: &[(u32, Vec<f64>, u64)]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_by_key(|&i| updates[i].0);
    let total = updates.iter().map(|u| u.2).sum::<u64>() as f64;
    let len = updates[0].1.len();
    (0..len)
        .map(|k| {
            let mut acc: Option<f64> = None;
            for &i in &order {
                let term = (updates[i].2 as f64 / total) * updates[i].1[k];
                acc = Some(match acc {
                    None => term,
                    Some(a) => a + term,
                });
            }
            acc.unwrap()
        })
        .collect()
}

/// A random architecture from the model-search space.
pub fn random_search_arch(rng: &mut ChaCha8Rng) -> Architecture {
    use fedwind::nn::HiddenLayer;
    let depth = rng.random_range(0..=3);
    let units = [4, 8, 12, 16];
    let hidden = (0..depth)
        .map(|_| HiddenLayer::elu(units[rng.random_range(0..4)]))
        .collect();
    let input_dim = rng.random_range(1..=2);
    let out = if rng.random_bool(0.5) {
        Activation::Relu
    } else {
        Activation::Linear
    };
    Architecture::new(input_dim, hidden, out).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Two-sample Kolmogorov–Smirnov distance.
pub fn ks_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0f64);
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}
