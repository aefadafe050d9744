#![allow(dead_code)]

pub mod oracle;

use mlta::model::{GatingParams, ItemParams};
use mlta::synth::{simulate, synthetic_design, SimTruth};
use mlta::{MltaModel, ModelConfig, Variant};
use ndarray::{Array2, Array3};
use rand::Rng;

pub const COVARIATE_PROBS: [f64; 2] = [0.5, 0.3];

/// Model with every parameter drawn uniformly from `[-range, range]`.
pub fn random_model(config: ModelConfig, r: usize, n_cols: usize, range: f64, seed: u64) -> MltaModel {
    let mut rng = mlta::rng::stream(seed, 99);
    let mut m = MltaModel::zeros(config, n_cols, r);
    let mut draw = || rng.random_range(-range..=range);
    m.gating = GatingParams {
        beta: Array2::from_shape_fn((config.groups - 1, n_cols), |_| draw()),
    };
    m.items = ItemParams {
        b: Array2::from_shape_fn((config.groups, r), |_| draw()),
        w: Array3::from_shape_fn((config.slope_blocks(), r, config.trait_dim), |_| draw()),
    };
    m
}

/// Simulates `n` senders from `model` with the standard binary covariates.
pub fn sim(model: &MltaModel, n: usize, seed: u64) -> SimTruth {
    let x = synthetic_design(n, &COVARIATE_PROBS[..model.n_covariates() - 1], seed ^ 0xD15);
    simulate(model, &x, seed).unwrap()
}

/// Two well separated groups with opposite skill profiles, one trait
/// dimension, seven skills.
pub fn separated_g2_d1() -> MltaModel {
    let cfg = ModelConfig::new(2, 1, Variant::Unconstrained).unwrap();
    let mut m = MltaModel::zeros(cfg, 3, 7);
    let b1 = [2.0, 1.5, 2.0, 1.5, -1.5, -2.0, -1.5];
    let b2 = [-1.5, -2.0, -1.5, -2.0, 1.5, 2.0, 2.0];
    let w1 = [1.0, 0.8, 1.2, 1.0, 0.8, 1.2, 1.0];
    let w2 = [0.6, 1.2, 1.0, 1.4, 0.8, 1.0, 1.2];
    for k in 0..7 {
        m.items.b[[0, k]] = b1[k];
        m.items.b[[1, k]] = b2[k];
        m.items.w[[0, k, 0]] = w1[k];
        m.items.w[[1, k, 0]] = w2[k];
    }
    m.gating.beta = ndarray::array![[-0.3, 0.8, -0.5]];
    m
}

/// Adjusted Rand index between two labelings.
pub fn adjusted_rand(a: &[usize], b: &[usize]) -> f64 {
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut t = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        t[x][y] += 1;
    }
    let c2 = |v: u64| (v * v.saturating_sub(1)) as f64 / 2.0;
    let idx: f64 = t.iter().flatten().map(|&v| c2(v)).sum();
    let ra: f64 = t.iter().map(|row| c2(row.iter().sum())).sum();
    let rb: f64 = (0..kb).map(|j| c2(t.iter().map(|row| row[j]).sum())).sum();
    let total = c2(a.len() as u64);
    let expected = ra * rb / total;
    let max = (ra + rb) / 2.0;
    if max == expected {
        return 1.0;
    }
    (idx - expected) / (max - expected)
}

/// Latent class model whose groups sit at distinct tie-probability levels
/// (logits spread over [-1.5, 1.5] with item noise of +-0.5), covariate
/// effects in [-0.5, 0.5].
pub fn separated_lc(g: usize, r: usize, seed: u64) -> MltaModel {
    let cfg = ModelConfig::new(g, 0, Variant::Unconstrained).unwrap();
    let mut rng = mlta::rng::stream(seed, 98);
    let mut m = MltaModel::zeros(cfg, 3, r);
    for h in 0..g {
        let level = if g == 1 { 0.0 } else { -1.5 + 3.0 * h as f64 / (g - 1) as f64 };
        for k in 0..r {
            m.items.b[[h, k]] = level + rng.random_range(-0.5..=0.5);
        }
    }
    for v in m.gating.beta.iter_mut() {
        *v = rng.random_range(-0.5..=0.5);
    }
    m
}
