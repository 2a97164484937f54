//! Shared fixtures for the benchmark targets.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gia_core::attack::{craft_parameters, AttackConfig, CraftedRound};
use gia_core::data::{gen_synthetic, SyntheticTargets};
use gia_core::linalg::lerp;
use gia_core::nn::{Batch, FeatureBox, ModelShape};

pub fn desk_batch(dim: usize, batch_size: usize) -> Batch {
    gen_synthetic(dim, batch_size, 42, SyntheticTargets::LinearNoise).unwrap()
}

pub fn desk_shape(dim: usize, neurons: usize) -> ModelShape {
    ModelShape { input_dim: dim, attack_neurons: neurons, hidden: vec![64], outputs: 1 }
}

pub fn desk_attack_config(dim: usize, seed: u64) -> AttackConfig {
    AttackConfig::tabular_default(FeatureBox(vec![(0.0, 1.0); dim]), seed)
}

/// A crafted round over an even bias sweep, for gradient/slice benchmarks.
pub fn crafted_round(dim: usize, neurons: usize) -> (CraftedRound, Vec<f64>) {
    let cfg = desk_attack_config(dim, 7);
    let shape = desk_shape(dim, neurons);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w: Vec<f64> = (0..dim).map(|_| rng.gen_range(-0.03..0.03)).collect();
    let (lo, hi) = gia_core::attack::initial_interval(&cfg.feature_box, &w);
    let biases: Vec<f64> =
        (0..neurons).map(|i| lerp(lo, hi, i as f64 / (neurons - 1) as f64)).collect();
    let crafted = craft_parameters(&cfg, &shape, &w, &biases, &mut rng).unwrap();
    (crafted, biases)
}
