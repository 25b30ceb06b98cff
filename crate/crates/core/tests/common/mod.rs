#![allow(dead_code)]

pub mod oracle;

use dsmt_core::model::{ModelConfig, Variant};
use dsmt_core::nn::Tensor;
use dsmt_core::rng;
use dsmt_core::volume::{batch_tensor, synthesize_dataset, PhantomConfig, VolumeSample};
use rand::Rng;

/// Side-16 model small enough for finite differences and quick training.
pub fn tiny(variant: Variant) -> ModelConfig {
    ModelConfig { side: 16, block_channels: vec![2, 3, 4, 5, 6], latent_dim: 8, head_hidden: vec![6, 5], variant, ..Default::default() }
}

pub fn phantoms(n: usize, side: usize, seed: u64) -> Vec<VolumeSample> {
    synthesize_dataset(n, &PhantomConfig { side, ..Default::default() }, seed).unwrap()
}

pub fn targets(samples: &[&VolumeSample]) -> (Tensor, Vec<f64>, Vec<f64>) {
    let ages = samples.iter().map(|s| s.age).collect();
    let sexes = samples.iter().map(|s| s.sex.as_target()).collect();
    (batch_tensor(samples).unwrap(), ages, sexes)
}

/// Uniform noise batch with random labels.
pub fn random_batch(n: usize, side: usize, seed: u64) -> (Tensor, Vec<f64>, Vec<f64>) {
    let mut r = rng::seeded(seed);
    let x = Tensor::from_vec(&[n, 1, side, side, side], (0..n * side * side * side).map(|_| r.random::<f64>()).collect());
    let ages = (0..n).map(|_| r.random_range(20.0..80.0)).collect();
    let sexes = (0..n).map(|_| if r.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
    (x, ages, sexes)
}
