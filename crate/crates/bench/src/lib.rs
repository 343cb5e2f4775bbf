//! Fixtures shared by the benchmarks.

use feddisc_core::diffusion::DenoiserShape;
use feddisc_core::rng::{self, tag};
use feddisc_core::Denoiser;

/// `n` feature vectors of width `d` drawn around `clusters` well-separated centres.
pub fn feature_cloud(n: usize, d: usize, clusters: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::stream(seed, &[tag("bench-cloud")]);
    let centres: Vec<Vec<f64>> = (0..clusters)
        .map(|_| {
            rng::normal_vec(&mut r, d)
                .into_iter()
                .map(|v| 4.0 * v)
                .collect()
        })
        .collect();
    (0..n)
        .map(|i| {
            centres[i % clusters]
                .iter()
                .map(|c| c + 0.5 * rng::normal(&mut r))
                .collect()
        })
        .collect()
}

/// Denoiser with the default desk-scale layout and random hidden weights.
pub fn desk_denoiser(seed: u64) -> Denoiser {
    let shape = DenoiserShape {
        data_dim: 32,
        feature_dim: 16,
        num_categories: 10,
        time_dim: 16,
        category_dim: 16,
        hidden: vec![256, 256],
    };
    Denoiser::new(shape, seed).expect("valid shape")
}
