//! Fixtures shared by the benchmarks.

use maskdiff::denoiser::DenoiserInput;
use maskdiff::rng::{keyed_rng, normal_tensor};
use maskdiff::shapesdata::{generate_sample, DatasetSpec};
use maskdiff::{InstanceMask, Tensor};

/// A batch of `n` noisy 32x32 inputs with real object masks.
pub fn denoiser_batch(n: usize) -> DenoiserInput<f32> {
    let spec = DatasetSpec::default();
    let mut rng = keyed_rng(7, &[]);
    let mut masks = Vec::with_capacity(n);
    for id in 0..n {
        masks.push(
            generate_sample(&spec, id)
                .expect("default spec is valid")
                .mask
                .to_tensor(),
        );
    }
    DenoiserInput {
        x_t: normal_tensor(&[n, 3, 32, 32], &mut rng),
        mask: Tensor::stack(&masks).expect("same-shaped masks"),
        t: (0..n).map(|i| 1 + (i * 37) % 200).collect(),
        s: (0..n).map(|i| i % 5).collect(),
        tokens: (0..n).map(|i| i % 36).collect(),
    }
}

pub fn object_mask(id: usize) -> InstanceMask {
    generate_sample(&DatasetSpec::default(), id)
        .expect("default spec is valid")
        .mask
}

/// `n` random feature vectors of length `d`.
pub fn features(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    use rand::Rng;
    let mut rng = keyed_rng(seed, &[]);
    (0..n)
        .map(|_| (0..d).map(|_| rng.random::<f64>()).collect())
        .collect()
}
