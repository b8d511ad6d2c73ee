//! Deterministic inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rotfeat::geometry::{Homography, PointPair};
use rotfeat::matching::{DescriptorSet, Keypoint};
use rotfeat::Tensor;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// `n` unit descriptors of dimension `dim` at random pixel positions.
pub fn random_descriptors(n: usize, dim: usize, seed: u64) -> DescriptorSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let row: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        data.extend(row.iter().map(|v| v / norm));
    }
    let keypoints = (0..n)
        .map(|_| Keypoint {
            x: rng.random_range(0.0..300.0),
            y: rng.random_range(0.0..300.0),
            score: rng.random_range(0.0..1.0),
        })
        .collect();
    DescriptorSet::new(keypoints, dim, data, "bench").expect("unit rows")
}

/// `inliers` exact correspondences of a fixed homography plus `outliers`
/// random pairs, shuffled.
pub fn planted_pairs(inliers: usize, outliers: usize, seed: u64) -> Vec<PointPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = Homography::from_rows([[0.9, -0.2, 20.0], [0.15, 1.05, -10.0], [1e-4, -5e-5, 1.0]])
        .expect("invertible");
    let mut pairs: Vec<PointPair> = (0..inliers)
        .map(|_| {
            let p = (rng.random_range(0.0..300.0), rng.random_range(0.0..300.0));
            (p, h.apply(p).expect("finite"))
        })
        .collect();
    pairs.extend((0..outliers).map(|_| {
        (
            (rng.random_range(0.0..300.0), rng.random_range(0.0..300.0)),
            (rng.random_range(0.0..300.0), rng.random_range(0.0..300.0)),
        )
    }));
    for i in (1..pairs.len()).rev() {
        pairs.swap(i, rng.random_range(0..=i));
    }
    pairs
}
