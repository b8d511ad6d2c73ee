use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::check_gradients;

const H: f64 = 1e-3;

/// Random values kept at least `gap` away from zero (relu/abs kinks).
fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng, gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(gap..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

fn assert_passes(name: &str, report: crate::gradcheck::GradReport) {
    assert!(
        report.passed(),
        "{name}: {} of {} entries failed, worst {:?} (rel {:.2e})",
        report.failures,
        report.checked,
        report.worst,
        report.max_rel_err
    );
}

#[test]
fn sum_gradient_is_ones() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 5.0]).unwrap());
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
}

#[test]
fn relu_subgradient_is_zero_at_negatives() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
    let r = tape.relu(x);
    let s = tape.sum(r);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0]);
}

#[test]
fn fan_out_accumulates() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
    let y = tape.mul(x, x).unwrap();
    let z = tape.add(y, x).unwrap();
    let s = tape.sum(z);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[7.0, 9.0]);
}

#[test]
fn non_scalar_backward_is_rejected() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::zeros(vec![2]));
    assert!(tape.backward(x).is_err());
}

#[test]
fn conv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = [
        random(vec![2, 2, 5, 5], &mut rng, 0.0),
        random(vec![3, 2, 3, 3], &mut rng, 0.0),
        random(vec![3], &mut rng, 0.0),
    ];
    let r = check_gradients(&inputs, H, 2, |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1)).unwrap();
    assert_passes("conv2d", r);
    let r = check_gradients(&inputs, H, 3, |t, v| t.conv2d(v[0], v[1], None, 2, 0)).unwrap();
    assert_passes("conv2d stride 2", r);
}

#[test]
fn batchnorm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = [
        random(vec![2, 4, 3, 3], &mut rng, 0.0),
        random(vec![2], &mut rng, 0.2),
        random(vec![2], &mut rng, 0.0),
    ];
    let r = check_gradients(&inputs, H, 5, |t, v| {
        Ok(t.batchnorm(v[0], v[1], v[2], 1e-5, 2)?.0)
    })
    .unwrap();
    assert_passes("batchnorm", r);
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = [random(vec![1, 3, 3, 3], &mut rng, 0.01)];
    assert_passes(
        "relu",
        check_gradients(&x, H, 1, |t, v| Ok(t.relu(v[0]))).unwrap(),
    );
    assert_passes(
        "softplus",
        check_gradients(&x, H, 1, |t, v| Ok(t.softplus(v[0]))).unwrap(),
    );
    let pos = [Tensor::from_fn(vec![1, 1, 3, 3], |i| 0.1 + i as f64 * 0.3)];
    assert_passes(
        "squash",
        check_gradients(&pos, H, 1, |t, v| Ok(t.squash(v[0]))).unwrap(),
    );
    assert_passes(
        "softmax",
        check_gradients(&x, H, 1, |t, v| t.softmax_channel(v[0])).unwrap(),
    );
    assert_passes(
        "l2_normalize",
        check_gradients(&x, H, 1, |t, v| t.l2_normalize_channel(v[0])).unwrap(),
    );
    let y = [random(vec![1, 3, 3, 3], &mut rng, 0.0)];
    let two = [x[0].clone(), y[0].clone()];
    assert_passes(
        "add",
        check_gradients(&two, H, 1, |t, v| t.add(v[0], v[1])).unwrap(),
    );
    assert_passes(
        "mul",
        check_gradients(&two, H, 1, |t, v| t.mul(v[0], v[1])).unwrap(),
    );
    assert_passes(
        "scale/add_scalar",
        check_gradients(&x, H, 1, |t, v| {
            let s = t.scale(v[0], -2.5);
            Ok(t.add_scalar(s, 0.75))
        })
        .unwrap(),
    );
    assert_passes(
        "mean",
        check_gradients(&x, H, 1, |t, v| t.mean(v[0])).unwrap(),
    );
    assert_passes(
        "narrow/reshape",
        check_gradients(&x, H, 1, |t, v| {
            let n = t.narrow_channels(v[0], 1, 2)?;
            t.reshape(n, vec![2, 9])
        })
        .unwrap(),
    );
}

#[test]
fn group_pool_gradient() {
    // Distinct, well separated values so the arg-max is stable under ±h.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut vals: Vec<f64> = (0..2 * 8 * 4).map(|i| i as f64 * 0.05).collect();
    for i in (1..vals.len()).rev() {
        let j = rng.random_range(0..=i);
        vals.swap(i, j);
    }
    let x = [Tensor::new(vec![2, 8, 2, 2], vals).unwrap()];
    assert_passes(
        "group_pool",
        check_gradients(&x, H, 1, |t, v| t.group_pool(v[0], 4)).unwrap(),
    );
}

#[test]
fn sparse_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = [random(vec![2, 1, 5, 5], &mut rng, 0.0)];
    let map = Arc::new(SparseMap::bilinear(5, 5, 4, 4, |x, y| {
        (x * 1.1 + 0.3, y * 0.9 + 0.6)
    }));
    assert_passes(
        "sparse",
        check_gradients(&x, H, 1, |t, v| {
            t.sparse(v[0], map.clone(), vec![2, 1, 4, 4])
        })
        .unwrap(),
    );
}

#[test]
fn window_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let windows = Arc::new(Windows {
        plane: 16,
        pixels: vec![(0..8).collect(), (4..16).collect(), vec![0, 5, 10, 15]],
    });
    let ab = [
        random(vec![2, 1, 4, 4], &mut rng, 0.0),
        random(vec![2, 1, 4, 4], &mut rng, 0.0),
    ];
    assert_passes(
        "window_cosine",
        check_gradients(&ab, H, 1, |t, v| {
            t.window_cosine(v[0], v[1], windows.clone())
        })
        .unwrap(),
    );
    let vals: Vec<f64> = (0..32).map(|i| ((i * 7) % 32) as f64 * 0.03).collect();
    let x = [Tensor::new(vec![2, 1, 4, 4], vals).unwrap()];
    assert_passes(
        "window_peak",
        check_gradients(&x, H, 1, |t, v| t.window_peak(v[0], windows.clone())).unwrap(),
    );
}

#[test]
fn matmul_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let ab = [
        random(vec![4, 3], &mut rng, 0.0),
        random(vec![4, 5], &mut rng, 0.0),
    ];
    assert_passes(
        "matmul_tn",
        check_gradients(&ab, H, 1, |t, v| t.matmul_tn(v[0], v[1])).unwrap(),
    );
}

#[test]
fn soft_ap_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let bins = 25;
    let delta = 2.0 / (bins - 1) as f64;
    // Keep similarities away from bin centers, where the kernel has kinks.
    let sims = Tensor::from_fn(vec![3, 40], |_| loop {
        let s: f64 = rng.random_range(-0.98..0.98);
        let frac = ((1.0 - s) / delta).fract();
        if frac > 0.05 && frac < 0.95 {
            break s;
        }
    });
    let labels: Vec<i8> = (0..120).map(|i| [1, 0, 0, AP_IGNORE][i % 4]).collect();
    let labels = Arc::new(labels);
    assert_passes(
        "soft_ap",
        check_gradients(&[sims], H, 1, |t, v| t.soft_ap(v[0], labels.clone(), bins)).unwrap(),
    );
}

#[test]
fn backward_visits_consumers_first() {
    // A diamond: both branches must have flowed into `x` before it is read.
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::new(vec![1], vec![2.0]).unwrap());
    let a = tape.scale(x, 3.0);
    let b = tape.mul(a, x).unwrap();
    let c = tape.add(a, b).unwrap();
    let s = tape.sum(c);
    tape.backward(s).unwrap();
    // d/dx (3x + 3x²) = 3 + 6x
    assert_eq!(tape.grad(x).unwrap(), &[15.0]);
}
