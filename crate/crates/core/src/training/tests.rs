use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{soft_average_precision, Var, AP_IGNORE};
use crate::geometry::{rotation_homography, Homography};
use crate::gradcheck::check_gradients;
use crate::group::smooth_random_field;
use crate::network::{save_checkpoint, Variant};

const H: f64 = 1e-6;

fn texture(size: usize, seed: u64) -> Tensor {
    synthetic_texture(size, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn tiny_config(steps: usize) -> TrainConfig {
    TrainConfig {
        model: RefConfig {
            group_order: 4,
            channels: vec![8, 8, 16],
            head_width: 8,
            variant: Variant::Pooled,
            ..RefConfig::default()
        },
        steps,
        seed: 5,
        losses: LossParams {
            ap_queries: 16,
            candidate_stride: 2,
            ..LossParams::default()
        },
        ..TrainConfig::default()
    }
}

/// Exact AP of a ranking (descending similarity, ignored entries dropped).
fn exact_ap(sims: &[f64], labels: &[i8]) -> f64 {
    let mut items: Vec<(f64, i8)> = sims
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l != AP_IGNORE)
        .map(|(&s, &l)| (s, l))
        .collect();
    items.sort_by(|a, b| b.0.total_cmp(&a.0));
    let total = items.iter().filter(|i| i.1 == 1).count() as f64;
    let mut hits = 0.0;
    let mut ap = 0.0;
    for (k, it) in items.iter().enumerate() {
        if it.1 == 1 {
            hits += 1.0;
            ap += hits / (k + 1) as f64;
        }
    }
    ap / total
}

#[test]
fn textures_are_deterministic_and_normalized() {
    let a = texture(64, 1);
    assert_eq!(a, texture(64, 1));
    assert_ne!(a, texture(64, 2));
    assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn identity_pair_is_a_copy() {
    let src = texture(64, 2);
    let pair = generate_pair(&src, 3, &PairParams::identity()).unwrap();
    assert_eq!(pair.image_b, src);
    assert!(pair.mask.iter().all(|&m| m));
    assert_eq!(pair.gt, Homography::identity());
}

#[test]
fn quarter_turn_pair() {
    let src = texture(64, 3);
    let gt = similarity_homography(90.0, 1.0, 0.0, 0.0, 64, 64).unwrap();
    assert_eq!(gt, rotation_homography(90.0, 64, 64));
    let pair = pair_from(&src, gt, 1.0, 0.0).unwrap();
    assert!(pair.mask.iter().all(|&m| m));
    assert_eq!(pair.image_b, crate::tensor::rotate_bilinear(&src, 90.0));
}

#[test]
fn random_pair_is_warp_consistent() {
    let src = texture(80, 4);
    let params = PairParams::default();
    for seed in 0..5 {
        let pair = generate_pair(&src, seed, &params).unwrap();
        let warped = warp_image(&src, &pair.gt).unwrap();
        // Pixels of b whose preimage lies inside a.
        let valid = overlap_mask(&pair.gt.inverse().unwrap(), 80, 80);
        let (mut err, mut n) = (0.0, 0usize);
        for c in 0..3 {
            for (p, &v) in valid.iter().enumerate() {
                if v {
                    let i = c * 6400 + p;
                    err += (warped.data()[i] - pair.image_b.data()[i]).abs() as f64;
                    n += 1;
                }
            }
        }
        assert!(n > 0 && err / n as f64 <= params.jitter_amplitude());
        assert!(pair.mask.iter().filter(|&&m| m).count() > 3200);
    }
}

#[test]
fn small_sources_are_rejected() {
    assert!(generate_pair(&texture(32, 0), 0, &PairParams::default()).is_err());
}

fn cosim_value(rep_a: &Tensor, rep_b: &Tensor, gt: &Homography) -> f64 {
    let (h, w) = (rep_a.shape()[2], rep_a.shape()[3]);
    let mask = overlap_mask(gt, w, h);
    let windows = Arc::new(grid_windows(h, w, 16, 8, Some(&mask), 0.5));
    let warp = Arc::new(warp_to_a(gt, h, w));
    let mut tape = Tape::<f32>::new();
    let a = tape.leaf(rep_a.clone());
    let b = tape.leaf(rep_b.clone());
    let l = loss_repeatability_cosim(&mut tape, a, b, &warp, &windows).unwrap();
    tape.value(l).data()[0] as f64
}

#[test]
fn cosim_loss_vanishes_on_aligned_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let rep = smooth_random_field(1, 64, &mut rng);
    for angle in [90.0, 30.0] {
        let gt = similarity_homography(angle, 1.0, 0.0, 0.0, 64, 64).unwrap();
        let rep_b = warp_image(&rep, &gt).unwrap();
        let loss = cosim_value(&rep, &rep_b, &gt);
        assert!(loss <= 1e-3, "angle {angle}: {loss}");
    }
    let c = Tensor::full(vec![1, 1, 64, 64], 0.3);
    let gt = similarity_homography(10.0, 1.0, 0.0, 0.0, 64, 64).unwrap();
    let loss = cosim_value(&c, &Tensor::full(vec![1, 1, 64, 64], 0.7), &gt);
    assert!(loss.abs() <= 1e-6, "{loss}");
}

#[test]
fn cosim_without_overlap_is_an_error() {
    let gt = Homography::translation(500.0, 0.0);
    let mask = overlap_mask(&gt, 32, 32);
    let windows = Arc::new(grid_windows(32, 32, 16, 8, Some(&mask), 0.5));
    let mut tape = Tape::<f32>::new();
    let a = tape.leaf(Tensor::zeros(vec![1, 1, 32, 32]));
    let warp = Arc::new(warp_to_a(&gt, 32, 32));
    assert!(loss_repeatability_cosim(&mut tape, a, a, &warp, &windows).is_err());
}

#[test]
fn peakiness_cases() {
    let windows = Arc::new(grid_windows(32, 32, 16, 16, None, 0.0));
    let value = |t: Tensor<f64>| {
        let mut tape = Tape::<f64>::new();
        let v = tape.leaf(t);
        let l = loss_peakiness(&mut tape, v, &windows).unwrap();
        tape.value(l).data()[0]
    };
    assert!((value(Tensor::<f64>::full(vec![1, 1, 32, 32], 0.4)) - 1.0).abs() < 1e-12);
    let mut one_hot = Tensor::<f64>::zeros(vec![1, 1, 32, 32]);
    for (y, x) in [(3, 5), (3, 20), (17, 9), (30, 30)] {
        one_hot.data_mut()[y * 32 + x] = 1.0;
    }
    let expected = 1.0 - (1.0 - 1.0 / 256.0);
    assert!((value(one_hot) - expected).abs() < 1e-12);
}

fn distinct(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(0.1..0.9))
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (h, w) = (12, 12);
    let gt = similarity_homography(20.0, 1.0, 0.5, -0.5, w, h).unwrap();
    let mask = overlap_mask(&gt, w, h);
    let windows = Arc::new(grid_windows(h, w, 6, 3, Some(&mask), 0.5));
    let warp = Arc::new(warp_to_a(&gt, h, w));
    let reps = [
        distinct(vec![1, 1, h, w], &mut rng),
        distinct(vec![1, 1, h, w], &mut rng),
    ];
    let r = check_gradients(&reps, H, 1, |t, v| {
        loss_repeatability_cosim(t, v[0], v[1], &warp, &windows)
    })
    .unwrap();
    assert!(r.passed(), "cosim {r:?}");

    let peak_windows = Arc::new(grid_windows(h, w, 4, 4, None, 0.0));
    let r = check_gradients(&reps[..1], H, 2, |t, v| {
        loss_peakiness(t, v[0], &peak_windows)
    })
    .unwrap();
    assert!(r.passed(), "peakiness {r:?}");

    let params = LossParams {
        ap_queries: 6,
        positive_radius: 1.5,
        negative_radius: 3.0,
        ..LossParams::default()
    };
    let sample = ApSample::draw(&gt, &mask, h, w, &params, &mut rng).unwrap();
    let d = 4;
    // Unit descriptors keep similarities inside the binned range.
    let unit = |rng: &mut ChaCha8Rng| {
        let t = Tensor::<f64>::from_fn(vec![1, d, h, w], |_| rng.random_range(-1.0..1.0));
        crate::tensor::l2_normalize_channel(&t)
    };
    let descs = [
        unit(&mut rng),
        unit(&mut rng),
        distinct(vec![1, 1, h, w], &mut rng),
    ];
    let r = check_gradients(&descs[..2], H, 3, |t, v| {
        loss_average_precision(t, v[0], v[1], &sample, 25, None)
    })
    .unwrap();
    assert!(r.passed(), "ap {r:?}");
    let r = check_gradients(&descs, H, 4, |t, v| {
        loss_average_precision(t, v[0], v[1], &sample, 25, Some((v[2], 0.5)))
    })
    .unwrap();
    assert!(r.passed(), "reliability-weighted ap {r:?}");
}

fn ap_loss_of(desc_a: &Tensor, desc_b: &Tensor, gt: &Homography, seed: u64) -> f64 {
    let (h, w) = (desc_a.shape()[2], desc_a.shape()[3]);
    let mask = overlap_mask(gt, w, h);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample = ApSample::draw(gt, &mask, h, w, &LossParams::default(), &mut rng).unwrap();
    let mut tape = Tape::<f32>::new();
    let (a, b): (Var, Var) = (tape.leaf(desc_a.clone()), tape.leaf(desc_b.clone()));
    let l = loss_average_precision(&mut tape, a, b, &sample, 25, None).unwrap();
    tape.value(l).data()[0] as f64
}

#[test]
fn ap_loss_vanishes_for_a_warped_copy() {
    // Random Fourier features of position: similarity ≈ exp(−d² / 2σ²).
    let (h, w, k, sigma) = (64, 64, 256, 3.0);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut normal = || {
        let (u, v): (f64, f64) = (rng.random_range(1e-12..1.0), rng.random());
        (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
    };
    let feats: Vec<(f64, f64, f64)> = (0..k)
        .map(|_| (normal() / sigma, normal() / sigma, normal() * 10.0))
        .collect();
    let desc = Tensor::from_fn(vec![1, k, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        let (wx, wy, b) = feats[c];
        ((wx * (p % w) as f64 + wy * (p / w) as f64 + b).cos() * (2.0 / k as f64).sqrt()) as f32
    });
    let desc = crate::tensor::l2_normalize_channel(&desc);
    for gt in [
        Homography::translation(3.0, -2.0),
        similarity_homography(30.0, 1.0, 0.0, 0.0, w, h).unwrap(),
    ] {
        let desc_b = crate::tensor::l2_normalize_channel(&warp_image(&desc, &gt).unwrap());
        let loss = ap_loss_of(&desc, &desc_b, &gt, 9);
        assert!(loss <= 0.05, "{loss}");
    }
}

#[test]
fn ap_of_random_ranking_is_positive_fraction() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let unit = |rng: &mut ChaCha8Rng| {
        let v: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect::<Vec<_>>()
    };
    let mut total = 0.0;
    for _ in 0..100 {
        let q = unit(&mut rng);
        let sims: Vec<f64> = (0..40)
            .map(|_| unit(&mut rng).iter().zip(&q).map(|(a, b)| a * b).sum())
            .collect();
        let labels: Vec<i8> = (0..40).map(|i| (i % 2) as i8).collect();
        total += soft_average_precision(&sims, &labels, 25);
    }
    let mean = total / 100.0;
    assert!((mean - 0.5).abs() <= 0.1, "{mean}");
}

#[test]
fn soft_ap_tracks_exact_ap() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let n = rng.random_range(4..=20);
        let sims: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut labels: Vec<i8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        labels[0] = 1;
        let (soft, exact) = (
            soft_average_precision(&sims, &labels, 25),
            exact_ap(&sims, &labels),
        );
        // Well-separated lists only: items closer than a bin width tie.
        let mut sorted = sims.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).all(|p| p[1] - p[0] > 2.0 / 24.0) {
            assert!((soft - exact).abs() <= 0.05, "{soft} vs {exact}");
        }
    }
    let sims = [0.9, 0.5, 0.1, -0.3, -0.7];
    let labels = [1, 0, 1, 0, 1];
    let (soft, exact) = (
        soft_average_precision(&sims, &labels, 25),
        exact_ap(&sims, &labels),
    );
    assert!((soft - exact).abs() <= 0.05, "{soft} vs {exact}");
}

#[test]
fn training_is_deterministic() {
    let cfg = tiny_config(3);
    let a = train(&cfg).unwrap();
    let b = train(&cfg).unwrap();
    assert_eq!(a.reports, b.reports);
    let dir = tempfile::tempdir().unwrap();
    let (pa, pb) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    save_checkpoint(&a.net, 3, &pa).unwrap();
    save_checkpoint(&b.net, 3, &pb).unwrap();
    assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
    for r in &a.reports {
        for v in [r.repeatability_cosim, r.peakiness, r.ap_loss, r.total] {
            assert!(v.is_finite() && v >= 0.0);
        }
        let sum = r.repeatability_cosim + r.peakiness + r.ap_loss;
        assert!((r.total - sum).abs() < 1e-5);
    }
    let csv = dir.path().join("loss.csv");
    write_loss_csv(&a.reports, &csv).unwrap();
    let text = std::fs::read_to_string(csv).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.starts_with(LOSS_CSV_HEADER));
}

#[test]
fn training_moves_parameters_and_running_stats() {
    for weighting in [false, true] {
        let mut cfg = tiny_config(2);
        cfg.losses.reliability_weighting = weighting;
        let fresh = RefNet::new(cfg.model.clone(), derive_seed(cfg.seed, 0, 3)).unwrap();
        let out = train(&cfg).unwrap();
        for (name, t, _) in fresh.params().iter() {
            let after = out.net.params().get(name).unwrap();
            // The reliability head only enters the loss through the weighting.
            if name.starts_with("rel.") && !weighting {
                assert_eq!(after, t, "{name} changed");
            } else {
                assert_ne!(after, t, "{name} did not change");
            }
        }
    }
}

#[test]
fn non_finite_loss_names_the_term() {
    let cfg = tiny_config(1);
    let mut net = RefNet::new(cfg.model.clone(), 0).unwrap();
    let w = net.params_mut().get_mut("rep.1.bias").unwrap();
    w.data_mut()[0] = f32::NAN;
    let err = train_from(net, &cfg).err().unwrap().to_string();
    assert!(
        err.contains("repeatability_cosim") || err.contains("peakiness"),
        "{err}"
    );
}

#[test]
fn config_rejects_unknown_keys_and_bad_values() {
    assert!(serde_json::from_str::<TrainConfig>(r#"{"stepz": 3}"#).is_err());
    let cfg: TrainConfig =
        serde_json::from_str(r#"{"steps": 3, "losses": {"ap_bins": 10}}"#).unwrap();
    assert_eq!(cfg.losses.ap_bins, 10);
    assert!(TrainConfig {
        steps: 0,
        ..tiny_config(1)
    }
    .validate()
    .is_err());
    assert!(TrainConfig {
        image_size: 32,
        ..tiny_config(1)
    }
    .validate()
    .is_err());
}
