use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_set(n: usize, dim: usize, rng: &mut ChaCha8Rng, source: &str) -> DescriptorSet {
    let mut data = Vec::with_capacity(n * dim);
    let mut kps = Vec::with_capacity(n);
    for i in 0..n {
        let row: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        data.extend(row.iter().map(|v| (v / nrm) as f32));
        kps.push(Keypoint {
            x: i as f64,
            y: rng.random_range(0.0..100.0f64).floor(),
            score: 1.0,
        });
    }
    DescriptorSet::new(kps, dim, data, source).unwrap()
}

fn map_output(score: Vec<f32>, h: usize, w: usize) -> RefOutput {
    let desc = Tensor::from_fn(vec![1, 2, h, w], |i| if i < h * w { 1.0 } else { 0.0 });
    RefOutput {
        descriptors: desc,
        reliability: Tensor::full(vec![1, 1, h, w], 1.0),
        repeatability: Tensor::new(vec![1, 1, h, w], score).unwrap(),
        unpooled: None,
    }
}

/// Exhaustive mutual-NN: ties resolved to the lowest index, like the library.
fn brute_mutual(a: &DescriptorSet, b: &DescriptorSet) -> Vec<(usize, usize)> {
    let best = |n: usize, f: &dyn Fn(usize) -> f64| {
        (0..n).fold(0, |bi, j| if f(j) > f(bi) { j } else { bi })
    };
    let mut out = Vec::new();
    for i in 0..a.len() {
        let j = best(b.len(), &|j| a.similarity(i, b, j));
        if best(a.len(), &|k| a.similarity(k, b, j)) == i {
            out.push((i, j));
        }
    }
    out
}

fn corr(sim: f64, source: &str, xa: f64) -> Correspondence {
    Correspondence {
        index_a: 0,
        index_b: 0,
        xa,
        ya: 0.0,
        xb: xa,
        yb: 1.0,
        similarity: sim,
        source: source.into(),
    }
}

#[test]
fn single_peak_gives_one_keypoint() {
    let (h, w) = (9, 11);
    let mut s = vec![0.0; h * w];
    s[4 * w + 6] = 0.7;
    let set = extract_keypoints(&map_output(s, h, w), 10, 1, "m").unwrap();
    assert_eq!(set.len(), 1);
    assert_eq!((set.keypoints()[0].x, set.keypoints()[0].y), (6.0, 4.0));
}

#[test]
fn equal_maxima_tie_break_by_position() {
    let (h, w) = (9, 9);
    let mut s = vec![0.0; h * w];
    s[4 * w + 5] = 0.5;
    s[5 * w + 4] = 0.5;
    let kps = select_keypoints(&map_output(s, h, w), 10, 2).unwrap();
    assert_eq!(kps.len(), 1);
    assert_eq!((kps[0].x, kps[0].y), (5.0, 4.0));
}

#[test]
fn keypoints_dominate_their_window() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (h, w) = (40, 33);
    for radius in 1..4 {
        // Quantized scores make ties common.
        let s: Vec<f32> = (0..h * w)
            .map(|_| (rng.random_range(0..20) as f32) / 20.0)
            .collect();
        let kps = select_keypoints(&map_output(s.clone(), h, w), 50, radius).unwrap();
        assert!(kps.len() <= 50 && !kps.is_empty());
        for k in &kps {
            let (x, y) = (k.x as usize, k.y as usize);
            assert!(x >= radius && y >= radius && x + radius < w && y + radius < h);
            for yy in y - radius..=y + radius {
                for xx in x - radius..=x + radius {
                    if (yy, xx) != (y, x) {
                        let (a, b) = (s[y * w + x], s[yy * w + xx]);
                        assert!(a > b || (a == b && (y, x) < (yy, xx)));
                    }
                }
            }
        }
        for pair in kps.windows(2) {
            assert!(pair[0].score >= pair[1].score);
        }
    }
}

#[test]
fn identical_sets_match_identically() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random_set(30, 16, &mut rng, "m");
    let m = mutual_nn_match(&a, &a).unwrap();
    assert_eq!(m.len(), 30);
    for (i, c) in m.matches.iter().enumerate() {
        assert_eq!((c.index_a, c.index_b), (i, i));
        assert!((c.similarity - 1.0).abs() < 1e-5);
    }
}

#[test]
fn planted_bijection_is_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random_set(50, 32, &mut rng, "m");
    let mut perm: Vec<usize> = (0..50).collect();
    perm.shuffle(&mut rng);
    let data: Vec<f32> = perm.iter().flat_map(|&i| a.row(i).to_vec()).collect();
    let kps = perm.iter().map(|&i| a.keypoints()[i]).collect();
    let b = DescriptorSet::new(kps, 32, data, "m").unwrap();
    let m = mutual_nn_match(&a, &b).unwrap();
    assert_eq!(m.len(), 50);
    for c in &m.matches {
        assert_eq!(perm[c.index_b], c.index_a);
    }
}

#[test]
fn mutual_nn_equals_exhaustive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for trial in 0..20 {
        let (na, nb) = (rng.random_range(1..=200), rng.random_range(1..=200));
        let dim = [2, 3, 8][trial % 3];
        let a = random_set(na, dim, &mut rng, "m");
        let b = random_set(nb, dim, &mut rng, "m");
        let m = mutual_nn_match(&a, &b).unwrap();
        let got: Vec<(usize, usize)> = m.matches.iter().map(|c| (c.index_a, c.index_b)).collect();
        assert_eq!(got, brute_mutual(&a, &b));
        let mut seen_b = std::collections::HashSet::new();
        for c in &m.matches {
            assert!(seen_b.insert(c.index_b));
            assert!((c.similarity - a.similarity(c.index_a, &b, c.index_b)).abs() < 1e-5);
        }
    }
}

#[test]
fn asymmetric_best_friend_is_excluded() {
    let v = |x: f32, y: f32| {
        let n = (x * x + y * y).sqrt();
        [x / n, y / n]
    };
    let kp = |i| Keypoint {
        x: i as f64,
        y: 0.0,
        score: 1.0,
    };
    // a0's best is b0, but b0 prefers a1.
    let a_rows = [v(1.0, 0.3), v(1.0, 0.0)];
    let a = DescriptorSet::new(vec![kp(0), kp(1)], 2, a_rows.concat(), "m").unwrap();
    let b = DescriptorSet::new(vec![kp(0)], 2, v(1.0, 0.0).to_vec(), "m").unwrap();
    let m = mutual_nn_match(&a, &b).unwrap();
    assert_eq!(m.len(), 1);
    assert_eq!(m.matches[0].index_a, 1);
}

#[test]
fn dimension_mismatch_is_an_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random_set(3, 4, &mut rng, "m");
    let b = random_set(3, 5, &mut rng, "m");
    assert!(mutual_nn_match(&a, &b).is_err());
}

#[test]
fn ensemble_basic_cases() {
    let m1 = MatchSet::new(
        [0.9, 0.6, 0.8, 0.7]
            .iter()
            .enumerate()
            .map(|(i, &s)| corr(s, "ref", i as f64))
            .collect(),
    );
    let out = ensemble_correspondences(&m1, &MatchSet::default(), 0.5).unwrap();
    let sims: Vec<f64> = out.matches.iter().map(|c| c.similarity).collect();
    assert_eq!(sims, vec![0.9, 0.8]);

    let empty = ensemble_correspondences(&MatchSet::default(), &MatchSet::default(), 0.5).unwrap();
    assert!(empty.is_empty());
    assert!(ensemble_correspondences(&m1, &m1, 0.0).is_err());
}

#[test]
fn ensemble_matches_sort_and_slice_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let mk = |n: usize, src: &str, off: f64, rng: &mut ChaCha8Rng| {
            MatchSet::new(
                (0..n)
                    .map(|i| corr((rng.random_range(0..10) as f64) / 10.0, src, off + i as f64))
                    .collect(),
            )
        };
        let m1 = mk(rng.random_range(0..30), "ref", 0.0, &mut rng);
        let m2 = mk(rng.random_range(0..30), "rord", 1000.0, &mut rng);
        let frac = rng.random_range(0.1..=1.0);
        let got = ensemble_correspondences(&m1, &m2, frac).unwrap();

        let mut pool: Vec<(f64, String, usize, f64)> = m1
            .matches
            .iter()
            .enumerate()
            .chain(m2.matches.iter().enumerate())
            .map(|(i, c)| (c.similarity, c.source.clone(), i, c.xa))
            .collect();
        pool.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap()
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let keep = (frac * pool.len() as f64).ceil() as usize;
        let want: Vec<f64> = pool.iter().take(keep).map(|p| p.3).collect();
        let have: Vec<f64> = got.matches.iter().map(|c| c.xa).collect();
        assert_eq!(have, want);

        let swapped = ensemble_correspondences(&m2, &m1, frac).unwrap();
        assert_eq!(swapped, got);
    }
}

#[test]
fn ensemble_deduplicates_shared_pairs() {
    let m1 = MatchSet::new(vec![corr(0.5, "ref", 1.0), corr(0.4, "ref", 2.0)]);
    let m2 = MatchSet::new(vec![corr(0.7, "rord", 1.0)]);
    let out = ensemble_correspondences(&m1, &m2, 1.0).unwrap();
    assert_eq!(out.len(), 2);
    assert_eq!(out.matches[0].similarity, 0.7);
    assert_eq!(out.matches[0].source, "rord");
}

fn shifted(set: &DescriptorSet, n: usize, p: usize) -> DescriptorSet {
    let d = set.dim();
    let data = set
        .data()
        .chunks(n)
        .flat_map(|block| (0..n).map(move |r| block[(r + n - p) % n]))
        .collect::<Vec<_>>();
    DescriptorSet::new(set.keypoints().to_vec(), d, data, set.source()).unwrap()
}

#[test]
fn rotation_prior_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let g = GroupSpec::new(8).unwrap();
    let a = random_set(40, 32, &mut rng, "m");
    let b = random_set(40, 32, &mut rng, "m");
    assert_eq!(
        rotation_prior_match(&a, &b, 0, g).unwrap(),
        mutual_nn_match(&a, &b).unwrap()
    );
    for p in 0..8 {
        let m = rotation_prior_match(&a, &shifted(&a, 8, p), p, g).unwrap();
        assert_eq!(m.len(), 40);
        for c in &m.matches {
            assert_eq!(c.index_a, c.index_b);
            assert!((c.similarity - 1.0).abs() < 1e-5);
        }
    }
    let odd = random_set(4, 12, &mut rng, "m");
    assert!(rotation_prior_match(&odd, &odd, 1, g).is_err());
    assert!(rotation_prior_match(&a, &a, 8, g).is_err());
}

#[test]
fn correspondence_file_round_trip() {
    let mut set = MatchSet::new(vec![corr(0.5, "ext", 1.5), corr(0.25, "ext", 7.0)]);
    set.inliers = Some(vec![true, false]);
    let file = CorrespondenceFile::from_match_set(&set, "a.png", "b.png", "ext", [300, 300]);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    file.write(&path).unwrap();
    let back = CorrespondenceFile::read(&path).unwrap();
    assert_eq!(back, file);
    let ms = back.to_match_set();
    assert_eq!(ms.point_pairs(), set.point_pairs());
    assert_eq!(ms.num_inliers(), 1);

    std::fs::write(
        &path,
        r#"{"image_a":"a","image_b":"b","model":"x","matches":[],"extra":1}"#,
    )
    .unwrap();
    assert!(CorrespondenceFile::read(&path).is_err());
}
