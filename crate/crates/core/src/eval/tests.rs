use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::io::save_image;
use crate::matching::Correspondence;
use crate::network::RefConfig;
use crate::training::{derive_seed, synthetic_texture};

fn corr(xa: f64, ya: f64, xb: f64, yb: f64) -> Correspondence {
    Correspondence {
        index_a: 0,
        index_b: 0,
        xa,
        ya,
        xb,
        yb,
        similarity: 1.0,
        source: "t".into(),
    }
}

fn tiny_net() -> RefNet {
    let cfg = RefConfig {
        group_order: 4,
        channels: vec![8, 64],
        head_width: 8,
        ..RefConfig::default()
    };
    RefNet::new(cfg, 3).unwrap()
}

fn small_config(angles: Vec<f64>) -> MmaConfig {
    MmaConfig {
        angles,
        thresholds: vec![1.0, 3.0, 5.0],
        resize: [48, 48],
        extract: ExtractParams {
            max_keypoints: 60,
            nms_radius: 2,
        },
        ..MmaConfig::default()
    }
}

/// Projective transfer written out in homogeneous coordinates.
fn brute_force_mma(matches: &[Correspondence], h: [[f64; 3]; 3], t: f64) -> f64 {
    if matches.is_empty() {
        return 0.0;
    }
    let mut ok = 0;
    for c in matches {
        let w = h[2][0] * c.xa + h[2][1] * c.ya + h[2][2];
        let x = (h[0][0] * c.xa + h[0][1] * c.ya + h[0][2]) / w;
        let y = (h[1][0] * c.xa + h[1][1] * c.ya + h[1][2]) / w;
        if ((x - c.xb).powi(2) + (y - c.yb).powi(2)).sqrt() <= t {
            ok += 1;
        }
    }
    ok as f64 / matches.len() as f64
}

#[test]
fn mma_trivial_cases() {
    let id = Homography::identity();
    let same = MatchSet::new(
        (0..10)
            .map(|i| corr(i as f64, 2.0, i as f64, 2.0))
            .collect(),
    );
    assert_eq!(mma(&same, &id, 1.0), 1.0);
    let shifted = MatchSet::new(
        (0..10)
            .map(|i| corr(i as f64, 2.0, i as f64 + 5.0, 2.0))
            .collect(),
    );
    assert_eq!(mma(&shifted, &id, 3.0), 0.0);
    assert_eq!(mma(&shifted, &id, 5.0), 1.0);
    assert_eq!(mma(&MatchSet::default(), &id, 3.0), 0.0);
    let mut masked = same.clone();
    masked.inliers = Some((0..10).map(|i| i < 4).collect());
    assert_eq!(mma(&masked, &Homography::translation(0.0, 0.0), 0.5), 1.0);
    masked.inliers = Some(vec![false; 10]);
    assert_eq!(mma(&masked, &id, 3.0), 0.0);
}

#[test]
fn mma_matches_brute_force_and_is_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let gt = Homography::from_rows([
            [
                rng.random_range(0.8..1.2),
                rng.random_range(-0.2..0.2),
                rng.random_range(-9.0..9.0),
            ],
            [
                rng.random_range(-0.2..0.2),
                rng.random_range(0.8..1.2),
                rng.random_range(-9.0..9.0),
            ],
            [
                rng.random_range(-1e-4..1e-4),
                rng.random_range(-1e-4..1e-4),
                1.0,
            ],
        ])
        .unwrap();
        let n = rng.random_range(0..40);
        let matches: Vec<Correspondence> = (0..n)
            .map(|_| {
                let (x, y) = (rng.random_range(0.0..300.0), rng.random_range(0.0..300.0));
                let (px, py) = gt.apply((x, y)).unwrap();
                let e = rng.random_range(0.0..12.0);
                corr(x, y, px + e, py)
            })
            .collect();
        let set = MatchSet::new(matches.clone());
        let thresholds: Vec<f64> = (1..=10).map(f64::from).collect();
        let curve = mma_curve(&set, &gt, &thresholds);
        for (t, v) in thresholds.iter().zip(&curve) {
            assert!((v - brute_force_mma(&matches, gt.rows(), *t)).abs() <= 1e-9);
        }
        assert!(curve.windows(2).all(|w| w[0] <= w[1]));
    }
}

fn write_pair(dir: &Path, image: &Tensor) -> ScenePair {
    let pa = dir.join("a.png");
    save_image(image, &pa).unwrap();
    ScenePair {
        image_a: pa.clone(),
        image_b: pa,
        gt: Homography::identity(),
        scene: "self".into(),
        variation: Variation::Synthetic,
    }
}

#[test]
fn self_pair_scores_one_everywhere() {
    let dir = tempfile::tempdir().unwrap();
    let img = synthetic_texture(64, &mut ChaCha8Rng::seed_from_u64(5));
    let pair = write_pair(dir.path(), &img);
    let report = run_rotated_mma(&tiny_net(), &[pair], &small_config(vec![0.0]), 1).unwrap();
    assert!(
        report.overall[0].iter().all(|&v| v == 1.0),
        "{:?}",
        report.overall
    );
    assert_eq!(report.pairs_per_angle, 1);
    assert!(report.pairs[0].matches > 0);
}

#[test]
fn quarter_turn_is_exact_for_c4() {
    let dir = tempfile::tempdir().unwrap();
    let img = synthetic_texture(64, &mut ChaCha8Rng::seed_from_u64(6));
    let pair = write_pair(dir.path(), &img);
    let report = run_rotated_mma(
        &tiny_net(),
        &[pair],
        &small_config(vec![0.0, 90.0, 180.0]),
        1,
    )
    .unwrap();
    for row in &report.overall {
        assert!(row.iter().all(|&v| v == 1.0), "{:?}", report.overall);
    }
}

fn fixture(dir: &Path, illum: usize, view: usize) -> Vec<ScenePair> {
    write_synthetic_hpatches(dir, illum, view, 64, 9).unwrap();
    load_hpatches(dir).unwrap()
}

#[test]
fn hpatches_layout_and_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = fixture(dir.path(), 2, 3);
    assert_eq!(pairs.len(), 25);
    assert_eq!(pairs[0].scene, "i_000");
    assert_eq!(pairs[0].variation, Variation::Illumination);
    assert_eq!(pairs[24].variation, Variation::Viewpoint);
    assert_eq!(pairs[0].gt, Homography::identity());
    assert!(pairs[0].image_b.ends_with("i_000/2.ppm"));
    let config = MmaConfig::default();
    let plan = plan_rotated_mma(&pairs, &config);
    assert_eq!(plan.len(), 25 * 24);
    // Viewpoint images are the base warped by gt: sampling agrees inside.
    let v = &pairs[15];
    let a = crate::io::load_image(&v.image_a).unwrap();
    let b = crate::io::load_image(&v.image_b).unwrap();
    let expect = crate::training::warp_image(&a, &v.gt).unwrap();
    let inv = v.gt.inverse().unwrap();
    let valid = crate::training::overlap_mask(&inv, 64, 64);
    let err: f64 = (0..64 * 64)
        .filter(|&p| valid[p])
        .map(|p| (b.data()[p] - expect.data()[p]).abs() as f64)
        .sum::<f64>()
        / valid.iter().filter(|&&m| m).count() as f64;
    assert!(err < 0.03, "{err}");
    std::fs::remove_file(dir.path().join("v_000/H_1_4")).unwrap();
    assert!(load_hpatches(dir.path()).is_err());
}

#[test]
fn harness_equals_manual_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = fixture(dir.path(), 1, 1);
    let net = tiny_net();
    let mut config = small_config(vec![0.0]);
    config.thresholds = vec![3.0];
    let report = run_rotated_mma(&net, &pairs, &config, 1).unwrap();
    let mut total = 0.0;
    for p in &pairs {
        let a = crate::io::load_image(&p.image_a).unwrap();
        let b = crate::io::load_image(&p.image_b).unwrap();
        let a2 = crate::io::resize_image(&a, 48, 48).unwrap();
        let b2 = crate::io::resize_image(&b, 48, 48).unwrap();
        let s = 48.0 / 64.0;
        let gt = crate::geometry::rescale_homography(&p.gt, s, s, s, s).unwrap();
        let m = match_images(&net, &a2, &b2, &config.extract).unwrap();
        total += mma(&m, &gt, 3.0);
    }
    assert_eq!(report.overall[0][0], total / pairs.len() as f64);
    // Adding angles leaves the 0° column untouched.
    let wider = run_rotated_mma(&net, &pairs, &small_config(vec![0.0, 30.0]), 1).unwrap();
    let plain = run_rotated_mma(&net, &pairs, &small_config(vec![0.0]), 1).unwrap();
    assert_eq!(wider.overall[0], plain.overall[0]);
    assert_eq!(wider.pairs_per_angle, 10);
    assert_eq!(wider.total_evaluations, 20);
}

#[test]
fn ransac_does_not_lower_mma_on_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = fixture(dir.path(), 1, 2);
    let net = tiny_net();
    let mut config = small_config(vec![0.0, 45.0]);
    config.thresholds = vec![3.0];
    let plain = run_rotated_mma(&net, &pairs, &config, 1).unwrap();
    config.use_ransac = true;
    let filtered = run_rotated_mma(&net, &pairs, &config, 1).unwrap();
    for (p, f) in plain.pairs.iter().zip(&filtered.pairs) {
        if f.inliers.unwrap_or(0) >= 8 {
            assert!(f.mma[0] >= p.mma[0], "{p:?} vs {f:?}");
        }
    }
    assert_ne!(plain.config_hash, filtered.config_hash);
}

#[test]
fn unreadable_pairs_are_skipped_and_counted() {
    let dir = tempfile::tempdir().unwrap();
    let mut pairs = fixture(dir.path(), 1, 0);
    std::fs::write(dir.path().join("i_000/3.ppm"), b"P6\n9 9\n255\n").unwrap();
    pairs.push(ScenePair {
        image_b: dir.path().join("missing.ppm"),
        ..pairs[0].clone()
    });
    let report = run_rotated_mma(&tiny_net(), &pairs, &small_config(vec![0.0]), 1).unwrap();
    assert_eq!(report.skipped.len(), 2);
    assert_eq!(report.pairs_per_angle, 4);
    assert!(run_rotated_mma(&tiny_net(), &[], &small_config(vec![0.0]), 1).is_err());
}

#[test]
fn reports_serialize() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = fixture(dir.path(), 1, 1);
    let config = small_config(vec![0.0, 90.0]);
    let report = run_rotated_mma(&tiny_net(), &pairs, &config, 1).unwrap();
    let json = dir.path().join("r.json");
    emit_report(&report, &json, ReportFormat::Json).unwrap();
    let back: MmaReport = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(back, report);
    let csv = dir.path().join("r.csv");
    emit_report(&report, &csv, ReportFormat::Csv).unwrap();
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    assert_eq!(lines.len() - 1, 2 * 3 * 2);
    assert!(lines[1].ends_with(&report.config_hash));
    assert!(emit_report(&report, &dir.path().join("nope/r.csv"), ReportFormat::Csv).is_err());
}

#[test]
fn config_hash_tracks_protocol_parameters() {
    let base = MmaConfig::default();
    assert_eq!(base.hash(), MmaConfig::default().hash());
    assert_eq!(base.hash().len(), 64);
    let variants = [
        MmaConfig {
            angles: angle_grid(30.0),
            ..base.clone()
        },
        MmaConfig {
            thresholds: vec![3.0],
            ..base.clone()
        },
        MmaConfig {
            resize: [300, 200],
            ..base.clone()
        },
        MmaConfig {
            use_ransac: true,
            ..base.clone()
        },
        MmaConfig {
            ransac: RansacParams {
                seed: 1,
                ..RansacParams::default()
            },
            ..base.clone()
        },
        MmaConfig {
            extract: ExtractParams {
                max_keypoints: 10,
                nms_radius: 3,
            },
            ..base.clone()
        },
    ];
    let mut hashes: Vec<String> = variants.iter().map(MmaConfig::hash).collect();
    hashes.push(base.hash());
    let n = hashes.len();
    hashes.sort();
    hashes.dedup();
    assert_eq!(hashes.len(), n);
    assert!(MmaConfig {
        thresholds: vec![],
        ..base
    }
    .validate()
    .is_err());
}

fn texture(seed: u64) -> Tensor {
    synthetic_texture(64, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 0, 0)))
}

#[test]
fn vpr_self_retrieval_and_ties() {
    let queries: Vec<Tensor> = (0..6).map(|i| texture(100 + i)).collect();
    let references = (0..6)
        .map(|i| VprReference {
            index: i,
            variant: "0".into(),
            image: queries[i].clone(),
        })
        .collect();
    let db = VprDatabase {
        queries: queries.clone(),
        references,
        tolerance: 0,
    };
    let report = run_vpr(&tiny_net(), &db, &VprConfig::default(), 1).unwrap();
    assert_eq!(report.recall[0].recall, 1.0);
    assert!(report.log.iter().all(|r| r.retrieved == r.query));

    // Identical references at 1 and 4: the lower index wins.
    let refs = (0..6)
        .map(|i| VprReference {
            index: i,
            variant: "dup".into(),
            image: if i == 1 || i == 4 {
                queries[0].clone()
            } else {
                texture(200 + i as u64)
            },
        })
        .collect();
    let db = VprDatabase {
        queries: queries.clone(),
        references: refs,
        tolerance: 2,
    };
    let report = run_vpr(&tiny_net(), &db, &VprConfig::default(), 1).unwrap();
    assert_eq!(report.log[0].retrieved, 1);
    assert!(report.log[0].correct);
}

#[test]
fn vpr_database_validation_and_loading() {
    let dir = tempfile::tempdir().unwrap();
    let q = dir.path().join("queries");
    let r = dir.path().join("references/90");
    std::fs::create_dir_all(&q).unwrap();
    std::fs::create_dir_all(&r).unwrap();
    for i in 0..3u64 {
        let t = texture(i);
        save_image(&t, &q.join(format!("{i:04}.png"))).unwrap();
        save_image(
            &crate::tensor::rotate_bilinear(&t, 90.0),
            &r.join(format!("{i:04}.png")),
        )
        .unwrap();
    }
    let db = VprDatabase::load(dir.path(), 2).unwrap();
    assert_eq!(db.queries.len(), 3);
    assert_eq!(db.variants(), vec!["90".to_string()]);
    let report = run_vpr(&tiny_net(), &db, &VprConfig::default(), 1).unwrap();
    assert_eq!(report.log.len(), 3);
    std::fs::remove_file(r.join("0001.png")).unwrap();
    assert!(VprDatabase::load(dir.path(), 2).is_err());
    std::fs::write(q.join("bad.png"), b"").unwrap();
    assert!(VprDatabase::load(dir.path(), 2).is_err());
}
