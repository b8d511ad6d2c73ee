use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn write(dir: &Path, name: &str, bytes: &[u8]) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, bytes).unwrap();
    p
}

#[test]
fn ppm_bytes_decode_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = b"P6\n2 2\n255\n".to_vec();
    let pixels = [0u8, 51, 255, 10, 20, 30, 128, 64, 1, 7, 8, 9];
    bytes.extend_from_slice(&pixels);
    let t = load_image(&write(dir.path(), "a.ppm", &bytes)).unwrap();
    assert_eq!(t.shape(), &[1, 3, 2, 2]);
    for p in 0..4 {
        for c in 0..3 {
            assert_eq!(t.data()[c * 4 + p], pixels[p * 3 + c] as f32 / 255.0);
        }
    }
}

#[test]
fn pgm_replicates_channels() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = b"P5\n3 1\n255\n".to_vec();
    bytes.extend_from_slice(&[0, 100, 255]);
    let t = load_image(&write(dir.path(), "g.pgm", &bytes)).unwrap();
    assert_eq!(t.shape(), &[1, 3, 1, 3]);
    for c in 0..3 {
        assert_eq!(&t.data()[c * 3..c * 3 + 3], &[0.0, 100.0 / 255.0, 1.0]);
    }
}

#[test]
fn round_trip_within_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img = Tensor::from_fn(vec![1, 3, 9, 13], |_| rng.random::<f32>());
    for name in ["r.png", "r.ppm"] {
        let p = dir.path().join(name);
        save_image(&img, &p).unwrap();
        let back = load_image(&p).unwrap();
        assert!(
            back.max_abs_diff(&img).unwrap() <= 0.5 / 255.0 + 1e-6,
            "{name}"
        );
    }
    let p = dir.path().join("r.pgm");
    save_image(&img, &p).unwrap();
    assert_eq!(load_image(&p).unwrap().shape(), &[1, 3, 9, 13]);
}

#[test]
fn bad_files_are_structured_errors() {
    let dir = tempfile::tempdir().unwrap();
    let truncated = write(dir.path(), "t.ppm", b"P6\n4 4\n255\n\x01\x02");
    assert!(matches!(load_image(&truncated), Err(Error::Format { .. })));
    let junk = write(dir.path(), "j.ppm", b"not an image at all");
    assert!(matches!(load_image(&junk), Err(Error::Format { .. })));
    let gif = write(dir.path(), "x.gif", b"GIF89a\x01\x00\x01\x00\x00\x00\x00;");
    let err = load_image(&gif).unwrap_err();
    assert!(err.to_string().contains("x.gif"), "{err}");
    assert!(matches!(
        load_image(&dir.path().join("missing.png")),
        Err(Error::Io { .. })
    ));
    let img = Tensor::zeros(vec![1, 3, 2, 2]);
    assert!(save_image(&img, &dir.path().join("o.bmp")).is_err());
}

#[test]
fn resize_matches_scales() {
    let img = Tensor::from_fn(vec![1, 1, 4, 6], |i| i as f32);
    assert_eq!(resize_image(&img, 6, 4).unwrap(), img);
    let up = resize_image(&img, 12, 8).unwrap();
    // Output (2, 2) reads source (1, 1).
    assert_eq!(up.at4(0, 0, 2, 2), img.at4(0, 0, 1, 1));
    // Output (3, 0) reads source (1.5, 0).
    assert_eq!(up.at4(0, 0, 0, 3), 1.5);
}

fn descriptor_set() -> DescriptorSet {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (n, d) = (7, 5);
    let kps: Vec<Keypoint> = (0..n)
        .map(|i| Keypoint {
            x: i as f64 * 3.0,
            y: 2.0,
            score: 0.5,
        })
        .collect();
    let mut data = Vec::new();
    for _ in 0..n {
        let v: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        data.extend(v.iter().map(|x| x / norm));
    }
    DescriptorSet::new(kps, d, data, "ref").unwrap()
}

#[test]
fn descriptor_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let set = descriptor_set();
    for enc in [BlobEncoding::Base64, BlobEncoding::Raw] {
        let p = dir.path().join(format!("{enc:?}.json"));
        write_descriptors(&set, Path::new("img.png"), &p, enc).unwrap();
        assert_eq!(read_descriptors(&p).unwrap(), set);
    }
    assert!(dir.path().join("Raw.json.f32").exists());
}

#[test]
fn corrupt_descriptor_files_fail() {
    let dir = tempfile::tempdir().unwrap();
    let set = descriptor_set();
    let p = dir.path().join("d.json");
    write_descriptors(&set, Path::new("img.png"), &p, BlobEncoding::Raw).unwrap();
    std::fs::write(dir.path().join("d.json.f32"), [0u8; 12]).unwrap();
    assert!(read_descriptors(&p).is_err());
    let text = std::fs::read_to_string(&p)
        .unwrap()
        .replace("\"count\"", "\"extra\": 1, \"count\"");
    std::fs::write(&p, text).unwrap();
    assert!(matches!(read_descriptors(&p), Err(Error::Format { .. })));
}
