//! HPatches-style sequence folders: `<scene>/1.ppm … 6.ppm` plus `H_1_k`
//! homographies from image 1 to image k. Scenes prefixed `i_` vary
//! illumination, `v_` viewpoint; anything else is tagged synthetic.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ScenePair, Variation};
use crate::error::{Error, Result};
use crate::geometry::Homography;
use crate::io::save_image;
use crate::training::{derive_seed, synthetic_texture, warp_image};

/// Target images paired with image 1 in every scene.
pub const HPATCHES_TARGETS: [usize; 5] = [2, 3, 4, 5, 6];

fn image_path(scene: &Path, k: usize) -> PathBuf {
    let ppm = scene.join(format!("{k}.ppm"));
    let png = scene.join(format!("{k}.png"));
    if !ppm.exists() && png.exists() {
        png
    } else {
        ppm
    }
}

/// Enumerates the five pairs of every scene under `root`, in sorted scene
/// order. Images are only read during evaluation; homographies are parsed
/// here and must all be present.
pub fn load_hpatches(root: &Path) -> Result<Vec<ScenePair>> {
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut scenes: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    scenes.sort();
    if scenes.is_empty() {
        return Err(Error::Format {
            path: root.to_path_buf(),
            msg: "no scene folders".into(),
        });
    }
    let mut pairs = Vec::with_capacity(scenes.len() * HPATCHES_TARGETS.len());
    for scene in scenes {
        let name = scene
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let variation = if name.starts_with("i_") {
            Variation::Illumination
        } else if name.starts_with("v_") {
            Variation::Viewpoint
        } else {
            Variation::Synthetic
        };
        for k in HPATCHES_TARGETS {
            pairs.push(ScenePair {
                image_a: image_path(&scene, 1),
                image_b: image_path(&scene, k),
                gt: Homography::read(&scene.join(format!("H_1_{k}")))?,
                scene: name.clone(),
                variation,
            });
        }
    }
    Ok(pairs)
}

/// A mild random projective warp about the image center.
fn random_viewpoint(size: usize, rng: &mut ChaCha8Rng) -> Result<Homography> {
    let c = (size as f64 - 1.0) / 2.0;
    let angle = rng.random_range(-0.2..0.2f64);
    let s = rng.random_range(0.85..1.15);
    let (sin, cos) = angle.sin_cos();
    // Keeps the projective denominator within 2% of 1 over the image.
    let p = 0.04 / size as f64;
    let core = Homography::from_rows([
        [s * cos, s * sin, rng.random_range(-4.0..4.0)],
        [-s * sin, s * cos, rng.random_range(-4.0..4.0)],
        [rng.random_range(-p..p), rng.random_range(-p..p), 1.0],
    ])?;
    Homography::translation(c, c)
        .compose(&core)?
        .compose(&Homography::translation(-c, -c))
}

/// Writes a synthetic sequence tree mirroring the HPatches layout:
/// `illumination` scenes `i_NNN` (identity homographies, photometric change)
/// followed by `viewpoint` scenes `v_NNN` (random projective warps).
pub fn write_synthetic_hpatches(
    root: &Path,
    illumination: usize,
    viewpoint: usize,
    size: usize,
    seed: u64,
) -> Result<()> {
    let scenes = (0..illumination)
        .map(|i| (format!("i_{i:03}"), true))
        .chain((0..viewpoint).map(|i| (format!("v_{i:03}"), false)));
    for (idx, (name, illum)) in scenes.enumerate() {
        let dir = root.join(&name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, idx as u64, 0));
        let base = synthetic_texture(size, &mut rng);
        save_image(&base, &dir.join("1.ppm"))?;
        for k in HPATCHES_TARGETS {
            let (image, gt) = if illum {
                let gain = rng.random_range(0.6..1.2f32);
                let offset = rng.random_range(-0.1..0.1f32);
                let mut img = base.clone();
                for v in img.data_mut() {
                    *v = (*v * gain + offset).clamp(0.0, 1.0);
                }
                (img, Homography::identity())
            } else {
                let gt = random_viewpoint(size, &mut rng)?;
                (warp_image(&base, &gt)?, gt)
            };
            save_image(&image, &dir.join(format!("{k}.ppm")))?;
            gt.write(&dir.join(format!("H_1_{k}")))?;
        }
    }
    Ok(())
}
