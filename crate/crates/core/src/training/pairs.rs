use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Homography;
use crate::tensor::{rotation_cos_sin, warp_with, Tensor};

/// Smallest accepted source side.
pub const MIN_SOURCE: usize = 64;

/// Ranges of the random warp and photometric jitter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairParams {
    /// Rotation is uniform in `[0, max_rotation_deg)`.
    pub max_rotation_deg: f64,
    /// Scale is uniform in `[1 − scale_jitter, 1 + scale_jitter]`.
    pub scale_jitter: f64,
    pub max_translation_px: f64,
    /// Additive offset uniform in `[−brightness, brightness]`.
    pub brightness: f64,
    /// Gain uniform in `[1 − contrast, 1 + contrast]`.
    pub contrast: f64,
}

impl Default for PairParams {
    fn default() -> Self {
        Self {
            max_rotation_deg: 360.0,
            scale_jitter: 0.1,
            max_translation_px: 4.0,
            brightness: 0.05,
            contrast: 0.1,
        }
    }
}

impl PairParams {
    /// No warp and no jitter.
    pub fn identity() -> Self {
        Self {
            max_rotation_deg: 0.0,
            scale_jitter: 0.0,
            max_translation_px: 0.0,
            brightness: 0.0,
            contrast: 0.0,
        }
    }

    /// Bound on the per-pixel change introduced by jitter for `[0, 1]` images.
    pub fn jitter_amplitude(&self) -> f64 {
        self.contrast + self.brightness
    }
}

#[derive(Clone, Debug)]
pub struct TrainPair {
    pub image_a: Tensor,
    pub image_b: Tensor,
    /// Maps pixels of `image_a` onto `image_b`.
    pub gt: Homography,
    /// Row-major over `image_a`: the pixel lands inside `image_b`.
    pub mask: Vec<bool>,
}

impl TrainPair {
    pub fn height(&self) -> usize {
        self.image_a.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.image_a.shape()[3]
    }
}

/// `T(c + t) · R(θ) · S(s) · T(−c)` with the rotation convention of
/// [`crate::geometry::rotation_homography`].
pub fn similarity_homography(
    angle_deg: f64,
    scale: f64,
    tx: f64,
    ty: f64,
    width: usize,
    height: usize,
) -> Result<Homography> {
    let (cos, sin) = rotation_cos_sin(angle_deg);
    let cx = (width as f64 - 1.0) / 2.0;
    let cy = (height as f64 - 1.0) / 2.0;
    let (a, b) = (scale * cos, scale * sin);
    Homography::from_rows([
        [a, b, cx + tx - a * cx - b * cy],
        [-b, a, cy + ty + b * cx - a * cy],
        [0.0, 0.0, 1.0],
    ])
}

/// Pixels of a `w x h` image that `gt` maps inside the same-sized frame.
pub fn overlap_mask(gt: &Homography, width: usize, height: usize) -> Vec<bool> {
    let (xmax, ymax) = (width as f64 - 1.0, height as f64 - 1.0);
    (0..width * height)
        .map(|p| {
            let q = gt.apply(((p % width) as f64, (p / width) as f64));
            matches!(q, Ok((x, y)) if (0.0..=xmax).contains(&x) && (0.0..=ymax).contains(&y))
        })
        .collect()
}

/// Warps `image` by `gt`: output pixel `q` samples `image` at `gt⁻¹(q)`.
pub fn warp_image(image: &Tensor, gt: &Homography) -> Result<Tensor> {
    let (_, _, h, w) = image.dims4()?;
    let inv = gt.inverse()?;
    Ok(warp_with(image, h, w, |x, y| {
        inv.apply((x, y)).unwrap_or((f64::NAN, f64::NAN))
    }))
}

/// Warps `source` by a random similarity and jitters the result.
pub fn generate_pair(source: &Tensor, seed: u64, params: &PairParams) -> Result<TrainPair> {
    let (b, c, h, w) = source.dims4()?;
    if b != 1 || c != 3 || h < MIN_SOURCE || w < MIN_SOURCE {
        return Err(Error::invalid(format!(
            "pair source must be [1, 3, H, W] with H, W >= {MIN_SOURCE}, got {:?}",
            source.shape()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |lo: f64, hi: f64| {
        if hi > lo {
            rng.random_range(lo..hi)
        } else {
            lo
        }
    };
    let angle = uniform(0.0, params.max_rotation_deg);
    let scale = uniform(1.0 - params.scale_jitter, 1.0 + params.scale_jitter);
    let t = params.max_translation_px;
    let (tx, ty) = (uniform(-t, t), uniform(-t, t));
    let gain = uniform(1.0 - params.contrast, 1.0 + params.contrast);
    let offset = uniform(-params.brightness, params.brightness);
    pair_from(
        source,
        similarity_homography(angle, scale, tx, ty, w, h)?,
        gain,
        offset,
    )
}

/// Builds a pair from an explicit homography and photometric change.
pub fn pair_from(source: &Tensor, gt: Homography, gain: f64, offset: f64) -> Result<TrainPair> {
    let (_, _, h, w) = source.dims4()?;
    let mut image_b = warp_image(source, &gt)?;
    if gain != 1.0 || offset != 0.0 {
        for v in image_b.data_mut() {
            *v = ((*v as f64) * gain + offset).clamp(0.0, 1.0) as f32;
        }
    }
    Ok(TrainPair {
        image_a: source.clone(),
        image_b,
        mask: overlap_mask(&gt, w, h),
        gt,
    })
}
