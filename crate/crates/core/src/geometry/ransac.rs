use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    dlt_homography, has_collinear_triple, symmetric_transfer_error, Homography, PointPair,
};
use crate::error::{Error, Result};

/// Minimal samples closer to collinear than this are redrawn.
const SAMPLE_COLLINEAR_EPS: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RansacParams {
    /// Inlier bound on the symmetric transfer error, in pixels.
    pub threshold_px: f64,
    pub max_iters: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            threshold_px: 3.0,
            max_iters: 2000,
            confidence: 0.995,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RansacResult {
    pub homography: Homography,
    pub inliers: Vec<bool>,
    pub num_inliers: usize,
    pub iterations: usize,
}

fn score(h: &Homography, pairs: &[PointPair], threshold: f64) -> Option<Vec<bool>> {
    let h_inv = h.inverse().ok()?;
    Some(
        pairs
            .iter()
            .map(|&(a, b)| symmetric_transfer_error(h, &h_inv, a, b) <= threshold)
            .collect(),
    )
}

fn count(mask: &[bool]) -> usize {
    mask.iter().filter(|&&m| m).count()
}

/// Iterations needed to draw one all-inlier sample with `confidence`, given
/// inlier ratio `w`.
fn adaptive_iters(confidence: f64, w: f64, cap: usize) -> usize {
    let p_good = w.powi(4);
    if p_good >= 1.0 {
        return 1;
    }
    if p_good <= 0.0 {
        return cap;
    }
    let n = (1.0 - confidence).ln() / (1.0 - p_good).ln();
    if n.is_finite() {
        (n.ceil() as usize).clamp(1, cap)
    } else {
        cap
    }
}

/// Seeded RANSAC over 4-point DLT fits. The consensus set of the best minimal
/// model is refit by least squares; the refit is kept only if it does not
/// lose inliers.
pub fn ransac_homography(pairs: &[PointPair], params: &RansacParams) -> Result<RansacResult> {
    if pairs.len() < 4 {
        return Err(Error::NoModel(format!(
            "{} correspondences, at least 4 required",
            pairs.len()
        )));
    }
    if !(params.threshold_px > 0.0) || !(0.0..1.0).contains(&params.confidence) {
        return Err(Error::invalid(
            "RANSAC needs threshold > 0 and confidence in [0, 1)",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(Homography, Vec<bool>, usize)> = None;
    let mut needed = params.max_iters;
    let mut it = 0;
    while it < needed {
        it += 1;
        let idx = sample(&mut rng, pairs.len(), 4);
        let minimal: Vec<PointPair> = idx.iter().map(|i| pairs[i]).collect();
        let src: Vec<(f64, f64)> = minimal.iter().map(|p| p.0).collect();
        let dst: Vec<(f64, f64)> = minimal.iter().map(|p| p.1).collect();
        if has_collinear_triple(&src, SAMPLE_COLLINEAR_EPS)
            || has_collinear_triple(&dst, SAMPLE_COLLINEAR_EPS)
        {
            continue;
        }
        let Ok(h) = dlt_homography(&minimal) else {
            continue;
        };
        let Some(mask) = score(&h, pairs, params.threshold_px) else {
            continue;
        };
        let c = count(&mask);
        if best.as_ref().is_none_or(|b| c > b.2) {
            needed = adaptive_iters(
                params.confidence,
                c as f64 / pairs.len() as f64,
                params.max_iters,
            );
            best = Some((h, mask, c));
        }
    }
    let (mut h, mut mask, mut c) = match best {
        Some(b) if b.2 >= 4 => b,
        _ => {
            return Err(Error::NoModel(format!(
                "no model with 4 or more inliers among {} correspondences",
                pairs.len()
            )))
        }
    };
    // Refit on the consensus set until it stops growing.
    for _ in 0..5 {
        let inl: Vec<PointPair> = pairs
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(p, _)| *p)
            .collect();
        let Ok(refit) = dlt_homography(&inl) else {
            break;
        };
        let Some(new_mask) = score(&refit, pairs, params.threshold_px) else {
            break;
        };
        let nc = count(&new_mask);
        if nc < c {
            break;
        }
        let grew = nc > c || new_mask != mask;
        h = refit;
        mask = new_mask;
        c = nc;
        if !grew {
            break;
        }
    }
    Ok(RansacResult {
        homography: h,
        inliers: mask,
        num_inliers: c,
        iterations: it,
    })
}
