//! Keypoint selection, descriptor sampling, mutual nearest-neighbour
//! matching, correspondence ensembles and rotation-prior matching.

mod interchange;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ransac_homography, Homography, PointPair, RansacParams};
use crate::group::GroupSpec;
use crate::network::RefOutput;
use crate::tensor::Tensor;

pub use interchange::{CorrespondenceFile, FileMatch};

/// Row norms must be within this of 1.
pub const UNIT_TOL: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    /// Repeatability × reliability at the pixel.
    pub score: f64,
}

/// Keypoints with one unit-norm descriptor row each.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorSet {
    keypoints: Vec<Keypoint>,
    dim: usize,
    data: Vec<f32>,
    source: String,
}

impl DescriptorSet {
    /// Validates shapes and unit row norms.
    pub fn new(
        keypoints: Vec<Keypoint>,
        dim: usize,
        data: Vec<f32>,
        source: impl Into<String>,
    ) -> Result<Self> {
        if dim == 0 || data.len() != keypoints.len() * dim {
            return Err(Error::invalid(format!(
                "{} descriptor values for {} keypoints of dimension {dim}",
                data.len(),
                keypoints.len()
            )));
        }
        for (i, row) in data.chunks(dim).enumerate() {
            let n = norm(row);
            if (n - 1.0).abs() > UNIT_TOL {
                return Err(Error::invalid(format!(
                    "descriptor {i} has norm {n}, expected 1"
                )));
            }
        }
        Ok(Self {
            keypoints,
            dim,
            data,
            source: source.into(),
        })
    }

    pub fn keypoints(&self) -> &[Keypoint] {
        &self.keypoints
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Cosine similarity of row `i` here and row `j` of `other`.
    pub fn similarity(&self, i: usize, other: &DescriptorSet, j: usize) -> f64 {
        dot(self.row(i), other.row(j))
    }
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub index_a: usize,
    pub index_b: usize,
    pub xa: f64,
    pub ya: f64,
    pub xb: f64,
    pub yb: f64,
    pub similarity: f64,
    pub source: String,
}

impl Correspondence {
    pub fn point_pair(&self) -> PointPair {
        ((self.xa, self.ya), (self.xb, self.yb))
    }
}

/// Correspondences between two images, optionally tagged by a geometric
/// verification pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchSet {
    pub matches: Vec<Correspondence>,
    pub inliers: Option<Vec<bool>>,
}

impl MatchSet {
    pub fn new(matches: Vec<Correspondence>) -> Self {
        Self {
            matches,
            inliers: None,
        }
    }

    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    pub fn point_pairs(&self) -> Vec<PointPair> {
        self.matches
            .iter()
            .map(Correspondence::point_pair)
            .collect()
    }

    /// Only the correspondences flagged as inliers (all of them when unverified).
    pub fn inlier_set(&self) -> MatchSet {
        match &self.inliers {
            None => MatchSet::new(self.matches.clone()),
            Some(mask) => MatchSet::new(
                self.matches
                    .iter()
                    .zip(mask)
                    .filter(|(_, &m)| m)
                    .map(|(c, _)| c.clone())
                    .collect(),
            ),
        }
    }

    pub fn num_inliers(&self) -> usize {
        self.inliers
            .as_ref()
            .map_or(self.matches.len(), |m| m.iter().filter(|&&b| b).count())
    }
}

/// Runs RANSAC over `matches`, returning the model and the set with its
/// inlier mask filled in.
pub fn verify(matches: &MatchSet, params: &RansacParams) -> Result<(Homography, MatchSet)> {
    let r = ransac_homography(&matches.point_pairs(), params)?;
    Ok((
        r.homography,
        MatchSet {
            matches: matches.matches.clone(),
            inliers: Some(r.inliers),
        },
    ))
}

/// Local maxima of a `[H, W]` score map under a Chebyshev window of
/// `radius`. Positive scores only; pixels within `radius` of the border are
/// skipped. Equal scores are ordered by `(y, x)`, the smaller position
/// winning, so every survivor strictly dominates its window.
pub fn nms(scores: &[f32], h: usize, w: usize, radius: usize) -> Vec<(usize, usize)> {
    let beats = |a: (usize, usize), b: (usize, usize)| {
        let (sa, sb) = (scores[a.0 * w + a.1], scores[b.0 * w + b.1]);
        sa > sb || (sa == sb && a < b)
    };
    let mut out = Vec::new();
    if h <= 2 * radius || w <= 2 * radius {
        return out;
    }
    for y in radius..h - radius {
        for x in radius..w - radius {
            if !(scores[y * w + x] > 0.0) {
                continue;
            }
            let dominant = (y - radius..=y + radius).all(|yy| {
                (x - radius..=x + radius).all(|xx| (yy, xx) == (y, x) || beats((y, x), (yy, xx)))
            });
            if dominant {
                out.push((y, x));
            }
        }
    }
    out
}

/// Gathers the channel vectors of a `[1, C, H, W]` map at `keypoints`,
/// L2-normalizing each. Keypoints whose vector is exactly zero are dropped.
pub fn sample_descriptors(
    features: &Tensor,
    keypoints: &[Keypoint],
    source: &str,
) -> Result<DescriptorSet> {
    let (b, c, h, w) = features.dims4()?;
    if b != 1 {
        return Err(Error::invalid(format!(
            "descriptor sampling expects one image, got a batch of {b}"
        )));
    }
    let plane = h * w;
    let src = features.data();
    let mut kept = Vec::with_capacity(keypoints.len());
    let mut data = Vec::with_capacity(keypoints.len() * c);
    let mut row = vec![0f32; c];
    for kp in keypoints {
        let (x, y) = (kp.x.round(), kp.y.round());
        if !(x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h) {
            return Err(Error::invalid(format!(
                "keypoint ({}, {}) outside the {w}x{h} map",
                kp.x, kp.y
            )));
        }
        let p = y as usize * w + x as usize;
        for (ch, r) in row.iter_mut().enumerate() {
            *r = src[ch * plane + p];
        }
        let n = norm(&row);
        if n == 0.0 {
            continue;
        }
        kept.push(*kp);
        data.extend(row.iter().map(|&v| (v as f64 / n) as f32));
    }
    DescriptorSet::new_unchecked(kept, c, data, source)
}

impl DescriptorSet {
    fn new_unchecked(
        keypoints: Vec<Keypoint>,
        dim: usize,
        data: Vec<f32>,
        source: &str,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("descriptor dimension is zero"));
        }
        Ok(Self {
            keypoints,
            dim,
            data,
            source: source.to_string(),
        })
    }
}

/// Scores `repeatability × reliability`, keeps NMS maxima, sorts by score
/// (ties by `(y, x)`), truncates to `max_kp` and samples descriptors.
pub fn select_keypoints(
    output: &RefOutput,
    max_kp: usize,
    nms_radius: usize,
) -> Result<Vec<Keypoint>> {
    if max_kp == 0 || nms_radius == 0 {
        return Err(Error::invalid("max_kp and nms_radius must be at least 1"));
    }
    let (b, _, h, w) = output.repeatability.dims4()?;
    if b != 1 || output.reliability.shape() != output.repeatability.shape() {
        return Err(Error::invalid(
            "keypoint selection expects single-image [1, 1, H, W] maps",
        ));
    }
    let score: Vec<f32> = output
        .repeatability
        .data()
        .iter()
        .zip(output.reliability.data())
        .map(|(&a, &b)| a * b)
        .collect();
    let mut peaks = nms(&score, h, w, nms_radius);
    peaks.sort_by(|a, b| {
        score[b.0 * w + b.1]
            .partial_cmp(&score[a.0 * w + a.1])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(b))
    });
    peaks.truncate(max_kp);
    Ok(peaks
        .into_iter()
        .map(|(y, x)| Keypoint {
            x: x as f64,
            y: y as f64,
            score: score[y * w + x] as f64,
        })
        .collect())
}

/// Keypoints plus pooled descriptors.
pub fn extract_keypoints(
    output: &RefOutput,
    max_kp: usize,
    nms_radius: usize,
    source: &str,
) -> Result<DescriptorSet> {
    let kps = select_keypoints(output, max_kp, nms_radius)?;
    sample_descriptors(&output.descriptors, &kps, source)
}

/// Keypoints plus unpooled (orientation-resolved) descriptors; needs an
/// output from the unpooled variant.
pub fn extract_unpooled(
    output: &RefOutput,
    max_kp: usize,
    nms_radius: usize,
    source: &str,
) -> Result<DescriptorSet> {
    let unpooled = output.unpooled.as_ref().ok_or_else(|| {
        Error::invalid("network output has no unpooled features (use the unpooled variant)")
    })?;
    let kps = select_keypoints(output, max_kp, nms_radius)?;
    sample_descriptors(unpooled, &kps, source)
}

/// Row-major `[a.len(), b.len()]` cosine similarities.
pub fn similarity_matrix(a: &DescriptorSet, b: &DescriptorSet) -> Result<Vec<f64>> {
    if a.dim != b.dim {
        return Err(Error::ShapeMismatch {
            op: "mutual_nn_match (descriptor dimension)",
            lhs: vec![a.dim],
            rhs: vec![b.dim],
        });
    }
    let (m, n, k) = (a.len(), b.len(), a.dim);
    let ad: Vec<f64> = a.data.iter().map(|&v| v as f64).collect();
    let bd: Vec<f64> = b.data.iter().map(|&v| v as f64).collect();
    let mut out = vec![0.0; m * n];
    if m > 0 && n > 0 {
        // SAFETY: slices sized m·k, n·k and m·n match the strides below.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                ad.as_ptr(),
                k as isize,
                1,
                bd.as_ptr(),
                1,
                k as isize,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    Ok(out)
}

fn argmax_by(n: usize, f: impl Fn(usize) -> f64) -> usize {
    let mut best = 0;
    for j in 1..n {
        if f(j) > f(best) {
            best = j;
        }
    }
    best
}

/// Pairs `(i, j)` that are each other's most similar descriptor (ties go
/// to the lowest index), in increasing `i`.
pub fn mutual_nn_match(a: &DescriptorSet, b: &DescriptorSet) -> Result<MatchSet> {
    let sims = similarity_matrix(a, b)?;
    let (m, n) = (a.len(), b.len());
    if m == 0 || n == 0 {
        return Ok(MatchSet::default());
    }
    let best_b: Vec<usize> = (0..m).map(|i| argmax_by(n, |j| sims[i * n + j])).collect();
    let best_a: Vec<usize> = (0..n).map(|j| argmax_by(m, |i| sims[i * n + j])).collect();
    let matches = (0..m)
        .filter(|&i| best_a[best_b[i]] == i)
        .map(|i| {
            let j = best_b[i];
            let (ka, kb) = (a.keypoints[i], b.keypoints[j]);
            Correspondence {
                index_a: i,
                index_b: j,
                xa: ka.x,
                ya: ka.y,
                xb: kb.x,
                yb: kb.y,
                similarity: sims[i * n + j],
                source: a.source.clone(),
            }
        })
        .collect();
    Ok(MatchSet::new(matches))
}

/// Pools both sets, merges duplicate pixel pairs (keeping the higher
/// similarity), sorts by similarity and keeps the top `keep_fraction`.
/// Ties are broken by source tag, then by position in the source set.
pub fn ensemble_correspondences(
    m1: &MatchSet,
    m2: &MatchSet,
    keep_fraction: f64,
) -> Result<MatchSet> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "keep_fraction must be in (0, 1], got {keep_fraction}"
        )));
    }
    let mut pool: Vec<(usize, &Correspondence)> = m1
        .matches
        .iter()
        .enumerate()
        .chain(m2.matches.iter().enumerate())
        .collect();
    let rank = |a: &(usize, &Correspondence), b: &(usize, &Correspondence)| {
        b.1.similarity
            .total_cmp(&a.1.similarity)
            .then_with(|| a.1.source.cmp(&b.1.source))
            .then(a.0.cmp(&b.0))
    };
    pool.sort_by(rank);
    // After sorting, the first occurrence of a pixel pair is the one to keep.
    let mut seen = std::collections::HashSet::new();
    pool.retain(|(_, c)| {
        seen.insert([
            c.xa.to_bits(),
            c.ya.to_bits(),
            c.xb.to_bits(),
            c.yb.to_bits(),
        ])
    });
    let keep = (keep_fraction * pool.len() as f64).ceil() as usize;
    Ok(MatchSet::new(
        pool.into_iter()
            .take(keep)
            .map(|(_, c)| c.clone())
            .collect(),
    ))
}

/// Undoes a known rotation by `θ_p` on `b`: each orientation block is
/// shifted back by `p` before mutual nearest-neighbour matching.
pub fn rotation_prior_match(
    a_unpooled: &DescriptorSet,
    b_unpooled: &DescriptorSet,
    prior_p: usize,
    group: GroupSpec,
) -> Result<MatchSet> {
    let n = group.order();
    if prior_p >= n {
        return Err(Error::invalid(format!(
            "rotation prior {prior_p} is not an element of C_{n}"
        )));
    }
    let d = b_unpooled.dim;
    if d % n != 0 {
        return Err(Error::invalid(format!(
            "descriptor dimension {d} is not a multiple of the group order {n}"
        )));
    }
    let mut data = Vec::with_capacity(b_unpooled.data.len());
    for row in b_unpooled.data.chunks(d) {
        let start = data.len();
        for block in row.chunks(n) {
            data.extend((0..n).map(|r| block[(r + prior_p) % n]));
        }
        let nrm = norm(&data[start..]);
        for v in &mut data[start..] {
            *v = (*v as f64 / nrm) as f32;
        }
    }
    let shifted = DescriptorSet {
        keypoints: b_unpooled.keypoints.clone(),
        dim: d,
        data,
        source: b_unpooled.source.clone(),
    };
    mutual_nn_match(a_unpooled, &shifted)
}

#[cfg(test)]
mod tests;
