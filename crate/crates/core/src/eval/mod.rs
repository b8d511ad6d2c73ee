//! Evaluation protocols: mean matching accuracy over rotated image pairs and
//! inlier-count place recognition.

mod hpatches;
mod report;
mod vpr;

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{
    rescale_homography, resize_scales, rotation_homography, Homography, RansacParams,
};
use crate::io::{load_image, resize_image};
use crate::matching::{extract_keypoints, mutual_nn_match, verify, DescriptorSet, MatchSet};
use crate::network::RefNet;
use crate::tensor::{rotate_bilinear, Tensor};

pub use hpatches::{load_hpatches, write_synthetic_hpatches, HPATCHES_TARGETS};
pub use report::{emit_report, ReportFormat, CSV_HEADER};
pub use vpr::{run_vpr, Retrieval, VariantRecall, VprConfig, VprDatabase, VprReference, VprReport};

/// Fraction of correspondences whose `a` keypoint, projected by `gt`, lands
/// within `threshold_px` of its `b` keypoint. Only inliers count when the set
/// carries an inlier mask; an empty set scores 0.
pub fn mma(matches: &MatchSet, gt: &Homography, threshold_px: f64) -> f64 {
    mma_curve(matches, gt, &[threshold_px])[0]
}

/// [`mma`] at every threshold, projecting each keypoint once.
pub fn mma_curve(matches: &MatchSet, gt: &Homography, thresholds: &[f64]) -> Vec<f64> {
    let kept: Vec<_> = match &matches.inliers {
        None => matches.matches.iter().collect(),
        Some(mask) => matches
            .matches
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(c, _)| c)
            .collect(),
    };
    if kept.is_empty() {
        return vec![0.0; thresholds.len()];
    }
    let errors: Vec<f64> = kept
        .iter()
        .map(|c| match gt.apply((c.xa, c.ya)) {
            Ok((x, y)) => (x - c.xb).hypot(y - c.yb),
            Err(_) => f64::INFINITY,
        })
        .collect();
    thresholds
        .iter()
        .map(|&t| errors.iter().filter(|&&e| e <= t).count() as f64 / errors.len() as f64)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variation {
    Illumination,
    Viewpoint,
    Synthetic,
}

impl Variation {
    pub fn name(self) -> &'static str {
        match self {
            Variation::Illumination => "illumination",
            Variation::Viewpoint => "viewpoint",
            Variation::Synthetic => "synthetic",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenePair {
    pub image_a: PathBuf,
    pub image_b: PathBuf,
    /// Maps `image_a` onto `image_b` at the original resolutions.
    pub gt: Homography,
    pub scene: String,
    pub variation: Variation,
}

/// Keypoint selection applied to every image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractParams {
    pub max_keypoints: usize,
    pub nms_radius: usize,
}

impl Default for ExtractParams {
    fn default() -> Self {
        Self {
            max_keypoints: 500,
            nms_radius: 3,
        }
    }
}

/// Keypoints and pooled descriptors of one image.
pub fn extract(net: &RefNet, image: &Tensor, params: &ExtractParams) -> Result<DescriptorSet> {
    let out = net.forward(image)?;
    extract_keypoints(&out, params.max_keypoints, params.nms_radius, "ref")
}

/// Mutual nearest-neighbour matches between two images.
pub fn match_images(
    net: &RefNet,
    a: &Tensor,
    b: &Tensor,
    params: &ExtractParams,
) -> Result<MatchSet> {
    mutual_nn_match(&extract(net, a, params)?, &extract(net, b, params)?)
}

/// RANSAC-filters `matches`; without a model every match is rejected.
pub fn filter_matches(matches: &MatchSet, params: &RansacParams) -> MatchSet {
    match verify(matches, params) {
        Ok((_, verified)) => verified,
        Err(_) => MatchSet {
            matches: matches.matches.clone(),
            inliers: Some(vec![false; matches.len()]),
        },
    }
}

/// Angles `0, step, …` below 360.
pub fn angle_grid(step_deg: f64) -> Vec<f64> {
    (0..)
        .map(|i| i as f64 * step_deg)
        .take_while(|&a| a < 360.0)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MmaConfig {
    pub angles: Vec<f64>,
    pub thresholds: Vec<f64>,
    /// Both images are resized to `[width, height]`.
    pub resize: [usize; 2],
    pub extract: ExtractParams,
    pub use_ransac: bool,
    pub ransac: RansacParams,
}

impl Default for MmaConfig {
    fn default() -> Self {
        Self {
            angles: angle_grid(15.0),
            thresholds: (1..=10).map(f64::from).collect(),
            resize: [300, 300],
            extract: ExtractParams::default(),
            use_ransac: false,
            ransac: RansacParams::default(),
        }
    }
}

impl MmaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.angles.is_empty() || self.thresholds.is_empty() {
            return Err(Error::invalid(
                "angle and threshold grids must be non-empty",
            ));
        }
        if self
            .angles
            .iter()
            .chain(&self.thresholds)
            .any(|v| !v.is_finite())
            || self.thresholds.iter().any(|&t| t < 0.0)
        {
            return Err(Error::invalid(
                "angles must be finite and thresholds finite and >= 0",
            ));
        }
        if self.resize.contains(&0) {
            return Err(Error::invalid("resize dimensions must be >= 1"));
        }
        if self.extract.max_keypoints == 0 || self.extract.nms_radius == 0 {
            return Err(Error::invalid("max_keypoints and nms_radius must be >= 1"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical (key-sorted) JSON of the protocol.
    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// Hex SHA-256 of `value`'s JSON with object keys sorted.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let canonical = serde_json::to_value(value)
        .and_then(|v| serde_json::to_string(&v))
        .expect("protocol configs serialize");
    Sha256::digest(canonical.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// One (pair, angle) evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub scene: String,
    pub image_b: PathBuf,
    pub variation: Variation,
    pub angle: f64,
    pub matches: usize,
    /// RANSAC inliers, when RANSAC is on.
    pub inliers: Option<usize>,
    /// MMA at each threshold of the grid.
    pub mma: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedPair {
    pub scene: String,
    pub image_b: PathBuf,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationGrid {
    pub variation: Variation,
    pub n_pairs: usize,
    /// `[angle][threshold]`.
    pub mma: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmaReport {
    pub angles: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub resize: [usize; 2],
    pub ransac: bool,
    pub seed: u64,
    pub config_hash: String,
    /// Averages weight every pair equally.
    pub weighting: String,
    /// MMA assigned to a pair without correspondences.
    pub empty_match_mma: f64,
    pub pairs_per_angle: usize,
    pub total_evaluations: usize,
    /// `[angle][threshold]` over all evaluated pairs.
    pub overall: Vec<Vec<f64>>,
    pub by_variation: Vec<VariationGrid>,
    pub pairs: Vec<PairRecord>,
    pub skipped: Vec<SkippedPair>,
}

/// A pair decoded and resized to the protocol frame.
#[derive(Clone, Debug)]
pub struct PreparedPair {
    pub image_a: Tensor,
    pub image_b: Tensor,
    /// `gt` rescaled to the resized frames.
    pub gt: Homography,
}

/// Loads both images, resizes them to `[w, h]` and rescales `gt`.
pub fn prepare_pair(pair: &ScenePair, resize: [usize; 2]) -> Result<PreparedPair> {
    let a = load_image(&pair.image_a)?;
    let b = load_image(&pair.image_b)?;
    prepare_images(&a, &b, &pair.gt, resize)
}

pub fn prepare_images(
    a: &Tensor,
    b: &Tensor,
    gt: &Homography,
    [w, h]: [usize; 2],
) -> Result<PreparedPair> {
    let (_, _, ha, wa) = a.dims4()?;
    let (_, _, hb, wb) = b.dims4()?;
    let (sxa, sya) = resize_scales(wa, ha, w, h);
    let (sxb, syb) = resize_scales(wb, hb, w, h);
    Ok(PreparedPair {
        image_a: resize_image(a, w, h)?,
        image_b: resize_image(b, w, h)?,
        gt: rescale_homography(gt, sxa, sya, sxb, syb)?,
    })
}

/// Rotates `b` by `angle_deg` and composes the rotation onto `gt`.
pub fn rotate_pair(b: &Tensor, gt: &Homography, angle_deg: f64) -> Result<(Tensor, Homography)> {
    if angle_deg.rem_euclid(360.0) == 0.0 {
        return Ok((b.clone(), *gt));
    }
    let (_, _, h, w) = b.dims4()?;
    let rot = rotation_homography(angle_deg, w, h);
    Ok((rotate_bilinear(b, angle_deg), rot.compose(gt)?))
}

/// Matches, optional RANSAC and MMA for one prepared pair at every angle.
pub fn evaluate_prepared(
    net: &RefNet,
    pair: &PreparedPair,
    config: &MmaConfig,
) -> Result<Vec<(MatchSet, Vec<f64>)>> {
    let set_a = extract(net, &pair.image_a, &config.extract)?;
    config
        .angles
        .iter()
        .map(|&angle| {
            let (b, gt) = rotate_pair(&pair.image_b, &pair.gt, angle)?;
            let set_b = extract(net, &b, &config.extract)?;
            let mut matches = mutual_nn_match(&set_a, &set_b)?;
            if config.use_ransac {
                matches = filter_matches(&matches, &config.ransac);
            }
            let curve = mma_curve(&matches, &gt, &config.thresholds);
            Ok((matches, curve))
        })
        .collect()
}

/// Pair evaluations the protocol performs: `(pair index, angle index)` in
/// report order.
pub fn plan_rotated_mma(dataset: &[ScenePair], config: &MmaConfig) -> Vec<(usize, usize)> {
    (0..dataset.len())
        .flat_map(|p| (0..config.angles.len()).map(move |a| (p, a)))
        .collect()
}

struct IndexedRecord {
    angle_index: usize,
    record: PairRecord,
}

impl std::ops::Deref for IndexedRecord {
    type Target = PairRecord;
    fn deref(&self) -> &PairRecord {
        &self.record
    }
}

/// Builds a thread pool of `jobs` workers (0: available parallelism).
pub fn worker_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::invalid(format!("cannot build worker pool: {e}")))
}

/// The rotated-pair protocol: every pair is resized, then for every angle
/// `b` is rotated, matched against `a` by mutual nearest neighbours,
/// optionally RANSAC-filtered, and scored over the threshold grid.
/// Unreadable pairs are skipped and listed in the report.
pub fn run_rotated_mma(
    net: &RefNet,
    dataset: &[ScenePair],
    config: &MmaConfig,
    jobs: usize,
) -> Result<MmaReport> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("the dataset has no pairs"));
    }
    let pool = worker_pool(jobs)?;
    let outcomes: Vec<Result<std::result::Result<Vec<IndexedRecord>, SkippedPair>>> =
        pool.install(|| {
            dataset
                .par_iter()
                .map(|pair| {
                    let prepared = match prepare_pair(pair, config.resize) {
                        Ok(p) => p,
                        Err(e @ (Error::Io { .. } | Error::Format { .. })) => {
                            log::warn!("skipping {}: {e}", pair.image_b.display());
                            return Ok(Err(SkippedPair {
                                scene: pair.scene.clone(),
                                image_b: pair.image_b.clone(),
                                reason: e.to_string(),
                            }));
                        }
                        Err(e) => return Err(e),
                    };
                    let per_angle = evaluate_prepared(net, &prepared, config)?;
                    Ok(Ok(per_angle
                        .into_iter()
                        .enumerate()
                        .map(|(i, (m, curve))| IndexedRecord {
                            angle_index: i,
                            record: PairRecord {
                                scene: pair.scene.clone(),
                                image_b: pair.image_b.clone(),
                                variation: pair.variation,
                                angle: config.angles[i],
                                matches: m.len(),
                                inliers: m.inliers.as_ref().map(|_| m.num_inliers()),
                                mma: curve,
                            },
                        })
                        .collect()))
                })
                .collect()
        });
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for o in outcomes {
        match o? {
            Ok(r) => records.extend(r),
            Err(s) => skipped.push(s),
        }
    }
    let (na, nt) = (config.angles.len(), config.thresholds.len());
    let all: Vec<&IndexedRecord> = records.iter().collect();
    let mut variations: Vec<Variation> = records.iter().map(|r| r.variation).collect();
    variations.sort();
    variations.dedup();
    let by_variation = variations
        .into_iter()
        .map(|v| {
            let sel: Vec<&IndexedRecord> = records.iter().filter(|r| r.variation == v).collect();
            VariationGrid {
                variation: v,
                n_pairs: sel.len() / na,
                mma: mean_grid_indexed(&sel, na, nt),
            }
        })
        .collect();
    let pairs_per_angle = records.len() / na;
    Ok(MmaReport {
        angles: config.angles.clone(),
        thresholds: config.thresholds.clone(),
        resize: config.resize,
        ransac: config.use_ransac,
        seed: config.ransac.seed,
        config_hash: config.hash(),
        weighting: "pairs".into(),
        empty_match_mma: 0.0,
        pairs_per_angle,
        total_evaluations: records.len(),
        overall: mean_grid_indexed(&all, na, nt),
        by_variation,
        pairs: records.into_iter().map(|r| r.record).collect(),
        skipped,
    })
}

fn mean_grid_indexed(records: &[&IndexedRecord], na: usize, nt: usize) -> Vec<Vec<f64>> {
    let mut grid = vec![vec![0.0; nt]; na];
    let mut counts = vec![0usize; na];
    for r in records {
        counts[r.angle_index] += 1;
        for (g, v) in grid[r.angle_index].iter_mut().zip(&r.mma) {
            *g += v;
        }
    }
    for (row, &n) in grid.iter_mut().zip(&counts) {
        if n > 0 {
            row.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    grid
}

#[cfg(test)]
mod tests;
