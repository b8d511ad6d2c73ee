//! Place recognition by inlier count: every query is matched against every
//! reference of a variant and retrieves the one with the most RANSAC inliers.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{config_hash, extract, worker_pool, ExtractParams};
use crate::error::{Error, Result};
use crate::geometry::{ransac_homography, RansacParams};
use crate::io::load_image;
use crate::matching::{mutual_nn_match, DescriptorSet};
use crate::network::RefNet;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct VprReference {
    /// Place index, comparable with query positions.
    pub index: usize,
    /// Rotation variant the reference belongs to (e.g. `"90"`).
    pub variant: String,
    pub image: Tensor,
}

#[derive(Clone, Debug)]
pub struct VprDatabase {
    /// Query `i` has place index `i`.
    pub queries: Vec<Tensor>,
    pub references: Vec<VprReference>,
    /// A retrieval is correct within this many indices.
    pub tolerance: usize,
}

fn indexed_images(dir: &Path) -> Result<Vec<(usize, std::path::PathBuf)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for e in entries {
        let path = e.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() {
            continue;
        }
        let index = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| Error::Format {
                path: path.clone(),
                msg: "image names must be place indices (e.g. 0007.png)".into(),
            })?;
        out.push((index, path));
    }
    out.sort();
    Ok(out)
}

impl VprDatabase {
    /// Reads `root/queries/<index>.<ext>` and
    /// `root/references/<variant>/<index>.<ext>`.
    pub fn load(root: &Path, tolerance: usize) -> Result<Self> {
        let queries_dir = root.join("queries");
        let queries = indexed_images(&queries_dir)?;
        for (pos, (index, path)) in queries.iter().enumerate() {
            if *index != pos {
                return Err(Error::Format {
                    path: path.clone(),
                    msg: format!("query indices must be 0..Q-1, found {index} at position {pos}"),
                });
            }
        }
        let queries = queries
            .iter()
            .map(|(_, p)| load_image(p))
            .collect::<Result<Vec<_>>>()?;
        let refs_dir = root.join("references");
        let mut variants: Vec<_> = std::fs::read_dir(&refs_dir)
            .map_err(|e| Error::io(&refs_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        variants.sort();
        let mut references = Vec::new();
        for dir in variants {
            let variant = dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            for (index, path) in indexed_images(&dir)? {
                references.push(VprReference {
                    index,
                    variant: variant.clone(),
                    image: load_image(&path)?,
                });
            }
        }
        let db = Self {
            queries,
            references,
            tolerance,
        };
        db.validate()?;
        Ok(db)
    }

    /// Variant names in sorted order.
    pub fn variants(&self) -> Vec<String> {
        let mut v: Vec<String> = self.references.iter().map(|r| r.variant.clone()).collect();
        v.sort();
        v.dedup();
        v
    }

    /// Every variant must hold a reference for every query index.
    pub fn validate(&self) -> Result<()> {
        if self.queries.is_empty() || self.references.is_empty() {
            return Err(Error::invalid("VPR database needs queries and references"));
        }
        for variant in self.variants() {
            for q in 0..self.queries.len() {
                if !self
                    .references
                    .iter()
                    .any(|r| r.variant == variant && r.index == q)
                {
                    return Err(Error::invalid(format!(
                        "variant {variant} has no reference for query index {q}"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VprConfig {
    pub extract: ExtractParams,
    pub ransac: RansacParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    pub variant: String,
    pub query: usize,
    /// Place index of the retrieved reference.
    pub retrieved: usize,
    pub inliers: usize,
    pub correct: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantRecall {
    pub variant: String,
    pub correct: usize,
    pub total: usize,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VprReport {
    pub tolerance: usize,
    pub seed: u64,
    pub config_hash: String,
    pub recall: Vec<VariantRecall>,
    pub log: Vec<Retrieval>,
}

/// RANSAC inliers between two descriptor sets; no model scores 0.
fn inlier_count(a: &DescriptorSet, b: &DescriptorSet, params: &RansacParams) -> Result<usize> {
    let matches = mutual_nn_match(a, b)?;
    Ok(ransac_homography(&matches.point_pairs(), params).map_or(0, |r| r.num_inliers))
}

/// Recall per variant: a query retrieves the reference with the most inliers
/// (ties to the lowest place index) and is correct when that index is within
/// the tolerance of its own.
pub fn run_vpr(
    net: &RefNet,
    db: &VprDatabase,
    config: &VprConfig,
    jobs: usize,
) -> Result<VprReport> {
    db.validate()?;
    let pool = worker_pool(jobs)?;
    let ex = &config.extract;
    let (query_sets, ref_sets) = pool.install(|| -> Result<_> {
        let q = db
            .queries
            .par_iter()
            .map(|img| extract(net, img, ex))
            .collect::<Result<Vec<_>>>()?;
        let r = db
            .references
            .par_iter()
            .map(|r| extract(net, &r.image, ex))
            .collect::<Result<Vec<_>>>()?;
        Ok((q, r))
    })?;
    let mut log = Vec::new();
    let mut recall = Vec::new();
    for variant in db.variants() {
        let mut refs: Vec<usize> = (0..db.references.len())
            .filter(|&i| db.references[i].variant == variant)
            .collect();
        refs.sort_by_key(|&i| (db.references[i].index, i));
        let jobs: Vec<(usize, usize)> = (0..db.queries.len())
            .flat_map(|q| refs.iter().map(move |&r| (q, r)))
            .collect();
        let counts = pool.install(|| {
            jobs.par_iter()
                .map(|&(q, r)| inlier_count(&query_sets[q], &ref_sets[r], &config.ransac))
                .collect::<Result<Vec<usize>>>()
        })?;
        let mut best: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        for (&(q, r), &n) in jobs.iter().zip(&counts) {
            let entry = best.entry(q).or_insert((r, n));
            if n > entry.1 {
                *entry = (r, n);
            }
        }
        let mut correct = 0;
        for (q, (r, n)) in best {
            let retrieved = db.references[r].index;
            let ok = retrieved.abs_diff(q) <= db.tolerance;
            correct += ok as usize;
            log.push(Retrieval {
                variant: variant.clone(),
                query: q,
                retrieved,
                inliers: n,
                correct: ok,
            });
        }
        let total = db.queries.len();
        recall.push(VariantRecall {
            variant,
            correct,
            total,
            recall: correct as f64 / total as f64,
        });
    }
    Ok(VprReport {
        tolerance: db.tolerance,
        seed: config.ransac.seed,
        config_hash: config_hash(config),
        recall,
        log,
    })
}
