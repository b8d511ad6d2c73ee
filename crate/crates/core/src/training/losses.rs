//! The three self-supervised losses, recorded on a tape so they train the
//! network end to end. All are generic over the scalar type so they can be
//! checked in `f64`.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var, Windows, AP_IGNORE};
use crate::error::{Error, Result};
use crate::geometry::{dist, Homography};
use crate::tensor::{Scalar, SparseMap};

/// Tunables shared by the losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossParams {
    pub cosim_window: usize,
    pub cosim_stride: usize,
    /// Windows with a smaller fraction of valid pixels are skipped.
    pub min_valid_fraction: f64,
    pub peak_window: usize,
    pub ap_bins: usize,
    pub ap_queries: usize,
    pub positive_radius: f64,
    pub negative_radius: f64,
    /// Candidate pixels in `b` lie on a grid with this spacing.
    pub candidate_stride: usize,
    /// Scores each query `r · AP + (1 − r) · κ`. Off by default: while AP is
    /// below κ the optimum is `r = 0`, which removes the descriptor gradient.
    pub reliability_weighting: bool,
    /// AP assumed for pixels the reliability head rejects.
    pub ap_kappa: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            cosim_window: 16,
            cosim_stride: 8,
            min_valid_fraction: 0.5,
            peak_window: 16,
            ap_bins: 25,
            ap_queries: 64,
            positive_radius: 2.0,
            negative_radius: 8.0,
            candidate_stride: 1,
            reliability_weighting: false,
            ap_kappa: 0.5,
        }
    }
}

impl LossParams {
    pub fn validate(&self) -> Result<()> {
        if self.cosim_window == 0 || self.cosim_stride == 0 || self.peak_window == 0 {
            return Err(Error::invalid("loss windows and strides must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.min_valid_fraction) {
            return Err(Error::invalid("min_valid_fraction must be in [0, 1]"));
        }
        if self.ap_bins < 2 || self.ap_queries == 0 || self.candidate_stride == 0 {
            return Err(Error::invalid(
                "ap_bins >= 2, ap_queries >= 1 and candidate_stride >= 1 required",
            ));
        }
        if !(self.positive_radius >= 0.0 && self.negative_radius >= self.positive_radius) {
            return Err(Error::invalid(
                "need 0 <= positive_radius <= negative_radius",
            ));
        }
        Ok(())
    }
}

/// Square windows of `size` placed every `stride` pixels (clamped to the
/// image), keeping only `valid` pixels and only windows where they make up at
/// least `min_fraction`.
pub fn grid_windows(
    h: usize,
    w: usize,
    size: usize,
    stride: usize,
    valid: Option<&[bool]>,
    min_fraction: f64,
) -> Windows {
    let (sh, sw) = (size.min(h), size.min(w));
    let starts = |len: usize, win: usize| {
        let mut s: Vec<usize> = (0..=len - win).step_by(stride.max(1)).collect();
        if *s.last().unwrap() != len - win {
            s.push(len - win);
        }
        s
    };
    let mut pixels = Vec::new();
    for y0 in starts(h, sh) {
        for x0 in starts(w, sw) {
            let win: Vec<u32> = (y0..y0 + sh)
                .flat_map(|y| (x0..x0 + sw).map(move |x| (y * w + x) as u32))
                .filter(|&p| valid.is_none_or(|v| v[p as usize]))
                .collect();
            if !win.is_empty() && win.len() as f64 >= min_fraction * (sh * sw) as f64 {
                pixels.push(win);
            }
        }
    }
    Windows {
        plane: h * w,
        pixels,
    }
}

/// Resamples a map of `b` into `a`'s frame: pixel `p` reads `gt(p)`.
pub fn warp_to_a(gt: &Homography, h: usize, w: usize) -> SparseMap {
    SparseMap::bilinear(h, w, h, w, |x, y| {
        gt.apply((x, y)).unwrap_or((f64::NAN, f64::NAN))
    })
}

fn one_minus_mean<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let m = tape.mean(x)?;
    let neg = tape.scale(m, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

/// `1 −` mean windowed cosine similarity between `rep_a` and `rep_b` warped
/// into `a`'s frame.
pub fn loss_repeatability_cosim<T: Scalar>(
    tape: &mut Tape<T>,
    rep_a: Var,
    rep_b: Var,
    warp: &Arc<SparseMap>,
    windows: &Arc<Windows>,
) -> Result<Var> {
    if windows.is_empty() {
        return Err(Error::invalid(
            "repeatability maps have no overlapping window",
        ));
    }
    let shape = tape.value(rep_a).shape().to_vec();
    let warped = tape.sparse(rep_b, warp.clone(), shape)?;
    let cos = tape.window_cosine(rep_a, warped, windows.clone())?;
    one_minus_mean(tape, cos)
}

/// `1 −` mean over windows of `max − mean`.
pub fn loss_peakiness<T: Scalar>(
    tape: &mut Tape<T>,
    rep: Var,
    windows: &Arc<Windows>,
) -> Result<Var> {
    let peak = tape.window_peak(rep, windows.clone())?;
    one_minus_mean(tape, peak)
}

/// Query pixels in `a`, candidate pixels in `b` and their labels.
#[derive(Clone, Debug)]
pub struct ApSample {
    pub queries: Arc<SparseMap>,
    pub candidates: Arc<SparseMap>,
    pub labels: Arc<Vec<i8>>,
    pub num_queries: usize,
    pub num_candidates: usize,
}

impl ApSample {
    /// Draws up to `params.ap_queries` query pixels among `mask`; each keeps
    /// only if at least one candidate is a positive.
    pub fn draw(
        gt: &Homography,
        mask: &[bool],
        h: usize,
        w: usize,
        params: &LossParams,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let valid: Vec<usize> = (0..h * w).filter(|&p| mask[p]).collect();
        let cands: Vec<usize> = (0..h)
            .step_by(params.candidate_stride)
            .flat_map(|y| {
                (0..w)
                    .step_by(params.candidate_stride)
                    .map(move |x| y * w + x)
            })
            .collect();
        let n = params.ap_queries.min(valid.len());
        let mut picked: Vec<usize> = sample(rng, valid.len(), n)
            .into_iter()
            .map(|i| valid[i])
            .collect();
        picked.sort_unstable();
        let mut queries = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n * cands.len());
        for &p in &picked {
            let target = gt.apply(((p % w) as f64, (p / w) as f64))?;
            let row: Vec<i8> = cands
                .iter()
                .map(|&c| {
                    let d = dist(target, ((c % w) as f64, (c / w) as f64));
                    if d <= params.positive_radius {
                        1
                    } else if d > params.negative_radius {
                        0
                    } else {
                        AP_IGNORE
                    }
                })
                .collect();
            if row.contains(&1) {
                queries.push(p);
                labels.extend(row);
            }
        }
        if queries.is_empty() {
            return Err(Error::invalid(
                "no query pixel has a positive correspondent",
            ));
        }
        Ok(Self {
            queries: Arc::new(SparseMap::gather(h * w, &queries)),
            candidates: Arc::new(SparseMap::gather(h * w, &cands)),
            labels: Arc::new(labels),
            num_queries: queries.len(),
            num_candidates: cands.len(),
        })
    }
}

/// `1 −` mean soft AP of query descriptors of `a` ranked against candidate
/// descriptors of `b`. With `reliability` (a's `[1, 1, H, W]` map), each
/// query scores `r · AP + (1 − r) · κ` instead.
pub fn loss_average_precision<T: Scalar>(
    tape: &mut Tape<T>,
    desc_a: Var,
    desc_b: Var,
    sample: &ApSample,
    bins: usize,
    reliability: Option<(Var, f64)>,
) -> Result<Var> {
    let d = tape.value(desc_a).shape()[1];
    let q = tape.sparse(desc_a, sample.queries.clone(), vec![d, sample.num_queries])?;
    let c = tape.sparse(
        desc_b,
        sample.candidates.clone(),
        vec![d, sample.num_candidates],
    )?;
    let sims = tape.matmul_tn(q, c)?;
    let ap = tape.soft_ap(sims, sample.labels.clone(), bins)?;
    let score = match reliability {
        None => ap,
        Some((rel, kappa)) => {
            let r = tape.sparse(rel, sample.queries.clone(), vec![sample.num_queries])?;
            let centered = tape.add_scalar(ap, -kappa);
            let weighted = tape.mul(r, centered)?;
            tape.add_scalar(weighted, kappa)
        }
    };
    one_minus_mean(tape, score)
}
