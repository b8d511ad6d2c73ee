use std::sync::Arc;

use super::{FieldKind, FieldType};
use crate::error::{Error, Result};
use crate::tensor::{bilinear_taps, rotation_cos_sin, SparseMap, Tensor};

/// Shape bookkeeping of one steerable layer: the fixed sparse maps that
/// expand base filters and per-field biases to full convolution parameters.
/// Shared (via `Arc`) between the kernel, the network and the training tape.
#[derive(Clone, Debug)]
pub struct GConvLayout {
    pub in_type: FieldType,
    pub out_type: FieldType,
    /// Base filter size.
    pub k: usize,
    /// Expanded filter size: `k` when every group angle is a right angle,
    /// otherwise enlarged so the rotated base filter fits entirely.
    pub expanded_k: usize,
    pub expansion: Arc<SparseMap>,
    pub bias_expansion: Arc<SparseMap>,
}

impl GConvLayout {
    pub fn new(in_type: FieldType, out_type: FieldType, k: usize) -> Result<Self> {
        if out_type.kind != FieldKind::Regular {
            return Err(Error::FieldTypeMismatch {
                expected: "a regular output field".into(),
                actual: out_type.to_string(),
            });
        }
        if in_type.group != out_type.group {
            return Err(Error::invalid(format!(
                "gconv mixes groups: input {in_type}, output {out_type}"
            )));
        }
        if k % 2 == 0 {
            return Err(Error::invalid(format!(
                "gconv kernel size must be odd, got {k}"
            )));
        }
        let expanded_k = expanded_size(out_type.group.order(), k);
        let expansion = Arc::new(expansion_map(in_type, out_type, k, expanded_k));
        let n = out_type.group.order();
        let fields = out_type.multiplicity;
        let idx: Vec<usize> = (0..fields * n).map(|c| c / n).collect();
        Ok(Self {
            in_type,
            out_type,
            k,
            expanded_k,
            expansion,
            bias_expansion: Arc::new(SparseMap::gather(fields, &idx)),
        })
    }

    pub fn base_shape(&self) -> Vec<usize> {
        vec![
            self.out_type.multiplicity,
            self.in_type.channels(),
            self.k,
            self.k,
        ]
    }

    pub fn expanded_shape(&self) -> Vec<usize> {
        vec![
            self.out_type.channels(),
            self.in_type.channels(),
            self.expanded_k,
            self.expanded_k,
        ]
    }

    /// Same padding for the expanded filter.
    pub fn padding(&self) -> usize {
        self.expanded_k / 2
    }

    /// Learnable parameter count (base filters plus one bias per field).
    pub fn num_params(&self) -> usize {
        self.base_shape().iter().product::<usize>() + self.out_type.multiplicity
    }
}

fn expanded_size(n: usize, k: usize) -> usize {
    if 4 % n == 0 {
        return k;
    }
    // A tap at offset (h, h) lands at radius h·√2, and its bilinear splat
    // reaches one pixel further out.
    let half = (k / 2) as f64;
    2 * (half * std::f64::consts::SQRT_2).ceil() as usize + 1
}

/// Expanded slice `(o, r)` is the base filter of field `o` rotated by `θ_r`,
/// with regular input blocks shifted by `r`:
/// `expanded[o·n + r][f·n + s] = rotate(base[o][f·n + (s − r) mod n], θ_r)`.
///
/// Rotation splats every base tap bilinearly onto its rotated position, which
/// keeps the filter sum and first moments exact at every angle; at right
/// angles it is a plain permutation of taps.
fn expansion_map(in_type: FieldType, out_type: FieldType, k: usize, ke: usize) -> SparseMap {
    let n = out_type.group.order();
    let ci = in_type.channels();
    let (kk, kke) = (k * k, ke * ke);
    let c = (k as f64 - 1.0) / 2.0;
    let ce = (ke as f64 - 1.0) / 2.0;
    let mut triples = Vec::new();
    for r in 0..n {
        let (cos, sin) = rotation_cos_sin(out_type.group.angle_deg(r));
        let mut splat = Vec::new();
        for tap in 0..kk {
            let (ux, uy) = ((tap % k) as f64 - c, (tap / k) as f64 - c);
            let (dx, dy) = (ce + cos * ux + sin * uy, ce - sin * ux + cos * uy);
            let (taps, m) = bilinear_taps(dx, dy, ke, ke);
            debug_assert!((taps[..m].iter().map(|t| t.weight).sum::<f64>() - 1.0).abs() < 1e-12);
            splat.extend(taps[..m].iter().map(|t| (t.index, tap, t.weight)));
        }
        for o in 0..out_type.multiplicity {
            for ch in 0..ci {
                let src_ch = match in_type.kind {
                    FieldKind::Trivial => ch,
                    FieldKind::Regular => {
                        let (f, s) = (ch / n, ch % n);
                        f * n + (s + n - r) % n
                    }
                };
                let out_base = ((o * n + r) * ci + ch) * kke;
                let in_base = (o * ci + src_ch) * kk;
                triples.extend(
                    splat
                        .iter()
                        .map(|&(po, pi, w)| (out_base + po, in_base + pi, w)),
                );
            }
        }
    }
    SparseMap::from_triples(
        out_type.multiplicity * ci * kk,
        out_type.channels() * ci * kke,
        triples,
    )
}

/// Learnable base filters plus the layout that expands them over `C_n`.
#[derive(Clone, Debug)]
pub struct SteerableKernel {
    base: Tensor,
    layout: Arc<GConvLayout>,
}

impl SteerableKernel {
    pub fn new(base: Tensor, layout: Arc<GConvLayout>) -> Result<Self> {
        if base.shape() != layout.base_shape().as_slice() {
            return Err(Error::ShapeMismatch {
                op: "steerable kernel base",
                lhs: layout.base_shape(),
                rhs: base.shape().to_vec(),
            });
        }
        Ok(Self { base, layout })
    }

    pub fn base(&self) -> &Tensor {
        &self.base
    }

    pub fn layout(&self) -> &GConvLayout {
        &self.layout
    }

    /// The full `[Co_fields·n, Ci, k, k]` convolution weight.
    pub fn expand(&self) -> Result<Tensor> {
        self.layout
            .expansion
            .apply(&self.base, self.layout.expanded_shape())
    }
}
