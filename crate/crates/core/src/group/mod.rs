//! Cyclic-group steerable convolutions.
//!
//! Fields are tagged with a [`FieldType`]: trivial fields (RGB, pooled
//! features) ignore the group action, regular fields carry `n` orientation
//! channels per field that are cyclically permuted by it. Channel
//! `f·n + r` holds orientation `r` of field `f`.

mod equivariance;
mod kernel;

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{group_max, rotate_bilinear, Scalar, Tensor};

pub use equivariance::{
    check_equivariance, interior_mask, smooth_random_field, EquivarianceProbe, EquivarianceReport,
};
pub use kernel::{GConvLayout, SteerableKernel};

/// The cyclic group `C_n` of rotations by `360°·p/n`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct GroupSpec {
    n: usize,
}

impl GroupSpec {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("cyclic group order must be >= 1"));
        }
        Ok(Self { n })
    }

    pub fn order(&self) -> usize {
        self.n
    }

    /// Rotation angle of element `p`, in radians.
    pub fn angle(&self, p: usize) -> f64 {
        2.0 * std::f64::consts::PI * p as f64 / self.n as f64
    }

    pub fn angle_deg(&self, p: usize) -> f64 {
        360.0 * p as f64 / self.n as f64
    }

    pub fn angles(&self) -> Vec<f64> {
        (0..self.n).map(|p| self.angle(p)).collect()
    }

    fn check_element(&self, p: usize) -> Result<()> {
        if p >= self.n {
            return Err(Error::invalid(format!(
                "group element {p} out of range for C_{}",
                self.n
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FieldKind {
    Trivial,
    Regular,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FieldType {
    pub group: GroupSpec,
    pub kind: FieldKind,
    pub multiplicity: usize,
}

impl FieldType {
    pub fn trivial(group: GroupSpec, multiplicity: usize) -> Self {
        Self {
            group,
            kind: FieldKind::Trivial,
            multiplicity,
        }
    }

    pub fn regular(group: GroupSpec, multiplicity: usize) -> Self {
        Self {
            group,
            kind: FieldKind::Regular,
            multiplicity,
        }
    }

    /// Channels per field: 1 for trivial, `n` for regular.
    pub fn field_size(&self) -> usize {
        match self.kind {
            FieldKind::Trivial => 1,
            FieldKind::Regular => self.group.order(),
        }
    }

    pub fn channels(&self) -> usize {
        self.multiplicity * self.field_size()
    }
}

impl fmt::Display for FieldType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            FieldKind::Trivial => "trivial",
            FieldKind::Regular => "regular",
        };
        write!(f, "{}x{kind}(C_{})", self.multiplicity, self.group.order())
    }
}

/// A `[B, C, H, W]` tensor together with the representation it transforms by.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureField {
    pub tensor: Tensor,
    pub field_type: FieldType,
}

impl FeatureField {
    pub fn new(tensor: Tensor, field_type: FieldType) -> Result<Self> {
        let (_, c, _, _) = tensor.dims4()?;
        if c != field_type.channels() {
            return Err(Error::FieldTypeMismatch {
                expected: format!("{field_type} ({} channels)", field_type.channels()),
                actual: format!("{c} channels"),
            });
        }
        Ok(Self { tensor, field_type })
    }
}

/// Cyclically shifts every block of `n` channels by `p`: new channel `r`
/// reads old channel `(r − p) mod n`.
pub fn shift_channels<T: Scalar>(tensor: &Tensor<T>, n: usize, p: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = tensor.dims4()?;
    if n == 0 || c % n != 0 {
        return Err(Error::invalid(format!(
            "{c} channels are not a whole number of {n}-channel fields"
        )));
    }
    let plane = h * w;
    let src = tensor.data();
    let mut out = Vec::with_capacity(src.len());
    for bi in 0..b {
        for f in 0..c / n {
            for r in 0..n {
                let from = (bi * c + f * n + (r + n - p % n) % n) * plane;
                out.extend_from_slice(&src[from..from + plane]);
            }
        }
    }
    Tensor::new(tensor.shape().to_vec(), out)
}

/// The group action on a field: spatial rotation by `θ_p`, plus the cyclic
/// orientation shift for regular fields.
pub fn field_action(field: &FeatureField, p: usize) -> Result<FeatureField> {
    let group = field.field_type.group;
    group.check_element(p)?;
    let rotated = rotate_bilinear(&field.tensor, group.angle_deg(p));
    let tensor = match field.field_type.kind {
        FieldKind::Trivial => rotated,
        FieldKind::Regular => shift_channels(&rotated, group.order(), p)?,
    };
    FeatureField::new(tensor, field.field_type)
}

/// The regular-representation action; rejects trivial fields.
pub fn regular_action(field: &FeatureField, p: usize) -> Result<FeatureField> {
    if field.field_type.kind != FieldKind::Regular {
        return Err(Error::FieldTypeMismatch {
            expected: "a regular field".into(),
            actual: field.field_type.to_string(),
        });
    }
    field_action(field, p)
}

/// Steerable convolution: expands the kernel over the group and correlates
/// with stride 1 and same padding. `bias` holds one entry per output field.
pub fn gconv_forward(
    input: &FeatureField,
    kernel: &SteerableKernel,
    bias: &[f32],
) -> Result<FeatureField> {
    let layout = kernel.layout();
    if input.field_type != layout.in_type {
        return Err(Error::FieldTypeMismatch {
            expected: layout.in_type.to_string(),
            actual: input.field_type.to_string(),
        });
    }
    if bias.len() != layout.out_type.multiplicity {
        return Err(Error::invalid(format!(
            "gconv bias needs {} entries (one per output field), got {}",
            layout.out_type.multiplicity,
            bias.len()
        )));
    }
    let weight = kernel.expand()?;
    let n = layout.out_type.group.order();
    let bias = Tensor::from_fn(vec![layout.out_type.channels()], |c| bias[c / n]);
    let out = crate::tensor::conv2d(&input.tensor, &weight, Some(&bias), 1, layout.padding())?;
    FeatureField::new(out, layout.out_type)
}

/// Max over the orientation channels of every regular field.
pub fn group_pool(input: &FeatureField) -> Result<FeatureField> {
    if input.field_type.kind != FieldKind::Regular {
        return Err(Error::FieldTypeMismatch {
            expected: "a regular field".into(),
            actual: input.field_type.to_string(),
        });
    }
    let n = input.field_type.group.order();
    let (pooled, _) = group_max(&input.tensor, n)?;
    let out_type = FieldType::trivial(input.field_type.group, input.field_type.multiplicity);
    debug_assert_eq!(pooled.shape()[1], out_type.channels());
    FeatureField::new(pooled, out_type)
}
