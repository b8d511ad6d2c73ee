use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{field_action, FeatureField, FieldType};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Worst deviation `‖π_o(p)·f(x) − f(π_i(p)·x)‖∞` per group element, over
/// interior pixels and all trials.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct EquivarianceReport {
    pub group_order: usize,
    pub max_abs: Vec<f64>,
    /// Largest interior `|f(x)|` seen, the reference for relative deviations.
    pub output_scale: f64,
}

impl EquivarianceReport {
    pub fn worst(&self) -> f64 {
        self.max_abs.iter().copied().fold(0.0, f64::max)
    }

    pub fn relative(&self, p: usize) -> f64 {
        if self.output_scale > 0.0 {
            self.max_abs[p] / self.output_scale
        } else {
            self.max_abs[p]
        }
    }
}

/// Pixels of an `h x w` grid within the centered disk of radius
/// `(min(h, w) − 1)/2 − border`. Rotating by any angle keeps this disk inside
/// the image, and `border` keeps receptive fields clear of the zero padding.
pub fn interior_mask(h: usize, w: usize, border: usize) -> Vec<bool> {
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let radius = (h.min(w) as f64 - 1.0) / 2.0 - border as f64;
    (0..h * w)
        .map(|i| {
            let (dx, dy) = ((i % w) as f64 - cx, (i / w) as f64 - cy);
            radius >= 0.0 && dx.hypot(dy) <= radius + 1e-9
        })
        .collect()
}

/// Input distribution and extent for [`check_equivariance`].
#[derive(Clone, Debug, PartialEq)]
pub struct EquivarianceProbe {
    pub size: usize,
    pub trials: usize,
    pub seed: u64,
    /// Pixels trimmed from the interior disk radius (receptive-field margin).
    pub border: usize,
    /// Band-limited inputs (sums of plane waves, wavelength >= 8 px) instead
    /// of per-pixel uniform noise. Noise is not band-limited, so bilinear
    /// resampling at non-right angles destroys it and the measured defect
    /// reflects the input, not the network.
    pub smooth: bool,
}

impl Default for EquivarianceProbe {
    fn default() -> Self {
        Self {
            size: 32,
            trials: 4,
            seed: 0,
            border: 0,
            smooth: true,
        }
    }
}

/// Random `[1, channels, size, size]` field of plane-wave sums in `[0, 1]`.
pub fn smooth_random_field(channels: usize, size: usize, rng: &mut impl Rng) -> Tensor {
    const WAVES: usize = 6;
    const MIN_WAVELENGTH: f64 = 8.0;
    let mut data = Vec::with_capacity(channels * size * size);
    for _ in 0..channels {
        let waves: Vec<(f64, f64, f64)> = (0..WAVES)
            .map(|_| {
                let freq = rng.random::<f64>() * std::f64::consts::TAU / MIN_WAVELENGTH;
                let dir = rng.random::<f64>() * std::f64::consts::TAU;
                let phase = rng.random::<f64>() * std::f64::consts::TAU;
                (freq * dir.cos(), freq * dir.sin(), phase)
            })
            .collect();
        for y in 0..size {
            for x in 0..size {
                let v: f64 = waves
                    .iter()
                    .map(|&(kx, ky, ph)| (kx * x as f64 + ky * y as f64 + ph).cos())
                    .sum();
                data.push((0.5 + 0.5 * v / WAVES as f64) as f32);
            }
        }
    }
    Tensor::new(vec![1, channels, size, size], data).expect("field shape")
}

/// Drives `fragment` with random inputs of type `input_type` and measures
/// the equivariance defect for every group element.
pub fn check_equivariance<F>(
    fragment: F,
    input_type: FieldType,
    probe: &EquivarianceProbe,
) -> Result<EquivarianceReport>
where
    F: Fn(&FeatureField) -> Result<FeatureField>,
{
    let n = input_type.group.order();
    let size = probe.size;
    let mask = interior_mask(size, size, probe.border);
    if !mask.iter().any(|&m| m) {
        return Err(Error::invalid(format!(
            "border {} leaves no interior on a {size}x{size} grid",
            probe.border
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(probe.seed);
    let mut max_abs = vec![0.0f64; n];
    let mut output_scale = 0.0f64;
    for _ in 0..probe.trials {
        let channels = input_type.channels();
        let x = if probe.smooth {
            smooth_random_field(channels, size, &mut rng)
        } else {
            Tensor::from_fn(vec![1, channels, size, size], |_| rng.random::<f32>())
        };
        let x = FeatureField::new(x, input_type)?;
        let fx = fragment(&x)?;
        output_scale = output_scale.max(masked_max_abs(&fx.tensor, &mask));
        for (p, worst) in max_abs.iter_mut().enumerate() {
            let lhs = field_action(&fx, p)?;
            let rhs = fragment(&field_action(&x, p)?)?;
            if lhs.field_type != rhs.field_type {
                return Err(Error::FieldTypeMismatch {
                    expected: lhs.field_type.to_string(),
                    actual: rhs.field_type.to_string(),
                });
            }
            *worst = worst.max(masked_max_diff(&lhs.tensor, &rhs.tensor, &mask)?);
        }
    }
    Ok(EquivarianceReport {
        group_order: n,
        max_abs,
        output_scale,
    })
}

fn masked_max_abs(t: &Tensor, mask: &[bool]) -> f64 {
    t.data()
        .chunks(mask.len())
        .flat_map(|plane| {
            plane
                .iter()
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|(v, _)| v.abs() as f64)
        })
        .fold(0.0, f64::max)
}

fn masked_max_diff(a: &Tensor, b: &Tensor, mask: &[bool]) -> Result<f64> {
    if a.shape() != b.shape() || a.shape()[2] * a.shape()[3] != mask.len() {
        return Err(Error::ShapeMismatch {
            op: "equivariance comparison",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(a.data()
        .chunks(mask.len())
        .zip(b.data().chunks(mask.len()))
        .flat_map(|(pa, pb)| {
            pa.iter()
                .zip(pb)
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|((x, y), _)| (*x as f64 - *y as f64).abs())
        })
        .fold(0.0, f64::max))
}
