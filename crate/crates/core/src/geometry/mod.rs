//! Planar homographies: point mapping, composition, the rotation and
//! rescaling constructions used by the evaluation protocol, normalized DLT
//! and seeded RANSAC.

mod dlt;
mod ransac;

use std::fmt;
use std::path::Path;

use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::tensor::rotation_cos_sin;

pub use dlt::{dlt_homography, has_collinear_triple, PointPair};
pub use ransac::{ransac_homography, RansacParams, RansacResult};

const DET_EPS: f64 = 1e-12;
const W_EPS: f64 = 1e-12;

/// A 3×3 projective transform mapping column vectors `(x, y, 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography {
    m: Matrix3<f64>,
}

impl Homography {
    pub fn identity() -> Self {
        Self {
            m: Matrix3::identity(),
        }
    }

    /// Builds from row-major entries, scaling so `h[2][2] = 1` when it is nonzero.
    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self> {
        let m = Matrix3::from_fn(|r, c| rows[r][c]);
        Self::from_matrix(m)
    }

    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("homography has non-finite entries"));
        }
        let m = if m[(2, 2)].abs() > 0.0 {
            m / m[(2, 2)]
        } else {
            m
        };
        let h = Self { m };
        if h.det().abs() <= DET_EPS {
            return Err(Error::Degenerate(format!(
                "homography is singular (det = {:e})",
                h.det()
            )));
        }
        Ok(h)
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        let mut m = Matrix3::identity();
        m[(0, 2)] = tx;
        m[(1, 2)] = ty;
        Self { m }
    }

    pub fn scaling(sx: f64, sy: f64) -> Result<Self> {
        if !(sx > 0.0 && sy > 0.0) {
            return Err(Error::invalid(format!(
                "scales must be positive, got ({sx}, {sy})"
            )));
        }
        Ok(Self {
            m: Matrix3::new(sx, 0.0, 0.0, 0.0, sy, 0.0, 0.0, 0.0, 1.0),
        })
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        std::array::from_fn(|r| std::array::from_fn(|c| self.m[(r, c)]))
    }

    pub fn det(&self) -> f64 {
        self.m.determinant()
    }

    pub fn apply(&self, (x, y): (f64, f64)) -> Result<(f64, f64)> {
        let m = &self.m;
        let w = m[(2, 0)] * x + m[(2, 1)] * y + m[(2, 2)];
        if w.abs() < W_EPS || !w.is_finite() {
            return Err(Error::PointAtInfinity { w });
        }
        Ok((
            (m[(0, 0)] * x + m[(0, 1)] * y + m[(0, 2)]) / w,
            (m[(1, 0)] * x + m[(1, 1)] * y + m[(1, 2)]) / w,
        ))
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self
            .m
            .try_inverse()
            .ok_or_else(|| Error::Degenerate("homography is not invertible".into()))?;
        Self::from_matrix(inv)
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Homography) -> Result<Self> {
        Self::from_matrix(self.m * other.m)
    }

    /// Parses three lines of three whitespace-separated numbers (row-major).
    pub fn parse(text: &str) -> Result<Self> {
        let values: Vec<f64> = text
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::invalid(format!("bad homography entry {t:?}")))
            })
            .collect::<Result<_>>()?;
        if values.len() != 9 {
            return Err(Error::invalid(format!(
                "homography needs 9 entries, found {}",
                values.len()
            )));
        }
        Self::from_rows(std::array::from_fn(|r| {
            std::array::from_fn(|c| values[r * 3 + c])
        }))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_string()).map_err(|e| Error::io(path, e))
    }
}

impl fmt::Display for Homography {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for row in self.rows() {
            writeln!(f, "{} {} {}", row[0], row[1], row[2])?;
        }
        Ok(())
    }
}

/// Rotation by `angle_deg` about the image center `((W − 1)/2, (H − 1)/2)`,
/// counter-clockwise as displayed: it maps a pixel of the original image to
/// where `rotate_bilinear` puts it.
pub fn rotation_homography(angle_deg: f64, width: usize, height: usize) -> Homography {
    let (cos, sin) = rotation_cos_sin(angle_deg);
    let cx = (width as f64 - 1.0) / 2.0;
    let cy = (height as f64 - 1.0) / 2.0;
    let r = Matrix3::new(cos, sin, 0.0, -sin, cos, 0.0, 0.0, 0.0, 1.0);
    let m = Homography::translation(cx, cy).m * r * Homography::translation(-cx, -cy).m;
    Homography { m }
}

/// `S_b · h · S_a⁻¹`: the same transform between images resized by
/// `(sx_a, sy_a)` and `(sx_b, sy_b)`.
pub fn rescale_homography(
    h: &Homography,
    sx_a: f64,
    sy_a: f64,
    sx_b: f64,
    sy_b: f64,
) -> Result<Homography> {
    let sa = Homography::scaling(sx_a, sy_a)?;
    let sb = Homography::scaling(sx_b, sy_b)?;
    sb.compose(h)?.compose(&sa.inverse()?)
}

/// Scale factors that take a `w x h` image onto `(w', h')` pixel centers,
/// matching the resampler's convention.
pub fn resize_scales(w: usize, h: usize, new_w: usize, new_h: usize) -> (f64, f64) {
    (new_w as f64 / w as f64, new_h as f64 / h as f64)
}

/// Mean of the forward and backward reprojection distances.
pub fn symmetric_transfer_error(
    h: &Homography,
    h_inv: &Homography,
    a: (f64, f64),
    b: (f64, f64),
) -> f64 {
    match (h.apply(a), h_inv.apply(b)) {
        (Ok(fa), Ok(bb)) => 0.5 * (dist(fa, b) + dist(bb, a)),
        _ => f64::INFINITY,
    }
}

pub(crate) fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}
