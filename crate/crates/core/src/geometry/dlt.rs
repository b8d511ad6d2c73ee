use nalgebra::{DMatrix, Matrix3};

use super::Homography;
use crate::error::{Error, Result};

/// A correspondence `(source, destination)`.
pub type PointPair = ((f64, f64), (f64, f64));

/// Triangle area below which normalized points count as collinear.
const COLLINEAR_EPS: f64 = 1e-9;

/// Hartley normalization: centroid to the origin, mean distance √2.
fn normalizer(points: impl Iterator<Item = (f64, f64)> + Clone) -> Result<Matrix3<f64>> {
    let n = points.clone().count() as f64;
    let (sx, sy) = points
        .clone()
        .fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (cx, cy) = (sx / n, sy / n);
    let mean_d = points.map(|(x, y)| (x - cx).hypot(y - cy)).sum::<f64>() / n;
    if !(mean_d > 0.0) || !mean_d.is_finite() {
        return Err(Error::Degenerate("all points coincide".into()));
    }
    let s = std::f64::consts::SQRT_2 / mean_d;
    Ok(Matrix3::new(
        s,
        0.0,
        -s * cx,
        0.0,
        s,
        -s * cy,
        0.0,
        0.0,
        1.0,
    ))
}

fn transform(t: &Matrix3<f64>, (x, y): (f64, f64)) -> (f64, f64) {
    (t[(0, 0)] * x + t[(0, 2)], t[(1, 1)] * y + t[(1, 2)])
}

fn twice_area(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> f64 {
    ((b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)).abs()
}

/// True when any three of `points` are collinear, measured after Hartley
/// normalization so the test is scale-free. `tol` is a twice-area threshold
/// in normalized units.
pub fn has_collinear_triple(points: &[(f64, f64)], tol: f64) -> bool {
    let Ok(t) = normalizer(points.iter().copied()) else {
        return true;
    };
    let p: Vec<(f64, f64)> = points.iter().map(|&q| transform(&t, q)).collect();
    for i in 0..p.len() {
        for j in i + 1..p.len() {
            for k in j + 1..p.len() {
                if twice_area(p[i], p[j], p[k]) <= tol {
                    return true;
                }
            }
        }
    }
    false
}

/// Normalized DLT from at least four correspondences. Minimal sets are
/// checked for collinear triples on both sides; larger sets for rank.
pub fn dlt_homography(pairs: &[PointPair]) -> Result<Homography> {
    if pairs.len() < 4 {
        return Err(Error::invalid(format!(
            "DLT needs at least 4 correspondences, got {}",
            pairs.len()
        )));
    }
    if pairs
        .iter()
        .any(|(a, b)| !(a.0.is_finite() && a.1.is_finite() && b.0.is_finite() && b.1.is_finite()))
    {
        return Err(Error::invalid("DLT input has non-finite coordinates"));
    }
    let src: Vec<(f64, f64)> = pairs.iter().map(|p| p.0).collect();
    let dst: Vec<(f64, f64)> = pairs.iter().map(|p| p.1).collect();
    if pairs.len() == 4
        && (has_collinear_triple(&src, COLLINEAR_EPS) || has_collinear_triple(&dst, COLLINEAR_EPS))
    {
        return Err(Error::Degenerate(
            "three of the four points are collinear".into(),
        ));
    }
    let ta = normalizer(src.iter().copied())?;
    let tb = normalizer(dst.iter().copied())?;

    let rows = (2 * pairs.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (p, q)) in src.iter().zip(&dst).enumerate() {
        let (x, y) = transform(&ta, *p);
        let (u, v) = transform(&tb, *q);
        let r = 2 * i;
        a.row_mut(r)
            .copy_from_slice(&[-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u]);
        a.row_mut(r + 1)
            .copy_from_slice(&[0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v]);
    }
    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Degenerate("SVD failed".into()))?;
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[i].total_cmp(&sv[j]));
    let (smallest, second) = (order[0], order[1]);
    if sv[second] <= 1e-10 * sv[order[sv.len() - 1]] {
        return Err(Error::Degenerate(
            "correspondences do not determine a unique homography".into(),
        ));
    }
    let h = v_t.row(smallest);
    let hn = Matrix3::from_fn(|r, c| h[r * 3 + c]);
    let tb_inv = tb
        .try_inverse()
        .ok_or_else(|| Error::Degenerate("normalization not invertible".into()))?;
    Homography::from_matrix(tb_inv * hn * ta)
}
