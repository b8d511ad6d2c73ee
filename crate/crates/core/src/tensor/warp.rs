//! Bilinear resampling. One convention is used everywhere (images, filters,
//! homographies): pixel centers at integer coordinates, y axis pointing down,
//! positive angles rotate content counter-clockwise as displayed, and the
//! rotation center is `((W − 1)/2, (H − 1)/2)`.

use super::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Tap {
    /// Flat `y·W + x` index into the source plane.
    pub index: usize,
    pub weight: f64,
}

/// Bilinear taps for source position `(sx, sy)` on a `w x h` plane. Samples
/// outside the plane read as zero, so their taps are omitted; zero-weight
/// taps are omitted too, which makes integer positions exact copies.
#[inline]
pub fn bilinear_taps(sx: f64, sy: f64, w: usize, h: usize) -> ([Tap; 4], usize) {
    let mut taps = [Tap::default(); 4];
    let mut n = 0;
    if !(sx.is_finite() && sy.is_finite()) {
        return (taps, 0);
    }
    let x0 = sx.floor();
    let y0 = sy.floor();
    let fx = sx - x0;
    let fy = sy - y0;
    let corners = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0 + 1.0, y0, fx * (1.0 - fy)),
        (x0, y0 + 1.0, (1.0 - fx) * fy),
        (x0 + 1.0, y0 + 1.0, fx * fy),
    ];
    for (x, y, weight) in corners {
        if weight == 0.0 || x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
            continue;
        }
        taps[n] = Tap {
            index: y as usize * w + x as usize,
            weight,
        };
        n += 1;
    }
    (taps, n)
}

/// Cosine and sine of `angle_deg`, exact at multiples of 90°.
pub fn rotation_cos_sin(angle_deg: f64) -> (f64, f64) {
    let a = angle_deg.rem_euclid(360.0);
    if a == 0.0 {
        (1.0, 0.0)
    } else if a == 90.0 {
        (0.0, 1.0)
    } else if a == 180.0 {
        (-1.0, 0.0)
    } else if a == 270.0 {
        (0.0, -1.0)
    } else {
        let r = a.to_radians();
        (r.cos(), r.sin())
    }
}

/// Resamples every `[H, W]` plane of `input` onto an `out_h x out_w` grid,
/// reading output pixel `(x, y)` from source position `source(x, y)`.
pub fn warp_with<T: Scalar>(
    input: &Tensor<T>,
    out_h: usize,
    out_w: usize,
    source: impl Fn(f64, f64) -> (f64, f64),
) -> Tensor<T> {
    let (b, c, h, w) = input.dims4().expect("warp needs [B, C, H, W]");
    let taps: Vec<([Tap; 4], usize)> = (0..out_h * out_w)
        .map(|p| {
            let (sx, sy) = source((p % out_w) as f64, (p / out_w) as f64);
            bilinear_taps(sx, sy, w, h)
        })
        .collect();
    let in_plane = h * w;
    let src = input.data();
    let mut out = Vec::with_capacity(b * c * out_h * out_w);
    for plane in src.chunks(in_plane).take(b * c) {
        out.extend(taps.iter().map(|(t, n)| {
            let v: f64 = t[..*n]
                .iter()
                .map(|t| plane[t.index].to_f64() * t.weight)
                .sum();
            T::from_f64(v)
        }));
    }
    Tensor::new(vec![b, c, out_h, out_w], out).expect("warp output shape")
}

/// Rotates every plane about its center by `angle_deg` (counter-clockwise).
/// Multiples of 90° on square planes are exact index permutations.
pub fn rotate_bilinear<T: Scalar>(input: &Tensor<T>, angle_deg: f64) -> Tensor<T> {
    let (_, _, h, w) = input.dims4().expect("rotate needs [B, C, H, W]");
    let (cos, sin) = rotation_cos_sin(angle_deg);
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    warp_with(input, h, w, |x, y| {
        let dx = x - cx;
        let dy = y - cy;
        (cx + cos * dx - sin * dy, cy + sin * dx + cos * dy)
    })
}
