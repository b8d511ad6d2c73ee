//! Synthetic training imagery: multi-octave value noise with composited
//! flat-colored shapes, values in `[0, 1]`.

use rand::Rng;

use crate::tensor::Tensor;

/// Bilinearly upsampled random lattice with `cell`-pixel spacing.
fn value_noise(size: usize, cell: usize, rng: &mut impl Rng) -> Vec<f64> {
    let n = size / cell + 2;
    let lattice: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>()).collect();
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        let fy = y as f64 / cell as f64;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..size {
            let fx = x as f64 / cell as f64;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let l = |yy: usize, xx: usize| lattice[yy * n + xx];
            let top = l(y0, x0) * (1.0 - tx) + l(y0, x0 + 1) * tx;
            let bot = l(y0 + 1, x0) * (1.0 - tx) + l(y0 + 1, x0 + 1) * tx;
            out[y * size + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

enum Shape {
    Disk { cx: f64, cy: f64, r: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Triangle { p: [(f64, f64); 3] },
}

impl Shape {
    fn random(size: f64, rng: &mut impl Rng) -> Self {
        let pt = |rng: &mut dyn rand::RngCore| {
            (rng.random_range(0.0..size), rng.random_range(0.0..size))
        };
        match rng.random_range(0..3) {
            0 => Shape::Disk {
                cx: rng.random_range(0.0..size),
                cy: rng.random_range(0.0..size),
                r: rng.random_range(size * 0.04..size * 0.15),
            },
            1 => {
                let (x, y) = pt(rng);
                let (w, h) = (
                    rng.random_range(size * 0.06..size * 0.3),
                    rng.random_range(size * 0.06..size * 0.3),
                );
                Shape::Rect {
                    x0: x,
                    y0: y,
                    x1: x + w,
                    y1: y + h,
                }
            }
            _ => {
                let (cx, cy) = pt(rng);
                let s = size * 0.2;
                let mut v = || (cx + rng.random_range(-s..s), cy + rng.random_range(-s..s));
                Shape::Triangle { p: [v(), v(), v()] }
            }
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Disk { cx, cy, r } => (x - cx).hypot(y - cy) <= r,
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Shape::Triangle { p } => {
                let side = |a: (f64, f64), b: (f64, f64)| {
                    (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0)
                };
                let s = [side(p[0], p[1]), side(p[1], p[2]), side(p[2], p[0])];
                s.iter().all(|&v| v >= 0.0) || s.iter().all(|&v| v <= 0.0)
            }
        }
    }
}

/// A `[1, 3, size, size]` texture.
pub fn synthetic_texture(size: usize, rng: &mut impl Rng) -> Tensor {
    let plane = size * size;
    let mut data = vec![0.0f64; 3 * plane];
    let cells = [size.div_ceil(4).max(2), size.div_ceil(8).max(2), 4, 2];
    for c in 0..3 {
        let mut amp = 0.5;
        for &cell in &cells {
            let noise = value_noise(size, cell, rng);
            for (d, v) in data[c * plane..(c + 1) * plane].iter_mut().zip(noise) {
                *d += amp * v;
            }
            amp *= 0.5;
        }
    }
    let shapes = rng.random_range(6..14);
    for _ in 0..shapes {
        let shape = Shape::random(size as f64, rng);
        let color = [
            rng.random::<f64>(),
            rng.random::<f64>(),
            rng.random::<f64>(),
        ];
        for y in 0..size {
            for x in 0..size {
                if shape.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    for (c, col) in color.iter().enumerate() {
                        data[c * plane + y * size + x] =
                            0.15 * data[c * plane + y * size + x] + 0.85 * col;
                    }
                }
            }
        }
    }
    let (lo, hi) = data
        .iter()
        .fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(1e-9);
    Tensor::new(
        vec![1, 3, size, size],
        data.into_iter().map(|v| ((v - lo) / span) as f32).collect(),
    )
    .expect("texture shape")
}
