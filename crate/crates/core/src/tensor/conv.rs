//! 2-D cross-correlation via chunked im2col + `f64` GEMM.

use rayon::prelude::*;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Upper bound on the number of `f64` entries in one im2col buffer.
const COLS_BUDGET: usize = 1 << 21;

struct Geometry {
    batch: usize,
    in_ch: usize,
    in_h: usize,
    in_w: usize,
    out_ch: usize,
    k: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn new<T: Scalar>(
        input: &Tensor<T>,
        weight: &Tensor<T>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let (batch, in_ch, in_h, in_w) = input.dims4()?;
        let (out_ch, w_in, kh, kw) = weight.dims4()?;
        if w_in != in_ch {
            return Err(Error::ShapeMismatch {
                op: "conv2d (input channels vs weight)",
                lhs: input.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::invalid(format!(
                "conv2d kernel must be square with odd size, got {kh}x{kw}"
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be >= 1"));
        }
        let k = kh;
        if in_h + 2 * padding < k || in_w + 2 * padding < k {
            return Err(Error::invalid(format!(
                "conv2d input {in_h}x{in_w} (padding {padding}) smaller than kernel {k}"
            )));
        }
        Ok(Self {
            batch,
            in_ch,
            in_h,
            in_w,
            out_ch,
            k,
            stride,
            padding,
            out_h: (in_h + 2 * padding - k) / stride + 1,
            out_w: (in_w + 2 * padding - k) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.k * self.k
    }

    fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    fn chunks(&self) -> Vec<(usize, usize, usize)> {
        let per_chunk = (COLS_BUDGET / self.patch_len()).max(64);
        let pixels = self.out_pixels();
        let mut jobs = Vec::new();
        for b in 0..self.batch {
            let mut p0 = 0;
            while p0 < pixels {
                let p1 = (p0 + per_chunk).min(pixels);
                jobs.push((b, p0, p1));
                p0 = p1;
            }
        }
        jobs
    }

    /// Fills `cols` (`patch_len x (p1 - p0)`, row-major) for output pixels `p0..p1`.
    fn im2col<T: Scalar>(&self, input: &[T], b: usize, p0: usize, p1: usize, cols: &mut [f64]) {
        let n = p1 - p0;
        let plane = self.in_h * self.in_w;
        for ci in 0..self.in_ch {
            let src = &input[(b * self.in_ch + ci) * plane..(b * self.in_ch + ci + 1) * plane];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for (slot, p) in dst.iter_mut().zip(p0..p1) {
                        let oy = p / self.out_w;
                        let ox = p % self.out_w;
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                        *slot = if iy >= 0
                            && ix >= 0
                            && (iy as usize) < self.in_h
                            && (ix as usize) < self.in_w
                        {
                            src[iy as usize * self.in_w + ix as usize].to_f64()
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }

    /// Scatters `cols` gradients back onto the input plane buffer of batch `b`.
    fn col2im(&self, cols: &[f64], p0: usize, p1: usize, grad: &mut [f64]) {
        let n = p1 - p0;
        let plane = self.in_h * self.in_w;
        for ci in 0..self.in_ch {
            let dst = &mut grad[ci * plane..(ci + 1) * plane];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    for (&g, p) in src.iter().zip(p0..p1) {
                        let oy = p / self.out_w;
                        let ox = p % self.out_w;
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                        if iy >= 0
                            && ix >= 0
                            && (iy as usize) < self.in_h
                            && (ix as usize) < self.in_w
                        {
                            dst[iy as usize * self.in_w + ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

/// Row-major `C = A·B + beta·C` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe in-bounds views of `a` (m x k), `b` (k x n)
    // and `c` (m x n, row-major), which the callers size accordingly.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Cross-correlation of `input [B, Ci, H, W]` with `weight [Co, Ci, k, k]`.
///
/// Output spatial size is `(H + 2·padding − k) / stride + 1`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = Geometry::new(input, weight, stride, padding)?;
    if let Some(b) = bias {
        if b.numel() != g.out_ch {
            return Err(Error::ShapeMismatch {
                op: "conv2d (bias)",
                lhs: vec![g.out_ch],
                rhs: b.shape().to_vec(),
            });
        }
    }
    let kdim = g.patch_len();
    let w64: Vec<f64> = weight.data().iter().map(|v| v.to_f64()).collect();
    let bias64: Vec<f64> = match bias {
        Some(b) => b.data().iter().map(|v| v.to_f64()).collect(),
        None => vec![0.0; g.out_ch],
    };

    let jobs = g.chunks();
    let pieces: Vec<Vec<f64>> = jobs
        .par_iter()
        .map(|&(b, p0, p1)| {
            let n = p1 - p0;
            let mut cols = vec![0.0; kdim * n];
            g.im2col(input.data(), b, p0, p1, &mut cols);
            let mut out = vec![0.0; g.out_ch * n];
            for (co, row) in out.chunks_mut(n).enumerate() {
                row.fill(bias64[co]);
            }
            gemm(
                g.out_ch,
                kdim,
                n,
                &w64,
                (kdim, 1),
                &cols,
                (n, 1),
                1.0,
                &mut out,
            );
            out
        })
        .collect();

    let pixels = g.out_pixels();
    let mut data = vec![T::ZERO; g.batch * g.out_ch * pixels];
    for (&(b, p0, p1), piece) in jobs.iter().zip(&pieces) {
        let n = p1 - p0;
        for co in 0..g.out_ch {
            let dst =
                &mut data[(b * g.out_ch + co) * pixels + p0..(b * g.out_ch + co) * pixels + p1];
            for (d, &v) in dst.iter_mut().zip(&piece[co * n..(co + 1) * n]) {
                *d = T::from_f64(v);
            }
        }
    }
    Tensor::new(vec![g.batch, g.out_ch, g.out_h, g.out_w], data)
}

pub struct Conv2dGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Vector-Jacobian product of [`conv2d`] for an upstream gradient shaped like its output.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Conv2dGrads<T>> {
    let g = Geometry::new(input, weight, stride, padding)?;
    let expected = [g.batch, g.out_ch, g.out_h, g.out_w];
    if grad_out.shape() != expected {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward",
            lhs: expected.to_vec(),
            rhs: grad_out.shape().to_vec(),
        });
    }
    let kdim = g.patch_len();
    let pixels = g.out_pixels();
    let w64: Vec<f64> = weight.data().iter().map(|v| v.to_f64()).collect();
    let go = grad_out.data();

    let jobs = g.chunks();
    // Each job yields the im2col-shaped input gradient and a partial weight gradient.
    let pieces: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = jobs
        .par_iter()
        .map(|&(b, p0, p1)| {
            let n = p1 - p0;
            let mut gout = vec![0.0; g.out_ch * n];
            for co in 0..g.out_ch {
                let src = &go[(b * g.out_ch + co) * pixels + p0..(b * g.out_ch + co) * pixels + p1];
                for (d, s) in gout[co * n..(co + 1) * n].iter_mut().zip(src) {
                    *d = s.to_f64();
                }
            }
            let mut cols = vec![0.0; kdim * n];
            g.im2col(input.data(), b, p0, p1, &mut cols);

            let mut gw = vec![0.0; g.out_ch * kdim];
            gemm(
                g.out_ch,
                n,
                kdim,
                &gout,
                (n, 1),
                &cols,
                (1, n),
                0.0,
                &mut gw,
            );

            let mut gcols = vec![0.0; kdim * n];
            gemm(
                kdim,
                g.out_ch,
                n,
                &w64,
                (1, kdim),
                &gout,
                (n, 1),
                0.0,
                &mut gcols,
            );

            let gb: Vec<f64> = gout.chunks(n).map(|r| r.iter().sum()).collect();
            (gcols, gw, gb)
        })
        .collect();

    let plane = g.in_h * g.in_w;
    let mut gin = vec![0.0f64; g.batch * g.in_ch * plane];
    let mut gw = vec![0.0f64; g.out_ch * kdim];
    let mut gb = vec![0.0f64; g.out_ch];
    for (&(b, p0, p1), (gcols, pw, pb)) in jobs.iter().zip(&pieces) {
        g.col2im(
            gcols,
            p0,
            p1,
            &mut gin[b * g.in_ch * plane..(b + 1) * g.in_ch * plane],
        );
        for (a, v) in gw.iter_mut().zip(pw) {
            *a += v;
        }
        for (a, v) in gb.iter_mut().zip(pb) {
            *a += v;
        }
    }
    let cast = |v: Vec<f64>| v.into_iter().map(T::from_f64).collect::<Vec<T>>();
    Ok(Conv2dGrads {
        input: Tensor::new(input.shape().to_vec(), cast(gin))?,
        weight: Tensor::new(weight.shape().to_vec(), cast(gw))?,
        bias: Tensor::new(vec![g.out_ch], cast(gb))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct six-loop reference, written independently of the im2col path.
    fn naive_conv(
        input: &Tensor<f32>,
        weight: &Tensor<f32>,
        bias: &[f32],
        stride: usize,
        pad: usize,
    ) -> Vec<f64> {
        let (b, ci, h, w) = input.dims4().unwrap();
        let (co, _, k, _) = weight.dims4().unwrap();
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; b * co * oh * ow];
        for bi in 0..b {
            for o in 0..co {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut acc = bias[o] as f64;
                        for c in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (y * stride + ky) as isize - pad as isize;
                                    let ix = (x * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += input.at4(bi, c, iy as usize, ix as usize) as f64
                                        * weight.at4(o, c, ky, kx) as f64;
                                }
                            }
                        }
                        out[((bi * co + o) * oh + y) * ow + x] = acc;
                    }
                }
            }
        }
        out
    }

    fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f32> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn ones_count_overlapping_taps() {
        let x = Tensor::<f32>::full(vec![1, 1, 3, 3], 1.0);
        let w = Tensor::<f32>::full(vec![1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, None, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.at4(0, 0, 1, 1), 9.0);
        assert_eq!(y.at4(0, 0, 0, 0), 4.0);
        assert_eq!(y.at4(0, 0, 2, 2), 4.0);
        assert_eq!(y.at4(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(vec![2, 3, 6, 5], &mut rng);
        let mut w = Tensor::<f32>::zeros(vec![3, 3, 3, 3]);
        for c in 0..3 {
            w.data_mut()[((c * 3 + c) * 3 + 1) * 3 + 1] = 1.0;
        }
        let y = conv2d(&x, &w, None, 1, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn matches_naive_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(shape, co, k, stride, pad) in &[
            ([1usize, 2, 5, 5], 3usize, 3usize, 1usize, 1usize),
            ([2, 4, 8, 8], 3, 3, 1, 1),
            ([2, 4, 8, 8], 5, 5, 2, 2),
            ([1, 3, 7, 6], 2, 1, 1, 0),
            ([2, 2, 8, 7], 4, 3, 2, 0),
        ] {
            let x = random(shape.to_vec(), &mut rng);
            let w = random(vec![co, shape[1], k, k], &mut rng);
            let bias: Vec<f32> = (0..co).map(|_| rng.random_range(-1.0..1.0)).collect();
            let bt = Tensor::new(vec![co], bias.clone()).unwrap();
            let y = conv2d(&x, &w, Some(&bt), stride, pad).unwrap();
            let reference = naive_conv(&x, &w, &bias, stride, pad);
            let err = y
                .data()
                .iter()
                .zip(&reference)
                .map(|(a, b)| (*a as f64 - b).abs())
                .fold(0.0, f64::max);
            assert!(err <= 1e-6, "shape {shape:?}: max error {err}");
        }
    }

    #[test]
    fn channel_mismatch_names_both_shapes() {
        let x = Tensor::<f32>::zeros(vec![1, 2, 4, 4]);
        let w = Tensor::<f32>::zeros(vec![1, 3, 3, 3]);
        let err = conv2d(&x, &w, None, 1, 1).unwrap_err().to_string();
        assert!(
            err.contains("[1, 2, 4, 4]") && err.contains("[1, 3, 3, 3]"),
            "{err}"
        );
    }

    #[test]
    fn even_kernel_rejected() {
        let x = Tensor::<f32>::zeros(vec![1, 1, 4, 4]);
        let w = Tensor::<f32>::zeros(vec![1, 1, 2, 2]);
        assert!(conv2d(&x, &w, None, 1, 0).is_err());
    }
}
