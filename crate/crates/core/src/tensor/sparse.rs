use super::{bilinear_taps, Scalar, Tensor};
use crate::error::{Error, Result};

/// A fixed sparse linear map from `in_len` to `out_len` values, applied
/// independently to every consecutive `in_len`-sized plane of its input.
/// Kernel expansion, warps and gathers are all expressed this way so a single
/// differentiable op covers them.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMap {
    in_len: usize,
    out_len: usize,
    row_start: Vec<usize>,
    cols: Vec<u32>,
    weights: Vec<f64>,
}

impl SparseMap {
    /// Builds the map from `(output index, input index, weight)` triples.
    pub fn from_triples(
        in_len: usize,
        out_len: usize,
        mut triples: Vec<(usize, usize, f64)>,
    ) -> Self {
        triples.sort_by_key(|t| (t.0, t.1));
        let mut row_start = vec![0usize; out_len + 1];
        for &(o, i, _) in &triples {
            assert!(o < out_len && i < in_len, "sparse triple out of range");
            row_start[o + 1] += 1;
        }
        for o in 0..out_len {
            row_start[o + 1] += row_start[o];
        }
        Self {
            in_len,
            out_len,
            row_start,
            cols: triples.iter().map(|t| t.1 as u32).collect(),
            weights: triples.iter().map(|t| t.2).collect(),
        }
    }

    /// Bilinear resampling of an `in_h x in_w` plane onto `out_h x out_w`,
    /// sampling output pixel `(x, y)` at `source(x, y)`.
    pub fn bilinear(
        in_h: usize,
        in_w: usize,
        out_h: usize,
        out_w: usize,
        source: impl Fn(f64, f64) -> (f64, f64),
    ) -> Self {
        let mut triples = Vec::with_capacity(out_h * out_w * 4);
        for p in 0..out_h * out_w {
            let (sx, sy) = source((p % out_w) as f64, (p / out_w) as f64);
            let (taps, n) = bilinear_taps(sx, sy, in_w, in_h);
            triples.extend(taps[..n].iter().map(|t| (p, t.index, t.weight)));
        }
        Self::from_triples(in_h * in_w, out_h * out_w, triples)
    }

    /// Selects input entries `indices` in order.
    pub fn gather(in_len: usize, indices: &[usize]) -> Self {
        let triples = indices
            .iter()
            .enumerate()
            .map(|(o, &i)| (o, i, 1.0))
            .collect();
        Self::from_triples(in_len, indices.len(), triples)
    }

    /// The nonzero entries as `(output index, input index, weight)`.
    pub fn triples(&self) -> Vec<(usize, usize, f64)> {
        (0..self.out_len)
            .flat_map(|o| {
                (self.row_start[o]..self.row_start[o + 1])
                    .map(move |k| (o, self.cols[k] as usize, self.weights[k]))
            })
            .collect()
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_len(&self) -> usize {
        self.out_len
    }

    fn planes<T: Scalar>(&self, input: &Tensor<T>) -> Result<usize> {
        if self.in_len == 0 || input.numel() % self.in_len != 0 {
            return Err(Error::ShapeMismatch {
                op: "sparse map (input plane)",
                lhs: vec![self.in_len],
                rhs: input.shape().to_vec(),
            });
        }
        Ok(input.numel() / self.in_len)
    }

    pub fn apply<T: Scalar>(&self, input: &Tensor<T>, out_shape: Vec<usize>) -> Result<Tensor<T>> {
        let planes = self.planes(input)?;
        if out_shape.iter().product::<usize>() != planes * self.out_len {
            return Err(Error::ShapeMismatch {
                op: "sparse map (output shape)",
                lhs: vec![planes, self.out_len],
                rhs: out_shape,
            });
        }
        let mut out = Vec::with_capacity(planes * self.out_len);
        for plane in input.data().chunks(self.in_len) {
            for o in 0..self.out_len {
                let r = self.row_start[o]..self.row_start[o + 1];
                let v: f64 = self.cols[r.clone()]
                    .iter()
                    .zip(&self.weights[r])
                    .map(|(&c, &w)| plane[c as usize].to_f64() * w)
                    .sum();
                out.push(T::from_f64(v));
            }
        }
        Tensor::new(out_shape, out)
    }

    /// Transposed application: accumulates `grad_out` back onto the input layout.
    pub fn apply_transpose(&self, grad_out: &[f64], planes: usize) -> Vec<f64> {
        let mut g = vec![0.0; planes * self.in_len];
        for (pi, go) in grad_out.chunks(self.out_len).enumerate().take(planes) {
            let gi = &mut g[pi * self.in_len..(pi + 1) * self.in_len];
            for (o, &v) in go.iter().enumerate() {
                if v == 0.0 {
                    continue;
                }
                for k in self.row_start[o]..self.row_start[o + 1] {
                    gi[self.cols[k] as usize] += self.weights[k] * v;
                }
            }
        }
        g
    }
}
