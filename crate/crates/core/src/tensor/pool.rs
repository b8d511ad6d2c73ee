use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Max over each block of `n` consecutive channels. Returns the pooled tensor
/// and, per output element, the winning channel offset within its block
/// (first maximum on ties).
pub fn group_max<T: Scalar>(input: &Tensor<T>, n: usize) -> Result<(Tensor<T>, Vec<u32>)> {
    let (b, c, h, w) = input.dims4()?;
    if n == 0 || c % n != 0 {
        return Err(Error::invalid(format!(
            "group pooling over {n} orientations does not divide {c} channels"
        )));
    }
    let fields = c / n;
    let plane = h * w;
    let src = input.data();
    let mut out = Vec::with_capacity(b * fields * plane);
    let mut arg = Vec::with_capacity(b * fields * plane);
    for bi in 0..b {
        for f in 0..fields {
            let base = (bi * c + f * n) * plane;
            for p in 0..plane {
                let mut best = src[base + p];
                let mut best_r = 0u32;
                for r in 1..n {
                    let v = src[base + r * plane + p];
                    if v > best {
                        best = v;
                        best_r = r as u32;
                    }
                }
                out.push(best);
                arg.push(best_r);
            }
        }
    }
    Ok((Tensor::new(vec![b, fields, h, w], out)?, arg))
}
