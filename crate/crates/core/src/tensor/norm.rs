use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Per-group batch statistics (biased variance).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn check_vectors(channels: usize, group: usize, lens: &[usize]) -> Result<usize> {
    if group == 0 || channels % group != 0 {
        return Err(Error::invalid(format!(
            "batchnorm group size {group} does not divide {channels} channels"
        )));
    }
    let groups = channels / group;
    if lens.iter().any(|&l| l != groups) {
        return Err(Error::invalid(format!(
            "batchnorm parameter vectors must have length {groups}, got {lens:?}"
        )));
    }
    Ok(groups)
}

/// `(x − mean) / sqrt(var + eps) · gamma + beta`, one entry per channel.
pub fn batchnorm_infer<T: Scalar>(
    input: &Tensor<T>,
    mean: &[f32],
    var: &[f32],
    gamma: &[f32],
    beta: &[f32],
    eps: f64,
) -> Result<Tensor<T>> {
    batchnorm_infer_grouped(input, mean, var, gamma, beta, eps, 1)
}

/// As [`batchnorm_infer`], with each parameter entry shared by `group`
/// consecutive channels (one regular field).
pub fn batchnorm_infer_grouped<T: Scalar>(
    input: &Tensor<T>,
    mean: &[f32],
    var: &[f32],
    gamma: &[f32],
    beta: &[f32],
    eps: f64,
    group: usize,
) -> Result<Tensor<T>> {
    let (b, c, h, w) = input.dims4()?;
    check_vectors(c, group, &[mean.len(), var.len(), gamma.len(), beta.len()])?;
    if eps < 0.0 {
        return Err(Error::invalid("batchnorm eps must be non-negative"));
    }
    if let Some(v) = var.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::invalid(format!(
            "batchnorm variance {v} is negative"
        )));
    }
    let plane = h * w;
    let mut out = input.clone();
    out.clear_grad();
    for bi in 0..b {
        for ch in 0..c {
            let gi = ch / group;
            let scale = gamma[gi] as f64 / (var[gi] as f64 + eps).sqrt();
            let shift = beta[gi] as f64 - mean[gi] as f64 * scale;
            let base = (bi * c + ch) * plane;
            for v in &mut out.data_mut()[base..base + plane] {
                *v = T::from_f64(v.to_f64() * scale + shift);
            }
        }
    }
    Ok(out)
}

/// Training-mode normalization with statistics taken over batch and space
/// (and over the `group` channels of each field).
pub fn batchnorm_train<T: Scalar>(
    input: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: f64,
    group: usize,
) -> Result<(Tensor<T>, BatchStats)> {
    let (b, c, h, w) = input.dims4()?;
    let groups = check_vectors(c, group, &[gamma.len(), beta.len()])?;
    let plane = h * w;
    let count = (b * group * plane) as f64;
    let data = input.data();
    let mut mean = vec![0.0; groups];
    let mut var = vec![0.0; groups];
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * plane;
            mean[ch / group] += data[base..base + plane]
                .iter()
                .map(|v| v.to_f64())
                .sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * plane;
            let m = mean[ch / group];
            var[ch / group] += data[base..base + plane]
                .iter()
                .map(|v| (v.to_f64() - m).powi(2))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);

    let mut out = Vec::with_capacity(data.len());
    for bi in 0..b {
        for ch in 0..c {
            let gi = ch / group;
            let inv = 1.0 / (var[gi] + eps).sqrt();
            let base = (bi * c + ch) * plane;
            out.extend(data[base..base + plane].iter().map(|v| {
                T::from_f64((v.to_f64() - mean[gi]) * inv * gamma[gi].to_f64() + beta[gi].to_f64())
            }));
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), out)?,
        BatchStats { mean, var },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unit_parameters_are_identity() {
        let x = Tensor::<f32>::from_fn(vec![2, 3, 2, 2], |i| i as f32 * 0.37 - 2.0);
        let y = batchnorm_infer(&x, &[0.0; 3], &[1.0; 3], &[1.0; 3], &[0.0; 3], 0.0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let x = Tensor::<f32>::full(vec![2, 2, 3, 3], 4.25);
        let (y, stats) = batchnorm_train(&x, &[1.5, 0.5], &[0.25, -1.0], 1e-5, 1).unwrap();
        assert_eq!(stats.var, vec![0.0, 0.0]);
        for bi in 0..2 {
            for yy in 0..3 {
                for xx in 0..3 {
                    assert!((y.at4(bi, 0, yy, xx) - 0.25).abs() < 1e-6);
                    assert!((y.at4(bi, 1, yy, xx) + 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f32>::from_fn(vec![2, 3, 4, 5], |_| rng.random_range(-2.0..2.0));
        let mean: Vec<f32> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let var: Vec<f32> = (0..3).map(|_| rng.random_range(0.1..2.0)).collect();
        let gamma: Vec<f32> = (0..3).map(|_| rng.random_range(0.5..1.5)).collect();
        let beta: Vec<f32> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = batchnorm_infer(&x, &mean, &var, &gamma, &beta, 1e-5).unwrap();
        for bi in 0..2 {
            for c in 0..3 {
                for yy in 0..4 {
                    for xx in 0..5 {
                        let v = x.at4(bi, c, yy, xx) as f64;
                        let r = (v - mean[c] as f64) / (var[c] as f64 + 1e-5).sqrt()
                            * gamma[c] as f64
                            + beta[c] as f64;
                        assert!((y.at4(bi, c, yy, xx) as f64 - r).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn negative_variance_rejected() {
        let x = Tensor::<f32>::zeros(vec![1, 1, 2, 2]);
        assert!(batchnorm_infer(&x, &[0.0], &[-0.5], &[1.0], &[0.0], 1e-5).is_err());
    }

    #[test]
    fn grouped_stats_are_shared_within_a_field() {
        let x = Tensor::<f32>::from_fn(vec![1, 4, 2, 2], |i| i as f32);
        let (_, stats) = batchnorm_train(&x, &[1.0; 2], &[0.0; 2], 1e-5, 2).unwrap();
        assert_eq!(stats.mean, vec![3.5, 11.5]);
    }
}
