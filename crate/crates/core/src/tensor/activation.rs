use super::{Scalar, Tensor};

fn map<T: Scalar>(input: &Tensor<T>, f: impl Fn(f64) -> f64) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .map(|v| T::from_f64(f(v.to_f64())))
        .collect();
    Tensor::new(input.shape().to_vec(), data).expect("shape preserved")
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    map(input, |x| if x > 0.0 { x } else { 0.0 })
}

/// `ln(1 + e^x)`, evaluated without overflow.
pub fn softplus<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    map(input, softplus_f64)
}

pub(crate) fn softplus_f64(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `x / (1 + x)`, mapping `[0, ∞)` onto `[0, 1)`.
pub fn squash<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    map(input, |x| x / (1.0 + x))
}

/// Softmax across the channel axis of a `[B, C, H, W]` tensor, per pixel.
pub fn softmax_channel<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let (b, c, h, w) = input.dims4().expect("softmax_channel needs [B, C, H, W]");
    let plane = h * w;
    let src = input.data();
    let mut out = vec![T::ZERO; src.len()];
    let mut buf = vec![0.0f64; c];
    for bi in 0..b {
        for p in 0..plane {
            let idx = |ch: usize| (bi * c + ch) * plane + p;
            let mut max = f64::NEG_INFINITY;
            for (ch, slot) in buf.iter_mut().enumerate() {
                *slot = src[idx(ch)].to_f64();
                max = max.max(*slot);
            }
            let mut sum = 0.0;
            for slot in buf.iter_mut() {
                *slot = (*slot - max).exp();
                sum += *slot;
            }
            for (ch, slot) in buf.iter().enumerate() {
                out[idx(ch)] = T::from_f64(slot / sum);
            }
        }
    }
    Tensor::new(input.shape().to_vec(), out).expect("shape preserved")
}

/// Euclidean norm of the channel vector at every pixel, `[B, H·W]` flattened.
pub fn channel_norms<T: Scalar>(input: &Tensor<T>) -> Vec<f64> {
    let (b, c, h, w) = input.dims4().expect("channel_norms needs [B, C, H, W]");
    let plane = h * w;
    let src = input.data();
    let mut norms = vec![0.0f64; b * plane];
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * plane;
            for (n, v) in norms[bi * plane..(bi + 1) * plane]
                .iter_mut()
                .zip(&src[base..base + plane])
            {
                *n += v.to_f64().powi(2);
            }
        }
    }
    norms.iter_mut().for_each(|n| *n = n.sqrt());
    norms
}

/// Normalizes each pixel's channel vector to unit length. An exactly-zero
/// vector stays zero (keypoint extraction skips such pixels).
pub fn l2_normalize_channel<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let (b, c, h, w) = input
        .dims4()
        .expect("l2_normalize_channel needs [B, C, H, W]");
    let plane = h * w;
    let norms = channel_norms(input);
    let src = input.data();
    let mut out = vec![T::ZERO; src.len()];
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * plane;
            for p in 0..plane {
                let n = norms[bi * plane + p];
                if n > 0.0 {
                    out[base + p] = T::from_f64(src[base + p].to_f64() / n);
                }
            }
        }
    }
    Tensor::new(input.shape().to_vec(), out).expect("shape preserved")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn closed_forms() {
        let z = Tensor::<f32>::zeros(vec![1, 2, 1, 1]);
        assert_eq!(softmax_channel(&z).data(), &[0.5, 0.5]);
        let t = Tensor::<f32>::new(vec![1, 2, 1, 1], vec![3.0, 4.0]).unwrap();
        let n = l2_normalize_channel(&t);
        assert!((n.data()[0] - 0.6).abs() < 1e-7 && (n.data()[1] - 0.8).abs() < 1e-7);
        let s = softplus(&Tensor::<f64>::scalar(0.0));
        assert!((s.data()[0] - 2f64.ln()).abs() < 1e-12);
        let r = relu(&Tensor::<f32>::new(vec![2], vec![-1.0, 2.0]).unwrap());
        assert_eq!(r.data(), &[0.0, 2.0]);
    }

    #[test]
    fn zero_vector_stays_zero() {
        let t = Tensor::<f32>::zeros(vec![1, 3, 2, 2]);
        assert_eq!(l2_normalize_channel(&t), t);
    }

    #[test]
    fn softplus_is_stable_for_large_inputs() {
        let t = Tensor::<f32>::new(vec![2], vec![500.0, -500.0]).unwrap();
        let s = softplus(&t);
        assert_eq!(s.data()[0], 500.0);
        assert!(s.data()[1] >= 0.0 && s.data()[1] < 1e-30);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(vals in prop::collection::vec(-20.0f32..20.0, 12)) {
            let t = Tensor::new(vec![1, 3, 2, 2], vals).unwrap();
            let s = softmax_channel(&t);
            for p in 0..4 {
                let sum: f64 = (0..3).map(|c| s.data()[c * 4 + p] as f64).sum();
                prop_assert!((sum - 1.0).abs() <= 1e-6);
            }
        }

        #[test]
        fn l2_output_has_unit_norm(vals in prop::collection::vec(-5.0f32..5.0, 12)) {
            let t = Tensor::new(vec![1, 3, 2, 2], vals).unwrap();
            for n in channel_norms(&l2_normalize_channel(&t)) {
                prop_assert!(n == 0.0 || (n - 1.0).abs() <= 1e-6);
            }
        }
    }
}
