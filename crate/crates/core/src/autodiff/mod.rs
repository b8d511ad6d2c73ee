//! Reverse-mode differentiation over a Wengert tape.
//!
//! Every op appends one node holding its forward value; [`Tape::backward`]
//! walks the nodes in reverse recording order, so each consumer is visited
//! before its producers. Gradients accumulate in `f64` and are written onto
//! the leaf tensors' gradient buffers (adding to whatever is already there).

mod ap;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{
    self, batchnorm_train, conv2d, conv2d_backward, group_max, BatchStats, Scalar, SparseMap,
    Tensor,
};

pub use ap::{soft_average_precision, AP_IGNORE};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pixel index lists (within one `H·W` plane) over which window ops reduce.
#[derive(Clone, Debug, PartialEq)]
pub struct Windows {
    pub plane: usize,
    pub pixels: Vec<Vec<u32>>,
}

impl Windows {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    Sparse {
        input: Var,
        map: Arc<SparseMap>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        group: usize,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    Softplus(Var),
    Squash(Var),
    SoftmaxChannel(Var),
    L2Normalize(Var),
    GroupPool {
        input: Var,
        n: usize,
        argmax: Vec<u32>,
    },
    Narrow {
        input: Var,
        start: usize,
    },
    Reshape(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    WindowCosine {
        a: Var,
        b: Var,
        windows: Arc<Windows>,
    },
    WindowPeak {
        input: Var,
        windows: Arc<Windows>,
        argmax: Vec<u32>,
    },
    MatMulTn {
        a: Var,
        b: Var,
    },
    SoftAp {
        sims: Var,
        labels: Arc<Vec<i8>>,
        bins: usize,
    },
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op,
}

/// A single-writer recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn from_f64<T: Scalar>(shape: &[usize], data: Vec<f64>) -> Tensor<T> {
    Tensor::new(shape.to_vec(), data.into_iter().map(T::from_f64).collect())
        .expect("shape computed from data")
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient written by the last [`Tape::backward`] call (leaves only).
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.clear_grad();
        }
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let out = conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
        ))
    }

    pub fn sparse(
        &mut self,
        input: Var,
        map: Arc<SparseMap>,
        out_shape: Vec<usize>,
    ) -> Result<Var> {
        let out = map.apply(self.value(input), out_shape)?;
        Ok(self.push(out, Op::Sparse { input, map }))
    }

    /// Training-mode batch normalization; returns the batch statistics so the
    /// caller can update running averages.
    pub fn batchnorm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        group: usize,
    ) -> Result<(Var, BatchStats)> {
        let (out, stats) = batchnorm_train(
            self.value(input),
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
            group,
        )?;
        let inv_std = stats.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let var = self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                group,
                mean: stats.mean.clone(),
                inv_std,
            },
        );
        Ok((var, stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = tensor::relu(self.value(x));
        self.push(out, Op::Relu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = tensor::softplus(self.value(x));
        self.push(out, Op::Softplus(x))
    }

    pub fn squash(&mut self, x: Var) -> Var {
        let out = tensor::squash(self.value(x));
        self.push(out, Op::Squash(x))
    }

    pub fn softmax_channel(&mut self, x: Var) -> Result<Var> {
        self.value(x).dims4()?;
        let out = tensor::softmax_channel(self.value(x));
        Ok(self.push(out, Op::SoftmaxChannel(x)))
    }

    pub fn l2_normalize_channel(&mut self, x: Var) -> Result<Var> {
        self.value(x).dims4()?;
        let out = tensor::l2_normalize_channel(self.value(x));
        Ok(self.push(out, Op::L2Normalize(x)))
    }

    pub fn group_pool(&mut self, x: Var, n: usize) -> Result<Var> {
        let (out, argmax) = group_max(self.value(x), n)?;
        Ok(self.push(
            out,
            Op::GroupPool {
                input: x,
                n,
                argmax,
            },
        ))
    }

    pub fn narrow_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).narrow_channels(start, len)?;
        Ok(self.push(out, Op::Narrow { input: x, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x.to_f64() + y.to_f64())
            .collect();
        let out = from_f64(self.value(a).shape(), data);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x.to_f64() * y.to_f64())
            .collect();
        let out = from_f64(self.value(a).shape(), data);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|v| v.to_f64() * c)
            .collect();
        let out = from_f64(self.value(x).shape(), data);
        self.push(out, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|v| v.to_f64() + c)
            .collect();
        let out = from_f64(self.value(x).shape(), data);
        self.push(out, Op::AddScalar(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.to_f64()).sum();
        self.push(Tensor::scalar(T::from_f64(s)), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let s: f64 = self.value(x).data().iter().map(|v| v.to_f64()).sum();
        Ok(self.push(Tensor::scalar(T::from_f64(s / n as f64)), Op::Mean(x)))
    }

    /// Cosine similarity of `a` and `b` restricted to each window, for every
    /// plane. Output is `[planes · windows]`, plane-major.
    pub fn window_cosine(&mut self, a: Var, b: Var, windows: Arc<Windows>) -> Result<Var> {
        same_shape("window_cosine", self.value(a), self.value(b))?;
        let planes = self.planes(a, &windows)?;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(planes * windows.len());
        for pi in 0..planes {
            let off = pi * windows.plane;
            for win in &windows.pixels {
                let (mut uv, mut uu, mut vv) = (0.0, 0.0, 0.0);
                for &p in win {
                    let (u, v) = (ad[off + p as usize].to_f64(), bd[off + p as usize].to_f64());
                    uv += u * v;
                    uu += u * u;
                    vv += v * v;
                }
                let denom = (uu * vv).sqrt();
                out.push(if denom > 0.0 { uv / denom } else { 0.0 });
            }
        }
        let out = from_f64(&[out.len()], out);
        Ok(self.push(out, Op::WindowCosine { a, b, windows }))
    }

    /// `max − mean` of each window, for every plane; `[planes · windows]`.
    pub fn window_peak(&mut self, x: Var, windows: Arc<Windows>) -> Result<Var> {
        let planes = self.planes(x, &windows)?;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(planes * windows.len());
        let mut argmax = Vec::with_capacity(planes * windows.len());
        for pi in 0..planes {
            let off = pi * windows.plane;
            for win in &windows.pixels {
                if win.is_empty() {
                    return Err(Error::invalid("window_peak over an empty window"));
                }
                let mut best = f64::NEG_INFINITY;
                let mut best_p = win[0];
                let mut sum = 0.0;
                for &p in win {
                    let v = xd[off + p as usize].to_f64();
                    sum += v;
                    if v > best {
                        best = v;
                        best_p = p;
                    }
                }
                out.push(best - sum / win.len() as f64);
                argmax.push(best_p);
            }
        }
        let out = from_f64(&[out.len()], out);
        Ok(self.push(
            out,
            Op::WindowPeak {
                input: x,
                windows,
                argmax,
            },
        ))
    }

    fn planes(&self, x: Var, windows: &Windows) -> Result<usize> {
        let n = self.value(x).numel();
        if windows.plane == 0 || n % windows.plane != 0 {
            return Err(Error::ShapeMismatch {
                op: "window op (plane size)",
                lhs: vec![windows.plane],
                rhs: self.value(x).shape().to_vec(),
            });
        }
        if windows
            .pixels
            .iter()
            .flatten()
            .any(|&p| p as usize >= windows.plane)
        {
            return Err(Error::invalid("window pixel outside its plane"));
        }
        Ok(n / windows.plane)
    }

    /// `aᵀ·b` for 2-D `a: [K, M]`, `b: [K, N]`, giving `[M, N]`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let (k, m, n) = self.matmul_dims(a, b)?;
        let ad = self.value(a).to_f64_vec();
        let bd = self.value(b).to_f64_vec();
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &ad, (1, m), &bd, (n, 1), &mut out);
        let out = from_f64(&[m, n], out);
        Ok(self.push(out, Op::MatMulTn { a, b }))
    }

    fn matmul_dims(&self, a: Var, b: Var) -> Result<(usize, usize, usize)> {
        match (self.value(a).shape(), self.value(b).shape()) {
            ([k1, m], [k2, n]) if k1 == k2 => Ok((*k1, *m, *n)),
            (l, r) => Err(Error::ShapeMismatch {
                op: "matmul_tn",
                lhs: l.to_vec(),
                rhs: r.to_vec(),
            }),
        }
    }

    /// Soft-binned average precision per row of `sims: [Q, M]`; `labels`
    /// holds 1 (positive), 0 (negative) or [`AP_IGNORE`] per entry.
    pub fn soft_ap(&mut self, sims: Var, labels: Arc<Vec<i8>>, bins: usize) -> Result<Var> {
        let (q, m) = match self.value(sims).shape() {
            [q, m] => (*q, *m),
            s => {
                return Err(Error::invalid(format!(
                    "soft_ap expects [Q, M] similarities, got {s:?}"
                )))
            }
        };
        if labels.len() != q * m {
            return Err(Error::ShapeMismatch {
                op: "soft_ap (labels)",
                lhs: vec![q, m],
                rhs: vec![labels.len()],
            });
        }
        if bins < 2 {
            return Err(Error::invalid("soft_ap needs at least 2 bins"));
        }
        let sd = self.value(sims).to_f64_vec();
        let out: Vec<f64> = (0..q)
            .map(|i| {
                soft_average_precision(&sd[i * m..(i + 1) * m], &labels[i * m..(i + 1) * m], bins)
            })
            .collect();
        let out = from_f64(&[q], out);
        Ok(self.push(out, Op::SoftAp { sims, labels, bins }))
    }

    /// Back-propagates from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let value = &node.value;
            let send = |v: Var, contrib: Vec<f64>, grads: &mut Vec<Option<Vec<f64>>>| {
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    padding,
                } => {
                    let go: Tensor<f64> = from_f64(value.shape(), g);
                    let gr = conv2d_backward(
                        &self.nodes[input.0].value.cast::<f64>(),
                        &self.nodes[weight.0].value.cast::<f64>(),
                        &go,
                        *stride,
                        *padding,
                    )?;
                    send(*input, gr.input.into_data(), &mut grads);
                    send(*weight, gr.weight.into_data(), &mut grads);
                    if let Some(b) = bias {
                        send(*b, gr.bias.into_data(), &mut grads);
                    }
                }
                Op::Sparse { input, map } => {
                    let planes = self.nodes[input.0].value.numel() / map.in_len();
                    send(*input, map.apply_transpose(&g, planes), &mut grads);
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    group,
                    mean,
                    inv_std,
                } => {
                    let x = &self.nodes[input.0].value;
                    let gam = self.nodes[gamma.0].value.to_f64_vec();
                    let (b, c, h, w) = x.dims4()?;
                    let plane = h * w;
                    let groups = c / group;
                    let count = (b * group * plane) as f64;
                    let xd = x.data();
                    let xhat = |i: usize, gi: usize| (xd[i].to_f64() - mean[gi]) * inv_std[gi];
                    let mut sum_g = vec![0.0; groups];
                    let mut sum_gx = vec![0.0; groups];
                    for bi in 0..b {
                        for ch in 0..c {
                            let gi = ch / group;
                            let base = (bi * c + ch) * plane;
                            for i in base..base + plane {
                                sum_g[gi] += g[i];
                                sum_gx[gi] += g[i] * xhat(i, gi);
                            }
                        }
                    }
                    let mut gx = vec![0.0; xd.len()];
                    for bi in 0..b {
                        for ch in 0..c {
                            let gi = ch / group;
                            let k = gam[gi] * inv_std[gi] / count;
                            let base = (bi * c + ch) * plane;
                            for i in base..base + plane {
                                gx[i] = k * (count * g[i] - sum_g[gi] - xhat(i, gi) * sum_gx[gi]);
                            }
                        }
                    }
                    send(*input, gx, &mut grads);
                    send(*gamma, sum_gx, &mut grads);
                    send(*beta, sum_g, &mut grads);
                }
                Op::Relu(x) => {
                    let xd = self.nodes[x.0].value.data();
                    let gx = g
                        .iter()
                        .zip(xd)
                        .map(|(g, v)| if v.to_f64() > 0.0 { *g } else { 0.0 })
                        .collect();
                    send(*x, gx, &mut grads);
                }
                Op::Softplus(x) => {
                    let xd = self.nodes[x.0].value.data();
                    let gx = g
                        .iter()
                        .zip(xd)
                        .map(|(g, v)| g * sigmoid(v.to_f64()))
                        .collect();
                    send(*x, gx, &mut grads);
                }
                Op::Squash(x) => {
                    let xd = self.nodes[x.0].value.data();
                    let gx = g
                        .iter()
                        .zip(xd)
                        .map(|(g, v)| g / (1.0 + v.to_f64()).powi(2))
                        .collect();
                    send(*x, gx, &mut grads);
                }
                Op::SoftmaxChannel(x) => {
                    let (b, c, h, w) = value.dims4()?;
                    let plane = h * w;
                    let s = value.data();
                    let mut gx = vec![0.0; s.len()];
                    for bi in 0..b {
                        for p in 0..plane {
                            let at = |ch: usize| (bi * c + ch) * plane + p;
                            let dot: f64 = (0..c).map(|ch| g[at(ch)] * s[at(ch)].to_f64()).sum();
                            for ch in 0..c {
                                gx[at(ch)] = s[at(ch)].to_f64() * (g[at(ch)] - dot);
                            }
                        }
                    }
                    send(*x, gx, &mut grads);
                }
                Op::L2Normalize(x) => {
                    let xv = &self.nodes[x.0].value;
                    let (b, c, h, w) = xv.dims4()?;
                    let plane = h * w;
                    let norms = tensor::channel_norms(xv);
                    let y = value.data();
                    let mut gx = vec![0.0; y.len()];
                    for bi in 0..b {
                        for p in 0..plane {
                            let n = norms[bi * plane + p];
                            if n == 0.0 {
                                continue;
                            }
                            let at = |ch: usize| (bi * c + ch) * plane + p;
                            let dot: f64 = (0..c).map(|ch| g[at(ch)] * y[at(ch)].to_f64()).sum();
                            for ch in 0..c {
                                gx[at(ch)] = (g[at(ch)] - y[at(ch)].to_f64() * dot) / n;
                            }
                        }
                    }
                    send(*x, gx, &mut grads);
                }
                Op::GroupPool { input, n, argmax } => {
                    let xs = self.nodes[input.0].value.shape().to_vec();
                    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let plane = h * w;
                    let fields = c / n;
                    let mut gx = vec![0.0; b * c * plane];
                    for bi in 0..b {
                        for f in 0..fields {
                            for p in 0..plane {
                                let o = (bi * fields + f) * plane + p;
                                let ch = f * n + argmax[o] as usize;
                                gx[(bi * c + ch) * plane + p] += g[o];
                            }
                        }
                    }
                    send(*input, gx, &mut grads);
                }
                Op::Narrow { input, start } => {
                    let xs = self.nodes[input.0].value.shape().to_vec();
                    let (b, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
                    let len = value.shape()[1];
                    let mut gx = vec![0.0; b * c * plane];
                    for bi in 0..b {
                        let dst = (bi * c + start) * plane;
                        let src = bi * len * plane;
                        gx[dst..dst + len * plane].copy_from_slice(&g[src..src + len * plane]);
                    }
                    send(*input, gx, &mut grads);
                }
                Op::Reshape(x) => send(*x, g, &mut grads),
                Op::Add(a, b) => {
                    send(*a, g.clone(), &mut grads);
                    send(*b, g, &mut grads);
                }
                Op::Mul(a, b) => {
                    let ad = self.nodes[a.0].value.data();
                    let bd = self.nodes[b.0].value.data();
                    let ga = g.iter().zip(bd).map(|(g, v)| g * v.to_f64()).collect();
                    let gb = g.iter().zip(ad).map(|(g, v)| g * v.to_f64()).collect();
                    send(*a, ga, &mut grads);
                    send(*b, gb, &mut grads);
                }
                Op::Scale(x, c) => send(*x, g.iter().map(|v| v * c).collect(), &mut grads),
                Op::AddScalar(x) => send(*x, g, &mut grads),
                Op::Sum(x) => {
                    let n = self.nodes[x.0].value.numel();
                    send(*x, vec![g[0]; n], &mut grads);
                }
                Op::Mean(x) => {
                    let n = self.nodes[x.0].value.numel();
                    send(*x, vec![g[0] / n as f64; n], &mut grads);
                }
                Op::WindowCosine { a, b, windows } => {
                    let ad = self.nodes[a.0].value.data();
                    let bd = self.nodes[b.0].value.data();
                    let planes = ad.len() / windows.plane;
                    let mut ga = vec![0.0; ad.len()];
                    let mut gb = vec![0.0; bd.len()];
                    for pi in 0..planes {
                        let off = pi * windows.plane;
                        for (wi, win) in windows.pixels.iter().enumerate() {
                            let go = g[pi * windows.len() + wi];
                            let (mut uv, mut uu, mut vv) = (0.0, 0.0, 0.0);
                            for &p in win {
                                let i = off + p as usize;
                                let (u, v) = (ad[i].to_f64(), bd[i].to_f64());
                                uv += u * v;
                                uu += u * u;
                                vv += v * v;
                            }
                            let denom = (uu * vv).sqrt();
                            if denom == 0.0 || go == 0.0 {
                                continue;
                            }
                            let cos = uv / denom;
                            for &p in win {
                                let i = off + p as usize;
                                let (u, v) = (ad[i].to_f64(), bd[i].to_f64());
                                ga[i] += go * (v / denom - cos * u / uu);
                                gb[i] += go * (u / denom - cos * v / vv);
                            }
                        }
                    }
                    send(*a, ga, &mut grads);
                    send(*b, gb, &mut grads);
                }
                Op::WindowPeak {
                    input,
                    windows,
                    argmax,
                } => {
                    let n = self.nodes[input.0].value.numel();
                    let planes = n / windows.plane;
                    let mut gx = vec![0.0; n];
                    for pi in 0..planes {
                        let off = pi * windows.plane;
                        for (wi, win) in windows.pixels.iter().enumerate() {
                            let o = pi * windows.len() + wi;
                            let share = g[o] / win.len() as f64;
                            for &p in win {
                                gx[off + p as usize] -= share;
                            }
                            gx[off + argmax[o] as usize] += g[o];
                        }
                    }
                    send(*input, gx, &mut grads);
                }
                Op::MatMulTn { a, b } => {
                    let (k, m, n) = self.matmul_dims(*a, *b)?;
                    let ad = self.nodes[a.0].value.to_f64_vec();
                    let bd = self.nodes[b.0].value.to_f64_vec();
                    // ga[k, m] = Σ_n b[k, n] g[m, n]
                    let mut ga = vec![0.0; k * m];
                    gemm(k, n, m, &bd, (n, 1), &g, (1, n), &mut ga);
                    // gb[k, n] = Σ_m a[k, m] g[m, n]
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, &ad, (m, 1), &g, (n, 1), &mut gb);
                    send(*a, ga, &mut grads);
                    send(*b, gb, &mut grads);
                }
                Op::SoftAp { sims, labels, bins } => {
                    let sv = &self.nodes[sims.0].value;
                    let m = sv.shape()[1];
                    let sd = sv.to_f64_vec();
                    let mut gs = vec![0.0; sd.len()];
                    for (q, go) in g.iter().enumerate() {
                        if *go == 0.0 {
                            continue;
                        }
                        let row = q * m..(q + 1) * m;
                        ap::soft_ap_backward(
                            &sd[row.clone()],
                            &labels[row.clone()],
                            *bins,
                            *go,
                            &mut gs[row],
                        );
                    }
                    send(*sims, gs, &mut grads);
                }
            }
        }

        for (idx, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let node = &mut self.nodes[idx];
            if !matches!(node.op, Op::Leaf) {
                continue;
            }
            let merged: Vec<T> = match node.value.grad() {
                Some(prev) => prev
                    .iter()
                    .zip(&g)
                    .map(|(p, v)| T::from_f64(p.to_f64() + v))
                    .collect(),
                None => g.into_iter().map(T::from_f64).collect(),
            };
            node.value.set_grad(merged)?;
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
) {
    assert!(c.len() >= m * n);
    // SAFETY: callers pass `a` with m·k, `b` with k·n and `c` with m·n
    // elements laid out according to the given strides.
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
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests;
