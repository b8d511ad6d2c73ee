//! The descriptor network: a steerable backbone of `[gconv → batchnorm →
//! relu]` blocks, group pooling, and three per-pixel heads (L2-normalized
//! descriptors, reliability, repeatability).

mod checkpoint;
mod exec;
mod params;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::group::{FeatureField, FieldType, GConvLayout, GroupSpec};
use crate::tensor::Tensor;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use exec::{Exec, Infer, TapeExec};
pub use params::ParamStore;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Group-pooled descriptors only.
    #[default]
    Pooled,
    /// Pooled descriptors plus the pre-pool regular features.
    Unpooled,
    /// Standard conv layers inserted after pooling (breaks invariance).
    PostPoolCnn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefConfig {
    pub group_order: usize,
    /// Output channels of each backbone layer; each must be divisible by
    /// `group_order`.
    pub channels: Vec<usize>,
    pub kernel_size: usize,
    /// Intermediate width of the reliability and repeatability heads.
    pub head_width: usize,
    /// Spatial size of both head convolutions. With 1 the heads are pointwise
    /// in the pooled features, so their maps rotate exactly with the image
    /// under the group's rotations.
    pub head_kernel_size: usize,
    /// Standard conv layers used by [`Variant::PostPoolCnn`].
    pub post_pool_layers: usize,
    pub variant: Variant,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for RefConfig {
    fn default() -> Self {
        Self {
            group_order: 8,
            channels: vec![32, 64, 128, 256, 512],
            kernel_size: 3,
            head_width: 64,
            head_kernel_size: 1,
            post_pool_layers: 3,
            variant: Variant::Pooled,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl RefConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.group_order;
        if n == 0 {
            return Err(Error::invalid("group_order must be >= 1"));
        }
        if self.channels.is_empty() {
            return Err(Error::invalid("channels must list at least one layer"));
        }
        if let Some(c) = self.channels.iter().find(|&&c| c == 0 || c % n != 0) {
            return Err(Error::invalid(format!(
                "backbone width {c} is not a positive multiple of group order {n}"
            )));
        }
        for (name, k) in [
            ("kernel_size", self.kernel_size),
            ("head_kernel_size", self.head_kernel_size),
        ] {
            if k % 2 == 0 {
                return Err(Error::invalid(format!("{name} must be odd, got {k}")));
            }
        }
        if self.head_width == 0 {
            return Err(Error::invalid("head_width must be >= 1"));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::invalid(
                "bn_eps must be > 0 and bn_momentum in [0, 1]",
            ));
        }
        Ok(())
    }

    pub fn group(&self) -> Result<GroupSpec> {
        GroupSpec::new(self.group_order)
    }

    pub fn descriptor_dim(&self) -> usize {
        self.channels.last().copied().unwrap_or(0) / self.group_order.max(1)
    }

    /// A plain-CNN control (`C_1`) with roughly the same parameter count:
    /// widths scaled by `1/√n`.
    pub fn size_matched_control(&self) -> Self {
        let scale = (self.group_order as f64).sqrt();
        Self {
            group_order: 1,
            channels: self
                .channels
                .iter()
                .map(|&c| ((c as f64 / scale).round() as usize).max(1))
                .collect(),
            ..self.clone()
        }
    }

    fn layouts(&self) -> Result<Vec<Arc<GConvLayout>>> {
        let g = self.group()?;
        let mut in_type = FieldType::trivial(g, 3);
        let mut layouts = Vec::with_capacity(self.channels.len());
        for &c in &self.channels {
            let out_type = FieldType::regular(g, c / self.group_order);
            layouts.push(Arc::new(GConvLayout::new(
                in_type,
                out_type,
                self.kernel_size,
            )?));
            in_type = out_type;
        }
        Ok(layouts)
    }

    /// Pixels on each side that influence a descriptor or score.
    pub fn receptive_radius(&self) -> Result<usize> {
        let backbone: usize = self.layouts()?.iter().map(|l| l.padding()).sum();
        let post = match self.variant {
            Variant::PostPoolCnn => self.post_pool_layers,
            _ => 0,
        };
        Ok(backbone + post + 2 * (self.head_kernel_size / 2))
    }

    /// Smallest accepted image side.
    pub fn min_input_size(&self) -> Result<usize> {
        Ok(2 * self.receptive_radius()? + 1)
    }
}

/// Per-pixel network outputs for a `[B, 3, H, W]` image batch.
#[derive(Clone, Debug, PartialEq)]
pub struct RefOutput {
    /// `[B, D, H, W]`, unit channel norm (or exactly zero).
    pub descriptors: Tensor,
    /// `[B, 1, H, W]` in `(0, 1)`.
    pub reliability: Tensor,
    /// `[B, 1, H, W]` in `[0, 1)`.
    pub repeatability: Tensor,
    /// `[B, D·n, H, W]` backbone features before pooling ([`Variant::Unpooled`]).
    pub unpooled: Option<Tensor>,
}

/// Forward values of every head on a generic backend.
#[derive(Clone, Debug)]
pub struct Heads<V> {
    pub backbone: V,
    pub pooled: V,
    pub descriptors: V,
    pub reliability: V,
    pub repeatability: V,
}

#[derive(Clone, Debug)]
pub struct RefNet {
    config: RefConfig,
    layouts: Vec<Arc<GConvLayout>>,
    params: ParamStore,
}

const POST_POOL_K: usize = 3;

fn uniform_init(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

impl RefNet {
    /// Fresh network with fan-in-scaled uniform weights, zero biases and
    /// identity batch norm.
    pub fn new(config: RefConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layouts = config.layouts()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (i, l) in layouts.iter().enumerate() {
            let fields = l.out_type.multiplicity;
            let fan_in = l.in_type.channels() * l.k * l.k;
            params.insert(
                format!("g{i}.weight"),
                uniform_init(l.base_shape(), fan_in, &mut rng),
                true,
            )?;
            params.insert(format!("g{i}.bias"), Tensor::zeros(vec![fields]), true)?;
            params.insert(
                format!("g{i}.bn.gamma"),
                Tensor::full(vec![fields], 1.0),
                true,
            )?;
            params.insert(format!("g{i}.bn.beta"), Tensor::zeros(vec![fields]), true)?;
            params.insert(
                format!("g{i}.bn.running_mean"),
                Tensor::zeros(vec![fields]),
                false,
            )?;
            params.insert(
                format!("g{i}.bn.running_var"),
                Tensor::full(vec![fields], 1.0),
                false,
            )?;
        }
        let d = config.descriptor_dim();
        let mut conv = |name: String, co: usize, ci: usize, k: usize, rng: &mut ChaCha8Rng| {
            let fan_in = ci * k * k;
            params.insert(
                format!("{name}.weight"),
                uniform_init(vec![co, ci, k, k], fan_in, rng),
                true,
            )?;
            params.insert(format!("{name}.bias"), Tensor::zeros(vec![co]), true)
        };
        if config.variant == Variant::PostPoolCnn {
            for j in 0..config.post_pool_layers {
                conv(format!("pp{j}"), d, d, POST_POOL_K, &mut rng)?;
            }
        }
        let (w, hk) = (config.head_width, config.head_kernel_size);
        conv("rel.0".into(), w, d, hk, &mut rng)?;
        conv("rel.1".into(), 2, w, hk, &mut rng)?;
        conv("rep.0".into(), w, d, hk, &mut rng)?;
        conv("rep.1".into(), 1, w, hk, &mut rng)?;
        Ok(Self {
            config,
            layouts,
            params,
        })
    }

    /// Rebuilds a network around stored tensors; every expected tensor must be
    /// present with the expected shape.
    pub fn from_params(config: RefConfig, stored: ParamStore) -> Result<Self> {
        let mut net = Self::new(config, 0)?;
        let expected: Vec<String> = net.params.iter().map(|(n, _, _)| n.to_string()).collect();
        if stored.len() != expected.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                stored.len()
            )));
        }
        for name in expected {
            let t = stored
                .get(&name)
                .map_err(|_| Error::Checkpoint(format!("missing tensor {name}")))?;
            net.params
                .set(&name, t.clone())
                .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        }
        Ok(net)
    }

    pub fn config(&self) -> &RefConfig {
        &self.config
    }

    pub fn layouts(&self) -> &[Arc<GConvLayout>] {
        &self.layouts
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn group(&self) -> GroupSpec {
        self.layouts[0].out_type.group
    }

    fn check_image(&self, shape: &[usize]) -> Result<()> {
        match shape {
            [_, 3, h, w] => {
                let min = self.config.min_input_size()?;
                if *h < min || *w < min {
                    return Err(Error::invalid(format!(
                        "image {w}x{h} is smaller than the {min}x{min} receptive field"
                    )));
                }
                Ok(())
            }
            s => Err(Error::invalid(format!(
                "expected a [B, 3, H, W] image, got {s:?}"
            ))),
        }
    }

    /// Backbone only: the regular feature field before pooling.
    pub fn backbone_exec<E: Exec>(&self, e: &mut E, image: E::V) -> Result<E::V> {
        let n = self.config.group_order;
        let mut x = image;
        for (i, l) in self.layouts.iter().enumerate() {
            let base = e.param(&format!("g{i}.weight"))?;
            let bias = e.param(&format!("g{i}.bias"))?;
            let w = e.sparse(&base, &l.expansion, l.expanded_shape())?;
            let b = e.sparse(&bias, &l.bias_expansion, vec![l.out_type.channels()])?;
            x = e.conv2d(&x, &w, &b, l.padding())?;
            x = e.batchnorm(&x, &format!("g{i}.bn"), n)?;
            x = e.relu(&x);
        }
        Ok(x)
    }

    /// Full forward on any backend.
    pub fn forward_exec<E: Exec>(&self, e: &mut E, image: E::V) -> Result<Heads<E::V>> {
        let backbone = self.backbone_exec(e, image)?;
        let mut pooled = e.group_pool(&backbone, self.config.group_order)?;
        if self.config.variant == Variant::PostPoolCnn {
            for j in 0..self.config.post_pool_layers {
                pooled = self.head_conv(e, &format!("pp{j}"), &pooled)?;
                if j + 1 < self.config.post_pool_layers {
                    pooled = e.relu(&pooled);
                }
            }
        }
        let descriptors = e.l2_normalize_channel(&pooled)?;

        let r = self.head_conv(e, "rel.0", &pooled)?;
        let r = e.relu(&r);
        let r = self.head_conv(e, "rel.1", &r)?;
        let r = e.softmax_channel(&r)?;
        let reliability = e.narrow_channels(&r, 1, 1)?;

        let s = self.head_conv(e, "rep.0", &pooled)?;
        let s = e.relu(&s);
        let s = self.head_conv(e, "rep.1", &s)?;
        let s = e.softplus(&s);
        let repeatability = e.squash(&s);

        Ok(Heads {
            backbone,
            pooled,
            descriptors,
            reliability,
            repeatability,
        })
    }

    fn head_conv<E: Exec>(&self, e: &mut E, name: &str, x: &E::V) -> Result<E::V> {
        let w = e.param(&format!("{name}.weight"))?;
        let b = e.param(&format!("{name}.bias"))?;
        let k = self.params.get(&format!("{name}.weight"))?.shape()[2];
        e.conv2d(x, &w, &b, k / 2)
    }

    /// Inference forward (batch norm from running statistics).
    pub fn forward(&self, image: &Tensor) -> Result<RefOutput> {
        self.check_image(image.shape())?;
        let mut e = Infer::new(&self.params, self.config.bn_eps);
        let heads = self.forward_exec(&mut e, image.clone())?;
        Ok(RefOutput {
            descriptors: heads.descriptors,
            reliability: heads.reliability,
            repeatability: heads.repeatability,
            unpooled: (self.config.variant == Variant::Unpooled).then_some(heads.backbone),
        })
    }

    /// The regular backbone field of an image (trivial RGB input).
    pub fn backbone(&self, image: &FeatureField) -> Result<FeatureField> {
        let mut e = Infer::new(&self.params, self.config.bn_eps);
        let x = self.backbone_exec(&mut e, image.tensor.clone())?;
        FeatureField::new(x, self.layouts.last().expect("validated").out_type)
    }

    /// Pooled features after any post-pool layers, typed as trivial fields.
    pub fn pooled_features(&self, image: &FeatureField) -> Result<FeatureField> {
        let mut e = Infer::new(&self.params, self.config.bn_eps);
        let heads = self.forward_exec(&mut e, image.tensor.clone())?;
        let d = self.config.descriptor_dim();
        FeatureField::new(heads.pooled, FieldType::trivial(self.group(), d))
    }

    /// L2-normalized descriptor field, typed as trivial fields.
    pub fn descriptor_field(&self, image: &FeatureField) -> Result<FeatureField> {
        let mut e = Infer::new(&self.params, self.config.bn_eps);
        let heads = self.forward_exec(&mut e, image.tensor.clone())?;
        let d = self.config.descriptor_dim();
        FeatureField::new(heads.descriptors, FieldType::trivial(self.group(), d))
    }

    /// Input field type (RGB, trivial).
    pub fn input_type(&self) -> FieldType {
        FieldType::trivial(self.group(), 3)
    }
}
