//! Toy-scale self-supervised training on synthetic warped pairs.

mod losses;
mod pairs;
mod texture;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::mpsc::sync_channel;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::network::{RefConfig, RefNet, TapeExec};
use crate::tensor::Tensor;

pub use losses::{
    grid_windows, loss_average_precision, loss_peakiness, loss_repeatability_cosim, warp_to_a,
    ApSample, LossParams,
};
pub use pairs::{
    generate_pair, overlap_mask, pair_from, similarity_homography, warp_image, PairParams,
    TrainPair, MIN_SOURCE,
};
pub use texture::synthetic_texture;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub repeatability_cosim: f64,
    pub peakiness: f64,
    pub ap: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            repeatability_cosim: 1.0,
            peakiness: 1.0,
            ap: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: RefConfig,
    pub steps: usize,
    pub seed: u64,
    /// Side of the square synthetic textures.
    pub image_size: usize,
    pub learning_rate: f64,
    /// Zero gives plain SGD.
    pub momentum: f64,
    pub weight_decay: f64,
    pub weights: LossWeights,
    pub losses: LossParams,
    pub pairs: PairParams,
    /// Pairs generated ahead of the optimizer.
    pub queue_capacity: usize,
    /// Log every this many steps (0 disables).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: RefConfig::default(),
            steps: 200,
            seed: 0,
            image_size: 64,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            weights: LossWeights::default(),
            losses: LossParams::default(),
            pairs: PairParams::default(),
            queue_capacity: 4,
            log_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.losses.validate()?;
        if self.steps == 0 {
            return Err(Error::invalid("steps must be >= 1"));
        }
        if self.image_size < MIN_SOURCE {
            return Err(Error::invalid(format!(
                "image_size must be >= {MIN_SOURCE}"
            )));
        }
        let min = self.model.min_input_size()?;
        if self.image_size < min {
            return Err(Error::invalid(format!(
                "image_size {} is below the model's {min}-pixel receptive field",
                self.image_size
            )));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(
                "learning_rate must be > 0 and momentum in [0, 1)",
            ));
        }
        if self.queue_capacity == 0 {
            return Err(Error::invalid("queue_capacity must be >= 1"));
        }
        Ok(())
    }
}

/// Loss values of one optimizer step (before the update).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub repeatability_cosim: f64,
    pub peakiness: f64,
    pub ap_loss: f64,
    pub total: f64,
}

pub const LOSS_CSV_HEADER: &str = "step,repeatability_cosim,peakiness,ap_loss,total";

pub fn write_loss_csv(reports: &[LossReport], path: &Path) -> Result<()> {
    let mut out = String::from(LOSS_CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.repeatability_cosim, r.peakiness, r.ap_loss, r.total
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Derives an independent stream seed for `(seed, index, lane)`.
pub fn derive_seed(seed: u64, index: u64, lane: u64) -> u64 {
    // SplitMix64 finalizer over a mixed key.
    let mut z = seed
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(lane.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The training pair of step `index`.
pub fn training_pair(config: &TrainConfig, index: usize) -> Result<TrainPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, index as u64, 0));
    let texture = synthetic_texture(config.image_size, &mut rng);
    generate_pair(
        &texture,
        derive_seed(config.seed, index as u64, 1),
        &config.pairs,
    )
}

pub struct TrainOutcome {
    pub net: RefNet,
    pub reports: Vec<LossReport>,
}

/// SGD with optional momentum; velocities keyed by parameter name.
struct Sgd {
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    fn update(&mut self, name: &str, param: &mut Tensor, grad: &[f32]) {
        let v = self
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; grad.len()]);
        for ((p, &g), vel) in param.data_mut().iter_mut().zip(grad).zip(v.iter_mut()) {
            let g = g as f64 + self.weight_decay * *p as f64;
            *vel = self.momentum * *vel + g;
            *p = (*p as f64 - self.lr * *vel) as f32;
        }
    }
}

fn finite(term: &str, value: f64, step: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite {
            term: format!("{term} at step {step} (value {value})"),
        })
    }
}

/// Stacks two `[1, C, H, W]` images into `[2, C, H, W]`.
fn stack(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut shape = a.shape().to_vec();
    if shape != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "stack",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    shape[0] = 2;
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::new(shape, data)
}

/// One forward/backward/update on `pair`.
pub fn train_step(
    net: &mut RefNet,
    opt_state: &mut BTreeMap<String, Vec<f64>>,
    pair: &TrainPair,
    config: &TrainConfig,
    step: usize,
) -> Result<LossReport> {
    let (h, w) = (pair.height(), pair.width());
    let lp = &config.losses;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, step as u64, 2));
    let ap_sample = ApSample::draw(&pair.gt, &pair.mask, h, w, lp, &mut rng)?;
    let cos_windows = Arc::new(grid_windows(
        h,
        w,
        lp.cosim_window,
        lp.cosim_stride,
        Some(&pair.mask),
        lp.min_valid_fraction,
    ));
    let peak_windows = Arc::new(grid_windows(
        h,
        w,
        lp.peak_window,
        lp.peak_window,
        None,
        0.0,
    ));
    let warp = Arc::new(warp_to_a(&pair.gt, h, w));

    let mut tape = Tape::new();
    let eps = net.config().bn_eps;
    let d = net.config().descriptor_dim();
    let (leaves, stats, heads) = {
        let mut e = TapeExec::new(&mut tape, net.params(), eps);
        let x = e.tape.leaf(stack(&pair.image_a, &pair.image_b)?);
        let heads = net.forward_exec(&mut e, x)?;
        (e.leaves().clone(), e.batch_stats().to_vec(), heads)
    };
    let split = |tape: &mut Tape<f32>, v, c: usize| -> Result<(_, _)> {
        let joined = tape.reshape(v, vec![1, 2 * c, h, w])?;
        Ok((
            tape.narrow_channels(joined, 0, c)?,
            tape.narrow_channels(joined, c, c)?,
        ))
    };
    let (desc_a, desc_b) = split(&mut tape, heads.descriptors, d)?;
    let (rep_a, rep_b) = split(&mut tape, heads.repeatability, 1)?;
    let (rel_a, _) = split(&mut tape, heads.reliability, 1)?;

    let cos = loss_repeatability_cosim(&mut tape, rep_a, rep_b, &warp, &cos_windows)?;
    let pa = loss_peakiness(&mut tape, rep_a, &peak_windows)?;
    let pb = loss_peakiness(&mut tape, rep_b, &peak_windows)?;
    let peak_sum = tape.add(pa, pb)?;
    let peak = tape.scale(peak_sum, 0.5);
    let rel = lp.reliability_weighting.then_some((rel_a, lp.ap_kappa));
    let ap = loss_average_precision(&mut tape, desc_a, desc_b, &ap_sample, lp.ap_bins, rel)?;

    let wt = &config.weights;
    let t1 = tape.scale(cos, wt.repeatability_cosim);
    let t2 = tape.scale(peak, wt.peakiness);
    let t3 = tape.scale(ap, wt.ap);
    let t12 = tape.add(t1, t2)?;
    let total = tape.add(t12, t3)?;

    let scalar = |tape: &Tape<f32>, v| tape.value(v).data()[0] as f64;
    let report = LossReport {
        step,
        repeatability_cosim: finite("repeatability_cosim", scalar(&tape, cos), step)?,
        peakiness: finite("peakiness", scalar(&tape, peak), step)?,
        ap_loss: finite("ap_loss", scalar(&tape, ap), step)?,
        total: finite("total", scalar(&tape, total), step)?,
    };

    tape.backward(total)?;
    let mut sgd = Sgd {
        lr: config.learning_rate,
        momentum: config.momentum,
        weight_decay: config.weight_decay,
        velocity: std::mem::take(opt_state),
    };
    let ordered: BTreeMap<&String, _> = leaves.iter().collect();
    for (name, &v) in ordered {
        let Some(g) = tape.grad(v) else { continue };
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                term: format!("gradient of {name} at step {step}"),
            });
        }
        let g = g.to_vec();
        sgd.update(name, net.params_mut().get_mut(name)?, &g);
    }
    *opt_state = sgd.velocity;

    let m = net.config().bn_momentum;
    for (prefix, s) in stats {
        for (buf, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
            let t = net.params_mut().get_mut(&format!("{prefix}.{buf}"))?;
            for (r, &b) in t.data_mut().iter_mut().zip(batch) {
                *r = ((1.0 - m) * *r as f64 + m * b) as f32;
            }
        }
    }
    Ok(report)
}

/// Trains a fresh network from `config.model`. Pairs are produced on a
/// worker thread into a bounded queue; each pair depends only on its step
/// index, so the run is deterministic.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let net = RefNet::new(config.model.clone(), derive_seed(config.seed, 0, 3))?;
    train_from(net, config)
}

/// Continues training `net` for `config.steps` steps.
pub fn train_from(mut net: RefNet, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let mut reports = Vec::with_capacity(config.steps);
    let mut opt_state = BTreeMap::new();
    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = sync_channel::<Result<TrainPair>>(config.queue_capacity);
        scope.spawn(move || {
            for i in 0..config.steps {
                if tx.send(training_pair(config, i)).is_err() {
                    break;
                }
            }
        });
        for step in 0..config.steps {
            let pair = rx
                .recv()
                .map_err(|_| Error::invalid("pair generator stopped early"))??;
            let report = train_step(&mut net, &mut opt_state, &pair, config, step)?;
            if config.log_every > 0 && step % config.log_every == 0 {
                log::info!(
                    "step {step}: total {:.4} (cosim {:.4}, peak {:.4}, ap {:.4})",
                    report.total,
                    report.repeatability_cosim,
                    report.peakiness,
                    report.ap_loss
                );
            }
            reports.push(report);
        }
        Ok(())
    })?;
    Ok(TrainOutcome { net, reports })
}

#[cfg(test)]
mod tests;
