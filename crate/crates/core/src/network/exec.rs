use std::collections::HashMap;
use std::sync::Arc;

use super::params::ParamStore;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{self, batchnorm_infer_grouped, group_max, BatchStats, SparseMap, Tensor};

/// Backend a network forward pass runs on. The same layer code drives plain
/// inference (values are tensors, batch norm uses running statistics) and
/// training (values are tape variables, batch norm uses batch statistics).
pub trait Exec {
    type V: Clone;

    fn param(&mut self, name: &str) -> Result<Self::V>;
    fn conv2d(&mut self, x: &Self::V, w: &Self::V, b: &Self::V, padding: usize) -> Result<Self::V>;
    fn sparse(&mut self, x: &Self::V, map: &Arc<SparseMap>, shape: Vec<usize>) -> Result<Self::V>;
    /// Batch norm with parameters `{prefix}.gamma` / `{prefix}.beta`, shared
    /// by each run of `group` channels.
    fn batchnorm(&mut self, x: &Self::V, prefix: &str, group: usize) -> Result<Self::V>;
    fn relu(&mut self, x: &Self::V) -> Self::V;
    fn softplus(&mut self, x: &Self::V) -> Self::V;
    fn squash(&mut self, x: &Self::V) -> Self::V;
    fn softmax_channel(&mut self, x: &Self::V) -> Result<Self::V>;
    fn l2_normalize_channel(&mut self, x: &Self::V) -> Result<Self::V>;
    fn group_pool(&mut self, x: &Self::V, n: usize) -> Result<Self::V>;
    fn narrow_channels(&mut self, x: &Self::V, start: usize, len: usize) -> Result<Self::V>;
}

/// Inference on plain tensors.
pub struct Infer<'a> {
    params: &'a ParamStore,
    eps: f64,
}

impl<'a> Infer<'a> {
    pub fn new(params: &'a ParamStore, eps: f64) -> Self {
        Self { params, eps }
    }
}

impl Exec for Infer<'_> {
    type V = Tensor;

    fn param(&mut self, name: &str) -> Result<Tensor> {
        Ok(self.params.get(name)?.clone())
    }

    fn conv2d(&mut self, x: &Tensor, w: &Tensor, b: &Tensor, padding: usize) -> Result<Tensor> {
        tensor::conv2d(x, w, Some(b), 1, padding)
    }

    fn sparse(&mut self, x: &Tensor, map: &Arc<SparseMap>, shape: Vec<usize>) -> Result<Tensor> {
        map.apply(x, shape)
    }

    fn batchnorm(&mut self, x: &Tensor, prefix: &str, group: usize) -> Result<Tensor> {
        let p = |s: &str| self.params.get(&format!("{prefix}.{s}")).map(|t| t.data());
        batchnorm_infer_grouped(
            x,
            p("running_mean")?,
            p("running_var")?,
            p("gamma")?,
            p("beta")?,
            self.eps,
            group,
        )
    }

    fn relu(&mut self, x: &Tensor) -> Tensor {
        tensor::relu(x)
    }

    fn softplus(&mut self, x: &Tensor) -> Tensor {
        tensor::softplus(x)
    }

    fn squash(&mut self, x: &Tensor) -> Tensor {
        tensor::squash(x)
    }

    fn softmax_channel(&mut self, x: &Tensor) -> Result<Tensor> {
        x.dims4()?;
        Ok(tensor::softmax_channel(x))
    }

    fn l2_normalize_channel(&mut self, x: &Tensor) -> Result<Tensor> {
        x.dims4()?;
        Ok(tensor::l2_normalize_channel(x))
    }

    fn group_pool(&mut self, x: &Tensor, n: usize) -> Result<Tensor> {
        Ok(group_max(x, n)?.0)
    }

    fn narrow_channels(&mut self, x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        x.narrow_channels(start, len)
    }
}

/// Training-mode forward recorded on a tape. Trainable parameters become
/// leaves on first use; batch statistics are collected for running-average
/// updates.
pub struct TapeExec<'a> {
    pub tape: &'a mut Tape<f32>,
    params: &'a ParamStore,
    eps: f64,
    leaves: HashMap<String, Var>,
    stats: Vec<(String, BatchStats)>,
}

impl<'a> TapeExec<'a> {
    pub fn new(tape: &'a mut Tape<f32>, params: &'a ParamStore, eps: f64) -> Self {
        Self {
            tape,
            params,
            eps,
            leaves: HashMap::new(),
            stats: Vec::new(),
        }
    }

    /// Parameter leaves created so far, by name.
    pub fn leaves(&self) -> &HashMap<String, Var> {
        &self.leaves
    }

    /// Batch statistics per batch-norm prefix, in forward order.
    pub fn batch_stats(&self) -> &[(String, BatchStats)] {
        &self.stats
    }
}

impl Exec for TapeExec<'_> {
    type V = Var;

    fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.leaves.get(name) {
            return Ok(v);
        }
        if !self.params.is_trainable(name)? {
            return Err(Error::invalid(format!(
                "{name} is a buffer, not a trainable parameter"
            )));
        }
        let v = self.tape.leaf(self.params.get(name)?.clone());
        self.leaves.insert(name.to_string(), v);
        Ok(v)
    }

    fn conv2d(&mut self, x: &Var, w: &Var, b: &Var, padding: usize) -> Result<Var> {
        self.tape.conv2d(*x, *w, Some(*b), 1, padding)
    }

    fn sparse(&mut self, x: &Var, map: &Arc<SparseMap>, shape: Vec<usize>) -> Result<Var> {
        self.tape.sparse(*x, map.clone(), shape)
    }

    fn batchnorm(&mut self, x: &Var, prefix: &str, group: usize) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        let (out, stats) = self.tape.batchnorm(*x, gamma, beta, self.eps, group)?;
        self.stats.push((prefix.to_string(), stats));
        Ok(out)
    }

    fn relu(&mut self, x: &Var) -> Var {
        self.tape.relu(*x)
    }

    fn softplus(&mut self, x: &Var) -> Var {
        self.tape.softplus(*x)
    }

    fn squash(&mut self, x: &Var) -> Var {
        self.tape.squash(*x)
    }

    fn softmax_channel(&mut self, x: &Var) -> Result<Var> {
        self.tape.softmax_channel(*x)
    }

    fn l2_normalize_channel(&mut self, x: &Var) -> Result<Var> {
        self.tape.l2_normalize_channel(*x)
    }

    fn group_pool(&mut self, x: &Var, n: usize) -> Result<Var> {
        self.tape.group_pool(*x, n)
    }

    fn narrow_channels(&mut self, x: &Var, start: usize, len: usize) -> Result<Var> {
        self.tape.narrow_channels(*x, start, len)
    }
}
