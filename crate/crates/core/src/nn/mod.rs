//! Layers, initializers and optimizers on top of the autodiff graph.
//!
//! A layer owns its parameter arrays. `register` copies the current values
//! into a graph (as differentiable params or frozen constants) and returns a
//! small id struct whose `forward` builds the op subgraph. Parameter ordering
//! is fixed by field order and shared between `params_mut`, `param_ids` and
//! the flat checkpoint layout.

mod nets;
mod optim;

pub use nets::*;
pub use optim::{Adam, Optimizer, Sgd};

use crate::graph::{Graph, NodeId};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;

fn kaiming_uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut a = ArrayD::zeros(IxDyn(shape));
    for v in a.iter_mut() {
        *v = (rng.gen::<f64>() * 2.0 - 1.0) * bound;
    }
    a
}

#[derive(Clone)]
pub struct Linear {
    pub w: ArrayD<f64>, // [in, out]
    pub b: ArrayD<f64>, // [out]
}

pub struct LinearIds {
    pub w: NodeId,
    pub b: NodeId,
}

impl Linear {
    pub fn new<R: Rng>(rng: &mut R, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            w: kaiming_uniform(rng, &[in_dim, out_dim], in_dim),
            b: kaiming_uniform(rng, &[out_dim], in_dim),
        }
    }

    /// All-zero weights and bias (uniform logits out of the box).
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            w: ArrayD::zeros(IxDyn(&[in_dim, out_dim])),
            b: ArrayD::zeros(IxDyn(&[out_dim])),
        }
    }

    pub fn register(&self, g: &mut Graph, trainable: bool) -> LinearIds {
        let reg = |g: &mut Graph, v: &ArrayD<f64>| {
            if trainable {
                g.param(v.clone())
            } else {
                g.constant(v.clone())
            }
        };
        LinearIds {
            w: reg(g, &self.w),
            b: reg(g, &self.b),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut ArrayD<f64>> {
        vec![&mut self.w, &mut self.b]
    }
}

impl LinearIds {
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let y = g.matmul(x, self.w);
        g.add_bias(y, self.b)
    }

    pub fn param_ids(&self) -> Vec<NodeId> {
        vec![self.w, self.b]
    }
}

#[derive(Clone)]
pub struct Conv2d {
    pub w: ArrayD<f64>, // [out, in, k, k]
    pub b: ArrayD<f64>, // [out]
    pub stride: usize,
    pub pad: usize,
}

pub struct Conv2dIds {
    pub w: NodeId,
    pub b: NodeId,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    pub fn new<R: Rng>(
        rng: &mut R,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Conv2d {
            w: kaiming_uniform(rng, &[out_ch, in_ch, kernel, kernel], fan_in),
            b: kaiming_uniform(rng, &[out_ch], fan_in),
            stride,
            pad,
        }
    }

    pub fn register(&self, g: &mut Graph, trainable: bool) -> Conv2dIds {
        let reg = |g: &mut Graph, v: &ArrayD<f64>| {
            if trainable {
                g.param(v.clone())
            } else {
                g.constant(v.clone())
            }
        };
        Conv2dIds {
            w: reg(g, &self.w),
            b: reg(g, &self.b),
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut ArrayD<f64>> {
        vec![&mut self.w, &mut self.b]
    }
}

impl Conv2dIds {
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let y = g.conv2d(x, self.w, self.stride, self.pad);
        g.add_channel(y, self.b)
    }

    pub fn param_ids(&self) -> Vec<NodeId> {
        vec![self.w, self.b]
    }
}

#[derive(Clone)]
pub struct ConvTranspose2d {
    pub w: ArrayD<f64>, // [in, out, k, k]
    pub b: ArrayD<f64>, // [out]
    pub stride: usize,
    pub pad: usize,
}

pub struct ConvTranspose2dIds {
    pub w: NodeId,
    pub b: NodeId,
    stride: usize,
    pad: usize,
}

impl ConvTranspose2d {
    pub fn new<R: Rng>(
        rng: &mut R,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = out_ch * kernel * kernel;
        ConvTranspose2d {
            w: kaiming_uniform(rng, &[in_ch, out_ch, kernel, kernel], fan_in),
            b: kaiming_uniform(rng, &[out_ch], fan_in),
            stride,
            pad,
        }
    }

    pub fn register(&self, g: &mut Graph, trainable: bool) -> ConvTranspose2dIds {
        let reg = |g: &mut Graph, v: &ArrayD<f64>| {
            if trainable {
                g.param(v.clone())
            } else {
                g.constant(v.clone())
            }
        };
        ConvTranspose2dIds {
            w: reg(g, &self.w),
            b: reg(g, &self.b),
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut ArrayD<f64>> {
        vec![&mut self.w, &mut self.b]
    }
}

impl ConvTranspose2dIds {
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let y = g.conv_transpose2d(x, self.w, self.stride, self.pad);
        g.add_channel(y, self.b)
    }

    pub fn param_ids(&self) -> Vec<NodeId> {
        vec![self.w, self.b]
    }
}

/// Batch normalization over the channel axis, for `[N, F]` and `[N, C, H, W]`.
#[derive(Clone)]
pub struct BatchNorm {
    pub gamma: ArrayD<f64>,
    pub beta: ArrayD<f64>,
    pub running_mean: ArrayD<f64>,
    pub running_var: ArrayD<f64>,
    pub momentum: f64,
    pub eps: f64,
}

pub struct BatchNormIds {
    pub gamma: NodeId,
    pub beta: NodeId,
    eval_scale: NodeId,
    eval_shift: NodeId,
    eps: f64,
}

/// Batch statistics produced by a train-mode forward; the value of `var` is
/// the biased (1/M) estimator used for normalization.
pub struct BnBatchStats {
    pub mean: NodeId,
    pub var: NodeId,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: ArrayD::from_elem(IxDyn(&[channels]), 1.0),
            beta: ArrayD::zeros(IxDyn(&[channels])),
            running_mean: ArrayD::zeros(IxDyn(&[channels])),
            running_var: ArrayD::from_elem(IxDyn(&[channels]), 1.0),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn register(&self, g: &mut Graph, trainable: bool) -> BatchNormIds {
        let gamma = if trainable {
            g.param(self.gamma.clone())
        } else {
            g.constant(self.gamma.clone())
        };
        let beta = if trainable {
            g.param(self.beta.clone())
        } else {
            g.constant(self.beta.clone())
        };
        // inference affine folded from the frozen running statistics
        let scale = ndarray::Zip::from(&self.gamma)
            .and(&self.running_var)
            .map_collect(|&gm, &rv| gm / (rv + self.eps).sqrt());
        let shift = ndarray::Zip::from(&self.beta)
            .and(&self.running_mean)
            .and(&scale)
            .map_collect(|&bt, &rm, &sc| bt - rm * sc);
        let eval_scale = g.constant(scale);
        let eval_shift = g.constant(shift);
        BatchNormIds {
            gamma,
            beta,
            eval_scale,
            eval_shift,
            eps: self.eps,
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut ArrayD<f64>> {
        vec![&mut self.gamma, &mut self.beta]
    }

    /// EMA update of the running statistics from one train-mode batch.
    pub fn update_running(&mut self, mean: &ArrayD<f64>, var_biased: &ArrayD<f64>, m: usize) {
        let unbias = if m > 1 { m as f64 / (m as f64 - 1.0) } else { 1.0 };
        let mom = self.momentum;
        ndarray::Zip::from(&mut self.running_mean)
            .and(mean)
            .for_each(|r, &b| *r = (1.0 - mom) * *r + mom * b);
        ndarray::Zip::from(&mut self.running_var)
            .and(var_biased)
            .for_each(|r, &b| *r = (1.0 - mom) * *r + mom * b * unbias);
    }
}

impl BatchNormIds {
    /// Normalize with batch statistics; gradients flow through them.
    pub fn forward_train(&self, g: &mut Graph, x: NodeId) -> (NodeId, BnBatchStats) {
        let mean = g.channel_mean(x);
        let x2 = g.mul(x, x);
        let mean_sq = g.channel_mean(x2);
        let mean2 = g.mul(mean, mean);
        let var = g.sub(mean_sq, mean2);
        let var_eps = g.add_scalar(var, self.eps);
        let std = g.sqrt(var_eps);
        let inv_std = g.recip(std);
        let neg_mean = g.mul_scalar(mean, -1.0);
        let centered = g.add_channel(x, neg_mean);
        let normed = g.mul_channel(centered, inv_std);
        let scaled = g.mul_channel(normed, self.gamma);
        let out = g.add_channel(scaled, self.beta);
        (out, BnBatchStats { mean, var })
    }

    /// Normalize with the frozen running statistics (inference behavior).
    pub fn forward_eval(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let scaled = g.mul_channel(x, self.eval_scale);
        g.add_channel(scaled, self.eval_shift)
    }

    pub fn param_ids(&self) -> Vec<NodeId> {
        vec![self.gamma, self.beta]
    }
}

#[derive(Clone)]
pub struct Embedding {
    pub w: ArrayD<f64>, // [num_classes, dim]
}

pub struct EmbeddingIds {
    pub w: NodeId,
}

impl Embedding {
    pub fn new<R: Rng>(rng: &mut R, num_classes: usize, dim: usize) -> Self {
        let mut w = ArrayD::zeros(IxDyn(&[num_classes, dim]));
        for v in w.iter_mut() {
            *v = crate::util::sample_normal(rng);
        }
        Embedding { w }
    }

    pub fn register(&self, g: &mut Graph, trainable: bool) -> EmbeddingIds {
        let w = if trainable {
            g.param(self.w.clone())
        } else {
            g.constant(self.w.clone())
        };
        EmbeddingIds { w }
    }

    pub fn params_mut(&mut self) -> Vec<&mut ArrayD<f64>> {
        vec![&mut self.w]
    }
}

impl EmbeddingIds {
    /// Look up embeddings via a one-hot matmul so gradients reach the table.
    pub fn forward(&self, g: &mut Graph, labels: &[u32], num_classes: usize) -> NodeId {
        let n = labels.len();
        let mut onehot = ndarray::Array2::<f64>::zeros((n, num_classes));
        for (i, &y) in labels.iter().enumerate() {
            onehot[[i, y as usize]] = 1.0;
        }
        let oh = g.constant(onehot.into_dyn());
        g.matmul(oh, self.w)
    }

    pub fn param_ids(&self) -> Vec<NodeId> {
        vec![self.w]
    }
}

/// Mode of a network forward pass.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Eval,
}
