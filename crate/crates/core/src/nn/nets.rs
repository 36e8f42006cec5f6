//! Concrete classifier and generator architectures.
//!
//! Classifiers expose a feature tap (the activations feeding the output head)
//! and the pre-normalization input of every BN layer, which the inversion and
//! filtration stages consume. Generators map `(z, y)` to an input-shaped
//! tensor. Classifier heads start at zero so an untrained model predicts the
//! uniform distribution.

use super::*;
use crate::graph::{Graph, NodeId};
use ndarray::ArrayD;
use rand::Rng;

/// Everything a classifier forward pass exposes.
pub struct ClfOutputs {
    pub logits: NodeId,
    /// Penultimate activations (MLP) or pooled last-conv-block output (CNN).
    pub features: NodeId,
    /// Input of each BN layer, in layer order.
    pub pre_bn: Vec<NodeId>,
    /// Batch statistics per BN layer (train mode only).
    pub bn_stats: Vec<BnBatchStats>,
}

pub struct GenOutputs {
    pub x: NodeId,
    pub bn_stats: Vec<BnBatchStats>,
}

// ---------------------------------------------------------------- MLP

/// `in -> hidden -> hidden -> K` with 1-d batch norm, for point datasets.
#[derive(Clone)]
pub struct MlpNet {
    pub fc1: Linear,
    pub bn1: BatchNorm,
    pub fc2: Linear,
    pub bn2: BatchNorm,
    pub head: Linear,
}

pub struct MlpNetIds {
    fc1: LinearIds,
    bn1: BatchNormIds,
    fc2: LinearIds,
    bn2: BatchNormIds,
    head: LinearIds,
}

impl MlpNet {
    pub fn new<R: Rng>(rng: &mut R, in_dim: usize, hidden: usize, num_classes: usize) -> Self {
        MlpNet {
            fc1: Linear::new(rng, in_dim, hidden),
            bn1: BatchNorm::new(hidden),
            fc2: Linear::new(rng, hidden, hidden),
            bn2: BatchNorm::new(hidden),
            head: Linear::zeros(hidden, num_classes),
        }
    }

    pub fn register(&self, g: &mut Graph, trainable: bool) -> MlpNetIds {
        MlpNetIds {
            fc1: self.fc1.register(g, trainable),
            bn1: self.bn1.register(g, trainable),
            fc2: self.fc2.register(g, trainable),
            bn2: self.bn2.register(g, trainable),
            head: self.head.register(g, trainable),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut ArrayD<f64>> {
        let mut p = self.fc1.params_mut();
        p.extend(self.bn1.params_mut());
        p.extend(self.fc2.params_mut());
        p.extend(self.bn2.params_mut());
        p.extend(self.head.params_mut());
        p
    }

    pub fn bn_layers_mut(&mut self) -> Vec<&mut BatchNorm> {
        vec![&mut self.bn1, &mut self.bn2]
    }

    pub fn bn_layers(&self) -> Vec<&BatchNorm> {
        vec![&self.bn1, &self.bn2]
    }
}

impl MlpNetIds {
    pub fn forward(&self, g: &mut Graph, x: NodeId, mode: Mode) -> ClfOutputs {
        let mut pre_bn = Vec::new();
        let mut bn_stats = Vec::new();
        let mut bn = |g: &mut Graph, ids: &BatchNormIds, h: NodeId| -> NodeId {
            match mode {
                Mode::Train => {
                    let (out, stats) = ids.forward_train(g, h);
                    bn_stats.push(stats);
                    out
                }
                Mode::Eval => ids.forward_eval(g, h),
            }
        };
        let h1 = self.fc1.forward(g, x);
        pre_bn.push(h1);
        let h1 = bn(g, &self.bn1, h1);
        let h1 = g.relu(h1);
        let h2 = self.fc2.forward(g, h1);
        pre_bn.push(h2);
        let h2 = bn(g, &self.bn2, h2);
        let features = g.relu(h2);
        let logits = self.head.forward(g, features);
        ClfOutputs {
            logits,
            features,
            pre_bn,
            bn_stats,
        }
    }

    pub fn param_ids(&self) -> Vec<NodeId> {
        let mut p = self.fc1.param_ids();
        p.extend(self.bn1.param_ids());
        p.extend(self.fc2.param_ids());
        p.extend(self.bn2.param_ids());
        p.extend(self.head.param_ids());
        p
    }
}

// ---------------------------------------------------------------- CNN

/// Three conv+BN blocks with two max-pools and a global average pool.
#[derive(Clone)]
pub struct CnnNet {
    pub conv1: Conv2d,
    pub bn1: BatchNorm,
    pub conv2: Conv2d,
    pub bn2: BatchNorm,
    pub conv3: Conv2d,
    pub bn3: BatchNorm,
    pub head: Linear,
}

pub struct CnnNetIds {
    conv1: Conv2dIds,
    bn1: BatchNormIds,
    conv2: Conv2dIds,
    bn2: BatchNormIds,
    conv3: Conv2dIds,
    bn3: BatchNormIds,
    head: LinearIds,
}

impl CnnNet {
    pub fn new<R: Rng>(rng: &mut R, in_ch: usize, channels: [usize; 3], num_classes: usize) -> Self {
        CnnNet {
            conv1: Conv2d::new(rng, in_ch, channels[0], 3, 1, 1),
            bn1: BatchNorm::new(channels[0]),
            conv2: Conv2d::new(rng, channels[0], channels[1], 3, 1, 1),
            bn2: BatchNorm::new(channels[1]),
            conv3: Conv2d::new(rng, channels[1], channels[2], 3, 1, 1),
            bn3: BatchNorm::new(channels[2]),
            head: Linear::zeros(channels[2], num_classes),
        }
    }

    pub fn register(&self, g: &mut Graph, trainable: bool) -> CnnNetIds {
        CnnNetIds {
            conv1: self.conv1.register(g, trainable),
            bn1: self.bn1.register(g, trainable),
            conv2: self.conv2.register(g, trainable),
            bn2: self.bn2.register(g, trainable),
            conv3: self.conv3.register(g, trainable),
            bn3: self.bn3.register(g, trainable),
            head: self.head.register(g, trainable),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut ArrayD<f64>> {
        let mut p = self.conv1.params_mut();
        p.extend(self.bn1.params_mut());
        p.extend(self.conv2.params_mut());
        p.extend(self.bn2.params_mut());
        p.extend(self.conv3.params_mut());
        p.extend(self.bn3.params_mut());
        p.extend(self.head.params_mut());
        p
    }

    pub fn bn_layers_mut(&mut self) -> Vec<&mut BatchNorm> {
        vec![&mut self.bn1, &mut self.bn2, &mut self.bn3]
    }

    pub fn bn_layers(&self) -> Vec<&BatchNorm> {
        vec![&self.bn1, &self.bn2, &self.bn3]
    }
}

impl CnnNetIds {
    pub fn forward(&self, g: &mut Graph, x: NodeId, mode: Mode) -> ClfOutputs {
        let mut pre_bn = Vec::new();
        let mut bn_stats = Vec::new();
        let mut bn = |g: &mut Graph, ids: &BatchNormIds, h: NodeId| -> NodeId {
            match mode {
                Mode::Train => {
                    let (out, stats) = ids.forward_train(g, h);
                    bn_stats.push(stats);
                    out
                }
                Mode::Eval => ids.forward_eval(g, h),
            }
        };
        let h = self.conv1.forward(g, x);
        pre_bn.push(h);
        let h = bn(g, &self.bn1, h);
        let h = g.relu(h);
        let h = g.maxpool2(h);

        let h = self.conv2.forward(g, h);
        pre_bn.push(h);
        let h = bn(g, &self.bn2, h);
        let h = g.relu(h);
        let h = g.maxpool2(h);

        let h = self.conv3.forward(g, h);
        pre_bn.push(h);
        let h = bn(g, &self.bn3, h);
        let h = g.relu(h);

        let features = g.global_avg_pool(h);
        let logits = self.head.forward(g, features);
        ClfOutputs {
            logits,
            features,
            pre_bn,
            bn_stats,
        }
    }

    pub fn param_ids(&self) -> Vec<NodeId> {
        let mut p = self.conv1.param_ids();
        p.extend(self.bn1.param_ids());
        p.extend(self.conv2.param_ids());
        p.extend(self.bn2.param_ids());
        p.extend(self.conv3.param_ids());
        p.extend(self.bn3.param_ids());
        p.extend(self.head.param_ids());
        p
    }
}

// ------------------------------------------------------ classifier enum

#[derive(Clone)]
pub enum ClassifierNet {
    Mlp(MlpNet),
    Cnn(CnnNet),
}

pub enum ClassifierNetIds {
    Mlp(MlpNetIds),
    Cnn(CnnNetIds),
}

impl ClassifierNet {
    pub fn register(&self, g: &mut Graph, trainable: bool) -> ClassifierNetIds {
        match self {
            ClassifierNet::Mlp(n) => ClassifierNetIds::Mlp(n.register(g, trainable)),
            ClassifierNet::Cnn(n) => ClassifierNetIds::Cnn(n.register(g, trainable)),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut ArrayD<f64>> {
        match self {
            ClassifierNet::Mlp(n) => n.params_mut(),
            ClassifierNet::Cnn(n) => n.params_mut(),
        }
    }

    pub fn bn_layers_mut(&mut self) -> Vec<&mut BatchNorm> {
        match self {
            ClassifierNet::Mlp(n) => n.bn_layers_mut(),
            ClassifierNet::Cnn(n) => n.bn_layers_mut(),
        }
    }

    pub fn bn_layers(&self) -> Vec<&BatchNorm> {
        match self {
            ClassifierNet::Mlp(n) => n.bn_layers(),
            ClassifierNet::Cnn(n) => n.bn_layers(),
        }
    }
}

impl ClassifierNetIds {
    pub fn forward(&self, g: &mut Graph, x: NodeId, mode: Mode) -> ClfOutputs {
        match self {
            ClassifierNetIds::Mlp(n) => n.forward(g, x, mode),
            ClassifierNetIds::Cnn(n) => n.forward(g, x, mode),
        }
    }

    pub fn param_ids(&self) -> Vec<NodeId> {
        match self {
            ClassifierNetIds::Mlp(n) => n.param_ids(),
            ClassifierNetIds::Cnn(n) => n.param_ids(),
        }
    }
}

// ------------------------------------------------------ generators

/// Conditional MLP generator for point datasets: `cat(z, embed(y))` through
/// two BN-ReLU blocks to an unconstrained output.
#[derive(Clone)]
pub struct MlpGen {
    pub embed: Embedding,
    pub fc1: Linear,
    pub bn1: BatchNorm,
    pub fc2: Linear,
    pub bn2: BatchNorm,
    pub out: Linear,
    pub num_classes: usize,
}

pub struct MlpGenIds {
    embed: EmbeddingIds,
    fc1: LinearIds,
    bn1: BatchNormIds,
    fc2: LinearIds,
    bn2: BatchNormIds,
    out: LinearIds,
    num_classes: usize,
}

impl MlpGen {
    pub fn new<R: Rng>(
        rng: &mut R,
        noise_dim: usize,
        embed_dim: usize,
        hidden: usize,
        num_classes: usize,
        out_dim: usize,
    ) -> Self {
        MlpGen {
            embed: Embedding::new(rng, num_classes, embed_dim),
            fc1: Linear::new(rng, noise_dim + embed_dim, hidden),
            bn1: BatchNorm::new(hidden),
            fc2: Linear::new(rng, hidden, hidden),
            bn2: BatchNorm::new(hidden),
            out: Linear::new(rng, hidden, out_dim),
            num_classes,
        }
    }

    pub fn register(&self, g: &mut Graph, trainable: bool) -> MlpGenIds {
        MlpGenIds {
            embed: self.embed.register(g, trainable),
            fc1: self.fc1.register(g, trainable),
            bn1: self.bn1.register(g, trainable),
            fc2: self.fc2.register(g, trainable),
            bn2: self.bn2.register(g, trainable),
            out: self.out.register(g, trainable),
            num_classes: self.num_classes,
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut ArrayD<f64>> {
        let mut p = self.embed.params_mut();
        p.extend(self.fc1.params_mut());
        p.extend(self.bn1.params_mut());
        p.extend(self.fc2.params_mut());
        p.extend(self.bn2.params_mut());
        p.extend(self.out.params_mut());
        p
    }

    pub fn bn_layers_mut(&mut self) -> Vec<&mut BatchNorm> {
        vec![&mut self.bn1, &mut self.bn2]
    }
}

impl MlpGenIds {
    pub fn forward(&self, g: &mut Graph, z: NodeId, labels: &[u32], mode: Mode) -> GenOutputs {
        let mut bn_stats = Vec::new();
        let emb = self.embed.forward(g, labels, self.num_classes);
        let h = g.concat_cols(z, emb);
        let h = self.fc1.forward(g, h);
        let h = match mode {
            Mode::Train => {
                let (out, s) = self.bn1.forward_train(g, h);
                bn_stats.push(s);
                out
            }
            Mode::Eval => self.bn1.forward_eval(g, h),
        };
        let h = g.relu(h);
        let h = self.fc2.forward(g, h);
        let h = match mode {
            Mode::Train => {
                let (out, s) = self.bn2.forward_train(g, h);
                bn_stats.push(s);
                out
            }
            Mode::Eval => self.bn2.forward_eval(g, h),
        };
        let h = g.relu(h);
        let x = self.out.forward(g, h);
        GenOutputs { x, bn_stats }
    }

    pub fn param_ids(&self) -> Vec<NodeId> {
        let mut p = self.embed.param_ids();
        p.extend(self.fc1.param_ids());
        p.extend(self.bn1.param_ids());
        p.extend(self.fc2.param_ids());
        p.extend(self.bn2.param_ids());
        p.extend(self.out.param_ids());
        p
    }
}

/// Conditional image generator: a linear projection to a `base x base` map
/// followed by two stride-2 transposed convolutions and a sigmoid output.
#[derive(Clone)]
pub struct ConvGen {
    pub embed: Embedding,
    pub fc: Linear,
    pub bn0: BatchNorm,
    pub up1: ConvTranspose2d,
    pub bn1: BatchNorm,
    pub up2: ConvTranspose2d,
    pub bn2: BatchNorm,
    pub out: Conv2d,
    pub num_classes: usize,
    pub base: usize,
    pub c0: usize,
}

pub struct ConvGenIds {
    embed: EmbeddingIds,
    fc: LinearIds,
    bn0: BatchNormIds,
    up1: ConvTranspose2dIds,
    bn1: BatchNormIds,
    up2: ConvTranspose2dIds,
    bn2: BatchNormIds,
    out: Conv2dIds,
    num_classes: usize,
    base: usize,
    c0: usize,
}

impl ConvGen {
    pub fn new<R: Rng>(
        rng: &mut R,
        noise_dim: usize,
        embed_dim: usize,
        num_classes: usize,
        out_shape: [usize; 3],
    ) -> Self {
        let [out_ch, h, w] = out_shape;
        assert!(
            h == w && h % 4 == 0,
            "conv generator needs square images divisible by 4, got {h}x{w}"
        );
        let base = h / 4;
        let (c0, c1, c2) = (128, 64, 32);
        ConvGen {
            embed: Embedding::new(rng, num_classes, embed_dim),
            fc: Linear::new(rng, noise_dim + embed_dim, c0 * base * base),
            bn0: BatchNorm::new(c0),
            up1: ConvTranspose2d::new(rng, c0, c1, 4, 2, 1),
            bn1: BatchNorm::new(c1),
            up2: ConvTranspose2d::new(rng, c1, c2, 4, 2, 1),
            bn2: BatchNorm::new(c2),
            out: Conv2d::new(rng, c2, out_ch, 3, 1, 1),
            num_classes,
            base,
            c0,
        }
    }

    pub fn register(&self, g: &mut Graph, trainable: bool) -> ConvGenIds {
        ConvGenIds {
            embed: self.embed.register(g, trainable),
            fc: self.fc.register(g, trainable),
            bn0: self.bn0.register(g, trainable),
            up1: self.up1.register(g, trainable),
            bn1: self.bn1.register(g, trainable),
            up2: self.up2.register(g, trainable),
            bn2: self.bn2.register(g, trainable),
            out: self.out.register(g, trainable),
            num_classes: self.num_classes,
            base: self.base,
            c0: self.c0,
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut ArrayD<f64>> {
        let mut p = self.embed.params_mut();
        p.extend(self.fc.params_mut());
        p.extend(self.bn0.params_mut());
        p.extend(self.up1.params_mut());
        p.extend(self.bn1.params_mut());
        p.extend(self.up2.params_mut());
        p.extend(self.bn2.params_mut());
        p.extend(self.out.params_mut());
        p
    }

    pub fn bn_layers_mut(&mut self) -> Vec<&mut BatchNorm> {
        vec![&mut self.bn0, &mut self.bn1, &mut self.bn2]
    }
}

impl ConvGenIds {
    pub fn forward(&self, g: &mut Graph, z: NodeId, labels: &[u32], mode: Mode) -> GenOutputs {
        let mut bn_stats = Vec::new();
        let mut bn = |g: &mut Graph, ids: &BatchNormIds, h: NodeId| -> NodeId {
            match mode {
                Mode::Train => {
                    let (out, s) = ids.forward_train(g, h);
                    bn_stats.push(s);
                    out
                }
                Mode::Eval => ids.forward_eval(g, h),
            }
        };
        let n = labels.len();
        let emb = self.embed.forward(g, labels, self.num_classes);
        let h = g.concat_cols(z, emb);
        let h = self.fc.forward(g, h);
        let h = g.reshape(h, &[n, self.c0, self.base, self.base]);
        let h = bn(g, &self.bn0, h);
        let h = g.relu(h);
        let h = self.up1.forward(g, h);
        let h = bn(g, &self.bn1, h);
        let h = g.relu(h);
        let h = self.up2.forward(g, h);
        let h = bn(g, &self.bn2, h);
        let h = g.relu(h);
        let h = self.out.forward(g, h);
        let x = g.sigmoid(h);
        GenOutputs { x, bn_stats }
    }

    pub fn param_ids(&self) -> Vec<NodeId> {
        let mut p = self.embed.param_ids();
        p.extend(self.fc.param_ids());
        p.extend(self.bn0.param_ids());
        p.extend(self.up1.param_ids());
        p.extend(self.bn1.param_ids());
        p.extend(self.up2.param_ids());
        p.extend(self.bn2.param_ids());
        p.extend(self.out.param_ids());
        p
    }
}

#[derive(Clone)]
pub enum GeneratorNet {
    Mlp(MlpGen),
    Conv(ConvGen),
}

pub enum GeneratorNetIds {
    Mlp(MlpGenIds),
    Conv(ConvGenIds),
}

impl GeneratorNet {
    pub fn register(&self, g: &mut Graph, trainable: bool) -> GeneratorNetIds {
        match self {
            GeneratorNet::Mlp(n) => GeneratorNetIds::Mlp(n.register(g, trainable)),
            GeneratorNet::Conv(n) => GeneratorNetIds::Conv(n.register(g, trainable)),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut ArrayD<f64>> {
        match self {
            GeneratorNet::Mlp(n) => n.params_mut(),
            GeneratorNet::Conv(n) => n.params_mut(),
        }
    }

    pub fn bn_layers_mut(&mut self) -> Vec<&mut BatchNorm> {
        match self {
            GeneratorNet::Mlp(n) => n.bn_layers_mut(),
            GeneratorNet::Conv(n) => n.bn_layers_mut(),
        }
    }
}

impl GeneratorNetIds {
    pub fn forward(&self, g: &mut Graph, z: NodeId, labels: &[u32], mode: Mode) -> GenOutputs {
        match self {
            GeneratorNetIds::Mlp(n) => n.forward(g, z, labels, mode),
            GeneratorNetIds::Conv(n) => n.forward(g, z, labels, mode),
        }
    }

    pub fn param_ids(&self) -> Vec<NodeId> {
        match self {
            GeneratorNetIds::Mlp(n) => n.param_ids(),
            GeneratorNetIds::Conv(n) => n.param_ids(),
        }
    }
}
