//! Training a conditional generator against a frozen classifier, with no
//! access to any real data.
//!
//! Five losses shape the generator output: cross-entropy against the
//! conditioning label, stability of the classifier output under
//! augmentations, an anti-mode-collapse diversity term over each label group,
//! matching of per-layer batch statistics to the classifier's stored BN
//! running statistics, and total variation. Only the generator's parameters
//! receive updates; the classifier enters the graph as constants.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::{AugmentationSet, ClassifierModel};
use crate::nn::{Adam, ConvGen, GeneratorNet, GenOutputs, MlpGen, Mode, Optimizer};
use crate::util;
use ndarray::{Array2, ArrayD, ArrayViewD, IxDyn};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Cap applied to the entropy loss when a label receives zero probability.
pub const ENTROPY_LOSS_CAP: f64 = 1e9;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LossWeights {
    pub bn: f64,
    pub ent: f64,
    pub aug: f64,
    pub div: f64,
    pub tv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            bn: 10.0,
            ent: 1.0,
            aug: 0.03,
            div: 1.0,
            tv: 3.0,
        }
    }
}

impl LossWeights {
    pub fn all_zero(&self) -> bool {
        self.bn == 0.0 && self.ent == 0.0 && self.aug == 0.0 && self.div == 0.0 && self.tv == 0.0
    }

    fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("bn", self.bn),
            ("ent", self.ent),
            ("aug", self.aug),
            ("div", self.div),
            ("tv", self.tv),
        ] {
            if !(w >= 0.0) {
                return Err(Error::invalid(format!("loss weight {name} = {w} < 0")));
            }
        }
        Ok(())
    }
}

/// Feature space used by the diversity loss.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureTap {
    /// The frozen classifier's feature extractor (default; keeps the whole
    /// pipeline data-free).
    #[default]
    ClassifierFeatures,
    /// Flattened pixels.
    RawPixels,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct InversionConfig {
    pub weights: LossWeights,
    pub learning_rate: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub noise_dim: usize,
    pub embed_dim: usize,
    pub seed: u64,
    pub feature_tap: FeatureTap,
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig {
            weights: LossWeights::default(),
            learning_rate: 0.002,
            betas: (0.5, 0.999),
            weight_decay: 2e-4,
            steps: 1000,
            batch_size: 64,
            noise_dim: 64,
            embed_dim: 16,
            seed: 0,
            feature_tap: FeatureTap::ClassifierFeatures,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size < 2 {
            return Err(Error::invalid(
                "inversion batch size must be at least 2 (the diversity loss needs pairs)",
            ));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::invalid("learning rate must be positive"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- generator

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GeneratorArch {
    pub kind: GenKind,
    pub noise_dim: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub output_shape: Vec<usize>,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "arch", rename_all = "kebab-case")]
pub enum GenKind {
    Mlp { hidden: usize },
    Conv,
}

/// A conditional generator `G(z, y)`. Outputs match the classifier input
/// shape and are deterministic per `(parameters, z, y)` — inference runs the
/// BN layers on their recalibrated running statistics.
#[derive(Clone)]
pub struct ConditionalGenerator {
    pub(crate) net: GeneratorNet,
    pub arch: GeneratorArch,
}

impl ConditionalGenerator {
    pub fn init(arch: GeneratorArch) -> Result<Self> {
        let mut rng = util::rng_from(util::derive_seed(arch.seed, "generator-init"));
        let net = match &arch.kind {
            GenKind::Mlp { hidden } => {
                if arch.output_shape.len() != 1 {
                    return Err(Error::shape("MLP generator expects a flat output"));
                }
                GeneratorNet::Mlp(MlpGen::new(
                    &mut rng,
                    arch.noise_dim,
                    arch.embed_dim,
                    *hidden,
                    arch.num_classes,
                    arch.output_shape[0],
                ))
            }
            GenKind::Conv => {
                if arch.output_shape.len() != 3 {
                    return Err(Error::shape("conv generator expects [C, H, W] output"));
                }
                GeneratorNet::Conv(ConvGen::new(
                    &mut rng,
                    arch.noise_dim,
                    arch.embed_dim,
                    arch.num_classes,
                    [
                        arch.output_shape[0],
                        arch.output_shape[1],
                        arch.output_shape[2],
                    ],
                ))
            }
        };
        Ok(ConditionalGenerator { net, arch })
    }

    pub fn default_arch(classifier: &ClassifierModel, cfg: &InversionConfig) -> GeneratorArch {
        let kind = if classifier.input_shape().len() == 3 {
            GenKind::Conv
        } else {
            GenKind::Mlp { hidden: 64 }
        };
        GeneratorArch {
            kind,
            noise_dim: cfg.noise_dim,
            embed_dim: cfg.embed_dim,
            num_classes: classifier.num_classes(),
            output_shape: classifier.input_shape().to_vec(),
            seed: cfg.seed,
        }
    }

    pub fn noise_dim(&self) -> usize {
        self.arch.noise_dim
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    /// Generate a batch from explicit latents and labels (inference mode).
    pub fn generate(&self, zs: &Array2<f64>, labels: &[u32]) -> Result<ArrayD<f64>> {
        if zs.nrows() != labels.len() {
            return Err(Error::invalid("latent count differs from label count"));
        }
        if zs.ncols() != self.arch.noise_dim {
            return Err(Error::shape(format!(
                "latent width {} but generator expects {}",
                zs.ncols(),
                self.arch.noise_dim
            )));
        }
        let mut g = Graph::new();
        let ids = self.net.register(&mut g, false);
        let z = g.constant(zs.clone().into_dyn());
        let out = ids.forward(&mut g, z, labels, Mode::Eval);
        Ok(g.value(out.x).clone())
    }

    pub fn checksum(&mut self) -> String {
        use sha2::Digest;
        let mut hasher = sha2::Sha256::new();
        for p in self.net.params_mut() {
            for &v in p.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        for bn in self.net.bn_layers_mut() {
            for &v in bn.running_mean.iter().chain(bn.running_var.iter()) {
                hasher.update(v.to_le_bytes());
            }
        }
        crate::model::hex_string(&hasher.finalize())
    }

    pub fn save(&mut self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut f = std::fs::File::create(dir.join("arch.json"))?;
        serde_json::to_writer_pretty(&mut f, &self.arch)?;
        f.write_all(b"\n")?;
        crate::model::checkpoint_write_weights(&self.net.params_mut(), &dir.join("weights.bin"))?;
        crate::model::checkpoint_write_bn(self.net.bn_layers_mut(), &dir.join("bn_stats.json"))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let arch_path = dir.join("arch.json");
        if !arch_path.exists() {
            return Err(Error::MissingArtifact(arch_path));
        }
        let arch: GeneratorArch = serde_json::from_reader(std::fs::File::open(arch_path)?)?;
        let mut gen = ConditionalGenerator::init(arch)?;
        crate::model::checkpoint_read_weights(&mut gen.net.params_mut(), &dir.join("weights.bin"))?;
        crate::model::checkpoint_read_bn(gen.net.bn_layers_mut(), &dir.join("bn_stats.json"))?;
        Ok(gen)
    }
}

// ---------------------------------------------------------------- pure losses

/// Sum of cross-entropies `-ln p[label]` over the mini-batch. Zero probability
/// at a true label clamps the term at [`ENTROPY_LOSS_CAP`]; the flag reports
/// whether clamping happened.
pub fn entropy_loss(probs: &Array2<f64>, labels: &[u32]) -> Result<(f64, bool)> {
    if probs.nrows() != labels.len() || labels.is_empty() {
        return Err(Error::invalid(format!(
            "{} probability rows vs {} labels",
            probs.nrows(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    let mut clamped = false;
    for (row, &y) in probs.rows().into_iter().zip(labels) {
        let p = row[y as usize];
        if p > 0.0 {
            total += -p.ln();
        } else {
            total += ENTROPY_LOSS_CAP;
            clamped = true;
        }
    }
    if total > ENTROPY_LOSS_CAP {
        total = ENTROPY_LOSS_CAP;
        clamped = true;
    }
    Ok((total, clamped))
}

/// Sum over the batch and over Φ of the squared L2 distance between the
/// classifier's probability outputs on clean and transformed inputs.
pub fn augmentation_loss(
    classifier: &ClassifierModel,
    batch: &ArrayViewD<f64>,
    aug: &AugmentationSet,
    seed: u64,
) -> f64 {
    let clean = classifier.predict_proba_batch(batch);
    let mut rng = util::rng_from(util::derive_seed(seed, "aug-loss"));
    let mut total = 0.0;
    for t in &aug.transforms {
        let xt = t.apply_array(batch, &mut rng);
        let pt = classifier.predict_proba_batch(&xt.view());
        total += (&clean - &pt).mapv(|d| d * d).sum();
    }
    total
}

/// Diversity penalty of Eq.-4 form: per conditioning label present in the
/// batch, `exp(-Σ over ordered pairs of ||z1 - z2||² · ||f(x1) - f(x2)||₁)`,
/// summed over the labels. A label group with fewer than two members
/// contributes `exp(0) = 1`.
pub fn diversity_loss(
    noises: &Array2<f64>,
    images: &ArrayViewD<f64>,
    labels: &[u32],
    classifier: &ClassifierModel,
    tap: FeatureTap,
) -> f64 {
    let features = match tap {
        FeatureTap::ClassifierFeatures => classifier.extract_features_batch(images),
        FeatureTap::RawPixels => flatten_rows(images),
    };
    diversity_from_features(noises, &features, labels)
}

pub(crate) fn diversity_from_features(
    noises: &Array2<f64>,
    features: &Array2<f64>,
    labels: &[u32],
) -> f64 {
    let mut groups: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
    for (i, &y) in labels.iter().enumerate() {
        groups.entry(y).or_default().push(i);
    }
    let mut total = 0.0;
    for members in groups.values() {
        let mut s = 0.0;
        for &i in members {
            for &j in members {
                if i == j {
                    continue;
                }
                let zdist: f64 = noises
                    .row(i)
                    .iter()
                    .zip(noises.row(j).iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                let fdist: f64 = features
                    .row(i)
                    .iter()
                    .zip(features.row(j).iter())
                    .map(|(a, b)| (a - b).abs())
                    .sum();
                s += zdist * fdist;
            }
        }
        total += (-s).exp();
    }
    total
}

fn flatten_rows(x: &ArrayViewD<f64>) -> Array2<f64> {
    let n = x.shape()[0];
    let cols = x.len() / n;
    x.to_owned()
        .into_shape_with_order((n, cols))
        .unwrap()
}

/// Batch-statistics matching: forward the batch through the frozen
/// classifier, take the per-channel mean and biased variance of each BN
/// layer's input, and sum the squared distances to the stored running
/// statistics.
pub fn bn_loss(classifier: &ClassifierModel, batch: &ArrayViewD<f64>) -> Result<f64> {
    let running = classifier.bn_statistics()?;
    if batch.shape()[0] < 2 {
        return Err(Error::invalid("bn_loss needs a batch of at least 2"));
    }
    let mut g = Graph::new();
    let ids = classifier.net.register(&mut g, false);
    let x = g.constant(batch.to_owned());
    let out = ids.forward(&mut g, x, Mode::Eval);
    let mut total = 0.0;
    for (&pre, (rm, rv)) in out.pre_bn.iter().zip(&running) {
        let v = g.value(pre);
        let (mean, var) = channel_moments(v);
        for ((m, s2), (m0, v0)) in mean.iter().zip(&var).zip(rm.iter().zip(rv)) {
            total += (m - m0) * (m - m0) + (s2 - v0) * (s2 - v0);
        }
    }
    Ok(total)
}

/// Per-channel mean and biased variance over all non-channel axes.
pub(crate) fn channel_moments(v: &ArrayD<f64>) -> (Vec<f64>, Vec<f64>) {
    let c = v.shape()[1];
    let denom = (v.len() / c) as f64;
    let mut mean = vec![0.0; c];
    let mut mean_sq = vec![0.0; c];
    for (k, lane) in v.axis_iter(ndarray::Axis(1)).enumerate() {
        let s: f64 = lane.sum();
        let s2: f64 = lane.iter().map(|&x| x * x).sum();
        mean[k] = s / denom;
        mean_sq[k] = s2 / denom;
    }
    let var = mean_sq
        .iter()
        .zip(&mean)
        .map(|(m2, m)| m2 - m * m)
        .collect();
    (mean, var)
}

/// Total variation: squared differences over unordered 4-neighbor pixel
/// pairs, summed over batch and channels. Zero for non-spatial input.
pub fn tv_loss(batch: &ArrayViewD<f64>) -> f64 {
    let mut g = Graph::new();
    let x = g.constant(batch.to_owned());
    let t = g.tv_loss(x);
    g.scalar_value(t)
}

// ---------------------------------------------------------------- training

/// Raw per-loss values at one step; `total` is the weighted sum.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LossLogRow {
    pub step: usize,
    pub total: f64,
    pub bn: f64,
    pub ent: f64,
    pub aug: f64,
    pub div: f64,
    pub tv: f64,
}

pub fn write_loss_log(rows: &[LossLogRow], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,total,bn,ent,aug,div,tv")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            r.step, r.total, r.bn, r.ent, r.aug, r.div, r.tv
        )?;
    }
    f.flush()?;
    Ok(())
}

struct LossNodes {
    total: NodeId,
    bn: NodeId,
    ent: NodeId,
    aug: NodeId,
    div: NodeId,
    tv: NodeId,
}

/// Build all five losses on top of a generated batch node. The classifier is
/// already registered as constants (`clf_ids`); gradients only flow back into
/// the generator through the batch node `x`.
fn build_losses<R: rand::Rng>(
    g: &mut Graph,
    classifier: &ClassifierModel,
    clf_ids: &crate::nn::ClassifierNetIds,
    x: NodeId,
    zs: &Array2<f64>,
    labels: &[u32],
    aug: &AugmentationSet,
    weights: &LossWeights,
    rng: &mut R,
) -> LossNodes {
    let main = clf_ids.forward(g, x, Mode::Eval);
    let probs_main = g.softmax(main.logits);

    // entropy loss: summed CE against the conditioning labels
    let ls = g.log_softmax(main.logits);
    let picked = g.pick_per_row(ls, labels.iter().map(|&y| y as usize).collect());
    let ent_sum = g.sum(picked);
    let ent = g.mul_scalar(ent_sum, -1.0);

    // augmentation loss: output stability under each transform
    let mut aug_node = g.constant(ndarray::ArrayD::zeros(IxDyn(&[])));
    for t in &aug.transforms {
        let xt = t.apply_node(g, x, rng);
        let out_t = clf_ids.forward(g, xt, Mode::Eval);
        let probs_t = g.softmax(out_t.logits);
        let d = g.sub(probs_main, probs_t);
        let sq = g.mul(d, d);
        let s = g.sum(sq);
        aug_node = g.add(aug_node, s);
    }

    // diversity loss over label groups
    let mut groups: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
    for (i, &y) in labels.iter().enumerate() {
        groups.entry(y).or_default().push(i);
    }
    let feats = main.features;
    let mut div_node = g.constant(ndarray::ArrayD::zeros(IxDyn(&[])));
    for members in groups.values() {
        let mut group_sum: Option<NodeId> = None;
        for &i in members {
            for &j in members {
                if i == j {
                    continue;
                }
                let zdist: f64 = zs
                    .row(i)
                    .iter()
                    .zip(zs.row(j).iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                let fi = g.select_row(feats, i);
                let fj = g.select_row(feats, j);
                let d = g.sub(fi, fj);
                let a = g.abs(d);
                let l1 = g.sum(a);
                let term = g.mul_scalar(l1, zdist);
                group_sum = Some(match group_sum {
                    Some(acc) => g.add(acc, term),
                    None => term,
                });
            }
        }
        let contrib = match group_sum {
            Some(s) => {
                let neg = g.mul_scalar(s, -1.0);
                g.exp(neg)
            }
            // singleton group: exp(0) = 1
            None => g.constant(ndarray::ArrayD::from_elem(IxDyn(&[]), 1.0)),
        };
        div_node = g.add(div_node, contrib);
    }

    // batch-norm statistics matching
    let running = classifier.bn_statistics().expect("classifier without BN");
    let mut bn_node = g.constant(ndarray::ArrayD::zeros(IxDyn(&[])));
    for (&pre, (rm, rv)) in main.pre_bn.iter().zip(&running) {
        let mean = g.channel_mean(pre);
        let x2 = g.mul(pre, pre);
        let mean_sq = g.channel_mean(x2);
        let mean2 = g.mul(mean, mean);
        let var = g.sub(mean_sq, mean2);
        let rm_c = g.constant(ndarray::ArrayD::from_shape_vec(IxDyn(&[rm.len()]), rm.clone()).unwrap());
        let rv_c = g.constant(ndarray::ArrayD::from_shape_vec(IxDyn(&[rv.len()]), rv.clone()).unwrap());
        let dm = g.sub(mean, rm_c);
        let dv = g.sub(var, rv_c);
        let dm2 = g.mul(dm, dm);
        let dv2 = g.mul(dv, dv);
        let sm = g.sum(dm2);
        let sv = g.sum(dv2);
        let layer = g.add(sm, sv);
        bn_node = g.add(bn_node, layer);
    }

    let tv = g.tv_loss(x);

    // weighted sum
    let mut total = g.constant(ndarray::ArrayD::zeros(IxDyn(&[])));
    for (node, w) in [
        (bn_node, weights.bn),
        (ent, weights.ent),
        (aug_node, weights.aug),
        (div_node, weights.div),
        (tv, weights.tv),
    ] {
        if w != 0.0 {
            let scaled = g.mul_scalar(node, w);
            total = g.add(total, scaled);
        }
    }

    LossNodes {
        total,
        bn: bn_node,
        ent,
        aug: aug_node,
        div: div_node,
        tv,
    }
}

/// Train a generator by model inversion. The classifier is frozen: its
/// parameters and BN statistics are bitwise unchanged afterwards. Returns the
/// trained generator and the per-step loss log.
pub fn train_generator(
    classifier: &ClassifierModel,
    aug: &AugmentationSet,
    cfg: &InversionConfig,
) -> Result<(ConditionalGenerator, Vec<LossLogRow>)> {
    cfg.validate()?;
    classifier.bn_statistics()?; // capability check up front
    let arch = ConditionalGenerator::default_arch(classifier, cfg);
    let mut gen = ConditionalGenerator::init(arch)?;
    if cfg.weights.all_zero() {
        // null objective: nothing to optimize
        return Ok((gen, Vec::new()));
    }

    let mut opt = Adam::new(cfg.learning_rate, cfg.betas.0, cfg.betas.1, cfg.weight_decay);
    let mut rng = util::rng_from(util::derive_seed(cfg.seed, "invert"));
    let k = classifier.num_classes();
    let mut log = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let (zs, labels) = sample_batch(&mut rng, cfg.batch_size, cfg.noise_dim, k);
        let mut g = Graph::new();
        let clf_ids = classifier.net.register(&mut g, false);
        let gen_ids = gen.net.register(&mut g, true);
        let z = g.param(zs.clone().into_dyn());
        let out = gen_ids.forward(&mut g, z, &labels, Mode::Train);
        let losses = build_losses(
            &mut g,
            classifier,
            &clf_ids,
            out.x,
            &zs,
            &labels,
            aug,
            &cfg.weights,
            &mut rng,
        );
        let row = LossLogRow {
            step,
            total: g.scalar_value(losses.total),
            bn: g.scalar_value(losses.bn),
            ent: g.scalar_value(losses.ent),
            aug: g.scalar_value(losses.aug),
            div: g.scalar_value(losses.div),
            tv: g.scalar_value(losses.tv),
        };
        if !row.total.is_finite() {
            return Err(Error::Training {
                unit: "step",
                index: step,
                detail: format!(
                    "total {} (bn {} ent {} aug {} div {} tv {})",
                    row.total, row.bn, row.ent, row.aug, row.div, row.tv
                ),
            });
        }
        g.backward(losses.total);

        let ids_flat = gen_ids.param_ids();
        let grads: Vec<Option<&ndarray::ArrayD<f64>>> =
            ids_flat.iter().map(|&id| g.grad(id)).collect();
        let mut params = gen.net.params_mut();
        opt.step(&mut params, &grads);

        update_gen_bn(&mut gen, &g, &out);
        log.push(row);
    }

    recalibrate_bn(&mut gen, cfg, k)?;
    Ok((gen, log))
}

fn sample_batch<R: rand::Rng>(
    rng: &mut R,
    m: usize,
    noise_dim: usize,
    k: usize,
) -> (Array2<f64>, Vec<u32>) {
    let mut zs = Array2::<f64>::zeros((m, noise_dim));
    for v in zs.iter_mut() {
        *v = util::sample_normal(rng);
    }
    let labels: Vec<u32> = (0..m).map(|_| rng.gen_range(0..k) as u32).collect();
    (zs, labels)
}

fn update_gen_bn(gen: &mut ConditionalGenerator, g: &Graph, out: &GenOutputs) {
    let stats: Vec<(ArrayD<f64>, ArrayD<f64>)> = out
        .bn_stats
        .iter()
        .map(|s| (g.value(s.mean).clone(), g.value(s.var).clone()))
        .collect();
    for (bn, (mean, var)) in gen.net.bn_layers_mut().into_iter().zip(&stats) {
        // elems-per-channel for the unbias factor is immaterial at these sizes
        bn.update_running(mean, var, 2);
    }
}

/// Replace the generator's BN running statistics with exact averages over a
/// fixed set of fresh batches, so that inference-mode generation is both
/// deterministic and faithful to training behavior.
fn recalibrate_bn(gen: &mut ConditionalGenerator, cfg: &InversionConfig, k: usize) -> Result<()> {
    const RECAL_BATCHES: usize = 32;
    let mut rng = util::rng_from(util::derive_seed(cfg.seed, "invert-bn-recal"));
    let mut acc_mean: Vec<ArrayD<f64>> = Vec::new();
    let mut acc_var: Vec<ArrayD<f64>> = Vec::new();
    for _ in 0..RECAL_BATCHES {
        let (zs, labels) = sample_batch(&mut rng, cfg.batch_size, cfg.noise_dim, k);
        let mut g = Graph::new();
        let ids = gen.net.register(&mut g, false);
        let z = g.constant(zs.into_dyn());
        let out = ids.forward(&mut g, z, &labels, Mode::Train);
        for (i, s) in out.bn_stats.iter().enumerate() {
            let m = g.value(s.mean).clone();
            let v = g.value(s.var).clone();
            if acc_mean.len() <= i {
                acc_mean.push(m);
                acc_var.push(v);
            } else {
                acc_mean[i] += &m;
                acc_var[i] += &v;
            }
        }
    }
    for (bn, (m, v)) in gen
        .net
        .bn_layers_mut()
        .into_iter()
        .zip(acc_mean.iter().zip(&acc_var))
    {
        bn.running_mean = m / RECAL_BATCHES as f64;
        bn.running_var = v / RECAL_BATCHES as f64;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_moons;
    use crate::model::{train_classifier, TrainConfig};

    fn small_classifier() -> (ClassifierModel, AugmentationSet) {
        let d = make_moons(60, 0.1, 5).unwrap();
        let aug = AugmentationSet::default_for_shape(d.input_shape());
        let cfg = TrainConfig {
            epochs: 30,
            seed: 5,
            ..TrainConfig::default()
        };
        (train_classifier(&d, &aug, &cfg).unwrap(), aug)
    }

    #[test]
    fn entropy_loss_values() {
        // one-hot at each label -> 0
        let probs = ndarray::array![[1.0, 0.0], [0.0, 1.0]];
        let (v, clamped) = entropy_loss(&probs, &[0, 1]).unwrap();
        assert_eq!(v, 0.0);
        assert!(!clamped);
        // single uniform vector over 10 -> ln 10
        let probs = Array2::from_elem((1, 10), 0.1);
        let (v, _) = entropy_loss(&probs, &[3]).unwrap();
        assert!((v - 10f64.ln()).abs() < 1e-12);
        // batch of 2: ln 2 + ln(4/3)
        let probs = ndarray::array![[0.5, 0.5], [0.25, 0.75]];
        let (v, _) = entropy_loss(&probs, &[0, 1]).unwrap();
        let expect = 2f64.ln() + (4.0f64 / 3.0).ln();
        assert!((v - expect).abs() < 1e-12, "{v} vs {expect}");
        // zero probability at the label clamps with a warning
        let probs = ndarray::array![[1.0, 0.0]];
        let (v, clamped) = entropy_loss(&probs, &[1]).unwrap();
        assert_eq!(v, ENTROPY_LOSS_CAP);
        assert!(clamped);
        // length mismatch
        assert!(entropy_loss(&probs, &[0, 1]).is_err());
    }

    #[test]
    fn tv_loss_analytic_values() {
        let x = ArrayD::from_shape_vec(IxDyn(&[1, 1, 1, 2]), vec![0.0, 1.0]).unwrap();
        assert_eq!(tv_loss(&x.view()), 1.0);
        let x = ArrayD::from_shape_vec(IxDyn(&[1, 1, 2, 2]), vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(tv_loss(&x.view()), 4.0);
        let flat = ArrayD::from_elem(IxDyn(&[4, 2]), 0.7);
        assert_eq!(tv_loss(&flat.view()), 0.0);
        let constant = ArrayD::from_elem(IxDyn(&[2, 1, 5, 5]), 0.3);
        assert_eq!(tv_loss(&constant.view()), 0.0);
    }

    #[test]
    fn diversity_loss_analytic_values() {
        // group of 2: ||z1-z2||^2 = 1, ||f1-f2||_1 = 2, ordered pairs both ways
        let noises = ndarray::array![[0.0], [1.0]];
        let feats = ndarray::array![[1.0, 0.0], [0.0, 1.0]];
        let v = diversity_from_features(&noises, &feats, &[3, 3]);
        assert!((v - (-4.0f64).exp()).abs() < 1e-12, "{v}");
        // identical features collapse to exp(0) = 1
        let feats = ndarray::array![[1.0, 0.0], [1.0, 0.0]];
        let v = diversity_from_features(&noises, &feats, &[3, 3]);
        assert_eq!(v, 1.0);
        // two singleton groups contribute 1 each
        let v = diversity_from_features(&noises, &feats, &[0, 1]);
        assert_eq!(v, 2.0);
    }

    #[test]
    fn bn_loss_single_term() {
        // one feature off by exactly 1 in mean, variance matched, against a
        // fresh MLP whose first BN layer sees the raw linear output
        let (clf, _) = small_classifier();
        // construct a batch and verify against an independent recomputation
        let d = make_moons(16, 0.2, 9).unwrap();
        let idx: Vec<usize> = (0..16).collect();
        let batch = d.batch(&idx);
        let got = bn_loss(&clf, &batch.view()).unwrap();

        // independent oracle: recompute stats from the classifier trace
        let mut g = Graph::new();
        let ids = clf.net.register(&mut g, false);
        let x = g.constant(batch.clone());
        let out = ids.forward(&mut g, x, Mode::Eval);
        let running = clf.bn_statistics().unwrap();
        let mut expect = 0.0;
        for (&pre, (rm, rv)) in out.pre_bn.iter().zip(&running) {
            let v = g.value(pre);
            let n = v.shape()[0];
            let c = v.shape()[1];
            for ch in 0..c {
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in 0..n {
                    let val = v[IxDyn(&[i, ch])];
                    s += val;
                    s2 += val * val;
                }
                let m = s / n as f64;
                let var = s2 / n as f64 - m * m;
                expect += (m - rm[ch]) * (m - rm[ch]) + (var - rv[ch]) * (var - rv[ch]);
            }
        }
        assert!((got - expect).abs() < 1e-5, "{got} vs {expect}");
    }

    #[test]
    fn augmentation_loss_zero_for_identity() {
        let (clf, _) = small_classifier();
        let d = make_moons(8, 0.1, 2).unwrap();
        let idx: Vec<usize> = (0..8).collect();
        let batch = d.batch(&idx);
        let id_only = AugmentationSet::new(vec![crate::model::Transform::Identity]);
        assert_eq!(augmentation_loss(&clf, &batch.view(), &id_only, 0), 0.0);
        // analytic: 1 image, 1 transform, outputs [0.6,0.4] vs [0.5,0.5]
        let a = ndarray::array![[0.6, 0.4]];
        let b = ndarray::array![[0.5, 0.5]];
        let v = (&a - &b).mapv(|d: f64| d * d).sum();
        assert!((v - 0.02).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_leave_generator_unchanged() {
        let (clf, aug) = small_classifier();
        let cfg = InversionConfig {
            weights: LossWeights {
                bn: 0.0,
                ent: 0.0,
                aug: 0.0,
                div: 0.0,
                tv: 0.0,
            },
            steps: 5,
            batch_size: 8,
            seed: 1,
            ..InversionConfig::default()
        };
        let (mut gen, log) = train_generator(&clf, &aug, &cfg).unwrap();
        let mut fresh =
            ConditionalGenerator::init(ConditionalGenerator::default_arch(&clf, &cfg)).unwrap();
        assert_eq!(gen.checksum(), fresh.checksum());
        assert!(log.is_empty());
    }

    #[test]
    fn generator_training_freezes_classifier_and_is_deterministic() {
        let (clf, aug) = small_classifier();
        let mut clf = clf;
        let before = clf.checksum();
        let cfg = InversionConfig {
            steps: 12,
            batch_size: 16,
            noise_dim: 8,
            embed_dim: 4,
            seed: 3,
            ..InversionConfig::default()
        };
        let (mut gen1, log1) = train_generator(&clf, &aug, &cfg).unwrap();
        assert_eq!(clf.checksum(), before, "classifier must stay frozen");
        let (mut gen2, log2) = train_generator(&clf, &aug, &cfg).unwrap();
        assert_eq!(gen1.checksum(), gen2.checksum());
        assert_eq!(log1.len(), log2.len());
        for (a, b) in log1.iter().zip(&log2) {
            assert_eq!(a.total, b.total);
        }
        // losses are non-negative where they should be
        for row in &log1 {
            assert!(row.bn >= 0.0 && row.aug >= 0.0 && row.tv >= 0.0 && row.div >= 0.0);
        }
    }

    #[test]
    fn generation_is_deterministic_per_latent() {
        let (clf, aug) = small_classifier();
        let cfg = InversionConfig {
            steps: 10,
            batch_size: 16,
            noise_dim: 8,
            embed_dim: 4,
            seed: 4,
            ..InversionConfig::default()
        };
        let (gen, _) = train_generator(&clf, &aug, &cfg).unwrap();
        let mut zs = Array2::<f64>::zeros((3, 8));
        zs[[0, 0]] = 1.0;
        zs[[2, 3]] = -0.5;
        let labels = [0u32, 1, 0];
        let a = gen.generate(&zs, &labels).unwrap();
        let b = gen.generate(&zs, &labels).unwrap();
        assert_eq!(a, b);
        // single-row generation matches the batch row (inference-mode BN)
        let single = gen
            .generate(&zs.slice(ndarray::s![0..1, ..]).to_owned(), &[0])
            .unwrap();
        let row0 = a.index_axis(ndarray::Axis(0), 0).to_owned();
        let srow = single.index_axis(ndarray::Axis(0), 0).to_owned();
        for (p, q) in row0.iter().zip(srow.iter()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn weighted_sum_is_linear_in_weights() {
        let (clf, aug) = small_classifier();
        let base = InversionConfig {
            steps: 1,
            batch_size: 8,
            noise_dim: 8,
            embed_dim: 4,
            seed: 6,
            learning_rate: 1e-9, // keeps the single step from moving parameters
            ..InversionConfig::default()
        };
        let (_, log1) = train_generator(&clf, &aug, &base).unwrap();
        let mut doubled = base.clone();
        doubled.weights.tv *= 2.0;
        let (_, log2) = train_generator(&clf, &aug, &doubled).unwrap();
        // same seed, same first batch: raw tv identical, totals differ by w_tv * tv
        assert_eq!(log1[0].tv, log2[0].tv);
        let delta = log2[0].total - log1[0].total;
        let expect = base.weights.tv * log1[0].tv;
        assert!(
            (delta - expect).abs() < 1e-9,
            "delta {delta}, expected {expect}"
        );
    }
}
