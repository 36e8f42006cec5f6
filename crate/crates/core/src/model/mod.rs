//! The classifier under study: training objective with augmentation, oracle
//! fine-tuning, and the probability / feature / BN-statistic access the
//! inversion and filtration stages rely on.

mod augment;
mod checkpoint;

pub use augment::{AugmentationSet, Transform};
pub(crate) use checkpoint::{
    read_bn_stats as checkpoint_read_bn, read_weights as checkpoint_read_weights,
    write_bn_stats as checkpoint_write_bn, write_weights as checkpoint_write_weights,
};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::nn::{
    Adam, ClassifierNet, ClfOutputs, CnnNet, MlpNet, Mode, Optimizer, Sgd,
};
use crate::util;
use ndarray::{Array2, ArrayD, ArrayViewD, Axis, IxDyn};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64 },
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Sgd { momentum: 0.9 },
            learning_rate: 0.01,
            weight_decay: 2e-4,
            epochs: 30,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        Ok(())
    }

    fn build_optimizer(&self) -> Box<dyn Optimizer> {
        match self.optimizer {
            OptimizerKind::Sgd { momentum } => Box::new(Sgd::new(
                self.learning_rate,
                momentum,
                self.weight_decay,
            )),
            OptimizerKind::Adam { beta1, beta2 } => Box::new(Adam::new(
                self.learning_rate,
                beta1,
                beta2,
                self.weight_decay,
            )),
        }
    }
}

/// Architecture descriptor persisted in `arch.json`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ClassifierArch {
    pub kind: ArchKind,
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub seed: u64,
    pub augmentations: Vec<Transform>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "arch", rename_all = "kebab-case")]
pub enum ArchKind {
    Mlp { hidden: usize },
    Cnn { channels: [usize; 3] },
}

impl ClassifierArch {
    /// Pick the default architecture for a dataset shape: an MLP for point
    /// data, the three-block BN CNN for images.
    pub fn default_for(input_shape: &[usize], num_classes: usize, seed: u64) -> Self {
        let kind = match input_shape.len() {
            1 => ArchKind::Mlp { hidden: 64 },
            3 => ArchKind::Cnn {
                channels: [32, 64, 128],
            },
            _ => ArchKind::Mlp { hidden: 64 },
        };
        ClassifierArch {
            kind,
            input_shape: input_shape.to_vec(),
            num_classes,
            seed,
            augmentations: Vec::new(),
        }
    }
}

/// A differentiable classifier with BN running statistics, a feature tap, and
/// a softmax output head. Immutable (and cheaply shareable) once trained.
#[derive(Clone)]
pub struct ClassifierModel {
    pub(crate) net: ClassifierNet,
    pub arch: ClassifierArch,
}

impl ClassifierModel {
    /// Fresh model with seeded initialization. The output head starts at
    /// zero, so an untrained model predicts the uniform distribution.
    pub fn init(arch: ClassifierArch) -> Result<Self> {
        let mut rng = util::rng_from(util::derive_seed(arch.seed, "model-init"));
        let net = match &arch.kind {
            ArchKind::Mlp { hidden } => {
                if arch.input_shape.len() != 1 {
                    return Err(Error::shape("MLP expects a flat input shape"));
                }
                ClassifierNet::Mlp(MlpNet::new(
                    &mut rng,
                    arch.input_shape[0],
                    *hidden,
                    arch.num_classes,
                ))
            }
            ArchKind::Cnn { channels } => {
                if arch.input_shape.len() != 3 {
                    return Err(Error::shape("CNN expects a [C, H, W] input shape"));
                }
                ClassifierNet::Cnn(CnnNet::new(
                    &mut rng,
                    arch.input_shape[0],
                    *channels,
                    arch.num_classes,
                ))
            }
        };
        Ok(ClassifierModel { net, arch })
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.arch.input_shape
    }

    fn check_input(&self, x: &ArrayViewD<f64>) -> Result<()> {
        if x.shape() != self.arch.input_shape.as_slice() {
            return Err(Error::shape(format!(
                "input shape {:?}, model expects {:?}",
                x.shape(),
                self.arch.input_shape
            )));
        }
        Ok(())
    }

    fn batch_of_one(&self, x: &ArrayViewD<f64>) -> ArrayD<f64> {
        let mut shape = vec![1];
        shape.extend_from_slice(x.shape());
        x.to_owned().into_shape_with_order(IxDyn(&shape)).unwrap()
    }

    /// Softmax output for a single input.
    pub fn predict_proba(&self, x: &ArrayViewD<f64>) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let batch = self.batch_of_one(x);
        let probs = self.predict_proba_batch(&batch.view());
        Ok(probs.row(0).to_vec())
    }

    /// Softmax outputs for a `[N, ...input_shape]` batch.
    pub fn predict_proba_batch(&self, xs: &ArrayViewD<f64>) -> Array2<f64> {
        let mut g = Graph::new();
        let ids = self.net.register(&mut g, false);
        let x = g.constant(xs.to_owned());
        let out = ids.forward(&mut g, x, Mode::Eval);
        let probs = g.softmax(out.logits);
        g.value(probs)
            .view()
            .into_dimensionality()
            .unwrap()
            .to_owned()
    }

    /// Feature-tap output for a single input.
    pub fn extract_features(&self, x: &ArrayViewD<f64>) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let batch = self.batch_of_one(x);
        let feats = self.extract_features_batch(&batch.view());
        Ok(feats.row(0).to_vec())
    }

    pub fn extract_features_batch(&self, xs: &ArrayViewD<f64>) -> Array2<f64> {
        let mut g = Graph::new();
        let ids = self.net.register(&mut g, false);
        let x = g.constant(xs.to_owned());
        let out = ids.forward(&mut g, x, Mode::Eval);
        g.value(out.features)
            .view()
            .into_dimensionality()
            .unwrap()
            .to_owned()
    }

    /// Frozen BN running statistics `(mean, variance)` per layer, in order.
    pub fn bn_statistics(&self) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        let layers = self.net.bn_layers();
        if layers.is_empty() {
            return Err(Error::Capability(
                "classifier exposes no batch-norm layers; inversion requires them".into(),
            ));
        }
        Ok(layers
            .iter()
            .map(|bn| {
                (
                    bn.running_mean.iter().copied().collect(),
                    bn.running_var.iter().copied().collect(),
                )
            })
            .collect())
    }

    /// SHA-256 over the serialized parameters and BN statistics. Two models
    /// with equal checksums behave identically.
    pub fn checksum(&mut self) -> String {
        use sha2::Digest;
        let mut hasher = sha2::Sha256::new();
        for p in self.net.params_mut() {
            for &v in p.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        for bn in self.net.bn_layers() {
            for &v in bn.running_mean.iter().chain(bn.running_var.iter()) {
                hasher.update(v.to_le_bytes());
            }
        }
        hex_string(&hasher.finalize())
    }

    pub fn save(&mut self, dir: &std::path::Path) -> Result<()> {
        checkpoint::save_classifier(self, dir)
    }

    pub fn load(dir: &std::path::Path) -> Result<Self> {
        checkpoint::load_classifier(dir)
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Shannon entropy in nats of a probability vector, with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    if p.iter().any(|&v| v < -1e-9) {
        return Err(Error::invalid("probability vector has negative entries"));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-5 {
        return Err(Error::invalid(format!(
            "probability vector sums to {sum}, not 1"
        )));
    }
    Ok(p.iter()
        .map(|&v| if v > 0.0 { -v * v.ln() } else { 0.0 })
        .sum())
}

pub(crate) fn entropy_unchecked(p: &[f64]) -> f64 {
    p.iter()
        .map(|&v| if v > 0.0 { -v * v.ln() } else { 0.0 })
        .sum()
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------- training

pub(crate) enum FitTargets {
    Hard(Vec<u32>),
    Soft(Array2<f64>),
}

pub(crate) struct FitPlan<'a> {
    pub inputs: &'a LabeledDataset,
    pub targets: FitTargets,
    pub aug: &'a AugmentationSet,
    pub cfg: &'a TrainConfig,
    /// Include the stored augmentations (plus identity) in every batch.
    pub augment: bool,
}

/// Shared minibatch training loop. The per-batch objective is the mean
/// cross-entropy over the identity view and every transform view; BN running
/// statistics update after each step. Returns per-epoch mean losses.
pub(crate) fn fit(net: &mut ClassifierNet, plan: FitPlan<'_>) -> Result<Vec<f64>> {
    plan.cfg.validate()?;
    if plan.inputs.is_empty() {
        return Err(Error::invalid("training dataset is empty"));
    }
    let n = plan.inputs.len();
    let mut opt = plan.cfg.build_optimizer();
    let mut rng = util::rng_from(util::derive_seed(plan.cfg.seed, "fit"));
    let mut epoch_losses = Vec::with_capacity(plan.cfg.epochs);

    for epoch in 0..plan.cfg.epochs {
        let order = util::shuffled_indices(&mut rng, n);
        let mut loss_sum = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(plan.cfg.batch_size) {
            // a lone item breaks batch-norm statistics; fold it away
            if chunk.len() < 2 && n > 1 {
                continue;
            }
            let x_raw = plan.inputs.batch(chunk);
            let mut views = vec![x_raw.clone()];
            if plan.augment {
                for t in &plan.aug.transforms {
                    views.push(t.apply_array(&x_raw.view(), &mut rng));
                }
            }
            let x_big = concat_batches(&views);
            let reps = views.len();

            let mut g = Graph::new();
            let ids = net.register(&mut g, true);
            let x = g.constant(x_big);
            let out = ids.forward(&mut g, x, Mode::Train);
            let loss = build_ce_loss(&mut g, &out, chunk, &plan.targets, reps);
            let loss_val = g.scalar_value(loss);
            if !loss_val.is_finite() {
                return Err(Error::Training {
                    unit: "epoch",
                    index: epoch,
                    detail: format!("loss {loss_val}"),
                });
            }
            loss_sum += loss_val;
            batches += 1.0;
            g.backward(loss);

            let ids_flat = ids.param_ids();
            let grads: Vec<Option<&ArrayD<f64>>> =
                ids_flat.iter().map(|&id| g.grad(id)).collect();
            let mut params = net.params_mut();
            opt.step(&mut params, &grads);

            // refresh running statistics from this batch
            let stats: Vec<(ArrayD<f64>, ArrayD<f64>, usize)> = out
                .bn_stats
                .iter()
                .zip(&out.pre_bn)
                .map(|(s, &pre)| {
                    let shape = g.value(pre).shape();
                    let elems = shape.iter().product::<usize>() / shape[1];
                    (g.value(s.mean).clone(), g.value(s.var).clone(), elems)
                })
                .collect();
            for (bn, (mean, var, elems)) in net.bn_layers_mut().into_iter().zip(&stats) {
                bn.update_running(mean, var, *elems);
            }
        }
        epoch_losses.push(if batches > 0.0 { loss_sum / batches } else { 0.0 });
    }
    Ok(epoch_losses)
}

pub(crate) fn concat_batches(views: &[ArrayD<f64>]) -> ArrayD<f64> {
    if views.len() == 1 {
        return views[0].clone();
    }
    let parts: Vec<ArrayViewD<f64>> = views.iter().map(|v| v.view()).collect();
    ndarray::concatenate(Axis(0), &parts).unwrap()
}

fn build_ce_loss(
    g: &mut Graph,
    out: &ClfOutputs,
    chunk: &[usize],
    targets: &FitTargets,
    reps: usize,
) -> crate::graph::NodeId {
    let ls = g.log_softmax(out.logits);
    let rows = chunk.len() * reps;
    match targets {
        FitTargets::Hard(labels) => {
            let mut idx = Vec::with_capacity(rows);
            for _ in 0..reps {
                idx.extend(chunk.iter().map(|&i| labels[i] as usize));
            }
            let picked = g.pick_per_row(ls, idx);
            let s = g.sum(picked);
            g.mul_scalar(s, -1.0 / rows as f64)
        }
        FitTargets::Soft(q) => {
            let k = q.ncols();
            let mut big = Array2::<f64>::zeros((rows, k));
            for r in 0..reps {
                for (j, &i) in chunk.iter().enumerate() {
                    big.row_mut(r * chunk.len() + j).assign(&q.row(i));
                }
            }
            let qn = g.constant(big.into_dyn());
            let m = g.mul(qn, ls);
            let s = g.sum(m);
            g.mul_scalar(s, -1.0 / rows as f64)
        }
    }
}

/// Train a classifier from scratch on `d` under the augmented cross-entropy
/// objective. Deterministic in `cfg.seed`.
pub fn train_classifier(
    d: &LabeledDataset,
    aug: &AugmentationSet,
    cfg: &TrainConfig,
) -> Result<ClassifierModel> {
    let mut arch = ClassifierArch::default_for(d.input_shape(), d.num_classes(), cfg.seed);
    arch.augmentations = aug.transforms.clone();
    let mut model = ClassifierModel::init(arch)?;
    fit(
        &mut model.net,
        FitPlan {
            inputs: d,
            targets: FitTargets::Hard(d.labels().to_vec()),
            aug,
            cfg,
            augment: true,
        },
    )?;
    Ok(model)
}

/// Fine-tune a copy of `origin` on the retained set. The result is the
/// reference an unlearning method is measured against; `origin` is untouched.
pub fn train_oracle(
    origin: &ClassifierModel,
    d_r: &LabeledDataset,
    aug: &AugmentationSet,
    cfg: &TrainConfig,
) -> Result<ClassifierModel> {
    let mut model = origin.clone();
    fit(
        &mut model.net,
        FitPlan {
            inputs: d_r,
            targets: FitTargets::Hard(d_r.labels().to_vec()),
            aug,
            cfg,
            augment: true,
        },
    )?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_moons;

    fn moons_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 32,
            seed: 7,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn untrained_model_is_uniform() {
        let arch = ClassifierArch::default_for(&[2], 2, 1);
        let model = ClassifierModel::init(arch).unwrap();
        let x = ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.3, -0.2]).unwrap();
        let p = model.predict_proba(&x.view()).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn predict_proba_is_a_simplex_point_and_pure() {
        let d = make_moons(60, 0.1, 3).unwrap();
        let aug = AugmentationSet::default_for_shape(d.input_shape());
        let model = train_classifier(&d, &aug, &moons_cfg(5)).unwrap();
        let x = d.input(0);
        let p1 = model.predict_proba(&x.view()).unwrap();
        let p2 = model.predict_proba(&x.view()).unwrap();
        assert_eq!(p1, p2);
        let sum: f64 = p1.iter().sum();
        assert!((sum - 1.0).abs() < 1e-5);
        assert!(p1.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn zero_epochs_returns_initialized_model() {
        let d = make_moons(40, 0.1, 3).unwrap();
        let aug = AugmentationSet::default_for_shape(d.input_shape());
        let mut trained = train_classifier(&d, &aug, &moons_cfg(0)).unwrap();
        let mut fresh = ClassifierModel::init(trained.arch.clone()).unwrap();
        assert_eq!(trained.checksum(), fresh.checksum());
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let d = make_moons(0, 0.1, 3).unwrap();
        let aug = AugmentationSet::default_for_shape(d.input_shape());
        assert!(train_classifier(&d, &aug, &moons_cfg(1)).is_err());
    }

    #[test]
    fn moons_classifier_reaches_train_accuracy() {
        let d = make_moons(100, 0.1, 7).unwrap();
        let aug = AugmentationSet::default_for_shape(d.input_shape());
        let model = train_classifier(&d, &aug, &moons_cfg(200)).unwrap();
        let mut correct = 0;
        for (x, l) in d.iter() {
            let p = model.predict_proba(&x.view()).unwrap();
            if argmax(&p) == l as usize {
                correct += 1;
            }
        }
        assert!(
            correct as f64 / d.len() as f64 >= 0.95,
            "train accuracy {}/{}",
            correct,
            d.len()
        );
    }

    #[test]
    fn training_is_deterministic_in_seed() {
        let d = make_moons(60, 0.1, 5).unwrap();
        let aug = AugmentationSet::default_for_shape(d.input_shape());
        let mut a = train_classifier(&d, &aug, &moons_cfg(8)).unwrap();
        let mut b = train_classifier(&d, &aug, &moons_cfg(8)).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let mut c = train_classifier(
            &d,
            &aug,
            &TrainConfig {
                seed: 8,
                ..moons_cfg(8)
            },
        )
        .unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn oracle_with_zero_epochs_is_identity() {
        let d = make_moons(60, 0.1, 5).unwrap();
        let aug = AugmentationSet::default_for_shape(d.input_shape());
        let mut model = train_classifier(&d, &aug, &moons_cfg(5)).unwrap();
        let before = model.checksum();
        let mut oracle = train_oracle(&model, &d, &aug, &moons_cfg(0)).unwrap();
        assert_eq!(oracle.checksum(), before);
        assert_eq!(model.checksum(), before);
    }

    #[test]
    fn bn_statistics_frozen_under_inference() {
        let d = make_moons(60, 0.1, 5).unwrap();
        let aug = AugmentationSet::default_for_shape(d.input_shape());
        let mut model = train_classifier(&d, &aug, &moons_cfg(5)).unwrap();
        let before = model.checksum();
        for (x, _) in d.iter().take(10) {
            model.predict_proba(&x.view()).unwrap();
            model.extract_features(&x.view()).unwrap();
        }
        assert_eq!(model.checksum(), before);
        let stats = model.bn_statistics().unwrap();
        assert_eq!(stats.len(), 2);
    }

    #[test]
    fn fresh_bn_layer_has_standard_stats() {
        let arch = ClassifierArch::default_for(&[2], 2, 0);
        let model = ClassifierModel::init(arch).unwrap();
        let stats = model.bn_statistics().unwrap();
        for (mean, var) in stats {
            assert!(mean.iter().all(|&v| v == 0.0));
            assert!(var.iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn features_have_constant_width_and_purity() {
        let d = make_moons(30, 0.1, 2).unwrap();
        let aug = AugmentationSet::default_for_shape(d.input_shape());
        let model = train_classifier(&d, &aug, &moons_cfg(3)).unwrap();
        let f0 = model.extract_features(&d.input(0).view()).unwrap();
        let f1 = model.extract_features(&d.input(1).view()).unwrap();
        assert_eq!(f0.len(), f1.len());
        let again = model.extract_features(&d.input(0).view()).unwrap();
        assert_eq!(f0, again);
    }

    #[test]
    fn entropy_values() {
        // one-hot
        assert_eq!(entropy(&[1.0, 0.0, 0.0]).unwrap(), 0.0);
        // uniform over 10
        let u = vec![0.1; 10];
        assert!((entropy(&u).unwrap() - 10f64.ln()).abs() < 1e-12);
        // the 0.82 + 9x0.02 vector pairs with the 0.867 threshold
        let mut p = vec![0.02; 10];
        p[0] = 0.82;
        assert!((entropy(&p).unwrap() - 0.867).abs() < 5e-4);
        // invalid inputs
        assert!(entropy(&[0.5, 0.4]).is_err());
        assert!(entropy(&[-0.1, 1.1]).is_err());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let arch = ClassifierArch::default_for(&[2], 2, 0);
        let model = ClassifierModel::init(arch).unwrap();
        let x = ArrayD::zeros(IxDyn(&[3]));
        assert!(model.predict_proba(&x.view()).is_err());
        assert!(model.extract_features(&x.view()).is_err());
    }
}
