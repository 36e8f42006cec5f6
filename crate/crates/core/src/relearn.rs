//! Retraining from the original parameters on the relabeled proxy set with
//! soft-target cross-entropy.

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::filtration::SoftLabeledDataset;
use crate::model::{
    fit, AugmentationSet, ClassifierModel, FitPlan, FitTargets, OptimizerKind, TrainConfig,
};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RelearnConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Apply the classifier's augmentation set during retraining.
    pub augment: bool,
}

impl Default for RelearnConfig {
    fn default() -> Self {
        RelearnConfig {
            optimizer: OptimizerKind::Sgd { momentum: 0.9 },
            learning_rate: 0.003,
            weight_decay: 2e-5,
            epochs: 20,
            batch_size: 32,
            seed: 0,
            augment: true,
        }
    }
}

impl RelearnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::invalid("learning rate must be positive"));
        }
        Ok(())
    }

    fn as_train_config(&self) -> TrainConfig {
        TrainConfig {
            optimizer: self.optimizer.clone(),
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }
}

/// Retrain a copy of `origin` on the relearning set, minimizing the
/// batch-mean soft cross-entropy `-Σ_c q_c ln p_c`. The input model is left
/// untouched; BN running statistics of the returned model track the proxy
/// data. Returns the unlearned model and the per-epoch loss curve.
pub fn unlearn(
    origin: &ClassifierModel,
    d_unlearn: &SoftLabeledDataset,
    aug: &AugmentationSet,
    cfg: &RelearnConfig,
) -> Result<(ClassifierModel, Vec<f64>)> {
    cfg.validate()?;
    if d_unlearn.is_empty() {
        return Err(Error::invalid("relearning set is empty"));
    }
    if d_unlearn.input_shape() != origin.input_shape() {
        return Err(Error::shape(format!(
            "relearning inputs {:?} vs model {:?}",
            d_unlearn.input_shape(),
            origin.input_shape()
        )));
    }
    if d_unlearn.num_classes() != origin.num_classes() {
        return Err(Error::invalid("class count mismatch"));
    }

    // carrier dataset for the shared fit loop; the labels are unused because
    // the soft targets drive the loss
    let inputs: Vec<_> = (0..d_unlearn.len())
        .map(|i| d_unlearn.input(i).clone())
        .collect();
    let carrier = LabeledDataset::new(
        inputs,
        vec![0; d_unlearn.len()],
        origin.num_classes(),
        origin.input_shape().to_vec(),
    )?;

    let mut model = origin.clone();
    let train_cfg = cfg.as_train_config();
    let losses = fit(
        &mut model.net,
        FitPlan {
            inputs: &carrier,
            targets: FitTargets::Soft(d_unlearn.soft_label_matrix()),
            aug,
            cfg: &train_cfg,
            augment: cfg.augment,
        },
    )?;
    Ok((model, losses))
}

/// `relearn_log.csv`: per-epoch mean loss.
pub fn write_relearn_log(losses: &[f64], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,loss")?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(f, "{i},{l}")?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_moons;
    use crate::filtration::Provenance;
    use crate::model::train_classifier;

    fn tiny_model() -> (ClassifierModel, AugmentationSet, crate::data::LabeledDataset) {
        let d = make_moons(60, 0.1, 5).unwrap();
        let aug = AugmentationSet::default_for_shape(d.input_shape());
        let cfg = TrainConfig {
            epochs: 20,
            seed: 5,
            ..TrainConfig::default()
        };
        (train_classifier(&d, &aug, &cfg).unwrap(), aug, d)
    }

    fn self_distill_set(model: &ClassifierModel, d: &crate::data::LabeledDataset) -> SoftLabeledDataset {
        let inputs: Vec<_> = (0..d.len()).map(|i| d.input(i).clone()).collect();
        let soft: Vec<Vec<f64>> = (0..d.len())
            .map(|i| model.predict_proba(&d.input(i).view()).unwrap())
            .collect();
        let prov = (0..d.len())
            .map(|i| Provenance {
                draw_index: i as u64,
                conditioning_label: d.label(i),
            })
            .collect();
        SoftLabeledDataset::new(inputs, soft, prov, d.num_classes(), d.input_shape().to_vec())
            .unwrap()
    }

    #[test]
    fn zero_epochs_is_a_fixed_point() {
        let (model, aug, d) = tiny_model();
        let mut model = model;
        let set = self_distill_set(&model, &d);
        let cfg = RelearnConfig {
            epochs: 0,
            ..RelearnConfig::default()
        };
        let (mut after, losses) = unlearn(&model, &set, &aug, &cfg).unwrap();
        assert_eq!(after.checksum(), model.checksum());
        assert!(losses.is_empty());
    }

    #[test]
    fn input_model_is_not_mutated() {
        let (model, aug, d) = tiny_model();
        let mut model = model;
        let before = model.checksum();
        let set = self_distill_set(&model, &d);
        let cfg = RelearnConfig {
            epochs: 2,
            seed: 3,
            ..RelearnConfig::default()
        };
        let _ = unlearn(&model, &set, &aug, &cfg).unwrap();
        assert_eq!(model.checksum(), before);
    }

    #[test]
    fn soft_ce_reduces_to_hard_ce_on_one_hot() {
        // one epoch with identical seeds: the loss sequence and the resulting
        // predictions must agree (the objectives are the same function)
        let (model, aug, d) = tiny_model();
        let cfg = RelearnConfig {
            epochs: 1,
            seed: 11,
            ..RelearnConfig::default()
        };

        // soft path with one-hot targets
        let inputs: Vec<_> = (0..d.len()).map(|i| d.input(i).clone()).collect();
        let onehot: Vec<Vec<f64>> = d
            .labels()
            .iter()
            .map(|&l| {
                let mut q = vec![0.0; d.num_classes()];
                q[l as usize] = 1.0;
                q
            })
            .collect();
        let prov = (0..d.len())
            .map(|i| Provenance {
                draw_index: i as u64,
                conditioning_label: d.label(i),
            })
            .collect();
        let soft_set =
            SoftLabeledDataset::new(inputs, onehot, prov, d.num_classes(), vec![2]).unwrap();
        let (soft_model, soft_losses) = unlearn(&model, &soft_set, &aug, &cfg).unwrap();

        // hard path through the same optimizer settings
        let hard_cfg = TrainConfig {
            optimizer: cfg.optimizer.clone(),
            learning_rate: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            seed: cfg.seed,
        };
        let mut hard_model = model.clone();
        let hard_losses = fit(
            &mut hard_model.net,
            FitPlan {
                inputs: &d,
                targets: FitTargets::Hard(d.labels().to_vec()),
                aug: &aug,
                cfg: &hard_cfg,
                augment: cfg.augment,
            },
        )
        .unwrap();
        for (a, b) in soft_losses.iter().zip(&hard_losses) {
            assert!((a - b).abs() < 1e-6, "soft {a} vs hard {b}");
        }
        for i in 0..5 {
            let p = soft_model.predict_proba(&d.input(i).view()).unwrap();
            let q = hard_model.predict_proba(&d.input(i).view()).unwrap();
            for (a, b) in p.iter().zip(&q) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn determinism_in_seed() {
        let (model, aug, d) = tiny_model();
        let set = self_distill_set(&model, &d);
        let cfg = RelearnConfig {
            epochs: 2,
            seed: 9,
            ..RelearnConfig::default()
        };
        let (mut a, _) = unlearn(&model, &set, &aug, &cfg).unwrap();
        let (mut b, _) = unlearn(&model, &set, &aug, &cfg).unwrap();
        assert_eq!(a.checksum(), b.checksum());
    }
}
