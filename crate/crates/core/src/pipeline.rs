//! Scenario assembly and the end-to-end unlearning pipeline: build datasets
//! and splits, train the original and oracle classifiers, invert the model
//! into a generator, then run the per-ρ unlearning (subsample → candidates →
//! scores → knee threshold → relabel → retrain → evaluate).

use crate::data::{
    self, class_removal_split, corrupt_labels, make_moons, sample_target_subset, LabeledDataset,
    SplitMode, SplitSpec,
};
use crate::error::{Error, Result};
use crate::eval::{
    accuracy, kl_to_reference, AccuracyTable, FiltrationSummary, ReportMeta, ReportMetrics,
    SizeSummary, SplitAccuracy, UnlearnReport,
};
use crate::filtration::{
    build_unlearn_set, generate_candidates, knee_point, similarity_scores, FiltrationConfig,
    SoftLabeledDataset, ThresholdInfo,
};
use crate::inversion::{train_generator, ConditionalGenerator, InversionConfig, LossLogRow};
use crate::model::{train_classifier, train_oracle, AugmentationSet, ClassifierModel, TrainConfig};
use crate::relearn::{unlearn, RelearnConfig};
use crate::util::derive_seed;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::PathBuf;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSpec {
    /// Synthetic two-moons point data.
    Moons { n: usize, noise: f64 },
    /// A dataset container directory (`meta.json` + `inputs.bin` +
    /// `labels.bin`), split into train/test and optionally truncated.
    Container {
        path: PathBuf,
        #[serde(default)]
        max_train: Option<usize>,
        test_fraction: f64,
    },
}

/// A full experiment description, minus the output directory.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PipelineConfig {
    pub dataset: DatasetSpec,
    pub split: SplitSpec,
    pub train: TrainConfig,
    pub oracle: TrainConfig,
    pub inversion: InversionConfig,
    pub filtration: FiltrationConfig,
    pub relearn: RelearnConfig,
    pub seed: u64,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        self.train.validate()?;
        self.oracle.validate()?;
        self.inversion.validate()?;
        self.filtration.validate()?;
        self.relearn.validate()?;
        if let DatasetSpec::Container { test_fraction, path, .. } = &self.dataset {
            if !(*test_fraction > 0.0 && *test_fraction < 1.0) {
                return Err(Error::invalid("test_fraction must lie in (0, 1)"));
            }
            if !path.join("meta.json").exists() {
                return Err(Error::MissingArtifact(path.join("meta.json")));
            }
        }
        Ok(())
    }

    /// Derive every stage seed from the global seed. Called once before any
    /// stage runs, so a config's global seed pins the whole run.
    pub fn resolve_seeds(&mut self) {
        self.train.seed = derive_seed(self.seed, "train");
        self.oracle.seed = derive_seed(self.seed, "oracle");
        self.inversion.seed = derive_seed(self.seed, "invert");
        self.relearn.seed = derive_seed(self.seed, "relearn");
    }

    /// Moons region-flip scenario with the defaults used in the experiments.
    pub fn moons_default(seed: u64) -> Self {
        let mut cfg = PipelineConfig {
            dataset: DatasetSpec::Moons { n: 100, noise: 0.1 },
            split: SplitSpec {
                mode: SplitMode::ClassRemoval,
                target_classes: [1].into_iter().collect(),
                source_class: None,
                rho: 0.25,
                corrupt_fraction: 1.0,
                region_count: Some(20),
            },
            train: TrainConfig {
                epochs: 200,
                batch_size: 32,
                ..TrainConfig::default()
            },
            oracle: TrainConfig {
                epochs: 120,
                batch_size: 32,
                ..TrainConfig::default()
            },
            inversion: InversionConfig {
                steps: 600,
                batch_size: 64,
                noise_dim: 16,
                embed_dim: 8,
                ..InversionConfig::default()
            },
            filtration: FiltrationConfig {
                target_count: 400,
                ..FiltrationConfig::default()
            },
            relearn: RelearnConfig {
                epochs: 60,
                ..RelearnConfig::default()
            },
            seed,
        };
        cfg.resolve_seeds();
        cfg
    }

    /// Class-removal scenario on a digit container.
    pub fn digits_class_removal(path: PathBuf, target_class: u32, seed: u64) -> Self {
        let mut cfg = PipelineConfig {
            dataset: DatasetSpec::Container {
                path,
                max_train: Some(5000),
                test_fraction: 0.2,
            },
            split: SplitSpec {
                mode: SplitMode::ClassRemoval,
                target_classes: [target_class].into_iter().collect(),
                source_class: None,
                rho: 0.03,
                corrupt_fraction: 1.0,
                region_count: None,
            },
            train: TrainConfig {
                epochs: 20,
                batch_size: 32,
                ..TrainConfig::default()
            },
            oracle: TrainConfig {
                epochs: 10,
                batch_size: 32,
                ..TrainConfig::default()
            },
            inversion: InversionConfig::default(),
            filtration: FiltrationConfig::default(),
            relearn: RelearnConfig::default(),
            seed,
        };
        cfg.resolve_seeds();
        cfg
    }

    /// Mislabel-correction scenario: a fraction of one class's training
    /// labels is corrupted uniformly into the target classes.
    pub fn digits_mislabel(path: PathBuf, seed: u64) -> Self {
        let mut cfg = PipelineConfig::digits_class_removal(path, 9, seed);
        cfg.split = SplitSpec {
            mode: SplitMode::MislabelCorrection,
            target_classes: [2, 3].into_iter().collect(),
            source_class: Some(7),
            rho: 0.03,
            corrupt_fraction: 0.5,
            region_count: None,
        };
        cfg.resolve_seeds();
        cfg
    }
}

/// Datasets of one scenario, in every role the pipeline needs.
#[derive(Clone, Debug)]
pub struct ScenarioData {
    pub name: String,
    /// Training set of the original model (corrupted where applicable).
    pub train: LabeledDataset,
    /// Retained training data: what the oracle fine-tunes on.
    pub d_r_train: LabeledDataset,
    /// The complete target set (carrying its training labels).
    pub d_e_train: LabeledDataset,
    /// Evaluation items for the target behavior, with reference labels
    /// (true labels for mislabel scenarios, the removed class for removal).
    pub d_e_eval: LabeledDataset,
    /// Evaluation items for retained behavior.
    pub d_r_eval: LabeledDataset,
    /// Points for the KL comparison between models.
    pub kl_points: LabeledDataset,
    pub target_classes: BTreeSet<u32>,
}

pub fn build_scenario(
    dataset: &DatasetSpec,
    split: &SplitSpec,
    seed: u64,
) -> Result<ScenarioData> {
    split.validate()?;
    match dataset {
        DatasetSpec::Moons { n, noise } => {
            let clean = make_moons(*n, *noise, derive_seed(seed, "dataset"))?;
            let (SplitMode::ClassRemoval, Some(count)) = (split.mode, split.region_count) else {
                return Err(Error::invalid(
                    "moons scenarios use class-removal with region_count",
                ));
            };
            let &target = split
                .target_classes
                .iter()
                .next()
                .expect("validated non-empty");
            let (d_r_train, d_e_train) = data::region_removal_split(&clean, target, count)?;
            Ok(ScenarioData {
                name: "moons-region-removal".into(),
                d_e_eval: d_e_train.clone(),
                d_r_eval: d_r_train.clone(),
                kl_points: clean.clone(),
                train: clean,
                d_r_train,
                d_e_train,
                target_classes: split.target_classes.clone(),
            })
        }
        DatasetSpec::Container {
            path,
            max_train,
            test_fraction,
        } => {
            let full = data::load_container(path)?;
            let (mut train, test) =
                full.stratified_split(*test_fraction, derive_seed(seed, "dataset"));
            if let Some(max) = max_train {
                train = train.truncate(*max, derive_seed(seed, "truncate"));
            }
            match split.mode {
                SplitMode::ClassRemoval => {
                    let &target = split.target_classes.iter().next().unwrap();
                    let (d_r_train, d_e_train) = class_removal_split(&train, target);
                    let (d_r_eval, d_e_eval) = class_removal_split(&test, target);
                    Ok(ScenarioData {
                        name: "class-removal".into(),
                        train,
                        d_r_train,
                        d_e_train,
                        d_e_eval,
                        d_r_eval,
                        kl_points: test,
                        target_classes: split.target_classes.clone(),
                    })
                }
                SplitMode::MislabelCorrection => {
                    let source = split.source_class.expect("validated");
                    let source_items: Vec<usize> = (0..train.len())
                        .filter(|&i| train.label(i) == source)
                        .collect();
                    if source_items.is_empty() {
                        return Err(Error::invalid(format!(
                            "source class {source} absent from the training split"
                        )));
                    }
                    let n_corrupt = ((source_items.len() as f64 * split.corrupt_fraction).round()
                        as usize)
                        .clamp(1, source_items.len());
                    let mut rng =
                        crate::util::rng_from(derive_seed(seed, "corrupt-selection"));
                    let perm = crate::util::shuffled_indices(&mut rng, source_items.len());
                    let mut selected: Vec<usize> =
                        perm[..n_corrupt].iter().map(|&p| source_items[p]).collect();
                    selected.sort_unstable();

                    let sub = train.subset(&selected);
                    let (corrupted_sub, d_e_train) = corrupt_labels(
                        &sub,
                        source,
                        &split.target_classes,
                        derive_seed(seed, "corrupt"),
                    )?;
                    let mut labels = train.labels().to_vec();
                    for (k, &i) in selected.iter().enumerate() {
                        labels[i] = corrupted_sub.label(k);
                    }
                    let train_corrupted = train.with_labels(labels)?;
                    let selected_set: BTreeSet<usize> = selected.iter().copied().collect();
                    let keep_idx: Vec<usize> = (0..train.len())
                        .filter(|i| !selected_set.contains(i))
                        .collect();
                    let d_r_train = train_corrupted.subset(&keep_idx);
                    Ok(ScenarioData {
                        name: "mislabel-correction".into(),
                        d_e_eval: sub, // true labels
                        d_r_eval: test.clone(),
                        kl_points: test,
                        train: train_corrupted,
                        d_r_train,
                        d_e_train,
                        target_classes: split.target_classes.clone(),
                    })
                }
            }
        }
    }
}

/// Artifacts shared by every run of one scenario: the trained original and
/// oracle classifiers and the inverted generator.
#[derive(Clone)]
pub struct SharedArtifacts {
    pub scenario: ScenarioData,
    pub aug: AugmentationSet,
    pub original: ClassifierModel,
    pub oracle: ClassifierModel,
    pub generator: ConditionalGenerator,
    pub inversion_log: Vec<LossLogRow>,
}

/// Train the original classifier and the oracle, then invert the classifier
/// into a generator.
pub fn prepare_shared(cfg: &PipelineConfig) -> Result<SharedArtifacts> {
    cfg.validate()?;
    let scenario = build_scenario(&cfg.dataset, &cfg.split, cfg.seed)?;
    let aug = AugmentationSet::default_for_shape(scenario.train.input_shape());
    let original = train_classifier(&scenario.train, &aug, &cfg.train)?;
    let oracle = train_oracle(&original, &scenario.d_r_train, &aug, &cfg.oracle)?;
    let (generator, inversion_log) = train_generator(&original, &aug, &cfg.inversion)?;
    Ok(SharedArtifacts {
        scenario,
        aug,
        original,
        oracle,
        generator,
        inversion_log,
    })
}

/// Everything produced by one unlearning run.
pub struct RunOutput {
    pub report: UnlearnReport,
    pub unlearned: ClassifierModel,
    pub candidates: SoftLabeledDataset,
    pub d_unlearn: SoftLabeledDataset,
    pub scores: Vec<f64>,
    pub flags: Vec<bool>,
    pub threshold: ThresholdInfo,
    pub relearn_log: Vec<f64>,
    pub d_e_rho: LabeledDataset,
}

/// Subsample the target set at ρ, generate and score candidates, pick the
/// knee threshold, assemble the relearning set, retrain, and evaluate.
pub fn run_unlearning(
    shared: &SharedArtifacts,
    cfg: &PipelineConfig,
    rho: f64,
    run_seed: u64,
) -> Result<RunOutput> {
    let start = std::time::Instant::now();
    let scen = &shared.scenario;

    // Bernoulli thinning can return an empty set at tiny rho; the method
    // needs at least one exemplar, so redraw deterministically.
    let mut d_e_rho = sample_target_subset(&scen.d_e_train, rho, derive_seed(run_seed, "rho"))?;
    let mut attempt = 0u64;
    while d_e_rho.is_empty() && !scen.d_e_train.is_empty() {
        attempt += 1;
        d_e_rho = sample_target_subset(
            &scen.d_e_train,
            rho,
            derive_seed(run_seed, &format!("rho-retry-{attempt}")),
        )?;
    }

    let candidates = generate_candidates(
        &shared.generator,
        &shared.original,
        &shared.aug,
        &cfg.filtration,
        derive_seed(run_seed, "candidates"),
    )?;
    let (scores, sim_info) =
        similarity_scores(&candidates, &d_e_rho, &shared.original, &cfg.filtration)?;
    let knee = knee_point(&scores, cfg.filtration.knee_sensitivity)?;
    let t_f = knee.map(|k| k.value).unwrap_or(f64::INFINITY);
    let (d_unlearn, flags, stats) =
        build_unlearn_set(&candidates, &scores, t_f, &scen.target_classes)?;

    let mut relearn_cfg = cfg.relearn.clone();
    relearn_cfg.seed = derive_seed(run_seed, "relearn");
    let (unlearned, relearn_log) = unlearn(&shared.original, &d_unlearn, &shared.aug, &relearn_cfg)?;

    let metrics = ReportMetrics {
        scenario: scen.name.clone(),
        rho,
        accuracy: AccuracyTable {
            original: SplitAccuracy {
                d_r: accuracy(&shared.original, &scen.d_r_eval)?,
                d_e: accuracy(&shared.original, &scen.d_e_eval)?,
            },
            oracle: SplitAccuracy {
                d_r: accuracy(&shared.oracle, &scen.d_r_eval)?,
                d_e: accuracy(&shared.oracle, &scen.d_e_eval)?,
            },
            unlearned: SplitAccuracy {
                d_r: accuracy(&unlearned, &scen.d_r_eval)?,
                d_e: accuracy(&unlearned, &scen.d_e_eval)?,
            },
        },
        kl_vs_oracle: kl_to_reference(&unlearned, &shared.oracle, &scen.kl_points)?,
        kl_vs_original: kl_to_reference(&unlearned, &shared.original, &scen.kl_points)?,
        kl_direction: "KL(reference || unlearned)".into(),
        filtration: FiltrationSummary {
            n_candidates: stats.n_candidates,
            n_flagged: stats.n_flagged,
            t_f: stats.t_f,
            t_ent: cfg.filtration.t_ent,
            sigma: sim_info.sigma,
            metric: sim_info.metric.clone(),
        },
        target_classes: scen.target_classes.iter().copied().collect(),
        sizes: SizeSummary {
            d_train: scen.train.len(),
            d_e: scen.d_e_train.len(),
            d_e_rho: d_e_rho.len(),
            d_r_eval: scen.d_r_eval.len(),
            d_e_eval: scen.d_e_eval.len(),
        },
    };
    let report = UnlearnReport {
        metrics,
        meta: ReportMeta {
            seed: run_seed,
            wall_clock_seconds: start.elapsed().as_secs_f64(),
            variant: None,
        },
    };
    Ok(RunOutput {
        report,
        unlearned,
        candidates,
        d_unlearn,
        scores,
        flags,
        threshold: ThresholdInfo {
            t_f,
            sigma: sim_info.sigma,
            sensitivity: cfg.filtration.knee_sensitivity,
            knee_index: knee.map(|k| k.sorted_index),
            metric: sim_info.metric,
        },
        relearn_log,
        d_e_rho,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moons_scenario_shapes() {
        let cfg = PipelineConfig::moons_default(7);
        let scen = build_scenario(&cfg.dataset, &cfg.split, cfg.seed).unwrap();
        assert_eq!(scen.train.len(), 100);
        assert_eq!(scen.d_e_train.len(), 20);
        assert_eq!(scen.d_r_eval.len(), 80);
        assert_eq!(scen.d_e_eval.len(), 20);
        // the region keeps its true labels in both views
        assert!(scen.d_e_train.labels().iter().all(|&l| l == 1));
        assert!(scen.d_e_eval.labels().iter().all(|&l| l == 1));
        assert_eq!(scen.kl_points.len(), 100);
    }

    #[test]
    fn scenario_is_deterministic() {
        let cfg = PipelineConfig::moons_default(9);
        let a = build_scenario(&cfg.dataset, &cfg.split, cfg.seed).unwrap();
        let b = build_scenario(&cfg.dataset, &cfg.split, cfg.seed).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.d_e_train, b.d_e_train);
    }

    #[test]
    fn config_validation_rejects_bad_rho() {
        let mut cfg = PipelineConfig::moons_default(1);
        cfg.split.rho = 0.0;
        assert!(cfg.validate().is_err());
        cfg.split.rho = 1.5;
        assert!(cfg.validate().is_err());
    }
}
