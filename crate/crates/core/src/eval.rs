//! Unlearning quality metrics and the structured run report: split
//! accuracies, KL divergence to the oracle and original models, ρ sweeps and
//! the generator-loss / distance-metric ablation harness.

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::filtration::SimilarityMetric;
use crate::model::{argmax, ClassifierModel};
use crate::pipeline::{run_unlearning, PipelineConfig, SharedArtifacts};
use crate::util;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Fraction of items whose argmax prediction matches the label, times 100.
pub fn accuracy(model: &ClassifierModel, d: &LabeledDataset) -> Result<f64> {
    if d.is_empty() {
        return Err(Error::invalid("accuracy over an empty dataset"));
    }
    let mut correct = 0usize;
    let chunk = 256;
    let mut i = 0;
    while i < d.len() {
        let hi = (i + chunk).min(d.len());
        let idx: Vec<usize> = (i..hi).collect();
        let batch = d.batch(&idx);
        let probs = model.predict_proba_batch(&batch.view());
        for (row, &j) in probs.rows().into_iter().zip(&idx) {
            if argmax(row.as_slice().unwrap()) == d.label(j) as usize {
                correct += 1;
            }
        }
        i = hi;
    }
    Ok(100.0 * correct as f64 / d.len() as f64)
}

/// Mean KL divergence `KL(ref(x) ‖ m(x))` over the evaluation points, with
/// `m`'s entries floored at 1e-12. The reference model is the first argument
/// of the divergence.
pub fn kl_to_reference(
    model: &ClassifierModel,
    reference: &ClassifierModel,
    points: &LabeledDataset,
) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::invalid("KL over an empty dataset"));
    }
    if model.num_classes() != reference.num_classes() {
        return Err(Error::invalid(format!(
            "class count mismatch: {} vs {}",
            model.num_classes(),
            reference.num_classes()
        )));
    }
    let mut total = 0.0;
    let chunk = 256;
    let mut i = 0;
    while i < points.len() {
        let hi = (i + chunk).min(points.len());
        let idx: Vec<usize> = (i..hi).collect();
        let batch = points.batch(&idx);
        let pm = model.predict_proba_batch(&batch.view());
        let pr = reference.predict_proba_batch(&batch.view());
        for (rm, rr) in pm.rows().into_iter().zip(pr.rows()) {
            total += kl_rows(rr.as_slice().unwrap(), rm.as_slice().unwrap());
        }
        i = hi;
    }
    Ok(total / points.len() as f64)
}

pub(crate) fn kl_rows(reference: &[f64], model: &[f64]) -> f64 {
    reference
        .iter()
        .zip(model)
        .map(|(&r, &m)| {
            if r > 0.0 {
                r * (r / m.max(1e-12)).ln()
            } else {
                0.0
            }
        })
        .sum()
}

// ---------------------------------------------------------------- report

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitAccuracy {
    pub d_r: f64,
    pub d_e: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub original: SplitAccuracy,
    pub oracle: SplitAccuracy,
    pub unlearned: SplitAccuracy,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FiltrationSummary {
    pub n_candidates: usize,
    pub n_flagged: usize,
    pub t_f: f64,
    pub t_ent: f64,
    pub sigma: Option<f64>,
    pub metric: String,
}

/// Everything the determinism criterion compares byte-for-byte.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportMetrics {
    pub scenario: String,
    pub rho: f64,
    pub accuracy: AccuracyTable,
    /// Mean `KL(oracle ‖ unlearned)` over the evaluation points.
    pub kl_vs_oracle: f64,
    /// Mean `KL(original ‖ unlearned)`.
    pub kl_vs_original: f64,
    pub kl_direction: String,
    pub filtration: FiltrationSummary,
    pub target_classes: Vec<u32>,
    pub sizes: SizeSummary,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SizeSummary {
    pub d_train: usize,
    pub d_e: usize,
    pub d_e_rho: usize,
    pub d_r_eval: usize,
    pub d_e_eval: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportMeta {
    pub seed: u64,
    pub wall_clock_seconds: f64,
    /// Ablation or sweep tag, when applicable.
    pub variant: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UnlearnReport {
    pub metrics: ReportMetrics,
    pub meta: ReportMeta,
}

impl UnlearnReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Ok(serde_json::from_reader(std::fs::File::open(path)?)?)
    }

    /// Canonical byte serialization of the metrics block (not the meta block,
    /// which carries wall-clock time).
    pub fn metrics_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(&self.metrics).expect("metrics serialize")
    }
}

// ---------------------------------------------------------------- sweeps

/// Run the full pipeline once per `(ρ, seed)` pair, reusing the shared
/// classifier, oracle and generator.
pub fn rho_sweep(
    shared: &SharedArtifacts,
    cfg: &PipelineConfig,
    rhos: &[f64],
    seeds: &[u64],
) -> Result<Vec<UnlearnReport>> {
    let mut reports = Vec::new();
    for &rho in rhos {
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(Error::invalid(format!("sweep rho {rho} outside (0, 1]")));
        }
        for &seed in seeds {
            let out = run_unlearning(shared, cfg, rho, seed)?;
            reports.push(out.report);
        }
    }
    Ok(reports)
}

/// `sweep.csv` aggregation: `rho,seed,acc_dr,acc_de,kl_oracle,kl_original`.
pub fn write_sweep_csv(reports: &[UnlearnReport], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "rho,seed,acc_dr,acc_de,kl_oracle,kl_original")?;
    for r in reports {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            r.metrics.rho,
            r.meta.seed,
            r.metrics.accuracy.unlearned.d_r,
            r.metrics.accuracy.unlearned.d_e,
            r.metrics.kl_vs_oracle,
            r.metrics.kl_vs_original
        )?;
    }
    f.flush()?;
    Ok(())
}

/// Ablation variants: drop one generator loss at a time, then swap the
/// similarity metric under the full-loss generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationVariant {
    Full,
    NoBn,
    NoAug,
    NoDiv,
    NoTv,
    MetricRbf,
    MetricCosine,
    MetricL2,
}

impl AblationVariant {
    pub fn all() -> [AblationVariant; 8] {
        [
            AblationVariant::Full,
            AblationVariant::NoBn,
            AblationVariant::NoAug,
            AblationVariant::NoDiv,
            AblationVariant::NoTv,
            AblationVariant::MetricRbf,
            AblationVariant::MetricCosine,
            AblationVariant::MetricL2,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::NoBn => "no-bn",
            AblationVariant::NoAug => "no-aug",
            AblationVariant::NoDiv => "no-div",
            AblationVariant::NoTv => "no-tv",
            AblationVariant::MetricRbf => "metric-rbf",
            AblationVariant::MetricCosine => "metric-cosine",
            AblationVariant::MetricL2 => "metric-l2",
        }
    }

    /// Specialize a pipeline config for this variant.
    pub fn apply(&self, cfg: &PipelineConfig) -> PipelineConfig {
        let mut out = cfg.clone();
        match self {
            AblationVariant::Full | AblationVariant::MetricRbf => {}
            AblationVariant::NoBn => out.inversion.weights.bn = 0.0,
            AblationVariant::NoAug => out.inversion.weights.aug = 0.0,
            AblationVariant::NoDiv => out.inversion.weights.div = 0.0,
            AblationVariant::NoTv => out.inversion.weights.tv = 0.0,
            AblationVariant::MetricCosine => out.filtration.metric = SimilarityMetric::Cosine,
            AblationVariant::MetricL2 => out.filtration.metric = SimilarityMetric::L2,
        }
        out
    }

    /// Loss ablations retrain the generator; metric variants reuse it.
    pub fn retrains_generator(&self) -> bool {
        matches!(
            self,
            AblationVariant::NoBn
                | AblationVariant::NoAug
                | AblationVariant::NoDiv
                | AblationVariant::NoTv
        )
    }
}

/// Run every ablation variant on a prepared scenario. The classifier and
/// oracle are shared; loss variants train their own generator.
pub fn ablation_suite(
    shared: &SharedArtifacts,
    cfg: &PipelineConfig,
    rho: f64,
    seed: u64,
) -> Result<Vec<UnlearnReport>> {
    let mut reports = Vec::new();
    for variant in AblationVariant::all() {
        let vcfg = variant.apply(cfg);
        let mut report = if variant.retrains_generator() {
            let mut inv = vcfg.inversion.clone();
            inv.seed = util::derive_seed(cfg.seed, &format!("ablate-{}", variant.name()));
            let (generator, _) =
                crate::inversion::train_generator(&shared.original, &shared.aug, &inv)?;
            let vshared = SharedArtifacts {
                generator,
                ..shared.clone()
            };
            run_unlearning(&vshared, &vcfg, rho, seed)?.report
        } else {
            run_unlearning(shared, &vcfg, rho, seed)?.report
        };
        report.meta.variant = Some(variant.name().to_string());
        reports.push(report);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_moons;
    use crate::model::{train_classifier, AugmentationSet, TrainConfig};

    #[test]
    fn accuracy_counts() {
        let d = make_moons(80, 0.1, 3).unwrap();
        let aug = AugmentationSet::default_for_shape(d.input_shape());
        let cfg = TrainConfig {
            epochs: 60,
            seed: 1,
            ..TrainConfig::default()
        };
        let model = train_classifier(&d, &aug, &cfg).unwrap();
        let acc = accuracy(&model, &d).unwrap();
        assert!((0.0..=100.0).contains(&acc));
        assert!(acc >= 90.0, "trained moons accuracy {acc}");
        // adversarial labels: accuracy complements
        let flipped: Vec<u32> = d.labels().iter().map(|&l| 1 - l).collect();
        let d_flipped = d.with_labels(flipped).unwrap();
        let acc_flipped = accuracy(&model, &d_flipped).unwrap();
        assert!((acc + acc_flipped - 100.0).abs() < 1e-9);
        // empty dataset is an error
        let empty = make_moons(0, 0.1, 1).unwrap();
        assert!(accuracy(&model, &empty).is_err());
    }

    #[test]
    fn kl_zero_at_identity_and_nonnegative() {
        let d = make_moons(40, 0.1, 4).unwrap();
        let aug = AugmentationSet::default_for_shape(d.input_shape());
        let cfg = TrainConfig {
            epochs: 10,
            seed: 2,
            ..TrainConfig::default()
        };
        let m1 = train_classifier(&d, &aug, &cfg).unwrap();
        let m2 = train_classifier(
            &d,
            &aug,
            &TrainConfig {
                seed: 3,
                ..cfg.clone()
            },
        )
        .unwrap();
        assert_eq!(kl_to_reference(&m1, &m1, &d).unwrap(), 0.0);
        assert!(kl_to_reference(&m1, &m2, &d).unwrap() >= 0.0);
        assert!(kl_to_reference(&m2, &m1, &d).unwrap() >= 0.0);
    }

    #[test]
    fn kl_single_point_value() {
        // ref = [0.5, 0.5], m = [0.25, 0.75]
        let v = kl_rows(&[0.5, 0.5], &[0.25, 0.75]);
        let expect = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
        assert!((v - expect).abs() < 1e-12);
        assert!((v - 0.1438).abs() < 1e-4);
    }
}
