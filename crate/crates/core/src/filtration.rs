//! From raw generator output to the relearning set: entropy/consistency
//! candidate filtering, similarity scoring against the few target examples,
//! automatic knee-point thresholding, and relabeling.
//!
//! Scores are similarities (large = close to the target set), so items at or
//! above the knee threshold are flagged as target-like. The kernel-sum
//! direction follows the described behavior (filter the near cluster), with
//! the RBF kernel as the default metric.

use crate::error::{Error, Result};
use crate::inversion::ConditionalGenerator;
use crate::model::{entropy_unchecked, argmax, AugmentationSet, ClassifierModel, Transform};
use crate::util;
use ndarray::{Array2, ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

/// Inputs paired with probability-vector labels plus per-item provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabeledDataset {
    inputs: Vec<ArrayD<f64>>,
    soft_labels: Vec<Vec<f64>>,
    provenance: Vec<Provenance>,
    num_classes: usize,
    input_shape: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// Index of the draw that produced this sample.
    pub draw_index: u64,
    /// Label the generator was conditioned on.
    pub conditioning_label: u32,
}

impl SoftLabeledDataset {
    pub fn new(
        inputs: Vec<ArrayD<f64>>,
        soft_labels: Vec<Vec<f64>>,
        provenance: Vec<Provenance>,
        num_classes: usize,
        input_shape: Vec<usize>,
    ) -> Result<Self> {
        if inputs.len() != soft_labels.len() || inputs.len() != provenance.len() {
            return Err(Error::invalid("inputs, labels and provenance differ in length"));
        }
        for q in &soft_labels {
            check_simplex(q, num_classes)?;
        }
        Ok(SoftLabeledDataset {
            inputs,
            soft_labels,
            provenance,
            num_classes,
            input_shape,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input(&self, i: usize) -> &ArrayD<f64> {
        &self.inputs[i]
    }

    pub fn soft_label(&self, i: usize) -> &[f64] {
        &self.soft_labels[i]
    }

    pub fn provenance(&self, i: usize) -> Provenance {
        self.provenance[i]
    }

    /// Soft labels as an `[N, K]` matrix.
    pub fn soft_label_matrix(&self) -> Array2<f64> {
        let mut m = Array2::<f64>::zeros((self.len(), self.num_classes));
        for (i, q) in self.soft_labels.iter().enumerate() {
            m.row_mut(i).assign(&ndarray::ArrayView1::from(&q[..]));
        }
        m
    }

    pub fn batch(&self, indices: &[usize]) -> ArrayD<f64> {
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.input_shape);
        let mut out = ArrayD::<f64>::zeros(IxDyn(&shape));
        let item_len: usize = self.input_shape.iter().product();
        let slice = out.as_slice_mut().unwrap();
        for (row, &i) in indices.iter().enumerate() {
            let src = self.inputs[i].as_slice().expect("standard layout");
            slice[row * item_len..(row + 1) * item_len].copy_from_slice(src);
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        #[derive(Serialize)]
        struct Meta<'a> {
            num_classes: usize,
            input_shape: &'a [usize],
            count: usize,
            dtype: &'a str,
            labels: &'a str,
        }
        let mut mf = std::fs::File::create(dir.join("meta.json"))?;
        serde_json::to_writer_pretty(
            &mut mf,
            &Meta {
                num_classes: self.num_classes,
                input_shape: &self.input_shape,
                count: self.len(),
                dtype: "f32",
                labels: "soft",
            },
        )?;
        mf.write_all(b"\n")?;
        let mut inputs = std::io::BufWriter::new(std::fs::File::create(dir.join("inputs.bin"))?);
        for x in &self.inputs {
            for &v in x.as_slice().expect("standard layout") {
                inputs.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        inputs.flush()?;
        let mut labels =
            std::io::BufWriter::new(std::fs::File::create(dir.join("soft_labels.bin"))?);
        for q in &self.soft_labels {
            for &v in q {
                labels.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        labels.flush()?;
        let mut prov = std::io::BufWriter::new(std::fs::File::create(dir.join("provenance.csv"))?);
        writeln!(prov, "index,draw_index,conditioning_label")?;
        for (i, p) in self.provenance.iter().enumerate() {
            writeln!(prov, "{},{},{}", i, p.draw_index, p.conditioning_label)?;
        }
        prov.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Meta {
            num_classes: usize,
            input_shape: Vec<usize>,
            count: usize,
        }
        let meta_path = dir.join("meta.json");
        if !meta_path.exists() {
            return Err(Error::MissingArtifact(meta_path));
        }
        let meta: Meta = serde_json::from_reader(std::fs::File::open(meta_path)?)?;
        let item_len: usize = meta.input_shape.iter().product();
        let mut raw = Vec::new();
        std::fs::File::open(dir.join("inputs.bin"))?.read_to_end(&mut raw)?;
        let mut inputs = Vec::with_capacity(meta.count);
        for i in 0..meta.count {
            let mut v = Vec::with_capacity(item_len);
            for j in 0..item_len {
                let o = (i * item_len + j) * 4;
                v.push(f32::from_le_bytes(raw[o..o + 4].try_into().unwrap()) as f64);
            }
            inputs.push(ArrayD::from_shape_vec(IxDyn(&meta.input_shape), v).unwrap());
        }
        let mut raw = Vec::new();
        std::fs::File::open(dir.join("soft_labels.bin"))?.read_to_end(&mut raw)?;
        let mut soft_labels = Vec::with_capacity(meta.count);
        for i in 0..meta.count {
            let mut q = Vec::with_capacity(meta.num_classes);
            for j in 0..meta.num_classes {
                let o = (i * meta.num_classes + j) * 4;
                q.push(f32::from_le_bytes(raw[o..o + 4].try_into().unwrap()) as f64);
            }
            // renormalize away the f32 rounding drift
            let s: f64 = q.iter().sum();
            if s > 0.0 {
                for v in q.iter_mut() {
                    *v /= s;
                }
            }
            soft_labels.push(q);
        }
        let prov_raw = std::fs::read_to_string(dir.join("provenance.csv"))?;
        let mut provenance = Vec::with_capacity(meta.count);
        for line in prov_raw.lines().skip(1) {
            let mut parts = line.split(',');
            let _idx = parts.next();
            let draw_index: u64 = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Checkpoint("bad provenance row".into()))?;
            let conditioning_label: u32 = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Checkpoint("bad provenance row".into()))?;
            provenance.push(Provenance {
                draw_index,
                conditioning_label,
            });
        }
        SoftLabeledDataset::new(
            inputs,
            soft_labels,
            provenance,
            meta.num_classes,
            meta.input_shape,
        )
    }
}

fn check_simplex(q: &[f64], k: usize) -> Result<()> {
    if q.len() != k {
        return Err(Error::invalid(format!(
            "soft label has {} entries for {k} classes",
            q.len()
        )));
    }
    if q.iter().any(|&v| v < -1e-9) {
        return Err(Error::invalid("soft label has negative mass"));
    }
    let s: f64 = q.iter().sum();
    if (s - 1.0).abs() > 1e-5 {
        return Err(Error::invalid(format!("soft label sums to {s}")));
    }
    Ok(())
}

// ---------------------------------------------------------------- config

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct FiltrationConfig {
    /// Entropy threshold in nats for the candidate filter.
    pub t_ent: f64,
    pub metric: SimilarityMetric,
    /// Kneedle sensitivity S.
    pub knee_sensitivity: f64,
    /// Number of candidates to keep.
    pub target_count: usize,
    /// Attempt cap as a multiple of `target_count`.
    pub attempt_factor: usize,
}

impl Default for FiltrationConfig {
    fn default() -> Self {
        FiltrationConfig {
            t_ent: 0.5,
            metric: SimilarityMetric::default(),
            knee_sensitivity: 1.0,
            target_count: 2000,
            attempt_factor: 200,
        }
    }
}

impl FiltrationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_ent > 0.0) {
            return Err(Error::invalid("t_ent must be positive"));
        }
        if !(self.knee_sensitivity > 0.0) {
            return Err(Error::invalid("knee sensitivity must be positive"));
        }
        if self.target_count == 0 {
            return Err(Error::invalid("target_count must be positive"));
        }
        if let SimilarityMetric::Rbf {
            bandwidth: BandwidthPolicy::Fixed(s),
        } = &self.metric
        {
            if !(*s > 0.0) {
                return Err(Error::invalid("fixed bandwidth must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SimilarityMetric {
    /// Sum of RBF kernel values (the default).
    Rbf { bandwidth: BandwidthPolicy },
    /// Sum of cosine similarities.
    Cosine,
    /// Negated sum of Euclidean distances, so that larger still means closer.
    L2,
}

impl Default for SimilarityMetric {
    fn default() -> Self {
        SimilarityMetric::Rbf {
            bandwidth: BandwidthPolicy::Median,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "policy", rename_all = "kebab-case")]
pub enum BandwidthPolicy {
    /// Median pairwise feature distance between candidates and exemplars.
    Median,
    Fixed(f64),
}

// ---------------------------------------------------------------- candidates

/// Sample `(z, y)` pairs, keep `x = G(z, y)` when every view in Φ ∪ {id} has
/// entropy below `t_ent` and agrees with the unaugmented argmax; the kept
/// item carries the classifier's soft output on the clean view.
///
/// Draws continue until `target_count` items are kept or the attempt cap
/// (`attempt_factor * target_count`) is reached. An acceptance rate below
/// 0.1% at the cap is reported as a yield error.
pub fn generate_candidates(
    gen: &ConditionalGenerator,
    classifier: &ClassifierModel,
    aug: &AugmentationSet,
    cfg: &FiltrationConfig,
    seed: u64,
) -> Result<SoftLabeledDataset> {
    cfg.validate()?;
    let k = classifier.num_classes();
    let batch = 64usize;
    let cap = cfg.target_count * cfg.attempt_factor;
    let workers = worker_count();

    let mut kept_inputs = Vec::new();
    let mut kept_labels = Vec::new();
    let mut kept_prov = Vec::new();
    let mut attempts = 0usize;
    let mut batch_index = 0u64;

    while kept_inputs.len() < cfg.target_count && attempts < cap {
        let rounds = workers.min(((cap - attempts) + batch - 1) / batch).max(1);
        let mut round_results: Vec<BatchKeep> = Vec::with_capacity(rounds);
        if rounds == 1 {
            round_results.push(candidate_batch(gen, classifier, aug, cfg, seed, batch_index, batch, k));
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = (0..rounds)
                    .map(|r| {
                        let idx = batch_index + r as u64;
                        scope.spawn(move || {
                            candidate_batch(gen, classifier, aug, cfg, seed, idx, batch, k)
                        })
                    })
                    .collect();
                for h in handles {
                    round_results.push(h.join().expect("candidate worker panicked"));
                }
            });
        }
        for res in round_results {
            attempts += res.attempts;
            for (x, q, p) in res.kept {
                if kept_inputs.len() < cfg.target_count {
                    kept_inputs.push(x);
                    kept_labels.push(q);
                    kept_prov.push(p);
                }
            }
        }
        batch_index += rounds as u64;
    }

    let rate = kept_inputs.len() as f64 / attempts.max(1) as f64;
    if kept_inputs.len() < cfg.target_count && (rate < 1e-3 || kept_inputs.is_empty()) {
        return Err(Error::Yield(format!(
            "kept {} of {} after {} draws (rate {:.4}%); review t_ent or the generator loss weights",
            kept_inputs.len(),
            cfg.target_count,
            attempts,
            rate * 100.0
        )));
    }

    SoftLabeledDataset::new(
        kept_inputs,
        kept_labels,
        kept_prov,
        k,
        classifier.input_shape().to_vec(),
    )
}

struct BatchKeep {
    kept: Vec<(ArrayD<f64>, Vec<f64>, Provenance)>,
    attempts: usize,
}

#[allow(clippy::too_many_arguments)]
fn candidate_batch(
    gen: &ConditionalGenerator,
    classifier: &ClassifierModel,
    aug: &AugmentationSet,
    cfg: &FiltrationConfig,
    seed: u64,
    batch_index: u64,
    batch: usize,
    k: usize,
) -> BatchKeep {
    let mut rng = util::rng_from(util::derive_seed(
        seed,
        &format!("candidates-{batch_index}"),
    ));
    let mut zs = Array2::<f64>::zeros((batch, gen.noise_dim()));
    for v in zs.iter_mut() {
        *v = util::sample_normal(&mut rng);
    }
    use rand::Rng;
    let labels: Vec<u32> = (0..batch).map(|_| rng.gen_range(0..k) as u32).collect();
    let xs = gen.generate(&zs, &labels).expect("generation failed");

    let clean = classifier.predict_proba_batch(&xs.view());
    let mut ok = vec![true; batch];
    let mut clean_arg = vec![0usize; batch];
    for i in 0..batch {
        let row = clean.row(i);
        clean_arg[i] = argmax(row.as_slice().unwrap());
        if entropy_unchecked(row.as_slice().unwrap()) >= cfg.t_ent {
            ok[i] = false;
        }
    }
    for t in aug.transforms.iter().chain(std::iter::once(&Transform::Identity)) {
        let xt = t.apply_array(&xs.view(), &mut rng);
        let pt = classifier.predict_proba_batch(&xt.view());
        for i in 0..batch {
            if !ok[i] {
                continue;
            }
            let row = pt.row(i);
            let row = row.as_slice().unwrap();
            if entropy_unchecked(row) >= cfg.t_ent || argmax(row) != clean_arg[i] {
                ok[i] = false;
            }
        }
    }

    let mut kept = Vec::new();
    for i in 0..batch {
        if ok[i] {
            kept.push((
                xs.index_axis(Axis(0), i).to_owned(),
                clean.row(i).to_vec(),
                Provenance {
                    draw_index: batch_index * batch as u64 + i as u64,
                    conditioning_label: labels[i],
                },
            ));
        }
    }
    BatchKeep {
        kept,
        attempts: batch,
    }
}

fn worker_count() -> usize {
    if let Ok(v) = std::env::var("UNLEARN_NUM_WORKERS") {
        if let Ok(n) = v.parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

/// Re-evaluate the candidate predicate on a stored item (test support and
/// sanity audits; independent of the batched path).
pub fn candidate_predicate(
    classifier: &ClassifierModel,
    x: &ArrayD<f64>,
    aug: &AugmentationSet,
    t_ent: f64,
    seed: u64,
) -> bool {
    let mut rng = util::rng_from(seed);
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let batch = x.clone().into_shape_with_order(IxDyn(&shape)).unwrap();
    let clean = classifier.predict_proba_batch(&batch.view());
    let clean = clean.row(0).to_vec();
    if entropy_unchecked(&clean) >= t_ent {
        return false;
    }
    let target = argmax(&clean);
    for t in aug.transforms.iter().chain(std::iter::once(&Transform::Identity)) {
        let xt = t.apply_array(&batch.view(), &mut rng);
        let pt = classifier.predict_proba_batch(&xt.view());
        let row = pt.row(0).to_vec();
        if entropy_unchecked(&row) >= t_ent || argmax(&row) != target {
            return false;
        }
    }
    true
}

// ---------------------------------------------------------------- similarity

/// `exp(-||a - b||² / (2σ²))`.
pub fn rbf_kernel(a: &[f64], b: &[f64], sigma: f64) -> Result<f64> {
    if sigma <= 0.0 {
        return Err(Error::invalid(format!("bandwidth {sigma} must be positive")));
    }
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "kernel arguments of width {} and {}",
            a.len(),
            b.len()
        )));
    }
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((-d2 / (2.0 * sigma * sigma)).exp())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimilarityInfo {
    pub metric: String,
    /// Bandwidth actually used (RBF only).
    pub sigma: Option<f64>,
}

/// Per-candidate similarity to the target exemplars:
/// `score(x) = Σ_e k(f(x), f(x_e))` in classifier feature space.
pub fn similarity_scores(
    d_prime: &SoftLabeledDataset,
    d_e_rho: &crate::data::LabeledDataset,
    classifier: &ClassifierModel,
    cfg: &FiltrationConfig,
) -> Result<(Vec<f64>, SimilarityInfo)> {
    if d_e_rho.is_empty() {
        return Err(Error::invalid("target exemplar set is empty"));
    }
    let cand = features_of_soft(classifier, d_prime);
    let idx: Vec<usize> = (0..d_e_rho.len()).collect();
    let ex_batch = d_e_rho.batch(&idx);
    let exemplars = classifier.extract_features_batch(&ex_batch.view());

    match &cfg.metric {
        SimilarityMetric::Rbf { bandwidth } => {
            let sigma = match bandwidth {
                BandwidthPolicy::Fixed(s) => *s,
                BandwidthPolicy::Median => median_pairwise_distance(&cand, &exemplars),
            };
            let sigma = if sigma > 0.0 { sigma } else { 1.0 };
            let scores = (0..cand.nrows())
                .map(|i| {
                    let fi = cand.row(i);
                    exemplars
                        .rows()
                        .into_iter()
                        .map(|fe| {
                            let d2: f64 =
                                fi.iter().zip(fe.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                            (-d2 / (2.0 * sigma * sigma)).exp()
                        })
                        .sum()
                })
                .collect();
            Ok((
                scores,
                SimilarityInfo {
                    metric: "rbf".into(),
                    sigma: Some(sigma),
                },
            ))
        }
        SimilarityMetric::Cosine => {
            let scores = (0..cand.nrows())
                .map(|i| {
                    let fi = cand.row(i);
                    let ni = norm(fi.as_slice().unwrap());
                    exemplars
                        .rows()
                        .into_iter()
                        .map(|fe| {
                            let ne = norm(fe.as_slice().unwrap());
                            if ni == 0.0 || ne == 0.0 {
                                0.0
                            } else {
                                fi.iter().zip(fe.iter()).map(|(a, b)| a * b).sum::<f64>()
                                    / (ni * ne)
                            }
                        })
                        .sum()
                })
                .collect();
            Ok((
                scores,
                SimilarityInfo {
                    metric: "cosine".into(),
                    sigma: None,
                },
            ))
        }
        SimilarityMetric::L2 => {
            let scores = (0..cand.nrows())
                .map(|i| {
                    let fi = cand.row(i);
                    -exemplars
                        .rows()
                        .into_iter()
                        .map(|fe| {
                            fi.iter()
                                .zip(fe.iter())
                                .map(|(a, b)| (a - b) * (a - b))
                                .sum::<f64>()
                                .sqrt()
                        })
                        .sum::<f64>()
                })
                .collect();
            Ok((
                scores,
                SimilarityInfo {
                    metric: "l2".into(),
                    sigma: None,
                },
            ))
        }
    }
}

fn features_of_soft(classifier: &ClassifierModel, d: &SoftLabeledDataset) -> Array2<f64> {
    let chunk = 256;
    let mut rows: Vec<Array2<f64>> = Vec::new();
    let mut i = 0;
    while i < d.len() {
        let hi = (i + chunk).min(d.len());
        let idx: Vec<usize> = (i..hi).collect();
        let batch = d.batch(&idx);
        rows.push(classifier.extract_features_batch(&batch.view()));
        i = hi;
    }
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    ndarray::concatenate(Axis(0), &views).unwrap()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|&x| x * x).sum::<f64>().sqrt()
}

fn median_pairwise_distance(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let mut dists = Vec::with_capacity(a.nrows() * b.nrows());
    for fa in a.rows() {
        for fb in b.rows() {
            let d2: f64 = fa.iter().zip(fb.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
            dists.push(d2.sqrt());
        }
    }
    dists.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let n = dists.len();
    if n == 0 {
        return 1.0;
    }
    if n % 2 == 1 {
        dists[n / 2]
    } else {
        0.5 * (dists[n / 2 - 1] + dists[n / 2])
    }
}

// ---------------------------------------------------------------- knee

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct KneePoint {
    /// Index into the ascending-sorted score list.
    pub sorted_index: usize,
    /// The raw score value at the knee.
    pub value: f64,
}

/// Kneedle on the ascending-sorted scores. Returns the knee, or `None` when
/// the curve has no qualifying knee (e.g. it is a straight line).
///
/// The difference curve `y_norm - x_norm` is evaluated after min-max
/// normalizing both axes; a convex-increasing curve is first flipped into the
/// concave-increasing orientation. A local maximum qualifies when some later
/// point (before the next local maximum) drops below it by the
/// sensitivity-scaled mean spacing; the largest qualifying maximum wins.
pub fn knee_point(scores: &[f64], sensitivity: f64) -> Result<Option<KneePoint>> {
    if scores.len() < 4 {
        return Err(Error::invalid(format!(
            "knee detection needs at least 4 scores, got {}",
            scores.len()
        )));
    }
    if !(sensitivity > 0.0) {
        return Err(Error::invalid("sensitivity must be positive"));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let (lo, hi) = (sorted[0], sorted[n - 1]);
    if hi == lo {
        return Ok(None);
    }
    let y_norm: Vec<f64> = sorted.iter().map(|&v| (v - lo) / (hi - lo)).collect();
    let x_norm: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();

    // orientation: concave curves sit above the diagonal
    let above: f64 = y_norm
        .iter()
        .zip(&x_norm)
        .map(|(y, x)| y - x)
        .sum();
    let convex = above < 0.0;
    let d: Vec<f64> = if convex {
        // flip both axes to obtain a concave-increasing curve
        (0..n).map(|i| 1.0 - y_norm[n - 1 - i] - x_norm[i]).collect()
    } else {
        (0..n).map(|i| y_norm[i] - x_norm[i]).collect()
    };

    let mut maxima = Vec::new();
    for i in 1..n - 1 {
        if d[i] > d[i - 1] && d[i] >= d[i + 1] {
            maxima.push(i);
        }
    }
    let step = sensitivity / (n - 1) as f64;
    let mut best: Option<usize> = None;
    for (m, &i) in maxima.iter().enumerate() {
        let end = maxima.get(m + 1).copied().unwrap_or(n);
        let threshold = d[i] - step;
        if (i + 1..end).any(|j| d[j] < threshold) {
            best = match best {
                Some(b) if d[b] >= d[i] => Some(b),
                _ => Some(i),
            };
        }
    }
    Ok(best.map(|i| {
        let sorted_index = if convex { n - 1 - i } else { i };
        KneePoint {
            sorted_index,
            value: sorted[sorted_index],
        }
    }))
}

/// The similarity threshold `t_f`: the raw score at the knee, or `+∞` when no
/// knee exists (nothing gets flagged).
pub fn knee_threshold(scores: &[f64], sensitivity: f64) -> Result<f64> {
    Ok(knee_point(scores, sensitivity)?
        .map(|k| k.value)
        .unwrap_or(f64::INFINITY))
}

// ---------------------------------------------------------------- relabel

/// Zero the mass on every target class and renormalize. If effectively no
/// mass remains, fall back to the uniform distribution over the non-target
/// classes.
pub fn relabel(soft_label: &[f64], target_classes: &BTreeSet<u32>) -> Result<Vec<f64>> {
    let k = soft_label.len();
    check_simplex(soft_label, k)?;
    if target_classes.is_empty() {
        return Err(Error::invalid("target class set is empty"));
    }
    if target_classes.len() >= k {
        return Err(Error::invalid(
            "cannot zero every class: target set must be a proper subset",
        ));
    }
    if let Some(&t) = target_classes.iter().find(|&&t| t as usize >= k) {
        return Err(Error::invalid(format!("target class {t} out of range")));
    }
    let mut out: Vec<f64> = soft_label
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if target_classes.contains(&(i as u32)) {
                0.0
            } else {
                v.max(0.0)
            }
        })
        .collect();
    let mass: f64 = out.iter().sum();
    if mass < 1e-8 {
        let free = (k - target_classes.len()) as f64;
        for (i, v) in out.iter_mut().enumerate() {
            *v = if target_classes.contains(&(i as u32)) {
                0.0
            } else {
                1.0 / free
            };
        }
    } else {
        for v in out.iter_mut() {
            *v /= mass;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------- assembly

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FiltrationStats {
    pub n_candidates: usize,
    pub n_flagged: usize,
    pub n_retained: usize,
    pub t_f: f64,
    pub score_min: f64,
    pub score_mean: f64,
    pub score_median: f64,
    pub score_max: f64,
}

/// Split candidates by `score ≥ t_f`, relabel the flagged side away from the
/// target classes, and reassemble (item count preserved). Returns the
/// relearning set, the per-item flags, and summary statistics.
pub fn build_unlearn_set(
    d_prime: &SoftLabeledDataset,
    scores: &[f64],
    t_f: f64,
    target_classes: &BTreeSet<u32>,
) -> Result<(SoftLabeledDataset, Vec<bool>, FiltrationStats)> {
    if scores.len() != d_prime.len() {
        return Err(Error::invalid(format!(
            "{} scores for {} candidates",
            scores.len(),
            d_prime.len()
        )));
    }
    let mut inputs = Vec::with_capacity(d_prime.len());
    let mut labels = Vec::with_capacity(d_prime.len());
    let mut prov = Vec::with_capacity(d_prime.len());
    let mut flags = Vec::with_capacity(d_prime.len());
    let mut n_flagged = 0;
    for i in 0..d_prime.len() {
        let flagged = scores[i] >= t_f;
        flags.push(flagged);
        inputs.push(d_prime.input(i).clone());
        prov.push(d_prime.provenance(i));
        if flagged {
            n_flagged += 1;
            labels.push(relabel(d_prime.soft_label(i), target_classes)?);
        } else {
            labels.push(d_prime.soft_label(i).to_vec());
        }
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let stats = FiltrationStats {
        n_candidates: d_prime.len(),
        n_flagged,
        n_retained: d_prime.len() - n_flagged,
        t_f,
        score_min: sorted.first().copied().unwrap_or(f64::NAN),
        score_mean: scores.iter().sum::<f64>() / scores.len().max(1) as f64,
        score_median: sorted.get(sorted.len() / 2).copied().unwrap_or(f64::NAN),
        score_max: sorted.last().copied().unwrap_or(f64::NAN),
    };
    let out = SoftLabeledDataset::new(
        inputs,
        labels,
        prov,
        d_prime.num_classes(),
        d_prime.input_shape().to_vec(),
    )?;
    Ok((out, flags, stats))
}

/// `scores.csv`: one row per candidate with its provenance and flag.
pub fn write_scores_csv(
    d_prime: &SoftLabeledDataset,
    scores: &[f64],
    flags: &[bool],
    path: &Path,
) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "index,conditioning_label,score,flagged")?;
    for i in 0..d_prime.len() {
        writeln!(
            f,
            "{},{},{},{}",
            i,
            d_prime.provenance(i).conditioning_label,
            scores[i],
            flags[i] as u8
        )?;
    }
    f.flush()?;
    Ok(())
}

/// Contents of `threshold.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ThresholdInfo {
    pub t_f: f64,
    pub sigma: Option<f64>,
    pub sensitivity: f64,
    pub knee_index: Option<usize>,
    pub metric: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rbf_kernel_values() {
        let a = [1.0, 2.0, 3.0];
        assert_eq!(rbf_kernel(&a, &a, 0.7).unwrap(), 1.0);
        // ||a-b||² = 2σ² -> e^{-1}
        let sigma = 1.3f64;
        let b = [1.0 + (2.0f64).sqrt() * sigma, 2.0, 3.0];
        let v = rbf_kernel(&a, &b, sigma).unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-12);
        // symmetry
        let c = [0.3, -0.4, 1.9];
        assert_eq!(
            rbf_kernel(&a, &c, 0.9).unwrap(),
            rbf_kernel(&c, &a, 0.9).unwrap()
        );
        assert!(rbf_kernel(&a, &a, 0.0).is_err());
        assert!(rbf_kernel(&a, &[1.0], 1.0).is_err());
    }

    #[test]
    fn knee_on_two_segment_curve() {
        let scores = [0.0, 1.0, 2.0, 3.0, 4.0, 14.0, 24.0, 34.0];
        let k = knee_point(&scores, 1.0).unwrap().unwrap();
        assert_eq!(k.value, 4.0);
        assert_eq!(k.sorted_index, 4);
        assert_eq!(knee_threshold(&scores, 1.0).unwrap(), 4.0);
    }

    #[test]
    fn knee_is_permutation_invariant() {
        let scores = [24.0, 0.0, 34.0, 2.0, 4.0, 1.0, 14.0, 3.0];
        assert_eq!(knee_threshold(&scores, 1.0).unwrap(), 4.0);
    }

    #[test]
    fn straight_line_has_no_knee() {
        let scores: Vec<f64> = (0..12).map(|i| 2.0 * i as f64 + 5.0).collect();
        assert_eq!(knee_threshold(&scores, 1.0).unwrap(), f64::INFINITY);
        // flat scores too
        let flat = vec![3.0; 8];
        assert_eq!(knee_threshold(&flat, 1.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn knee_rejects_short_input() {
        assert!(knee_point(&[1.0, 2.0, 3.0], 1.0).is_err());
    }

    #[test]
    fn knee_on_concave_two_segment_matches_chord_oracle() {
        // concave increasing: steep first segment, shallow second
        let mut scores = Vec::new();
        for i in 0..10 {
            scores.push(5.0 * i as f64);
        }
        for i in 0..30 {
            scores.push(45.0 + 0.5 * (i + 1) as f64);
        }
        let k = knee_point(&scores, 1.0).unwrap().unwrap();
        // chord oracle: farthest point from the chord in normalized space
        let n = scores.len();
        let (lo, hi) = (scores[0], scores[n - 1]);
        let mut best = (0usize, f64::MIN);
        for i in 0..n {
            let x = i as f64 / (n - 1) as f64;
            let y = (scores[i] - lo) / (hi - lo);
            let dist = (y - x).abs();
            if dist > best.1 {
                best = (i, dist);
            }
        }
        assert_eq!(k.sorted_index, best.0);
    }

    #[test]
    fn relabel_values() {
        let t0: BTreeSet<u32> = [0].into_iter().collect();
        let out = relabel(&[0.7, 0.2, 0.1], &t0).unwrap();
        assert!((out[0] - 0.0).abs() < 1e-12);
        assert!((out[1] - 2.0 / 3.0).abs() < 1e-12);
        assert!((out[2] - 1.0 / 3.0).abs() < 1e-12);
        // already zero on targets: unchanged
        let out = relabel(&[0.0, 0.4, 0.6], &t0).unwrap();
        assert_eq!(out, vec![0.0, 0.4, 0.6]);
        // degenerate: all mass on the target falls back to uniform
        let out = relabel(&[1.0, 0.0, 0.0], &t0).unwrap();
        assert_eq!(out, vec![0.0, 0.5, 0.5]);
        // zeroing everything is an error
        let all: BTreeSet<u32> = [0, 1, 2].into_iter().collect();
        assert!(relabel(&[0.5, 0.3, 0.2], &all).is_err());
        let none: BTreeSet<u32> = BTreeSet::new();
        assert!(relabel(&[0.5, 0.3, 0.2], &none).is_err());
    }

    fn toy_soft_set(n: usize) -> SoftLabeledDataset {
        let inputs = (0..n)
            .map(|i| ArrayD::from_elem(IxDyn(&[2]), i as f64))
            .collect();
        let soft = (0..n)
            .map(|i| {
                let p = (i % 10) as f64 / 20.0 + 0.1;
                vec![p, 1.0 - p]
            })
            .collect();
        let prov = (0..n)
            .map(|i| Provenance {
                draw_index: i as u64,
                conditioning_label: (i % 2) as u32,
            })
            .collect();
        SoftLabeledDataset::new(inputs, soft, prov, 2, vec![2]).unwrap()
    }

    #[test]
    fn unlearn_set_preserves_count_and_flags_monotonically() {
        let d = toy_soft_set(20);
        let scores: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let targets: BTreeSet<u32> = [0].into_iter().collect();

        let (all, flags, stats) = build_unlearn_set(&d, &scores, f64::NEG_INFINITY, &targets).unwrap();
        assert_eq!(all.len(), d.len());
        assert!(flags.iter().all(|&f| f));
        assert_eq!(stats.n_flagged, 20);

        let (none, flags, stats) = build_unlearn_set(&d, &scores, f64::INFINITY, &targets).unwrap();
        assert_eq!(none.len(), d.len());
        assert!(flags.iter().all(|&f| !f));
        assert_eq!(stats.n_flagged, 0);
        for i in 0..none.len() {
            assert_eq!(none.soft_label(i), d.soft_label(i));
        }

        // lowering t_f only grows the flag set
        let mut prev: Option<Vec<bool>> = None;
        for t in [15.0, 10.0, 5.0, 0.0] {
            let (_, flags, _) = build_unlearn_set(&d, &scores, t, &targets).unwrap();
            if let Some(p) = &prev {
                for (was, now) in p.iter().zip(&flags) {
                    assert!(!was || *now, "flag set shrank when t_f dropped");
                }
            }
            prev = Some(flags);
        }

        // flagged items carry zero target mass
        let (set, flags, _) = build_unlearn_set(&d, &scores, 10.0, &targets).unwrap();
        for i in 0..set.len() {
            if flags[i] {
                assert_eq!(set.soft_label(i)[0], 0.0);
            }
            let s: f64 = set.soft_label(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn soft_dataset_round_trip() {
        let d = toy_soft_set(7);
        let dir = std::env::temp_dir().join(format!("unlearn-soft-{}", std::process::id()));
        d.save(&dir).unwrap();
        let back = SoftLabeledDataset::load(&dir).unwrap();
        assert_eq!(back.len(), d.len());
        for i in 0..d.len() {
            assert_eq!(back.provenance(i), d.provenance(i));
            for (a, b) in d.soft_label(i).iter().zip(back.soft_label(i)) {
                assert!((a - b).abs() < 1e-6);
            }
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
