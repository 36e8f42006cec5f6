//! Datasets of the unlearning problem: construction, label corruption, class
//! splits, ρ-subsampling, and the on-disk container format.
//!
//! The same type carries all the dataset roles (full training set, target set
//! D_e, retained set D_r, and the ρ-subsampled D_{e,ρ}).

use crate::error::{Error, Result};
use crate::util;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

/// Inputs with hard integer labels. Iteration order is part of the value.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    inputs: Vec<ArrayD<f64>>,
    labels: Vec<u32>,
    num_classes: usize,
    input_shape: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(
        inputs: Vec<ArrayD<f64>>,
        labels: Vec<u32>,
        num_classes: usize,
        input_shape: Vec<usize>,
    ) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} inputs vs {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::invalid(format!(
                "label {l} out of range for {num_classes} classes"
            )));
        }
        if let Some(x) = inputs.iter().find(|x| x.shape() != input_shape.as_slice()) {
            return Err(Error::shape(format!(
                "input shape {:?} does not match declared {:?}",
                x.shape(),
                input_shape
            )));
        }
        Ok(LabeledDataset {
            inputs,
            labels,
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

    pub fn label(&self, i: usize) -> u32 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ArrayD<f64>, u32)> {
        self.inputs.iter().zip(self.labels.iter().copied())
    }

    /// Stack the selected items into a `[B, ...input_shape]` batch tensor.
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

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            inputs: indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            input_shape: self.input_shape.clone(),
        }
    }

    /// Same inputs, new labels.
    pub fn with_labels(&self, labels: Vec<u32>) -> Result<LabeledDataset> {
        LabeledDataset::new(
            self.inputs.clone(),
            labels,
            self.num_classes,
            self.input_shape.clone(),
        )
    }

    /// Deterministic split into train/test with per-class stratification.
    pub fn stratified_split(&self, test_fraction: f64, seed: u64) -> (LabeledDataset, LabeledDataset) {
        let mut rng = util::rng_from(util::derive_seed(seed, "stratified-split"));
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l as usize].push(i);
        }
        let mut train_idx = Vec::new();
        let mut test_idx = Vec::new();
        for class_items in by_class {
            let perm = util::shuffled_indices(&mut rng, class_items.len());
            let n_test = (class_items.len() as f64 * test_fraction).round() as usize;
            for (k, &p) in perm.iter().enumerate() {
                if k < n_test {
                    test_idx.push(class_items[p]);
                } else {
                    train_idx.push(class_items[p]);
                }
            }
        }
        train_idx.sort_unstable();
        test_idx.sort_unstable();
        (self.subset(&train_idx), self.subset(&test_idx))
    }

    /// Keep at most `max` items, chosen by a seeded shuffle.
    pub fn truncate(&self, max: usize, seed: u64) -> LabeledDataset {
        if self.len() <= max {
            return self.clone();
        }
        let mut rng = util::rng_from(util::derive_seed(seed, "truncate"));
        let mut idx = util::shuffled_indices(&mut rng, self.len());
        idx.truncate(max);
        idx.sort_unstable();
        self.subset(&idx)
    }
}

/// How the target behavior is carved out of a dataset.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub target_classes: BTreeSet<u32>,
    #[serde(default)]
    pub source_class: Option<u32>,
    pub rho: f64,
    /// Fraction of the source class to corrupt (mislabel mode). 1.0 corrupts
    /// every source item.
    #[serde(default = "default_one")]
    pub corrupt_fraction: f64,
    /// Class-removal of a spatial sub-cluster instead of the whole class:
    /// the target set becomes this many target-class points closest to the
    /// rest of the data (see [`region_removal_split`]).
    #[serde(default)]
    pub region_count: Option<usize>,
}

fn default_one() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    ClassRemoval,
    MislabelCorrection,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.target_classes.is_empty() {
            return Err(Error::invalid("target_classes must be non-empty"));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::invalid(format!("rho {} outside (0, 1]", self.rho)));
        }
        if self.mode == SplitMode::MislabelCorrection {
            let Some(src) = self.source_class else {
                return Err(Error::invalid("mislabel-correction needs a source_class"));
            };
            if self.target_classes.contains(&src) {
                return Err(Error::invalid(
                    "target_classes must be disjoint from the source class",
                ));
            }
            if !(self.corrupt_fraction > 0.0 && self.corrupt_fraction <= 1.0) {
                return Err(Error::invalid("corrupt_fraction outside (0, 1]"));
            }
        }
        Ok(())
    }
}

/// Two interleaving half-circles in R^2 with isotropic Gaussian noise.
pub fn make_moons(n: usize, noise: f64, seed: u64) -> Result<LabeledDataset> {
    if noise < 0.0 {
        return Err(Error::invalid(format!("negative noise {noise}")));
    }
    let mut rng = util::rng_from(util::derive_seed(seed, "moons"));
    let n_outer = n / 2;
    let n_inner = n - n_outer;
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let arc = |i: usize, m: usize| -> f64 {
        if m <= 1 {
            0.0
        } else {
            std::f64::consts::PI * i as f64 / (m - 1) as f64
        }
    };
    for i in 0..n_outer {
        let t = arc(i, n_outer);
        let x = [t.cos(), t.sin()];
        inputs.push((x, 0u32));
    }
    for i in 0..n_inner {
        let t = arc(i, n_inner);
        let x = [1.0 - t.cos(), 0.5 - t.sin()];
        inputs.push((x, 1u32));
    }
    let mut out = Vec::with_capacity(n);
    for (mut x, l) in inputs {
        x[0] += noise * util::sample_normal(&mut rng);
        x[1] += noise * util::sample_normal(&mut rng);
        out.push(ArrayD::from_shape_vec(IxDyn(&[2]), x.to_vec()).unwrap());
        labels.push(l);
    }
    LabeledDataset::new(out, labels, 2, vec![2])
}

/// Replace the label of every `source_class` item with a uniform draw from
/// `target_classes`. Returns the corrupted dataset and the set of modified
/// items (carrying their corrupted labels).
pub fn corrupt_labels(
    d: &LabeledDataset,
    source_class: u32,
    target_classes: &BTreeSet<u32>,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !d.labels().contains(&source_class) {
        return Err(Error::invalid(format!(
            "source class {source_class} absent from dataset"
        )));
    }
    if target_classes.is_empty() || target_classes.contains(&source_class) {
        return Err(Error::invalid(
            "target_classes must be non-empty and disjoint from source_class",
        ));
    }
    if let Some(&t) = target_classes.iter().find(|&&t| t as usize >= d.num_classes()) {
        return Err(Error::invalid(format!("target class {t} out of range")));
    }
    let targets: Vec<u32> = target_classes.iter().copied().collect();
    let mut rng = util::rng_from(util::derive_seed(seed, "corrupt-labels"));
    let mut labels = d.labels().to_vec();
    let mut modified = Vec::new();
    for (i, l) in labels.iter_mut().enumerate() {
        if *l == source_class {
            *l = targets[rng.gen_range(0..targets.len())];
            modified.push(i);
        }
    }
    let corrupted = d.with_labels(labels)?;
    let d_e = corrupted.subset(&modified);
    Ok((corrupted, d_e))
}

/// Partition off a coherent spatial sub-cluster of one class: the `count`
/// points of `target_class` closest to the centroid of the other classes.
/// On interleaved point data this selects the region whose removal lets the
/// opposing class claim the territory. Returns `(D_r, D_e)`.
pub fn region_removal_split(
    d: &LabeledDataset,
    target_class: u32,
    count: usize,
) -> Result<(LabeledDataset, LabeledDataset)> {
    let mut others = vec![0.0; d.input_shape().iter().product()];
    let mut n_others = 0usize;
    for (x, l) in d.iter() {
        if l != target_class {
            for (acc, &v) in others.iter_mut().zip(x.iter()) {
                *acc += v;
            }
            n_others += 1;
        }
    }
    if n_others == 0 {
        return Err(Error::invalid("no points outside the target class"));
    }
    for v in others.iter_mut() {
        *v /= n_others as f64;
    }
    let mut members: Vec<usize> = (0..d.len())
        .filter(|&i| d.label(i) == target_class)
        .collect();
    if members.len() < count {
        return Err(Error::invalid(format!(
            "asked for a region of {count} items but class {target_class} has {}",
            members.len()
        )));
    }
    let dist = |i: usize| -> f64 {
        d.input(i)
            .iter()
            .zip(&others)
            .map(|(&v, &c)| (v - c) * (v - c))
            .sum()
    };
    members.sort_by(|&a, &b| dist(a).partial_cmp(&dist(b)).unwrap().then(a.cmp(&b)));
    let region: BTreeSet<usize> = members.into_iter().take(count).collect();
    let keep: Vec<usize> = (0..d.len()).filter(|i| !region.contains(i)).collect();
    let region_idx: Vec<usize> = region.into_iter().collect();
    Ok((d.subset(&keep), d.subset(&region_idx)))
}

/// Partition into (D_r, D_e) where D_e holds every item of `target_class`.
pub fn class_removal_split(
    d: &LabeledDataset,
    target_class: u32,
) -> (LabeledDataset, LabeledDataset) {
    let (mut keep, mut remove) = (Vec::new(), Vec::new());
    for i in 0..d.len() {
        if d.label(i) == target_class {
            remove.push(i);
        } else {
            keep.push(i);
        }
    }
    (d.subset(&keep), d.subset(&remove))
}

/// Bernoulli(ρ) thinning of D_e, so `E[|result|] = ρ |D_e|`.
pub fn sample_target_subset(d_e: &LabeledDataset, rho: f64, seed: u64) -> Result<LabeledDataset> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::invalid(format!("rho {rho} outside (0, 1]")));
    }
    let mut rng = util::rng_from(util::derive_seed(seed, "rho-subsample"));
    let kept: Vec<usize> = (0..d_e.len())
        .filter(|_| rng.gen::<f64>() < rho)
        .collect();
    Ok(d_e.subset(&kept))
}

// ---------------------------------------------------------------- container IO

#[derive(Serialize, Deserialize)]
struct ContainerMeta {
    num_classes: usize,
    input_shape: Vec<usize>,
    count: usize,
    dtype: String,
}

/// Write the dataset container: `meta.json` plus row-major little-endian
/// `inputs.bin` (f32) and `labels.bin` (u32).
pub fn save_container(d: &LabeledDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let meta = ContainerMeta {
        num_classes: d.num_classes(),
        input_shape: d.input_shape().to_vec(),
        count: d.len(),
        dtype: "f32".to_string(),
    };
    let mut mf = std::fs::File::create(dir.join("meta.json"))?;
    serde_json::to_writer_pretty(&mut mf, &meta)?;
    mf.write_all(b"\n")?;

    let mut inputs = std::io::BufWriter::new(std::fs::File::create(dir.join("inputs.bin"))?);
    for i in 0..d.len() {
        for &v in d.input(i).as_slice().expect("standard layout") {
            inputs.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    inputs.flush()?;

    let mut labels = std::io::BufWriter::new(std::fs::File::create(dir.join("labels.bin"))?);
    for &l in d.labels() {
        labels.write_all(&l.to_le_bytes())?;
    }
    labels.flush()?;
    Ok(())
}

pub fn load_container(dir: &Path) -> Result<LabeledDataset> {
    let meta_path = dir.join("meta.json");
    if !meta_path.exists() {
        return Err(Error::MissingArtifact(meta_path));
    }
    let meta: ContainerMeta = serde_json::from_reader(std::fs::File::open(meta_path)?)?;
    let item_len: usize = meta.input_shape.iter().product();

    let mut raw = Vec::new();
    std::fs::File::open(dir.join("inputs.bin"))?.read_to_end(&mut raw)?;
    if raw.len() != meta.count * item_len * 4 {
        return Err(Error::Checkpoint(format!(
            "inputs.bin holds {} bytes, expected {}",
            raw.len(),
            meta.count * item_len * 4
        )));
    }
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
    std::fs::File::open(dir.join("labels.bin"))?.read_to_end(&mut raw)?;
    if raw.len() != meta.count * 4 {
        return Err(Error::Checkpoint(format!(
            "labels.bin holds {} bytes, expected {}",
            raw.len(),
            meta.count * 4
        )));
    }
    let labels: Vec<u32> = raw
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();

    LabeledDataset::new(inputs, labels, meta.num_classes, meta.input_shape)
}

/// CSV export for 2-d point datasets, header `x0,x1,label`.
pub fn export_moons_csv(d: &LabeledDataset, path: &Path) -> Result<()> {
    if d.input_shape() != [2] {
        return Err(Error::shape(format!(
            "csv export expects shape [2], got {:?}",
            d.input_shape()
        )));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "x0,x1,label")?;
    for (x, l) in d.iter() {
        writeln!(f, "{},{},{}", x[IxDyn(&[0])], x[IxDyn(&[1])], l)?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moons_shape_and_determinism() {
        let d = make_moons(100, 0.1, 7).unwrap();
        assert_eq!(d.len(), 100);
        assert_eq!(d.num_classes(), 2);
        assert_eq!(d.labels().iter().filter(|&&l| l == 0).count(), 50);
        let d2 = make_moons(100, 0.1, 7).unwrap();
        assert_eq!(d, d2);
        let d3 = make_moons(100, 0.1, 8).unwrap();
        assert_ne!(d, d3);
    }

    #[test]
    fn moons_empty() {
        let d = make_moons(0, 0.1, 7).unwrap();
        assert!(d.is_empty());
    }

    #[test]
    fn moons_rejects_negative_noise() {
        assert!(make_moons(10, -0.1, 7).is_err());
    }

    #[test]
    fn corrupt_labels_definition() {
        // 10-class toy set: 30 items of class 7, a few of others
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            inputs.push(ArrayD::from_elem(IxDyn(&[2]), i as f64));
            labels.push(if i < 30 { 7 } else { (i % 7) as u32 });
        }
        let d = LabeledDataset::new(inputs, labels, 10, vec![2]).unwrap();
        let targets: BTreeSet<u32> = [2, 3].into_iter().collect();
        let (corrupted, d_e) = corrupt_labels(&d, 7, &targets, 1).unwrap();
        assert_eq!(d_e.len(), 30);
        assert!(d_e.labels().iter().all(|l| targets.contains(l)));
        assert_eq!(corrupted.len(), d.len());
        assert!(!corrupted.labels().contains(&7));
        // inputs untouched
        for i in 0..d.len() {
            assert_eq!(d.input(i), corrupted.input(i));
        }
        // singleton target: every corrupted label equals it
        let single: BTreeSet<u32> = [4].into_iter().collect();
        let (_, d_e) = corrupt_labels(&d, 7, &single, 1).unwrap();
        assert!(d_e.labels().iter().all(|&l| l == 4));
    }

    #[test]
    fn corrupt_labels_near_uniform() {
        // 300 corrupted items over 3 targets: each count within 3 sigma of 100
        let inputs = (0..300)
            .map(|i| ArrayD::from_elem(IxDyn(&[1]), i as f64))
            .collect();
        let labels = vec![0u32; 300];
        let d = LabeledDataset::new(inputs, labels, 4, vec![1]).unwrap();
        let targets: BTreeSet<u32> = [1, 2, 3].into_iter().collect();
        let (_, d_e) = corrupt_labels(&d, 0, &targets, 3).unwrap();
        let sigma = (300.0f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
        for t in [1u32, 2, 3] {
            let count = d_e.labels().iter().filter(|&&l| l == t).count() as f64;
            assert!(
                (count - 100.0).abs() <= 3.0 * sigma,
                "class {t}: count {count}"
            );
        }
    }

    #[test]
    fn corrupt_labels_missing_source() {
        let d = make_moons(10, 0.0, 1).unwrap();
        let targets: BTreeSet<u32> = [0].into_iter().collect();
        assert!(corrupt_labels(&d, 5, &targets, 1).is_err());
    }

    #[test]
    fn class_removal_is_a_partition() {
        let d = make_moons(100, 0.1, 3).unwrap();
        let (d_r, d_e) = class_removal_split(&d, 1);
        assert_eq!(d_r.len() + d_e.len(), d.len());
        assert!(d_e.labels().iter().all(|&l| l == 1));
        assert!(d_r.labels().iter().all(|&l| l != 1));
        // absent class: D_e empty
        let (d_r, d_e) = class_removal_split(&d, 5u32.min(d.num_classes() as u32 - 1).max(2));
        let _ = d_r;
        assert!(d_e.is_empty() || d.num_classes() > 2);
    }

    #[test]
    fn subsample_identity_and_subset() {
        let d = make_moons(40, 0.1, 3).unwrap();
        let all = sample_target_subset(&d, 1.0, 9).unwrap();
        assert_eq!(all, d);
        let some = sample_target_subset(&d, 0.3, 9).unwrap();
        // every kept item appears in d at the same relative order
        let mut cursor = 0;
        'outer: for (x, l) in some.iter() {
            while cursor < d.len() {
                if d.input(cursor) == x && d.label(cursor) == l {
                    cursor += 1;
                    continue 'outer;
                }
                cursor += 1;
            }
            panic!("kept item not found in source order");
        }
        assert!(sample_target_subset(&d, 0.0, 9).is_err());
        assert!(sample_target_subset(&d, 1.2, 9).is_err());
    }

    #[test]
    fn subsample_mean_matches_binomial() {
        // |D_e| = 100, rho = 0.03: mean kept over 1000 seeds within 3 sigma of 3
        let inputs = (0..100)
            .map(|i| ArrayD::from_elem(IxDyn(&[1]), i as f64))
            .collect();
        let d = LabeledDataset::new(inputs, vec![0; 100], 1, vec![1]).unwrap();
        let mut total = 0usize;
        let runs = 1000;
        for seed in 0..runs {
            total += sample_target_subset(&d, 0.03, seed).unwrap().len();
        }
        let mean = total as f64 / runs as f64;
        let sigma_mean = (100.0f64 * 0.03 * 0.97).sqrt() / (runs as f64).sqrt();
        assert!(
            (mean - 3.0).abs() <= 3.0 * sigma_mean,
            "mean {mean}, sigma {sigma_mean}"
        );
    }

    #[test]
    fn region_removal_picks_the_interleaved_cluster() {
        let d = make_moons(100, 0.05, 7).unwrap();
        let (d_r, d_e) = region_removal_split(&d, 1, 20).unwrap();
        assert_eq!(d_e.len(), 20);
        assert_eq!(d_r.len(), 80);
        assert!(d_e.labels().iter().all(|&l| l == 1));
        // every selected point lies closer to the class-0 centroid than any
        // retained class-1 point
        let centroid: Vec<f64> = {
            let mut c = vec![0.0; 2];
            let mut n = 0;
            for (x, l) in d.iter() {
                if l == 0 {
                    c[0] += x[IxDyn(&[0])];
                    c[1] += x[IxDyn(&[1])];
                    n += 1;
                }
            }
            c.iter().map(|v| v / n as f64).collect()
        };
        let dist = |x: &ndarray::ArrayD<f64>| -> f64 {
            (x[IxDyn(&[0])] - centroid[0]).powi(2) + (x[IxDyn(&[1])] - centroid[1]).powi(2)
        };
        let max_region = d_e.iter().map(|(x, _)| dist(x)).fold(f64::MIN, f64::max);
        let min_kept = d_r
            .iter()
            .filter(|(_, l)| *l == 1)
            .map(|(x, _)| dist(x))
            .fold(f64::MAX, f64::min);
        assert!(max_region <= min_kept);
        // region removal of more items than the class holds is an error
        assert!(region_removal_split(&d, 1, 60).is_err());
    }

    #[test]
    fn container_round_trip() {
        let d = make_moons(25, 0.1, 2).unwrap();
        let dir = std::env::temp_dir().join(format!("unlearn-container-{}", std::process::id()));
        save_container(&d, &dir).unwrap();
        let back = load_container(&dir).unwrap();
        assert_eq!(back.len(), d.len());
        assert_eq!(back.labels(), d.labels());
        for i in 0..d.len() {
            for (a, b) in d.input(i).iter().zip(back.input(i).iter()) {
                assert!((a - b).abs() < 1e-6); // f32 round trip
            }
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn stratified_split_covers_classes() {
        let d = make_moons(100, 0.1, 4).unwrap();
        let (train, test) = d.stratified_split(0.2, 11);
        assert_eq!(train.len() + test.len(), 100);
        assert_eq!(test.len(), 20);
        for c in 0..2u32 {
            assert!(train.labels().contains(&c));
            assert!(test.labels().contains(&c));
        }
    }
}
