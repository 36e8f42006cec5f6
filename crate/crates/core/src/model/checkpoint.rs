//! Checkpoint layout shared by classifiers and generators: `arch.json` with
//! the architecture descriptor, `weights.bin` with the flat little-endian f32
//! parameter vector in descriptor order, and `bn_stats.json` with the running
//! statistics. Values round-trip through f32, so a loaded model is the
//! canonical form of a saved one.

use crate::error::{Error, Result};
use crate::nn::BatchNorm;
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use super::{ClassifierArch, ClassifierModel};

#[derive(Serialize, Deserialize)]
pub(crate) struct BnStatsFile {
    pub layers: Vec<BnLayerStats>,
}

#[derive(Serialize, Deserialize)]
pub(crate) struct BnLayerStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

pub(crate) fn write_weights(params: &[&mut ArrayD<f64>], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in params {
        for &v in p.iter() {
            f.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

pub(crate) fn read_weights(params: &mut [&mut ArrayD<f64>], path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;
    let expect: usize = params.iter().map(|p| p.len()).sum::<usize>() * 4;
    if raw.len() != expect {
        return Err(Error::Checkpoint(format!(
            "{} holds {} bytes, architecture needs {}",
            path.display(),
            raw.len(),
            expect
        )));
    }
    let mut off = 0;
    for p in params.iter_mut() {
        for v in p.iter_mut() {
            *v = f32::from_le_bytes(raw[off..off + 4].try_into().unwrap()) as f64;
            off += 4;
        }
    }
    Ok(())
}

pub(crate) fn write_bn_stats(layers: Vec<&mut BatchNorm>, path: &Path) -> Result<()> {
    let file = BnStatsFile {
        layers: layers
            .iter()
            .map(|bn| BnLayerStats {
                mean: bn.running_mean.iter().map(|&v| v as f32).collect(),
                var: bn.running_var.iter().map(|&v| v as f32).collect(),
            })
            .collect(),
    };
    let mut f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, &file)?;
    f.write_all(b"\n")?;
    Ok(())
}

pub(crate) fn read_bn_stats(layers: Vec<&mut BatchNorm>, path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let file: BnStatsFile = serde_json::from_reader(std::fs::File::open(path)?)?;
    if file.layers.len() != layers.len() {
        return Err(Error::Checkpoint(format!(
            "{} describes {} BN layers, architecture has {}",
            path.display(),
            file.layers.len(),
            layers.len()
        )));
    }
    for (bn, stats) in layers.into_iter().zip(file.layers) {
        if stats.mean.len() != bn.running_mean.len() {
            return Err(Error::Checkpoint("BN channel width mismatch".into()));
        }
        for (dst, &src) in bn.running_mean.iter_mut().zip(stats.mean.iter()) {
            *dst = src as f64;
        }
        for (dst, &src) in bn.running_var.iter_mut().zip(stats.var.iter()) {
            *dst = src as f64;
        }
    }
    Ok(())
}

pub(crate) fn save_classifier(model: &mut ClassifierModel, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut f = std::fs::File::create(dir.join("arch.json"))?;
    serde_json::to_writer_pretty(&mut f, &model.arch)?;
    f.write_all(b"\n")?;
    write_weights(&model.net.params_mut(), &dir.join("weights.bin"))?;
    write_bn_stats(model.net.bn_layers_mut(), &dir.join("bn_stats.json"))?;
    Ok(())
}

pub(crate) fn load_classifier(dir: &Path) -> Result<ClassifierModel> {
    let arch_path = dir.join("arch.json");
    if !arch_path.exists() {
        return Err(Error::MissingArtifact(arch_path));
    }
    let arch: ClassifierArch = serde_json::from_reader(std::fs::File::open(arch_path)?)?;
    let mut model = ClassifierModel::init(arch)?;
    read_weights(&mut model.net.params_mut(), &dir.join("weights.bin"))?;
    read_bn_stats(model.net.bn_layers_mut(), &dir.join("bn_stats.json"))?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use crate::data::make_moons;
    use crate::model::{train_classifier, AugmentationSet, ClassifierModel, TrainConfig};

    #[test]
    fn classifier_checkpoint_round_trip() {
        let d = make_moons(50, 0.1, 3).unwrap();
        let aug = AugmentationSet::default_for_shape(d.input_shape());
        let cfg = TrainConfig {
            epochs: 4,
            seed: 3,
            ..TrainConfig::default()
        };
        let mut model = train_classifier(&d, &aug, &cfg).unwrap();
        let dir = std::env::temp_dir().join(format!("unlearn-ckpt-{}", std::process::id()));
        model.save(&dir).unwrap();
        let mut back = ClassifierModel::load(&dir).unwrap();
        // a reloaded checkpoint is the canonical (f32-rounded) model
        let mut canonical = ClassifierModel::load(&dir).unwrap();
        assert_eq!(back.checksum(), canonical.checksum());
        assert_eq!(back.arch, model.arch);
        // predictions survive the f32 round trip
        for (x, _) in d.iter().take(5) {
            let a = model.predict_proba(&x.view()).unwrap();
            let b = back.predict_proba(&x.view()).unwrap();
            for (p, q) in a.iter().zip(b.iter()) {
                assert!((p - q).abs() < 1e-5);
            }
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn loading_from_missing_dir_names_the_artifact() {
        let err = match ClassifierModel::load(std::path::Path::new("/nonexistent-dir")) {
            Err(e) => e,
            Ok(_) => panic!("load from a missing directory succeeded"),
        };
        assert!(err.to_string().contains("arch.json"));
    }
}
