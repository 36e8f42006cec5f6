//! Semantic-preserving input transforms used for training, the augmentation
//! loss, and the candidate consistency check.
//!
//! Each transform is shape-preserving and deterministic given the RNG handed
//! in. Spatial transforms build per-image [`WarpPlan`]s so they can run both
//! on plain arrays and inside a graph (the inversion losses need gradients
//! through the transform).

use crate::graph::{Graph, NodeId, WarpPlan};
use crate::util;
use ndarray::{ArrayD, ArrayViewD};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Transform {
    /// Pass-through.
    Identity,
    /// Additive isotropic Gaussian noise (point datasets).
    GaussianJitter { sigma: f64 },
    /// Rotation by a per-image uniform angle in `[-max_degrees, max_degrees]`.
    RandomRotation { max_degrees: f64 },
    /// Random crop after zero-padding by `pad` pixels on each side.
    RandomCrop { pad: usize },
    /// Mirror about the vertical axis with probability 1/2 per image.
    HorizontalFlip,
}

impl Transform {
    fn plans<R: Rng>(&self, n: usize, h: usize, w: usize, rng: &mut R) -> Option<Vec<WarpPlan>> {
        match self {
            Transform::Identity | Transform::GaussianJitter { .. } => None,
            Transform::RandomRotation { max_degrees } => {
                let max_rad = max_degrees.to_radians();
                Some(
                    (0..n)
                        .map(|_| {
                            let a = (rng.gen::<f64>() * 2.0 - 1.0) * max_rad;
                            WarpPlan::rotation(h, w, a)
                        })
                        .collect(),
                )
            }
            Transform::RandomCrop { pad } => {
                let p = *pad as isize;
                Some(
                    (0..n)
                        .map(|_| {
                            let dy = rng.gen_range(-p..=p);
                            let dx = rng.gen_range(-p..=p);
                            WarpPlan::shift(h, w, dy, dx)
                        })
                        .collect(),
                )
            }
            Transform::HorizontalFlip => Some(
                (0..n)
                    .map(|_| {
                        if rng.gen::<bool>() {
                            WarpPlan::hflip(h, w)
                        } else {
                            WarpPlan::shift(h, w, 0, 0)
                        }
                    })
                    .collect(),
            ),
        }
    }

    /// Transform a `[N, ...]` batch outside of any graph.
    pub fn apply_array<R: Rng>(&self, x: &ArrayViewD<f64>, rng: &mut R) -> ArrayD<f64> {
        match self {
            Transform::Identity => x.to_owned(),
            Transform::GaussianJitter { sigma } => {
                let mut out = x.to_owned();
                for v in out.iter_mut() {
                    *v += sigma * util::sample_normal(rng);
                }
                out
            }
            _ => {
                let shape = x.shape();
                assert_eq!(shape.len(), 4, "spatial transform on non-image batch");
                let plans = self.plans(shape[0], shape[2], shape[3], rng).unwrap();
                let x4 = x.view().into_dimensionality().unwrap();
                crate::graph::apply_warp_value(&x4, &plans).into_dyn()
            }
        }
    }

    /// Transform a batch node inside a graph; gradients flow through.
    pub fn apply_node<R: Rng>(&self, g: &mut Graph, x: NodeId, rng: &mut R) -> NodeId {
        match self {
            Transform::Identity => x,
            Transform::GaussianJitter { sigma } => {
                let mut noise = ArrayD::zeros(g.value(x).raw_dim());
                util::fill_normal(rng, *sigma, noise.as_slice_mut().unwrap());
                let n = g.constant(noise);
                g.add(x, n)
            }
            _ => {
                let shape = g.value(x).shape().to_vec();
                assert_eq!(shape.len(), 4, "spatial transform on non-image batch");
                let plans = self.plans(shape[0], shape[2], shape[3], rng).unwrap();
                g.warp(x, plans)
            }
        }
    }
}

/// The ordered transform set Φ. The identity is not stored; call sites that
/// need Φ ∪ {id} prepend it explicitly.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Default)]
pub struct AugmentationSet {
    pub transforms: Vec<Transform>,
}

impl AugmentationSet {
    pub fn new(transforms: Vec<Transform>) -> Self {
        AugmentationSet { transforms }
    }

    pub fn empty() -> Self {
        AugmentationSet::default()
    }

    /// Defaults per input kind: Gaussian jitter for point data; rotation plus
    /// padded random crop for digit images (no flip — digits are chiral).
    pub fn default_for_shape(input_shape: &[usize]) -> Self {
        if input_shape.len() == 3 {
            let pad = if input_shape[1] >= 16 { 2 } else { 1 };
            AugmentationSet::new(vec![
                Transform::RandomCrop { pad },
                Transform::RandomRotation { max_degrees: 10.0 },
            ])
        } else {
            AugmentationSet::new(vec![Transform::GaussianJitter { sigma: 0.05 }])
        }
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }

    pub fn len(&self) -> usize {
        self.transforms.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn transforms_preserve_shape() {
        let mut rng = util::rng_from(1);
        let x = ArrayD::from_elem(IxDyn(&[3, 1, 8, 8]), 0.5);
        for t in [
            Transform::RandomRotation { max_degrees: 10.0 },
            Transform::RandomCrop { pad: 1 },
            Transform::HorizontalFlip,
        ] {
            let y = t.apply_array(&x.view(), &mut rng);
            assert_eq!(y.shape(), x.shape());
        }
        let p = ArrayD::from_elem(IxDyn(&[5, 2]), 0.0);
        let y = Transform::GaussianJitter { sigma: 0.05 }.apply_array(&p.view(), &mut rng);
        assert_eq!(y.shape(), p.shape());
    }

    #[test]
    fn transform_is_deterministic_per_seed() {
        let x = ArrayD::from_shape_vec(
            IxDyn(&[1, 1, 4, 4]),
            (0..16).map(|v| v as f64).collect(),
        )
        .unwrap();
        let t = Transform::RandomRotation { max_degrees: 10.0 };
        let a = t.apply_array(&x.view(), &mut util::rng_from(9));
        let b = t.apply_array(&x.view(), &mut util::rng_from(9));
        assert_eq!(a, b);
    }

    #[test]
    fn graph_and_array_paths_agree() {
        let mut x = ArrayD::zeros(IxDyn(&[2, 1, 6, 6]));
        for (i, v) in x.iter_mut().enumerate() {
            *v = (i % 7) as f64;
        }
        let t = Transform::RandomCrop { pad: 1 };
        let by_array = t.apply_array(&x.view(), &mut util::rng_from(4));
        let mut g = Graph::new();
        let xid = g.constant(x);
        let out = t.apply_node(&mut g, xid, &mut util::rng_from(4));
        assert_eq!(g.value(out), &by_array);
    }
}
