//! Per-image linear warps (rotation, shift, flip) used as differentiable
//! augmentations. A plan maps every output pixel to a weighted set of input
//! pixels, shared across channels; the backward pass is the scatter adjoint.

use ndarray::{Array4, ArrayView4};

/// Sparse linear map on one image's pixel grid.
#[derive(Clone)]
pub struct WarpPlan {
    /// For each output pixel (row-major), the contributing input pixels.
    entries: Vec<Vec<(u32, f64)>>,
}

impl WarpPlan {
    /// Rotation by `angle` radians about the image center, bilinear sampling,
    /// zero padding outside the source grid.
    pub fn rotation(h: usize, w: usize, angle: f64) -> Self {
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (sin, cos) = angle.sin_cos();
        let mut entries = Vec::with_capacity(h * w);
        for oy in 0..h {
            for ox in 0..w {
                // inverse rotation of the output coordinate
                let dy = oy as f64 - cy;
                let dx = ox as f64 - cx;
                let sy = cy + dy * cos - dx * sin;
                let sx = cx + dy * sin + dx * cos;
                let y0 = sy.floor();
                let x0 = sx.floor();
                let fy = sy - y0;
                let fx = sx - x0;
                let mut contrib = Vec::with_capacity(4);
                for (yy, wy) in [(y0, 1.0 - fy), (y0 + 1.0, fy)] {
                    for (xx, wx) in [(x0, 1.0 - fx), (x0 + 1.0, fx)] {
                        let weight = wy * wx;
                        if weight == 0.0 {
                            continue;
                        }
                        if yy >= 0.0 && yy < h as f64 && xx >= 0.0 && xx < w as f64 {
                            contrib.push(((yy as u32) * w as u32 + xx as u32, weight));
                        }
                    }
                }
                entries.push(contrib);
            }
        }
        WarpPlan { entries }
    }

    /// Translation by whole pixels (random crop after zero padding):
    /// `out(i, j) = in(i + dy, j + dx)`, zero outside.
    pub fn shift(h: usize, w: usize, dy: isize, dx: isize) -> Self {
        let mut entries = Vec::with_capacity(h * w);
        for oy in 0..h as isize {
            for ox in 0..w as isize {
                let (iy, ix) = (oy + dy, ox + dx);
                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                    entries.push(vec![((iy as u32) * w as u32 + ix as u32, 1.0)]);
                } else {
                    entries.push(Vec::new());
                }
            }
        }
        WarpPlan { entries }
    }

    /// Mirror about the vertical axis.
    pub fn hflip(h: usize, w: usize) -> Self {
        let mut entries = Vec::with_capacity(h * w);
        for oy in 0..h {
            for ox in 0..w {
                entries.push(vec![((oy * w + (w - 1 - ox)) as u32, 1.0)]);
            }
        }
        WarpPlan { entries }
    }
}

pub(crate) fn apply_warp(x: &ArrayView4<f64>, plans: &[WarpPlan]) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let mut out = Array4::<f64>::zeros((n, c, h, w));
    let xs = x.as_slice().expect("warp expects standard layout");
    let os = out.as_slice_mut().unwrap();
    let hw = h * w;
    for b in 0..n {
        let plan = &plans[b];
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            for (p, contrib) in plan.entries.iter().enumerate() {
                let mut acc = 0.0;
                for &(q, weight) in contrib {
                    acc += weight * xs[base + q as usize];
                }
                os[base + p] = acc;
            }
        }
    }
    out
}

pub(crate) fn warp_backward(
    g: &ArrayView4<f64>,
    plans: &[WarpPlan],
    in_h: usize,
    in_w: usize,
) -> Array4<f64> {
    let (n, c, h, w) = g.dim();
    debug_assert_eq!((h, w), (in_h, in_w));
    let mut d = Array4::<f64>::zeros((n, c, in_h, in_w));
    let gs = g.as_slice().expect("warp grad expects standard layout");
    let ds = d.as_slice_mut().unwrap();
    let hw = h * w;
    for b in 0..n {
        let plan = &plans[b];
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            for (p, contrib) in plan.entries.iter().enumerate() {
                let gv = gs[base + p];
                if gv == 0.0 {
                    continue;
                }
                for &(q, weight) in contrib {
                    ds[base + q as usize] += weight * gv;
                }
            }
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn zero_rotation_is_identity() {
        let mut x = Array4::<f64>::zeros((1, 1, 5, 5));
        for (i, v) in x.iter_mut().enumerate() {
            *v = i as f64;
        }
        let plan = WarpPlan::rotation(5, 5, 0.0);
        let y = apply_warp(&x.view(), &[plan]);
        assert!((&y - &x).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn shift_moves_pixels() {
        let mut x = Array4::<f64>::zeros((1, 1, 3, 3));
        x[[0, 0, 1, 1]] = 1.0;
        let y = apply_warp(&x.view(), &[WarpPlan::shift(3, 3, 1, 0)]);
        // out(0,1) = in(1,1)
        assert_eq!(y[[0, 0, 0, 1]], 1.0);
        assert_eq!(y[[0, 0, 1, 1]], 0.0);
    }

    #[test]
    fn flip_reverses_columns() {
        let x = Array4::from_shape_vec((1, 1, 1, 3), vec![1.0, 2.0, 3.0]).unwrap();
        let y = apply_warp(&x.view(), &[WarpPlan::hflip(1, 3)]);
        assert_eq!(y.as_slice().unwrap(), &[3.0, 2.0, 1.0]);
    }

    #[test]
    fn backward_is_adjoint() {
        let mut rng = crate::util::rng_from(4);
        let mut x = Array4::<f64>::zeros((2, 1, 6, 6));
        let mut g = Array4::<f64>::zeros((2, 1, 6, 6));
        for v in x.iter_mut() {
            *v = crate::util::sample_normal(&mut rng);
        }
        for v in g.iter_mut() {
            *v = crate::util::sample_normal(&mut rng);
        }
        let plans = vec![
            WarpPlan::rotation(6, 6, 0.3),
            WarpPlan::shift(6, 6, -1, 2),
        ];
        let y = apply_warp(&x.view(), &plans);
        let lhs: f64 = (&y * &g).sum();
        let back = warp_backward(&g.view(), &plans, 6, 6);
        let rhs: f64 = (&x * &back).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
