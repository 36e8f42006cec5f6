//! Dense 2-D convolution kernels (im2col + GEMM) shared by the `Conv2d` and
//! `ConvTranspose2d` graph ops. Transposed convolution is the adjoint of the
//! strided convolution, so the three routines below cover both directions.

use ndarray::{Array2, Array4, ArrayView4};

pub(crate) fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfold `x` into a `[Ci*kh*kw, N*Ho*Wo]` matrix of receptive fields.
pub(crate) fn im2col(
    x: &ArrayView4<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<f64> {
    let (n, ci, h, w) = x.dim();
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w, kw, stride, pad);
    let mut cols = Array2::<f64>::zeros((ci * kh * kw, n * ho * wo));
    let x_slice = x.as_slice().expect("im2col expects standard layout");
    let cols_slice = cols.as_slice_mut().unwrap();
    let row_len = n * ho * wo;
    for c in 0..ci {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let out_row = &mut cols_slice[row * row_len..(row + 1) * row_len];
                for b in 0..n {
                    let x_base = (b * ci + c) * h * w;
                    for oh in 0..ho {
                        let ih = (oh * stride + ki) as isize - pad as isize;
                        let col_base = (b * ho + oh) * wo;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let x_row = x_base + ih as usize * w;
                        for ow in 0..wo {
                            let iw = (ow * stride + kj) as isize - pad as isize;
                            if iw >= 0 && iw < w as isize {
                                out_row[col_base + ow] = x_slice[x_row + iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image tensor.
pub(crate) fn col2im(
    cols: &Array2<f64>,
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w, kw, stride, pad);
    let mut x = Array4::<f64>::zeros((n, ci, h, w));
    let x_slice = x.as_slice_mut().unwrap();
    let cols_slice = cols.as_slice().expect("col2im expects standard layout");
    let row_len = n * ho * wo;
    for c in 0..ci {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let in_row = &cols_slice[row * row_len..(row + 1) * row_len];
                for b in 0..n {
                    let x_base = (b * ci + c) * h * w;
                    for oh in 0..ho {
                        let ih = (oh * stride + ki) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let x_row = x_base + ih as usize * w;
                        let col_base = (b * ho + oh) * wo;
                        for ow in 0..wo {
                            let iw = (ow * stride + kj) as isize - pad as isize;
                            if iw >= 0 && iw < w as isize {
                                x_slice[x_row + iw as usize] += in_row[col_base + ow];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[N,Co,Ho,Wo]` to the `[Co, N*Ho*Wo]` layout used around the GEMMs.
fn to_mat(y: &ArrayView4<f64>) -> Array2<f64> {
    let (n, co, ho, wo) = y.dim();
    let mut m = Array2::<f64>::zeros((co, n * ho * wo));
    for b in 0..n {
        for c in 0..co {
            for oh in 0..ho {
                for ow in 0..wo {
                    m[[c, (b * ho + oh) * wo + ow]] = y[[b, c, oh, ow]];
                }
            }
        }
    }
    m
}

fn from_mat(m: &Array2<f64>, n: usize, co: usize, ho: usize, wo: usize) -> Array4<f64> {
    let mut y = Array4::<f64>::zeros((n, co, ho, wo));
    for b in 0..n {
        for c in 0..co {
            for oh in 0..ho {
                for ow in 0..wo {
                    y[[b, c, oh, ow]] = m[[c, (b * ho + oh) * wo + ow]];
                }
            }
        }
    }
    y
}

/// Forward convolution. `w` is `[Co, Ci, kh, kw]`. Returns the output and the
/// im2col matrix (cached for the weight gradient).
pub(crate) fn conv2d_fwd(
    x: &ArrayView4<f64>,
    w: &ArrayView4<f64>,
    stride: usize,
    pad: usize,
) -> (Array4<f64>, Array2<f64>) {
    let (n, _ci, h, wd) = x.dim();
    let (co, ci_w, kh, kw) = w.dim();
    debug_assert_eq!(_ci, ci_w);
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(wd, kw, stride, pad);
    let cols = im2col(x, kh, kw, stride, pad);
    let w_mat = w
        .to_shape((co, ci_w * kh * kw))
        .expect("weight reshape")
        .to_owned();
    let y_mat = w_mat.dot(&cols);
    (from_mat(&y_mat, n, co, ho, wo), cols)
}

/// Gradient of the convolution output w.r.t. its input. Also the forward map
/// of the transposed convolution.
pub(crate) fn conv2d_bwd_input(
    dy: &ArrayView4<f64>,
    w: &ArrayView4<f64>,
    stride: usize,
    pad: usize,
    in_h: usize,
    in_w: usize,
) -> Array4<f64> {
    let (n, _co, _ho, _wo) = dy.dim();
    let (co, ci, kh, kw) = w.dim();
    let dy_mat = to_mat(dy);
    let w_mat = w.to_shape((co, ci * kh * kw)).expect("weight reshape");
    let cols_grad = w_mat.t().dot(&dy_mat);
    col2im(&cols_grad, n, ci, in_h, in_w, kh, kw, stride, pad)
}

/// Gradient w.r.t. the convolution weights given the cached im2col matrix.
pub(crate) fn conv2d_bwd_weight(
    dy: &ArrayView4<f64>,
    cols: &Array2<f64>,
    co: usize,
    ci: usize,
    kh: usize,
    kw: usize,
) -> Array4<f64> {
    let dy_mat = to_mat(dy);
    let dw_mat = dy_mat.dot(&cols.t());
    dw_mat
        .to_shape((co, ci, kh, kw))
        .expect("dw reshape")
        .to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn naive_conv(
        x: &Array4<f64>,
        w: &Array4<f64>,
        stride: usize,
        pad: usize,
    ) -> Array4<f64> {
        let (n, ci, h, wd) = x.dim();
        let (co, _, kh, kw) = w.dim();
        let ho = conv_out_dim(h, kh, stride, pad);
        let wo = conv_out_dim(wd, kw, stride, pad);
        let mut y = Array4::<f64>::zeros((n, co, ho, wo));
        for b in 0..n {
            for o in 0..co {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let ih = (oh * stride + ki) as isize - pad as isize;
                                    let iw = (ow * stride + kj) as isize - pad as isize;
                                    if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < wd
                                    {
                                        acc += x[[b, c, ih as usize, iw as usize]]
                                            * w[[o, c, ki, kj]];
                                    }
                                }
                            }
                        }
                        y[[b, o, oh, ow]] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn gemm_conv_matches_naive() {
        let mut rng = crate::util::rng_from(11);
        for &(stride, pad) in &[(1usize, 1usize), (2, 1), (1, 0)] {
            let mut x = Array4::<f64>::zeros((2, 3, 6, 5));
            let mut w = Array4::<f64>::zeros((4, 3, 3, 3));
            for v in x.iter_mut() {
                *v = crate::util::sample_normal(&mut rng);
            }
            for v in w.iter_mut() {
                *v = crate::util::sample_normal(&mut rng);
            }
            let (y, _) = conv2d_fwd(&x.view(), &w.view(), stride, pad);
            let y_ref = naive_conv(&x, &w, stride, pad);
            let max = (&y - &y_ref).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(max < 1e-10, "stride {stride} pad {pad}: max diff {max}");
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)> for random x, c.
        let mut rng = crate::util::rng_from(5);
        let mut x = Array4::<f64>::zeros((2, 2, 5, 4));
        for v in x.iter_mut() {
            *v = crate::util::sample_normal(&mut rng);
        }
        let cols = im2col(&x.view(), 3, 3, 2, 1);
        let mut c = Array2::<f64>::zeros(cols.dim());
        for v in c.iter_mut() {
            *v = crate::util::sample_normal(&mut rng);
        }
        let lhs: f64 = (&cols * &c).sum();
        let back = col2im(&c, 2, 2, 5, 4, 3, 3, 2, 1);
        let rhs: f64 = (&x * &back).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }
}
