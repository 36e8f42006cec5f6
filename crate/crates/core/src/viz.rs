//! PNG rendering of filtration output: an image grid with flagged samples
//! outlined, or a scatter plot for 2-d point data.

use crate::error::Result;
use crate::filtration::SoftLabeledDataset;
use image::{Rgb, RgbImage};
use ndarray::IxDyn;
use std::path::Path;

const FLAG_COLOR: Rgb<u8> = Rgb([214, 48, 49]);

/// Render kept samples, outlining flagged (target-like) ones. Image datasets
/// become a tiled grid; 2-d point datasets become a scatter plot.
pub fn render_candidates(
    d: &SoftLabeledDataset,
    flags: &[bool],
    path: &Path,
    max_items: usize,
) -> Result<()> {
    if d.input_shape().len() == 3 {
        sample_grid(d, flags, path, max_items)
    } else {
        scatter(d, flags, path)
    }
}

fn sample_grid(
    d: &SoftLabeledDataset,
    flags: &[bool],
    path: &Path,
    max_items: usize,
) -> Result<()> {
    let n = d.len().min(max_items);
    let (c, h, w) = (
        d.input_shape()[0],
        d.input_shape()[1],
        d.input_shape()[2],
    );
    let scale = (64 / h.max(w)).clamp(1, 8);
    let (th, tw) = (h * scale, w * scale);
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols.max(1)).max(1);
    let border = 1 + scale / 2;
    let cell_h = th + 2 * border + 1;
    let cell_w = tw + 2 * border + 1;
    let mut img = RgbImage::from_pixel(
        (cols * cell_w) as u32,
        (rows * cell_h) as u32,
        Rgb([24, 24, 24]),
    );

    for i in 0..n {
        let (gy, gx) = (i / cols, i % cols);
        let (oy, ox) = (gy * cell_h + border, gx * cell_w + border);
        // normalize one sample to [0, 1] for display
        let x = d.input(i);
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &v in x.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let span = if hi > lo { hi - lo } else { 1.0 };
        for py in 0..th {
            for px in 0..tw {
                let (sy, sx) = (py / scale, px / scale);
                let v = if c == 1 {
                    let g = ((x[IxDyn(&[0, sy, sx])] - lo) / span * 255.0) as u8;
                    Rgb([g, g, g])
                } else {
                    let r = ((x[IxDyn(&[0, sy, sx])] - lo) / span * 255.0) as u8;
                    let g = ((x[IxDyn(&[1.min(c - 1), sy, sx])] - lo) / span * 255.0) as u8;
                    let b = ((x[IxDyn(&[2.min(c - 1), sy, sx])] - lo) / span * 255.0) as u8;
                    Rgb([r, g, b])
                };
                img.put_pixel((ox + px) as u32, (oy + py) as u32, v);
            }
        }
        if flags.get(i).copied().unwrap_or(false) {
            for b in 0..border {
                for px in 0..(tw + 2 * border) {
                    img.put_pixel((ox - border + px) as u32, (oy - border + b) as u32, FLAG_COLOR);
                    img.put_pixel(
                        (ox - border + px) as u32,
                        (oy + th + b) as u32,
                        FLAG_COLOR,
                    );
                }
                for py in 0..(th + 2 * border) {
                    img.put_pixel((ox - border + b) as u32, (oy - border + py) as u32, FLAG_COLOR);
                    img.put_pixel(
                        (ox + tw + b) as u32,
                        (oy - border + py) as u32,
                        FLAG_COLOR,
                    );
                }
            }
        }
    }
    img.save(path).map_err(|e| crate::Error::Checkpoint(format!("png write: {e}")))?;
    Ok(())
}

fn scatter(d: &SoftLabeledDataset, flags: &[bool], path: &Path) -> Result<()> {
    let size = 512u32;
    let margin = 24.0;
    let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
    let (mut lo_x, mut hi_x, mut lo_y, mut hi_y) =
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..d.len() {
        let x = d.input(i)[IxDyn(&[0])];
        let y = d.input(i)[IxDyn(&[1])];
        lo_x = lo_x.min(x);
        hi_x = hi_x.max(x);
        lo_y = lo_y.min(y);
        hi_y = hi_y.max(y);
    }
    let span_x = (hi_x - lo_x).max(1e-9);
    let span_y = (hi_y - lo_y).max(1e-9);
    let to_px = |x: f64, y: f64| -> (i64, i64) {
        let px = margin + (x - lo_x) / span_x * (size as f64 - 2.0 * margin);
        let py = (size as f64) - margin - (y - lo_y) / span_y * (size as f64 - 2.0 * margin);
        (px as i64, py as i64)
    };
    for i in 0..d.len() {
        let (px, py) = to_px(d.input(i)[IxDyn(&[0])], d.input(i)[IxDyn(&[1])]);
        let color = if flags.get(i).copied().unwrap_or(false) {
            FLAG_COLOR
        } else {
            Rgb([52, 73, 94])
        };
        for dy in -2i64..=2 {
            for dx in -2i64..=2 {
                if dx * dx + dy * dy <= 4 {
                    let (qx, qy) = (px + dx, py + dy);
                    if qx >= 0 && qy >= 0 && (qx as u32) < size && (qy as u32) < size {
                        img.put_pixel(qx as u32, qy as u32, color);
                    }
                }
            }
        }
    }
    img.save(path).map_err(|e| crate::Error::Checkpoint(format!("png write: {e}")))?;
    Ok(())
}
