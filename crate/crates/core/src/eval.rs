//! Reconstruction metrics, rank statistics and curriculum images.

use std::fmt;
use std::path::Path;

use ndarray::{Array2, Axis};
use thiserror::Error;

use crate::signals::codec::{self, Image};
use crate::signals::ContextSet;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: prediction {pred:?} vs truth {truth:?}")]
    Shape { pred: (usize, usize), truth: (usize, usize) },
    #[error("cannot render a {0}-axis signal as an image")]
    NotImage(usize),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// PSNR in dB; `+∞` when the error is exactly zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Psnr(pub f64);

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_infinite() && self.0 > 0.0 {
            f.write_str("inf")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    /// Mean over all `M·D` entries.
    pub mse: f64,
    pub psnr_db: f64,
}

/// `10 log10(1 / mse)` with peak value 1.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

pub fn psnr(pred: &Array2<f64>, truth: &Array2<f64>) -> Result<Metrics> {
    if pred.dim() != truth.dim() {
        return Err(EvalError::Shape {
            pred: pred.dim(),
            truth: truth.dim(),
        });
    }
    let n = pred.len().max(1) as f64;
    let mse = pred
        .iter()
        .zip(truth.iter())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n;
    Ok(Metrics {
        mse,
        psnr_db: psnr_from_mse(mse),
    })
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            out[o] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties. Returns `NaN`
/// when either input is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "spearman inputs must have equal length");
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    cov / (va * vb).sqrt()
}

/// Fraction of `a` also present in `b` (both ascending index lists).
pub fn overlap(a: &[usize], b: &[usize]) -> f64 {
    if a.is_empty() {
        return 1.0;
    }
    let set: std::collections::HashSet<_> = b.iter().collect();
    a.iter().filter(|i| set.contains(i)).count() as f64 / a.len() as f64
}

fn image_dims(resolution: &[usize]) -> Result<(usize, usize)> {
    match *resolution {
        [w] => Ok((1, w)),
        [h, w] => Ok((h, w)),
        _ => Err(EvalError::NotImage(resolution.len())),
    }
}

fn write(path: &Path, img: &Image) -> Result<()> {
    std::fs::write(path, codec::encode_pnm(img)).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub const MASK_RED: [u8; 3] = [255, 0, 0];

/// Grayscale rendering of the context values with selected points painted
/// pure red. Gray pixels always have equal channels, so the red set decodes
/// back to the selection exactly.
pub fn mask_image(ctx: &ContextSet, selected: &[usize]) -> Result<Image> {
    let (height, width) = image_dims(&ctx.resolution)?;
    let mut data = Vec::with_capacity(height * width * 3);
    for row in ctx.values.axis_iter(Axis(0)) {
        let g = to_byte(row.mean().unwrap_or(0.0));
        data.extend_from_slice(&[g, g, g]);
    }
    for &i in selected {
        data[3 * i..3 * i + 3].copy_from_slice(&MASK_RED);
    }
    Ok(Image {
        width,
        height,
        channels: 3,
        data,
    })
}

pub fn render_mask(ctx: &ContextSet, selected: &[usize], path: &Path) -> Result<()> {
    write(path, &mask_image(ctx, selected)?)
}

/// Context indices painted red in a mask image.
pub fn decode_mask(img: &Image) -> Vec<usize> {
    img.data
        .chunks_exact(3)
        .enumerate()
        .filter(|(_, px)| *px == MASK_RED)
        .map(|(i, _)| i)
        .collect()
}

/// Per-pixel mean absolute residual scaled so the largest maps to 255.
/// Returns the image and the residual value shown as white.
pub fn residual_image(pred: &Array2<f64>, truth: &Array2<f64>, resolution: &[usize]) -> Result<(Image, f64)> {
    if pred.dim() != truth.dim() {
        return Err(EvalError::Shape {
            pred: pred.dim(),
            truth: truth.dim(),
        });
    }
    let (height, width) = image_dims(resolution)?;
    let abs: Vec<f64> = (pred - truth)
        .axis_iter(Axis(0))
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>() / r.len() as f64)
        .collect();
    let max = abs.iter().copied().fold(0.0, f64::max);
    let data = abs
        .iter()
        .map(|&a| if max > 0.0 { (a / max * 255.0).round() as u8 } else { 0 })
        .collect();
    Ok((
        Image {
            width,
            height,
            channels: 1,
            data,
        },
        max,
    ))
}

pub fn render_residual(pred: &Array2<f64>, truth: &Array2<f64>, resolution: &[usize], path: &Path) -> Result<f64> {
    let (img, max) = residual_image(pred, truth, resolution)?;
    write(path, &img)?;
    Ok(max)
}

/// Writes values in `[0, 1]` as an 8-bit gray (1 channel) or RGB image.
pub fn render_values(values: &Array2<f64>, resolution: &[usize], path: &Path) -> Result<()> {
    let (height, width) = image_dims(resolution)?;
    let channels = if values.ncols() == 1 { 1 } else { 3 };
    let mut data = Vec::with_capacity(height * width * channels);
    for row in values.axis_iter(Axis(0)) {
        for c in 0..channels {
            data.push(to_byte(row[c.min(row.len() - 1)]));
        }
    }
    write(
        path,
        &Image {
            width,
            height,
            channels,
            data,
        },
    )
}
