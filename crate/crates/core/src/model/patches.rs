//! Patch extraction, reassembly, and sinusoidal positional embeddings.
//!
//! Images are flat `[C, H, W]` row-major buffers; token matrices are
//! `[N, patch_size² · C]` with patches ordered row-major over the patch grid
//! and pixels within a token ordered channel-major.

use crate::error::{Error, Result};

/// Split an image into flattened per-patch pixel rows.
pub fn patchify(img: &[f64], c: usize, h: usize, w: usize, p: usize) -> Result<Vec<f64>> {
    if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) {
        return Err(Error::domain(
            "patchify",
            format!("image {h}x{w} not divisible by patch size {p}"),
        ));
    }
    if img.len() != c * h * w {
        return Err(Error::ShapeMismatch { op: "patchify", lhs: vec![c, h, w], rhs: vec![img.len()] });
    }
    let (gh, gw) = (h / p, w / p);
    let mut out = Vec::with_capacity(gh * gw * p * p * c);
    for py in 0..gh {
        for px in 0..gw {
            for ch in 0..c {
                for dy in 0..p {
                    let y = py * p + dy;
                    let base = ch * h * w + y * w + px * p;
                    out.extend_from_slice(&img[base..base + p]);
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &[f64], c: usize, h: usize, w: usize, p: usize) -> Result<Vec<f64>> {
    if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) {
        return Err(Error::domain(
            "unpatchify",
            format!("image {h}x{w} not divisible by patch size {p}"),
        ));
    }
    if tokens.len() != c * h * w {
        return Err(Error::ShapeMismatch {
            op: "unpatchify",
            lhs: vec![c, h, w],
            rhs: vec![tokens.len()],
        });
    }
    let (gh, gw) = (h / p, w / p);
    let mut out = vec![0.0; c * h * w];
    let mut pos = 0;
    for py in 0..gh {
        for px in 0..gw {
            for ch in 0..c {
                for dy in 0..p {
                    let y = py * p + dy;
                    let base = ch * h * w + y * w + px * p;
                    out[base..base + p].copy_from_slice(&tokens[pos..pos + p]);
                    pos += p;
                }
            }
        }
    }
    Ok(out)
}

/// Pixel index of the patch containing pixel `(y, x)`.
pub fn patch_index(y: usize, x: usize, w: usize, p: usize) -> usize {
    (y / p) * (w / p) + x / p
}

/// Fixed 2D sine/cosine positional embeddings, `[grid_h · grid_w, dim]`.
/// Half the channels encode the row coordinate, half the column, each as
/// interleaved (sin, cos) pairs over a geometric frequency ladder.
pub fn pos_embed_2d(grid_h: usize, grid_w: usize, dim: usize) -> Result<Vec<f64>> {
    if !dim.is_multiple_of(4) {
        return Err(Error::domain(
            "pos_embed_2d",
            format!("embedding dim {dim} must be divisible by 4"),
        ));
    }
    let half = dim / 2;
    let pairs = half / 2;
    let mut out = Vec::with_capacity(grid_h * grid_w * dim);
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            for (coord, _) in [(gy, 0), (gx, 1)] {
                for i in 0..pairs {
                    let omega = 1.0 / 10000f64.powf(i as f64 / pairs as f64);
                    let angle = coord as f64 * omega;
                    out.push(angle.sin());
                    out.push(angle.cos());
                }
            }
        }
    }
    Ok(out)
}
