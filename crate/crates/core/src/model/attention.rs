//! Final-layer attention maps: from the CLS token, from one patch, and from a
//! character instance given its pixel mask.

use serde::Serialize;

use crate::image::{ImageBuf, PatchGrid};
use crate::mask::{MaskSet, Strategy};
use crate::{Error, Result};

use super::{encode, MmsParams};

/// Default fraction of attention mass kept when thresholding.
pub const DEFAULT_TAU: f64 = 0.6;
/// A patch belongs to a character when strictly more than this fraction of
/// its pixels are inside the character mask.
pub const CHAR_OVERLAP: f64 = 0.7;

/// Head-averaged attention from one query token to the `N` patch tokens.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionMap {
    pub grid_h: usize,
    pub grid_w: usize,
    /// Row-major over the patch grid; sums to `1 - cls_mass`.
    pub weights: Vec<f64>,
    /// Attention the query spends on the CLS column, excluded from `weights`.
    pub cls_mass: f64,
    pub tau: f64,
    /// Patches surviving the mass threshold.
    pub kept: Vec<bool>,
}

/// Marks the smallest set of largest entries whose share of the total mass
/// reaches `tau` (ties broken by lower index). `tau >= 1` keeps everything.
pub fn threshold_mass(weights: &[f64], tau: f64) -> Vec<bool> {
    let n = weights.len();
    if tau >= 1.0 {
        return vec![true; n];
    }
    let total: f64 = weights.iter().sum();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    let mut kept = vec![false; n];
    let mut acc = 0.0;
    for i in order {
        if acc >= tau * total {
            break;
        }
        kept[i] = true;
        acc += weights[i];
    }
    kept
}

impl AttentionMap {
    fn new(grid_h: usize, grid_w: usize, weights: Vec<f64>, cls_mass: f64, tau: f64) -> Self {
        let kept = threshold_mass(&weights, tau);
        Self {
            grid_h,
            grid_w,
            weights,
            cls_mass,
            tau,
            kept,
        }
    }

    /// Thresholded map scaled so the largest kept weight is 1, upsampled by
    /// repeating each patch value over its `patch_size²` pixels.
    pub fn heatmap(&self, patch_size: usize) -> ImageBuf {
        let vals: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.kept)
            .map(|(&w, &k)| if k { w } else { 0.0 })
            .collect();
        upsample(&normalize_max(&vals), self.grid_h, self.grid_w, patch_size)
    }

    /// The image darkened toward black where attention is low:
    /// `pixel · (w / max w)` with the unthresholded weights.
    pub fn overlay(&self, img: &ImageBuf, patch_size: usize) -> Result<ImageBuf> {
        if img.height != self.grid_h * patch_size || img.width != self.grid_w * patch_size {
            return Err(Error::Geometry(format!(
                "overlay image {}x{} does not match grid {}x{}",
                img.height, img.width, self.grid_h, self.grid_w
            )));
        }
        let alpha = upsample(&normalize_max(&self.weights), self.grid_h, self.grid_w, patch_size);
        let mut out = img.clone();
        for y in 0..img.height {
            for x in 0..img.width {
                let a = alpha.at(y, x, 0);
                for c in 0..img.channels {
                    out.set(y, x, c, img.at(y, x, c) * a);
                }
            }
        }
        Ok(out)
    }
}

fn normalize_max(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        v.iter().map(|x| x / max).collect()
    } else {
        v.to_vec()
    }
}

fn upsample(vals: &[f64], grid_h: usize, grid_w: usize, p: usize) -> ImageBuf {
    let (h, w) = (grid_h * p, grid_w * p);
    let data = (0..h * w).map(|i| vals[(i / w / p) * grid_w + (i % w) / p]).collect();
    ImageBuf::new(h, w, 1, data).unwrap()
}

/// Head-averaged final-layer attention rows for every token of the unmasked
/// image, `[N+1][N+1]`.
fn final_layer_rows(params: &MmsParams, grid: &PatchGrid) -> Result<Vec<Vec<f64>>> {
    let cfg = &params.config;
    let none = MaskSet::from_indices(cfg.grid_h, cfg.grid_w, &[], Strategy::Random, 0.0)?;
    let (_, attn) = encode(params, grid, &none, false)?;
    let stack = &attn[0];
    let (heads, t) = (stack.shape()[0], stack.shape()[1]);
    let mut rows = vec![vec![0.0; t]; t];
    for h in 0..heads {
        for (r, row) in rows.iter_mut().enumerate() {
            let src = &stack.data()[(h * t + r) * t..(h * t + r + 1) * t];
            for (o, v) in row.iter_mut().zip(src) {
                *o += v;
            }
        }
    }
    for row in &mut rows {
        for v in row.iter_mut() {
            *v /= heads as f64;
        }
    }
    Ok(rows)
}

fn map_from_row(params: &MmsParams, row: &[f64], tau: f64) -> AttentionMap {
    let cfg = &params.config;
    AttentionMap::new(cfg.grid_h, cfg.grid_w, row[1..].to_vec(), row[0], tau)
}

/// Attention of the CLS token over the patches.
pub fn attention_cls(params: &MmsParams, grid: &PatchGrid, tau: f64) -> Result<AttentionMap> {
    let rows = final_layer_rows(params, grid)?;
    Ok(map_from_row(params, &rows[0], tau))
}

/// Attention of patch `patch_index` over the patches.
pub fn attention_patch(
    params: &MmsParams,
    grid: &PatchGrid,
    patch_index: usize,
    tau: f64,
) -> Result<AttentionMap> {
    let n = params.config.num_patches();
    if patch_index >= n {
        return Err(crate::tensor::TensorError::Index {
            index: patch_index,
            len: n,
        }
        .into());
    }
    let rows = final_layer_rows(params, grid)?;
    Ok(map_from_row(params, &rows[patch_index + 1], tau))
}

/// Patches whose pixel overlap with a binary mask (nonzero = inside) is
/// strictly above [`CHAR_OVERLAP`].
pub fn patches_over_mask(char_mask: &ImageBuf, grid_h: usize, grid_w: usize, p: usize) -> Result<Vec<usize>> {
    if char_mask.height != grid_h * p || char_mask.width != grid_w * p {
        return Err(Error::Geometry(format!(
            "character mask {}x{} does not match grid {grid_h}x{grid_w} of {p}-pixel patches",
            char_mask.height, char_mask.width
        )));
    }
    let mut out = Vec::new();
    for k in 0..grid_h * grid_w {
        let (gy, gx) = (k / grid_w, k % grid_w);
        let mut inside = 0;
        for y in gy * p..(gy + 1) * p {
            for x in gx * p..(gx + 1) * p {
                if char_mask.at(y, x, 0) > 0.0 {
                    inside += 1;
                }
            }
        }
        if inside as f64 / (p * p) as f64 > CHAR_OVERLAP {
            out.push(k);
        }
    }
    Ok(out)
}

/// Mean of [`attention_patch`] over the patches covered by a character mask.
pub fn attention_char(
    params: &MmsParams,
    grid: &PatchGrid,
    char_mask: &ImageBuf,
    tau: f64,
) -> Result<AttentionMap> {
    let cfg = &params.config;
    let selected = patches_over_mask(char_mask, cfg.grid_h, cfg.grid_w, cfg.patch_size)?;
    if selected.is_empty() {
        return Err(Error::EmptySelection {
            threshold: CHAR_OVERLAP,
        });
    }
    let rows = final_layer_rows(params, grid)?;
    let t = rows.len();
    let mut mean = vec![0.0; t];
    for &k in &selected {
        for (m, v) in mean.iter_mut().zip(&rows[k + 1]) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= selected.len() as f64;
    }
    Ok(map_from_row(params, &mean, tau))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_keeps_smallest_heavy_set() {
        let w = [0.1, 0.5, 0.15, 0.25];
        assert_eq!(threshold_mass(&w, 0.6), vec![false, true, false, true]);
        assert_eq!(threshold_mass(&w, 0.5), vec![false, true, false, false]);
        assert_eq!(threshold_mass(&w, 1.0), vec![true; 4]);
    }

    #[test]
    fn overlap_needs_more_than_seventy_percent() {
        // 12 of 16 pixels (75%) in patch 0, 8 of 16 (50%) in patch 1
        let mut m = ImageBuf::filled(4, 8, 1, 0.0);
        for y in 0..3 {
            for x in 0..4 {
                m.set(y, x, 0, 1.0);
            }
        }
        for y in 0..2 {
            for x in 4..8 {
                m.set(y, x, 0, 1.0);
            }
        }
        assert_eq!(patches_over_mask(&m, 1, 2, 4).unwrap(), vec![0]);
    }
}
