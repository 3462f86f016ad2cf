//! Reconstruction PSNR on frozen masked evaluation sets, mask to character
//! coverage and the frozen-encoder column probe.

pub mod probe;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::image::{depatchify, normalize_targets, ImageBuf, PatchGrid, NORM_EPS};
use crate::mask::{sample_mask_lenient, MaskSet, MultiMaskConfig, Strategy};
use crate::model::{run_branch, MmsParams, Sample};
use crate::rng::derive_seed;
use crate::synth::CharBox;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Image whose visible patches are copied from `original` and whose masked
/// patches are the predictions mapped back to pixels with the original
/// patch's mean and standard deviation, clipped to `[0, 1]`.
pub fn compose_reconstruction(original: &PatchGrid, recon: &Tensor, mask: &MaskSet) -> Result<ImageBuf> {
    original.check()?;
    let (n, pd) = (original.num_patches(), original.patch_dim());
    if recon.shape() != [n, pd] {
        return Err(Error::Geometry(format!(
            "reconstruction {:?} does not match {n} patches of {pd} values",
            recon.shape()
        )));
    }
    if mask.grid_h != original.grid_h || mask.grid_w != original.grid_w {
        return Err(Error::Geometry(format!(
            "mask grid {}x{} does not match image grid {}x{}",
            mask.grid_h, mask.grid_w, original.grid_h, original.grid_w
        )));
    }
    let stats = normalize_targets(original, NORM_EPS)?;
    let mut out = original.clone();
    let data = out.patches.data_mut();
    for &i in &mask.masked {
        let (mean, std) = (stats.per_patch_mean.data()[i], stats.per_patch_std.data()[i]);
        for j in 0..pd {
            data[i * pd + j] = (recon.data()[i * pd + j] * std + mean).clamp(0.0, 1.0);
        }
    }
    depatchify(&out)
}

/// Peak signal-to-noise ratio in dB over all pixels and channels; identical
/// images give `+inf`.
pub fn psnr(a: &ImageBuf, b: &ImageBuf, peak: f64) -> Result<f64> {
    if (a.height, a.width, a.channels) != (b.height, b.width, b.channels) {
        return Err(Error::Geometry(format!(
            "psnr of {}x{}x{} vs {}x{}x{}",
            a.height, a.width, a.channels, b.height, b.width, b.channels
        )));
    }
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Masks of one strategy, one per evaluation image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSet {
    pub strategy: Strategy,
    pub ratio: f64,
    pub masks: Vec<MaskSet>,
}

impl EvalSet {
    /// Column label such as `random_75`.
    pub fn name(&self) -> String {
        format!("{}_{}", self.strategy, (self.ratio * 100.0).round() as i64)
    }
}

/// The frozen evaluation masks with the seed that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSets {
    pub seed: u64,
    pub grid_h: usize,
    pub grid_w: usize,
    pub sets: Vec<EvalSet>,
}

/// Random 75%, block 50% and span 50% evaluation masks.
pub fn default_eval_masks() -> MultiMaskConfig {
    MultiMaskConfig::default()
}

/// One mask per image and strategy. Image `i` of strategy `s` uses
/// `derive_seed(seed, "eval/<s>", i)`.
pub fn build_eval_sets(
    num_images: usize,
    grid_h: usize,
    grid_w: usize,
    cfg: &MultiMaskConfig,
    seed: u64,
) -> Result<EvalSets> {
    if num_images == 0 {
        return Err(Error::Config("evaluation needs at least one image".into()));
    }
    let sets = Strategy::ALL
        .iter()
        .map(|&s| {
            let tag = format!("eval/{s}");
            let masks = (0..num_images)
                .map(|i| sample_mask_lenient(grid_h, grid_w, s, cfg, derive_seed(seed, &tag, i as u64)))
                .collect::<Result<Vec<_>>>()?;
            Ok(EvalSet {
                strategy: s,
                ratio: cfg.ratio(s),
                masks,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalSets {
        seed,
        grid_h,
        grid_w,
        sets,
    })
}

impl EvalSets {
    pub fn num_images(&self) -> usize {
        self.sets.first().map_or(0, |s| s.masks.len())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("eval sets serialize");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Composed reconstruction and its PSNR against the original.
pub fn reconstruct(params: &MmsParams, image: &ImageBuf, mask: &MaskSet) -> Result<(ImageBuf, f64)> {
    let sample = Sample::from_image(image, params.config.patch_size)?;
    let out = run_branch(params, &sample, mask, false)?;
    let composed = compose_reconstruction(&sample.input, &out.recon_patches, mask)?;
    let original = depatchify(&sample.input)?;
    let p = psnr(&composed, &original, 1.0)?;
    Ok((composed, p))
}

/// Per-image PSNR of every evaluation set, `[set][image]`.
pub fn score(params: &MmsParams, images: &[ImageBuf], sets: &EvalSets) -> Result<Vec<Vec<f64>>> {
    if images.len() != sets.num_images() {
        return Err(Error::Config(format!(
            "{} images for evaluation sets of {}",
            images.len(),
            sets.num_images()
        )));
    }
    sets.sets
        .iter()
        .map(|set| {
            images
                .iter()
                .zip(&set.masks)
                .map(|(img, m)| reconstruct(params, img, m).map(|(_, p)| p))
                .collect()
        })
        .collect()
}

/// Mean of per-image values.
pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Models × evaluation sets table of mean per-image PSNR.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PsnrTable {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl PsnrTable {
    pub fn build(models: &[(String, &MmsParams)], images: &[ImageBuf], sets: &EvalSets) -> Result<Self> {
        let rows = models
            .iter()
            .map(|(name, p)| {
                let per = score(p, images, sets)?;
                Ok((name.clone(), per.iter().map(|v| mean(v)).collect()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            columns: sets.sets.iter().map(EvalSet::name).collect(),
            rows,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("model,{}\n", self.columns.join(","));
        for (name, vals) in &self.rows {
            let cells: Vec<String> = vals.iter().map(|v| format!("{v:.4}")).collect();
            out.push_str(&format!("{name},{}\n", cells.join(",")));
        }
        out
    }

    /// Index of the best row in column `c`.
    pub fn column_argmax(&self, c: usize) -> usize {
        (0..self.rows.len())
            .max_by(|&a, &b| self.rows[a].1[c].total_cmp(&self.rows[b].1[c]).then(b.cmp(&a)))
            .expect("non-empty table")
    }

    /// Index of the worst row in column `c`.
    pub fn column_argmin(&self, c: usize) -> usize {
        (0..self.rows.len())
            .min_by(|&a, &b| self.rows[a].1[c].total_cmp(&self.rows[b].1[c]).then(a.cmp(&b)))
            .expect("non-empty table")
    }
}

/// How much of one character's box lies under masked patches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CharCoverage {
    pub fraction: f64,
    pub fully_masked: bool,
}

/// Fraction of each box's pixels inside masked patches.
pub fn char_coverage(mask: &MaskSet, boxes: &[CharBox], patch_size: usize) -> Vec<CharCoverage> {
    boxes
        .iter()
        .map(|b| {
            let mut covered = 0;
            for y in b.y0..b.y1 {
                for x in b.x0..b.x1 {
                    let (gy, gx) = (y / patch_size, x / patch_size);
                    if gy < mask.grid_h && gx < mask.grid_w && mask.is_masked(gy * mask.grid_w + gx) {
                        covered += 1;
                    }
                }
            }
            let fraction = if b.area() == 0 { 0.0 } else { covered as f64 / b.area() as f64 };
            CharCoverage {
                fraction,
                fully_masked: covered == b.area() && b.area() > 0,
            }
        })
        .collect()
}

/// Ten equal-width bins over `[0, 1]`, the last one closed.
pub fn histogram10(values: impl IntoIterator<Item = f64>) -> [usize; 10] {
    let mut h = [0; 10];
    for v in values {
        h[((v * 10.0) as usize).min(9)] += 1;
    }
    h
}

/// `+inf` and NaN become strings so the report stays valid JSON.
pub(crate) fn json_f64<S: serde::Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str(&v.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SetReport {
    pub name: String,
    pub strategy: Strategy,
    pub ratio: f64,
    #[serde(serialize_with = "json_f64")]
    pub mean_psnr: f64,
    pub mean_mask_ratio: f64,
    /// Character coverage histogram, present when boxes are known.
    pub coverage_histogram: Option<[usize; 10]>,
    pub fully_masked_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub checkpoint_sha256: String,
    pub preset: String,
    pub eval_seed: u64,
    pub num_images: usize,
    pub sets: Vec<SetReport>,
    pub probe: Option<probe::ProbeReport>,
}

/// Scores one checkpoint on every set; `boxes[i]` are the character boxes of
/// image `i` when known.
pub fn evaluate(
    params: &MmsParams,
    images: &[ImageBuf],
    sets: &EvalSets,
    boxes: Option<&[Vec<CharBox>]>,
) -> Result<(Vec<SetReport>, Vec<Vec<f64>>)> {
    let per_image = score(params, images, sets)?;
    let reports = sets
        .sets
        .iter()
        .zip(&per_image)
        .map(|(set, psnrs)| {
            let cov: Option<Vec<CharCoverage>> = boxes.map(|bs| {
                set.masks
                    .iter()
                    .zip(bs)
                    .flat_map(|(m, b)| char_coverage(m, b, params.config.patch_size))
                    .collect()
            });
            SetReport {
                name: set.name(),
                strategy: set.strategy,
                ratio: set.ratio,
                mean_psnr: mean(psnrs),
                mean_mask_ratio: mean(&set.masks.iter().map(MaskSet::ratio).collect::<Vec<_>>()),
                coverage_histogram: cov.as_ref().map(|c| histogram10(c.iter().map(|c| c.fraction))),
                fully_masked_fraction: cov.as_ref().map(|c| {
                    c.iter().filter(|c| c.fully_masked).count() as f64 / c.len().max(1) as f64
                }),
            }
        })
        .collect();
    Ok((reports, per_image))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::patchify;
    use crate::mask::{random_mask, span_mask, SpanConfig};
    use crate::model::ModelConfig;
    use crate::rng::Rng;

    fn noise_image(seed: u64) -> ImageBuf {
        let mut rng = Rng::new(seed);
        let data = (0..32 * 128 * 3).map(|_| rng.uniform()).collect();
        ImageBuf::new(32, 128, 3, data).unwrap()
    }

    #[test]
    fn composition_boundaries() {
        let img = noise_image(1);
        let grid = patchify(&img, 4).unwrap();
        let recon = Tensor::construct(&[256, 48], crate::tensor::Init::Constant(0.7)).unwrap();
        let none = MaskSet::from_indices(8, 32, &[], Strategy::Random, 0.0).unwrap();
        assert_eq!(compose_reconstruction(&grid, &recon, &none).unwrap(), img);

        let all: Vec<usize> = (0..256).collect();
        let full = MaskSet::from_indices(8, 32, &all, Strategy::Random, 1.0).unwrap();
        let out = compose_reconstruction(&grid, &recon, &full).unwrap();
        let stats = normalize_targets(&grid, NORM_EPS).unwrap();
        let out_grid = patchify(&out, 4).unwrap();
        for i in 0..256 {
            let v = (0.7 * stats.per_patch_std.data()[i] + stats.per_patch_mean.data()[i]).clamp(0.0, 1.0);
            assert!(out_grid.patches.row(i).iter().all(|&x| x == v));
        }
    }

    #[test]
    fn composition_keeps_visible_pixels_bitwise() {
        let img = noise_image(2);
        let grid = patchify(&img, 4).unwrap();
        let mut rng = Rng::new(3);
        let recon = Tensor::new(vec![256, 48], (0..256 * 48).map(|_| rng.gaussian()).collect()).unwrap();
        let m = random_mask(8, 32, 0.5, 4).unwrap();
        let out = compose_reconstruction(&grid, &recon, &m).unwrap();
        for y in 0..32 {
            for x in 0..128 {
                let visible = !m.is_masked((y / 4) * 32 + x / 4);
                for c in 0..3 {
                    if visible {
                        assert_eq!(out.at(y, x, c).to_bits(), img.at(y, x, c).to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn composition_rejects_mismatches() {
        let grid = patchify(&noise_image(2), 4).unwrap();
        let m = random_mask(8, 32, 0.5, 4).unwrap();
        assert!(matches!(
            compose_reconstruction(&grid, &Tensor::zeros(&[255, 48]), &m),
            Err(Error::Geometry(_))
        ));
        let other = random_mask(4, 32, 0.5, 4).unwrap();
        assert!(compose_reconstruction(&grid, &Tensor::zeros(&[256, 48]), &other).is_err());
    }

    #[test]
    fn psnr_closed_forms() {
        let a = ImageBuf::filled(2, 2, 1, 0.0);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = ImageBuf::filled(2, 2, 1, 1.0);
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), 0.0);
        let c = ImageBuf::filled(2, 2, 1, 0.1);
        assert!((psnr(&a, &c, 1.0).unwrap() - 20.0).abs() < 1e-12);
        assert!(matches!(psnr(&a, &ImageBuf::filled(2, 3, 1, 0.0), 1.0), Err(Error::Geometry(_))));
    }

    #[test]
    fn eval_sets_are_reproducible_and_sized() {
        let a = build_eval_sets(20, 8, 32, &default_eval_masks(), 9).unwrap();
        let b = build_eval_sets(20, 8, 32, &default_eval_masks(), 9).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let names: Vec<String> = a.sets.iter().map(EvalSet::name).collect();
        assert_eq!(names, ["random_75", "block_50", "span_50"]);
        for i in 0..20 {
            assert_eq!(a.sets[0].masks[i].len(), 192);
            assert!(a.sets[1].masks[i].len() >= 128);
            assert!(a.sets[2].masks[i].len() > 128);
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sets.json");
        a.save(&p).unwrap();
        assert_eq!(EvalSets::load(&p).unwrap(), a);
    }

    #[test]
    fn table_has_models_by_sets_shape() {
        let images: Vec<ImageBuf> = (0..3).map(noise_image).collect();
        let sets = build_eval_sets(3, 8, 32, &default_eval_masks(), 1).unwrap();
        let cfg = ModelConfig::preset("micro").unwrap();
        let ps: Vec<MmsParams> = (0..4).map(|s| MmsParams::init(&cfg, s).unwrap()).collect();
        let models: Vec<(String, &MmsParams)> =
            ["random", "block", "span", "mms"].iter().zip(&ps).map(|(n, p)| (n.to_string(), p)).collect();
        let t = PsnrTable::build(&models, &images, &sets).unwrap();
        assert_eq!(t.rows.len(), 4);
        assert!(t.rows.iter().all(|(_, v)| v.len() == 3 && v.iter().all(|x| x.is_finite())));
        let csv = t.to_csv();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.starts_with("model,random_75,block_50,span_50\n"));
    }

    #[test]
    fn coverage_geometry_oracle() {
        let boxes = [
            CharBox { x0: 8, y0: 4, x1: 16, y1: 18 },
            CharBox { x0: 24, y0: 4, x1: 32, y1: 18 },
            CharBox { x0: 10, y0: 2, x1: 14, y1: 10 },
        ];
        // columns 2 and 3 cover pixels 8..16 over the full height
        let idx: Vec<usize> = (0..8).flat_map(|r| [r * 32 + 2, r * 32 + 3]).collect();
        let m = MaskSet::from_indices(8, 32, &idx, Strategy::Span, 0.0).unwrap();
        let cov = char_coverage(&m, &boxes, 4);
        assert_eq!(cov[0].fraction, 1.0);
        assert!(cov[0].fully_masked);
        assert_eq!(cov[1].fraction, 0.0);
        assert!(cov[2].fully_masked);

        let none = MaskSet::from_indices(8, 32, &[], Strategy::Span, 0.0).unwrap();
        assert!(char_coverage(&none, &boxes, 4).iter().all(|c| c.fraction == 0.0));
        let all: Vec<usize> = (0..256).collect();
        let full = MaskSet::from_indices(8, 32, &all, Strategy::Span, 1.0).unwrap();
        assert!(char_coverage(&full, &boxes, 4).iter().all(|c| c.fully_masked));
    }

    #[test]
    fn coverage_is_monotone_under_superset() {
        let boxes = [CharBox { x0: 5, y0: 3, x1: 19, y1: 29 }, CharBox { x0: 40, y0: 0, x1: 61, y1: 21 }];
        for seed in 0..50 {
            let small = span_mask(8, 32, &SpanConfig::new(0.3, 8), seed).unwrap();
            let extra = random_mask(8, 32, 0.3, seed).unwrap();
            let union: Vec<usize> = small.masked.iter().chain(&extra.masked).copied().collect();
            let big = MaskSet::from_indices(8, 32, &union, Strategy::Span, 0.0).unwrap();
            for (a, b) in char_coverage(&small, &boxes, 4).iter().zip(char_coverage(&big, &boxes, 4)) {
                assert!(a.fraction <= b.fraction);
                assert!((0.0..=1.0).contains(&a.fraction));
            }
        }
    }

    #[test]
    fn histogram_bins() {
        assert_eq!(histogram10([0.0, 0.05, 0.1, 0.99, 1.0]), [2, 1, 0, 0, 0, 0, 0, 0, 0, 2]);
    }
}
