//! Images, patch grids and binary PPM/PGM I/O.
//!
//! Pixels are `f64` in `[0, 1]`, row-major with channels interleaved
//! (`data[(y * width + x) * channels + c]`). A patch vector lists its pixels
//! row-major inside the patch, channels interleaved, so patch `k` of a grid
//! with `grid_w` columns covers rows `(k / grid_w) * p ..` and columns
//! `(k % grid_w) * p ..`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Default model input geometry: 32×128 pixels in 4×4 patches.
pub const IMAGE_H: usize = 32;
pub const IMAGE_W: usize = 128;
pub const PATCH_SIZE: usize = 4;
pub const GRID_H: usize = IMAGE_H / PATCH_SIZE;
pub const GRID_W: usize = IMAGE_W / PATCH_SIZE;
pub const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageBuf {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl ImageBuf {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || !(channels == 1 || channels == 3) {
            return Err(Error::Geometry(format!(
                "image {height}x{width}x{channels} is not a valid geometry"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Geometry(format!(
                "image {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self::new(height, width, channels, vec![value; height * width * channels])
            .expect("filled: invalid geometry")
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Grayscale images are replicated into three channels.
    pub fn to_rgb(&self) -> ImageBuf {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        ImageBuf::new(self.height, self.width, 3, data).unwrap()
    }

    pub fn clamp01(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }
}

/// An image cut into a `grid_h × grid_w` grid of square patches.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch_size: usize,
    pub channels: usize,
    /// `[N, patch_size² · channels]`.
    pub patches: Tensor,
    /// Per-patch statistics used by [`normalize_targets`]; zero mean and unit
    /// std for a grid that has not been normalized.
    pub per_patch_mean: Tensor,
    pub per_patch_std: Tensor,
}

impl PatchGrid {
    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn check(&self) -> Result<()> {
        let n = self.num_patches();
        if self.patches.shape() != [n, self.patch_dim()]
            || self.per_patch_mean.numel() != n
            || self.per_patch_std.numel() != n
        {
            return Err(Error::Geometry(format!(
                "patch grid {}x{} (p={}, c={}) inconsistent with patches {:?}",
                self.grid_h,
                self.grid_w,
                self.patch_size,
                self.channels,
                self.patches.shape()
            )));
        }
        Ok(())
    }

    /// Maps each patch row back through its stored mean and std.
    pub fn denormalize(&self) -> PatchGrid {
        let d = self.patch_dim();
        let mut out = self.clone();
        let mean = self.per_patch_mean.data();
        let std = self.per_patch_std.data();
        for (k, row) in out.patches.data_mut().chunks_exact_mut(d).enumerate() {
            for v in row.iter_mut() {
                *v = *v * std[k] + mean[k];
            }
        }
        let n = self.num_patches();
        out.per_patch_mean = Tensor::zeros(&[n]);
        out.per_patch_std = Tensor::construct(&[n], crate::tensor::Init::Constant(1.0)).unwrap();
        out
    }
}

pub fn patchify(img: &ImageBuf, patch_size: usize) -> Result<PatchGrid> {
    if patch_size == 0 || img.height % patch_size != 0 || img.width % patch_size != 0 {
        return Err(Error::Geometry(format!(
            "{}x{} image is not divisible into {patch_size}x{patch_size} patches",
            img.height, img.width
        )));
    }
    let (gh, gw, c) = (img.height / patch_size, img.width / patch_size, img.channels);
    let d = patch_size * patch_size * c;
    let mut data = Vec::with_capacity(gh * gw * d);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..patch_size {
                let y = gy * patch_size + py;
                let start = (y * img.width + gx * patch_size) * c;
                data.extend_from_slice(&img.data[start..start + patch_size * c]);
            }
        }
    }
    let n = gh * gw;
    Ok(PatchGrid {
        grid_h: gh,
        grid_w: gw,
        patch_size,
        channels: c,
        patches: Tensor::new(vec![n, d], data)?,
        per_patch_mean: Tensor::zeros(&[n]),
        per_patch_std: Tensor::construct(&[n], crate::tensor::Init::Constant(1.0))?,
    })
}

/// Inverse of [`patchify`]; the patch values are placed as stored.
pub fn depatchify(grid: &PatchGrid) -> Result<ImageBuf> {
    grid.check()?;
    let p = grid.patch_size;
    let c = grid.channels;
    let (h, w) = (grid.grid_h * p, grid.grid_w * p);
    let mut data = vec![0.0; h * w * c];
    for (k, patch) in grid.patches.data().chunks_exact(grid.patch_dim()).enumerate() {
        let (gy, gx) = (k / grid.grid_w, k % grid.grid_w);
        for py in 0..p {
            let y = gy * p + py;
            let start = (y * w + gx * p) * c;
            data[start..start + p * c].copy_from_slice(&patch[py * p * c..(py + 1) * p * c]);
        }
    }
    ImageBuf::new(h, w, c, data)
}

/// Per-patch standardization: each row becomes `(x - mean) / sqrt(var + eps)`
/// with the population variance over the patch's values.
pub fn normalize_targets(grid: &PatchGrid, eps: f64) -> Result<PatchGrid> {
    if !(eps > 0.0) {
        return Err(Error::Config(format!("normalization eps must be positive, got {eps}")));
    }
    grid.check()?;
    let d = grid.patch_dim();
    let n = grid.num_patches();
    let mut out = grid.clone();
    let mut means = vec![0.0; n];
    let mut stds = vec![0.0; n];
    for (k, row) in out.patches.data_mut().chunks_exact_mut(d).enumerate() {
        // a constant row has exactly zero spread; summation could leave a
        // last-bit residue in the mean otherwise
        let constant = row.iter().all(|&v| v == row[0]);
        let mean = if constant { row[0] } else { row.iter().sum::<f64>() / d as f64 };
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let std = (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) / std;
        }
        means[k] = mean;
        stds[k] = std;
    }
    out.per_patch_mean = Tensor::new(vec![n], means)?;
    out.per_patch_std = Tensor::new(vec![n], stds)?;
    Ok(out)
}

/// Bilinear resampling with half-pixel centers: output pixel `(y, x)` samples
/// the source at `((y + 0.5)·H/h − 0.5, (x + 0.5)·W/w − 0.5)`, clamped to the
/// source edge.
pub fn resize_bilinear(img: &ImageBuf, out_h: usize, out_w: usize) -> Result<ImageBuf> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Geometry(format!("cannot resize to {out_h}x{out_w}")));
    }
    if out_h == img.height && out_w == img.width {
        return Ok(img.clone());
    }
    let c = img.channels;
    let axis = |o: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(inp - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut data = Vec::with_capacity(out_h * out_w * c);
    for y in 0..out_h {
        let (y0, y1, fy) = axis(y, out_h, img.height);
        for x in 0..out_w {
            let (x0, x1, fx) = axis(x, out_w, img.width);
            for ch in 0..c {
                let top = img.at(y0, x0, ch) * (1.0 - fx) + img.at(y0, x1, ch) * fx;
                let bot = img.at(y1, x0, ch) * (1.0 - fx) + img.at(y1, x1, ch) * fx;
                data.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    ImageBuf::new(out_h, out_w, c, data)
}

/// Loads a P5/P6 file, replicates grayscale to RGB and resizes to 32×128.
pub fn load_model_input(path: &Path) -> Result<ImageBuf> {
    let img = read_pnm(path)?.to_rgb();
    resize_bilinear(&img, IMAGE_H, IMAGE_W)
}

// ---------------------------------------------------------------------------
// PPM / PGM

/// Encodes as binary PGM (1 channel) or PPM (3 channels) with maxval 255.
/// Values are clamped to `[0, 1]` and rounded to the nearest level.
pub fn encode_pnm(img: &ImageBuf) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn decode_pnm(bytes: &[u8], path: &Path) -> Result<ImageBuf> {
    let bad = |r: &str| Error::format(path, r.to_string());
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let channels = match token()?.as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(bad(&format!("unsupported magic {m:?}, expected P5 or P6"))),
    };
    let num = |s: String| s.parse::<usize>().map_err(|_| bad(&format!("bad header field {s:?}")));
    let width = num(token()?)?;
    let height = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval == 0 || maxval > 255 {
        return Err(bad(&format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let n = width * height * channels;
    if bytes.len() < start + n {
        return Err(bad("truncated raster"));
    }
    let data = bytes[start..start + n]
        .iter()
        .map(|&b| b as f64 / maxval as f64)
        .collect();
    ImageBuf::new(height, width, channels, data).map_err(|e| bad(&e.to_string()))
}

pub fn read_pnm(path: &Path) -> Result<ImageBuf> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes, path)
}

pub fn write_pnm(path: &Path, img: &ImageBuf) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_pnm(img)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> ImageBuf {
        let mut rng = Rng::new(seed);
        ImageBuf::new(h, w, c, (0..h * w * c).map(|_| rng.uniform()).collect()).unwrap()
    }

    #[test]
    fn default_geometry_gives_256_patches_of_48() {
        let g = patchify(&random_image(32, 128, 3, 1), 4).unwrap();
        assert_eq!(g.num_patches(), 256);
        assert_eq!(g.patches.shape(), &[256, 48]);
        assert_eq!((g.grid_h, g.grid_w), (8, 32));
    }

    #[test]
    fn single_patch_is_the_flattened_image() {
        let img = random_image(4, 4, 1, 2);
        let g = patchify(&img, 4).unwrap();
        assert_eq!(g.patches.data(), img.data.as_slice());
    }

    #[test]
    fn patch_layout_is_row_major_over_grid() {
        // pixel value encodes its coordinates
        let (h, w) = (8, 12);
        let data = (0..h * w).map(|i| i as f64).collect();
        let img = ImageBuf::new(h, w, 1, data).unwrap();
        let g = patchify(&img, 4).unwrap();
        // patch 4 is grid row 1, col 1: pixel (4,4) first, (4,5) second
        assert_eq!(g.patches.row(4)[0], (4 * w + 4) as f64);
        assert_eq!(g.patches.row(4)[1], (4 * w + 5) as f64);
        assert_eq!(g.patches.row(4)[4], (5 * w + 4) as f64);
    }

    #[test]
    fn non_divisible_is_geometry_error() {
        assert!(matches!(
            patchify(&random_image(30, 128, 3, 3), 4),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn inconsistent_grid_is_rejected() {
        let mut g = patchify(&random_image(8, 8, 1, 4), 4).unwrap();
        g.grid_w = 3;
        assert!(depatchify(&g).is_err());
    }

    #[test]
    fn constant_patch_normalizes_to_zero() {
        let img = ImageBuf::filled(4, 4, 3, 0.7);
        let g = normalize_targets(&patchify(&img, 4).unwrap(), NORM_EPS).unwrap();
        assert!(g.patches.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalized_patch_has_zero_mean_unit_std() {
        // eps shrinks the std by sqrt(var / (var + eps)); values spread over
        // [0, 47] keep that below 1e-6.
        let n = 48;
        let patch = Tensor::new(vec![1, n], (0..n).map(|i| ((i * 7) % n) as f64).collect()).unwrap();
        let grid = PatchGrid {
            grid_h: 1,
            grid_w: 1,
            patch_size: 4,
            channels: 3,
            patches: patch,
            per_patch_mean: Tensor::zeros(&[1]),
            per_patch_std: Tensor::scalar(1.0),
        };
        let g = normalize_targets(&grid, NORM_EPS).unwrap();
        let row = g.patches.row(0);
        let mean = row.iter().sum::<f64>() / n as f64;
        let std = (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        assert!(mean.abs() < 1e-12);
        assert!((std - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_eps_is_rejected() {
        let g = patchify(&random_image(4, 4, 1, 5), 4).unwrap();
        assert!(normalize_targets(&g, 0.0).is_err());
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = random_image(5, 7, 3, 6);
        let same = resize_bilinear(&img, 5, 7).unwrap();
        assert_eq!(same, img);
        let c = ImageBuf::filled(3, 5, 1, 0.3);
        let r = resize_bilinear(&c, 8, 11).unwrap();
        assert!(r.data.iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn resize_checkerboard_matches_hand_evaluation() {
        // [[1,0],[0,1]] to 4×4. Source coordinate per output index along an
        // axis: (o + 0.5)/2 - 0.5 = -0.25, 0.25, 0.75, 1.25, clamped to
        // 0, 0.25, 0.75, 1. Value = a(1-fx)(1-fy) + d·fx·fy for a=d=1, b=c=0,
        // i.e. (1-fx)(1-fy) + fx·fy.
        let img = ImageBuf::new(2, 2, 1, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let r = resize_bilinear(&img, 4, 4).unwrap();
        let f = [0.0, 0.25, 0.75, 1.0];
        for y in 0..4 {
            for x in 0..4 {
                let want = (1.0 - f[x]) * (1.0 - f[y]) + f[x] * f[y];
                assert!((r.at(y, x, 0) - want).abs() < 1e-15, "({y},{x})");
            }
        }
        assert_eq!(r.at(0, 0, 0), 1.0);
        assert_eq!(r.at(1, 1, 0), 0.625);
        assert_eq!(r.at(1, 2, 0), 0.375);
    }

    #[test]
    fn pnm_round_trip_is_byte_exact() {
        for c in [1, 3] {
            let mut rng = Rng::new(c as u64);
            let bytes: Vec<f64> = (0..6 * 5 * c).map(|_| rng.below(256) as f64 / 255.0).collect();
            let img = ImageBuf::new(6, 5, c, bytes).unwrap();
            let enc = encode_pnm(&img);
            let dec = decode_pnm(&enc, Path::new("mem")).unwrap();
            assert_eq!(dec, img);
            assert_eq!(encode_pnm(&dec), enc);
        }
    }

    #[test]
    fn pnm_header_comments_and_errors() {
        let bytes = b"P5\n# a comment\n2 1\n255\n\x00\xff";
        let img = decode_pnm(bytes, Path::new("mem")).unwrap();
        assert_eq!(img.data, vec![0.0, 1.0]);
        assert!(decode_pnm(b"P3\n1 1\n255\n1 2 3", Path::new("mem")).is_err());
        assert!(decode_pnm(b"P5\n4 4\n255\n\x00", Path::new("mem")).is_err());
    }

    #[test]
    fn gray_replicates_to_rgb() {
        let g = ImageBuf::new(1, 2, 1, vec![0.2, 0.9]).unwrap();
        assert_eq!(g.to_rgb().data, vec![0.2, 0.2, 0.2, 0.9, 0.9, 0.9]);
    }
}
