//! Deterministic synthetic word images with exact per-character boxes and
//! glyph masks, rendered from an embedded 5×7 bitmap font.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::image::{load_model_input, read_pnm, write_pnm, ImageBuf, IMAGE_H, IMAGE_W};
use crate::rng::{derive_seed, Rng};
use crate::{Error, Result};

pub const GLYPH_W: usize = 5;
pub const GLYPH_H: usize = 7;
/// Contrast floor every sample satisfies.
pub const MIN_CONTRAST: f64 = 0.2;

#[rustfmt::skip]
const FONT: [(char, [&str; GLYPH_H]); 36] = [
    ('A', [".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"]),
    ('B', ["####.", "#...#", "#...#", "####.", "#...#", "#...#", "####."]),
    ('C', [".###.", "#...#", "#....", "#....", "#....", "#...#", ".###."]),
    ('D', ["####.", "#...#", "#...#", "#...#", "#...#", "#...#", "####."]),
    ('E', ["#####", "#....", "#....", "####.", "#....", "#....", "#####"]),
    ('F', ["#####", "#....", "#....", "####.", "#....", "#....", "#...."]),
    ('G', [".###.", "#...#", "#....", "#.###", "#...#", "#...#", ".####"]),
    ('H', ["#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"]),
    ('I', [".###.", "..#..", "..#..", "..#..", "..#..", "..#..", ".###."]),
    ('J', ["..###", "...#.", "...#.", "...#.", "...#.", "#..#.", ".##.."]),
    ('K', ["#...#", "#..#.", "#.#..", "##...", "#.#..", "#..#.", "#...#"]),
    ('L', ["#....", "#....", "#....", "#....", "#....", "#....", "#####"]),
    ('M', ["#...#", "##.##", "#.#.#", "#.#.#", "#...#", "#...#", "#...#"]),
    ('N', ["#...#", "#...#", "##..#", "#.#.#", "#..##", "#...#", "#...#"]),
    ('O', [".###.", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."]),
    ('P', ["####.", "#...#", "#...#", "####.", "#....", "#....", "#...."]),
    ('Q', [".###.", "#...#", "#...#", "#...#", "#.#.#", "#..#.", ".##.#"]),
    ('R', ["####.", "#...#", "#...#", "####.", "#.#..", "#..#.", "#...#"]),
    ('S', [".####", "#....", "#....", ".###.", "....#", "....#", "####."]),
    ('T', ["#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."]),
    ('U', ["#...#", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."]),
    ('V', ["#...#", "#...#", "#...#", "#...#", "#...#", ".#.#.", "..#.."]),
    ('W', ["#...#", "#...#", "#...#", "#.#.#", "#.#.#", "#.#.#", ".#.#."]),
    ('X', ["#...#", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", "#...#"]),
    ('Y', ["#...#", "#...#", ".#.#.", "..#..", "..#..", "..#..", "..#.."]),
    ('Z', ["#####", "....#", "...#.", "..#..", ".#...", "#....", "#####"]),
    ('0', [".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."]),
    ('1', ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."]),
    ('2', [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"]),
    ('3', ["#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."]),
    ('4', ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."]),
    ('5', ["#####", "#....", "####.", "....#", "....#", "#...#", ".###."]),
    ('6', ["..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."]),
    ('7', ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."]),
    ('8', [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."]),
    ('9', [".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."]),
];

/// Uppercase letters then digits.
pub const DEFAULT_CHARSET: &str = "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";

fn glyph(c: char) -> Option<&'static [&'static str; GLYPH_H]> {
    FONT.iter().find(|(g, _)| *g == c).map(|(_, rows)| rows)
}

/// Pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl CharBox {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub charset: String,
    pub min_len: usize,
    pub max_len: usize,
    /// Inclusive range of integer glyph scales.
    pub scale_range: (usize, usize),
    /// Channel values of foreground and background are drawn from here.
    pub color_range: (f64, f64),
    /// Required `|mean(fg) - mean(bg)|`; at least [`MIN_CONTRAST`].
    pub min_contrast: f64,
    pub noise_std: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            charset: DEFAULT_CHARSET.to_string(),
            min_len: 3,
            max_len: 10,
            scale_range: (2, 3),
            color_range: (0.0, 1.0),
            min_contrast: 0.3,
            noise_std: 0.02,
        }
    }
}

fn fits(n: usize, scale: usize, gap: usize) -> bool {
    n * GLYPH_W * scale + n.saturating_sub(1) * gap <= IMAGE_W && GLYPH_H * scale <= IMAGE_H
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.charset.is_empty() {
            return bad("charset is empty".into());
        }
        if let Some(c) = self.charset.chars().find(|&c| glyph(c).is_none()) {
            return bad(format!("charset character {c:?} has no glyph"));
        }
        let (s0, s1) = self.scale_range;
        if s0 == 0 || s0 > s1 {
            return bad(format!("invalid scale range {s0}..={s1}"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!("invalid length range {}..={}", self.min_len, self.max_len));
        }
        if !fits(self.max_len, s0, 1) {
            return bad(format!(
                "words of {} characters do not fit {IMAGE_W} pixels at scale {s0}",
                self.max_len
            ));
        }
        let (lo, hi) = self.color_range;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi {
            return bad(format!("color range ({lo}, {hi}) must be increasing within [0, 1]"));
        }
        if self.min_contrast < MIN_CONTRAST || self.min_contrast > (hi - lo) / 2.0 {
            return bad(format!(
                "min_contrast {} must lie in [{MIN_CONTRAST}, {}]",
                self.min_contrast,
                (hi - lo) / 2.0
            ));
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std must be non-negative".into());
        }
        Ok(())
    }
}

/// Where and how large a word is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub scale: usize,
    pub top: usize,
    pub left: usize,
    /// Blank columns between neighbouring glyph cells.
    pub gap: usize,
}

impl Layout {
    /// Character cells in reading order.
    pub fn boxes(&self, n: usize) -> Vec<CharBox> {
        let (w, h) = (GLYPH_W * self.scale, GLYPH_H * self.scale);
        (0..n)
            .map(|i| {
                let x0 = self.left + i * (w + self.gap);
                CharBox {
                    x0,
                    y0: self.top,
                    x1: x0 + w,
                    y1: self.top + h,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub image: ImageBuf,
    pub word: String,
    pub char_boxes: Vec<CharBox>,
    /// Ink pixels of each glyph, row-major within its box.
    pub char_masks: Vec<Vec<bool>>,
    pub layout: Layout,
    pub foreground: [f64; 3],
    pub background: [f64; 3],
    pub seed: u64,
}

impl SyntheticSample {
    /// `|mean(fg) - mean(bg)|` of the noise-free colors.
    pub fn contrast(&self) -> f64 {
        contrast(&self.foreground, &self.background)
    }

    /// Full-size one-channel mask of glyph `i` (ink = 1).
    pub fn char_mask_image(&self, i: usize) -> ImageBuf {
        let b = self.char_boxes[i];
        let mut out = ImageBuf::filled(self.image.height, self.image.width, 1, 0.0);
        for (k, &ink) in self.char_masks[i].iter().enumerate() {
            if ink {
                out.set(b.y0 + k / b.width(), b.x0 + k % b.width(), 0, 1.0);
            }
        }
        out
    }

    /// Full-size one-channel mask of box `i` (inside = 1).
    pub fn char_box_image(&self, i: usize) -> ImageBuf {
        let b = self.char_boxes[i];
        let mut out = ImageBuf::filled(self.image.height, self.image.width, 1, 0.0);
        for y in b.y0..b.y1 {
            for x in b.x0..b.x1 {
                out.set(y, x, 0, 1.0);
            }
        }
        out
    }
}

fn contrast(fg: &[f64; 3], bg: &[f64; 3]) -> f64 {
    (fg.iter().sum::<f64>() - bg.iter().sum::<f64>()).abs() / 3.0
}

/// Renders `word` at an explicit layout with explicit colors. Noise is drawn
/// from `seed`.
pub fn render_with_layout(
    word: &str,
    layout: Layout,
    foreground: [f64; 3],
    background: [f64; 3],
    noise_std: f64,
    seed: u64,
) -> Result<SyntheticSample> {
    let chars: Vec<char> = word.chars().collect();
    if chars.is_empty() {
        return Err(Error::Layout("empty word".into()));
    }
    let glyphs = chars
        .iter()
        .map(|&c| glyph(c).ok_or_else(|| Error::Layout(format!("no glyph for {c:?}"))))
        .collect::<Result<Vec<_>>>()?;
    if layout.scale == 0 {
        return Err(Error::Layout("scale must be positive".into()));
    }
    let boxes = layout.boxes(chars.len());
    let last = boxes[boxes.len() - 1];
    if last.x1 > IMAGE_W || last.y1 > IMAGE_H {
        return Err(Error::Layout(format!(
            "{word:?} at scale {} needs {}x{} pixels from ({}, {}), image is {IMAGE_H}x{IMAGE_W}",
            layout.scale,
            last.y1 - layout.top,
            last.x1 - layout.left,
            layout.top,
            layout.left
        )));
    }
    let s = layout.scale;
    let mut img = ImageBuf::filled(IMAGE_H, IMAGE_W, 3, 0.0);
    let mut masks = Vec::with_capacity(chars.len());
    for (rows, b) in glyphs.iter().zip(&boxes) {
        let mut m = vec![false; b.area()];
        for (k, ink) in m.iter_mut().enumerate() {
            let (dy, dx) = (k / b.width(), k % b.width());
            *ink = rows[dy / s].as_bytes()[dx / s] == b'#';
        }
        masks.push(m);
    }
    let mut ink = vec![false; IMAGE_H * IMAGE_W];
    for (m, b) in masks.iter().zip(&boxes) {
        for (k, &on) in m.iter().enumerate() {
            if on {
                ink[(b.y0 + k / b.width()) * IMAGE_W + b.x0 + k % b.width()] = true;
            }
        }
    }
    let mut rng = Rng::new(derive_seed(seed, "noise", 0));
    for (p, &on) in ink.iter().enumerate() {
        let color = if on { &foreground } else { &background };
        for (c, &base) in color.iter().enumerate() {
            let v = if noise_std > 0.0 {
                base + noise_std * rng.gaussian()
            } else {
                base
            };
            img.data[p * 3 + c] = v.clamp(0.0, 1.0);
        }
    }
    Ok(SyntheticSample {
        image: img,
        word: word.to_string(),
        char_boxes: boxes,
        char_masks: masks,
        layout,
        foreground,
        background,
        seed,
    })
}

/// Draws foreground and background colors with at least `min_contrast`.
fn sample_colors(cfg: &SynthConfig, rng: &mut Rng) -> ([f64; 3], [f64; 3]) {
    let (lo, hi) = cfg.color_range;
    let draw = |rng: &mut Rng| [rng.uniform_in(lo, hi), rng.uniform_in(lo, hi), rng.uniform_in(lo, hi)];
    let bg = draw(rng);
    for _ in 0..32 {
        let fg = draw(rng);
        if contrast(&fg, &bg) >= cfg.min_contrast {
            return (fg, bg);
        }
    }
    // the far end of the range is at least (hi - lo) / 2 away from mean(bg)
    let mean = bg.iter().sum::<f64>() / 3.0;
    let v = if mean < (lo + hi) / 2.0 { hi } else { lo };
    ([v; 3], bg)
}

/// Renders `word` with scale, position, spacing, colors and noise sampled
/// from `seed`.
pub fn render_word(word: &str, cfg: &SynthConfig, seed: u64) -> Result<SyntheticSample> {
    let n = word.chars().count();
    let mut rng = Rng::new(seed);
    let scales: Vec<usize> = (cfg.scale_range.0..=cfg.scale_range.1)
        .filter(|&s| fits(n, s, 1))
        .collect();
    if n == 0 || scales.is_empty() {
        return Err(Error::Layout(format!(
            "{word:?} does not fit {IMAGE_W} pixels at any scale in {}..={}",
            cfg.scale_range.0, cfg.scale_range.1
        )));
    }
    let scale = scales[rng.below(scales.len() as u64) as usize];
    let glyph_w = n * GLYPH_W * scale;
    let max_gap = if n > 1 {
        ((IMAGE_W - glyph_w) / (n - 1)).min(2 * scale)
    } else {
        1
    };
    let gap = rng.range_inclusive(1, max_gap);
    let width = glyph_w + (n - 1) * gap;
    let left = rng.range_inclusive(0, IMAGE_W - width);
    let top = rng.range_inclusive(0, IMAGE_H - GLYPH_H * scale);
    let (fg, bg) = sample_colors(cfg, &mut rng);
    render_with_layout(word, Layout { scale, top, left, gap }, fg, bg, cfg.noise_std, seed)
}

/// Renders `word` at a given layout with colors and noise sampled from
/// `seed`.
pub fn render_at(word: &str, layout: Layout, cfg: &SynthConfig, seed: u64) -> Result<SyntheticSample> {
    let mut rng = Rng::new(seed);
    let (fg, bg) = sample_colors(cfg, &mut rng);
    render_with_layout(word, layout, fg, bg, cfg.noise_std, seed)
}

/// Word of uniform length in `[min_len, max_len]` with uniform characters.
pub fn sample_word(cfg: &SynthConfig, seed: u64) -> String {
    let mut rng = Rng::new(seed);
    let chars: Vec<char> = cfg.charset.chars().collect();
    let len = rng.range_inclusive(cfg.min_len, cfg.max_len);
    (0..len)
        .map(|_| chars[rng.below(chars.len() as u64) as usize])
        .collect()
}

/// Seed of sample `index` in a dataset generated from `seed`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, "synth", index as u64)
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub index: usize,
    pub file: String,
    pub word: String,
    pub seed: u64,
    pub layout: Layout,
    pub foreground: [f64; 3],
    pub background: [f64; 3],
    pub boxes: Vec<CharBox>,
}

/// `n` samples with independently derived seeds.
pub fn make_dataset(n: usize, cfg: &SynthConfig, seed: u64) -> Result<Vec<SyntheticSample>> {
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    cfg.validate()?;
    (0..n)
        .map(|i| {
            let s = sample_seed(seed, i);
            render_word(&sample_word(cfg, derive_seed(s, "word", 0)), cfg, s)
        })
        .collect()
}

pub fn manifest(samples: &[SyntheticSample]) -> Vec<ManifestRow> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| ManifestRow {
            index: i,
            file: format!("{i:06}.ppm"),
            word: s.word.clone(),
            seed: s.seed,
            layout: s.layout,
            foreground: s.foreground,
            background: s.background,
            boxes: s.char_boxes.clone(),
        })
        .collect()
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const CONFIG_FILE: &str = "synth_config.json";

/// Writes `NNNNNN.ppm` images, `manifest.jsonl` and `synth_config.json`.
pub fn write_dataset(dir: &Path, samples: &[SyntheticSample], cfg: &SynthConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(MANIFEST_FILE);
    let mut out = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    for (row, s) in manifest(samples).iter().zip(samples) {
        write_pnm(&dir.join(&row.file), &s.image)?;
        let line = serde_json::to_string(row).expect("manifest row serializes");
        writeln!(out, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    let cfg_path = dir.join(CONFIG_FILE);
    let text = serde_json::to_string_pretty(cfg).expect("config serializes");
    fs::write(&cfg_path, text).map_err(|e| Error::io(&cfg_path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRow>> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| Error::format(&path, format!("line {}: {e}", n + 1)))
        })
        .collect()
}

pub fn read_synth_config(dir: &Path) -> Result<SynthConfig> {
    let path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}

/// Images and manifest rows of a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<(Vec<ManifestRow>, Vec<ImageBuf>)> {
    let rows = read_manifest(dir)?;
    let images = rows
        .iter()
        .map(|r| read_pnm(&dir.join(&r.file)))
        .collect::<Result<Vec<_>>>()?;
    Ok((rows, images))
}

/// Samples of a dataset directory: boxes and glyph masks are rebuilt from
/// the manifest, images are the stored (8-bit) files.
pub fn load_samples(dir: &Path) -> Result<Vec<SyntheticSample>> {
    let (rows, images) = read_dataset(dir)?;
    rows.into_iter()
        .zip(images)
        .map(|(row, image)| {
            let mut s = render_with_layout(&row.word, row.layout, row.foreground, row.background, 0.0, row.seed)?;
            if s.char_boxes != row.boxes {
                return Err(Error::format(dir.join(MANIFEST_FILE), format!("row {}: boxes disagree with layout", row.index)));
            }
            s.image = image;
            s.seed = row.seed;
            Ok(s)
        })
        .collect()
}

/// Every `.ppm`, `.pgm` or `.pnm` file in `dir` (sorted by name), converted
/// to RGB and resized to the model input size.
pub fn load_external(dir: &Path) -> Result<Vec<ImageBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
                Some("ppm" | "pgm" | "pnm")
            )
        })
        .collect();
    files.sort();
    files.iter().map(|p| load_model_input(p)).collect()
}
