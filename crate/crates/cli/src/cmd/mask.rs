use std::path::PathBuf;

use anyhow::{Context, Result};
use mms_core::image::{load_model_input, write_pnm, PATCH_SIZE, GRID_H, GRID_W};
use mms_core::mask::{apply_mask, column_runs, mask_to_bitmap, sample_mask, BlockConfig, MultiMaskConfig, SpanConfig, Strategy};
use serde::Serialize;

use crate::io::{require_exists, vstack};
use crate::manifest::RunManifest;

#[derive(clap::Args, Debug)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["image", "demo"]))]
pub struct Args {
    /// Any PPM/PGM image; it is resized to 32x128.
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Use the built-in rendered word instead of a file.
    #[arg(long)]
    pub demo: bool,
    #[arg(long, value_parser = parse_strategy)]
    pub strategy: Strategy,
    /// Masking ratio; defaults to 0.75 for random and 0.5 otherwise.
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Longest span in patch columns.
    #[arg(long, default_value_t = 8)]
    pub span_max: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn parse_strategy(s: &str) -> Result<Strategy, String> {
    Strategy::parse(s).ok_or_else(|| format!("unknown strategy {s:?} (random, block, span)"))
}

/// The demo word, drawn without noise so it never depends on an RNG draw
/// beyond its fixed seed.
pub fn demo_image() -> mms_core::image::ImageBuf {
    use mms_core::synth::{render_with_layout, Layout};
    let layout = Layout {
        scale: 3,
        top: 5,
        left: 4,
        gap: 3,
    };
    render_with_layout("MASKED", layout, [0.1, 0.1, 0.35], [0.95, 0.9, 0.8], 0.0, 0)
        .expect("demo word fits")
        .image
}

#[derive(Serialize)]
struct MaskFile<'a> {
    source: String,
    strategy: Strategy,
    ratio: f64,
    seed: u64,
    masked_count: usize,
    achieved_ratio: f64,
    /// Maximal masked column runs as `(start, length)`, span masks only.
    column_runs: Option<Vec<(usize, usize)>>,
    mask: &'a mms_core::mask::MaskSet,
}

pub fn run(a: Args) -> Result<()> {
    let ratio = a.ratio.unwrap_or(if a.strategy == Strategy::Random { 0.75 } else { 0.5 });
    let cfg = MultiMaskConfig {
        random_ratio: ratio,
        block: BlockConfig::new(ratio),
        span: SpanConfig::new(ratio, a.span_max),
    };
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(crate::usage(format!("--ratio must be in (0, 1], got {ratio}")));
    }
    match a.strategy {
        Strategy::Random => {}
        Strategy::Block => cfg.block.validate()?,
        Strategy::Span => cfg.span.validate(GRID_W)?,
    }
    let inputs: Vec<&std::path::Path> = a.image.iter().map(|p| p.as_path()).collect();
    if let Some(p) = &a.image {
        require_exists(p, "image")?;
    }
    let source = a.image.as_ref().map_or("demo".to_string(), |p| p.display().to_string());
    let manifest = RunManifest::begin(
        &a.out,
        "mask",
        serde_json::json!({"source": source, "strategy": a.strategy, "masks": cfg}),
        &[("seed", a.seed)],
        &inputs,
    )?;
    let img = match &a.image {
        Some(p) => load_model_input(p)?,
        None => demo_image(),
    };
    let mask = sample_mask(GRID_H, GRID_W, a.strategy, &cfg, a.seed)?;
    let masked = apply_mask(&img, &mask, PATCH_SIZE)?;
    write_pnm(&a.out.join("preview.ppm"), &vstack(&[img, masked]))?;
    write_pnm(&a.out.join("mask.pgm"), &mask_to_bitmap(&mask, PATCH_SIZE))?;
    let file = MaskFile {
        source,
        strategy: a.strategy,
        ratio,
        seed: a.seed,
        masked_count: mask.len(),
        achieved_ratio: mask.ratio(),
        column_runs: (a.strategy == Strategy::Span).then(|| column_runs(&mask)),
        mask: &mask,
    };
    let path = a.out.join("mask.json");
    std::fs::write(&path, serde_json::to_string_pretty(&file)? + "\n").with_context(|| format!("writing {}", path.display()))?;
    eprintln!("masked {} of {} patches", mask.len(), mask.num_patches());
    manifest.finish()
}
