use std::path::PathBuf;

use anyhow::Result;
use clap::ValueEnum;
use mms_core::image::{load_model_input, patchify, read_pnm, resize_bilinear, write_pnm};
use mms_core::model::attention::{attention_char, attention_cls, attention_patch, DEFAULT_TAU};
use serde::Serialize;

use crate::io::{load_params, require_exists};
use crate::manifest::RunManifest;

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Cls,
    Patch,
    Char,
}

#[derive(clap::Args, Debug)]
pub struct Args {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Input image; the built-in demo word when omitted.
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Mode::Cls)]
    pub mode: Mode,
    /// Query patch for `--mode patch` (row-major index).
    #[arg(long)]
    pub patch_index: Option<usize>,
    /// Binary PGM marking one character's pixels, for `--mode char`.
    #[arg(long)]
    pub char_mask: Option<PathBuf>,
    /// Fraction of attention mass kept in the heatmap.
    #[arg(long, default_value_t = DEFAULT_TAU)]
    pub tau: f64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(a: Args) -> Result<()> {
    require_exists(&a.ckpt, "checkpoint")?;
    if let Some(p) = &a.image {
        require_exists(p, "image")?;
    }
    if !(a.tau > 0.0 && a.tau <= 1.0) {
        return Err(crate::usage(format!("--tau must be in (0, 1], got {}", a.tau)));
    }
    match a.mode {
        Mode::Patch if a.patch_index.is_none() => return Err(crate::usage("--mode patch needs --patch-index")),
        Mode::Char if a.char_mask.is_none() => return Err(crate::usage("--mode char needs --char-mask")),
        _ => {}
    }
    if let Some(p) = &a.char_mask {
        require_exists(p, "character mask")?;
    }
    let mut inputs = vec![a.ckpt.as_path()];
    inputs.extend(a.image.as_deref());
    inputs.extend(a.char_mask.as_deref());
    let config = serde_json::json!({
        "mode": a.mode,
        "patch_index": a.patch_index,
        "tau": a.tau,
        "image": a.image.as_ref().map_or("demo".to_string(), |p| p.display().to_string()),
    });
    let manifest = RunManifest::begin(&a.out, "attn", config, &[], &inputs)?;

    let params = load_params(&a.ckpt)?;
    let cfg = &params.config;
    let (h, w) = (cfg.grid_h * cfg.patch_size, cfg.grid_w * cfg.patch_size);
    let img = match &a.image {
        Some(p) => load_model_input(p)?,
        None => super::mask::demo_image(),
    };
    let grid = patchify(&img, cfg.patch_size)?;
    let map = match a.mode {
        Mode::Cls => attention_cls(&params, &grid, a.tau)?,
        Mode::Patch => attention_patch(&params, &grid, a.patch_index.unwrap_or(0), a.tau)?,
        Mode::Char => {
            let m = read_pnm(a.char_mask.as_deref().expect("checked above"))?;
            let m = if (m.height, m.width) == (h, w) { m } else { resize_bilinear(&m, h, w)? };
            attention_char(&params, &grid, &m, a.tau)?
        }
    };
    write_pnm(&a.out.join("heatmap.pgm"), &map.heatmap(cfg.patch_size))?;
    write_pnm(&a.out.join("overlay.ppm"), &map.overlay(&img, cfg.patch_size)?)?;
    std::fs::write(a.out.join("attention.json"), serde_json::to_string_pretty(&map)? + "\n")?;
    eprintln!(
        "kept {} of {} patches (cls mass {:.4})",
        map.kept.iter().filter(|&&k| k).count(),
        map.weights.len(),
        map.cls_mass
    );
    manifest.finish()
}
