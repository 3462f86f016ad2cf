use std::path::PathBuf;

use anyhow::Result;
use clap::ValueEnum;
use mms_core::eval::probe::probe_samples;
use mms_core::synth::{make_dataset, write_dataset, SynthConfig, DEFAULT_CHARSET};
use serde::Serialize;

use crate::manifest::RunManifest;

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LayoutMode {
    /// Random scale, gap and position per word.
    Free,
    /// The fixed layout the column probe expects.
    Probe,
}

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Number of images.
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = DEFAULT_CHARSET)]
    pub charset: String,
    #[arg(long, default_value_t = 3)]
    pub min_len: usize,
    #[arg(long, default_value_t = 10)]
    pub max_len: usize,
    #[arg(long, default_value_t = 2)]
    pub min_scale: usize,
    #[arg(long, default_value_t = 3)]
    pub max_scale: usize,
    #[arg(long, default_value_t = 0.3)]
    pub min_contrast: f64,
    /// Standard deviation of additive Gaussian pixel noise.
    #[arg(long, default_value_t = 0.02)]
    pub noise: f64,
    #[arg(long, value_enum, default_value_t = LayoutMode::Free)]
    pub layout: LayoutMode,
}

#[derive(Serialize)]
struct Resolved<'a> {
    n: usize,
    layout: LayoutMode,
    synth: &'a SynthConfig,
}

pub fn run(a: Args) -> Result<()> {
    let cfg = SynthConfig {
        charset: a.charset,
        min_len: a.min_len,
        max_len: a.max_len,
        scale_range: (a.min_scale, a.max_scale),
        min_contrast: a.min_contrast,
        noise_std: a.noise,
        ..SynthConfig::default()
    };
    cfg.validate()?;
    if a.n == 0 {
        return Err(crate::usage("--n must be at least 1"));
    }
    let resolved = Resolved {
        n: a.n,
        layout: a.layout,
        synth: &cfg,
    };
    let manifest = RunManifest::begin(&a.out, "synth", &resolved, &[("seed", a.seed)], &[])?;
    let samples = match a.layout {
        LayoutMode::Free => make_dataset(a.n, &cfg, a.seed)?,
        LayoutMode::Probe => probe_samples(a.n, &cfg, a.seed)?,
    };
    write_dataset(&a.out, &samples, &cfg)?;
    eprintln!("wrote {} images to {}", samples.len(), a.out.display());
    manifest.finish()
}
