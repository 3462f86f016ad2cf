use std::path::PathBuf;

use anyhow::{Context, Result};
use mms_core::train::{train_loop, TrainConfig};

use crate::io::{load_dataset, require_exists};
use crate::manifest::RunManifest;

/// Resolved configuration written next to the outputs.
pub const CONFIG_FILE: &str = "config.txt";

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Dataset directory from `mms synth`, or a folder of PPM/PGM images.
    #[arg(long)]
    pub data: PathBuf,
    /// `key = value` file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint written by an earlier run with the same config.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// `desk` or `paper`; resets every value before the config file applies.
    #[arg(long)]
    pub profile: Option<String>,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub base_lr: Option<f64>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    /// Fixed number of optimizer steps instead of epochs.
    #[arg(long)]
    pub total_steps: Option<usize>,
    /// Comma-separated subset of random,block,span.
    #[arg(long)]
    pub branches: Option<String>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Any other config key, e.g. `--set span_max=6`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Print progress every this many steps.
    #[arg(long, default_value_t = 10)]
    pub log_every: usize,
}

fn is_profile_line(line: &str) -> bool {
    let line = line.split('#').next().unwrap_or("");
    line.split_once('=').is_some_and(|(k, _)| k.trim() == "profile")
}

/// Profile flag, then the config file, then the remaining flags.
pub fn resolve(a: &Args) -> Result<TrainConfig> {
    let mut cfg = match &a.profile {
        Some(p) => TrainConfig::profile(p)?,
        None => TrainConfig::default(),
    };
    if let Some(path) = &a.config {
        require_exists(path, "config file")?;
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let text: String = if a.profile.is_some() {
            text.lines().filter(|l| !is_profile_line(l)).map(|l| format!("{l}\n")).collect()
        } else {
            text
        };
        cfg.apply_text(&text).with_context(|| format!("in {}", path.display()))?;
    }
    let mut pairs: Vec<(String, String)> = Vec::new();
    let mut flag = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            pairs.push((k.to_string(), v));
        }
    };
    flag("preset", a.preset.clone());
    flag("epochs", a.epochs.map(|v| v.to_string()));
    flag("seed", a.seed.map(|v| v.to_string()));
    flag("batch_size", a.batch_size.map(|v| v.to_string()));
    flag("base_lr", a.base_lr.map(|v| v.to_string()));
    flag("warmup_steps", a.warmup_steps.map(|v| v.to_string()));
    flag("total_steps", a.total_steps.map(|v| v.to_string()));
    flag("branches", a.branches.clone());
    flag("checkpoint_every", a.checkpoint_every.map(|v| v.to_string()));
    for s in &a.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| crate::usage(format!("--set expects KEY=VALUE, got {s:?}")))?;
        if k.trim() == "profile" {
            return Err(crate::usage("use --profile instead of --set profile=..."));
        }
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    for (k, v) in pairs {
        cfg.set(&k, &v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(a: Args) -> Result<()> {
    let cfg = resolve(&a)?;
    if let Some(r) = &a.resume {
        require_exists(r, "resume checkpoint")?;
    }
    let data = load_dataset(&a.data)?;
    let mut inputs = vec![a.data.as_path()];
    inputs.extend(a.config.as_deref());
    inputs.extend(a.resume.as_deref());
    let manifest = RunManifest::begin(&a.out, "pretrain", &cfg, &[("seed", cfg.seed)], &inputs)?;
    std::fs::write(a.out.join(CONFIG_FILE), cfg.to_text())?;

    let total = cfg.schedule(data.images.len())?.total;
    eprintln!(
        "pre-training {} on {} images: {} steps, batch {}, branches {:?}",
        cfg.preset,
        data.images.len(),
        total,
        cfg.batch_size,
        cfg.branches.iter().map(|s| s.name()).collect::<Vec<_>>()
    );
    let every = a.log_every.max(1);
    let outcome = train_loop(&cfg, &data.images, &a.out, a.resume.as_deref(), &mut |s| {
        if s.step % every == 0 || s.step + 1 == total {
            eprintln!("step {:>6}/{total}  lr {:.3e}  loss {:.4}", s.step, s.lr, s.total);
        }
    })?;
    eprintln!("wrote {}", outcome.final_checkpoint.display());
    manifest.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::Parser;

    #[derive(Parser)]
    struct Wrap {
        #[command(flatten)]
        args: Args,
    }

    fn args(extra: &[&str]) -> Args {
        let mut v = vec!["x", "--data", "d", "--out", "o"];
        v.extend_from_slice(extra);
        Wrap::parse_from(v).args
    }

    #[test]
    fn flags_beat_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        std::fs::write(&path, "profile = desk\nepochs = 7\nseed = 3\n").unwrap();
        let p = path.to_str().unwrap();
        let cfg = resolve(&args(&["--config", p, "--seed", "9", "--set", "span_max=6"])).unwrap();
        assert_eq!((cfg.epochs, cfg.seed, cfg.masks.span.max_span), (7, 9, 6));
    }

    #[test]
    fn profile_flag_overrides_file_profile() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        std::fs::write(&path, "profile = paper\nepochs = 2\n").unwrap();
        let cfg = resolve(&args(&["--config", path.to_str().unwrap(), "--profile", "desk"])).unwrap();
        assert_eq!((cfg.profile.as_str(), cfg.epochs), ("desk", 2));
    }

    #[test]
    fn bad_set_is_rejected() {
        assert!(resolve(&args(&["--set", "nope"])).is_err());
        assert!(resolve(&args(&["--set", "nope=1"])).is_err());
    }
}
