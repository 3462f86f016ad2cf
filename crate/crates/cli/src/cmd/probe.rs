use std::path::PathBuf;

use anyhow::Result;
use mms_core::eval::probe::{probe_samples, probe_train_eval, ProbeConfig, PROBE_LAYOUT};
use mms_core::model::{MmsParams, ModelConfig};
use mms_core::rng::derive_seed;
use mms_core::synth::SynthConfig;

use crate::io::{load_dataset, load_params, require_exists};
use crate::manifest::RunManifest;

#[derive(clap::Args, Debug)]
#[command(group = clap::ArgGroup::new("encoder").required(true).args(["ckpt", "scratch"]))]
pub struct Args {
    /// Frozen encoder to probe.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Probe a randomly initialized encoder of `--preset` instead.
    #[arg(long)]
    pub scratch: bool,
    #[arg(long, default_value = "tiny-desk")]
    pub preset: String,
    /// Fixed-layout dataset (`mms synth --layout probe`); the first `--train`
    /// images train the head, the next `--test` evaluate it. Rendered on the
    /// fly when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    pub train: usize,
    #[arg(long, default_value_t = 1000)]
    pub test: usize,
    /// Seeds the rendered words, the scratch encoder and the probe head.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = ProbeConfig::default().epochs)]
    pub epochs: usize,
    #[arg(long, default_value_t = ProbeConfig::default().batch_size)]
    pub batch_size: usize,
    #[arg(long, default_value_t = ProbeConfig::default().base_lr)]
    pub lr: f64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(a: Args) -> Result<()> {
    if let Some(p) = &a.ckpt {
        require_exists(p, "checkpoint")?;
    }
    if a.train == 0 || a.test == 0 {
        return Err(crate::usage("--train and --test must be at least 1"));
    }
    let probe_cfg = ProbeConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        base_lr: a.lr,
        seed: derive_seed(a.seed, "probe/head", 0),
        ..ProbeConfig::default()
    };
    let synth = SynthConfig::default();
    let mut inputs = Vec::new();
    inputs.extend(a.ckpt.as_deref());
    inputs.extend(a.data.as_deref());
    let config = serde_json::json!({
        "encoder": a.ckpt.as_ref().map_or(format!("scratch:{}", a.preset), |p| p.display().to_string()),
        "data": a.data.as_ref().map(|p| p.display().to_string()),
        "train": a.train,
        "test": a.test,
        "probe": probe_cfg,
        "synth": synth,
    });
    let manifest = RunManifest::begin(&a.out, "probe", config, &[("seed", a.seed)], &inputs)?;

    let params = match &a.ckpt {
        Some(p) => load_params(p)?,
        None => MmsParams::init(&ModelConfig::preset(&a.preset)?, derive_seed(a.seed, "probe/scratch", 0))?,
    };
    let (train, test) = match &a.data {
        Some(dir) => {
            let samples = load_dataset(dir)?
                .samples
                .ok_or_else(|| crate::usage(format!("{} has no manifest; probe needs labelled words", dir.display())))?;
            if samples.iter().any(|s| s.layout != PROBE_LAYOUT) {
                return Err(crate::usage(format!(
                    "{} was not rendered with --layout probe",
                    dir.display()
                )));
            }
            if samples.len() < a.train + a.test {
                return Err(crate::usage(format!(
                    "{} holds {} images, need {}",
                    dir.display(),
                    samples.len(),
                    a.train + a.test
                )));
            }
            let mut samples = samples;
            samples.truncate(a.train + a.test);
            let test = samples.split_off(a.train);
            (samples, test)
        }
        None => (
            probe_samples(a.train, &synth, derive_seed(a.seed, "probe/train", 0))?,
            probe_samples(a.test, &synth, derive_seed(a.seed, "probe/test", 0))?,
        ),
    };
    eprintln!("probing {} on {} train / {} test words", params.config.preset, train.len(), test.len());
    let report = probe_train_eval(&params, &train, &test, &synth.charset, &probe_cfg)?;
    std::fs::write(a.out.join("probe.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    eprintln!(
        "train {:.4}  test {:.4}  (blank rate {:.4})",
        report.train_accuracy, report.test_accuracy, report.test_blank_rate
    );
    manifest.finish()
}
