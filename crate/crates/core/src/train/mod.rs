//! AdamW training of the shared encoder/decoder on the summed branch losses.
//!
//! Every quantity that influences a run is derived from the config seed:
//! initial weights, epoch order and the mask triple of each sample at each
//! step. Per-sample gradients are reduced in batch order so a run is bitwise
//! reproducible on one build.

pub mod config;
pub mod optim;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub use config::{TrainConfig, KEYS};
pub use optim::{adamw_step, lr_at, AdamW, OptState, Schedule};

use crate::image::ImageBuf;
use crate::mask::{branch_seed, sample_mask_lenient, MaskSet, Strategy};
use crate::model::checkpoint::{self, DType};
use crate::model::{forward, is_decayed, MmsParams, ModelConfig, Sample};
use crate::rng::{derive_seed, Rng};
use crate::tensor::{Tape, Tensor};
use crate::{Error, Result};

pub const METRICS_HEADER: &str = "step,lr,loss_r,loss_b,loss_s,loss_mms";

/// Masks for sample `index` of the batch at `step`, one per configured branch.
pub fn sample_masks(cfg: &TrainConfig, model: &ModelConfig, step: usize, index: usize) -> Result<Vec<MaskSet>> {
    let seed = derive_seed(derive_seed(cfg.seed, "step", step as u64), "sample", index as u64);
    cfg.branches
        .iter()
        .map(|&s| sample_mask_lenient(model.grid_h, model.grid_w, s, &cfg.masks, branch_seed(seed, s)))
        .collect()
}

/// Batch-mean losses of one step, measured before the update.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub step: usize,
    pub lr: f64,
    pub branches: Vec<(Strategy, f64)>,
    pub total: f64,
}

impl StepStats {
    pub fn branch(&self, s: Strategy) -> Option<f64> {
        self.branches.iter().find(|(b, _)| *b == s).map(|(_, l)| *l)
    }

    pub fn csv_row(&self) -> String {
        let cell = |s| self.branch(s).map_or(String::new(), |l| l.to_string());
        format!(
            "{},{},{},{},{},{}",
            self.step,
            self.lr,
            cell(Strategy::Random),
            cell(Strategy::Block),
            cell(Strategy::Span),
            self.total
        )
    }
}

/// One optimizer update with caller-supplied masks (`masks[i]` belongs to
/// `batch[i]`). Returns the batch-mean branch losses and their sum.
pub fn train_step_with_masks(
    params: &mut MmsParams,
    opt: &mut OptState,
    batch: &[Sample],
    masks: &[Vec<MaskSet>],
    lr: f64,
    hp: &AdamW,
) -> Result<(Vec<f64>, f64)> {
    if batch.is_empty() {
        return Err(Error::Config("training batch is empty".into()));
    }
    if masks.len() != batch.len() {
        return Err(Error::Config(format!("{} mask sets for {} samples", masks.len(), batch.len())));
    }
    let mut grads: Vec<Tensor> = params.weights.named().iter().map(|(_, t)| t.zeros_like()).collect();
    let branches = masks[0].len();
    let mut losses = vec![0.0; branches];
    let mut total = 0.0;
    for (sample, sample_masks) in batch.iter().zip(masks) {
        if sample_masks.len() != branches {
            return Err(Error::Config("every sample needs the same number of branches".into()));
        }
        let mut tape = Tape::new();
        let w = forward::register(&mut tape, params, true);
        let x = tape.leaf(sample.input.patches.clone(), false);
        let y = tape.leaf(sample.targets.patches.clone(), false);
        let out = forward::mms_forward(&mut tape, &w, &params.config, x, y, sample_masks)?;
        for (acc, b) in losses.iter_mut().zip(&out.branches) {
            *acc += tape.value(b.loss).item();
        }
        total += tape.value(out.total).item();
        let mut g = tape.backward(out.total)?;
        for (acc, (_, var)) in grads.iter_mut().zip(w.named()) {
            if let Some(gt) = g.take(*var) {
                for (a, v) in acc.data_mut().iter_mut().zip(gt.data()) {
                    *a += v;
                }
            }
        }
    }
    let b = batch.len() as f64;
    for g in &mut grads {
        g.data_mut().iter_mut().for_each(|v| *v /= b);
    }
    let names = params.weights.names();
    let decay: Vec<bool> = names.iter().map(|n| is_decayed(n)).collect();
    let mut slots: Vec<Tensor> = params.weights.named().into_iter().map(|(_, t)| t.clone()).collect();
    adamw_step(&mut slots, &decay, &grads, opt, lr, hp)?;
    let mut it = slots.into_iter();
    params.weights.visit_mut(&mut |_, t| *t = it.next().expect("slot count"));
    Ok((losses.into_iter().map(|l| l / b).collect(), total / b))
}

/// One optimizer update with the masks the config derives for `step`.
pub fn train_step(
    params: &mut MmsParams,
    opt: &mut OptState,
    batch: &[Sample],
    step: usize,
    cfg: &TrainConfig,
    schedule: &Schedule,
) -> Result<StepStats> {
    let lr = lr_at(step, schedule)?;
    let masks = (0..batch.len())
        .map(|i| sample_masks(cfg, &params.config, step, i))
        .collect::<Result<Vec<_>>>()?;
    let (losses, total) = train_step_with_masks(params, opt, batch, &masks, lr, &cfg.adamw)?;
    Ok(StepStats {
        step,
        lr,
        branches: cfg.branches.iter().copied().zip(losses).collect(),
        total,
    })
}

/// Dataset order for `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(derive_seed(seed, "epoch", epoch as u64)).shuffle(&mut order);
    order
}

/// Seed of the initial weights for a training config.
pub fn init_seed(cfg: &TrainConfig) -> u64 {
    derive_seed(cfg.seed, "init", 0)
}

fn opt_extras(params: &MmsParams, opt: &OptState, completed: usize) -> Vec<(String, Tensor)> {
    let mut out = vec![
        ("train.step".to_string(), Tensor::scalar(completed as f64)),
        ("opt.step".to_string(), Tensor::scalar(opt.step as f64)),
    ];
    for (name, (m, v)) in params.weights.names().into_iter().zip(opt.m.iter().zip(&opt.v)) {
        out.push((format!("opt.m.{name}"), m.clone()));
        out.push((format!("opt.v.{name}"), v.clone()));
    }
    out
}

/// Parameters, optimizer state and completed step count from a training
/// checkpoint.
pub fn load_training_state(path: &Path) -> Result<(MmsParams, OptState, usize)> {
    let mut ck = checkpoint::load(path)?;
    let mut take = |key: &str| {
        ck.extras
            .remove(key)
            .ok_or_else(|| Error::format(path, format!("missing {key} (not a training checkpoint)")))
    };
    let completed = take("train.step")?.item() as usize;
    let step = take("opt.step")?.item() as u64;
    let mut m = Vec::new();
    let mut v = Vec::new();
    for name in ck.params.weights.names() {
        m.push(take(&format!("opt.m.{name}"))?);
        v.push(take(&format!("opt.v.{name}"))?);
    }
    Ok((ck.params, OptState { step, m, v }, completed))
}

/// Result of [`train_loop`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: MmsParams,
    pub opt: OptState,
    pub schedule: Schedule,
    pub start_step: usize,
    pub stats: Vec<StepStats>,
    pub final_checkpoint: PathBuf,
    pub metrics: PathBuf,
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Rows of an existing CSV whose leading step is below `start`.
fn kept_rows(path: &Path, header: &str, start: usize) -> Result<String> {
    let mut out = format!("{header}\n");
    if start == 0 || !path.exists() {
        return Ok(out);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    for line in text.lines().skip(1) {
        let step: usize = line
            .split(',')
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(path, format!("bad row {line:?}")))?;
        if step < start {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

/// Trains on `dataset`, writing into `out_dir`:
///
/// * `metrics.csv`: one row per step, header [`METRICS_HEADER`]
/// * `timing.csv`: `step,wall_seconds`, kept apart so metrics are reproducible
/// * `checkpoints/step_NNNNNN.mms` every `checkpoint_every` steps
/// * `final.mms`: parameters, optimizer state and step count
///
/// With `resume`, training continues from that checkpoint's step and the
/// rows it has not reached are dropped from existing logs.
pub fn train_loop(
    cfg: &TrainConfig,
    dataset: &[ImageBuf],
    out_dir: &Path,
    resume: Option<&Path>,
    on_step: &mut dyn FnMut(&StepStats),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let schedule = cfg.schedule(dataset.len())?;
    let model_cfg = cfg.model_config()?;
    let (mut params, mut opt, start) = match resume {
        Some(path) => {
            let (p, o, s) = load_training_state(path)?;
            if p.config != model_cfg {
                return Err(Error::Config(format!(
                    "checkpoint {} holds preset {:?}, config asks for {:?}",
                    path.display(),
                    p.config.preset,
                    cfg.preset
                )));
            }
            if s > schedule.total {
                return Err(Error::Range {
                    step: s,
                    total: schedule.total,
                });
            }
            (p, o, s)
        }
        None => {
            let p = MmsParams::init(&model_cfg, init_seed(cfg))?;
            let o = OptState::new(p.weights.named().into_iter().map(|(_, t)| t));
            (p, o, 0)
        }
    };

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let metrics_path = out_dir.join("metrics.csv");
    let timing_path = out_dir.join("timing.csv");
    write_file(&metrics_path, &kept_rows(&metrics_path, METRICS_HEADER, start)?)?;
    write_file(&timing_path, &kept_rows(&timing_path, "step,wall_seconds", start)?)?;
    let append = |path: &Path| {
        fs::OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))
    };
    let mut metrics = append(&metrics_path)?;
    let mut timing = append(&timing_path)?;
    let ckpt_dir = out_dir.join("checkpoints");

    let spe = cfg.steps_per_epoch(dataset.len());
    let t0 = Instant::now();
    let mut order_epoch = usize::MAX;
    let mut order = Vec::new();
    let mut stats = Vec::new();
    for step in start..schedule.total {
        let epoch = step / spe;
        if epoch != order_epoch {
            order = epoch_order(cfg.seed, epoch, dataset.len());
            order_epoch = epoch;
        }
        let j = step % spe;
        let idx = &order[j * cfg.batch_size..((j + 1) * cfg.batch_size).min(dataset.len())];
        let batch = idx
            .iter()
            .map(|&i| Sample::from_image(&dataset[i], model_cfg.patch_size))
            .collect::<Result<Vec<_>>>()?;
        let s = train_step(&mut params, &mut opt, &batch, step, cfg, &schedule)?;
        writeln!(metrics, "{}", s.csv_row()).map_err(|e| Error::io(&metrics_path, e))?;
        writeln!(timing, "{},{:.3}", step, t0.elapsed().as_secs_f64()).map_err(|e| Error::io(&timing_path, e))?;
        on_step(&s);
        stats.push(s);
        let done = step + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < schedule.total {
            fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
            let path = ckpt_dir.join(format!("step_{done:06}.mms"));
            checkpoint::save(&path, &params, &opt_extras(&params, &opt, done), DType::F64)?;
        }
    }
    let final_checkpoint = out_dir.join("final.mms");
    checkpoint::save(
        &final_checkpoint,
        &params,
        &opt_extras(&params, &opt, schedule.total),
        DType::F64,
    )?;
    Ok(TrainOutcome {
        params,
        opt,
        schedule,
        start_step: start,
        stats,
        final_checkpoint,
        metrics: metrics_path,
    })
}
