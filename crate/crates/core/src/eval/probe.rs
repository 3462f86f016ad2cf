//! Linear probe on column-pooled features of a frozen encoder.
//!
//! Each of the `grid_w` patch columns is summarized by the mean of its
//! encoder tokens (full image, nothing masked) and classified as the
//! character whose box contains the column centre, or blank. Words are drawn
//! at one fixed layout so every column has a well-defined label.

use serde::Serialize;

use crate::mask::{MaskSet, Strategy};
use crate::model::{encode, MmsParams};
use crate::image::patchify;
use crate::rng::{derive_seed, Rng};
use crate::synth::{render_at, sample_seed, sample_word, Layout, SynthConfig, SyntheticSample};
use crate::tensor::{Gradients, Init, Tape, Tensor, Var};
use crate::train::{adamw_step, lr_at, AdamW, OptState, Schedule};
use crate::{Error, Result};

/// Scale 2 glyphs on a 12-pixel pitch: each character spans two patch
/// columns followed by one blank column.
pub const PROBE_LAYOUT: Layout = Layout {
    scale: 2,
    top: 9,
    left: 4,
    gap: 2,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    /// Columns per optimizer step.
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 256,
            base_lr: 1e-2,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeReport {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Accuracy of always predicting blank on the test columns.
    pub test_blank_rate: f64,
    pub train_images: usize,
    pub test_images: usize,
    pub classes: usize,
    pub config: ProbeConfig,
    pub encoder_fingerprint: String,
}

/// `n` fixed-layout words (at most 10 characters, the layout's capacity).
pub fn probe_samples(n: usize, cfg: &SynthConfig, seed: u64) -> Result<Vec<SyntheticSample>> {
    let cfg = SynthConfig {
        max_len: cfg.max_len.min(10),
        min_len: cfg.min_len.min(10),
        ..cfg.clone()
    };
    cfg.validate()?;
    (0..n)
        .map(|i| {
            let s = sample_seed(seed, i);
            render_at(&sample_word(&cfg, derive_seed(s, "word", 0)), PROBE_LAYOUT, &cfg, s)
        })
        .collect()
}

/// Class of every patch column: the charset index of the character whose box
/// contains the column centre, or `charset.len()` for blank.
pub fn column_labels(sample: &SyntheticSample, charset: &str, grid_w: usize, patch_size: usize) -> Result<Vec<usize>> {
    let blank = charset.chars().count();
    let chars: Vec<char> = sample.word.chars().collect();
    (0..grid_w)
        .map(|c| {
            let x = c * patch_size + patch_size / 2;
            match sample.char_boxes.iter().position(|b| (b.x0..b.x1).contains(&x)) {
                None => Ok(blank),
                Some(k) => charset
                    .chars()
                    .position(|ch| ch == chars[k])
                    .ok_or_else(|| Error::Config(format!("{:?} is not in the probe charset", chars[k]))),
            }
        })
        .collect()
}

/// `[grid_w, d_model]`: mean encoder output over each patch column.
pub fn column_features(params: &MmsParams, image: &crate::image::ImageBuf) -> Result<Tensor> {
    let cfg = &params.config;
    let grid = patchify(&image.to_rgb(), cfg.patch_size)?;
    let none = MaskSet::from_indices(cfg.grid_h, cfg.grid_w, &[], Strategy::Random, 0.0)?;
    let (feats, _) = encode(params, &grid, &none, false)?;
    let d = cfg.d_model;
    let mut out = vec![0.0; cfg.grid_w * d];
    for r in 0..cfg.grid_h {
        for c in 0..cfg.grid_w {
            let row = feats.row(1 + r * cfg.grid_w + c);
            for (o, v) in out[c * d..(c + 1) * d].iter_mut().zip(row) {
                *o += v / cfg.grid_h as f64;
            }
        }
    }
    Ok(Tensor::new(vec![cfg.grid_w, d], out)?)
}

/// Errors if any of `frozen` received a gradient.
pub fn assert_frozen(grads: &Gradients, frozen: &[Var]) -> Result<()> {
    if frozen.iter().any(|&v| grads.get(v).is_some()) {
        return Err(Error::ContractViolation(
            "gradient reached frozen encoder features".into(),
        ));
    }
    Ok(())
}

/// One feature row and class label per patch column.
pub struct Columns {
    pub feats: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

fn columns(params: &MmsParams, samples: &[SyntheticSample], charset: &str) -> Result<Columns> {
    let cfg = &params.config;
    let mut feats = Vec::with_capacity(samples.len() * cfg.grid_w);
    let mut labels = Vec::with_capacity(samples.len() * cfg.grid_w);
    for s in samples {
        let f = column_features(params, &s.image)?;
        for c in 0..cfg.grid_w {
            feats.push(f.row(c).to_vec());
        }
        labels.extend(column_labels(s, charset, cfg.grid_w, cfg.patch_size)?);
    }
    Ok(Columns { feats, labels })
}

/// Per-dimension mean and standard deviation of the training columns.
fn standardizer(cols: &Columns) -> (Vec<f64>, Vec<f64>) {
    let d = cols.feats[0].len();
    let n = cols.feats.len() as f64;
    let mut mean = vec![0.0; d];
    for f in &cols.feats {
        mean.iter_mut().zip(f).for_each(|(m, v)| *m += v / n);
    }
    let mut var = vec![0.0; d];
    for f in &cols.feats {
        var.iter_mut().zip(f.iter().zip(&mean)).for_each(|(s, (v, m))| *s += (v - m) * (v - m) / n);
    }
    (mean, var.iter().map(|v| (v + 1e-12).sqrt()).collect())
}

fn standardize(cols: &mut Columns, mean: &[f64], std: &[f64]) {
    for f in &mut cols.feats {
        for ((v, m), s) in f.iter_mut().zip(mean).zip(std) {
            *v = (*v - m) / s;
        }
    }
}

fn batch_tensor(cols: &Columns, idx: &[usize]) -> Tensor {
    let d = cols.feats[0].len();
    let data = idx.iter().flat_map(|&i| cols.feats[i].iter().copied()).collect();
    Tensor::new(vec![idx.len(), d], data).expect("batch shape")
}

fn accuracy(head: &[Tensor], cols: &Columns) -> Result<f64> {
    let idx: Vec<usize> = (0..cols.labels.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(1024) {
        let mut tape = Tape::new();
        let x = tape.leaf(batch_tensor(cols, chunk), false);
        let w = tape.leaf(head[0].clone(), false);
        let b = tape.leaf(head[1].clone(), false);
        let z = tape.matmul(x, w)?;
        let z = tape.add_row(z, b)?;
        let logits = tape.value(z);
        for (r, &i) in chunk.iter().enumerate() {
            let row = logits.row(r);
            let pred = (0..row.len()).fold(0, |best, k| if row[k] > row[best] { k } else { best });
            if pred == cols.labels[i] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / cols.labels.len() as f64)
}

/// Standardizes both sets with training statistics, trains a linear head on
/// `tr` and returns `(train accuracy, test accuracy)`.
pub fn fit_head(mut tr: Columns, mut te: Columns, classes: usize, cfg: &ProbeConfig) -> Result<(f64, f64)> {
    if tr.feats.is_empty() || te.feats.is_empty() {
        return Err(Error::Config("probe needs non-empty train and test sets".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("probe batch_size must be at least 1".into()));
    }
    let (mean, std) = standardizer(&tr);
    standardize(&mut tr, &mean, &std);
    standardize(&mut te, &mean, &std);

    let d = tr.feats[0].len();
    let mut head = vec![
        Tensor::construct(
            &[d, classes],
            Init::TruncGaussian {
                std: 0.01,
                seed: derive_seed(cfg.seed, "probe.w", 0),
            },
        )?,
        Tensor::zeros(&[classes]),
    ];
    let decay = [true, false];
    let hp = AdamW {
        weight_decay: cfg.weight_decay,
        ..AdamW::default()
    };
    let mut opt = OptState::new(&head);
    let n = tr.labels.len();
    let spe = n.div_ceil(cfg.batch_size);
    let schedule = Schedule::new(cfg.base_lr, 0, cfg.epochs * spe)?;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        Rng::new(derive_seed(cfg.seed, "probe.epoch", epoch as u64)).shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let x = tape.leaf(batch_tensor(&tr, chunk), false);
            let w = tape.leaf(head[0].clone(), true);
            let b = tape.leaf(head[1].clone(), true);
            let z = tape.matmul(x, w)?;
            let z = tape.add_row(z, b)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| tr.labels[i]).collect();
            let loss = tape.cross_entropy(z, &labels)?;
            let mut g = tape.backward(loss)?;
            assert_frozen(&g, &[x])?;
            let grads = vec![g.take(w).expect("head weight grad"), g.take(b).expect("head bias grad")];
            adamw_step(&mut head, &decay, &grads, &mut opt, lr_at(step, &schedule)?, &hp)?;
            step += 1;
        }
    }
    Ok((accuracy(&head, &tr)?, accuracy(&head, &te)?))
}

fn blank_rate(samples: &[SyntheticSample], charset: &str, cfg: &crate::model::ModelConfig) -> Result<f64> {
    let blank = charset.chars().count();
    let mut hits = 0;
    for s in samples {
        hits += column_labels(s, charset, cfg.grid_w, cfg.patch_size)?.iter().filter(|&&l| l == blank).count();
    }
    Ok(hits as f64 / (samples.len() * cfg.grid_w) as f64)
}

/// Trains a linear head on frozen column features of `train` and reports
/// per-column accuracy on both sets.
pub fn probe_train_eval(
    params: &MmsParams,
    train: &[SyntheticSample],
    test: &[SyntheticSample],
    charset: &str,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::Config("probe needs non-empty train and test sets".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("probe batch_size must be at least 1".into()));
    }
    let before = params.encoder_fingerprint();
    let tr = columns(params, train, charset)?;
    let te = columns(params, test, charset)?;
    let classes = charset.chars().count() + 1;
    let (train_accuracy, test_accuracy) = fit_head(tr, te, classes, cfg)?;
    let report = ProbeReport {
        train_accuracy,
        test_accuracy,
        test_blank_rate: blank_rate(test, charset, &params.config)?,
        train_images: train.len(),
        test_images: test.len(),
        classes,
        config: *cfg,
        encoder_fingerprint: before.clone(),
    };
    if params.encoder_fingerprint() != before {
        return Err(Error::ContractViolation("encoder parameters changed during probing".into()));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synth::DEFAULT_CHARSET;

    #[test]
    fn labels_follow_the_fixed_pitch() {
        let cfg = SynthConfig::default();
        let s = render_at("AB7", PROBE_LAYOUT, &cfg, 1).unwrap();
        let l = column_labels(&s, DEFAULT_CHARSET, 32, 4).unwrap();
        let blank = 36;
        assert_eq!(&l[..10], &[blank, 0, 0, blank, 1, 1, blank, 33, 33, blank]);
        assert!(l[10..].iter().all(|&c| c == blank));
    }

    #[test]
    fn gradients_into_frozen_inputs_are_contract_violations() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(matches!(assert_frozen(&g, &[x]), Err(Error::ContractViolation(_))));
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0), false);
        let w = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(x, w).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(assert_frozen(&g, &[x]).is_ok());
    }

    #[test]
    fn probe_leaves_encoder_untouched_and_fits_train() {
        // 64-dim features and 40 training words: the head can overfit
        let params = MmsParams::init(&ModelConfig::preset("tiny-desk").unwrap(), 3).unwrap();
        let cfg = SynthConfig::default();
        let train = probe_samples(40, &cfg, 1).unwrap();
        let test = probe_samples(40, &cfg, 2).unwrap();
        let before = params.clone();
        let pc = ProbeConfig {
            epochs: 60,
            batch_size: 64,
            ..ProbeConfig::default()
        };
        let r = probe_train_eval(&params, &train, &test, DEFAULT_CHARSET, &pc).unwrap();
        assert_eq!(params, before);
        assert_eq!(r.encoder_fingerprint, before.encoder_fingerprint());
        assert!(r.train_accuracy >= r.test_accuracy);
        assert!(r.train_accuracy > r.test_blank_rate);
        assert_eq!(r.classes, 37);
    }
}
