//! Training configuration and its `key = value` text form.

use serde::Serialize;

use crate::mask::{MultiMaskConfig, Strategy};
use crate::model::ModelConfig;
use crate::{Error, Result};

use super::optim::{AdamW, Schedule};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub profile: String,
    pub preset: String,
    pub seed: u64,
    pub base_lr: f64,
    pub adamw: AdamW,
    pub warmup_steps: usize,
    pub epochs: usize,
    /// Overrides `epochs · ceil(|dataset| / batch_size)` when set.
    pub total_steps: Option<usize>,
    pub batch_size: usize,
    pub masks: MultiMaskConfig,
    /// Masking branches trained jointly; all three for MMS, one for a
    /// single-strategy baseline.
    pub branches: Vec<Strategy>,
    /// Save an intermediate checkpoint every this many steps (0 = final only).
    pub checkpoint_every: usize,
}

/// Keys accepted by [`TrainConfig::set`], in documentation order.
pub const KEYS: &[&str] = &[
    "profile",
    "preset",
    "seed",
    "base_lr",
    "weight_decay",
    "beta1",
    "beta2",
    "adam_eps",
    "warmup_steps",
    "epochs",
    "total_steps",
    "batch_size",
    "random_ratio",
    "block_ratio",
    "block_min_patches",
    "block_aspect_min",
    "block_aspect_max",
    "block_max_attempts",
    "span_ratio",
    "span_max",
    "span_max_attempts",
    "branches",
    "checkpoint_every",
];

impl Default for TrainConfig {
    fn default() -> Self {
        Self::profile("desk").unwrap()
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_opt(key: &str, value: &str) -> Result<Option<usize>> {
    match value {
        "" | "none" | "auto" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

impl TrainConfig {
    /// `desk`: tiny-desk, warm-up 200, batch 32, 3 epochs.
    /// `paper`: vit-tiny, warm-up 5000, batch 512, 3 epochs.
    pub fn profile(name: &str) -> Result<Self> {
        let (preset, warmup_steps, batch_size) = match name {
            "desk" => ("tiny-desk", 200, 32),
            "paper" => ("vit-tiny", 5000, 512),
            other => return Err(Error::Config(format!("unknown profile {other:?} (known: desk, paper)"))),
        };
        Ok(Self {
            profile: name.to_string(),
            preset: preset.to_string(),
            seed: 0,
            base_lr: 1e-3,
            adamw: AdamW::default(),
            warmup_steps,
            epochs: 3,
            total_steps: None,
            batch_size,
            masks: MultiMaskConfig::default(),
            branches: Strategy::ALL.to_vec(),
            checkpoint_every: 0,
        })
    }

    /// Sets one key. `profile` replaces every value with the profile defaults.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "profile" => *self = Self::profile(value)?,
            "preset" => {
                ModelConfig::preset(value)?;
                self.preset = value.to_string();
            }
            "seed" => self.seed = parse(key, value)?,
            "base_lr" => self.base_lr = parse(key, value)?,
            "weight_decay" => self.adamw.weight_decay = parse(key, value)?,
            "beta1" => self.adamw.beta1 = parse(key, value)?,
            "beta2" => self.adamw.beta2 = parse(key, value)?,
            "adam_eps" => self.adamw.eps = parse(key, value)?,
            "warmup_steps" => self.warmup_steps = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "total_steps" => self.total_steps = parse_opt(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "random_ratio" => self.masks.random_ratio = parse(key, value)?,
            "block_ratio" => self.masks.block.ratio = parse(key, value)?,
            "block_min_patches" => self.masks.block.min_block_patches = parse(key, value)?,
            "block_aspect_min" => self.masks.block.aspect_range.0 = parse(key, value)?,
            "block_aspect_max" => self.masks.block.aspect_range.1 = parse(key, value)?,
            "block_max_attempts" => self.masks.block.max_attempts = parse_opt(key, value)?,
            "span_ratio" => self.masks.span.ratio = parse(key, value)?,
            "span_max" => self.masks.span.max_span = parse(key, value)?,
            "span_max_attempts" => self.masks.span.max_attempts = parse_opt(key, value)?,
            "branches" => {
                self.branches = value
                    .split(',')
                    .map(|s| {
                        Strategy::parse(s.trim())
                            .ok_or_else(|| Error::Config(format!("branches: unknown strategy {s:?}")))
                    })
                    .collect::<Result<_>>()?
            }
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown key {other:?} (known: {})",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are skipped; a `profile` line is applied before the rest.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        pairs.sort_by_key(|(k, _)| k != "profile");
        for (k, v) in pairs {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The `key = value` form that [`TrainConfig::from_text`] reads back.
    pub fn to_text(&self) -> String {
        let opt = |v: Option<usize>| v.map_or("auto".to_string(), |x| x.to_string());
        let branches: Vec<&str> = self.branches.iter().map(|s| s.name()).collect();
        let m = &self.masks;
        let values = [
            self.profile.clone(),
            self.preset.clone(),
            self.seed.to_string(),
            self.base_lr.to_string(),
            self.adamw.weight_decay.to_string(),
            self.adamw.beta1.to_string(),
            self.adamw.beta2.to_string(),
            self.adamw.eps.to_string(),
            self.warmup_steps.to_string(),
            self.epochs.to_string(),
            opt(self.total_steps),
            self.batch_size.to_string(),
            m.random_ratio.to_string(),
            m.block.ratio.to_string(),
            m.block.min_block_patches.to_string(),
            m.block.aspect_range.0.to_string(),
            m.block.aspect_range.1.to_string(),
            opt(m.block.max_attempts),
            m.span.ratio.to_string(),
            m.span.max_span.to_string(),
            opt(m.span.max_attempts),
            branches.join(","),
            self.checkpoint_every.to_string(),
        ];
        KEYS.iter().zip(values).map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let model = ModelConfig::preset(&self.preset)?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if let Some(t) = self.total_steps {
            if self.warmup_steps > t {
                return Err(Error::Config(format!(
                    "warmup_steps {} exceeds total_steps {t}",
                    self.warmup_steps
                )));
            }
        }
        let hp = &self.adamw;
        if !(0.0..1.0).contains(&hp.beta1) || !(0.0..1.0).contains(&hp.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if !(hp.eps > 0.0) || !(hp.weight_decay >= 0.0) || !(self.base_lr >= 0.0) {
            return Err(Error::Config("adam_eps must be positive; base_lr and weight_decay non-negative".into()));
        }
        if self.branches.is_empty() {
            return Err(Error::Config("branches must name at least one strategy".into()));
        }
        for (i, s) in self.branches.iter().enumerate() {
            if self.branches[..i].contains(s) {
                return Err(Error::Config(format!("branch {s} listed twice")));
            }
            let r = self.masks.ratio(*s);
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::Config(format!("{s} ratio must lie in (0, 1], got {r}")));
            }
        }
        self.masks.block.validate()?;
        self.masks.span.validate(model.grid_w)?;
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        ModelConfig::preset(&self.preset)
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> usize {
        dataset_len.div_ceil(self.batch_size)
    }

    /// Total steps for a dataset of `dataset_len` images. A warm-up longer than
    /// a derived (not explicit) run is clamped to the run length.
    pub fn schedule(&self, dataset_len: usize) -> Result<Schedule> {
        match self.total_steps {
            Some(total) => Schedule::new(self.base_lr, self.warmup_steps, total),
            None => {
                let total = self.epochs * self.steps_per_epoch(dataset_len);
                Schedule::new(self.base_lr, self.warmup_steps.min(total), total)
            }
        }
    }
}
