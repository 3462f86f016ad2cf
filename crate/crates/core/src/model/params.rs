use serde::{Deserialize, Serialize};

use crate::image::{GRID_H, GRID_W, PATCH_SIZE};
use crate::rng::derive_seed;
use crate::tensor::{Init, Tensor};
use crate::{Error, Result};

/// Architecture of the encoder/decoder pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub preset: String,
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub d_model: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub dec_dim: usize,
    pub dec_depth: usize,
    pub dec_heads: usize,
}

pub const PRESETS: [&str; 3] = ["tiny-desk", "vit-tiny", "micro"];

impl ModelConfig {
    /// `tiny-desk`: 64-wide, 4-layer, 4-head encoder with a 128-wide, 2-layer
    /// decoder (sized for single-core CPU training). `vit-tiny`: the 192/12/3
    /// ViT-Tiny encoder with a 256-wide, 2-layer decoder. `micro` is a 16-wide
    /// toy used where only plumbing matters.
    pub fn preset(name: &str) -> Result<Self> {
        let base = |d_model, depth, heads, dec_dim, dec_depth, dec_heads| ModelConfig {
            preset: name.to_string(),
            grid_h: GRID_H,
            grid_w: GRID_W,
            patch_size: PATCH_SIZE,
            channels: 3,
            d_model,
            depth,
            heads,
            mlp_ratio: 4,
            dec_dim,
            dec_depth,
            dec_heads,
        };
        match name {
            "tiny-desk" => Ok(base(64, 4, 4, 128, 2, 8)),
            "vit-tiny" => Ok(base(192, 12, 3, 256, 2, 8)),
            "micro" => Ok(base(16, 1, 2, 16, 1, 2)),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (known: {})",
                PRESETS.join(", ")
            ))),
        }
    }

    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.grid_h,
            self.grid_w,
            self.patch_size,
            self.channels,
            self.d_model,
            self.depth,
            self.heads,
            self.mlp_ratio,
            self.dec_dim,
            self.dec_depth,
            self.dec_heads,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.d_model % self.heads != 0 || self.dec_dim % self.dec_heads != 0 {
            return Err(Error::Config(format!(
                "widths {}/{} not divisible by heads {}/{}",
                self.d_model, self.dec_dim, self.heads, self.dec_heads
            )));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let block = |d: usize| {
            let hidden = d * self.mlp_ratio;
            4 * d // two layer-norm affine pairs
                + 4 * (d * d + d) // q, k, v, o
                + (d * hidden + hidden)
                + (hidden * d + d)
        };
        let (pd, d, dd, tokens) = (self.patch_dim(), self.d_model, self.dec_dim, self.num_patches() + 1);
        (pd * d + d)
            + tokens * d
            + d
            + self.depth * block(d)
            + 2 * d
            + (d * dd + dd)
            + dd
            + tokens * dd
            + self.dec_depth * block(dd)
            + 2 * dd
            + (dd * pd + pd)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `[in, out]`
    pub w: T,
    pub b: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm<T> {
    pub gamma: T,
    pub beta: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub norm1: Norm<T>,
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
    pub norm2: Norm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

/// Every trainable tensor of the model, generic over what is stored per slot
/// (values, tape handles, gradients, optimizer moments).
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    pub patch_embed: Linear<T>,
    /// `[N+1, d_model]`, row 0 belongs to the CLS token.
    pub pos_embed: T,
    pub cls_token: T,
    pub encoder_blocks: Vec<Block<T>>,
    pub encoder_norm: Norm<T>,
    pub decoder_embed: Linear<T>,
    pub mask_token: T,
    pub dec_pos_embed: T,
    pub decoder_blocks: Vec<Block<T>>,
    pub decoder_norm: Norm<T>,
    pub pred_head: Linear<T>,
}

impl<T> Linear<T> {
    fn map<U>(&self, p: &str, f: &mut impl FnMut(String, &T) -> U) -> Linear<U> {
        Linear {
            w: f(format!("{p}.w"), &self.w),
            b: f(format!("{p}.b"), &self.b),
        }
    }

    fn visit_mut(&mut self, p: &str, f: &mut impl FnMut(String, &mut T)) {
        f(format!("{p}.w"), &mut self.w);
        f(format!("{p}.b"), &mut self.b);
    }
}

impl<T> Norm<T> {
    fn map<U>(&self, p: &str, f: &mut impl FnMut(String, &T) -> U) -> Norm<U> {
        Norm {
            gamma: f(format!("{p}.gamma"), &self.gamma),
            beta: f(format!("{p}.beta"), &self.beta),
        }
    }

    fn visit_mut(&mut self, p: &str, f: &mut impl FnMut(String, &mut T)) {
        f(format!("{p}.gamma"), &mut self.gamma);
        f(format!("{p}.beta"), &mut self.beta);
    }
}

impl<T> Block<T> {
    fn map<U>(&self, p: &str, f: &mut impl FnMut(String, &T) -> U) -> Block<U> {
        Block {
            norm1: self.norm1.map(&format!("{p}.norm1"), f),
            q: self.q.map(&format!("{p}.attn.q"), f),
            k: self.k.map(&format!("{p}.attn.k"), f),
            v: self.v.map(&format!("{p}.attn.v"), f),
            o: self.o.map(&format!("{p}.attn.o"), f),
            norm2: self.norm2.map(&format!("{p}.norm2"), f),
            fc1: self.fc1.map(&format!("{p}.mlp.fc1"), f),
            fc2: self.fc2.map(&format!("{p}.mlp.fc2"), f),
        }
    }

    fn visit_mut(&mut self, p: &str, f: &mut impl FnMut(String, &mut T)) {
        self.norm1.visit_mut(&format!("{p}.norm1"), f);
        self.q.visit_mut(&format!("{p}.attn.q"), f);
        self.k.visit_mut(&format!("{p}.attn.k"), f);
        self.v.visit_mut(&format!("{p}.attn.v"), f);
        self.o.visit_mut(&format!("{p}.attn.o"), f);
        self.norm2.visit_mut(&format!("{p}.norm2"), f);
        self.fc1.visit_mut(&format!("{p}.mlp.fc1"), f);
        self.fc2.visit_mut(&format!("{p}.mlp.fc2"), f);
    }
}

impl<T> Weights<T> {
    /// Applies `f` to every slot in canonical order, passing the slot name.
    pub fn map<U>(&self, f: &mut impl FnMut(String, &T) -> U) -> Weights<U> {
        Weights {
            patch_embed: self.patch_embed.map("patch_embed", f),
            pos_embed: f("pos_embed".into(), &self.pos_embed),
            cls_token: f("cls_token".into(), &self.cls_token),
            encoder_blocks: self
                .encoder_blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&format!("encoder.{i}"), f))
                .collect(),
            encoder_norm: self.encoder_norm.map("encoder_norm", f),
            decoder_embed: self.decoder_embed.map("decoder_embed", f),
            mask_token: f("mask_token".into(), &self.mask_token),
            dec_pos_embed: f("dec_pos_embed".into(), &self.dec_pos_embed),
            decoder_blocks: self
                .decoder_blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&format!("decoder.{i}"), f))
                .collect(),
            decoder_norm: self.decoder_norm.map("decoder_norm", f),
            pred_head: self.pred_head.map("pred_head", f),
        }
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut T)) {
        self.patch_embed.visit_mut("patch_embed", f);
        f("pos_embed".into(), &mut self.pos_embed);
        f("cls_token".into(), &mut self.cls_token);
        for (i, b) in self.encoder_blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("encoder.{i}"), f);
        }
        self.encoder_norm.visit_mut("encoder_norm", f);
        self.decoder_embed.visit_mut("decoder_embed", f);
        f("mask_token".into(), &mut self.mask_token);
        f("dec_pos_embed".into(), &mut self.dec_pos_embed);
        for (i, b) in self.decoder_blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("decoder.{i}"), f);
        }
        self.decoder_norm.visit_mut("decoder_norm", f);
        self.pred_head.visit_mut("pred_head", f);
    }

    /// `(name, slot)` pairs in canonical order.
    pub fn named(&self) -> Vec<(String, &T)> {
        self.names().into_iter().zip(self.slots()).collect()
    }

    fn slots(&self) -> Vec<&T> {
        fn lin<'a, T>(l: &'a Linear<T>, v: &mut Vec<&'a T>) {
            v.push(&l.w);
            v.push(&l.b);
        }
        fn norm<'a, T>(n: &'a Norm<T>, v: &mut Vec<&'a T>) {
            v.push(&n.gamma);
            v.push(&n.beta);
        }
        fn block<'a, T>(b: &'a Block<T>, v: &mut Vec<&'a T>) {
            norm(&b.norm1, v);
            lin(&b.q, v);
            lin(&b.k, v);
            lin(&b.v, v);
            lin(&b.o, v);
            norm(&b.norm2, v);
            lin(&b.fc1, v);
            lin(&b.fc2, v);
        }
        let mut v = Vec::new();
        lin(&self.patch_embed, &mut v);
        v.push(&self.pos_embed);
        v.push(&self.cls_token);
        self.encoder_blocks.iter().for_each(|b| block(b, &mut v));
        norm(&self.encoder_norm, &mut v);
        lin(&self.decoder_embed, &mut v);
        v.push(&self.mask_token);
        v.push(&self.dec_pos_embed);
        self.decoder_blocks.iter().for_each(|b| block(b, &mut v));
        norm(&self.decoder_norm, &mut v);
        lin(&self.pred_head, &mut v);
        v
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        let _ = self.map(&mut |name, _| out.push(name));
        out
    }

    pub fn len(&self) -> usize {
        14 + 16 * (self.encoder_blocks.len() + self.decoder_blocks.len())
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Slots excluded from decoupled weight decay: biases, layer-norm affines,
/// the CLS and mask tokens and both positional tables.
pub fn is_decayed(name: &str) -> bool {
    !(name.ends_with(".b")
        || name.ends_with(".gamma")
        || name.ends_with(".beta")
        || name == "cls_token"
        || name == "mask_token"
        || name == "pos_embed"
        || name == "dec_pos_embed")
}

/// Whether the slot belongs to the encoder side (everything a frozen-encoder
/// probe keeps fixed).
pub fn is_encoder(name: &str) -> bool {
    name.starts_with("patch_embed")
        || name == "pos_embed"
        || name == "cls_token"
        || name.starts_with("encoder")
}

/// The single parameter record shared by all masking branches.
#[derive(Debug, Clone, PartialEq)]
pub struct MmsParams {
    pub config: ModelConfig,
    pub weights: Weights<Tensor>,
}

impl MmsParams {
    /// Truncated-normal (std 0.02, cut at 2 std) weights, embeddings and
    /// tokens; zero biases and betas; unit gammas. Slot `name` draws from
    /// `derive_seed(seed, name, 0)`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (pd, d, dd) = (config.patch_dim(), config.d_model, config.dec_dim);
        let tokens = config.num_patches() + 1;
        let z = |n: usize| Tensor::zeros(&[n]);
        let lin = |i: usize, o: usize| Linear {
            w: Tensor::zeros(&[i, o]),
            b: z(o),
        };
        let norm = |n: usize| Norm {
            gamma: z(n),
            beta: z(n),
        };
        let block = |w: usize| Block {
            norm1: norm(w),
            q: lin(w, w),
            k: lin(w, w),
            v: lin(w, w),
            o: lin(w, w),
            norm2: norm(w),
            fc1: lin(w, w * config.mlp_ratio),
            fc2: lin(w * config.mlp_ratio, w),
        };
        let shapes = Weights {
            patch_embed: lin(pd, d),
            pos_embed: Tensor::zeros(&[tokens, d]),
            cls_token: z(d),
            encoder_blocks: (0..config.depth).map(|_| block(d)).collect(),
            encoder_norm: norm(d),
            decoder_embed: lin(d, dd),
            mask_token: z(dd),
            dec_pos_embed: Tensor::zeros(&[tokens, dd]),
            decoder_blocks: (0..config.dec_depth).map(|_| block(dd)).collect(),
            decoder_norm: norm(dd),
            pred_head: lin(dd, pd),
        };
        let mut err = None;
        let weights = shapes.map(&mut |name, t| {
            let init = if name.ends_with(".gamma") {
                Init::Constant(1.0)
            } else if name.ends_with(".b") || name.ends_with(".beta") {
                Init::Zeros
            } else {
                Init::TruncGaussian {
                    std: 0.02,
                    seed: derive_seed(seed, &name, 0),
                }
            };
            Tensor::construct(t.shape(), init).unwrap_or_else(|e| {
                err = Some(e);
                t.clone()
            })
        });
        if let Some(e) = err {
            return Err(e.into());
        }
        Ok(Self {
            config: config.clone(),
            weights,
        })
    }

    pub fn param_count(&self) -> usize {
        self.weights.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// SHA-256 over every slot name and its little-endian `f64` data.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, t) in self.weights.named() {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }

    /// Fingerprint restricted to encoder-side slots.
    pub fn encoder_fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, t) in self.weights.named() {
            if is_encoder(&name) {
                h.update(name.as_bytes());
                for v in t.data() {
                    h.update(v.to_le_bytes());
                }
            }
        }
        format!("{:x}", h.finalize())
    }
}
