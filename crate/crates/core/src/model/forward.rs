//! Tape-level forward passes: encoder over visible patches, decoder with mask
//! tokens, masked-patch loss and the summed three-branch objective.

use crate::mask::MaskSet;
use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::{Error, Result};

use super::params::{Block, Linear, MmsParams, ModelConfig, Norm, Weights};

const LN_EPS: f64 = 1e-6;

/// Registers every parameter as a tape leaf.
pub fn register(tape: &mut Tape, params: &MmsParams, trainable: bool) -> Weights<Var> {
    params.weights.map(&mut |_, t| tape.leaf(t.clone(), trainable))
}

fn linear(tape: &mut Tape, x: Var, l: &Linear<Var>) -> Result<Var, TensorError> {
    let y = tape.matmul(x, l.w)?;
    tape.add_row(y, l.b)
}

fn norm(tape: &mut Tape, x: Var, n: &Norm<Var>) -> Result<Var, TensorError> {
    tape.layer_norm(x, n.gamma, n.beta, LN_EPS)
}

/// Pre-norm transformer block. Returns the block output and the per-head
/// attention probability nodes.
fn block(tape: &mut Tape, x: Var, b: &Block<Var>, heads: usize) -> Result<(Var, Vec<Var>), TensorError> {
    let h = norm(tape, x, &b.norm1)?;
    let q = linear(tape, h, &b.q)?;
    let k = linear(tape, h, &b.k)?;
    let v = linear(tape, h, &b.v)?;
    let width = tape.value(q).shape()[1];
    let hd = width / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for head in 0..heads {
        let qh = tape.slice_cols(q, head * hd, hd)?;
        let kh = tape.slice_cols(k, head * hd, hd)?;
        let vh = tape.slice_cols(v, head * hd, hd)?;
        let s = tape.matmul_nt(qh, kh)?;
        let s = tape.scale(s, scale);
        let p = tape.softmax_rows(s)?;
        outs.push(tape.matmul(p, vh)?);
        probs.push(p);
    }
    let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    let a = linear(tape, cat, &b.o)?;
    let x = tape.add(x, a)?;
    let h = norm(tape, x, &b.norm2)?;
    let h = linear(tape, h, &b.fc1)?;
    let h = tape.gelu(h);
    let h = linear(tape, h, &b.fc2)?;
    Ok((tape.add(x, h)?, probs))
}

/// Encoder output for one branch.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// `[V+1, d_model]`, row 0 is the CLS token.
    pub features: Var,
    /// Patch index of each encoded row after the CLS row.
    pub order: Vec<usize>,
    /// Attention probabilities per layer, per head (`[V+1, V+1]` each).
    pub attn: Vec<Vec<Var>>,
}

/// Embeds the patches listed in `order` (any order, no repeats), adds their
/// positional embeddings by original index, prepends CLS and runs the encoder.
pub fn encode_tokens(
    tape: &mut Tape,
    w: &Weights<Var>,
    cfg: &ModelConfig,
    patches: Var,
    order: &[usize],
) -> Result<Encoded> {
    let n = cfg.num_patches();
    if tape.value(patches).shape() != [n, cfg.patch_dim()] {
        return Err(Error::Geometry(format!(
            "patches {:?} do not match a {}x{} grid of {}-dim patches",
            tape.value(patches).shape(),
            cfg.grid_h,
            cfg.grid_w,
            cfg.patch_dim()
        )));
    }
    let d = cfg.d_model;
    let cls = tape.reshape(w.cls_token, vec![1, d])?;
    let cls_pos = tape.gather_rows(w.pos_embed, &[0])?;
    let cls = tape.add(cls, cls_pos)?;
    let mut x = if order.is_empty() {
        cls
    } else {
        let vis = tape.gather_rows(patches, order)?;
        let emb = linear(tape, vis, &w.patch_embed)?;
        let pos_idx: Vec<usize> = order.iter().map(|&i| i + 1).collect();
        let pos = tape.gather_rows(w.pos_embed, &pos_idx)?;
        let emb = tape.add(emb, pos)?;
        tape.concat_rows(&[cls, emb])?
    };
    let mut attn = Vec::with_capacity(w.encoder_blocks.len());
    for b in &w.encoder_blocks {
        let (y, probs) = block(tape, x, b, cfg.heads)?;
        x = y;
        attn.push(probs);
    }
    let features = norm(tape, x, &w.encoder_norm)?;
    Ok(Encoded {
        features,
        order: order.to_vec(),
        attn,
    })
}

fn check_mask(cfg: &ModelConfig, mask: &MaskSet) -> Result<()> {
    if mask.grid_h != cfg.grid_h || mask.grid_w != cfg.grid_w || !mask.is_well_formed() {
        return Err(Error::Geometry(format!(
            "mask grid {}x{} does not match model grid {}x{}",
            mask.grid_h, mask.grid_w, cfg.grid_h, cfg.grid_w
        )));
    }
    Ok(())
}

/// Encodes only the patches left visible by `mask`, in ascending index order.
pub fn encode_visible(
    tape: &mut Tape,
    w: &Weights<Var>,
    cfg: &ModelConfig,
    patches: Var,
    mask: &MaskSet,
) -> Result<Encoded> {
    check_mask(cfg, mask)?;
    encode_tokens(tape, w, cfg, patches, &mask.visible())
}

/// Projects encoder features to the decoder width, places them at their
/// original positions with the mask token everywhere else, and predicts all
/// `N` patches (`[N, patch_dim]`, CLS slot dropped).
pub fn decode_with_mask_tokens(
    tape: &mut Tape,
    w: &Weights<Var>,
    cfg: &ModelConfig,
    enc: &Encoded,
    mask: &MaskSet,
) -> Result<Var> {
    check_mask(cfg, mask)?;
    let n = cfg.num_patches();
    let rows = tape.value(enc.features).shape()[0];
    if rows != enc.order.len() + 1 || enc.order.len() + mask.len() != n {
        return Err(Error::Geometry(format!(
            "{} encoded rows and {} masked patches do not fill a grid of {n}",
            rows,
            mask.len()
        )));
    }
    let dd = cfg.dec_dim;
    let f = linear(tape, enc.features, &w.decoder_embed)?;
    let mask_row = tape.reshape(w.mask_token, vec![1, dd])?;
    let stack = tape.concat_rows(&[f, mask_row])?;
    // source row in `stack` for every decoder position (CLS first)
    let mask_slot = rows;
    let mut src = vec![mask_slot; n + 1];
    src[0] = 0;
    for (j, &p) in enc.order.iter().enumerate() {
        if mask.is_masked(p) {
            return Err(Error::Geometry(format!("patch {p} is both encoded and masked")));
        }
        src[p + 1] = j + 1;
    }
    let full = tape.gather_rows(stack, &src)?;
    let mut x = tape.add(full, w.dec_pos_embed)?;
    for b in &w.decoder_blocks {
        x = block(tape, x, b, cfg.dec_heads)?.0;
    }
    let x = norm(tape, x, &w.decoder_norm)?;
    let pred = linear(tape, x, &w.pred_head)?;
    let patch_rows: Vec<usize> = (1..=n).collect();
    Ok(tape.gather_rows(pred, &patch_rows)?)
}

/// `(1/|M|) Σ_{i∈M} ‖recon_i − target_i‖²`, squared error summed over the
/// patch dimensions and not divided by them.
pub fn branch_loss(tape: &mut Tape, recon: Var, targets: Var, mask: &MaskSet) -> Result<Var> {
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    if tape.value(recon).shape() != tape.value(targets).shape() {
        return Err(Error::Geometry(format!(
            "reconstruction {:?} vs targets {:?}",
            tape.value(recon).shape(),
            tape.value(targets).shape()
        )));
    }
    let r = tape.gather_rows(recon, &mask.masked)?;
    let t = tape.gather_rows(targets, &mask.masked)?;
    let diff = tape.sub(r, t)?;
    let sq = tape.mul(diff, diff)?;
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / mask.len() as f64))
}

/// Per-branch result of [`mms_forward`].
#[derive(Debug, Clone)]
pub struct BranchVars {
    pub loss: Var,
    pub recon: Var,
    pub encoded: Encoded,
}

#[derive(Debug, Clone)]
pub struct MmsVars {
    pub branches: Vec<BranchVars>,
    /// Unweighted sum of the branch losses.
    pub total: Var,
}

/// Runs every mask through the same weights and sums the branch losses.
pub fn mms_forward(
    tape: &mut Tape,
    w: &Weights<Var>,
    cfg: &ModelConfig,
    patches: Var,
    targets: Var,
    masks: &[MaskSet],
) -> Result<MmsVars> {
    if masks.is_empty() {
        return Err(Error::Config("at least one masking branch is required".into()));
    }
    let mut branches = Vec::with_capacity(masks.len());
    for mask in masks {
        let encoded = encode_visible(tape, w, cfg, patches, mask)?;
        let recon = decode_with_mask_tokens(tape, w, cfg, &encoded, mask)?;
        let loss = branch_loss(tape, recon, targets, mask)?;
        branches.push(BranchVars { loss, recon, encoded });
    }
    let mut total = branches[0].loss;
    for b in &branches[1..] {
        total = tape.add(total, b.loss)?;
    }
    Ok(MmsVars { branches, total })
}

/// Stacks per-head attention nodes into a `[heads, T, T]` tensor.
pub fn stack_heads(tape: &Tape, heads: &[Var]) -> Tensor {
    let t = tape.value(heads[0]).shape()[0];
    let mut data = Vec::with_capacity(heads.len() * t * t);
    for &h in heads {
        data.extend_from_slice(tape.value(h).data());
    }
    Tensor::new(vec![heads.len(), t, t], data).expect("attention stack shape")
}
