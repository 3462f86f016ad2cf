//! Shared-weight ViT encoder and lightweight decoder.
//!
//! The encoder sees only visible patches (plus a CLS token); the decoder
//! re-inserts a learned mask token at every masked position and predicts all
//! `N` patches in per-patch normalized pixel space. All masking branches run
//! through one [`MmsParams`].

pub mod attention;
pub mod checkpoint;
pub mod forward;
mod params;

pub use params::{
    is_decayed, is_encoder, Block, Linear, MmsParams, ModelConfig, Norm, Weights, PRESETS,
};

use crate::image::{normalize_targets, patchify, ImageBuf, PatchGrid, NORM_EPS};
use crate::mask::MaskSet;
use crate::tensor::{Tape, Tensor};
use crate::Result;

/// Model input and reconstruction targets for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Raw `[0, 1]` patches.
    pub input: PatchGrid,
    /// Per-patch normalized patches with their statistics.
    pub targets: PatchGrid,
}

impl Sample {
    pub fn from_image(img: &ImageBuf, patch_size: usize) -> Result<Self> {
        let input = patchify(&img.to_rgb(), patch_size)?;
        let targets = normalize_targets(&input, NORM_EPS)?;
        Ok(Self { input, targets })
    }
}

/// Inference result of one masking branch.
#[derive(Debug, Clone)]
pub struct BranchOutput {
    /// `[N, patch_dim]` predictions in normalized patch space.
    pub recon_patches: Tensor,
    /// `[heads, V+1, V+1]` per encoder layer; only the final layer unless all
    /// layers were requested.
    pub encoder_attn: Vec<Tensor>,
    pub visible_idx: Vec<usize>,
    pub loss: Option<f64>,
}

/// Forward pass of one branch with frozen parameters.
pub fn run_branch(
    params: &MmsParams,
    sample: &Sample,
    mask: &MaskSet,
    all_layers: bool,
) -> Result<BranchOutput> {
    let mut tape = Tape::new();
    let w = forward::register(&mut tape, params, false);
    let patches = tape.leaf(sample.input.patches.clone(), false);
    let targets = tape.leaf(sample.targets.patches.clone(), false);
    let enc = forward::encode_visible(&mut tape, &w, &params.config, patches, mask)?;
    let recon = forward::decode_with_mask_tokens(&mut tape, &w, &params.config, &enc, mask)?;
    let loss = if mask.is_empty() {
        None
    } else {
        let l = forward::branch_loss(&mut tape, recon, targets, mask)?;
        Some(tape.value(l).item())
    };
    Ok(BranchOutput {
        recon_patches: tape.value(recon).clone(),
        encoder_attn: attn_layers(&tape, &enc, all_layers),
        visible_idx: enc.order,
        loss,
    })
}

fn attn_layers(tape: &Tape, enc: &forward::Encoded, all_layers: bool) -> Vec<Tensor> {
    let layers: &[Vec<_>] = if all_layers {
        &enc.attn
    } else {
        &enc.attn[enc.attn.len() - 1..]
    };
    layers.iter().map(|heads| forward::stack_heads(tape, heads)).collect()
}

/// Encoder features `[V+1, d_model]` (CLS first) and attention stacks.
pub fn encode(
    params: &MmsParams,
    grid: &PatchGrid,
    mask: &MaskSet,
    all_layers: bool,
) -> Result<(Tensor, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let w = forward::register(&mut tape, params, false);
    let patches = tape.leaf(grid.patches.clone(), false);
    let enc = forward::encode_visible(&mut tape, &w, &params.config, patches, mask)?;
    Ok((tape.value(enc.features).clone(), attn_layers(&tape, &enc, all_layers)))
}

/// Branch losses and their sum for the given masks, without gradients.
pub fn mms_losses(params: &MmsParams, sample: &Sample, masks: &[MaskSet]) -> Result<(Vec<f64>, f64)> {
    let mut tape = Tape::new();
    let w = forward::register(&mut tape, params, false);
    let patches = tape.leaf(sample.input.patches.clone(), false);
    let targets = tape.leaf(sample.targets.patches.clone(), false);
    let out = forward::mms_forward(&mut tape, &w, &params.config, patches, targets, masks)?;
    let losses = out.branches.iter().map(|b| tape.value(b.loss).item()).collect();
    Ok((losses, tape.value(out.total).item()))
}

/// Finite-difference check of `L_MMS` with respect to the parameters, probing
/// `per_slot` random elements of every slot (all of them if the slot is
/// smaller). Returns the worst `|g_ad - g_fd| / max(1, |g_fd|)`.
pub fn check_mms_gradient(
    params: &MmsParams,
    sample: &Sample,
    masks: &[MaskSet],
    per_slot: usize,
    eps: f64,
    seed: u64,
) -> Result<f64> {
    let inputs: Vec<Tensor> = params.weights.named().into_iter().map(|(_, t)| t.clone()).collect();
    let mut rng = crate::rng::Rng::new(seed);
    let mut coords = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        if t.numel() <= per_slot {
            coords.extend((0..t.numel()).map(|j| (i, j)));
        } else {
            coords.extend((0..per_slot).map(|_| (i, rng.below(t.numel() as u64) as usize)));
        }
    }
    let cfg = &params.config;
    // model errors other than tensor errors cannot arise once the first
    // forward pass succeeds, so surface them from a dry run
    mms_losses(params, sample, masks)?;
    let f = |tape: &mut Tape, vars: &[crate::tensor::Var]| {
        let mut k = 0;
        let w = params.weights.map(&mut |_, _| {
            k += 1;
            vars[k - 1]
        });
        let patches = tape.leaf(sample.input.patches.clone(), false);
        let targets = tape.leaf(sample.targets.patches.clone(), false);
        match forward::mms_forward(tape, &w, cfg, patches, targets, masks) {
            Ok(out) => Ok(out.total),
            Err(crate::Error::Tensor(e)) => Err(e),
            Err(e) => unreachable!("dry run succeeded: {e}"),
        }
    };
    Ok(crate::tensor::finite_diff_check_coords(f, &inputs, Some(&coords), eps)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{multi_mask, random_mask, MultiMaskConfig, Strategy};
    use crate::rng::Rng;

    fn noise_image(seed: u64) -> ImageBuf {
        let mut rng = Rng::new(seed);
        let data = (0..32 * 128 * 3).map(|_| rng.uniform()).collect();
        ImageBuf::new(32, 128, 3, data).unwrap()
    }

    fn micro() -> MmsParams {
        MmsParams::init(&ModelConfig::preset("micro").unwrap(), 7).unwrap()
    }

    #[test]
    fn branch_shapes() {
        let p = micro();
        let s = Sample::from_image(&noise_image(1), 4).unwrap();
        let m = random_mask(8, 32, 0.75, 3).unwrap();
        let out = run_branch(&p, &s, &m, false).unwrap();
        assert_eq!(out.recon_patches.shape(), [256, 48]);
        // 192 masked leaves 64 visible tokens plus CLS
        assert_eq!(out.encoder_attn.len(), 1);
        assert_eq!(out.encoder_attn[0].shape(), [2, 65, 65]);
        assert_eq!(out.visible_idx.len(), 64);
        assert!(out.loss.unwrap() > 0.0);
    }

    #[test]
    fn empty_mask_still_decodes() {
        let p = micro();
        let s = Sample::from_image(&noise_image(1), 4).unwrap();
        let m = MaskSet::from_indices(8, 32, &[], Strategy::Random, 0.0).unwrap();
        let out = run_branch(&p, &s, &m, true).unwrap();
        assert_eq!(out.recon_patches.shape(), [256, 48]);
        assert_eq!(out.encoder_attn[0].shape(), [2, 257, 257]);
        assert_eq!(out.loss, None);
    }

    #[test]
    fn cls_output_ignores_token_order() {
        let p = MmsParams::init(&ModelConfig::preset("tiny-desk").unwrap(), 2).unwrap();
        let grid = patchify(&noise_image(4), 4).unwrap();
        let mut order: Vec<usize> = (0..256).step_by(3).collect();
        let run = |order: &[usize]| {
            let mut tape = Tape::new();
            let w = forward::register(&mut tape, &p, false);
            let x = tape.leaf(grid.patches.clone(), false);
            let enc = forward::encode_tokens(&mut tape, &w, &p.config, x, order).unwrap();
            tape.value(enc.features).row(0).to_vec()
        };
        let a = run(&order);
        Rng::new(9).shuffle(&mut order);
        let b = run(&order);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn mask_placement_matters() {
        let p = micro();
        let s = Sample::from_image(&noise_image(2), 4).unwrap();
        let a = run_branch(&p, &s, &random_mask(8, 32, 0.5, 1).unwrap(), false).unwrap();
        let b = run_branch(&p, &s, &random_mask(8, 32, 0.5, 2).unwrap(), false).unwrap();
        assert_ne!(a.recon_patches, b.recon_patches);
    }

    #[test]
    fn loss_closed_form() {
        // zero reconstruction against constant targets c: 48·c² per patch
        let c = 0.3;
        let m = random_mask(8, 32, 0.25, 5).unwrap();
        let mut tape = Tape::new();
        let r = tape.leaf(Tensor::zeros(&[256, 48]), false);
        let t = tape.leaf(Tensor::construct(&[256, 48], crate::tensor::Init::Constant(c)).unwrap(), false);
        let l = forward::branch_loss(&mut tape, r, t, &m).unwrap();
        assert!((tape.value(l).item() - 48.0 * c * c).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_brute_force() {
        let mut rng = Rng::new(11);
        let mut rand_t = || Tensor::new(vec![256, 48], (0..256 * 48).map(|_| rng.gaussian()).collect()).unwrap();
        let (r, t) = (rand_t(), rand_t());
        let m = random_mask(8, 32, 0.5, 6).unwrap();
        let mut expect = 0.0;
        for &i in &m.masked {
            for j in 0..48 {
                let d = r.data()[i * 48 + j] - t.data()[i * 48 + j];
                expect += d * d;
            }
        }
        expect /= m.len() as f64;
        let mut tape = Tape::new();
        let (rv, tv) = (tape.leaf(r, false), tape.leaf(t, false));
        let l = forward::branch_loss(&mut tape, rv, tv, &m).unwrap();
        assert!((tape.value(l).item() - expect).abs() < 1e-9 * expect);
    }

    #[test]
    fn empty_mask_loss_is_an_error() {
        let m = MaskSet::from_indices(8, 32, &[], Strategy::Random, 0.0).unwrap();
        let mut tape = Tape::new();
        let r = tape.leaf(Tensor::zeros(&[256, 48]), false);
        assert!(matches!(
            forward::branch_loss(&mut tape, r, r, &m),
            Err(crate::Error::EmptyMask)
        ));
    }

    #[test]
    fn identical_masks_give_identical_losses() {
        let p = micro();
        let s = Sample::from_image(&noise_image(3), 4).unwrap();
        let m = random_mask(8, 32, 0.75, 9).unwrap();
        let (losses, total) = mms_losses(&p, &s, &[m.clone(), m.clone(), m]).unwrap();
        assert_eq!(losses[0].to_bits(), losses[1].to_bits());
        assert_eq!(losses[1].to_bits(), losses[2].to_bits());
        assert_eq!(total, 3.0 * losses[0]);
    }

    #[test]
    fn micro_gradient_check() {
        let p = micro();
        let s = Sample::from_image(&noise_image(5), 4).unwrap();
        let masks = multi_mask(8, 32, &MultiMaskConfig::default(), 4).unwrap();
        let err = check_mms_gradient(&p, &s, &masks, 4, 1e-5, 1).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }
}
