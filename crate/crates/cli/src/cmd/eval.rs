use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mms_core::eval::{build_eval_sets, default_eval_masks, evaluate, reconstruct, EvalReport, EvalSets, PsnrTable};
use mms_core::image::{write_pnm, PATCH_SIZE};
use mms_core::mask::apply_mask;
use mms_core::model::checkpoint::file_sha256;
use mms_core::model::MmsParams;

use crate::io::{load_dataset, load_params, require_exists, vstack};
use crate::manifest::RunManifest;

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Checkpoint as `NAME=PATH` (or a bare path, named after its file). Repeatable.
    #[arg(long, required = true)]
    pub ckpt: Vec<String>,
    #[arg(long)]
    pub data: PathBuf,
    /// Seed of the frozen evaluation masks.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Reuse evaluation masks saved by an earlier run instead of sampling.
    #[arg(long)]
    pub eval_sets: Option<PathBuf>,
    /// Evaluate only the first this many images.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Reconstruction strips written per model.
    #[arg(long, default_value_t = 4)]
    pub strips: usize,
}

fn parse_ckpt(spec: &str) -> (String, PathBuf) {
    match spec.split_once('=') {
        Some((name, path)) if !name.is_empty() => (name.to_string(), PathBuf::from(path)),
        _ => {
            let p = PathBuf::from(spec);
            let name = p.file_stem().map_or("model".into(), |s| s.to_string_lossy().to_string());
            (name, p)
        }
    }
}

/// Original on top, then masked input and composed reconstruction per set.
fn write_strips(dir: &Path, params: &MmsParams, images: &[mms_core::image::ImageBuf], sets: &EvalSets, n: usize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, img) in images.iter().take(n).enumerate() {
        let mut parts = vec![img.to_rgb()];
        for set in &sets.sets {
            let m = &set.masks[i];
            parts.push(apply_mask(&img.to_rgb(), m, PATCH_SIZE)?);
            parts.push(reconstruct(params, img, m)?.0);
        }
        write_pnm(&dir.join(format!("{i:06}.ppm")), &vstack(&parts))?;
    }
    Ok(())
}

pub fn run(a: Args) -> Result<()> {
    let ckpts: Vec<(String, PathBuf)> = a.ckpt.iter().map(|s| parse_ckpt(s)).collect();
    for (i, (name, path)) in ckpts.iter().enumerate() {
        require_exists(path, "checkpoint")?;
        if name.contains(',') || ckpts[..i].iter().any(|(n, _)| n == name) {
            return Err(crate::usage(format!("checkpoint name {name:?} is repeated or contains a comma")));
        }
    }
    if let Some(p) = &a.eval_sets {
        require_exists(p, "evaluation sets")?;
    }
    if a.limit == Some(0) {
        return Err(crate::usage("--limit must be at least 1"));
    }
    let data = load_dataset(&a.data)?;
    let n = a.limit.unwrap_or(usize::MAX).min(data.images.len());
    let images = &data.images[..n];
    let boxes: Option<Vec<_>> = data.samples.as_ref().map(|s| s[..n].iter().map(|s| s.char_boxes.clone()).collect());

    let mut inputs: Vec<&Path> = vec![a.data.as_path()];
    inputs.extend(ckpts.iter().map(|(_, p)| p.as_path()));
    inputs.extend(a.eval_sets.as_deref());
    let config = serde_json::json!({
        "checkpoints": ckpts.iter().map(|(n, p)| (n.clone(), p.display().to_string())).collect::<Vec<_>>(),
        "num_images": n,
        "eval_sets": a.eval_sets.as_ref().map(|p| p.display().to_string()),
        "masks": default_eval_masks(),
        "strips": a.strips,
    });
    let manifest = RunManifest::begin(&a.out, "eval", config, &[("eval_seed", a.seed)], &inputs)?;

    let models = ckpts
        .iter()
        .map(|(name, path)| Ok((name.clone(), load_params(path)?)))
        .collect::<Result<Vec<_>>>()?;
    let (gh, gw) = (models[0].1.config.grid_h, models[0].1.config.grid_w);
    let sets = match &a.eval_sets {
        Some(p) => {
            let s = EvalSets::load(p)?;
            if s.num_images() < n || (s.grid_h, s.grid_w) != (gh, gw) {
                return Err(crate::usage(format!(
                    "{} holds {} masks on a {}x{} grid; need {n} on {gh}x{gw}",
                    p.display(),
                    s.num_images(),
                    s.grid_h,
                    s.grid_w
                )));
            }
            let mut s = s;
            s.sets.iter_mut().for_each(|set| set.masks.truncate(n));
            s
        }
        None => build_eval_sets(n, gh, gw, &default_eval_masks(), a.seed)?,
    };
    sets.save(&a.out.join("eval_sets.json"))?;

    let mut reports = Vec::new();
    let mut rows = Vec::new();
    for ((name, params), (_, path)) in models.iter().zip(&ckpts) {
        eprintln!("evaluating {name} on {n} images");
        let (set_reports, _) = evaluate(params, images, &sets, boxes.as_deref())?;
        rows.push((name.clone(), set_reports.iter().map(|r| r.mean_psnr).collect()));
        reports.push(EvalReport {
            checkpoint: path.display().to_string(),
            checkpoint_sha256: file_sha256(path)?,
            preset: params.config.preset.clone(),
            eval_seed: sets.seed,
            num_images: n,
            sets: set_reports,
            probe: None,
        });
        if a.strips > 0 {
            write_strips(&a.out.join("strips").join(name), params, images, &sets, a.strips)?;
        }
    }
    let table = PsnrTable {
        columns: sets.sets.iter().map(|s| s.name()).collect(),
        rows,
    };
    let csv = a.out.join("psnr_table.csv");
    std::fs::write(&csv, table.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
    std::fs::write(a.out.join("eval_report.json"), serde_json::to_string_pretty(&reports)? + "\n")?;
    eprint!("{}", table.to_csv());
    manifest.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_specs() {
        assert_eq!(parse_ckpt("mms=a/b.mms"), ("mms".into(), PathBuf::from("a/b.mms")));
        assert_eq!(parse_ckpt("a/final.mms"), ("final".into(), PathBuf::from("a/final.mms")));
    }
}
