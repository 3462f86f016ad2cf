//! Input loading and small image helpers shared by the subcommands.

use std::path::Path;

use anyhow::{Context, Result};
use mms_core::image::{resize_bilinear, ImageBuf, IMAGE_H, IMAGE_W};
use mms_core::model::checkpoint;
use mms_core::model::MmsParams;
use mms_core::synth::{self, SyntheticSample};

use crate::usage;

pub fn require_exists(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(usage(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

/// A synthetic dataset directory (with manifest) or a folder of PNM files.
pub struct Dataset {
    pub images: Vec<ImageBuf>,
    pub samples: Option<Vec<SyntheticSample>>,
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    require_exists(dir, "data directory")?;
    if dir.join(synth::MANIFEST_FILE).exists() {
        let samples = synth::load_samples(dir)?;
        let images = samples
            .iter()
            .map(|s| fit(s.image.to_rgb()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            images,
            samples: Some(samples),
        })
    } else {
        let images = synth::load_external(dir)?;
        if images.is_empty() {
            return Err(usage(format!("{} holds no .ppm/.pgm/.pnm images", dir.display())));
        }
        Ok(Dataset { images, samples: None })
    }
}

fn fit(img: ImageBuf) -> Result<ImageBuf> {
    if img.height == IMAGE_H && img.width == IMAGE_W {
        Ok(img)
    } else {
        Ok(resize_bilinear(&img, IMAGE_H, IMAGE_W)?)
    }
}

pub fn load_params(path: &Path) -> Result<MmsParams> {
    require_exists(path, "checkpoint")?;
    Ok(checkpoint::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?
        .params)
}

/// Images of equal width stacked top to bottom.
pub fn vstack(parts: &[ImageBuf]) -> ImageBuf {
    let (w, c) = (parts[0].width, parts[0].channels);
    let h = parts.iter().map(|p| p.height).sum();
    let data = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
    ImageBuf::new(h, w, c, data).expect("stacked parts share width and channels")
}
