//! Training-time augmentation: random crop and horizontal flip.
//!
//! Every image transform is applied identically to the landmark
//! coordinates, and the inter-ocular distance is recomputed afterwards,
//! so labels never drift from pixels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::autodiff::Tensor;
use crate::data::manifest::Manifest;
use crate::data::Sample;
use crate::error::{Error, Result};

/// Crop a window of `crop` pixels starting at (off_x, off_y), renormalizing
/// the landmarks to the window.
pub fn crop_sample(
    sample: &Sample,
    manifest: &Manifest,
    off_x: usize,
    off_y: usize,
    crop: usize,
) -> Result<Sample> {
    let s = sample.image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    if off_x + crop > w || off_y + crop > h {
        return Err(Error::Data(format!(
            "crop {crop} at ({off_x}, {off_y}) exceeds image {w}x{h}"
        )));
    }
    let mut data = vec![0.0; c * crop * crop];
    for ch in 0..c {
        for y in 0..crop {
            let src = ch * h * w + (y + off_y) * w + off_x;
            let dst = ch * crop * crop + y * crop;
            data[dst..dst + crop].copy_from_slice(&sample.image.data()[src..src + crop]);
        }
    }
    let image = Tensor::new(vec![c, crop, crop], data)?;
    let mut landmarks = Vec::with_capacity(sample.landmarks.len());
    for i in 0..sample.landmarks.len() / 2 {
        landmarks.push((sample.landmarks[2 * i] * w as f64 - off_x as f64) / crop as f64);
        landmarks.push((sample.landmarks[2 * i + 1] * h as f64 - off_y as f64) / crop as f64);
    }
    let inter_ocular = manifest.inter_ocular(&landmarks)?;
    Ok(Sample {
        image,
        landmarks,
        au_labels: sample.au_labels.clone(),
        domain: sample.domain,
        inter_ocular,
    })
}

/// Mirror the image horizontally; landmark x coordinates map to 1 - x and
/// indices are permuted by the manifest swap table, so left and right
/// structures trade places consistently.
pub fn flip_sample(sample: &Sample, manifest: &Manifest) -> Result<Sample> {
    let s = sample.image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut data = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                data[ch * h * w + y * w + x] =
                    sample.image.data()[ch * h * w + y * w + (w - 1 - x)];
            }
        }
    }
    let image = Tensor::new(vec![c, h, w], data)?;
    let n_land = sample.landmarks.len() / 2;
    if manifest.flip_swap.len() != n_land {
        return Err(Error::Data(format!(
            "flip swap table covers {} landmarks, sample has {n_land}",
            manifest.flip_swap.len()
        )));
    }
    let mut landmarks = vec![0.0; sample.landmarks.len()];
    for i in 0..n_land {
        let j = manifest.flip_swap[i];
        landmarks[2 * i] = 1.0 - sample.landmarks[2 * j];
        landmarks[2 * i + 1] = sample.landmarks[2 * j + 1];
    }
    let inter_ocular = manifest.inter_ocular(&landmarks)?;
    Ok(Sample {
        image,
        landmarks,
        au_labels: sample.au_labels.clone(),
        domain: sample.domain,
        inter_ocular,
    })
}

/// Seed-deterministic augmentation: crop offset drawn uniformly from
/// [0, size - crop] per axis (x first, then y), then a coin flip for the
/// mirror. The same seed always produces the same output.
pub fn augment(sample: &Sample, manifest: &Manifest, crop: usize, seed: u64) -> Result<Sample> {
    let s = sample.image.shape();
    let (h, w) = (s[1], s[2]);
    if crop > h || crop > w {
        return Err(Error::Data(format!("crop {crop} exceeds image {w}x{h}")));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let off_x = rng.gen_range(0..=w - crop);
    let off_y = rng.gen_range(0..=h - crop);
    let flip: bool = rng.gen_bool(0.5);
    let cropped = crop_sample(sample, manifest, off_x, off_y, crop)?;
    if flip {
        flip_sample(&cropped, manifest)
    } else {
        Ok(cropped)
    }
}
