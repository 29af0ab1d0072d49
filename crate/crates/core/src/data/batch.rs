//! In-memory dataset and the paired two-domain batch iterator.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::autodiff::Tensor;
use crate::data::augment::{augment, crop_sample};
use crate::data::image_io::{load_image, to_gray};
use crate::data::manifest::{Domain, Manifest};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::losses::{AuTarget, LandmarkTarget};

/// Tensors and targets for one batch of samples from a single domain.
#[derive(Debug, Clone)]
pub struct CollatedBatch {
    /// Stacked images, [batch, c, h, w].
    pub images: Tensor,
    /// Training-subset landmark targets, one per sample.
    pub landmarks: Vec<LandmarkTarget>,
    /// Per-sample action-unit targets where labels exist.
    pub au: Vec<Option<AuTarget>>,
}

/// A source batch and a target batch of equal size.
#[derive(Debug, Clone)]
pub struct PairedBatch {
    pub source: CollatedBatch,
    pub target: CollatedBatch,
}

/// All samples of a manifest held in memory, grayscale.
#[derive(Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub samples: Vec<Sample>,
    pub source_idx: Vec<usize>,
    pub target_idx: Vec<usize>,
    /// Inverse-frequency weights from the manifest stats, when source
    /// records exist.
    pub class_weights: Option<Vec<f64>>,
}

impl Dataset {
    /// Load every record's image. Images are converted to grayscale; all
    /// must share one shape.
    pub fn load(manifest: Manifest) -> Result<Self> {
        let mut samples = Vec::with_capacity(manifest.records.len());
        for record in &manifest.records {
            let img = to_gray(&load_image(&manifest.image_path(record))?)?;
            let inter_ocular = manifest.inter_ocular(&record.landmarks)?;
            samples.push(Sample {
                image: img,
                landmarks: record.landmarks.clone(),
                au_labels: record.au_labels.clone(),
                domain: record.domain,
                inter_ocular,
            });
        }
        Self::from_samples(manifest, samples)
    }

    /// Build a dataset from samples already in memory.
    pub fn from_samples(manifest: Manifest, samples: Vec<Sample>) -> Result<Self> {
        if let Some(first) = samples.first() {
            let shape = first.image.shape().to_vec();
            for (i, s) in samples.iter().enumerate() {
                if s.image.shape() != shape {
                    return Err(Error::Data(format!(
                        "sample {i} has shape {:?}, expected {shape:?}",
                        s.image.shape()
                    )));
                }
            }
        }
        let source_idx: Vec<usize> =
            (0..samples.len()).filter(|&i| samples[i].domain == Domain::Source).collect();
        let target_idx: Vec<usize> =
            (0..samples.len()).filter(|&i| samples[i].domain == Domain::Target).collect();
        let class_weights = match manifest.stats.as_ref() {
            Some(_) => Some(manifest.class_weights()?),
            None => None,
        };
        Ok(Dataset { manifest, samples, source_idx, target_idx, class_weights })
    }

    fn collate_samples(&self, samples: &[Sample]) -> Result<CollatedBatch> {
        if samples.is_empty() {
            return Err(Error::Data("cannot collate an empty batch".into()));
        }
        let shape = samples[0].image.shape().to_vec();
        let per = samples[0].image.numel();
        let mut data = Vec::with_capacity(samples.len() * per);
        let mut landmarks = Vec::with_capacity(samples.len());
        let mut au = Vec::with_capacity(samples.len());
        for s in samples {
            if s.image.shape() != shape {
                return Err(Error::Data("mixed image shapes in one batch".into()));
            }
            data.extend_from_slice(s.image.data());
            landmarks.push(LandmarkTarget::new(
                self.manifest.subset_coords(&s.landmarks)?,
                s.inter_ocular,
            )?);
            au.push(match (&s.au_labels, &self.class_weights) {
                (Some(labels), Some(w)) => Some(AuTarget::new(
                    labels.iter().map(|&l| l as f64).collect(),
                    w.clone(),
                )?),
                _ => None,
            });
        }
        let mut full_shape = vec![samples.len()];
        full_shape.extend_from_slice(&shape);
        Ok(CollatedBatch { images: Tensor::new(full_shape, data)?, landmarks, au })
    }

    /// Collate by index without augmentation.
    pub fn collate(&self, idx: &[usize]) -> Result<CollatedBatch> {
        let samples: Vec<Sample> = idx.iter().map(|&i| self.samples[i].clone()).collect();
        self.collate_samples(&samples)
    }

    /// Collate by index, center-cropping to `res` pixels when samples are
    /// larger. Samples already at `res` pass through untouched; smaller
    /// ones are an error. Deterministic, for validation and evaluation.
    pub fn collate_center(&self, idx: &[usize], res: usize) -> Result<CollatedBatch> {
        let samples: Vec<Sample> = idx
            .iter()
            .map(|&i| {
                let s = &self.samples[i];
                let side = s.image.shape()[1];
                if side == res {
                    Ok(s.clone())
                } else if side > res {
                    let off = (side - res) / 2;
                    crop_sample(s, &self.manifest, off, off, res)
                } else {
                    Err(Error::Data(format!(
                        "sample {i} is {side} px per side, below the {res} px the network expects"
                    )))
                }
            })
            .collect::<Result<_>>()?;
        self.collate_samples(&samples)
    }

    /// Collate by index, augmenting each sample to `crop` pixels with a
    /// per-sample seed.
    pub fn collate_augmented(&self, idx: &[usize], crop: usize, seed: u64) -> Result<CollatedBatch> {
        let samples: Vec<Sample> = idx
            .iter()
            .enumerate()
            .map(|(k, &i)| {
                augment(&self.samples[i], &self.manifest, crop, mix(seed, i as u64, k as u64))
            })
            .collect::<Result<_>>()?;
        self.collate_samples(&samples)
    }
}

/// Cheap splitmix-style seed mixer for per-sample augmentation streams.
fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E3779B97F4A7C15) ^ b.wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Index pairing for one epoch: both domains shuffled, the batch count
/// driven by the source side, the target side cycling when shorter.
/// Deterministic in (seed, epoch).
pub fn epoch_pairs(
    n_source: usize,
    n_target: usize,
    batch: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if batch == 0 {
        return Err(Error::Data("batch size must be positive".into()));
    }
    if n_source == 0 || n_target == 0 {
        return Err(Error::Data("paired batches need samples in both domains".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut src: Vec<usize> = (0..n_source).collect();
    let mut tgt: Vec<usize> = (0..n_target).collect();
    src.shuffle(&mut rng);
    tgt.shuffle(&mut rng);
    let n_batches = n_source / batch;
    let mut out = Vec::with_capacity(n_batches);
    for b in 0..n_batches {
        let s = src[b * batch..(b + 1) * batch].to_vec();
        let t = (0..batch).map(|k| tgt[(b * batch + k) % n_target]).collect();
        out.push((s, t));
    }
    Ok(out)
}

/// Materialize every paired batch of one epoch. When `crop` is set the
/// samples are augmented to that size; otherwise they collate as stored.
pub fn paired_batches(
    ds: &Dataset,
    batch: usize,
    seed: u64,
    epoch: u64,
    crop: Option<usize>,
) -> Result<Vec<PairedBatch>> {
    let pairs = epoch_pairs(ds.source_idx.len(), ds.target_idx.len(), batch, seed, epoch)?;
    let mut out = Vec::with_capacity(pairs.len());
    for (bi, (s_rel, t_rel)) in pairs.into_iter().enumerate() {
        let s_idx: Vec<usize> = s_rel.iter().map(|&i| ds.source_idx[i]).collect();
        let t_idx: Vec<usize> = t_rel.iter().map(|&i| ds.target_idx[i]).collect();
        let (source, target) = match crop {
            Some(c) => (
                ds.collate_augmented(&s_idx, c, mix(seed, epoch, 2 * bi as u64))?,
                ds.collate_augmented(&t_idx, c, mix(seed, epoch, 2 * bi as u64 + 1))?,
            ),
            None => (ds.collate(&s_idx)?, ds.collate(&t_idx)?),
        };
        out.push(PairedBatch { source, target });
    }
    Ok(out)
}
