//! Dataset ingestion, alignment, augmentation, synthesis, and batching.

pub mod align;
pub mod augment;
pub mod batch;
pub mod image_io;
pub mod manifest;
pub mod synth;

use crate::autodiff::Tensor;

pub use align::{align_face, sample_bilinear, warp_similarity, AlignSpec};
pub use augment::{augment, crop_sample, flip_sample};
pub use batch::{epoch_pairs, paired_batches, CollatedBatch, Dataset, PairedBatch};
pub use image_io::{load_image, save_gray_png, to_gray};
pub use manifest::{load_manifest, parse_manifest, Domain, Manifest, ManifestStats, Record};
pub use synth::{synth_dataset, SynthOutput, SynthSpec};

/// One in-memory example: image in [0, 1], full normalized landmarks,
/// labels where known, and the inter-ocular distance in the image's
/// normalized units.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor,
    pub landmarks: Vec<f64>,
    pub au_labels: Option<Vec<u8>>,
    pub domain: Domain,
    pub inter_ocular: f64,
}
