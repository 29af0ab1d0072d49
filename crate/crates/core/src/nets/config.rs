//! Shared structural configuration for all network blocks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel widths and head sizes for every block. One config describes a
/// whole network family so the landmark branch, extractor, and feature-space
/// blocks stay structurally compatible.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlockConfig {
    /// Input image channels (grayscale by default).
    pub in_channels: usize,
    /// Output channels of the five convolutional parts.
    pub widths: [usize; 5],
    /// Channel-attention bottleneck divisor.
    pub cbam_reduction: usize,
    /// Landmark count; the coordinate vector has twice this length.
    pub n_land: usize,
    /// Action unit count.
    pub n_au: usize,
    /// Input image height and width.
    pub resolution: usize,
    /// Hidden width of the two-layer landmark head.
    pub fc_hidden: usize,
    /// Channel width inside the discriminators and the AU head.
    pub disc_hidden: usize,
    /// When set, projectors pass features through unchanged.
    pub identity_projectors: bool,
}

impl Default for BlockConfig {
    fn default() -> Self {
        BlockConfig {
            in_channels: 1,
            widths: [8, 16, 32, 64, 64],
            cbam_reduction: 16,
            n_land: 49,
            n_au: 6,
            resolution: 176,
            fc_hidden: 128,
            disc_hidden: 32,
            identity_projectors: false,
        }
    }
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_land < 1 || self.n_au < 1 {
            return Err(Error::Config(format!(
                "n_land and n_au must be at least 1, got {} and {}",
                self.n_land, self.n_au
            )));
        }
        if self.in_channels < 1
            || self.widths.iter().any(|&w| w < 1)
            || self.fc_hidden < 1
            || self.disc_hidden < 1
            || self.cbam_reduction < 1
        {
            return Err(Error::Config(
                "channel widths, head sizes, and the reduction ratio must be positive".into(),
            ));
        }
        if self.resolution < 4 {
            return Err(Error::Config(format!(
                "resolution {} cannot survive the extractor's two poolings",
                self.resolution
            )));
        }
        Ok(())
    }

    /// Channel count of the extracted features (output of part 2).
    pub fn feature_channels(&self) -> usize {
        self.widths[1]
    }

    /// Spatial size of the extracted features (two floor-halvings).
    pub fn feature_size(&self) -> usize {
        self.resolution / 2 / 2
    }

    /// Spatial sizes after each of the five parts, or an error when some
    /// pooling would see a window smaller than 2x2.
    pub fn part_sizes(&self) -> Result<[usize; 5]> {
        let mut s = self.resolution;
        let mut out = [0usize; 5];
        for (i, slot) in out.iter_mut().enumerate() {
            if s < 2 {
                return Err(Error::Config(format!(
                    "resolution {} leaves a {s}x{s} map entering part {}'s pooling; \
                     five poolings need at least 32",
                    self.resolution,
                    i + 1
                )));
            }
            s /= 2;
            *slot = s;
        }
        Ok(out)
    }

    /// Flattened feature length entering the landmark head.
    pub fn head_input_len(&self) -> Result<usize> {
        let sizes = self.part_sizes()?;
        Ok(self.widths[4] * sizes[4] * sizes[4])
    }

    /// Hidden width of the channel-attention bottleneck.
    pub fn cbam_hidden(&self) -> usize {
        (self.widths[4] / self.cbam_reduction).max(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        let cfg = BlockConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.n_land, 49);
        assert_eq!(cfg.n_au, 6);
        assert_eq!(cfg.resolution, 176);
    }

    #[test]
    fn spatial_chain_176() {
        let cfg = BlockConfig::default();
        assert_eq!(cfg.part_sizes().unwrap(), [88, 44, 22, 11, 5]);
        assert_eq!(cfg.feature_size(), 44);
        assert_eq!(cfg.head_input_len().unwrap(), 64 * 5 * 5);
    }

    #[test]
    fn spatial_chain_32() {
        let cfg = BlockConfig { resolution: 32, ..Default::default() };
        assert_eq!(cfg.part_sizes().unwrap(), [16, 8, 4, 2, 1]);
        assert_eq!(cfg.feature_size(), 8);
    }

    #[test]
    fn too_small_resolution_is_rejected_for_five_parts() {
        let cfg = BlockConfig { resolution: 16, ..Default::default() };
        assert!(cfg.part_sizes().is_err());
        // The extractor alone still works at 16.
        assert_eq!(cfg.feature_size(), 4);
    }

    #[test]
    fn zero_counts_are_rejected() {
        let cfg = BlockConfig { n_land: 0, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = BlockConfig { n_au: 0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
