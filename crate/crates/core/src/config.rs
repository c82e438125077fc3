//! Pipeline configuration. Serialized as TOML; unknown keys are rejected.
//!
//! ```toml
//! seed = 7
//! knn = 16
//! z_min = 0.1
//!
//! [cylindrical]
//! delta_theta = 0.0034906585039886592
//! delta_phi = 0.0074243617163113
//! width = 1800
//! height = 64
//! vertical_offset = 0.03490658503988659
//!
//! [image]
//! pad_height = 384
//! pad_width = 1280
//!
//! [channels]
//! image = [16, 32, 64, 128]
//! point = [32, 64, 128, 256]
//!
//! [local_fuser]
//! region_height = 24
//! region_width = 40
//! similarity_with_positions = false
//! similarity_on_values = false
//!
//! [loss]
//! alpha = [1.6, 0.8, 0.4, 0.2]
//! k_x = 0.0
//! k_q = -2.5
//!
//! [train]
//! learning_rate = 0.001
//! beta1 = 0.9
//! beta2 = 0.999
//! epsilon = 1e-8
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VloError};
use crate::projection::{CylindricalConfig, DEFAULT_Z_MIN};

/// Number of pyramid levels; fixed by the architecture.
pub const LEVELS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageConfig {
    pub pad_height: usize,
    pub pad_width: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    pub image: [usize; LEVELS],
    pub point: [usize; LEVELS],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalFuserConfig {
    /// Region size in feature-map cells; clamped to the map at coarse levels.
    pub region_height: usize,
    pub region_width: usize,
    /// Append normalized pixel positions to the vectors compared by cosine
    /// similarity.
    pub similarity_with_positions: bool,
    /// Compare value-mapped features instead of raw features.
    pub similarity_on_values: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Per-level weights, finest level first.
    pub alpha: [f64; LEVELS],
    pub k_x: f64,
    pub k_q: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: [1.6, 0.8, 0.4, 0.2],
            k_x: 0.0,
            k_q: -2.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Neighbours per source point in the cost volume.
    pub knn: usize,
    /// Camera near-plane cutoff for the fusion mask (meters).
    pub z_min: f64,
    pub cylindrical: CylindricalConfig,
    pub image: ImageConfig,
    pub channels: ChannelConfig,
    pub local_fuser: LocalFuserConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            knn: 16,
            z_min: DEFAULT_Z_MIN,
            cylindrical: CylindricalConfig::default(),
            image: ImageConfig {
                pad_height: 384,
                pad_width: 1280,
            },
            channels: ChannelConfig {
                image: [16, 32, 64, 128],
                point: [32, 64, 128, 256],
            },
            local_fuser: LocalFuserConfig {
                region_height: 24,
                region_width: 40,
                similarity_with_positions: false,
                similarity_on_values: false,
            },
            loss: LossConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Small profile for tests and desk-scale training: narrow channels, a
    /// 64 x 192 image and K = 4.
    pub fn micro() -> Self {
        Self {
            knn: 4,
            image: ImageConfig {
                pad_height: 64,
                pad_width: 192,
            },
            channels: ChannelConfig {
                image: [4, 8, 16, 32],
                point: [8, 16, 32, 64],
            },
            local_fuser: LocalFuserConfig {
                region_height: 4,
                region_width: 12,
                ..Self::default().local_fuser
            },
            ..Self::default()
        }
    }

    /// Stride of pyramid level `l` relative to its input.
    pub fn level_stride(level: usize) -> usize {
        1 << (level + 1)
    }

    pub fn validate(&self) -> Result<()> {
        self.cylindrical.validate()?;
        if self.knn == 0 {
            return Err(VloError::Config("knn must be at least 1".into()));
        }
        if self.image.pad_height == 0 || self.image.pad_width == 0 {
            return Err(VloError::Config("image pad size must be positive".into()));
        }
        if self.channels.image.contains(&0) || self.channels.point.contains(&0) {
            return Err(VloError::Config("channel counts must be positive".into()));
        }
        if self.local_fuser.region_height == 0 || self.local_fuser.region_width == 0 {
            return Err(VloError::Config("region size must be positive".into()));
        }
        for l in 0..LEVELS {
            let s = Self::level_stride(l);
            let (h, w) = (self.image.pad_height.div_ceil(s), self.image.pad_width.div_ceil(s));
            let (rh, rw) = self.region_size(l);
            if h % rh != 0 || w % rw != 0 {
                return Err(VloError::Config(format!(
                    "region {rh}x{rw} does not tile level {l} feature map {h}x{w}"
                )));
            }
        }
        if self.loss.alpha.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(VloError::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Region size used at `level`, clamped to the feature map.
    pub fn region_size(&self, level: usize) -> (usize, usize) {
        let s = Self::level_stride(level);
        let (h, w) = (self.image.pad_height.div_ceil(s), self.image.pad_width.div_ceil(s));
        (
            self.local_fuser.region_height.min(h),
            self.local_fuser.region_width.min(w),
        )
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| VloError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| VloError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| VloError::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_toml_str(&text)
    }
}
