use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::eval::DepthRange;
use crate::fusion::FusionConfig;
use crate::io::IoError;
use crate::motion::RansacConfig;
use crate::segmentation::SegmentationConfig;
use crate::triangulation::TriangulationConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DepthFormat {
    #[default]
    Pfm,
    Png16,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub depth: bool,
    pub format: DepthFormat,
    /// Accumulated colored point cloud of all frames.
    pub pointcloud: bool,
    pub metrics: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { depth: true, format: DepthFormat::Pfm, pointcloud: false, metrics: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub near: DepthRange,
    pub far: DepthRange,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { near: DepthRange::NEAR, far: DepthRange::FAR }
    }
}

/// Switches used for ablations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    /// Off: the posterior is the current observation alone.
    pub temporal_fusion: bool,
    /// Off: the posterior scale is used per pixel, with the global median where missing.
    pub segment_consolidation: bool,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self { temporal_fusion: true, segment_consolidation: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub ransac: RansacConfig,
    pub triangulation: TriangulationConfig,
    pub fusion: FusionConfig,
    pub segmentation: SegmentationConfig,
    pub metrics: MetricsConfig,
    pub output: OutputConfig,
    pub stages: StageConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        let text = std::fs::read_to_string(path).map_err(|source| IoError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml(&text).map_err(|e| IoError::Format { path: path.to_path_buf(), reason: e.to_string() })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
