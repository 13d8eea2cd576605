//! Frame-to-atlas plumbing: detection, local map and fusion for each posed
//! keyframe, with per-stage timing.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::fusion::{Atlas, AtlasConfig, UpdateSummary};
use crate::geometry::{PointCloudFrame, Pose};
use crate::local_ogm::{build_local_ogm, LocalMapConfig};
use crate::par::Execution;
use crate::traversability::{detect_traversable, TraversabilityConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub atlas: AtlasConfig,
    pub traversability: TraversabilityConfig,
    pub local: LocalMapConfig,
    /// Altitude the vertical band hangs from. `None` takes the first
    /// keyframe's sensor height, rounded to 1/8 m so it is exact in f32.
    pub vertical_datum: Option<f64>,
}

impl PipelineConfig {
    /// Consistent settings for a LiDAR of `channels` x `width` and a map of
    /// the given resolution and keyframe radius.
    pub fn new(channels: usize, width: usize, resolution: f64, radius: f64) -> Self {
        PipelineConfig {
            atlas: AtlasConfig {
                resolution,
                ..AtlasConfig::default()
            },
            traversability: TraversabilityConfig::for_image(channels, width),
            local: LocalMapConfig {
                resolution,
                radius,
                ..LocalMapConfig::default()
            },
            vertical_datum: None,
        }
    }

    pub fn with_execution(mut self, execution: Execution) -> Self {
        self.atlas.execution = execution;
        self.traversability.execution = execution;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.local.validate()?;
        if (self.local.resolution - self.atlas.resolution).abs() > 1e-12 * self.atlas.resolution {
            return Err(Error::ResolutionMismatch {
                atlas: self.atlas.resolution,
                local: self.local.resolution,
            });
        }
        Atlas::new(self.atlas.clone()).map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameReport {
    pub summary: UpdateSummary,
    pub ground_points: usize,
    pub obstacle_points: usize,
    pub detection_ms: f64,
    pub local_map_ms: f64,
    pub fusion_ms: f64,
}

/// Builds an atlas one posed frame at a time; every frame is a keyframe.
pub struct MapBuilder {
    config: PipelineConfig,
    atlas: Option<Atlas>,
}

impl MapBuilder {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        Ok(MapBuilder { config, atlas: None })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn atlas(&self) -> Option<&Atlas> {
        self.atlas.as_ref()
    }

    pub fn atlas_mut(&mut self) -> Option<&mut Atlas> {
        self.atlas.as_mut()
    }

    /// The finished map (empty when no frame was added).
    pub fn into_atlas(self) -> Result<Atlas> {
        match self.atlas {
            Some(a) => Ok(a),
            None => Atlas::new(self.config.atlas),
        }
    }

    pub fn add_frame(&mut self, frame: &PointCloudFrame, pose: &Pose) -> Result<FrameReport> {
        let t0 = Instant::now();
        let labeled = detect_traversable(frame, &self.config.traversability)?;
        let t1 = Instant::now();
        let local = build_local_ogm(&labeled, pose, &self.config.local)?;
        let t2 = Instant::now();
        if self.atlas.is_none() {
            let datum = self
                .config
                .vertical_datum
                .unwrap_or_else(|| (pose.translation.z * 8.0).round() / 8.0);
            self.atlas = Some(Atlas::new(AtlasConfig {
                vertical_datum: datum,
                ..self.config.atlas.clone()
            })?);
        }
        let summary = self
            .atlas
            .as_mut()
            .unwrap()
            .integrate_keyframe(&local, pose, frame.timestamp)?;
        let t3 = Instant::now();
        let ms = |a: Instant, b: Instant| (b - a).as_secs_f64() * 1e3;
        Ok(FrameReport {
            summary,
            ground_points: labeled.ground_count(),
            obstacle_points: labeled.obstacle_count(),
            detection_ms: ms(t0, t1),
            local_map_ms: ms(t1, t2),
            fusion_ms: ms(t2, t3),
        })
    }
}
