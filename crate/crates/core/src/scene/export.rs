//! Snapshot export: color PNG, 16-bit depth PNG in 0.1 mm units, JSON metadata.

use std::collections::BTreeMap;
use std::fs;
use std::io::Cursor;
use std::path::Path;

use image::{ImageBuffer, ImageFormat, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::geometry::{CameraIntrinsics, Pose6};

use super::{RgbdFrame, WorldState};

pub const DEPTH_UNITS_PER_METER: f64 = 10_000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetadata {
    pub frame_id: u64,
    pub environment: String,
    pub intrinsics: CameraIntrinsics,
    pub camera_pose_world: Pose6,
    pub depth_units_per_meter: f64,
    /// Camera-frame poses of every entity.
    pub objects: BTreeMap<String, Pose6>,
}

pub fn metadata(world: &WorldState, frame: &RgbdFrame) -> FrameMetadata {
    FrameMetadata {
        frame_id: frame.frame_id,
        environment: world.config.environment.to_string(),
        intrinsics: frame.intrinsics,
        camera_pose_world: world.camera_pose,
        depth_units_per_meter: DEPTH_UNITS_PER_METER,
        objects: world
            .entities()
            .into_iter()
            .map(|e| (e.name, world.pose_in_camera(&e.pose_world)))
            .collect(),
    }
}

pub fn color_image(frame: &RgbdFrame) -> RgbImage {
    ImageBuffer::from_fn(frame.width(), frame.height(), |u, v| Rgb(frame.color[frame.index(u, v)]))
}

pub fn depth_image(frame: &RgbdFrame) -> ImageBuffer<Luma<u16>, Vec<u16>> {
    ImageBuffer::from_fn(frame.width(), frame.height(), |u, v| {
        let d = frame.depth[frame.index(u, v)];
        Luma([(d * DEPTH_UNITS_PER_METER).round().clamp(0.0, u16::MAX as f64) as u16])
    })
}

pub fn encode_color_png(frame: &RgbdFrame) -> Result<Vec<u8>, image::ImageError> {
    let mut buf = Cursor::new(Vec::new());
    color_image(frame).write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

/// Writes `color.png`, `depth.png` and `meta.json` into `dir`.
pub fn export_frame(world: &WorldState, frame: &RgbdFrame, dir: &Path) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    color_image(frame)
        .save(dir.join("color.png"))
        .map_err(std::io::Error::other)?;
    depth_image(frame)
        .save(dir.join("depth.png"))
        .map_err(std::io::Error::other)?;
    let meta = serde_json::to_string_pretty(&metadata(world, frame))?;
    fs::write(dir.join("meta.json"), meta)
}
