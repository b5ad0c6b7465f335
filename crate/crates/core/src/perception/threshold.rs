//! Depth-interval segmentation seeded by point prompts.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::raster::Mask;
use crate::scene::RgbdFrame;

use super::{PerceptionError, PromptSet, SegmentationResult};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThresholdConfig {
    pub eps_lower: f64,
    pub eps_upper: f64,
    /// 4 or 8.
    pub connectivity: u8,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self {
            eps_lower: 0.010,
            eps_upper: 0.003,
            connectivity: 8,
        }
    }
}

impl ThresholdConfig {
    pub fn validate(&self) -> Result<(), PerceptionError> {
        if !(self.eps_lower >= 0.0 && self.eps_upper >= 0.0) {
            return Err(PerceptionError::Config("threshold tolerances must be >= 0".into()));
        }
        if self.connectivity != 4 && self.connectivity != 8 {
            return Err(PerceptionError::Config(format!(
                "connectivity must be 4 or 8, got {}",
                self.connectivity
            )));
        }
        Ok(())
    }
}

/// `[min(d_positive) - eps_lower, min(d_negative) - eps_upper]` over prompts with valid depth.
pub fn threshold_interval(frame: &RgbdFrame, prompts: &PromptSet, cfg: &ThresholdConfig) -> Option<(f64, f64)> {
    let valid_depth = |&(u, v): &(u32, u32)| frame.is_valid(u, v).then(|| frame.depth_at(u, v));
    let min_pos = prompts
        .positive
        .values()
        .flatten()
        .filter_map(valid_depth)
        .min_by(f64::total_cmp)?;
    let min_neg = prompts.negative.iter().filter_map(valid_depth).min_by(f64::total_cmp)?;
    Some((min_pos - cfg.eps_lower, min_neg - cfg.eps_upper))
}

pub fn depth_threshold_segment(
    frame: &RgbdFrame,
    prompts: &PromptSet,
    cfg: &ThresholdConfig,
) -> Result<SegmentationResult, PerceptionError> {
    cfg.validate()?;
    prompts.check_bounds(frame.width(), frame.height())?;
    let names: Vec<String> = prompts.positive.keys().cloned().collect();
    let Some((lo, hi)) = threshold_interval(frame, prompts, cfg).filter(|(lo, hi)| lo <= hi) else {
        return Ok(SegmentationResult::undetected(&names, frame.width(), frame.height()));
    };

    let (w, h) = (frame.width() as i64, frame.height() as i64);
    let inside = |x: i64, y: i64| {
        if x < 0 || y < 0 || x >= w || y >= h {
            return false;
        }
        let (u, v) = (x as u32, y as u32);
        frame.is_valid(u, v) && (lo..=hi).contains(&frame.depth_at(u, v))
    };
    let neighbors: &[(i64, i64)] = if cfg.connectivity == 4 {
        &[(1, 0), (-1, 0), (0, 1), (0, -1)]
    } else {
        &[(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)]
    };

    // Only components that contain a positive prompt can be claimed, so flood from the seeds.
    let mut label = vec![0u32; (w * h) as usize];
    let mut components: Vec<Vec<usize>> = Vec::new();
    let mut votes: Vec<BTreeMap<&str, usize>> = Vec::new();
    for (name, points) in &prompts.positive {
        for &(u, v) in points {
            let (x, y) = (u as i64, v as i64);
            if !inside(x, y) {
                continue;
            }
            let idx = (y * w + x) as usize;
            if label[idx] == 0 {
                let id = components.len() as u32 + 1;
                let mut pixels = Vec::new();
                let mut queue = VecDeque::from([(x, y)]);
                label[idx] = id;
                while let Some((cx, cy)) = queue.pop_front() {
                    pixels.push((cy * w + cx) as usize);
                    for (dx, dy) in neighbors {
                        let (nx, ny) = (cx + dx, cy + dy);
                        if inside(nx, ny) && label[(ny * w + nx) as usize] == 0 {
                            label[(ny * w + nx) as usize] = id;
                            queue.push_back((nx, ny));
                        }
                    }
                }
                components.push(pixels);
                votes.push(BTreeMap::new());
            }
            *votes[label[idx] as usize - 1].entry(name.as_str()).or_default() += 1;
        }
    }

    let mut result = SegmentationResult::undetected(&names, frame.width(), frame.height());
    for (pixels, tally) in components.iter().zip(&votes) {
        // BTreeMap iteration is in name order, so the first maximum wins ties.
        let mut winner: Option<(&str, usize)> = None;
        for (&name, &count) in tally {
            if winner.is_none_or(|(_, c)| count > c) {
                winner = Some((name, count));
            }
        }
        let Some((name, _)) = winner else { continue };
        let mask = result.masks.get_mut(name).expect("prompt object present");
        for &i in pixels {
            let (x, y) = ((i as i64 % w) as u32, (i as i64 / w) as u32);
            mask.set(x, y, true);
        }
    }
    for (name, mask) in &result.masks {
        result.detected.insert(name.clone(), !mask.is_empty());
    }
    Ok(result)
}

/// Full-image connected-component labelling of a binary mask; 0 is background.
pub fn label_components(mask: &Mask, connectivity: u8) -> (Vec<u32>, u32) {
    let (w, h) = (mask.width() as i64, mask.height() as i64);
    let mut label = vec![0u32; (w * h) as usize];
    let mut next = 0;
    for start in 0..(w * h) {
        let (sx, sy) = (start % w, start / w);
        if !mask.get(sx as u32, sy as u32) || label[start as usize] != 0 {
            continue;
        }
        next += 1;
        label[start as usize] = next;
        let mut queue = VecDeque::from([(sx, sy)]);
        while let Some((cx, cy)) = queue.pop_front() {
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    if (dx == 0 && dy == 0) || (connectivity == 4 && dx != 0 && dy != 0) {
                        continue;
                    }
                    let (nx, ny) = (cx + dx, cy + dy);
                    if nx < 0 || ny < 0 || nx >= w || ny >= h {
                        continue;
                    }
                    let ni = (ny * w + nx) as usize;
                    if mask.get(nx as u32, ny as u32) && label[ni] == 0 {
                        label[ni] = next;
                        queue.push_back((nx, ny));
                    }
                }
            }
        }
    }
    (label, next)
}
