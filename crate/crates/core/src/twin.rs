//! Versioned digital-twin scene representation with cross-frame identity.

use std::fmt::Write as _;

use nalgebra::Quaternion;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Pose6, Vec3};
use crate::raster::Mask;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TwinError {
    #[error("stale update: frame {got} is not newer than stored frame {stored}")]
    StaleFrame { got: u64, stored: u64 },
    #[error("no twin with id {0}")]
    NotFound(u32),
    #[error("cannot parse scene document line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectTwin {
    pub object_id: u32,
    pub label: String,
    /// Instance name, e.g. `block_grey` or `peg_7`.
    pub name: String,
    pub model_id: String,
    /// Camera-frame pose; for a stale twin this is the last observed pose.
    pub pose: Option<Pose6>,
    pub detected: bool,
    pub stale: bool,
    pub frame_id: u64,
    #[serde(skip)]
    pub mask: Mask,
}

impl ObjectTwin {
    pub fn position_mm(&self) -> Option<Vec3> {
        self.pose.map(|p| p.translation() * 1000.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SceneRepresentation {
    pub twins: Vec<ObjectTwin>,
    pub frame_id: u64,
    /// Simulated seconds.
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Selector {
    ById(u32),
    ByLabel(String),
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinStore {
    twins: Vec<ObjectTwin>,
    frame_id: Option<u64>,
    timestamp: f64,
    next_id: u32,
    association_radius: f64,
}

impl Default for TwinStore {
    fn default() -> Self {
        Self::new(0.02)
    }
}

impl TwinStore {
    pub fn new(association_radius: f64) -> Self {
        Self {
            twins: Vec::new(),
            frame_id: None,
            timestamp: 0.0,
            next_id: 1,
            association_radius,
        }
    }

    pub fn frame_id(&self) -> Option<u64> {
        self.frame_id
    }

    pub fn timestamp(&self) -> f64 {
        self.timestamp
    }

    pub fn snapshot(&self) -> SceneRepresentation {
        SceneRepresentation {
            twins: self.twins.clone(),
            frame_id: self.frame_id.unwrap_or(0),
            timestamp: self.timestamp,
        }
    }

    /// Replaces the twins with a newer perception result, keeping IDs of associated objects.
    pub fn update(&mut self, perceived: &SceneRepresentation) -> Result<(), TwinError> {
        if let Some(stored) = self.frame_id {
            if perceived.frame_id <= stored {
                return Err(TwinError::StaleFrame {
                    got: perceived.frame_id,
                    stored,
                });
            }
        }
        let mut incoming: Vec<&ObjectTwin> = perceived.twins.iter().collect();
        incoming.sort_by(|a, b| (&a.label, &a.name).cmp(&(&b.label, &b.name)));

        let mut claimed = vec![false; self.twins.len()];
        let mut next: Vec<ObjectTwin> = Vec::with_capacity(incoming.len());
        for obs in incoming {
            let matched = match obs.pose.filter(|_| obs.detected) {
                Some(pose) => self.nearest_unclaimed(&obs.label, &pose, &claimed),
                None => self
                    .twins
                    .iter()
                    .enumerate()
                    .position(|(i, t)| !claimed[i] && t.label == obs.label && t.name == obs.name),
            };
            let mut twin = obs.clone();
            twin.frame_id = perceived.frame_id;
            match matched {
                Some(i) => {
                    claimed[i] = true;
                    twin.object_id = self.twins[i].object_id;
                    if !twin.detected {
                        twin.pose = self.twins[i].pose;
                    }
                }
                None => {
                    twin.object_id = self.next_id;
                    self.next_id += 1;
                }
            }
            twin.stale = !twin.detected;
            next.push(twin);
        }
        for (i, old) in self.twins.iter().enumerate() {
            if !claimed[i] && !next.iter().any(|t| t.object_id == old.object_id) {
                let mut kept = old.clone();
                kept.detected = false;
                kept.stale = true;
                kept.mask = Mask::default();
                next.push(kept);
            }
        }
        next.sort_by_key(|t| t.object_id);
        self.twins = next;
        self.frame_id = Some(perceived.frame_id);
        self.timestamp = perceived.timestamp;
        Ok(())
    }

    fn nearest_unclaimed(&self, label: &str, pose: &Pose6, claimed: &[bool]) -> Option<usize> {
        self.twins
            .iter()
            .enumerate()
            .filter(|(i, t)| !claimed[*i] && t.label == label)
            .filter_map(|(i, t)| t.pose.map(|p| (i, (p.translation() - pose.translation()).norm())))
            .filter(|&(_, d)| d <= self.association_radius)
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
    }

    pub fn query(&self, selector: &Selector) -> Result<Vec<ObjectTwin>, TwinError> {
        match selector {
            Selector::All => Ok(self.twins.clone()),
            Selector::ByLabel(label) => Ok(self.twins.iter().filter(|t| &t.label == label).cloned().collect()),
            Selector::ById(id) => self
                .twins
                .iter()
                .find(|t| t.object_id == *id)
                .cloned()
                .map(|t| vec![t])
                .ok_or(TwinError::NotFound(*id)),
        }
    }

    pub fn get(&self, id: u32) -> Option<&ObjectTwin> {
        self.twins.iter().find(|t| t.object_id == id)
    }

    pub fn by_name(&self, name: &str) -> Option<&ObjectTwin> {
        self.twins.iter().find(|t| t.name == name)
    }

    pub fn serialize(&self) -> String {
        serialize_scene(&self.snapshot())
    }
}

/// Human-readable scene listing; positions in millimeters, camera frame.
pub fn serialize_scene(scene: &SceneRepresentation) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "scene frame={} timestamp={:?} objects={}",
        scene.frame_id,
        scene.timestamp,
        scene.twins.len()
    );
    for t in &scene.twins {
        let _ = write!(
            out,
            "- id={} label={} name={} model={} detected={} stale={}",
            t.object_id, t.label, t.name, t.model_id, t.detected, t.stale
        );
        match t.pose {
            Some(p) => {
                let t = p.translation();
                let q = p.quaternion_wxyz();
                let _ = writeln!(
                    out,
                    " position=({}, {}, {}) mm rotation=[{:?}, {:?}, {:?}, {:?}]",
                    meters_as_mm(t.x),
                    meters_as_mm(t.y),
                    meters_as_mm(t.z),
                    q[0],
                    q[1],
                    q[2],
                    q[3]
                );
            }
            None => {
                let _ = writeln!(out, " position=none");
            }
        }
    }
    out
}

/// Inverse of [`serialize_scene`]; masks are not part of the document.
pub fn parse_scene(text: &str) -> Result<SceneRepresentation, TwinError> {
    let err = |line: usize, reason: &str| TwinError::Parse {
        line: line + 1,
        reason: reason.to_string(),
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| err(0, "empty document"))?;
    let fields = key_values(header.strip_prefix("scene ").ok_or_else(|| err(0, "missing scene header"))?);
    let field = |name: &str, line: usize| -> Result<&str, TwinError> {
        fields
            .iter()
            .find(|(k, _)| *k == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| err(line, &format!("missing `{name}`")))
    };
    let frame_id = field("frame", 0)?.parse().map_err(|_| err(0, "bad frame"))?;
    let timestamp = field("timestamp", 0)?.parse().map_err(|_| err(0, "bad timestamp"))?;
    let count: usize = field("objects", 0)?.parse().map_err(|_| err(0, "bad object count"))?;

    let mut twins = Vec::new();
    for (n, line) in lines {
        let body = line.strip_prefix("- ").ok_or_else(|| err(n, "expected `- ` item"))?;
        let (head, pose_part) = body.split_once(" position=").ok_or_else(|| err(n, "missing position"))?;
        let kv = key_values(head);
        let get = |k: &str| {
            kv.iter()
                .find(|(key, _)| *key == k)
                .map(|(_, v)| v.to_string())
                .ok_or_else(|| err(n, &format!("missing `{k}`")))
        };
        let pose = if pose_part == "none" {
            None
        } else {
            let (pos, rot) = pose_part.split_once(" mm rotation=").ok_or_else(|| err(n, "bad pose"))?;
            let p = parse_mm_list(pos).ok_or_else(|| err(n, "bad position"))?;
            let q = parse_list(rot, '[', ']').ok_or_else(|| err(n, "bad rotation"))?;
            if p.len() != 3 || q.len() != 4 {
                return Err(err(n, "wrong pose arity"));
            }
            Some(Pose6::from_unit_quaternion(
                Quaternion::new(q[0], q[1], q[2], q[3]),
                Vec3::new(p[0], p[1], p[2]),
            ))
        };
        twins.push(ObjectTwin {
            object_id: get("id")?.parse().map_err(|_| err(n, "bad id"))?,
            label: get("label")?,
            name: get("name")?,
            model_id: get("model")?,
            pose,
            detected: get("detected")?.parse().map_err(|_| err(n, "bad detected flag"))?,
            stale: get("stale")?.parse().map_err(|_| err(n, "bad stale flag"))?,
            frame_id,
            mask: Mask::default(),
        });
    }
    if twins.len() != count {
        return Err(err(0, "object count does not match"));
    }
    Ok(SceneRepresentation {
        twins,
        frame_id,
        timestamp,
    })
}

fn key_values(s: &str) -> Vec<(&str, &str)> {
    s.split_whitespace().filter_map(|kv| kv.split_once('=')).collect()
}

/// Shortest round-trip digits of `m`, with the decimal point moved three places, so
/// that reading the text back as `<mm>e-3` recovers `m` exactly.
fn meters_as_mm(m: f64) -> String {
    let sci = format!("{m:e}");
    let (mantissa, exp) = sci.split_once('e').expect("LowerExp always has an exponent");
    let exp: i32 = exp.parse().expect("LowerExp exponent is an integer");
    let (sign, mantissa) = match mantissa.strip_prefix('-') {
        Some(rest) => ("-", rest),
        None => ("", mantissa),
    };
    let digits: String = mantissa.chars().filter(|c| *c != '.').collect();
    // value = 0.d1d2d3... * 10^point
    let point = exp + 3 + 1;
    let (int, frac) = if point <= 0 {
        ("0".to_string(), format!("{}{}", "0".repeat((-point) as usize), digits))
    } else if point as usize >= digits.len() {
        (format!("{}{}", digits, "0".repeat(point as usize - digits.len())), String::new())
    } else {
        (digits[..point as usize].to_string(), digits[point as usize..].to_string())
    };
    let int = int.trim_start_matches('0');
    let frac = frac.trim_end_matches('0');
    format!("{sign}{}.{}", if int.is_empty() { "0" } else { int }, if frac.is_empty() { "0" } else { frac })
}

fn parse_mm_list(s: &str) -> Option<Vec<f64>> {
    s.trim()
        .strip_prefix('(')?
        .strip_suffix(')')?
        .split(',')
        .map(|x| format!("{}e-3", x.trim()).parse().ok())
        .collect()
}

fn parse_list(s: &str, open: char, close: char) -> Option<Vec<f64>> {
    s.trim()
        .strip_prefix(open)?
        .strip_suffix(close)?
        .split(',')
        .map(|x| x.trim().parse().ok())
        .collect()
}
