//! Prompted segmentation and 6DoF pose estimation from RGB-D frames.
//!
//! The depth-threshold segmenter and ICP are the real baseline. The
//! foundation-model segmenter, the domain-limited detector and the oracle
//! pose estimator are simulation stand-ins that read ground truth from the
//! world and corrupt it in controlled ways.

pub mod icp;
pub mod threshold;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{UnitQuaternion, Vector2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{back_project, ModelPrior, PointCloud, Pose6, Vec3};
use crate::raster::Mask;
use crate::rng::{self, Substream};
use crate::scene::{EnvironmentKind, ObjectClass, RayCast, RgbdFrame, WorldState};
use crate::twin::{ObjectTwin, SceneRepresentation};

pub use icp::{icp_estimate, icp_estimate_from, kabsch, IcpConfig, IcpInit, IcpResult};
pub use threshold::{depth_threshold_segment, threshold_interval, ThresholdConfig};

/// Fewest valid depth pixels an object mask needs before a pose is attempted.
pub const MIN_CLOUD_POINTS: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerceptionError {
    #[error("invalid perception config: {0}")]
    Config(String),
    #[error("prompt pixel ({u}, {v}) outside the {width}x{height} frame")]
    PromptOutOfBounds { u: u32, v: u32, width: u32, height: u32 },
    #[error("mask has no pixels with valid depth")]
    EmptyCloud,
    #[error("degenerate registration: only {inliers} correspondences survived")]
    DegenerateRegistration { inliers: usize },
    #[error("no model prior `{0}`")]
    UnknownModel(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct PromptSet {
    pub positive: BTreeMap<String, Vec<(u32, u32)>>,
    pub negative: Vec<(u32, u32)>,
}

impl PromptSet {
    pub fn check_bounds(&self, width: u32, height: u32) -> Result<(), PerceptionError> {
        for &(u, v) in self.positive.values().flatten().chain(&self.negative) {
            if u >= width || v >= height {
                return Err(PerceptionError::PromptOutOfBounds { u, v, width, height });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SegmentationResult {
    pub masks: BTreeMap<String, Mask>,
    pub detected: BTreeMap<String, bool>,
}

impl SegmentationResult {
    pub fn undetected(names: &[String], width: u32, height: u32) -> Self {
        Self {
            masks: names.iter().map(|n| (n.clone(), Mask::new(width, height))).collect(),
            detected: names.iter().map(|n| (n.clone(), false)).collect(),
        }
    }

    pub fn is_detected(&self, name: &str) -> bool {
        self.detected.get(name).copied().unwrap_or(false)
    }

    fn set(&mut self, name: &str, mask: Mask) {
        self.detected.insert(name.to_string(), !mask.is_empty());
        self.masks.insert(name.to_string(), mask);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct Corruption {
    pub boundary_erode_px: u32,
    pub miss_prob: f64,
    /// Keep only a random fraction in this range of each mask, cut along a random direction.
    pub partial_keep: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TrainedClass {
    pub class: ObjectClass,
    pub color: String,
    pub environment: EnvironmentKind,
}

impl TrainedClass {
    pub fn new(class: ObjectClass, color: &str, environment: EnvironmentKind) -> Self {
        Self {
            class,
            color: color.to_string(),
            environment,
        }
    }
}

/// Peg-transfer training set: grey and blue blocks and steel pegs in the ideal scene.
pub fn default_training_set() -> Vec<TrainedClass> {
    vec![
        TrainedClass::new(ObjectClass::Block, "grey", EnvironmentKind::Ideal),
        TrainedClass::new(ObjectClass::Block, "blue", EnvironmentKind::Ideal),
        TrainedClass::new(ObjectClass::Peg, "steel", EnvironmentKind::Ideal),
    ]
}

fn default_trained() -> Vec<TrainedClass> {
    default_training_set()
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Segmenter {
    DepthThreshold(#[serde(default)] ThresholdConfig),
    OracleFoundation(#[serde(default)] Corruption),
    DomainLimited {
        #[serde(default = "default_trained")]
        trained: Vec<TrainedClass>,
        #[serde(default = "one")]
        erode_px: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PoseEstimator {
    Icp(#[serde(default)] IcpConfig),
    OraclePose {
        #[serde(default)]
        sigma_t: f64,
        #[serde(default)]
        sigma_r_deg: f64,
        /// Constant camera-frame translation offset, for sensitivity studies.
        #[serde(default)]
        bias: [f64; 3],
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerceptionPipeline {
    pub segmenter: Segmenter,
    pub pose_estimator: PoseEstimator,
}

impl PerceptionPipeline {
    pub fn oracle() -> Self {
        Self {
            segmenter: Segmenter::OracleFoundation(Corruption::default()),
            pose_estimator: PoseEstimator::OraclePose {
                sigma_t: 0.0,
                sigma_r_deg: 0.0,
                bias: [0.0; 3],
            },
        }
    }

    pub fn depth_threshold_icp() -> Self {
        Self {
            segmenter: Segmenter::DepthThreshold(ThresholdConfig::default()),
            pose_estimator: PoseEstimator::Icp(IcpConfig::default()),
        }
    }

    pub fn validate(&self) -> Result<(), PerceptionError> {
        match &self.segmenter {
            Segmenter::DepthThreshold(cfg) => cfg.validate()?,
            Segmenter::OracleFoundation(c) => {
                if !(0.0..=1.0).contains(&c.miss_prob) {
                    return Err(PerceptionError::Config("miss_prob outside [0, 1]".into()));
                }
                if let Some([a, b]) = c.partial_keep {
                    if !(0.0 < a && a <= b && b <= 1.0) {
                        return Err(PerceptionError::Config("partial_keep must satisfy 0 < lo <= hi <= 1".into()));
                    }
                }
            }
            Segmenter::DomainLimited { .. } => {}
        }
        match &self.pose_estimator {
            PoseEstimator::Icp(cfg) => cfg.validate()?,
            PoseEstimator::OraclePose { sigma_t, sigma_r_deg, bias } => {
                if !(*sigma_t >= 0.0 && *sigma_r_deg >= 0.0 && bias.iter().all(|b| b.is_finite())) {
                    return Err(PerceptionError::Config("oracle pose noise must be >= 0".into()));
                }
            }
        }
        Ok(())
    }
}

/// Ground-truth access for the simulation-only stand-ins.
#[derive(Clone, Copy)]
pub struct WorldHandle<'a> {
    pub world: &'a WorldState,
    pub cast: &'a RayCast,
}

pub fn oracle_foundation_segment(
    prompts: &PromptSet,
    handle: WorldHandle<'_>,
    corruption: &Corruption,
    seed: u64,
    frame_id: u64,
) -> SegmentationResult {
    let mut rng = rng::indexed_stream(seed, Substream::SegmentationCorruption, frame_id);
    let mut out = SegmentationResult::default();
    for name in prompts.positive.keys() {
        let miss = rng.random::<f64>();
        let keep = rng.random::<f64>();
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let mut mask = handle.cast.mask_of(name);
        if corruption.boundary_erode_px > 0 {
            mask = mask.eroded(corruption.boundary_erode_px);
        }
        if let Some([lo, hi]) = corruption.partial_keep {
            mask = keep_partial(&mask, lo + keep * (hi - lo), Vector2::new(angle.cos(), angle.sin()));
        }
        if miss < corruption.miss_prob {
            mask = Mask::new(mask.width(), mask.height());
        }
        out.set(name, mask);
    }
    out
}

/// Keeps the `fraction` of mask pixels with the lowest projection onto `dir`.
pub fn keep_partial(mask: &Mask, fraction: f64, dir: Vector2<f64>) -> Mask {
    let mut pixels: Vec<(f64, u32, u32)> = mask
        .pixels()
        .map(|(x, y)| (x as f64 * dir.x + y as f64 * dir.y, x, y))
        .collect();
    pixels.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.2, a.1).cmp(&(b.2, b.1))));
    let keep = (fraction * pixels.len() as f64).ceil() as usize;
    let mut out = Mask::new(mask.width(), mask.height());
    for &(_, x, y) in pixels.iter().take(keep) {
        out.set(x, y, true);
    }
    out
}

pub fn domain_limited_segment(
    prompts: &PromptSet,
    handle: WorldHandle<'_>,
    trained: &[TrainedClass],
    erode_px: u32,
) -> SegmentationResult {
    let env = handle.world.config.environment;
    let mut out = SegmentationResult::default();
    for name in prompts.positive.keys() {
        let in_domain = handle.world.entity(name).is_ok_and(|e| {
            trained
                .iter()
                .any(|t| t.class == e.class && t.color == e.color && t.environment == env)
        });
        let mask = if in_domain {
            handle.cast.mask_of(name).eroded(erode_px)
        } else {
            Mask::new(handle.cast.width, handle.cast.height)
        };
        out.set(name, mask);
    }
    out
}

pub fn segment(
    frame: &RgbdFrame,
    prompts: &PromptSet,
    segmenter: &Segmenter,
    handle: WorldHandle<'_>,
    seed: u64,
) -> Result<SegmentationResult, PerceptionError> {
    prompts.check_bounds(frame.width(), frame.height())?;
    Ok(match segmenter {
        Segmenter::DepthThreshold(cfg) => depth_threshold_segment(frame, prompts, cfg)?,
        Segmenter::OracleFoundation(c) => oracle_foundation_segment(prompts, handle, c, seed, frame.frame_id),
        Segmenter::DomainLimited { trained, erode_px } => domain_limited_segment(prompts, handle, trained, *erode_px),
    })
}

/// One camera-frame point per masked pixel with valid depth.
pub fn mask_to_cloud(frame: &RgbdFrame, mask: &Mask) -> Result<PointCloud, PerceptionError> {
    let points: Vec<Vec3> = mask
        .pixels()
        .filter(|&(u, v)| frame.is_valid(u, v))
        .filter_map(|(u, v)| back_project(&Vector2::new(u as f64, v as f64), frame.depth_at(u, v), &frame.intrinsics).ok())
        .collect();
    if points.is_empty() {
        return Err(PerceptionError::EmptyCloud);
    }
    Ok(PointCloud::new(points))
}

/// Ground-truth camera-frame pose with zero-mean Gaussian translation and rotation-vector noise.
pub fn oracle_pose_estimate(truth: &Pose6, sigma_t: f64, sigma_r_deg: f64, rng: &mut impl Rng) -> Pose6 {
    let nt = Normal::new(0.0, sigma_t.max(0.0)).expect("finite sigma");
    let nr = Normal::new(0.0, sigma_r_deg.max(0.0).to_radians()).expect("finite sigma");
    let dt = Vec3::new(nt.sample(rng), nt.sample(rng), nt.sample(rng));
    let dr = Vec3::new(nr.sample(rng), nr.sample(rng), nr.sample(rng));
    let rot = UnitQuaternion::from_scaled_axis(dr) * truth.rotation();
    Pose6::from_parts(rot, truth.translation() + dt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectPerception {
    pub detected: bool,
    pub reason: Option<String>,
    pub cloud_points: usize,
    pub icp_rms: Option<f64>,
    pub icp_iterations: Option<usize>,
    pub icp_converged: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Perception {
    pub scene: SceneRepresentation,
    pub segmentation: SegmentationResult,
    pub objects: BTreeMap<String, ObjectPerception>,
    pub clouds: BTreeMap<String, PointCloud>,
}

impl Perception {
    pub fn is_detected(&self, name: &str) -> bool {
        self.objects.get(name).is_some_and(|o| o.detected)
    }
}

/// Segments, back-projects and estimates a pose for every prompted object.
///
/// Component failures turn into `detected = false` for the affected object; the frame is never aborted.
pub fn perceive(
    frame: &RgbdFrame,
    prompts: &PromptSet,
    pipeline: &PerceptionPipeline,
    handle: WorldHandle<'_>,
    models: &BTreeMap<String, ModelPrior>,
    seed: u64,
    timestamp: f64,
) -> Result<Perception, PerceptionError> {
    pipeline.validate()?;
    let segmentation = segment(frame, prompts, &pipeline.segmenter, handle, seed)?;
    let mut pose_rng = rng::indexed_stream(seed, Substream::PoseNoise, frame.frame_id);

    let mut twins = Vec::new();
    let mut objects = BTreeMap::new();
    let mut clouds = BTreeMap::new();
    for (name, mask) in &segmentation.masks {
        let entity = handle.world.entity(name).ok();
        let (label, model_id) = match &entity {
            Some(e) => (e.class.label().to_string(), e.model_id.clone()),
            None => (name.split('_').next().unwrap_or(name).to_string(), String::new()),
        };
        let mut info = ObjectPerception {
            detected: false,
            reason: None,
            cloud_points: 0,
            icp_rms: None,
            icp_iterations: None,
            icp_converged: None,
        };
        // keep the noise stream aligned regardless of which objects get detected
        let noisy_truth = entity.as_ref().map(|e| {
            let truth = handle.world.pose_in_camera(&e.pose_world);
            match pipeline.pose_estimator {
                PoseEstimator::OraclePose { sigma_t, sigma_r_deg, bias } => {
                    let p = oracle_pose_estimate(&truth, sigma_t, sigma_r_deg, &mut pose_rng);
                    p.with_translation(p.translation() + Vec3::from(bias))
                }
                PoseEstimator::Icp(_) => truth,
            }
        });

        let pose = if !segmentation.is_detected(name) {
            info.reason = Some("not segmented".into());
            None
        } else {
            match mask_to_cloud(frame, mask) {
                Err(e) => {
                    info.reason = Some(e.to_string());
                    None
                }
                Ok(cloud) if cloud.len() < MIN_CLOUD_POINTS => {
                    info.reason = Some(format!("only {} valid depth pixels", cloud.len()));
                    None
                }
                Ok(cloud) => {
                    info.cloud_points = cloud.len();
                    let pose = match &pipeline.pose_estimator {
                        PoseEstimator::OraclePose { .. } => noisy_truth,
                        PoseEstimator::Icp(cfg) => match models.get(&model_id) {
                            None => {
                                info.reason = Some(PerceptionError::UnknownModel(model_id.clone()).to_string());
                                None
                            }
                            Some(model) => match icp_estimate(&cloud, model, cfg) {
                                Ok(r) => {
                                    info.icp_rms = Some(r.rms_residual);
                                    info.icp_iterations = Some(r.iterations);
                                    info.icp_converged = Some(r.converged);
                                    Some(r.pose)
                                }
                                Err(e) => {
                                    info.reason = Some(e.to_string());
                                    None
                                }
                            },
                        },
                    };
                    clouds.insert(name.clone(), cloud);
                    pose
                }
            }
        };
        info.detected = pose.is_some();
        twins.push(ObjectTwin {
            object_id: 0,
            label,
            name: name.clone(),
            model_id,
            pose,
            detected: info.detected,
            stale: false,
            frame_id: frame.frame_id,
            mask: if info.detected { mask.clone() } else { Mask::default() },
        });
        objects.insert(name.clone(), info);
    }
    twins.sort_by(|a, b| (&a.label, &a.name).cmp(&(&b.label, &b.name)));
    for (i, t) in twins.iter_mut().enumerate() {
        t.object_id = i as u32 + 1;
    }
    Ok(Perception {
        scene: SceneRepresentation {
            twins,
            frame_id: frame.frame_id,
            timestamp,
        },
        segmentation,
        objects,
        clouds,
    })
}

/// Writes `mask_<name>.png` and `cloud_<name>.xyz` for every object.
pub fn dump_debug(dir: &Path, perception: &Perception) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    for (name, mask) in &perception.segmentation.masks {
        let img = image::GrayImage::from_fn(mask.width(), mask.height(), |x, y| {
            image::Luma([if mask.get(x, y) { 255 } else { 0 }])
        });
        img.save(dir.join(format!("mask_{name}.png"))).map_err(std::io::Error::other)?;
    }
    for (name, cloud) in &perception.clouds {
        let mut f = std::io::BufWriter::new(fs::File::create(dir.join(format!("cloud_{name}.xyz")))?);
        for p in &cloud.points {
            writeln!(f, "{} {} {}", p.x, p.y, p.z)?;
        }
    }
    Ok(())
}
