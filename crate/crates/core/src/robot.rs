//! Kinematic stand-in for the surgical arm: tooltip position, jaw, hand-eye calibration.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{ModelPrior, Pose6, Vec3};
use crate::perception::oracle_pose_estimate;
use crate::scene::{step_world, SceneError, StepOutcome, WorldEvent, WorldState};
use crate::twin::ObjectTwin;

/// Length of one supervisor position adjustment.
pub const ADJUST_STEP: f64 = 0.003;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RobotError {
    #[error("target `{0}` is not detected")]
    Undetected(String),
    #[error("target `{0}` has no model prior")]
    UnknownModel(String),
    #[error("place reach requires a held object")]
    NothingHeld,
    #[error("target behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Up,
    Down,
    Left,
    Right,
    Forward,
    Back,
}

impl Direction {
    pub const ALL: [Direction; 6] = [
        Direction::Up,
        Direction::Down,
        Direction::Left,
        Direction::Right,
        Direction::Forward,
        Direction::Back,
    ];

    /// Unit vector in the camera frame: right = +x, down = +y, forward = +z.
    pub fn camera_axis(&self) -> Vec3 {
        match self {
            Direction::Right => Vec3::x(),
            Direction::Left => -Vec3::x(),
            Direction::Down => Vec3::y(),
            Direction::Up => -Vec3::y(),
            Direction::Forward => Vec3::z(),
            Direction::Back => -Vec3::z(),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Direction::Up => "up",
            Direction::Down => "down",
            Direction::Left => "left",
            Direction::Right => "right",
            Direction::Forward => "forward",
            Direction::Back => "back",
        }
    }

    pub fn opposite(&self) -> Direction {
        match self {
            Direction::Up => Direction::Down,
            Direction::Down => Direction::Up,
            Direction::Left => Direction::Right,
            Direction::Right => Direction::Left,
            Direction::Forward => Direction::Back,
            Direction::Back => Direction::Forward,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Direction::ALL
            .into_iter()
            .find(|d| d.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown direction `{s}`; expected one of up, down, left, right, forward, back"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Jaw {
    Open,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    /// Tooltip pose in the robot base frame.
    pub tooltip: Pose6,
    pub jaw: Jaw,
    pub held_object: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct CalibrationNoise {
    pub sigma_t: f64,
    pub sigma_r_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HandEyeCalibration {
    pub base_from_camera: Pose6,
    pub injected_error: CalibrationNoise,
}

impl Default for HandEyeCalibration {
    fn default() -> Self {
        Self {
            base_from_camera: Pose6::from_axis_angle(
                Vec3::z(),
                std::f64::consts::FRAC_PI_2,
                Vec3::new(0.12, -0.25, 0.50),
            )
            .compose(&Pose6::from_axis_angle(Vec3::x(), std::f64::consts::PI, Vec3::zeros())),
            injected_error: CalibrationNoise::default(),
        }
    }
}

impl HandEyeCalibration {
    pub fn exact(base_from_camera: Pose6) -> Self {
        Self {
            base_from_camera,
            injected_error: CalibrationNoise::default(),
        }
    }

    /// The calibration the controller believes in: truth perturbed once per trial.
    pub fn sample_believed(&self, rng: &mut impl Rng) -> Pose6 {
        let e = self.injected_error;
        if e.sigma_t == 0.0 && e.sigma_r_deg == 0.0 {
            return self.base_from_camera;
        }
        oracle_pose_estimate(&self.base_from_camera, e.sigma_t, e.sigma_r_deg, rng)
    }
}

pub fn camera_to_base(pose_cam: &Pose6, base_from_camera: &Pose6) -> Pose6 {
    base_from_camera.compose(pose_cam)
}

pub fn base_to_camera(pose_base: &Pose6, base_from_camera: &Pose6) -> Pose6 {
    base_from_camera.inverse().compose(pose_base)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionConfig {
    pub waypoint_spacing: f64,
    pub execution_noise_sigma: f64,
    pub approach_height: f64,
    /// Gap between the held object's bottom and the peg top when placing.
    pub place_clearance: f64,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self {
            waypoint_spacing: 0.005,
            execution_noise_sigma: 0.0002,
            approach_height: 0.015,
            place_clearance: 0.001,
        }
    }
}

impl MotionConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.waypoint_spacing > 0.0) {
            return Err("waypoint_spacing must be positive".into());
        }
        if !(self.execution_noise_sigma >= 0.0 && self.approach_height >= 0.0 && self.place_clearance >= 0.0) {
            return Err("motion noise, approach height and clearance must be >= 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReachMode {
    Pick,
    Place,
}

/// Straight-line waypoints from `start` to `end`, spacing at most `spacing`, `end` included.
pub fn interpolate(start: &Vec3, end: &Vec3, spacing: f64) -> Vec<Vec3> {
    let dist = (end - start).norm();
    let n = ((dist / spacing).ceil() as usize).max(1);
    (1..=n).map(|i| start + (end - start) * (i as f64 / n as f64)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotCommand {
    pub command: String,
    /// Commanded camera-frame position, meters.
    pub target: Option<Vec3>,
    /// Tooltip position actually reached, camera frame (true calibration).
    pub executed: Vec3,
    pub waypoints: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "jaw_outcome", rename_all = "snake_case")]
pub enum JawOutcome {
    World(StepOutcome),
    AlreadyClosed,
    AlreadyOpen,
}

/// One arm: owns its state, its execution-noise stream and a command log.
#[derive(Debug, Clone)]
pub struct Robot {
    pub state: RobotState,
    pub calibration: HandEyeCalibration,
    believed: Pose6,
    pub motion: MotionConfig,
    rng: ChaCha8Rng,
    pub log: Vec<RobotCommand>,
}

impl Robot {
    /// Starts with the tooltip at `home_cam` (camera frame), jaw open.
    pub fn new(calibration: HandEyeCalibration, motion: MotionConfig, mut rng: ChaCha8Rng, home_cam: Vec3) -> Self {
        let believed = calibration.sample_believed(&mut rng);
        let tooltip = camera_to_base(&Pose6::from_translation(home_cam), &calibration.base_from_camera);
        Self {
            state: RobotState {
                tooltip,
                jaw: Jaw::Open,
                held_object: None,
            },
            calibration,
            believed,
            motion,
            rng,
            log: Vec::new(),
        }
    }

    /// True tooltip position in the camera frame.
    pub fn tooltip_camera(&self) -> Vec3 {
        *base_to_camera(&self.state.tooltip, &self.calibration.base_from_camera).translation()
    }

    pub fn tooltip_world(&self, world: &WorldState) -> Vec3 {
        world.camera_to_world(&self.tooltip_camera())
    }

    fn record(&mut self, command: &str, target: Option<Vec3>, waypoints: usize) {
        let executed = self.tooltip_camera();
        self.log.push(RobotCommand {
            command: command.to_string(),
            target,
            executed,
            waypoints,
        });
    }

    /// Linear move to a camera-frame target; the held object follows every waypoint.
    pub fn move_cartesian(&mut self, world: &WorldState, target_cam: &Vec3) -> Result<(WorldState, Vec<Pose6>), RobotError> {
        if target_cam.z <= 0.0 {
            return Err(RobotError::BehindCamera(target_cam.z));
        }
        let commanded = camera_to_base(&Pose6::from_translation(*target_cam), &self.believed);
        let sigma = self.motion.execution_noise_sigma;
        let noise = if sigma > 0.0 {
            let n = Normal::new(0.0, sigma).expect("validated sigma");
            Vec3::new(n.sample(&mut self.rng), n.sample(&mut self.rng), n.sample(&mut self.rng))
        } else {
            Vec3::zeros()
        };
        let start = *self.state.tooltip.translation();
        let end = commanded.translation() + noise;
        let mut world = world.clone();
        let mut waypoints = Vec::new();
        for p in interpolate(&start, &end, self.motion.waypoint_spacing) {
            let pose = self.state.tooltip.with_translation(p);
            self.state.tooltip = pose;
            if self.state.held_object.is_some() {
                world = world.track_tooltip(&self.tooltip_world(&world));
            }
            waypoints.push(pose);
        }
        if start == end {
            waypoints = vec![self.state.tooltip];
        }
        self.record("move_cartesian", Some(*target_cam), waypoints.len());
        Ok((world, waypoints))
    }

    /// Moves the tooltip 3 mm along a camera axis; orientation is unchanged.
    pub fn adjust_tooltip(&mut self, world: &WorldState, direction: Direction) -> WorldState {
        let delta_base = self.believed.transform_vector(&(direction.camera_axis() * ADJUST_STEP));
        let t = self.state.tooltip;
        self.state.tooltip = t.with_translation(t.translation() + delta_base);
        let world = if self.state.held_object.is_some() {
            world.track_tooltip(&self.tooltip_world(world))
        } else {
            world.clone()
        };
        let target = self.tooltip_camera();
        self.record(&format!("adjust_{direction}"), Some(target), 1);
        world
    }

    pub fn set_jaw(&mut self, world: &WorldState, jaw: Jaw) -> Result<(WorldState, JawOutcome), RobotError> {
        let tip = self.tooltip_world(world);
        let result = match (self.state.jaw, jaw) {
            (Jaw::Closed, Jaw::Closed) => (world.clone(), JawOutcome::AlreadyClosed),
            (Jaw::Open, Jaw::Open) => (world.clone(), JawOutcome::AlreadyOpen),
            (Jaw::Open, Jaw::Closed) => {
                self.state.jaw = Jaw::Closed;
                let (next, outcome) = step_world(world, WorldEvent::Grasp { tooltip: tip })?;
                if let StepOutcome::Grasped { object, .. } = &outcome {
                    self.state.held_object = Some(object.clone());
                }
                (next, JawOutcome::World(outcome))
            }
            (Jaw::Closed, Jaw::Open) => {
                self.state.jaw = Jaw::Open;
                self.state.held_object = None;
                let (next, outcome) = step_world(world, WorldEvent::Release { tooltip: tip })?;
                (next, JawOutcome::World(outcome))
            }
        };
        self.record(if jaw == Jaw::Closed { "close_jaw" } else { "open_jaw" }, None, 0);
        Ok(result)
    }

    /// Hover at the approach height along `up`, then descend onto the target.
    pub fn two_stage_reach(&mut self, world: &WorldState, target: &ReachTarget) -> Result<WorldState, RobotError> {
        let hover = target.position + target.up * self.motion.approach_height;
        let (world, _) = self.move_cartesian(world, &hover)?;
        let (world, _) = self.move_cartesian(&world, &target.position)?;
        Ok(world)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReachTarget {
    /// Camera-frame tooltip target.
    pub position: Vec3,
    /// Unit approach direction (away from the supporting surface), camera frame.
    pub up: Vec3,
}

fn model_up(pose: &Pose6) -> Vec3 {
    pose.transform_vector(&Vec3::new(0.0, 0.0, -1.0))
}

/// Tooltip target for reaching a twin.
///
/// Pick: the object's grasp point. Place: above the target's place point by the held
/// object's height plus clearance, along the target's up axis.
pub fn reach_pose(
    twin: &ObjectTwin,
    mode: ReachMode,
    target_model: &ModelPrior,
    held_model: Option<&ModelPrior>,
    motion: &MotionConfig,
) -> Result<ReachTarget, RobotError> {
    let pose = match (twin.detected, twin.pose) {
        (true, Some(p)) => p,
        _ => return Err(RobotError::Undetected(twin.name.clone())),
    };
    let up = model_up(&pose);
    match mode {
        ReachMode::Pick => Ok(ReachTarget {
            position: pose.transform_point(&target_model.grasp_point),
            up,
        }),
        ReachMode::Place => {
            let held = held_model.ok_or(RobotError::NothingHeld)?;
            let top = pose.transform_point(&target_model.place_point.unwrap_or(target_model.grasp_point));
            let height = held
                .place_point
                .map(|p| (p - held.grasp_point).norm())
                .unwrap_or(0.0);
            Ok(ReachTarget {
                position: top + up * (height + motion.place_clearance),
                up,
            })
        }
    }
}
