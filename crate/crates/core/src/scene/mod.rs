//! Ground-truth world model for the bench-top tasks.
//!
//! World frame: origin at the center of the pegboard top surface (or the
//! table top for the gauze task), +z pointing up towards the camera. The
//! camera looks straight down, so its +x axis coincides with world +x.
//!
//! Every object's model frame has its origin at the shape center and its
//! +z axis pointing down into the supporting surface, so an upright object
//! seen by the untilted camera has identity rotation in the camera frame.

pub mod export;
pub mod render;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{project, CameraIntrinsics, ModelPrior, Pose6, Vec3};
use crate::perception::PromptSet;
use crate::raster::Mask;
use crate::rng::{self, Substream};

pub use render::{raycast, render_frame, RayCast, RgbdFrame};

pub const PEG_COUNT: usize = 12;
const PEG_COLUMNS: usize = 4;
const PEG_ROWS: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("invalid environment config: {0}")]
    Config(String),
    #[error("unknown object `{0}`")]
    UnknownObject(String),
    #[error("protocol error: {0}")]
    Protocol(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvironmentKind {
    Ideal,
    BlackRedBlock,
    TiltedPegboard,
    Gauze,
}

impl EnvironmentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EnvironmentKind::Ideal => "ideal",
            EnvironmentKind::BlackRedBlock => "black_red_block",
            EnvironmentKind::TiltedPegboard => "tilted_pegboard",
            EnvironmentKind::Gauze => "gauze",
        }
    }

    pub fn has_pegboard(&self) -> bool {
        !matches!(self, EnvironmentKind::Gauze)
    }
}

impl fmt::Display for EnvironmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvironmentKind {
    type Err = SceneError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ideal" => Ok(EnvironmentKind::Ideal),
            "black_red_block" | "blackRedBlock" => Ok(EnvironmentKind::BlackRedBlock),
            "tilted_pegboard" | "tiltedPegboard" => Ok(EnvironmentKind::TiltedPegboard),
            "gauze" => Ok(EnvironmentKind::Gauze),
            other => Err(SceneError::Config(format!("unknown environment `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Box { extents: [f64; 3] },
    Cylinder { radius: f64, height: f64 },
    Slab { extents: [f64; 3] },
}

impl Shape {
    pub fn validate(&self) -> Result<(), SceneError> {
        let ok = match self {
            Shape::Box { extents } | Shape::Slab { extents } => extents.iter().all(|&e| e > 0.0),
            Shape::Cylinder { radius, height } => *radius > 0.0 && *height > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(SceneError::Config(format!("non-positive primitive dimensions: {self:?}")))
        }
    }

    pub fn half_extents(&self) -> Vec3 {
        match self {
            Shape::Box { extents } | Shape::Slab { extents } => Vec3::from(*extents) / 2.0,
            Shape::Cylinder { radius, height } => Vec3::new(*radius, *radius, height / 2.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    /// Shape center in the world frame.
    pub pose: Pose6,
    pub albedo: [f64; 3],
    pub ir_absorbing: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectClass {
    Block,
    Peg,
    Gauze,
}

impl ObjectClass {
    pub fn label(&self) -> &'static str {
        match self {
            ObjectClass::Block => "block",
            ObjectClass::Peg => "peg",
            ObjectClass::Gauze => "gauze",
        }
    }

    pub fn model_id(&self) -> &'static str {
        self.label()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedColor {
    pub name: String,
    pub rgb: [f64; 3],
}

impl NamedColor {
    pub fn new(name: &str, rgb: [f64; 3]) -> Self {
        Self {
            name: name.to_string(),
            rgb,
        }
    }

    pub fn luminance(&self) -> f64 {
        0.2126 * self.rgb[0] + 0.7152 * self.rgb[1] + 0.0722 * self.rgb[2]
    }

    /// Dark surfaces swallow the depth sensor's infrared pattern.
    pub fn absorbs_infrared(&self) -> bool {
        self.luminance() < 0.1
    }
}

/// Physical dimensions and sensor placement. None of these values are
/// load-bearing for the invariants; all of them are configurable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneGeometry {
    pub intrinsics: CameraIntrinsics,
    pub camera_height: f64,
    /// Camera position over the world origin, world x/y.
    pub camera_offset: [f64; 2],
    pub block_size: f64,
    pub peg_radius: f64,
    pub peg_height: f64,
    pub peg_spacing: [f64; 2],
    pub board_extents: [f64; 3],
    /// Table top height in the pegboard environments; the board sits on a stand above it.
    pub table_drop: f64,
    pub gauze_size: f64,
    pub gauze_thickness: f64,
    pub grasp_radius: f64,
    pub place_radius: f64,
    pub model_samples: usize,
}

impl Default for SceneGeometry {
    fn default() -> Self {
        Self {
            intrinsics: CameraIntrinsics::default(),
            camera_height: 0.45,
            camera_offset: [0.0, 0.0],
            block_size: 0.025,
            peg_radius: 0.004,
            peg_height: 0.025,
            peg_spacing: [0.04, 0.04],
            board_extents: [0.18, 0.14, 0.006],
            table_drop: 0.04,
            gauze_size: 0.05,
            gauze_thickness: 0.002,
            grasp_radius: 0.004,
            place_radius: 0.003,
            model_samples: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PromptMode {
    /// One positive click on each object's visible top center, negatives on the board/table.
    #[default]
    Auto,
    Explicit { prompts: PromptSet },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvironmentConfig {
    pub environment: EnvironmentKind,
    /// Board tilt about the camera x axis; only used by the tilted environment (default 15).
    pub tilt_degrees: Option<f64>,
    pub block_colors: Option<Vec<NamedColor>>,
    pub depth_noise_sigma: f64,
    pub ir_dropout_prob: f64,
    pub prompt_points: PromptMode,
    pub geometry: SceneGeometry,
}

impl Default for EnvironmentConfig {
    fn default() -> Self {
        Self::new(EnvironmentKind::Ideal)
    }
}

impl EnvironmentConfig {
    pub fn new(environment: EnvironmentKind) -> Self {
        Self {
            environment,
            tilt_degrees: None,
            block_colors: None,
            depth_noise_sigma: 0.0005,
            ir_dropout_prob: 0.5,
            prompt_points: PromptMode::Auto,
            geometry: SceneGeometry::default(),
        }
    }

    pub fn noise_free(mut self) -> Self {
        self.depth_noise_sigma = 0.0;
        self.ir_dropout_prob = 0.0;
        self
    }

    pub fn tilt(&self) -> f64 {
        match self.environment {
            EnvironmentKind::TiltedPegboard => self.tilt_degrees.unwrap_or(15.0),
            _ => 0.0,
        }
    }

    pub fn blocks(&self) -> Vec<NamedColor> {
        if let Some(colors) = &self.block_colors {
            return colors.clone();
        }
        match self.environment {
            EnvironmentKind::BlackRedBlock => vec![
                NamedColor::new("black", [0.03, 0.03, 0.03]),
                NamedColor::new("red", [0.8, 0.1, 0.1]),
            ],
            EnvironmentKind::Gauze => vec![],
            _ => vec![
                NamedColor::new("grey", [0.55, 0.55, 0.55]),
                NamedColor::new("blue", [0.2, 0.35, 0.8]),
            ],
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let tilt = self.tilt();
        if !(0.0..=45.0).contains(&tilt) {
            return Err(SceneError::Config(format!("tilt {tilt} deg outside [0, 45]")));
        }
        if !(0.0..=1.0).contains(&self.ir_dropout_prob) {
            return Err(SceneError::Config(format!(
                "ir dropout probability {} outside [0, 1]",
                self.ir_dropout_prob
            )));
        }
        if !(self.depth_noise_sigma >= 0.0) {
            return Err(SceneError::Config("depth noise sigma must be >= 0".into()));
        }
        self.geometry
            .intrinsics
            .validate()
            .map_err(|e| SceneError::Config(e.to_string()))?;
        let g = &self.geometry;
        for (name, v) in [
            ("camera_height", g.camera_height),
            ("block_size", g.block_size),
            ("peg_radius", g.peg_radius),
            ("peg_height", g.peg_height),
            ("gauze_size", g.gauze_size),
            ("gauze_thickness", g.gauze_thickness),
            ("grasp_radius", g.grasp_radius),
            ("place_radius", g.place_radius),
        ] {
            if !(v > 0.0) {
                return Err(SceneError::Config(format!("{name} must be positive")));
            }
        }
        let blocks = self.blocks();
        if self.environment.has_pegboard() {
            if blocks.is_empty() || blocks.len() >= PEG_COUNT {
                return Err(SceneError::Config(format!(
                    "peg transfer needs between 1 and {} blocks",
                    PEG_COUNT - 1
                )));
            }
            let mut names: Vec<&str> = blocks.iter().map(|c| c.name.as_str()).collect();
            names.sort_unstable();
            names.dedup();
            if names.len() != blocks.len() {
                return Err(SceneError::Config("block colors must have unique names".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    pub class: ObjectClass,
    pub color: NamedColor,
    pub model_id: String,
    /// Model frame to world.
    pub pose: Pose6,
    pub held_by: Option<String>,
    pub seated_on_peg: Option<usize>,
    /// Set once the object has been lifted off its support.
    pub lifted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pegboard {
    /// Board frame (top surface center, +z up) to world.
    pub assembly: Pose6,
    pub board: Primitive,
    /// Peg model frames (shape center, +z down the axis) to world, peg 1 first.
    pub pegs: Vec<Pose6>,
    pub tilt_degrees: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub config: EnvironmentConfig,
    pub objects: BTreeMap<String, ObjectState>,
    pub pegboard: Option<Pegboard>,
    pub table: Primitive,
    pub camera: CameraIntrinsics,
    /// Camera frame to world.
    pub camera_pose: Pose6,
    pub rng_seed: u64,
}

/// A perceivable entity: a movable object or a peg.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneEntity {
    pub name: String,
    pub class: ObjectClass,
    pub color: String,
    pub model_id: String,
    pub pose_world: Pose6,
    pub primitive: Primitive,
}

pub fn peg_name(index: usize) -> String {
    format!("peg_{}", index + 1)
}

pub fn block_name(color: &str) -> String {
    format!("block_{color}")
}

/// Parses `peg_<k>` (1-based) into a zero-based index.
pub fn parse_peg_name(name: &str) -> Option<usize> {
    let k: usize = name.strip_prefix("peg_")?.parse().ok()?;
    (1..=PEG_COUNT).contains(&k).then(|| k - 1)
}

fn flip_down() -> Pose6 {
    Pose6::from_axis_angle(Vec3::x(), std::f64::consts::PI, Vec3::zeros())
}

const PEG_ALBEDO: [f64; 3] = [0.75, 0.75, 0.7];
const BOARD_ALBEDO: [f64; 3] = [0.9, 0.85, 0.6];
const TABLE_ALBEDO: [f64; 3] = [0.25, 0.45, 0.3];
const GAUZE_ALBEDO: [f64; 3] = [0.97, 0.97, 0.97];

impl WorldState {
    pub fn geometry(&self) -> &SceneGeometry {
        &self.config.geometry
    }

    /// Board-frame position of a peg's base center.
    pub fn peg_board_xy(geometry: &SceneGeometry, index: usize) -> (f64, f64) {
        let row = index / PEG_COLUMNS;
        let col = index % PEG_COLUMNS;
        let x = (col as f64 - (PEG_COLUMNS as f64 - 1.0) / 2.0) * geometry.peg_spacing[0];
        let y = ((PEG_ROWS as f64 - 1.0) / 2.0 - row as f64) * geometry.peg_spacing[1];
        (x, y)
    }

    /// Pose a block takes when seated on peg `index`.
    pub fn seated_pose(&self, index: usize) -> Option<Pose6> {
        let board = self.pegboard.as_ref()?;
        let (x, y) = Self::peg_board_xy(self.geometry(), index);
        let s = self.geometry().block_size;
        Some(
            board
                .assembly
                .compose(&Pose6::from_translation(Vec3::new(x, y, s / 2.0)))
                .compose(&flip_down()),
        )
    }

    pub fn shape_of(&self, class: ObjectClass) -> Shape {
        let g = self.geometry();
        match class {
            ObjectClass::Block => Shape::Box {
                extents: [g.block_size; 3],
            },
            ObjectClass::Peg => Shape::Cylinder {
                radius: g.peg_radius,
                height: g.peg_height,
            },
            ObjectClass::Gauze => Shape::Slab {
                extents: [g.gauze_size, g.gauze_size, g.gauze_thickness],
            },
        }
    }

    /// All perceivable entities in deterministic order: movable objects by name, then pegs.
    pub fn entities(&self) -> Vec<SceneEntity> {
        let mut out = Vec::new();
        for (name, obj) in &self.objects {
            out.push(SceneEntity {
                name: name.clone(),
                class: obj.class,
                color: obj.color.name.clone(),
                model_id: obj.model_id.clone(),
                pose_world: obj.pose,
                primitive: Primitive {
                    shape: self.shape_of(obj.class),
                    pose: obj.pose,
                    albedo: obj.color.rgb,
                    ir_absorbing: obj.color.absorbs_infrared(),
                },
            });
        }
        if let Some(board) = &self.pegboard {
            for (i, pose) in board.pegs.iter().enumerate() {
                out.push(SceneEntity {
                    name: peg_name(i),
                    class: ObjectClass::Peg,
                    color: "steel".into(),
                    model_id: ObjectClass::Peg.model_id().into(),
                    pose_world: *pose,
                    primitive: Primitive {
                        shape: self.shape_of(ObjectClass::Peg),
                        pose: *pose,
                        albedo: PEG_ALBEDO,
                        ir_absorbing: false,
                    },
                });
            }
        }
        out
    }

    pub fn entity(&self, name: &str) -> Result<SceneEntity, SceneError> {
        self.entities()
            .into_iter()
            .find(|e| e.name == name)
            .ok_or_else(|| SceneError::UnknownObject(name.to_string()))
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        self.camera_pose.inverse().transform_point(p)
    }

    pub fn camera_to_world(&self, p: &Vec3) -> Vec3 {
        self.camera_pose.transform_point(p)
    }

    pub fn pose_in_camera(&self, pose_world: &Pose6) -> Pose6 {
        self.camera_pose.inverse().compose(pose_world)
    }

    /// Local grasp point of an object class (top face center).
    pub fn grasp_offset(&self, class: ObjectClass) -> Vec3 {
        let h = self.shape_of(class).half_extents();
        Vec3::new(0.0, 0.0, -h.z)
    }

    /// Local place point (bottom face center).
    pub fn place_offset(&self, class: ObjectClass) -> Vec3 {
        let h = self.shape_of(class).half_extents();
        Vec3::new(0.0, 0.0, h.z)
    }

    pub fn grasp_point_world(&self, name: &str) -> Result<Vec3, SceneError> {
        let e = self.entity(name)?;
        Ok(e.pose_world.transform_point(&self.grasp_offset(e.class)))
    }

    pub fn held_object(&self) -> Option<(&String, &ObjectState)> {
        self.objects.iter().find(|(_, o)| o.held_by.is_some())
    }

    pub fn peg_occupant(&self, index: usize) -> Option<&String> {
        self.objects
            .iter()
            .find(|(_, o)| o.seated_on_peg == Some(index))
            .map(|(n, _)| n)
    }

    /// Peg top center and unit up axis (towards the camera side of the board), world frame.
    pub fn peg_top(&self, index: usize) -> Option<(Vec3, Vec3)> {
        let board = self.pegboard.as_ref()?;
        let pose = board.pegs.get(index)?;
        let h = self.geometry().peg_height;
        let top = pose.transform_point(&Vec3::new(0.0, 0.0, -h / 2.0));
        let up = pose.transform_vector(&Vec3::new(0.0, 0.0, -1.0));
        Some((top, up))
    }

    /// Moves a held object so its grasp point coincides with the tooltip.
    pub fn track_tooltip(&self, tooltip_world: &Vec3) -> WorldState {
        let mut next = self.clone();
        let held = next.objects.iter().find(|(_, o)| o.held_by.is_some()).map(|(n, o)| (n.clone(), o.class));
        if let Some((name, class)) = held {
            let offset = self.grasp_offset(class);
            let obj = next.objects.get_mut(&name).expect("held object exists");
            let grasp_now = obj.pose.transform_point(&offset);
            let shift = tooltip_world - grasp_now;
            obj.pose = obj.pose.with_translation(obj.pose.translation() + shift);
        }
        next
    }
}

/// Builds the world for an environment; `seed` randomizes block start pegs and the gauze placement.
pub fn build_environment(config: &EnvironmentConfig, seed: u64) -> Result<WorldState, SceneError> {
    config.validate()?;
    let g = config.geometry.clone();
    let camera_pose = Pose6::from_translation(Vec3::new(g.camera_offset[0], g.camera_offset[1], g.camera_height))
        .compose(&flip_down());
    let mut rng = rng::stream(seed, Substream::WorldLayout);

    let table_top = if config.environment.has_pegboard() { -g.table_drop } else { 0.0 };
    let table = Primitive {
        shape: Shape::Box {
            extents: [2.0, 2.0, 0.05],
        },
        pose: Pose6::from_translation(Vec3::new(0.0, 0.0, table_top - 0.025)),
        albedo: TABLE_ALBEDO,
        ir_absorbing: false,
    };

    let mut world = WorldState {
        config: config.clone(),
        objects: BTreeMap::new(),
        pegboard: None,
        table,
        camera: g.intrinsics,
        camera_pose,
        rng_seed: seed,
    };

    if config.environment.has_pegboard() {
        let tilt = config.tilt();
        let assembly = Pose6::from_axis_angle(Vec3::x(), tilt.to_radians(), Vec3::zeros());
        let board = Primitive {
            shape: Shape::Box {
                extents: g.board_extents,
            },
            pose: assembly.compose(&Pose6::from_translation(Vec3::new(0.0, 0.0, -g.board_extents[2] / 2.0))),
            albedo: BOARD_ALBEDO,
            ir_absorbing: false,
        };
        let pegs = (0..PEG_COUNT)
            .map(|i| {
                let (x, y) = WorldState::peg_board_xy(&g, i);
                assembly
                    .compose(&Pose6::from_translation(Vec3::new(x, y, g.peg_height / 2.0)))
                    .compose(&flip_down())
            })
            .collect();
        world.pegboard = Some(Pegboard {
            assembly,
            board,
            pegs,
            tilt_degrees: tilt,
        });

        let mut free: Vec<usize> = (0..PEG_COUNT).collect();
        for color in config.blocks() {
            let slot = rng.random_range(0..free.len());
            let peg = free.swap_remove(slot);
            let pose = world.seated_pose(peg).expect("pegboard present");
            world.objects.insert(
                block_name(&color.name),
                ObjectState {
                    class: ObjectClass::Block,
                    color,
                    model_id: ObjectClass::Block.model_id().into(),
                    pose,
                    held_by: None,
                    seated_on_peg: Some(peg),
                    lifted: false,
                },
            );
        }
    } else {
        let x = rng.random_range(-0.03..0.03);
        let y = rng.random_range(-0.03..0.03);
        let yaw = rng.random_range(-30.0f64..30.0).to_radians();
        let pose = Pose6::from_translation(Vec3::new(x, y, g.gauze_thickness / 2.0))
            .compose(&Pose6::from_axis_angle(Vec3::z(), yaw, Vec3::zeros()))
            .compose(&flip_down());
        world.objects.insert(
            "gauze".into(),
            ObjectState {
                class: ObjectClass::Gauze,
                color: NamedColor::new("white", GAUZE_ALBEDO),
                model_id: ObjectClass::Gauze.model_id().into(),
                pose,
                held_by: None,
                seated_on_peg: None,
                lifted: false,
            },
        );
    }
    Ok(world)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WorldEvent {
    Grasp { tooltip: Vec3 },
    Release { tooltip: Vec3 },
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum StepOutcome {
    Grasped { object: String, distance: f64 },
    GraspMissed { nearest: Option<String>, distance: Option<f64> },
    Seated { object: String, peg: usize },
    Dropped { object: String },
    /// A lifted object let go away from any peg (gauze retrieval).
    Retrieved { object: String },
    ReleasedNothing,
    NoChange,
}

/// Applies a gripper event; tooltip positions are world-frame.
pub fn step_world(world: &WorldState, event: WorldEvent) -> Result<(WorldState, StepOutcome), SceneError> {
    match event {
        WorldEvent::None => Ok((world.clone(), StepOutcome::NoChange)),
        WorldEvent::Grasp { tooltip } => grasp(world, tooltip),
        WorldEvent::Release { tooltip } => release(world, tooltip),
    }
}

fn grasp(world: &WorldState, tooltip: Vec3) -> Result<(WorldState, StepOutcome), SceneError> {
    if let Some((name, _)) = world.held_object() {
        return Err(SceneError::Protocol(format!("grasp while already holding `{name}`")));
    }
    let r = world.geometry().grasp_radius;
    let nearest = world
        .objects
        .iter()
        .map(|(name, o)| {
            let gp = o.pose.transform_point(&world.grasp_offset(o.class));
            (name.clone(), (gp - tooltip).norm())
        })
        .min_by(|a, b| a.1.total_cmp(&b.1));
    match nearest {
        Some((name, d)) if d <= r => {
            let mut next = world.clone();
            let obj = next.objects.get_mut(&name).expect("object exists");
            obj.held_by = Some("psm".into());
            obj.seated_on_peg = None;
            obj.lifted = true;
            let next = next.track_tooltip(&tooltip);
            Ok((next, StepOutcome::Grasped { object: name, distance: d }))
        }
        other => Ok((
            world.clone(),
            StepOutcome::GraspMissed {
                nearest: other.as_ref().map(|(n, _)| n.clone()),
                distance: other.map(|(_, d)| d),
            },
        )),
    }
}

fn release(world: &WorldState, tooltip: Vec3) -> Result<(WorldState, StepOutcome), SceneError> {
    let Some(name) = world.held_object().map(|(n, _)| n.clone()) else {
        return Ok((world.clone(), StepOutcome::ReleasedNothing));
    };
    let world = world.track_tooltip(&tooltip);
    let obj = world.objects[&name].clone();
    let mut next = world.clone();

    if obj.class == ObjectClass::Gauze || world.pegboard.is_none() {
        let o = next.objects.get_mut(&name).expect("held object exists");
        o.held_by = None;
        let half = world.shape_of(obj.class).half_extents().z;
        let t = o.pose.translation();
        o.pose = o.pose.with_translation(Vec3::new(t.x, t.y, world.table.pose.translation().z + 0.025 + half));
        return Ok((next, StepOutcome::Retrieved { object: name }));
    }

    let place = obj.pose.transform_point(&world.place_offset(obj.class));
    let r_place = world.geometry().place_radius;
    let mut best: Option<(usize, f64)> = None;
    for i in 0..PEG_COUNT {
        if world.peg_occupant(i).is_some_and(|n| n != &name) {
            continue;
        }
        let (top, up) = world.peg_top(i).expect("pegboard present");
        let v = place - top;
        let along = v.dot(&up);
        let radial = (v - along * up).norm();
        if along >= -1e-9 && radial <= r_place && best.is_none_or(|(_, d)| radial < d) {
            best = Some((i, radial));
        }
    }
    let o = next.objects.get_mut(&name).expect("held object exists");
    o.held_by = None;
    match best {
        Some((peg, _)) => {
            o.seated_on_peg = Some(peg);
            o.pose = world.seated_pose(peg).expect("pegboard present");
            Ok((next, StepOutcome::Seated { object: name, peg }))
        }
        None => {
            let board = world.pegboard.as_ref().expect("pegboard present");
            let local = board.assembly.inverse().transform_point(obj.pose.translation());
            let half = world.shape_of(obj.class).half_extents().z;
            o.pose = board
                .assembly
                .compose(&Pose6::from_translation(Vec3::new(local.x, local.y, half)))
                .compose(&flip_down());
            Ok((next, StepOutcome::Dropped { object: name }))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub name: String,
    pub class: ObjectClass,
    pub color: String,
    pub model_id: String,
    pub pose_camera: Pose6,
    pub mask: Mask,
    pub grasp_point_camera: Vec3,
}

/// Exact pose, visibility mask and grasp point of one object.
pub fn ground_truth(world: &WorldState, name: &str) -> Result<GroundTruth, SceneError> {
    world.entity(name)?;
    let cast = raycast(world);
    ground_truth_from(world, &cast, name)
}

/// Ground truth for every entity from one ray cast.
pub fn ground_truth_all(world: &WorldState) -> BTreeMap<String, GroundTruth> {
    let cast = raycast(world);
    world
        .entities()
        .iter()
        .map(|e| (e.name.clone(), ground_truth_from(world, &cast, &e.name).expect("entity exists")))
        .collect()
}

pub fn ground_truth_from(world: &WorldState, cast: &RayCast, name: &str) -> Result<GroundTruth, SceneError> {
    let e = world.entity(name)?;
    let mask = cast.mask_of(name);
    let pose_camera = world.pose_in_camera(&e.pose_world);
    let grasp_point_camera = pose_camera.transform_point(&world.grasp_offset(e.class));
    Ok(GroundTruth {
        name: e.name,
        class: e.class,
        color: e.color,
        model_id: e.model_id,
        pose_camera,
        mask,
        grasp_point_camera,
    })
}

/// Auto-generated point prompts: one positive at each visible object's top center,
/// shared negatives on the supporting surface.
pub fn auto_prompts(world: &WorldState) -> PromptSet {
    let k = &world.camera;
    let to_pixel = |p_world: &Vec3| -> Option<(u32, u32)> {
        let px = project(&world.world_to_camera(p_world), k).ok()?;
        let (u, v) = (px.x.round(), px.y.round());
        (u >= 0.0 && v >= 0.0 && u < k.width as f64 && v < k.height as f64).then_some((u as u32, v as u32))
    };
    let mut prompts = PromptSet::default();
    for e in world.entities() {
        let top = e.pose_world.transform_point(&world.grasp_offset(e.class));
        if let Some(px) = to_pixel(&top) {
            prompts.positive.insert(e.name.clone(), vec![px]);
        }
    }
    let negatives: Vec<Vec3> = match &world.pegboard {
        Some(board) => {
            let sx = world.geometry().peg_spacing[0];
            let sy = world.geometry().peg_spacing[1];
            let mut pts = Vec::new();
            for ix in [-1.0, 0.0, 1.0] {
                for iy in [-0.5, 0.5] {
                    pts.push(board.assembly.transform_point(&Vec3::new(ix * sx, iy * sy, 0.0)));
                }
            }
            pts
        }
        None => [(-0.08, -0.08), (0.08, -0.08), (-0.08, 0.08), (0.08, 0.08)]
            .iter()
            .map(|&(x, y)| Vec3::new(x, y, 0.0))
            .collect(),
    };
    prompts.negative = negatives.iter().filter_map(to_pixel).collect();
    prompts
}

pub fn prompts_for(world: &WorldState) -> PromptSet {
    match &world.config.prompt_points {
        PromptMode::Auto => auto_prompts(world),
        PromptMode::Explicit { prompts } => prompts.clone(),
    }
}

/// Surface samples of a primitive in its own (centered) frame.
pub fn sample_surface(shape: &Shape, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    match shape {
        Shape::Box { extents } | Shape::Slab { extents } => {
            let h = Vec3::from(*extents) / 2.0;
            let areas = [h.y * h.z, h.x * h.z, h.x * h.y];
            let total: f64 = areas.iter().sum::<f64>() * 2.0;
            (0..count)
                .map(|_| {
                    let mut pick = rng.random_range(0.0..total);
                    let mut axis = 0;
                    for (i, a) in areas.iter().enumerate() {
                        if pick < 2.0 * a {
                            axis = i;
                            break;
                        }
                        pick -= 2.0 * a;
                        axis = i;
                    }
                    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    let mut p = Vec3::new(
                        rng.random_range(-h.x..=h.x),
                        rng.random_range(-h.y..=h.y),
                        rng.random_range(-h.z..=h.z),
                    );
                    p[axis] = sign * h[axis];
                    p
                })
                .collect()
        }
        Shape::Cylinder { radius, height } => {
            let side = 2.0 * std::f64::consts::PI * radius * height;
            let cap = std::f64::consts::PI * radius * radius;
            (0..count)
                .map(|_| {
                    let pick = rng.random_range(0.0..side + 2.0 * cap);
                    let theta = rng.random_range(0.0..std::f64::consts::TAU);
                    if pick < side {
                        let z = rng.random_range(-height / 2.0..=height / 2.0);
                        Vec3::new(radius * theta.cos(), radius * theta.sin(), z)
                    } else {
                        let r = radius * rng.random_range(0.0f64..1.0).sqrt();
                        let z = if pick < side + cap { -height / 2.0 } else { height / 2.0 };
                        Vec3::new(r * theta.cos(), r * theta.sin(), z)
                    }
                })
                .collect()
        }
    }
}

/// Model priors for every object class, sampled from the same primitives the renderer draws.
pub fn model_library(geometry: &SceneGeometry) -> BTreeMap<String, ModelPrior> {
    let probe = WorldState {
        config: EnvironmentConfig {
            geometry: geometry.clone(),
            ..EnvironmentConfig::default()
        },
        objects: BTreeMap::new(),
        pegboard: None,
        table: Primitive {
            shape: Shape::Box { extents: [1.0; 3] },
            pose: Pose6::identity(),
            albedo: [0.0; 3],
            ir_absorbing: false,
        },
        camera: geometry.intrinsics,
        camera_pose: Pose6::identity(),
        rng_seed: 0,
    };
    [ObjectClass::Block, ObjectClass::Peg, ObjectClass::Gauze]
        .into_iter()
        .enumerate()
        .map(|(i, class)| {
            let mut rng = rng::indexed_stream(0x05ee_d0f7_0de1, Substream::WorldLayout, i as u64);
            let vertices = sample_surface(&probe.shape_of(class), geometry.model_samples.max(4), &mut rng);
            let place = match class {
                ObjectClass::Peg => Some(probe.grasp_offset(class)),
                _ => Some(probe.place_offset(class)),
            };
            let prior = ModelPrior::new(class.model_id(), vertices, probe.grasp_offset(class), place)
                .expect("sampled primitives are non-degenerate");
            (class.model_id().to_string(), prior)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::pose_error;
    use approx::assert_relative_eq;

    #[test]
    fn ideal_environment_layout() {
        let w = build_environment(&EnvironmentConfig::new(EnvironmentKind::Ideal), 1).unwrap();
        let board = w.pegboard.as_ref().unwrap();
        assert_eq!(board.tilt_degrees, 0.0);
        assert_eq!(board.pegs.len(), 12);
        assert_eq!(w.objects.len(), 2);
        for obj in w.objects.values() {
            assert!(obj.seated_on_peg.is_some() && obj.held_by.is_none());
            // upright objects have identity rotation in the camera frame
            let cam = w.pose_in_camera(&obj.pose);
            assert!(pose_error(&cam.with_translation(Vec3::zeros()), &Pose6::identity()).1 < 1e-6);
        }
        let normal = board.assembly.transform_vector(&Vec3::z());
        let optical = w.camera_pose.transform_vector(&Vec3::z());
        assert_relative_eq!(normal.dot(&optical).abs(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn tilted_board_normal_angle() {
        let w = build_environment(&EnvironmentConfig::new(EnvironmentKind::TiltedPegboard), 1).unwrap();
        let board = w.pegboard.as_ref().unwrap();
        let normal = board.assembly.transform_vector(&Vec3::z());
        let optical = -w.camera_pose.transform_vector(&Vec3::z());
        let angle = normal.dot(&optical).clamp(-1.0, 1.0).acos().to_degrees();
        assert!((angle - 15.0).abs() < 1e-6, "{angle}");
    }

    #[test]
    fn gauze_slab_extents() {
        let w = build_environment(&EnvironmentConfig::new(EnvironmentKind::Gauze), 1).unwrap();
        assert!(w.pegboard.is_none());
        let e = w.entity("gauze").unwrap();
        assert_eq!(
            e.primitive.shape,
            Shape::Slab {
                extents: [0.05, 0.05, 0.002]
            }
        );
    }

    #[test]
    fn black_block_absorbs_infrared() {
        let w = build_environment(&EnvironmentConfig::new(EnvironmentKind::BlackRedBlock), 3).unwrap();
        let black = w.entity("block_black").unwrap();
        let red = w.entity("block_red").unwrap();
        assert!(black.primitive.ir_absorbing);
        assert!(!red.primitive.ir_absorbing);
    }

    #[test]
    fn config_errors() {
        assert!(matches!("space".parse::<EnvironmentKind>(), Err(SceneError::Config(_))));
        let mut c = EnvironmentConfig::new(EnvironmentKind::TiltedPegboard);
        c.tilt_degrees = Some(50.0);
        assert!(build_environment(&c, 0).is_err());
        let mut c = EnvironmentConfig::new(EnvironmentKind::Ideal);
        c.ir_dropout_prob = 1.5;
        assert!(build_environment(&c, 0).is_err());
        let toml_err = toml::from_str::<EnvironmentConfig>("environment = \"space\"");
        assert!(toml_err.is_err());
    }

    fn world_with_block_on(peg: usize) -> WorldState {
        let mut w = build_environment(&EnvironmentConfig::new(EnvironmentKind::Ideal).noise_free(), 0).unwrap();
        w.objects.remove("block_blue");
        let pose = w.seated_pose(peg).unwrap();
        let b = w.objects.get_mut("block_grey").unwrap();
        b.pose = pose;
        b.seated_on_peg = Some(peg);
        w
    }

    #[test]
    fn grasp_threshold() {
        let w = world_with_block_on(5);
        let gp = w.grasp_point_world("block_grey").unwrap();
        let (held, out) = step_world(&w, WorldEvent::Grasp { tooltip: gp }).unwrap();
        assert!(matches!(out, StepOutcome::Grasped { .. }));
        let b = &held.objects["block_grey"];
        assert!(b.held_by.is_some() && b.seated_on_peg.is_none());

        let r = w.geometry().grasp_radius;
        let miss = gp + Vec3::new(r + 0.001, 0.0, 0.0);
        let (_, out) = step_world(&w, WorldEvent::Grasp { tooltip: miss }).unwrap();
        assert!(matches!(out, StepOutcome::GraspMissed { .. }));

        assert!(matches!(
            step_world(&held, WorldEvent::Grasp { tooltip: gp }),
            Err(SceneError::Protocol(_))
        ));
    }

    #[test]
    fn held_object_tracks_tooltip() {
        let w = world_with_block_on(5);
        let gp = w.grasp_point_world("block_grey").unwrap();
        let (mut held, _) = step_world(&w, WorldEvent::Grasp { tooltip: gp }).unwrap();
        for i in 0..10 {
            let tip = gp + Vec3::new(0.003 * i as f64, -0.002 * i as f64, 0.01);
            held = held.track_tooltip(&tip);
            assert!((held.grasp_point_world("block_grey").unwrap() - tip).norm() < 1e-12);
        }
    }

    fn place_tooltip(w: &WorldState, peg: usize, offset: Vec3) -> Vec3 {
        let (top, up) = w.peg_top(peg).unwrap();
        let s = w.geometry().block_size;
        top + up * (s + 0.001) + offset
    }

    #[test]
    fn release_near_peg_axis_seats() {
        let w = world_with_block_on(5);
        let gp = w.grasp_point_world("block_grey").unwrap();
        let (held, _) = step_world(&w, WorldEvent::Grasp { tooltip: gp }).unwrap();
        // 1 mm off the axis with a 3 mm placement radius: the radial-distance oracle says seat
        let tip = place_tooltip(&held, 2, Vec3::new(0.001, 0.0, 0.0));
        let (placed, out) = step_world(&held, WorldEvent::Release { tooltip: tip }).unwrap();
        assert_eq!(
            out,
            StepOutcome::Seated {
                object: "block_grey".into(),
                peg: 2
            }
        );
        let b = &placed.objects["block_grey"];
        assert_eq!(b.seated_on_peg, Some(2));
        assert!(b.held_by.is_none());

        let tip = place_tooltip(&held, 2, Vec3::new(0.0031, 0.0, 0.0));
        let (_, out) = step_world(&held, WorldEvent::Release { tooltip: tip }).unwrap();
        assert!(matches!(out, StepOutcome::Dropped { .. }));

        // below the peg top is not a placement
        let tip = place_tooltip(&held, 2, Vec3::new(0.0, 0.0, -0.005));
        let (_, out) = step_world(&held, WorldEvent::Release { tooltip: tip }).unwrap();
        assert!(matches!(out, StepOutcome::Dropped { .. }));
    }

    #[test]
    fn release_without_holding() {
        let w = world_with_block_on(5);
        let (_, out) = step_world(&w, WorldEvent::Release { tooltip: Vec3::zeros() }).unwrap();
        assert_eq!(out, StepOutcome::ReleasedNothing);
        let (_, out) = step_world(&w, WorldEvent::None).unwrap();
        assert_eq!(out, StepOutcome::NoChange);
    }

    #[test]
    fn gauze_release_counts_as_retrieved() {
        let w = build_environment(&EnvironmentConfig::new(EnvironmentKind::Gauze), 4).unwrap();
        let gp = w.grasp_point_world("gauze").unwrap();
        let (held, out) = step_world(&w, WorldEvent::Grasp { tooltip: gp }).unwrap();
        assert!(matches!(out, StepOutcome::Grasped { .. }));
        let (after, out) = step_world(&held, WorldEvent::Release { tooltip: gp }).unwrap();
        assert_eq!(out, StepOutcome::Retrieved { object: "gauze".into() });
        assert!(after.objects["gauze"].lifted);
    }

    #[test]
    fn never_held_and_seated() {
        let w = world_with_block_on(0);
        let gp = w.grasp_point_world("block_grey").unwrap();
        let (held, _) = step_world(&w, WorldEvent::Grasp { tooltip: gp }).unwrap();
        for s in [&w, &held] {
            for o in s.objects.values() {
                assert!(!(o.held_by.is_some() && o.seated_on_peg.is_some()));
            }
        }
    }

    #[test]
    fn model_library_is_consistent_with_primitives() {
        let g = SceneGeometry::default();
        let lib = model_library(&g);
        let block = &lib["block"];
        assert_eq!(block.vertices.len(), 2000);
        for v in &block.vertices {
            let h = 0.0125 + 1e-12;
            assert!(v.x.abs() <= h && v.y.abs() <= h && v.z.abs() <= h);
            assert!([v.x.abs(), v.y.abs(), v.z.abs()].iter().any(|c| (c - 0.0125).abs() < 1e-12));
        }
        assert_eq!(block.grasp_point, Vec3::new(0.0, 0.0, -0.0125));
        assert_eq!(block.place_point, Some(Vec3::new(0.0, 0.0, 0.0125)));
        for v in &lib["peg"].vertices {
            let r = (v.x * v.x + v.y * v.y).sqrt();
            assert!(r <= 0.004 + 1e-12);
            assert!((r - 0.004).abs() < 1e-12 || (v.z.abs() - 0.0125).abs() < 1e-12);
        }
        assert!(lib.values().all(|m| m.is_pose_estimable()));
    }

    #[test]
    fn auto_prompts_cover_visible_entities() {
        let w = build_environment(&EnvironmentConfig::new(EnvironmentKind::Ideal), 2).unwrap();
        let p = auto_prompts(&w);
        assert_eq!(p.positive.len(), 14);
        assert_eq!(p.negative.len(), 6);
        assert_eq!(parse_peg_name("peg_12"), Some(11));
        assert_eq!(parse_peg_name("peg_13"), None);
    }
}
