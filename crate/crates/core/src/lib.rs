//! Simulated digital-twin pipeline for supervised robotic pick-and-place.
//!
//! Modules build on each other bottom-up: `geometry` and `raster` hold the
//! math, `scene` simulates the bench and renders RGB-D frames, `perception`
//! turns frames into poses, `twin` keeps the scene representation, `robot`
//! is the kinematic arm, `agent` plans over the action vocabulary and
//! `harness` runs and scores experiments.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agent;
pub mod geometry;
pub mod harness;
pub mod perception;
pub mod raster;
pub mod rng;
pub mod robot;
pub mod scene;
pub mod twin;

pub use geometry::{CameraIntrinsics, ModelPrior, PointCloud, Pose6, Vec3};
pub use perception::{PerceptionPipeline, PromptSet, SegmentationResult};
pub use raster::Mask;
pub use scene::{EnvironmentConfig, EnvironmentKind, RgbdFrame, WorldState};
pub use twin::{ObjectTwin, SceneRepresentation, TwinStore};
pub use agent::{Action, Feedback, LoopMode, TrialRecord};
pub use harness::{ExperimentConfig, ExperimentSummary};
pub use robot::{Direction, HandEyeCalibration, MotionConfig, RobotState};
