//! Scene fixtures shared by the benchmarks.

use std::collections::BTreeMap;

use surgtwin_core::geometry::{ModelPrior, PointCloud};
use surgtwin_core::perception::mask_to_cloud;
use surgtwin_core::scene::render::frame_from_cast;
use surgtwin_core::scene::{block_name, build_environment, ground_truth_all, model_library, raycast, RayCast};
use surgtwin_core::{EnvironmentConfig, EnvironmentKind, RgbdFrame, WorldState};

pub struct Fixture {
    pub world: WorldState,
    pub cast: RayCast,
    pub frame: RgbdFrame,
    pub models: BTreeMap<String, ModelPrior>,
    /// Observed cloud of the first block, cut with its true mask.
    pub block_cloud: PointCloud,
}

pub fn fixture(kind: EnvironmentKind, seed: u64) -> Fixture {
    let world = build_environment(&EnvironmentConfig::new(kind), seed).expect("valid environment");
    let cast = raycast(&world);
    let frame = frame_from_cast(&world, &cast, seed, 1);
    let models = model_library(world.geometry());
    let truth = ground_truth_all(&world);
    let first_block = world.config.blocks()[0].name.clone();
    let block_cloud = mask_to_cloud(&frame, &truth[&block_name(&first_block)].mask).expect("block is visible");
    Fixture {
        world,
        cast,
        frame,
        models,
        block_cloud,
    }
}
