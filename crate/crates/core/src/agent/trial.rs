//! One trial: planner, protocol check, execution and supervisor feedback in strict sequence.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::protocol::ProtocolState;
use super::{Action, Feedback, HistoryEntry, LoopMode, Planner, PlannerContext, ReachMode, Task};
use crate::geometry::{ModelPrior, Vec3};
use crate::perception::{perceive, PerceptionPipeline, WorldHandle};
use crate::rng;
use crate::robot::{reach_pose, HandEyeCalibration, Jaw, JawOutcome, MotionConfig, Robot, RobotCommand};
use crate::scene::render::frame_from_cast;
use crate::scene::{model_library, prompts_for, raycast, ObjectClass, RgbdFrame, StepOutcome, WorldState};
use crate::rng::Substream;
use crate::twin::{SceneRepresentation, TwinStore};

pub const DEFAULT_STEP_CEILING: usize = 30;

/// Simulated durations, seconds.
const OBSERVE_TIME: f64 = 0.5;
const JAW_TIME: f64 = 0.5;
const FEEDBACK_TIME: f64 = 1.0;
const TOOL_SPEED: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum FailureMode {
    #[default]
    #[serde(rename = "none")]
    None,
    Po,
    De,
    Pl,
}

/// Why a trial stopped early; mapped onto the failure taxonomy by [`classify_failure`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopCause {
    ProtocolViolation,
    PlannerFailure,
    StepCeiling,
    Panic,
    /// Grasp or place missed, or a motion could not be executed.
    Execution,
    /// The supervisor gave up, typically with the budget spent.
    SupervisorAbort,
    /// An inquiry went unanswered (open loop).
    Unanswered,
}

/// Pl for planning faults; De when a required object was missing at the last observation; Po otherwise.
pub fn classify_failure(cause: StopCause, required_missing: bool) -> FailureMode {
    match cause {
        StopCause::ProtocolViolation | StopCause::PlannerFailure | StopCause::StepCeiling | StopCause::Panic => {
            FailureMode::Pl
        }
        _ if required_missing => FailureMode::De,
        StopCause::Unanswered => FailureMode::Pl,
        _ => FailureMode::Po,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    Observation {
        frame_id: u64,
        detected: Vec<String>,
        undetected: Vec<String>,
    },
    Action {
        action: Action,
        accepted: bool,
        outcome: String,
    },
    Feedback {
        feedback: Feedback,
        budget_remaining: u8,
    },
    PlannerFailure {
        reason: String,
    },
    SupervisorAbort {
        reason: String,
    },
    End {
        success: bool,
        failure_mode: FailureMode,
        reason: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    /// Simulated seconds since the trial started.
    pub t: f64,
    pub step: usize,
    #[serde(flatten)]
    pub event: TraceEvent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_index: usize,
    pub seed: u64,
    pub task: String,
    pub success: bool,
    pub planning_steps: usize,
    pub adjustments_used: u8,
    pub failure_mode: FailureMode,
    pub failure_reason: Option<String>,
    pub action_trace: Vec<TraceEntry>,
    pub robot_log: Vec<RobotCommand>,
    /// Simulated duration, seconds.
    pub wall_time: f64,
}

impl TrialRecord {
    pub fn actions(&self) -> Vec<Action> {
        self.action_trace
            .iter()
            .filter_map(|e| match &e.event {
                TraceEvent::Action { action, .. } => Some(action.clone()),
                _ => None,
            })
            .collect()
    }

    pub fn feedback(&self) -> Vec<Feedback> {
        self.action_trace
            .iter()
            .filter_map(|e| match &e.event {
                TraceEvent::Feedback { feedback, .. } => Some(feedback.clone()),
                _ => None,
            })
            .collect()
    }

    /// A record for a trial that never completed its loop.
    pub fn aborted(trial_index: usize, seed: u64, task: String, reason: String) -> Self {
        Self {
            trial_index,
            seed,
            task,
            success: false,
            planning_steps: 0,
            adjustments_used: 0,
            failure_mode: classify_failure(StopCause::Panic, false),
            failure_reason: Some(reason.clone()),
            action_trace: vec![TraceEntry {
                t: 0.0,
                step: 0,
                event: TraceEvent::End {
                    success: false,
                    failure_mode: FailureMode::Pl,
                    reason: Some(reason),
                },
            }],
            robot_log: Vec::new(),
            wall_time: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RequestKind {
    AfterReach { mode: ReachMode },
    AfterPick,
    AfterAdjust,
    Inquiry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRequest {
    pub step: usize,
    pub action: Action,
    pub kind: RequestKind,
    /// Camera-frame tooltip, meters.
    pub tooltip: Vec3,
    /// Where the tooltip should be; only the simulation knows it.
    #[serde(skip)]
    pub true_target: Option<Vec3>,
    pub pick_failed: bool,
    pub budget_remaining: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum SupervisorDecision {
    Feedback { feedback: Feedback },
    GiveUp { reason: String },
}

pub trait Supervisor: Send {
    fn feedback(&mut self, request: &FeedbackRequest) -> SupervisorDecision;
}

/// Read-only hooks for consoles and loggers.
pub trait TrialObserver {
    fn on_observation(&mut self, _frame: &RgbdFrame, _scene: &SceneRepresentation) {}
    fn on_trace(&mut self, _entry: &TraceEntry) {}
    fn on_tooltip(&mut self, _tooltip: &Vec3, _jaw: Jaw) {}
}

pub struct NullObserver;

impl TrialObserver for NullObserver {}

#[derive(Debug, Clone)]
pub struct TrialSetup {
    pub trial_index: usize,
    pub seed: u64,
    pub task: Task,
    pub world: WorldState,
    pub pipeline: PerceptionPipeline,
    pub models: Arc<BTreeMap<String, ModelPrior>>,
    pub calibration: HandEyeCalibration,
    pub motion: MotionConfig,
    pub loop_mode: LoopMode,
    pub step_ceiling: usize,
    /// Initial tooltip, camera frame.
    pub home: Vec3,
}

impl TrialSetup {
    pub fn new(
        trial_index: usize,
        seed: u64,
        task: Task,
        world: WorldState,
        pipeline: PerceptionPipeline,
        loop_mode: LoopMode,
    ) -> Self {
        let models = Arc::new(model_library(&world.config.geometry));
        let home = Vec3::new(0.0, 0.0, world.camera_pose.translation().z - 0.1);
        Self {
            trial_index,
            seed,
            task,
            world,
            pipeline,
            models,
            calibration: HandEyeCalibration::default(),
            motion: MotionConfig::default(),
            loop_mode,
            step_ceiling: DEFAULT_STEP_CEILING,
            home,
        }
    }
}

struct Stop {
    cause: Option<StopCause>,
    reason: Option<String>,
}

impl Stop {
    fn success() -> Self {
        Self {
            cause: None,
            reason: None,
        }
    }

    fn fail(cause: StopCause, reason: impl Into<String>) -> Self {
        Self {
            cause: Some(cause),
            reason: Some(reason.into()),
        }
    }
}

/// Outcome text, ids seen by a fresh observation, and a stop that ends the trial after logging.
type Executed = (String, Option<BTreeSet<u32>>, Option<Stop>);

struct Trial<'a> {
    setup: &'a TrialSetup,
    world: WorldState,
    robot: Robot,
    store: TwinStore,
    state: ProtocolState,
    history: Vec<HistoryEntry>,
    trace: Vec<TraceEntry>,
    clock: f64,
    steps: usize,
    frames: u64,
    /// Required objects not detected at the latest observation.
    missing: Vec<String>,
    last_reach: Option<ReachMode>,
    pick_failed: bool,
}

fn mm(v: &Vec3) -> String {
    format!("({:.1}, {:.1}, {:.1}) mm", v.x * 1000.0, v.y * 1000.0, v.z * 1000.0)
}

impl<'a> Trial<'a> {
    fn new(setup: &'a TrialSetup) -> Self {
        let robot = Robot::new(
            setup.calibration,
            setup.motion,
            rng::stream(setup.seed, Substream::Execution),
            setup.home,
        );
        Self {
            setup,
            world: setup.world.clone(),
            robot,
            store: TwinStore::default(),
            state: ProtocolState::new(),
            history: Vec::new(),
            trace: Vec::new(),
            clock: 0.0,
            steps: 0,
            frames: 0,
            missing: Vec::new(),
            last_reach: None,
            pick_failed: false,
        }
    }

    fn push(&mut self, event: TraceEvent, observer: &mut dyn TrialObserver) {
        let entry = TraceEntry {
            t: self.clock,
            step: self.steps,
            event,
        };
        observer.on_trace(&entry);
        self.trace.push(entry);
    }

    fn context(&self) -> PlannerContext {
        let mut ctx = PlannerContext::new(self.setup.task.command(), self.setup.loop_mode);
        ctx.scene = self.store.serialize();
        ctx.history = self.history.clone();
        ctx
    }

    fn observe(&mut self, observer: &mut dyn TrialObserver) -> Result<(String, BTreeSet<u32>), Stop> {
        self.frames += 1;
        self.clock += OBSERVE_TIME;
        let setup = self.setup;
        let cast = raycast(&self.world);
        let frame = frame_from_cast(&self.world, &cast, rng::mix(setup.seed, self.frames), self.frames);
        let prompts = prompts_for(&self.world);
        let handle = WorldHandle {
            world: &self.world,
            cast: &cast,
        };
        let perception = perceive(&frame, &prompts, &setup.pipeline, handle, &setup.models, setup.seed, self.clock)
            .map_err(|e| Stop::fail(StopCause::Execution, format!("perception failed: {e}")))?;
        self.store
            .update(&perception.scene)
            .map_err(|e| Stop::fail(StopCause::Execution, e.to_string()))?;
        let snapshot = self.store.snapshot();
        observer.on_observation(&frame, &snapshot);
        let ids = snapshot.twins.iter().filter(|t| t.detected).map(|t| t.object_id).collect();
        let (detected, undetected): (Vec<_>, Vec<_>) = snapshot.twins.iter().partition(|t| t.detected);
        let detected: Vec<String> = detected.into_iter().map(|t| t.name.clone()).collect();
        let undetected: Vec<String> = undetected.into_iter().map(|t| t.name.clone()).collect();
        self.missing = setup
            .task
            .required_objects()
            .into_iter()
            .filter(|n| !detected.contains(n))
            .collect();
        let outcome = format!(
            "frame {}: {} detected, undetected: [{}]",
            self.frames,
            detected.len(),
            undetected.join(", ")
        );
        self.push(
            TraceEvent::Observation {
                frame_id: self.frames,
                detected,
                undetected,
            },
            observer,
        );
        Ok((outcome, ids))
    }

    fn travel(&mut self, before: Vec3) {
        self.clock += (self.robot.tooltip_camera() - before).norm() / TOOL_SPEED;
    }

    fn reach(&mut self, object_id: u32, mode: ReachMode) -> Result<String, Stop> {
        let exec = |e: String| Stop::fail(StopCause::Execution, e);
        let twin = self
            .store
            .get(object_id)
            .cloned()
            .ok_or_else(|| exec(format!("object {object_id} vanished from the twin store")))?;
        let models = &self.setup.models;
        let model = models
            .get(&twin.model_id)
            .ok_or_else(|| exec(format!("no model prior `{}`", twin.model_id)))?;
        let held_model = match mode {
            ReachMode::Pick => None,
            ReachMode::Place => self
                .state
                .held_object_id
                .and_then(|id| self.store.get(id))
                .and_then(|t| models.get(&t.model_id)),
        };
        let target = reach_pose(&twin, mode, model, held_model, &self.setup.motion).map_err(|e| exec(e.to_string()))?;
        let before = self.robot.tooltip_camera();
        self.world = self
            .robot
            .two_stage_reach(&self.world, &target)
            .map_err(|e| exec(e.to_string()))?;
        self.travel(before);
        self.last_reach = Some(mode);
        Ok(format!("tooltip at {}", mm(&self.robot.tooltip_camera())))
    }

    fn set_jaw(&mut self, jaw: Jaw) -> Result<JawOutcome, Stop> {
        let (world, outcome) = self
            .robot
            .set_jaw(&self.world, jaw)
            .map_err(|e| Stop::fail(StopCause::Execution, e.to_string()))?;
        self.world = world;
        self.clock += JAW_TIME;
        Ok(outcome)
    }

    fn pick(&mut self) -> Result<String, Stop> {
        let outcome = self.set_jaw(Jaw::Closed)?;
        let wanted = self.setup.task.pick_object();
        self.pick_failed = self.robot.state.held_object.as_deref() != Some(wanted.as_str());
        Ok(match outcome {
            JawOutcome::World(StepOutcome::Grasped { object, distance }) => {
                format!("grasped {object} ({:.1} mm from grasp point)", distance * 1000.0)
            }
            JawOutcome::World(StepOutcome::GraspMissed { .. }) => "grasp missed: jaw closed on nothing".into(),
            other => format!("{other:?}"),
        })
    }

    fn release(&mut self) -> Result<(String, Stop), Stop> {
        let outcome = self.set_jaw(Jaw::Open)?;
        let task = &self.setup.task;
        let done = match (task, &outcome) {
            (Task::PegTransfer { block, peg }, _) => {
                let name = crate::scene::block_name(block);
                self.world.objects.get(&name).and_then(|o| o.seated_on_peg) == Some(*peg)
            }
            (Task::GauzeRetrieval, JawOutcome::World(StepOutcome::Retrieved { object })) => object == "gauze",
            _ => false,
        };
        let text = match &outcome {
            JawOutcome::World(StepOutcome::Seated { object, peg }) => {
                format!("{object} seated on {}", crate::scene::peg_name(*peg))
            }
            JawOutcome::World(StepOutcome::Dropped { object }) => format!("{object} dropped"),
            JawOutcome::World(StepOutcome::Retrieved { object }) => format!("{object} retrieved"),
            JawOutcome::World(StepOutcome::ReleasedNothing) => "released nothing".into(),
            other => format!("{other:?}"),
        };
        let stop = if done {
            Stop::success()
        } else {
            Stop::fail(StopCause::Execution, format!("task not achieved: {text}"))
        };
        Ok((text, stop))
    }

    /// Where the tooltip should be after the latest reach, camera frame.
    fn true_target(&self) -> Option<Vec3> {
        let w = &self.world;
        match self.last_reach? {
            ReachMode::Pick => Some(w.world_to_camera(&w.grasp_point_world(&self.setup.task.pick_object()).ok()?)),
            ReachMode::Place => {
                let Task::PegTransfer { peg, .. } = &self.setup.task else {
                    return None;
                };
                let (top, up) = w.peg_top(*peg)?;
                let height = (w.grasp_offset(ObjectClass::Block) - w.place_offset(ObjectClass::Block)).norm();
                // any release point on the peg axis above the top seats the block
                let tip = self.robot.tooltip_world(w);
                let along = (tip - top).dot(&up).max(height + self.setup.motion.place_clearance);
                Some(w.world_to_camera(&(top + up * along)))
            }
        }
    }

    fn execute(&mut self, action: &Action, observer: &mut dyn TrialObserver) -> Result<Executed, Stop> {
        Ok(match action {
            Action::GetObservations => {
                let (text, ids) = self.observe(observer)?;
                (text, Some(ids), None)
            }
            Action::ReachTarget { object_id, mode } => (self.reach(*object_id, *mode)?, None, None),
            Action::PickTarget => (self.pick()?, None, None),
            Action::ReleaseObject => {
                let (text, stop) = self.release()?;
                (text, None, Some(stop))
            }
            Action::AdjustPosition { direction } => {
                self.world = self.robot.adjust_tooltip(&self.world, *direction);
                self.clock += crate::robot::ADJUST_STEP / TOOL_SPEED;
                (format!("tooltip at {}", mm(&self.robot.tooltip_camera())), None, None)
            }
            Action::Inquiry { question } => {
                if self.setup.loop_mode == LoopMode::Open {
                    return Err(Stop::fail(StopCause::Unanswered, format!("unanswered inquiry: {question}")));
                }
                ("inquiry sent to the supervisor".into(), None, None)
            }
        })
    }

    fn request_kind(&self, action: &Action) -> Option<RequestKind> {
        match action {
            Action::ReachTarget { mode, .. } => Some(RequestKind::AfterReach { mode: *mode }),
            Action::PickTarget => Some(RequestKind::AfterPick),
            Action::AdjustPosition { .. } => Some(RequestKind::AfterAdjust),
            Action::Inquiry { .. } => Some(RequestKind::Inquiry),
            _ => None,
        }
    }

    fn apply_feedback(&mut self, feedback: &Feedback) -> Result<(), Stop> {
        match feedback {
            Feedback::Adjust { .. } if self.state.adjust_budget_remaining == 0 => Err(Stop::fail(
                StopCause::SupervisorAbort,
                "adjustment requested with the budget exhausted",
            )),
            Feedback::Redo | Feedback::RedetectTarget => {
                self.state = self
                    .state
                    .apply_feedback(feedback)
                    .map_err(|v| Stop::fail(StopCause::SupervisorAbort, v.reason))?;
                if self.robot.state.jaw == Jaw::Closed {
                    self.set_jaw(Jaw::Open)?;
                }
                self.last_reach = None;
                self.pick_failed = false;
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn step(&mut self, planner: &mut dyn Planner, supervisor: &mut dyn Supervisor, observer: &mut dyn TrialObserver) -> Option<Stop> {
        if self.steps >= self.setup.step_ceiling {
            return Some(Stop::fail(
                StopCause::StepCeiling,
                format!("step ceiling of {} actions reached", self.setup.step_ceiling),
            ));
        }
        let ctx = self.context();
        let action = match planner.next_action(&ctx, &self.state) {
            Ok(a) => a,
            Err(e) => {
                self.push(TraceEvent::PlannerFailure { reason: e.to_string() }, observer);
                return Some(Stop::fail(StopCause::PlannerFailure, e.to_string()));
            }
        };
        self.steps += 1;
        if let Err(v) = self.state.validate(&action) {
            self.push(
                TraceEvent::Action {
                    action,
                    accepted: false,
                    outcome: format!("rejected: {}", v.reason),
                },
                observer,
            );
            return Some(Stop::fail(StopCause::ProtocolViolation, v.reason));
        }
        let (outcome, detected, stop) = match self.execute(&action, observer) {
            Ok(r) => r,
            Err(stop) => {
                self.push(
                    TraceEvent::Action {
                        action,
                        accepted: true,
                        outcome: stop.reason.clone().unwrap_or_default(),
                    },
                    observer,
                );
                return Some(stop);
            }
        };
        observer.on_tooltip(&self.robot.tooltip_camera(), self.robot.state.jaw);
        self.state = self.state.advance(&action, detected.as_ref());
        self.push(
            TraceEvent::Action {
                action: action.clone(),
                accepted: true,
                outcome: outcome.clone(),
            },
            observer,
        );
        self.history.push(HistoryEntry {
            action: action.clone(),
            outcome,
            feedback: None,
        });
        if stop.is_some() {
            return stop;
        }
        if self.setup.loop_mode == LoopMode::Open {
            return None;
        }
        let kind = self.request_kind(&action)?;
        let request = FeedbackRequest {
            step: self.steps,
            action,
            kind,
            tooltip: self.robot.tooltip_camera(),
            true_target: self.true_target(),
            pick_failed: kind == RequestKind::AfterPick && self.pick_failed,
            budget_remaining: self.state.adjust_budget_remaining,
        };
        self.clock += FEEDBACK_TIME;
        let feedback = match supervisor.feedback(&request) {
            SupervisorDecision::GiveUp { reason } => {
                self.push(TraceEvent::SupervisorAbort { reason: reason.clone() }, observer);
                return Some(Stop::fail(StopCause::SupervisorAbort, reason));
            }
            SupervisorDecision::Feedback { feedback } => feedback,
        };
        if let Err(stop) = self.apply_feedback(&feedback) {
            return Some(stop);
        }
        self.push(
            TraceEvent::Feedback {
                feedback: feedback.clone(),
                budget_remaining: self.state.adjust_budget_remaining,
            },
            observer,
        );
        if let Some(last) = self.history.last_mut() {
            last.feedback = Some(feedback);
        }
        None
    }

    fn finish(mut self, stop: Stop, observer: &mut dyn TrialObserver) -> TrialRecord {
        let success = stop.cause.is_none();
        let failure_mode = match stop.cause {
            None => FailureMode::None,
            Some(cause) => classify_failure(cause, !self.missing.is_empty()),
        };
        let reason = match (&stop.reason, failure_mode) {
            (Some(r), FailureMode::De) => Some(format!("{r} (undetected: {})", self.missing.join(", "))),
            (r, _) => r.clone(),
        };
        self.push(
            TraceEvent::End {
                success,
                failure_mode,
                reason: reason.clone(),
            },
            observer,
        );
        TrialRecord {
            trial_index: self.setup.trial_index,
            seed: self.setup.seed,
            task: self.setup.task.command(),
            success,
            planning_steps: self.steps,
            adjustments_used: self.state.budget_used(),
            failure_mode,
            failure_reason: reason,
            action_trace: self.trace,
            robot_log: self.robot.log,
            wall_time: self.clock,
        }
    }
}

/// Runs one trial to completion; never panics on planner or supervisor misbehaviour.
pub fn run_trial_loop(
    setup: &TrialSetup,
    planner: &mut dyn Planner,
    supervisor: &mut dyn Supervisor,
    observer: &mut dyn TrialObserver,
) -> TrialRecord {
    let mut trial = Trial::new(setup);
    loop {
        if let Some(stop) = trial.step(planner, supervisor, observer) {
            return trial.finish(stop, observer);
        }
    }
}
