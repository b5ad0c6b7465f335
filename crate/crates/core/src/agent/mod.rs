//! Step-by-step planner over the six-action vocabulary.

pub mod llm;
pub mod protocol;
pub mod rule;
pub mod trial;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::robot::{Direction, ReachMode};
pub use llm::{ChatMessage, ChatRequest, ChatTransport, HttpTransport, LlmPlanner, StubTransport};
pub use protocol::{Phase, ProtocolState, ProtocolViolation, ViolationCode, ADJUST_BUDGET};
pub use rule::{RulePlanner, Task};
pub use trial::{
    classify_failure, StopCause,
    run_trial_loop, FailureMode, FeedbackRequest, NullObserver, RequestKind, Supervisor, SupervisorDecision,
    TraceEntry, TraceEvent, TrialObserver, TrialRecord, TrialSetup,
};

/// Versioned action catalog given to language-model planners.
pub const ACTION_CATALOG: &str = include_str!("../../../../docs/action-catalog.md");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", content = "arguments")]
pub enum Action {
    GetObservations,
    ReachTarget { object_id: u32, mode: ReachMode },
    PickTarget,
    ReleaseObject,
    AdjustPosition { direction: Direction },
    Inquiry { question: String },
}

impl Action {
    pub fn name(&self) -> &'static str {
        match self {
            Action::GetObservations => "GetObservations",
            Action::ReachTarget { .. } => "ReachTarget",
            Action::PickTarget => "PickTarget",
            Action::ReleaseObject => "ReleaseObject",
            Action::AdjustPosition { .. } => "AdjustPosition",
            Action::Inquiry { .. } => "Inquiry",
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::ReachTarget { object_id, mode } => {
                let mode = if *mode == ReachMode::Pick { "pick" } else { "place" };
                write!(f, "ReachTarget({object_id}, {mode})")
            }
            Action::AdjustPosition { direction } => write!(f, "AdjustPosition({direction})"),
            Action::Inquiry { question } => write!(f, "Inquiry({question:?})"),
            other => f.write_str(other.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Feedback {
    Confirm,
    Adjust { direction: Direction },
    Redo,
    RedetectTarget,
    Answer { text: String },
}

impl Feedback {
    /// Redo and re-detection share the adjustment budget with AdjustPosition.
    pub fn consumes_budget(&self) -> bool {
        matches!(self, Feedback::Redo | Feedback::RedetectTarget)
    }
}

impl fmt::Display for Feedback {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Feedback::Confirm => f.write_str("confirm"),
            Feedback::Adjust { direction } => write!(f, "adjust {direction}"),
            Feedback::Redo => f.write_str("redo"),
            Feedback::RedetectTarget => f.write_str("redetect target"),
            Feedback::Answer { text } => write!(f, "answer: {text}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LoopMode {
    Open,
    #[default]
    Closed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub action: Action,
    pub outcome: String,
    pub feedback: Option<Feedback>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannerContext {
    pub task_command: String,
    /// Serialized scene representation, as the planner sees it.
    pub scene: String,
    pub history: Vec<HistoryEntry>,
    pub available_actions: &'static str,
    pub loop_mode: LoopMode,
}

impl PlannerContext {
    pub fn new(task_command: impl Into<String>, loop_mode: LoopMode) -> Self {
        Self {
            task_command: task_command.into(),
            scene: String::new(),
            history: Vec::new(),
            available_actions: ACTION_CATALOG,
            loop_mode,
        }
    }

    pub fn latest_feedback(&self) -> Option<&Feedback> {
        self.history.last().and_then(|h| h.feedback.as_ref())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlannerError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("no valid action after {attempts} attempts: {last_error}")]
    Malformed { attempts: usize, last_error: String },
    #[error("planner has no further actions")]
    Exhausted,
    /// A failure reproduced from a recorded trace.
    #[error("{0}")]
    Recorded(String),
}

pub trait Planner: Send {
    fn next_action(&mut self, ctx: &PlannerContext, state: &ProtocolState) -> Result<Action, PlannerError>;
}

/// Plays back a fixed action list, for trace replay.
#[derive(Debug, Clone)]
pub struct ReplayPlanner {
    actions: std::collections::VecDeque<Action>,
    final_error: Option<String>,
}

impl ReplayPlanner {
    pub fn new(actions: impl IntoIterator<Item = Action>) -> Self {
        Self {
            actions: actions.into_iter().collect(),
            final_error: None,
        }
    }

    /// Error reported once the actions run out, instead of [`PlannerError::Exhausted`].
    pub fn with_final_error(mut self, reason: impl Into<String>) -> Self {
        self.final_error = Some(reason.into());
        self
    }
}

impl Planner for ReplayPlanner {
    fn next_action(&mut self, _ctx: &PlannerContext, _state: &ProtocolState) -> Result<Action, PlannerError> {
        match (self.actions.pop_front(), &self.final_error) {
            (Some(a), _) => Ok(a),
            (None, Some(reason)) => Err(PlannerError::Recorded(reason.clone())),
            (None, None) => Err(PlannerError::Exhausted),
        }
    }
}
