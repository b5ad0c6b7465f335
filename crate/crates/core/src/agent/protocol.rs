//! Protocol state machine guarding the action order and the shared budget.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{Action, Feedback, ReachMode};

/// Adjustments, redos and re-detections allowed per trial.
pub const ADJUST_BUDGET: u8 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Phase {
    Idle,
    Observed,
    ReachedPick,
    Holding,
    ReachedPlace,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationCode {
    TrialComplete,
    NotObserved,
    UnknownObject,
    AlreadyHolding,
    NotAtPick,
    NotHolding,
    BudgetExhausted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("{code:?}: {reason}")]
pub struct ProtocolViolation {
    pub code: ViolationCode,
    pub reason: String,
}

fn violation(code: ViolationCode, reason: impl Into<String>) -> ProtocolViolation {
    ProtocolViolation {
        code,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolState {
    pub phase: Phase,
    pub held_object_id: Option<u32>,
    pub adjust_budget_remaining: u8,
    /// Object ids detected at the latest observation.
    pub detected_ids: BTreeSet<u32>,
    /// Object of the latest pick reach.
    pub pick_target: Option<u32>,
}

impl Default for ProtocolState {
    fn default() -> Self {
        Self::new()
    }
}

impl ProtocolState {
    pub fn new() -> Self {
        Self {
            phase: Phase::Idle,
            held_object_id: None,
            adjust_budget_remaining: ADJUST_BUDGET,
            detected_ids: BTreeSet::new(),
            pick_target: None,
        }
    }

    pub fn is_holding(&self) -> bool {
        matches!(self.phase, Phase::Holding | Phase::ReachedPlace)
    }

    pub fn budget_used(&self) -> u8 {
        ADJUST_BUDGET - self.adjust_budget_remaining
    }

    /// Accepts or rejects `action` without touching the state.
    pub fn validate(&self, action: &Action) -> Result<(), ProtocolViolation> {
        use Phase::*;
        if self.phase == Done {
            return Err(violation(ViolationCode::TrialComplete, "trial already complete"));
        }
        match action {
            Action::GetObservations | Action::Inquiry { .. } => Ok(()),
            Action::ReachTarget { object_id, mode } => {
                if self.phase == Idle {
                    return Err(violation(ViolationCode::NotObserved, "reach before any observation"));
                }
                if !self.detected_ids.contains(object_id) {
                    return Err(violation(
                        ViolationCode::UnknownObject,
                        format!("object {object_id} is not a detected object"),
                    ));
                }
                match mode {
                    ReachMode::Pick if self.is_holding() => {
                        Err(violation(ViolationCode::AlreadyHolding, "pick reach while holding an object"))
                    }
                    ReachMode::Place if !self.is_holding() => {
                        Err(violation(ViolationCode::NotHolding, "place reach without a held object"))
                    }
                    _ => Ok(()),
                }
            }
            Action::PickTarget => match self.phase {
                ReachedPick => Ok(()),
                Holding | ReachedPlace => Err(violation(ViolationCode::AlreadyHolding, "pick while already holding")),
                _ => Err(violation(ViolationCode::NotAtPick, "pick requires a completed pick reach")),
            },
            Action::ReleaseObject => {
                if self.is_holding() {
                    Ok(())
                } else {
                    Err(violation(ViolationCode::NotHolding, "release without a held object"))
                }
            }
            Action::AdjustPosition { .. } => {
                if self.adjust_budget_remaining > 0 {
                    Ok(())
                } else {
                    Err(violation(ViolationCode::BudgetExhausted, "adjustment budget exhausted"))
                }
            }
        }
    }

    /// State after an accepted action. `detected` replaces the detected set on observation.
    pub fn advance(&self, action: &Action, detected: Option<&BTreeSet<u32>>) -> ProtocolState {
        let mut next = self.clone();
        match action {
            Action::GetObservations => {
                if let Some(ids) = detected {
                    next.detected_ids = ids.clone();
                }
                if !self.is_holding() {
                    next.phase = Phase::Observed;
                }
            }
            Action::ReachTarget { object_id, mode } => match mode {
                ReachMode::Pick => {
                    next.phase = Phase::ReachedPick;
                    next.pick_target = Some(*object_id);
                }
                ReachMode::Place => next.phase = Phase::ReachedPlace,
            },
            Action::PickTarget => {
                next.phase = Phase::Holding;
                next.held_object_id = self.pick_target;
            }
            Action::ReleaseObject => {
                next.phase = Phase::Done;
                next.held_object_id = None;
            }
            Action::AdjustPosition { .. } => {
                next.adjust_budget_remaining = self.adjust_budget_remaining.saturating_sub(1);
            }
            Action::Inquiry { .. } => {}
        }
        next
    }

    /// Redo and re-detection restart from a fresh observation and cost one unit of budget.
    pub fn apply_feedback(&self, feedback: &Feedback) -> Result<ProtocolState, ProtocolViolation> {
        if !feedback.consumes_budget() {
            return Ok(self.clone());
        }
        if self.phase == Phase::Done {
            return Err(violation(ViolationCode::TrialComplete, "trial already complete"));
        }
        if self.adjust_budget_remaining == 0 {
            return Err(violation(ViolationCode::BudgetExhausted, format!("{feedback} with no budget left")));
        }
        Ok(ProtocolState {
            phase: Phase::Idle,
            held_object_id: None,
            adjust_budget_remaining: self.adjust_budget_remaining - 1,
            detected_ids: BTreeSet::new(),
            pick_target: None,
        })
    }

    pub fn invariants_hold(&self) -> bool {
        self.held_object_id.is_some() == self.is_holding() && self.adjust_budget_remaining <= ADJUST_BUDGET
    }
}
