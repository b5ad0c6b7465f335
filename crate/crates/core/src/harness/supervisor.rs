//! Scripted, replayed and interactive supervisors behind one feedback contract.

use std::collections::VecDeque;
use std::sync::{Arc, Condvar, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{Feedback, FeedbackRequest, RequestKind, Supervisor, SupervisorDecision, TraceEntry, TraceEvent};
use crate::geometry::Vec3;
use crate::robot::Direction;

fn give_up(reason: impl Into<String>) -> SupervisorDecision {
    SupervisorDecision::GiveUp { reason: reason.into() }
}

fn send(feedback: Feedback) -> SupervisorDecision {
    SupervisorDecision::Feedback { feedback }
}

/// Direction that reduces the largest component of `error` (target minus tooltip, camera frame).
pub fn correcting_direction(error: &Vec3) -> Direction {
    let axis = error.iamax();
    let positive = error[axis] > 0.0;
    match (axis, positive) {
        (0, true) => Direction::Right,
        (0, false) => Direction::Left,
        (1, true) => Direction::Down,
        (1, false) => Direction::Up,
        (_, true) => Direction::Forward,
        (_, false) => Direction::Back,
    }
}

/// The oracle rule: confirm within `tau` (L-infinity), otherwise step toward the target.
pub fn scripted_feedback(true_target: &Vec3, tooltip: &Vec3, budget: u8, tau: f64, pick_failed: bool) -> SupervisorDecision {
    if pick_failed {
        return if budget > 0 {
            send(Feedback::Redo)
        } else {
            give_up("pick failed with no budget left for a redo")
        };
    }
    let e = true_target - tooltip;
    if e.amax() <= tau {
        return send(Feedback::Confirm);
    }
    if budget == 0 {
        return give_up(format!(
            "tooltip still {:.1} mm off target with the adjustment budget exhausted",
            e.amax() * 1000.0
        ));
    }
    send(Feedback::Adjust {
        direction: correcting_direction(&e),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScriptedSupervisor {
    pub tau: f64,
}

impl Default for ScriptedSupervisor {
    fn default() -> Self {
        Self { tau: 0.002 }
    }
}

impl Supervisor for ScriptedSupervisor {
    fn feedback(&mut self, request: &FeedbackRequest) -> SupervisorDecision {
        match request.kind {
            RequestKind::Inquiry => {
                if request.budget_remaining > 0 {
                    send(Feedback::RedetectTarget)
                } else {
                    give_up("inquiry with no budget left for re-detection")
                }
            }
            RequestKind::AfterPick if !request.pick_failed => send(Feedback::Confirm),
            _ => match request.true_target {
                Some(target) => scripted_feedback(
                    &target,
                    &request.tooltip,
                    request.budget_remaining,
                    self.tau,
                    request.pick_failed,
                ),
                None => send(Feedback::Confirm),
            },
        }
    }
}

/// Plays back the decisions of a recorded trial.
#[derive(Debug, Clone, Default)]
pub struct ReplaySupervisor {
    decisions: VecDeque<SupervisorDecision>,
}

impl ReplaySupervisor {
    pub fn new(decisions: impl IntoIterator<Item = SupervisorDecision>) -> Self {
        Self {
            decisions: decisions.into_iter().collect(),
        }
    }

    pub fn from_trace(trace: &[TraceEntry]) -> Self {
        Self::new(trace.iter().filter_map(|e| match &e.event {
            TraceEvent::Feedback { feedback, .. } => Some(send(feedback.clone())),
            TraceEvent::SupervisorAbort { reason } => Some(give_up(reason.clone())),
            _ => None,
        }))
    }
}

impl Supervisor for ReplaySupervisor {
    fn feedback(&mut self, _request: &FeedbackRequest) -> SupervisorDecision {
        self.decisions
            .pop_front()
            .unwrap_or_else(|| give_up("replay script has no further feedback"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "error", rename_all = "snake_case")]
pub enum ConsoleError {
    #[error("no feedback request is pending")]
    NoPendingRequest,
    #[error("adjustment budget exhausted; the trial is marked failed")]
    BudgetExhausted,
    #[error("the console session is closed")]
    Closed,
}

#[derive(Debug, Default)]
struct Slot {
    pending: Option<FeedbackRequest>,
    decision: Option<SupervisorDecision>,
    closed: bool,
}

/// Rendezvous between a blocked trial loop and a human posting feedback.
#[derive(Debug, Default)]
pub struct ConsoleChannel {
    slot: Mutex<Slot>,
    ready: Condvar,
}

impl ConsoleChannel {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn pending(&self) -> Option<FeedbackRequest> {
        self.slot.lock().expect("console lock").pending.clone()
    }

    /// Answers the pending request. A budget-consuming answer with no budget left is
    /// rejected and ends the trial.
    pub fn submit(&self, feedback: Feedback) -> Result<(), ConsoleError> {
        let mut slot = self.slot.lock().expect("console lock");
        if slot.closed {
            return Err(ConsoleError::Closed);
        }
        let request = slot.pending.take().ok_or(ConsoleError::NoPendingRequest)?;
        let costs = matches!(feedback, Feedback::Adjust { .. }) || feedback.consumes_budget();
        let result = if costs && request.budget_remaining == 0 {
            slot.decision = Some(give_up(format!("{feedback} rejected: adjustment budget exhausted")));
            Err(ConsoleError::BudgetExhausted)
        } else {
            slot.decision = Some(send(feedback));
            Ok(())
        };
        self.ready.notify_all();
        result
    }

    /// Unblocks a waiting trial; it gives up.
    pub fn close(&self) {
        let mut slot = self.slot.lock().expect("console lock");
        slot.closed = true;
        slot.pending = None;
        self.ready.notify_all();
    }

    /// Publishes `request`, calls `announce` once it can be answered, then blocks for the answer.
    fn wait(&self, request: &FeedbackRequest, announce: impl FnOnce(&FeedbackRequest)) -> SupervisorDecision {
        let mut slot = self.slot.lock().expect("console lock");
        if slot.closed {
            return give_up("console closed");
        }
        slot.decision = None;
        slot.pending = Some(request.clone());
        drop(slot);
        announce(request);
        let mut slot = self.slot.lock().expect("console lock");
        self.ready.notify_all();
        loop {
            if let Some(d) = slot.decision.take() {
                return d;
            }
            if slot.closed {
                return give_up("console closed");
            }
            slot = self.ready.wait(slot).expect("console lock");
        }
    }
}

type RequestHook = Box<dyn FnMut(&FeedbackRequest) + Send>;

/// Blocks the trial loop until feedback arrives on the console channel.
pub struct InteractiveSupervisor {
    channel: Arc<ConsoleChannel>,
    on_request: Option<RequestHook>,
}

impl InteractiveSupervisor {
    pub fn new(channel: Arc<ConsoleChannel>) -> Self {
        Self {
            channel,
            on_request: None,
        }
    }

    /// Called with every request once it is pending on the channel, e.g. to push it to an event stream.
    pub fn on_request(mut self, hook: impl FnMut(&FeedbackRequest) + Send + 'static) -> Self {
        self.on_request = Some(Box::new(hook));
        self
    }
}

impl Supervisor for InteractiveSupervisor {
    fn feedback(&mut self, request: &FeedbackRequest) -> SupervisorDecision {
        let hook = &mut self.on_request;
        self.channel.wait(request, |r| {
            if let Some(hook) = hook.as_mut() {
                hook(r);
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::Action;
    use crate::robot::ReachMode;

    #[test]
    fn largest_component_decides() {
        let d = scripted_feedback(&Vec3::new(0.004, -0.001, 0.0), &Vec3::zeros(), 5, 0.002, false);
        assert_eq!(
            d,
            send(Feedback::Adjust {
                direction: Direction::Right
            })
        );
        let d = scripted_feedback(&Vec3::new(0.001, 0.001, 0.001), &Vec3::zeros(), 5, 0.002, false);
        assert_eq!(d, send(Feedback::Confirm));
        assert_eq!(correcting_direction(&Vec3::new(0.0, -0.003, 0.001)), Direction::Up);
        assert_eq!(correcting_direction(&Vec3::new(0.0, 0.0, -0.003)), Direction::Back);
        assert!(matches!(
            scripted_feedback(&Vec3::new(0.01, 0.0, 0.0), &Vec3::zeros(), 0, 0.002, false),
            SupervisorDecision::GiveUp { .. }
        ));
        assert_eq!(scripted_feedback(&Vec3::zeros(), &Vec3::zeros(), 1, 0.002, true), send(Feedback::Redo));
    }

    #[test]
    fn six_three_converges_in_three() {
        let target = Vec3::new(0.006, 0.003, 0.0);
        let mut tip = Vec3::zeros();
        let mut budget = 5u8;
        let mut steps = 0;
        loop {
            match scripted_feedback(&target, &tip, budget, 0.002, false) {
                SupervisorDecision::Feedback {
                    feedback: Feedback::Adjust { direction },
                } => {
                    tip += direction.camera_axis() * 0.003;
                    budget -= 1;
                    steps += 1;
                }
                SupervisorDecision::Feedback {
                    feedback: Feedback::Confirm,
                } => break,
                other => panic!("{other:?}"),
            }
        }
        assert_eq!(steps, 3);
    }

    fn request(budget: u8) -> FeedbackRequest {
        FeedbackRequest {
            step: 2,
            action: Action::ReachTarget {
                object_id: 1,
                mode: ReachMode::Pick,
            },
            kind: RequestKind::AfterReach { mode: ReachMode::Pick },
            tooltip: Vec3::zeros(),
            true_target: None,
            pick_failed: false,
            budget_remaining: budget,
        }
    }

    #[test]
    fn console_rendezvous() {
        let channel = ConsoleChannel::new();
        assert_eq!(channel.submit(Feedback::Confirm), Err(ConsoleError::NoPendingRequest));
        let mut sup = InteractiveSupervisor::new(channel.clone());
        let waiter = std::thread::spawn(move || sup.feedback(&request(3)));
        while channel.pending().is_none() {
            std::thread::yield_now();
        }
        channel
            .submit(Feedback::Adjust {
                direction: Direction::Left,
            })
            .unwrap();
        assert_eq!(
            waiter.join().unwrap(),
            send(Feedback::Adjust {
                direction: Direction::Left
            })
        );
        assert_eq!(channel.submit(Feedback::Confirm), Err(ConsoleError::NoPendingRequest));
    }

    #[test]
    fn console_rejects_adjust_without_budget() {
        let channel = ConsoleChannel::new();
        let mut sup = InteractiveSupervisor::new(channel.clone());
        let waiter = std::thread::spawn(move || sup.feedback(&request(0)));
        while channel.pending().is_none() {
            std::thread::yield_now();
        }
        assert_eq!(
            channel.submit(Feedback::Adjust {
                direction: Direction::Up
            }),
            Err(ConsoleError::BudgetExhausted)
        );
        assert!(matches!(waiter.join().unwrap(), SupervisorDecision::GiveUp { .. }));
    }
}
