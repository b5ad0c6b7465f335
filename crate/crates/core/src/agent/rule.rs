//! Deterministic reference planner and the fixed task grammar.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::protocol::{Phase, ProtocolState};
use super::{Action, Feedback, Planner, PlannerContext, PlannerError, ReachMode};
use crate::scene::{block_name, peg_name, PEG_COUNT};
use crate::twin::parse_scene;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum Task {
    /// `peg` is zero-based; the command text uses 1-based numbering.
    PegTransfer { block: String, peg: usize },
    GauzeRetrieval,
}

impl Task {
    /// Parses "move block <name> to peg <k>" or "pick up the gauze".
    pub fn parse(text: &str) -> Result<Task, String> {
        let norm = text.trim().trim_end_matches('.').to_ascii_lowercase();
        let words: Vec<&str> = norm.split_whitespace().collect();
        match words.as_slice() {
            ["pick", "up", "the", "gauze"] => Ok(Task::GauzeRetrieval),
            ["move", "block", name, "to", "peg", k] => {
                let k: usize = k.parse().map_err(|_| format!("peg number `{k}` is not an integer"))?;
                if !(1..=PEG_COUNT).contains(&k) {
                    return Err(format!("peg {k} is outside 1..={PEG_COUNT}"));
                }
                Ok(Task::PegTransfer {
                    block: name.to_string(),
                    peg: k - 1,
                })
            }
            _ => Err(format!(
                "`{}` does not match \"move block <name> to peg <k>\" or \"pick up the gauze\"",
                text.trim()
            )),
        }
    }

    pub fn command(&self) -> String {
        self.to_string()
    }

    /// Object picked up by the task.
    pub fn pick_object(&self) -> String {
        match self {
            Task::PegTransfer { block, .. } => block_name(block),
            Task::GauzeRetrieval => "gauze".into(),
        }
    }

    pub fn place_object(&self) -> Option<String> {
        match self {
            Task::PegTransfer { peg, .. } => Some(peg_name(*peg)),
            Task::GauzeRetrieval => None,
        }
    }

    /// Objects whose detection the task depends on.
    pub fn required_objects(&self) -> Vec<String> {
        let mut v = vec![self.pick_object()];
        v.extend(self.place_object());
        v
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Task::PegTransfer { block, peg } => write!(f, "move block {block} to peg {}", peg + 1),
            Task::GauzeRetrieval => f.write_str("pick up the gauze"),
        }
    }
}

/// Emits the canonical plan and follows supervisor feedback literally.
#[derive(Debug, Clone, Copy, Default)]
pub struct RulePlanner;

impl RulePlanner {
    pub fn plan(ctx: &PlannerContext, state: &ProtocolState) -> Action {
        let task = match Task::parse(&ctx.task_command) {
            Ok(t) => t,
            Err(e) => {
                return Action::Inquiry {
                    question: format!("I cannot interpret the task: {e}"),
                }
            }
        };
        match ctx.latest_feedback() {
            Some(Feedback::Adjust { direction }) => return Action::AdjustPosition { direction: *direction },
            Some(Feedback::Redo | Feedback::RedetectTarget) => return Action::GetObservations,
            _ => {}
        }
        let find = |name: &str| -> Result<u32, Action> {
            let scene = parse_scene(&ctx.scene).map_err(|e| Action::Inquiry {
                question: format!("the scene representation is unreadable ({e}); please re-detect"),
            })?;
            scene
                .twins
                .iter()
                .find(|t| t.name == name && t.detected)
                .map(|t| t.object_id)
                .ok_or_else(|| Action::Inquiry {
                    question: format!("{name} is not detected; please re-detect the target"),
                })
        };
        match state.phase {
            Phase::Idle => Action::GetObservations,
            Phase::Observed => match find(&task.pick_object()) {
                Ok(id) => Action::ReachTarget {
                    object_id: id,
                    mode: ReachMode::Pick,
                },
                Err(inquiry) => inquiry,
            },
            Phase::ReachedPick => Action::PickTarget,
            Phase::Holding => match task.place_object() {
                None => Action::ReleaseObject,
                Some(target) => match find(&target) {
                    Ok(id) => Action::ReachTarget {
                        object_id: id,
                        mode: ReachMode::Place,
                    },
                    Err(inquiry) => inquiry,
                },
            },
            Phase::ReachedPlace => Action::ReleaseObject,
            Phase::Done => Action::Inquiry {
                question: "the task is already complete".into(),
            },
        }
    }
}

impl Planner for RulePlanner {
    fn next_action(&mut self, ctx: &PlannerContext, state: &ProtocolState) -> Result<Action, PlannerError> {
        Ok(Self::plan(ctx, state))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{HistoryEntry, LoopMode};
    use crate::robot::Direction;

    const SCENE: &str = "scene frame=1 timestamp=0.0 objects=3\n\
        - id=1 label=block name=block_grey model=block detected=true stale=false position=(1.0, 2.0, 430.0) mm rotation=[1.0, 0.0, 0.0, 0.0]\n\
        - id=2 label=peg name=peg_7 model=peg detected=true stale=false position=(40.0, 2.0, 440.0) mm rotation=[1.0, 0.0, 0.0, 0.0]\n\
        - id=3 label=block name=block_blue model=block detected=false stale=false position=none\n";

    fn ctx(task: &str) -> PlannerContext {
        let mut c = PlannerContext::new(task, LoopMode::Closed);
        c.scene = SCENE.into();
        c
    }

    #[test]
    fn task_grammar() {
        assert_eq!(
            Task::parse("Move block grey to peg 7.").unwrap(),
            Task::PegTransfer {
                block: "grey".into(),
                peg: 6
            }
        );
        assert_eq!(Task::parse(" pick up the gauze ").unwrap(), Task::GauzeRetrieval);
        assert!(Task::parse("move block grey to peg 13").is_err());
        assert!(Task::parse("stack the blocks").is_err());
        let t = Task::PegTransfer {
            block: "red".into(),
            peg: 11,
        };
        assert_eq!(Task::parse(&t.command()).unwrap(), t);
    }

    #[test]
    fn fresh_trial_observes_first() {
        assert_eq!(
            RulePlanner::plan(&ctx("move block grey to peg 7"), &ProtocolState::new()),
            Action::GetObservations
        );
    }

    #[test]
    fn unparseable_task_inquires() {
        assert!(matches!(
            RulePlanner::plan(&ctx("juggle"), &ProtocolState::new()),
            Action::Inquiry { .. }
        ));
    }

    #[test]
    fn echoes_adjust_feedback() {
        let mut c = ctx("move block grey to peg 7");
        c.history.push(HistoryEntry {
            action: Action::ReachTarget {
                object_id: 1,
                mode: ReachMode::Pick,
            },
            outcome: "reached".into(),
            feedback: Some(Feedback::Adjust {
                direction: Direction::Left,
            }),
        });
        let s = ProtocolState::new().advance(&Action::GetObservations, Some(&[1, 2].into()));
        assert_eq!(
            RulePlanner::plan(&c, &s),
            Action::AdjustPosition {
                direction: Direction::Left
            }
        );
    }

    #[test]
    fn walks_the_canonical_plan() {
        let c = ctx("move block grey to peg 7");
        let mut s = ProtocolState::new();
        let mut actions = Vec::new();
        while s.phase != Phase::Done {
            let a = RulePlanner::plan(&c, &s);
            s.validate(&a).unwrap();
            s = s.advance(&a, Some(&[1, 2].into()));
            actions.push(a);
        }
        assert_eq!(actions.len(), 5);
        assert_eq!(
            actions[3],
            Action::ReachTarget {
                object_id: 2,
                mode: ReachMode::Place
            }
        );
    }

    #[test]
    fn missing_block_inquires() {
        let c = ctx("move block blue to peg 7");
        let s = ProtocolState::new().advance(&Action::GetObservations, Some(&[1, 2].into()));
        assert!(matches!(RulePlanner::plan(&c, &s), Action::Inquiry { .. }));
    }
}
