//! Seeded trial batches and their Table-I style aggregation.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, PlannerConfig, SupervisorConfig, TaskKind};
use super::supervisor::ScriptedSupervisor;
use super::HarnessError;
use crate::agent::llm::{HttpTransport, LlmPlanner, StubTransport};
use crate::agent::{
    run_trial_loop, FailureMode, NullObserver, Planner, RulePlanner, Supervisor, Task, TrialObserver, TrialRecord,
    TrialSetup,
};
use crate::rng::{self, Substream};
use crate::scene::{build_environment, ObjectClass, WorldState, PEG_COUNT};

/// Trial seeds are `base_seed + index`.
pub fn trial_seed(base_seed: u64, index: usize) -> u64 {
    base_seed.wrapping_add(index as u64)
}

/// Draws the block to move and a free target peg.
pub fn sample_task(world: &WorldState, kind: TaskKind, seed: u64) -> Task {
    match kind {
        TaskKind::GauzeRetrieval => Task::GauzeRetrieval,
        TaskKind::PegTransfer => {
            let mut rng = rng::stream(seed, Substream::TaskSampling);
            let blocks: Vec<&str> = world
                .objects
                .values()
                .filter(|o| o.class == ObjectClass::Block)
                .map(|o| o.color.name.as_str())
                .collect();
            let block = blocks.choose(&mut rng).expect("validated: at least one block");
            let free: Vec<usize> = (0..PEG_COUNT).filter(|&i| world.peg_occupant(i).is_none()).collect();
            let peg = *free.choose(&mut rng).expect("fewer blocks than pegs");
            Task::PegTransfer {
                block: block.to_string(),
                peg,
            }
        }
    }
}

pub fn prepare_trial(cfg: &ExperimentConfig, index: usize) -> Result<TrialSetup, HarnessError> {
    let seed = trial_seed(cfg.base_seed, index);
    let world = build_environment(&cfg.environment, seed).map_err(|e| HarnessError::Config(e.to_string()))?;
    let task = sample_task(&world, cfg.task, seed);
    let mut setup = TrialSetup::new(index, seed, task, world, cfg.pipeline.clone(), cfg.loop_mode);
    setup.motion = cfg.motion;
    setup.calibration = cfg.calibration;
    setup.step_ceiling = cfg.step_ceiling;
    Ok(setup)
}

pub fn make_planner(cfg: &PlannerConfig) -> Result<Box<dyn Planner>, HarnessError> {
    Ok(match cfg {
        PlannerConfig::Rule => Box::new(RulePlanner),
        PlannerConfig::Stub { responses } => Box::new(LlmPlanner::new(
            Arc::new(StubTransport::new(responses.clone())),
            "stub",
        )),
        PlannerConfig::Llm { endpoint, model } => Box::new(LlmPlanner::new(
            Arc::new(HttpTransport::with_env_token(endpoint.clone())),
            model.clone(),
        )),
    })
}

fn panic_message(payload: &(dyn std::any::Any + Send)) -> String {
    payload
        .downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| payload.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "unknown panic".into())
}

/// One trial with panics caught and recorded as planning failures.
pub fn run_trial_with(
    setup: &TrialSetup,
    planner: &mut dyn Planner,
    supervisor: &mut dyn Supervisor,
    observer: &mut dyn TrialObserver,
) -> TrialRecord {
    catch_unwind(AssertUnwindSafe(|| run_trial_loop(setup, planner, supervisor, observer))).unwrap_or_else(|payload| {
        TrialRecord::aborted(
            setup.trial_index,
            setup.seed,
            setup.task.command(),
            format!("trial panicked: {}", panic_message(payload.as_ref())),
        )
    })
}

/// Runs trial `index` of a scripted-supervisor experiment.
pub fn run_scripted_trial(cfg: &ExperimentConfig, index: usize) -> Result<TrialRecord, HarnessError> {
    let tau = match cfg.supervisor {
        SupervisorConfig::Scripted { tau } => tau,
        SupervisorConfig::Interactive => {
            return Err(HarnessError::Config(
                "interactive experiments run through the console service".into(),
            ))
        }
    };
    let setup = prepare_trial(cfg, index)?;
    let mut planner = make_planner(&cfg.planner)?;
    let mut supervisor = ScriptedSupervisor { tau };
    Ok(run_trial_with(&setup, planner.as_mut(), &mut supervisor, &mut NullObserver))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct FailureCounts {
    #[serde(rename = "Po")]
    pub po: usize,
    #[serde(rename = "De")]
    pub de: usize,
    #[serde(rename = "Pl")]
    pub pl: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub success_rate: f64,
    pub success_count: usize,
    pub trial_count: usize,
    pub avg_planning_steps: f64,
    pub failure_counts: FailureCounts,
}

impl ExperimentSummary {
    pub fn from_records(records: &[TrialRecord]) -> Self {
        let mut counts = FailureCounts::default();
        let mut successes = 0;
        for r in records {
            match r.failure_mode {
                FailureMode::None if r.success => successes += 1,
                FailureMode::Po => counts.po += 1,
                FailureMode::De => counts.de += 1,
                // a failed record without a mode is malformed; count it against planning
                FailureMode::Pl | FailureMode::None => counts.pl += 1,
            }
        }
        let n = records.len();
        let steps: usize = records.iter().map(|r| r.planning_steps).sum();
        Self {
            success_rate: if n == 0 { 0.0 } else { successes as f64 / n as f64 },
            success_count: successes,
            trial_count: n,
            avg_planning_steps: if n == 0 { 0.0 } else { steps as f64 / n as f64 },
            failure_counts: counts,
        }
    }

    pub fn is_consistent(&self) -> bool {
        let c = self.failure_counts;
        self.success_count + c.po + c.de + c.pl == self.trial_count
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub summary: ExperimentSummary,
    pub records: Vec<TrialRecord>,
}

/// All trials of a scripted-supervisor experiment, in parallel, ordered by index.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult, HarnessError> {
    cfg.validate()?;
    let records = (0..cfg.trials)
        .into_par_iter()
        .map(|i| run_scripted_trial(cfg, i))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ExperimentResult {
        summary: ExperimentSummary::from_records(&records),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{EnvironmentConfig, EnvironmentKind};

    #[test]
    fn sampled_task_targets_a_free_peg() {
        for seed in 0..20 {
            let w = build_environment(&EnvironmentConfig::new(EnvironmentKind::Ideal), seed).unwrap();
            let Task::PegTransfer { block, peg } = sample_task(&w, TaskKind::PegTransfer, seed) else {
                panic!()
            };
            assert!(w.peg_occupant(peg).is_none());
            assert!(w.objects.contains_key(&crate::scene::block_name(&block)));
            assert_eq!(sample_task(&w, TaskKind::PegTransfer, seed).command(), format!("move block {block} to peg {}", peg + 1));
        }
    }

    #[test]
    fn summary_accounting() {
        let mut records = Vec::new();
        for (i, mode) in [FailureMode::None, FailureMode::Po, FailureMode::De, FailureMode::De]
            .into_iter()
            .enumerate()
        {
            let mut r = TrialRecord::aborted(i, i as u64, "t".into(), "x".into());
            r.failure_mode = mode;
            r.success = mode == FailureMode::None;
            r.planning_steps = 5;
            records.push(r);
        }
        let s = ExperimentSummary::from_records(&records);
        assert_eq!(s.success_count, 1);
        assert_eq!(s.failure_counts, FailureCounts { po: 1, de: 2, pl: 0 });
        assert!(s.is_consistent());
        assert_eq!(s.avg_planning_steps, 5.0);
        let empty = ExperimentSummary::from_records(&[]);
        assert!(empty.is_consistent() && empty.trial_count == 0);
    }
}
