//! Experiment runner, supervisors, failure classification and results.

pub mod config;
pub mod experiment;
pub mod replay;
pub mod results;
pub mod supervisor;

use std::path::Path;

use thiserror::Error;

pub use crate::agent::trial::{classify_failure, StopCause};
pub use config::{ExperimentConfig, PlannerConfig, SupervisorConfig, TaskKind};
pub use experiment::{
    make_planner, prepare_trial, run_experiment, run_scripted_trial, run_trial_with, sample_task, trial_seed,
    ExperimentResult, ExperimentSummary, FailureCounts,
};
pub use replay::{read_trace, replay, replay_file, trace_path, write_trace, write_traces, ReplayReport, TraceFile};
pub use results::{emit_results, render_table, render_table_row};
pub use supervisor::{
    correcting_direction, scripted_feedback, ConsoleChannel, ConsoleError, InteractiveSupervisor, ReplaySupervisor,
    ScriptedSupervisor,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid trace: {0}")]
    Trace(String),
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
