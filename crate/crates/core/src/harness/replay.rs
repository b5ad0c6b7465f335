//! Per-trial trace files and their deterministic replay.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::experiment::{prepare_trial, run_trial_with};
use super::supervisor::ReplaySupervisor;
use super::HarnessError;
use crate::agent::{NullObserver, ReplayPlanner, TraceEntry, TraceEvent, TrialRecord};

pub const TRACE_FORMAT: &str = "surgtwin-trace/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub format: String,
    pub trial_index: usize,
    pub seed: u64,
    pub config: ExperimentConfig,
}

pub fn trace_path(dir: &Path, trial_index: usize) -> PathBuf {
    dir.join(format!("trial_{trial_index:04}.jsonl"))
}

/// Header line followed by one line per trace entry.
pub fn trace_document(cfg: &ExperimentConfig, record: &TrialRecord) -> String {
    let header = TraceHeader {
        format: TRACE_FORMAT.into(),
        trial_index: record.trial_index,
        seed: record.seed,
        config: cfg.clone(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for e in &record.action_trace {
        out.push_str(&serde_json::to_string(e).expect("trace serializes"));
        out.push('\n');
    }
    out
}

pub fn write_trace(path: &Path, cfg: &ExperimentConfig, record: &TrialRecord) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
    }
    fs::write(path, trace_document(cfg, record)).map_err(|e| HarnessError::io(path, e))
}

pub fn write_traces(dir: &Path, cfg: &ExperimentConfig, records: &[TrialRecord]) -> Result<(), HarnessError> {
    records
        .iter()
        .try_for_each(|r| write_trace(&trace_path(dir, r.trial_index), cfg, r))
}

#[derive(Debug, Clone)]
pub struct TraceFile {
    pub header: TraceHeader,
    pub entries: Vec<TraceEntry>,
    /// Entry lines exactly as stored.
    pub lines: Vec<String>,
}

pub fn read_trace(path: &Path) -> Result<TraceFile, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let bad = |line: usize, e: String| HarnessError::Trace(format!("{}:{}: {e}", path.display(), line + 1));
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (i, first) = lines.next().ok_or_else(|| bad(0, "empty trace".into()))?;
    let header: TraceHeader = serde_json::from_str(first).map_err(|e| bad(i, e.to_string()))?;
    if header.format != TRACE_FORMAT {
        return Err(bad(i, format!("unsupported format `{}`", header.format)));
    }
    let mut entries = Vec::new();
    let mut raw = Vec::new();
    for (i, line) in lines {
        entries.push(serde_json::from_str(line).map_err(|e| bad(i, e.to_string()))?);
        raw.push(line.to_string());
    }
    Ok(TraceFile {
        header,
        entries,
        lines: raw,
    })
}

#[derive(Debug, Clone)]
pub struct ReplayReport {
    pub record: TrialRecord,
    /// First entry index where the replay differs from the stored trace.
    pub divergence: Option<usize>,
}

impl ReplayReport {
    pub fn matches(&self) -> bool {
        self.divergence.is_none()
    }
}

/// Re-runs a trial with the recorded actions and feedback and compares the traces byte for byte.
pub fn replay(trace: &TraceFile) -> Result<ReplayReport, HarnessError> {
    let h = &trace.header;
    let setup = prepare_trial(&h.config, h.trial_index)?;
    if setup.seed != h.seed {
        return Err(HarnessError::Trace(format!(
            "trace seed {} does not match config seed {}",
            h.seed, setup.seed
        )));
    }
    let mut planner = ReplayPlanner::new(trace.entries.iter().filter_map(|e| match &e.event {
        TraceEvent::Action { action, .. } => Some(action.clone()),
        _ => None,
    }));
    if let Some(reason) = trace.entries.iter().find_map(|e| match &e.event {
        TraceEvent::PlannerFailure { reason } => Some(reason.clone()),
        _ => None,
    }) {
        planner = planner.with_final_error(reason);
    }
    let mut supervisor = ReplaySupervisor::from_trace(&trace.entries);
    let record = run_trial_with(&setup, &mut planner, &mut supervisor, &mut NullObserver);
    let fresh: Vec<String> = record
        .action_trace
        .iter()
        .map(|e| serde_json::to_string(e).expect("trace serializes"))
        .collect();
    let divergence = (0..fresh.len().max(trace.lines.len())).find(|&i| fresh.get(i) != trace.lines.get(i));
    Ok(ReplayReport { record, divergence })
}

pub fn replay_file(path: &Path) -> Result<ReplayReport, HarnessError> {
    replay(&read_trace(path)?)
}
