use std::fs;
use std::path::Path;

use anyhow::{Context, Result};

use surgtwin_core::harness::experiment::trial_seed;
use surgtwin_core::harness::{
    self, emit_results, render_table, replay_file, write_traces, ExperimentConfig, ExperimentSummary, ReplayReport,
};
use surgtwin_core::scene::export::encode_color_png;
use surgtwin_core::scene::{build_environment, render_frame};

/// Loads a config document and applies command-line overrides.
pub fn load_config(path: &Path, trials: Option<usize>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(n) = trials {
        cfg.trials = n;
    }
    if let Some(s) = seed {
        cfg.base_seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Table label: the config file name without extension.
pub fn label_for(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "experiment".into())
}

/// Runs every trial, writes summary, records, table and per-trial traces under `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, label: &str) -> Result<ExperimentSummary> {
    let result = harness::run_experiment(cfg)?;
    emit_results(&result.summary, &result.records, out, label)?;
    write_traces(&out.join("traces"), cfg, &result.records)?;
    print!("{}", render_table(&[(label.to_string(), result.summary.clone())]));
    Ok(result.summary)
}

/// Renders the first trial's scene to a color PNG.
pub fn render_scene(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let seed = trial_seed(cfg.base_seed, 0);
    let world = build_environment(&cfg.environment, seed)?;
    let png = encode_color_png(&render_frame(&world, seed))?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(out, png).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

pub fn replay(trace: &Path) -> Result<ReplayReport> {
    Ok(replay_file(trace)?)
}
