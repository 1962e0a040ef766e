use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use gfm_core::container::{ContainerReader, Group};
use gfm_core::model::ModelConfig;
use gfm_core::telemetry::SamplerConfig;
use gfm_core::GraphRecord;
use gfm_runtime::hpo::{
    append_history, cumulative_min, hpo_loop, read_history, HpoOptions, SearchSpace, TrainingRunner, TrialRecord,
    TrialRequest, TrialResult, TrialRunner, TrialStatus,
};
use gfm_runtime::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tracing::info;

use crate::cli::{recheck, HpoArgs, HpoTrialArgs};
use crate::config::PipelineConfig;
use crate::util::{claim_outputs, companion, read_json, usage, write_json};

/// One trial as handed to a worker process.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialJob {
    pub trial_id: u64,
    pub config: ModelConfig,
    pub fidelity_epochs: usize,
    pub worker: usize,
    pub ranks: usize,
    pub telemetry: SamplerConfig,
    pub train: TrainConfig,
    pub sample_log_dir: Option<PathBuf>,
}

/// Loads the groups a trial trains and validates on.
pub fn load_training_data(container: &Path) -> Result<Arc<BTreeMap<Group, Vec<GraphRecord>>>> {
    let reader = ContainerReader::open(container)?;
    let mut data = BTreeMap::new();
    for g in [Group::Train, Group::Val] {
        data.insert(g, reader.read_group(g)?);
    }
    Ok(Arc::new(data))
}

fn runner_for(data: Arc<BTreeMap<Group, Vec<GraphRecord>>>, job: &TrialJob) -> TrainingRunner {
    TrainingRunner {
        data,
        ranks: job.ranks,
        telemetry: job.telemetry,
        train: job.train.clone(),
        sample_log_dir: job.sample_log_dir.clone(),
    }
}

/// Runs every trial in a fresh child process; a crash fails only that trial.
struct ProcessRunner {
    exe: PathBuf,
    container: PathBuf,
    template: TrialJob,
}

impl TrialRunner for ProcessRunner {
    fn run(&self, req: &TrialRequest) -> Result<TrialResult, String> {
        let job = TrialJob {
            trial_id: req.trial_id,
            config: req.config.clone(),
            fidelity_epochs: req.fidelity_epochs,
            worker: req.worker,
            ..self.template.clone()
        };
        let job = serde_json::to_string(&job).map_err(|e| e.to_string())?;
        let out = Command::new(&self.exe)
            .arg("hpo-trial")
            .arg("--container")
            .arg(&self.container)
            .args(["--job", &job])
            .stdin(Stdio::null())
            .stderr(Stdio::inherit())
            .output()
            .map_err(|e| format!("spawning worker: {e}"))?;
        if !out.status.success() {
            return Err(format!("worker process exited with {}", out.status));
        }
        serde_json::from_slice(&out.stdout).map_err(|e| format!("worker result: {e}"))
    }
}

pub fn hpo(mut cfg: PipelineConfig, a: HpoArgs) -> Result<()> {
    let h = &mut cfg.hpo;
    if let Some(p) = &a.space {
        h.space = read_json::<SearchSpace>(p).map_err(|e| usage(format!("--space: {e:#}")))?;
    }
    h.workers = a.workers.unwrap_or(h.workers);
    h.fidelity = a.fidelity.unwrap_or(h.fidelity);
    h.max_trials = a.max_trials.unwrap_or(h.max_trials);
    h.budget_s = a.budget.or(h.budget_s);
    h.seed = a.seed.unwrap_or(h.seed);
    recheck(&cfg)?;
    let h = &cfg.hpo;

    let prior: Vec<TrialRecord> = match &a.restart {
        Some(p) => read_history(p).with_context(|| format!("reading {}", p.display()))?,
        None => Vec::new(),
    };
    let data = load_training_data(&a.container)?;
    if data[&Group::Val].is_empty() {
        bail!("{} has no validation records to rank trials by", a.container.display());
    }
    let summary_path = companion(&a.out.out, "summary.json");
    let samples = companion(&a.out.out, "samples");
    claim_outputs(&[&a.out.out, &summary_path, &samples], a.out.force)?;
    std::fs::create_dir_all(&samples)?;
    if let Some(dir) = a.out.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    // the output is a complete history: earlier trials first
    std::fs::File::create(&a.out.out)?;
    for r in &prior {
        append_history(&a.out.out, r)?;
    }

    let template = TrialJob {
        trial_id: 0,
        config: ModelConfig::default(),
        fidelity_epochs: h.fidelity,
        worker: 0,
        ranks: h.ranks,
        telemetry: cfg.telemetry,
        train: TrainConfig {
            patience: None,
            shuffle_seed: cfg.train.shuffle_seed,
            optimizer: cfg.train.optimizer,
            clock: cfg.train.clock,
            ..Default::default()
        },
        sample_log_dir: Some(std::path::absolute(&samples)?),
    };
    let opts = HpoOptions {
        workers: h.workers,
        max_trials: h.max_trials,
        budget_s: h.budget_s,
        fidelity_epochs: h.fidelity,
        seed: h.seed,
        n_candidates: h.n_candidates,
        warmup: h.warmup,
    };
    let runner: Box<dyn TrialRunner> = if a.in_process {
        Box::new(runner_for(data, &template))
    } else {
        drop(data);
        Box::new(ProcessRunner { exe: std::env::current_exe()?, container: a.container.clone(), template })
    };
    info!(event = "hpo_start", workers = opts.workers, max_trials = opts.max_trials, prior = prior.len(), in_process = a.in_process);
    let mut write_error = None;
    let outcome = hpo_loop(&h.space, runner.as_ref(), &opts, &prior, &mut |rec| {
        if write_error.is_none() {
            write_error = append_history(&a.out.out, rec).err();
        }
    })?;
    if let Some(e) = write_error {
        return Err(e).context("appending to the history");
    }

    let count = |s: TrialStatus| outcome.trials.iter().filter(|t| t.status == s).count();
    let summary = json!({
        "trials": outcome.trials.len(),
        "prior_trials": prior.len(),
        "completed": count(TrialStatus::Completed),
        "failed_nan": count(TrialStatus::FailedNan),
        "timeout": count(TrialStatus::Timeout),
        "failed": count(TrialStatus::Failed),
        "best": outcome.best(),
        "cumulative_min": cumulative_min(&outcome.trials),
        "events": outcome.events,
    });
    write_json(&summary_path, &summary)?;
    if let Some(b) = outcome.best() {
        info!(event = "hpo_done", best_trial = b.trial_id, best_mae = b.validation_mae);
    }
    Ok(())
}

/// Worker side: one trial, result as JSON on stdout.
pub fn hpo_trial(a: HpoTrialArgs) -> Result<()> {
    let job: TrialJob = serde_json::from_str(&a.job).map_err(|e| usage(format!("--job: {e}")))?;
    let runner = runner_for(load_training_data(&a.container)?, &job);
    let req = TrialRequest {
        trial_id: job.trial_id,
        config: job.config.clone(),
        fidelity_epochs: job.fidelity_epochs,
        worker: job.worker,
    };
    let result = runner.run(&req).map_err(anyhow::Error::msg)?;
    println!("{}", serde_json::to_string(&result)?);
    Ok(())
}
