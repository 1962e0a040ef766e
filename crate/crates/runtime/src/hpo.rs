//! Asynchronous manager/worker hyperparameter search.
//!
//! The manager keeps every worker busy: whenever a trial finishes it records
//! the result and immediately hands that worker the next suggestion. After a
//! warm-up of random configurations, suggestions maximize expected
//! improvement under a distance-weighted nearest-neighbour surrogate.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::Arc;
use std::time::{Duration, Instant};

use gfm_core::container::Group;
use gfm_core::model::{bounds, Aggregation, ModelConfig};
use gfm_core::telemetry::{aggregate, write_sample_log, BusyMeter, Sampler, SamplerConfig, TelemetrySample};
use gfm_core::{GraphRecord, Model};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};
use thiserror::Error;
use tracing::{info, warn};

use crate::launch::{run_thread_ranks, DataSource, RankEnv, StoreOptions};
use crate::trainer::{evaluate_validation, train, RankContext, StopReason, TrainConfig};

pub const DEFAULT_CANDIDATES: usize = 256;
pub const DEFAULT_WARMUP: usize = 8;
pub const DEFAULT_FIDELITY: usize = 10;
pub const NEIGHBOURS: usize = 5;

#[derive(Debug, Error)]
pub enum HpoError {
    #[error("invalid search space: {0}")]
    Space(String),
    #[error("invalid search setup: {0}")]
    Config(String),
    #[error("history line {line}: {message}")]
    History { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Admissible values of one integer hyperparameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum Dimension {
    /// Inclusive range; `log` samples log-uniformly.
    Range { lo: usize, hi: usize, #[serde(default)] log: bool },
    Choices(Vec<usize>),
}

impl Dimension {
    fn range(lo: usize, hi: usize) -> Self {
        Self::Range { lo, hi, log: false }
    }

    pub fn min(&self) -> usize {
        match self {
            Self::Range { lo, .. } => *lo,
            Self::Choices(c) => c.iter().copied().min().unwrap_or(0),
        }
    }

    pub fn max(&self) -> usize {
        match self {
            Self::Range { hi, .. } => *hi,
            Self::Choices(c) => c.iter().copied().max().unwrap_or(0),
        }
    }

    pub fn contains(&self, v: usize) -> bool {
        match self {
            Self::Range { lo, hi, .. } => (*lo..=*hi).contains(&v),
            Self::Choices(c) => c.contains(&v),
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        match self {
            Self::Range { lo, hi, log: false } => rng.gen_range(*lo..=*hi),
            Self::Range { lo, hi, log: true } => {
                let (a, b) = ((*lo as f64).ln(), (*hi as f64 + 1.0).ln());
                ((rng.gen_range(a..b)).exp().floor() as usize).clamp(*lo, *hi)
            }
            Self::Choices(c) => c[rng.gen_range(0..c.len())],
        }
    }

    /// A neighbouring admissible value: the adjacent choice, ±1 on a linear
    /// range, or a tenth of the log span on a log range.
    pub fn step(&self, v: usize, up: bool) -> usize {
        match self {
            Self::Range { lo, hi, log: false } => {
                if up { (v + 1).min(*hi) } else { v.saturating_sub(1).max(*lo) }
            }
            Self::Range { lo, hi, log: true } => {
                let f = ((*hi as f64 / *lo as f64).ln() / 10.0).exp();
                let next = if up { (v as f64 * f).round() } else { (v as f64 / f).round() };
                (next as usize).clamp(*lo, *hi)
            }
            Self::Choices(c) => {
                let mut sorted = c.clone();
                sorted.sort_unstable();
                let i = sorted.iter().position(|&x| x == v).unwrap_or(0);
                if up { sorted[(i + 1).min(sorted.len() - 1)] } else { sorted[i.saturating_sub(1)] }
            }
        }
    }

    /// Min-max scaled to `[0, 1]`.
    pub fn encode(&self, v: usize) -> f64 {
        let (lo, hi) = (self.min() as f64, self.max() as f64);
        if hi > lo {
            (v as f64 - lo) / (hi - lo)
        } else {
            0.0
        }
    }

    /// Every admissible value, for enumeration.
    pub fn values(&self) -> Vec<usize> {
        match self {
            Self::Range { lo, hi, .. } => (*lo..=*hi).collect(),
            Self::Choices(c) => c.clone(),
        }
    }

    fn check(&self, name: &str) -> Result<(), HpoError> {
        let ok = match self {
            Self::Range { lo, hi, .. } => *lo >= 1 && lo <= hi,
            Self::Choices(c) => !c.is_empty() && c.iter().all(|&v| v >= 1),
        };
        if ok {
            Ok(())
        } else {
            Err(HpoError::Space(format!("{name}: empty or non-positive dimension")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSpace {
    pub mpnn_kind: Vec<Aggregation>,
    pub mpnn_layers: Dimension,
    pub mpnn_width: Dimension,
    pub fc_layers: Dimension,
    pub fc_width: Dimension,
    pub batch_size: Dimension,
    /// Source of every field the search does not vary.
    pub base: ModelConfig,
}

impl Default for SearchSpace {
    /// The full architectural search space; widths are log-uniform.
    fn default() -> Self {
        let log = |(lo, hi): (usize, usize)| Dimension::Range { lo, hi, log: true };
        Self {
            mpnn_kind: Aggregation::ALL.to_vec(),
            mpnn_layers: Dimension::range(bounds::MPNN_LAYERS.0, bounds::MPNN_LAYERS.1),
            mpnn_width: log(bounds::MPNN_WIDTH),
            fc_layers: Dimension::Choices(vec![2, 3]),
            fc_width: log(bounds::FC_WIDTH),
            batch_size: Dimension::range(bounds::BATCH_SIZE.0, bounds::BATCH_SIZE.1),
            base: ModelConfig::default(),
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<(), HpoError> {
        if self.mpnn_kind.is_empty() {
            return Err(HpoError::Space("mpnn_kind: no choices".into()));
        }
        self.mpnn_layers.check("mpnn_layers")?;
        self.mpnn_width.check("mpnn_width")?;
        self.fc_layers.check("fc_layers")?;
        if self.fc_layers.min() < 2 {
            return Err(HpoError::Space("fc_layers: at least 2".into()));
        }
        self.fc_width.check("fc_width")?;
        self.batch_size.check("batch_size")?;
        self.base.validate().map_err(|e| HpoError::Space(format!("base: {e}")))
    }

    fn dims(&self) -> [&Dimension; 5] {
        [&self.mpnn_layers, &self.mpnn_width, &self.fc_layers, &self.fc_width, &self.batch_size]
    }

    pub fn contains(&self, c: &ModelConfig) -> bool {
        self.mpnn_kind.contains(&c.mpnn_kind)
            && self.mpnn_layers.contains(c.mpnn_layers)
            && self.mpnn_width.contains(c.mpnn_width)
            && self.fc_layers.contains(c.fc_layers)
            && self.fc_width.contains(c.fc_width)
            && self.batch_size.contains(c.batch_size)
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> ModelConfig {
        ModelConfig {
            mpnn_kind: self.mpnn_kind[rng.gen_range(0..self.mpnn_kind.len())],
            mpnn_layers: self.mpnn_layers.sample(rng),
            mpnn_width: self.mpnn_width.sample(rng),
            fc_layers: self.fc_layers.sample(rng),
            fc_width: self.fc_width.sample(rng),
            batch_size: self.batch_size.sample(rng),
            ..self.base.clone()
        }
    }

    /// Every configuration one step from `base` along a single searched
    /// dimension, plus every other aggregation.
    pub fn neighbours(&self, base: &ModelConfig) -> Vec<ModelConfig> {
        let mut out = Vec::new();
        let mut push = |c: ModelConfig| {
            if &c != base && !out.contains(&c) {
                out.push(c);
            }
        };
        for &k in &self.mpnn_kind {
            push(ModelConfig { mpnn_kind: k, ..base.clone() });
        }
        for up in [false, true] {
            push(ModelConfig { mpnn_layers: self.mpnn_layers.step(base.mpnn_layers, up), ..base.clone() });
            push(ModelConfig { mpnn_width: self.mpnn_width.step(base.mpnn_width, up), ..base.clone() });
            push(ModelConfig { fc_layers: self.fc_layers.step(base.fc_layers, up), ..base.clone() });
            push(ModelConfig { fc_width: self.fc_width.step(base.fc_width, up), ..base.clone() });
            push(ModelConfig { batch_size: self.batch_size.step(base.batch_size, up), ..base.clone() });
        }
        out
    }

    /// One-hot aggregation followed by the five scaled integers.
    pub fn encode(&self, c: &ModelConfig) -> Vec<f64> {
        let mut x: Vec<f64> = self.mpnn_kind.iter().map(|&k| if k == c.mpnn_kind { 1.0 } else { 0.0 }).collect();
        let vals = [c.mpnn_layers, c.mpnn_width, c.fc_layers, c.fc_width, c.batch_size];
        x.extend(self.dims().iter().zip(vals).map(|(d, v)| d.encode(v)));
        x
    }

    /// Every configuration of a fully discrete space.
    pub fn enumerate(&self) -> Vec<ModelConfig> {
        let mut out = Vec::new();
        for &k in &self.mpnn_kind {
            for l in self.mpnn_layers.values() {
                for h in self.mpnn_width.values() {
                    for f in self.fc_layers.values() {
                        for g in self.fc_width.values() {
                            for b in self.batch_size.values() {
                                out.push(ModelConfig {
                                    mpnn_kind: k,
                                    mpnn_layers: l,
                                    mpnn_width: h,
                                    fc_layers: f,
                                    fc_width: g,
                                    batch_size: b,
                                    ..self.base.clone()
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

pub fn sample_random(space: &SearchSpace, seed: u64) -> ModelConfig {
    space.sample(&mut ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrialStatus {
    Completed,
    FailedNan,
    Timeout,
    /// The worker died or reported an error.
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: u64,
    pub config: ModelConfig,
    /// `None` unless the trial completed; ranks as +inf.
    pub validation_mae: Option<f64>,
    pub fidelity_epochs: usize,
    pub wall_time_s: f64,
    pub energy_kwh: f64,
    pub status: TrialStatus,
    pub worker: usize,
    /// Seconds since the search started.
    pub started_s: f64,
    pub finished_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl TrialRecord {
    pub fn ranking_mae(&self) -> f64 {
        self.validation_mae.unwrap_or(f64::INFINITY)
    }
}

/// Observations used by the surrogate: completed trials as measured, NaN and
/// timed-out trials at ten times the worst completed MAE. Crashed trials say
/// nothing about their configuration and are left out.
pub fn observations(space: &SearchSpace, history: &[TrialRecord]) -> Vec<(Vec<f64>, f64)> {
    let worst = history
        .iter()
        .filter(|t| t.status == TrialStatus::Completed)
        .filter_map(|t| t.validation_mae)
        .fold(f64::NEG_INFINITY, f64::max);
    let penalty = if worst.is_finite() { 10.0 * worst.abs().max(1e-12) } else { 10.0 };
    history
        .iter()
        .filter_map(|t| {
            let y = match t.status {
                TrialStatus::Completed => t.validation_mae?,
                TrialStatus::FailedNan | TrialStatus::Timeout => penalty,
                TrialStatus::Failed => return None,
            };
            Some((space.encode(&t.config), y))
        })
        .collect()
}

/// Inverse-distance-weighted k nearest neighbours.
#[derive(Debug, Clone, Default)]
pub struct Surrogate {
    pub points: Vec<(Vec<f64>, f64)>,
    pub k: usize,
}

impl Surrogate {
    pub fn new(points: Vec<(Vec<f64>, f64)>) -> Self {
        Self { points, k: NEIGHBOURS }
    }

    /// Mean and uncertainty at `x`.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let mut near: Vec<(f64, f64)> = self
            .points
            .iter()
            .map(|(p, y)| (p.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(), *y))
            .collect();
        near.sort_by(|a, b| a.0.total_cmp(&b.0));
        near.truncate(self.k.max(1));
        let w: Vec<f64> = near.iter().map(|(d, _)| 1.0 / (d + 1e-9)).collect();
        let wsum: f64 = w.iter().sum();
        let mu = near.iter().zip(&w).map(|((_, y), w)| w * y).sum::<f64>() / wsum;
        let var = near.iter().zip(&w).map(|((_, y), w)| w * (y - mu) * (y - mu)).sum::<f64>() / wsum;
        (mu, var.sqrt() + 1e-6)
    }
}

/// Expected improvement of a minimization at predicted `(mu, s)` over `best`.
pub fn expected_improvement(mu: f64, s: f64, best: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    let z = (best - mu) / s;
    (best - mu) * n.cdf(z) + s * n.pdf(z)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Suggestion {
    pub config: ModelConfig,
    /// Surrogate mean and uncertainty; `None` for random warm-up picks.
    pub predicted: Option<(f64, f64)>,
    pub expected_improvement: Option<f64>,
}

/// Candidate configurations for one suggestion. Every third suggestion
/// scores a global pool of `n` random draws; the others score a local pool:
/// the one-step neighbourhood of the best completed trial whose
/// neighbourhood still has unevaluated members. Scored together, distant random draws carry the
/// wider neighbour spread and win EI almost every time, so the incumbent's
/// neighbourhood would never be refined.
pub fn candidate_pool<R: Rng>(space: &SearchSpace, history: &[TrialRecord], n: usize, rng: &mut R) -> Vec<ModelConfig> {
    if history.len() % 3 != 0 {
        let mut done: Vec<&TrialRecord> = history.iter().filter(|t| t.status == TrialStatus::Completed).collect();
        done.sort_by(|a, b| a.ranking_mae().total_cmp(&b.ranking_mae()));
        for t in done {
            let fresh: Vec<ModelConfig> = space
                .neighbours(&t.config)
                .into_iter()
                .filter(|c| history.iter().all(|h| &h.config != c))
                .collect();
            if !fresh.is_empty() {
                return fresh;
            }
        }
    }
    (0..n.max(1)).map(|_| space.sample(rng)).collect()
}

/// Random below `warmup` observations, otherwise the best-EI member of
/// [`candidate_pool`]. Configurations already evaluated or still running
/// (`pending`) are skipped while any other candidate remains.
pub fn suggest<R: Rng>(
    space: &SearchSpace,
    history: &[TrialRecord],
    pending: &[ModelConfig],
    n_candidates: usize,
    warmup: usize,
    rng: &mut R,
) -> Suggestion {
    let obs = observations(space, history);
    if obs.len() < warmup.max(1) {
        return Suggestion { config: space.sample(rng), predicted: None, expected_improvement: None };
    }
    let best = obs.iter().map(|o| o.1).fold(f64::INFINITY, f64::min);
    let surrogate = Surrogate::new(obs);
    let pool = candidate_pool(space, history, n_candidates, rng);
    let seen = |c: &ModelConfig| history.iter().any(|t| &t.config == c) || pending.contains(c);
    let fresh: Vec<&ModelConfig> = pool.iter().filter(|c| !seen(c)).collect();
    let pool: Vec<&ModelConfig> = if fresh.is_empty() { pool.iter().collect() } else { fresh };
    let mut top: Option<(f64, &ModelConfig, (f64, f64))> = None;
    for c in pool {
        let (mu, s) = surrogate.predict(&space.encode(c));
        let ei = expected_improvement(mu, s, best);
        if top.as_ref().map_or(true, |t| ei > t.0) {
            top = Some((ei, c, (mu, s)));
        }
    }
    let (ei, config, pred) = top.unwrap();
    Suggestion { config: config.clone(), predicted: Some(pred), expected_improvement: Some(ei) }
}

/// Prefix minima of completed MAEs in completion order: `(finished_s, best)`.
pub fn cumulative_min(trials: &[TrialRecord]) -> Vec<(f64, f64)> {
    let mut best = f64::INFINITY;
    trials
        .iter()
        .filter(|t| t.status == TrialStatus::Completed)
        .filter_map(|t| t.validation_mae.map(|m| (t.finished_s, m)))
        .map(|(t, m)| {
            best = best.min(m);
            (t, best)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRequest {
    pub trial_id: u64,
    pub config: ModelConfig,
    pub fidelity_epochs: usize,
    pub worker: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub validation_mae: Option<f64>,
    pub epochs: usize,
    pub energy_kwh: f64,
    pub status: TrialStatus,
}

/// Runs one trial to completion; called concurrently from worker threads.
pub trait TrialRunner: Sync {
    fn run(&self, req: &TrialRequest) -> Result<TrialResult, String>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HpoOptions {
    pub workers: usize,
    pub max_trials: usize,
    pub budget_s: Option<f64>,
    pub fidelity_epochs: usize,
    pub seed: u64,
    pub n_candidates: usize,
    pub warmup: usize,
}

impl Default for HpoOptions {
    fn default() -> Self {
        Self {
            workers: 1,
            max_trials: 60,
            budget_s: None,
            fidelity_epochs: DEFAULT_FIDELITY,
            seed: 0,
            n_candidates: DEFAULT_CANDIDATES,
            warmup: DEFAULT_WARMUP,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Start,
    Finish,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HpoEvent {
    pub t: f64,
    pub kind: EventKind,
    pub trial_id: u64,
    pub worker: usize,
}

#[derive(Debug, Clone, Default)]
pub struct HpoOutcome {
    /// New trials in completion order.
    pub trials: Vec<TrialRecord>,
    pub events: Vec<HpoEvent>,
}

impl HpoOutcome {
    pub fn best(&self) -> Option<&TrialRecord> {
        self.trials
            .iter()
            .filter(|t| t.status == TrialStatus::Completed)
            .min_by(|a, b| a.ranking_mae().total_cmp(&b.ranking_mae()))
    }
}

/// Runs the search. `prior` warm-starts the surrogate (and is not re-run);
/// `on_complete` sees each new record as soon as it finishes.
pub fn hpo_loop(
    space: &SearchSpace,
    runner: &dyn TrialRunner,
    opts: &HpoOptions,
    prior: &[TrialRecord],
    on_complete: &mut dyn FnMut(&TrialRecord),
) -> Result<HpoOutcome, HpoError> {
    space.validate()?;
    if opts.workers == 0 {
        return Err(HpoError::Config("at least one worker".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut history: Vec<TrialRecord> = prior.to_vec();
    let mut next_id = prior.iter().map(|t| t.trial_id + 1).max().unwrap_or(0);
    let budget = opts.budget_s.map(Duration::from_secs_f64);
    let start = Instant::now();
    let mut out = HpoOutcome::default();

    std::thread::scope(|s| {
        let (done_tx, done_rx) = mpsc::channel::<(TrialRequest, f64, f64, Result<TrialResult, String>)>();
        let mut jobs = Vec::new();
        for _ in 0..opts.workers {
            let (tx, rx) = mpsc::channel::<TrialRequest>();
            jobs.push(tx);
            let done_tx = done_tx.clone();
            s.spawn(move || {
                for req in rx {
                    let t0 = start.elapsed().as_secs_f64();
                    let res = catch_unwind(AssertUnwindSafe(|| runner.run(&req)))
                        .unwrap_or_else(|_| Err("worker panicked".to_string()));
                    let t1 = start.elapsed().as_secs_f64();
                    if done_tx.send((req, t0, t1, res)).is_err() {
                        break;
                    }
                }
            });
        }
        drop(done_tx);

        let mut idle: Vec<usize> = (0..opts.workers).rev().collect();
        let mut issued = 0usize;
        let mut running = 0usize;
        let mut running_cfgs: BTreeMap<u64, ModelConfig> = BTreeMap::new();
        loop {
            while issued < opts.max_trials && !budget.is_some_and(|b| start.elapsed() >= b) {
                let Some(w) = idle.pop() else { break };
                let pending: Vec<ModelConfig> = running_cfgs.values().cloned().collect();
                let sug = suggest(space, &history, &pending, opts.n_candidates, opts.warmup, &mut rng);
                let req =
                    TrialRequest { trial_id: next_id, config: sug.config, fidelity_epochs: opts.fidelity_epochs, worker: w };
                out.events.push(HpoEvent {
                    t: start.elapsed().as_secs_f64(),
                    kind: EventKind::Start,
                    trial_id: next_id,
                    worker: w,
                });
                running_cfgs.insert(next_id, req.config.clone());
                next_id += 1;
                issued += 1;
                running += 1;
                jobs[w].send(req).expect("worker alive");
            }
            if running == 0 {
                break;
            }
            let (req, t0, t1, res) = done_rx.recv().expect("workers alive while trials run");
            running -= 1;
            running_cfgs.remove(&req.trial_id);
            let rec = match res {
                Ok(r) => TrialRecord {
                    trial_id: req.trial_id,
                    config: req.config,
                    validation_mae: if r.status == TrialStatus::Completed { r.validation_mae } else { None },
                    fidelity_epochs: r.epochs,
                    wall_time_s: t1 - t0,
                    energy_kwh: r.energy_kwh,
                    status: r.status,
                    worker: req.worker,
                    started_s: t0,
                    finished_s: t1,
                    error: None,
                },
                Err(e) => {
                    warn!(trial = req.trial_id, error = %e, "trial failed");
                    TrialRecord {
                        trial_id: req.trial_id,
                        config: req.config,
                        validation_mae: None,
                        fidelity_epochs: 0,
                        wall_time_s: t1 - t0,
                        energy_kwh: 0.0,
                        status: TrialStatus::Failed,
                        worker: req.worker,
                        started_s: t0,
                        finished_s: t1,
                        error: Some(e),
                    }
                }
            };
            info!(event = "trial", trial = rec.trial_id, status = ?rec.status, mae = rec.validation_mae, kwh = rec.energy_kwh);
            out.events.push(HpoEvent {
                t: start.elapsed().as_secs_f64(),
                kind: EventKind::Finish,
                trial_id: rec.trial_id,
                worker: rec.worker,
            });
            on_complete(&rec);
            history.push(rec.clone());
            out.trials.push(rec);
            idle.push(req.worker);
        }
        drop(jobs);
    });
    Ok(out)
}

/// Appends one JSON line and flushes it to disk.
pub fn append_history(path: &Path, rec: &TrialRecord) -> Result<(), HpoError> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut line = serde_json::to_vec(rec).map_err(|e| HpoError::Config(e.to_string()))?;
    line.push(b'\n');
    f.write_all(&line)?;
    f.sync_data()?;
    Ok(())
}

/// Reads a history file. A final line cut short by a crash is skipped; any
/// other bad line is an error.
pub fn read_history(path: &Path) -> Result<Vec<TrialRecord>, HpoError> {
    let f = std::fs::File::open(path)?;
    let lines: Vec<String> = BufReader::new(f).lines().collect::<Result<_, _>>()?;
    let mut out = Vec::new();
    let last = lines.iter().rposition(|l| !l.trim().is_empty());
    for (i, l) in lines.iter().enumerate() {
        if l.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(l) {
            Ok(r) => out.push(r),
            Err(e) if Some(i) == last => warn!(line = i + 1, error = %e, "skipping truncated history line"),
            Err(e) => return Err(HpoError::History { line: i + 1, message: e.to_string() }),
        }
    }
    Ok(out)
}

/// Trains each trial on in-memory data with per-rank telemetry.
pub struct TrainingRunner {
    pub data: Arc<BTreeMap<Group, Vec<GraphRecord>>>,
    pub ranks: usize,
    pub telemetry: SamplerConfig,
    pub train: TrainConfig,
    pub sample_log_dir: Option<PathBuf>,
}

impl TrainingRunner {
    pub fn new(data: Arc<BTreeMap<Group, Vec<GraphRecord>>>) -> Self {
        Self {
            data,
            ranks: 1,
            telemetry: SamplerConfig::default(),
            train: TrainConfig { patience: None, ..Default::default() },
            sample_log_dir: None,
        }
    }
}

impl TrialRunner for TrainingRunner {
    fn run(&self, req: &TrialRequest) -> Result<TrialResult, String> {
        let step_id = format!("trial-{}", req.trial_id);
        // constant fidelity: exactly this many epochs, no early stopping
        let cfg = TrainConfig { max_epochs: req.fidelity_epochs, patience: None, checkpoint: None, ..self.train.clone() };
        let model = Model::init(&req.config);
        let store_opts = StoreOptions::default();
        let per_rank = run_thread_ranks(&DataSource::Records(&self.data), self.ranks, &store_opts, |mut env: RankEnv| {
            let meter = BusyMeter::new();
            let sampler = Sampler::start(&step_id, env.store.rank() as u32, meter.clone(), self.telemetry);
            let mut ctx = RankContext { comm: &mut env.comm, store: &env.store, meter: Some(&meter) };
            let res = train(&mut ctx, model.clone(), None, &cfg).and_then(|o| {
                let mae = match o.final_val_mae() {
                    Some(m) => Some(m),
                    None if o.epochs.is_empty() => Some(evaluate_validation(&mut ctx, &o.model)?),
                    None => None,
                };
                Ok((o.stop, o.epochs.len(), mae))
            });
            (res, sampler.stop())
        })
        .map_err(|e| e.to_string())?;

        let mut samples: Vec<TelemetrySample> = Vec::new();
        let mut result = None;
        for (res, telem) in per_rank {
            samples.extend(telem.samples);
            let r = res.map_err(|e| e.to_string())?;
            result.get_or_insert(r);
        }
        if let Some(dir) = &self.sample_log_dir {
            let f = std::fs::File::create(dir.join(format!("{step_id}.csv"))).map_err(|e| e.to_string())?;
            write_sample_log(&samples, f).map_err(|e| e.to_string())?;
        }
        let energy_kwh = aggregate(&samples).map(|r| r.energy_kwh).unwrap_or(0.0);
        let (stop, epochs, mae) = result.ok_or("no ranks ran")?;
        let status = match stop {
            StopReason::NonFinite => TrialStatus::FailedNan,
            StopReason::WallClock => TrialStatus::Timeout,
            _ => TrialStatus::Completed,
        };
        let validation_mae = mae.filter(|m| m.is_finite());
        let status = if status == TrialStatus::Completed && validation_mae.is_none() { TrialStatus::FailedNan } else { status };
        Ok(TrialResult { validation_mae, epochs, energy_kwh, status })
    }
}
