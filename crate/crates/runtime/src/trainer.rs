//! Data-parallel multitask training.
//!
//! Per step every rank: fetches its share of the global batch (dataload), runs
//! the forward pass (forward), joins a sum-reduction of batch counts and loss
//! sums (sync), back-propagates with the global counts as normalizer and
//! applies the optimizer after a mean-reduction of gradients (backward, the
//! reduction itself counted as sync).

use std::path::PathBuf;
use std::time::{Duration, Instant};

use gfm_core::checkpoint::{Checkpoint, CheckpointError};
use gfm_core::container::Group;
use gfm_core::imbalance::{Phase, PhaseTiming};
use gfm_core::optim::OptimizerConfig;
use gfm_core::telemetry::BusyMeter;
use gfm_core::{Model, Optimizer};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

use crate::comm::{CommError, Communicator, ReduceOp};
use crate::ddstore::{epoch_schedule, DDStore, StoreError};
use crate::timing::{PhaseClock, Stamp};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Comm(#[from] CommError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid training setup: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// Epochs without a new best validation MAE before stopping; `None` never stops early.
    pub patience: Option<usize>,
    /// Seed of the per-epoch global shuffle.
    pub shuffle_seed: u64,
    pub optimizer: OptimizerConfig,
    pub clock: PhaseClock,
    pub wall_clock_limit_s: Option<f64>,
    pub checkpoint: Option<PathBuf>,
    /// Epoch number of the first epoch run (for resumed runs).
    pub start_epoch: usize,
    /// Record a digest of the parameters after every optimizer step.
    pub trace_params: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 30,
            patience: Some(10),
            shuffle_seed: 0,
            optimizer: OptimizerConfig::default(),
            clock: PhaseClock::Wall,
            wall_clock_limit_s: None,
            checkpoint: None,
            start_epoch: 0,
            trace_params: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub steps: usize,
    /// Mean over steps of the global batch loss.
    pub train_loss: f64,
    pub energy_term: f64,
    pub force_term: f64,
    /// Unweighted energy term plus force term over the whole validation set.
    pub val_mae: Option<f64>,
    pub timing: PhaseTiming,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStop,
    WallClock,
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NanEvent {
    pub epoch: usize,
    pub step: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub optimizer: Optimizer,
    pub epochs: Vec<EpochMetrics>,
    pub stop: StopReason,
    pub nan_events: Vec<NanEvent>,
    pub param_digests: Vec<u64>,
}

impl TrainOutcome {
    pub fn final_val_mae(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.val_mae)
    }
}

/// Stops when `patience` epochs have passed since the best MAE.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::INFINITY, since_best: 0 }
    }

    /// Records one epoch's MAE; true means stop now.
    pub fn observe(&mut self, mae: f64) -> bool {
        if mae < self.best {
            self.best = mae;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        self.since_best >= self.patience
    }
}

/// FNV-1a over the parameter bit patterns.
pub fn param_digest(params: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in params {
        for b in p.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100_0000_01b3);
        }
    }
    h
}

pub struct RankContext<'a> {
    pub comm: &'a mut dyn Communicator,
    pub store: &'a DDStore,
    pub meter: Option<&'a BusyMeter>,
}

struct Timer {
    clock: PhaseClock,
    timing: PhaseTiming,
}

impl Timer {
    fn run<R>(&mut self, phase: Phase, f: impl FnOnce() -> R) -> R {
        // waiting is idle time, so it is measured on the wall clock
        let clock = if phase == Phase::Sync { PhaseClock::Wall } else { self.clock };
        let s = Stamp::now(clock);
        let r = f();
        self.timing.add(phase, s.elapsed());
        r
    }
}

pub fn train(
    ctx: &mut RankContext<'_>,
    model: Model,
    optimizer: Option<Optimizer>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let rank = ctx.comm.rank();
    let size = ctx.comm.size();
    let batch_size = model.config.batch_size;
    if batch_size == 0 {
        return Err(TrainError::Config("batch_size must be positive".into()));
    }
    let n_train = ctx.store.len(Group::Train);
    let n_val = ctx.store.len(Group::Val);
    let (ae, af) = (model.config.alpha_energy, model.config.alpha_forces);
    let mut model = model;
    let mut opt = optimizer.unwrap_or_else(|| Optimizer::new(cfg.optimizer, model.param_count()));
    let mut stopper = cfg.patience.map(EarlyStopping::new);
    let started = Instant::now();
    let limit = cfg.wall_clock_limit_s.map(Duration::from_secs_f64);
    if let Some(m) = ctx.meter {
        m.set_mem_bytes(ctx.store.local().resident_bytes() + 3 * 8 * model.param_count() as u64);
    }

    let mut out = TrainOutcome {
        model: model.clone(),
        optimizer: opt.clone(),
        epochs: Vec::new(),
        stop: StopReason::MaxEpochs,
        nan_events: Vec::new(),
        param_digests: Vec::new(),
    };

    for e in 0..cfg.max_epochs {
        let epoch = cfg.start_epoch + e;
        let sched = epoch_schedule(n_train, size, batch_size, cfg.shuffle_seed, epoch as u64);
        let mut timer = Timer { clock: cfg.clock, timing: PhaseTiming { rank, ..Default::default() } };
        let epoch_start = Instant::now();
        let (mut loss_sum, mut e_sum, mut f_sum) = (0.0, 0.0, 0.0);
        let steps = sched.steps();
        let mut aborted = false;
        for step in 0..steps {
            let idx = sched.batch(rank, step);
            let batch = timer.run(Phase::Dataload, || ctx.store.fetch_batch(Group::Train, idx))?;

            if let Some(m) = ctx.meter {
                m.begin();
            }
            let fwd = timer.run(Phase::Forward, || model.forward_batch(&batch));
            if let Some(m) = ctx.meter {
                m.end();
            }

            let mut totals = [
                batch.len() as f64,
                batch.iter().map(|r| 3 * r.n_atoms()).sum::<usize>() as f64,
                fwd.sums.abs_energy_per_atom,
                fwd.sums.abs_force,
            ];
            timer.run(Phase::Sync, || ctx.comm.allreduce(&mut totals, ReduceOp::Sum))?;
            let (graphs, comps) = (totals[0] as usize, totals[1] as usize);
            let energy_term = totals[2] / graphs.max(1) as f64;
            let force_term = totals[3] / comps.max(1) as f64;
            let loss = ae * energy_term + af * force_term;
            if !loss.is_finite() {
                warn!(rank, epoch = epoch + 1, step, "non-finite loss; aborting epoch");
                out.nan_events.push(NanEvent { epoch: epoch + 1, step });
                aborted = true;
                break;
            }
            loss_sum += loss;
            e_sum += energy_term;
            f_sum += force_term;

            if let Some(m) = ctx.meter {
                m.begin();
            }
            let mut grad = timer.run(Phase::Backward, || {
                let mut g = vec![0.0; model.param_count()];
                model.backward_batch(&batch, &fwd, (graphs, comps), &mut g);
                // the mean-reduction divides by the rank count again
                let p = size as f64;
                g.iter_mut().for_each(|x| *x *= p);
                g
            });
            if let Some(m) = ctx.meter {
                m.end();
            }
            timer.run(Phase::Sync, || ctx.comm.allreduce(&mut grad, ReduceOp::Mean))?;
            if let Some(m) = ctx.meter {
                m.begin();
            }
            timer.run(Phase::Backward, || opt.step(&mut model.params, &grad, model.config.learning_rate));
            if let Some(m) = ctx.meter {
                m.end();
            }
            if cfg.trace_params {
                out.param_digests.push(param_digest(&model.params));
            }
        }
        timer.timing.epoch = epoch_start.elapsed().as_secs_f64();
        if aborted {
            out.stop = StopReason::NonFinite;
            break;
        }

        let val_mae = if n_val > 0 { Some(validation_mae(ctx, &model, n_val)?) } else { None };
        let denom = steps.max(1) as f64;
        let metrics = EpochMetrics {
            epoch: epoch + 1,
            steps,
            train_loss: loss_sum / denom,
            energy_term: e_sum / denom,
            force_term: f_sum / denom,
            val_mae,
            timing: timer.timing,
        };
        if rank == 0 {
            info!(
                event = "epoch",
                epoch = metrics.epoch,
                train_loss = metrics.train_loss,
                val_mae = metrics.val_mae,
                seconds = metrics.timing.epoch
            );
        }
        out.epochs.push(metrics);

        if let (Some(s), Some(m)) = (stopper.as_mut(), val_mae) {
            if s.observe(m) {
                out.stop = StopReason::EarlyStop;
                break;
            }
        }
        if let Some(limit) = limit {
            let mut expired = [if started.elapsed() >= limit { 1.0 } else { 0.0 }];
            ctx.comm.allreduce(&mut expired, ReduceOp::Max)?;
            if expired[0] > 0.0 {
                out.stop = StopReason::WallClock;
                break;
            }
        }
    }

    if rank == 0 {
        if let Some(path) = &cfg.checkpoint {
            let epoch = (cfg.start_epoch + out.epochs.len()) as u64;
            Checkpoint::capture(&model, &opt, epoch, cfg.shuffle_seed).save(path)?;
        }
    }
    out.model = model;
    out.optimizer = opt;
    Ok(out)
}

/// Validation MAE of `model` over the whole validation group, summed across
/// ranks; every rank must call it.
pub fn evaluate_validation(ctx: &mut RankContext<'_>, model: &Model) -> Result<f64, TrainError> {
    let n_val = ctx.store.len(Group::Val);
    validation_mae(ctx, model, n_val)
}

/// Rank r evaluates validation indices `k` with `k mod P = r`.
fn validation_mae(ctx: &mut RankContext<'_>, model: &Model, n_val: usize) -> Result<f64, TrainError> {
    let (rank, size) = (ctx.comm.rank(), ctx.comm.size());
    let mut t = [0.0; 4];
    for i in (rank..n_val).step_by(size) {
        let r = ctx.store.fetch(Group::Val, i)?;
        let s = model.evaluate(std::slice::from_ref(&r));
        t[0] += 1.0;
        t[1] += (3 * r.n_atoms()) as f64;
        t[2] += s.abs_energy_per_atom;
        t[3] += s.abs_force;
    }
    ctx.comm.allreduce(&mut t, ReduceOp::Sum)?;
    Ok(t[2] / t[0].max(1.0) + t[3] / t[1].max(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn early_stop_on_increasing_mae() {
        let mut s = EarlyStopping::new(10);
        let stop_at = (1..=30).find(|&e| s.observe(0.1 * e as f64));
        assert_eq!(stop_at, Some(11));
    }

    #[test]
    fn early_stop_resets_on_improvement() {
        let mut s = EarlyStopping::new(2);
        assert!(!s.observe(1.0));
        assert!(!s.observe(1.5));
        assert!(!s.observe(0.5));
        assert!(!s.observe(0.5));
        assert!(s.observe(0.7));
    }
}
