//! Weak and strong scaling runs with per-phase timing.

use std::collections::BTreeMap;
use std::io::Write;

use gfm_core::container::Group;
use gfm_core::imbalance::{compute_lif, phase_lif, phase_wait_fractions, PhaseTiming};
use gfm_core::model::ModelConfig;
use gfm_core::preprocess::{generate_synthetic, PreprocessError, SyntheticConfig};
use gfm_core::{GraphRecord, Model};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::launch::{run_thread_ranks, DataSource, LaunchError, RankEnv, StoreOptions};
use crate::timing::PhaseClock;
use crate::trainer::{train, RankContext, TrainConfig, TrainError};

pub const DEFAULT_PER_RANK: usize = 3500;
pub const DEFAULT_MAX_RANKS: usize = 64;

#[derive(Debug, Error)]
pub enum ScalingError {
    #[error("invalid scaling setup: {0}")]
    Config(String),
    #[error(transparent)]
    Launch(#[from] LaunchError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Generate(#[from] PreprocessError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalingMode {
    Strong,
    Weak,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScalingOptions {
    pub clock: PhaseClock,
    /// Run one untimed epoch before the timed one.
    pub warmup: bool,
    /// Timed epochs per rank count; LIF and wait fractions are averaged over
    /// them, each epoch with its own global shuffle.
    pub timed_epochs: usize,
    pub max_ranks: usize,
    pub shuffle_seed: u64,
}

impl Default for ScalingOptions {
    fn default() -> Self {
        Self { clock: PhaseClock::Wall, warmup: true, timed_epochs: 1, max_ranks: DEFAULT_MAX_RANKS, shuffle_seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub ranks: usize,
    pub samples: usize,
    /// Mean over ranks and timed epochs of the epoch wall time.
    pub epoch_time_s: f64,
    /// Per compute phase, plus `compute` for dataload + forward + backward.
    pub lif: BTreeMap<String, f64>,
    pub wait_fraction: BTreeMap<String, f64>,
    /// Largest per-rank dataload + forward + backward on the phase clock.
    /// With the thread CPU clock this is the epoch time a host with one core
    /// per rank would approach; it is reported, never substituted for
    /// `epoch_time_s`.
    pub compute_critical_s: f64,
    /// Per-rank timings of each timed epoch.
    pub timings: Vec<Vec<PhaseTiming>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub mode: ScalingMode,
    pub clock: PhaseClock,
    pub rank_counts: Vec<usize>,
    pub rows: Vec<ScalingRow>,
}

impl ScalingReport {
    pub fn row(&self, ranks: usize) -> Option<&ScalingRow> {
        self.rows.iter().find(|r| r.ranks == ranks)
    }

    /// Per-rank phase times, one line per (rank count, timed epoch, rank).
    pub fn write_phase_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "mode,ranks,timed_epoch,rank,dataload,forward,backward,sync,epoch")?;
        let mode = match self.mode {
            ScalingMode::Strong => "strong",
            ScalingMode::Weak => "weak",
        };
        for row in &self.rows {
            for (e, epoch) in row.timings.iter().enumerate() {
                for t in epoch {
                    writeln!(
                        w,
                        "{mode},{},{e},{},{},{},{},{},{}",
                        row.ranks, t.rank, t.dataload, t.forward, t.backward, t.sync, t.epoch
                    )?;
                }
            }
        }
        Ok(())
    }
}

fn check_ranks(rank_counts: &[usize], opts: &ScalingOptions) -> Result<(), ScalingError> {
    if rank_counts.is_empty() {
        return Err(ScalingError::Config("no rank counts".into()));
    }
    if let Some(&p) = rank_counts.iter().find(|&&p| p == 0 || p > opts.max_ranks) {
        return Err(ScalingError::Config(format!("rank count {p} outside 1..={}", opts.max_ranks)));
    }
    Ok(())
}

fn mean_by_key(maps: &[BTreeMap<String, f64>]) -> BTreeMap<String, f64> {
    let mut out: BTreeMap<String, f64> = BTreeMap::new();
    for m in maps {
        for (k, v) in m {
            *out.entry(k.clone()).or_default() += v / maps.len() as f64;
        }
    }
    out
}

fn summarize(ranks: usize, samples: usize, epochs: Vec<Vec<PhaseTiming>>) -> ScalingRow {
    let mut lifs = Vec::new();
    let mut waits = Vec::new();
    let mut critical = 0.0;
    for timings in &epochs {
        let mut lif: BTreeMap<String, f64> = phase_lif(timings).into_iter().map(|(p, v)| (p.name().into(), v)).collect();
        let compute: Vec<f64> = timings.iter().map(|t| t.dataload + t.forward + t.backward).collect();
        critical += compute.iter().cloned().fold(0.0, f64::max) / epochs.len() as f64;
        if let Ok(v) = compute_lif(&compute) {
            lif.insert("compute".into(), v);
        }
        lifs.push(lif);
        waits.push(phase_wait_fractions(timings).into_iter().map(|(p, v)| (p.name().into(), v)).collect());
    }
    let n = epochs.iter().map(Vec::len).sum::<usize>().max(1) as f64;
    let epoch_time_s = epochs.iter().flatten().map(|t| t.epoch).sum::<f64>() / n;
    ScalingRow {
        ranks,
        samples,
        epoch_time_s,
        lif: mean_by_key(&lifs),
        wait_fraction: mean_by_key(&waits),
        compute_critical_s: critical,
        timings: epochs,
    }
}

/// Structures with atom counts drawn uniformly from `atoms`, each in a box
/// sized for the generator's default density so edge counts scale with atom
/// count instead of saturating.
pub fn mixed_workload(count: usize, atoms: (usize, usize), seed: u64) -> Result<Vec<GraphRecord>, ScalingError> {
    let base = SyntheticConfig::default();
    let mean_atoms = (base.n_atoms_range.0 + base.n_atoms_range.1) as f64 / 2.0;
    let density = mean_atoms / base.box_length.powi(3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let n = rng.gen_range(atoms.0..=atoms.1);
        out.extend(generate_synthetic(&SyntheticConfig {
            count: 1,
            n_atoms_range: (n, n),
            box_length: (n as f64 / density).cbrt(),
            seed: seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
            ..base.clone()
        })?);
    }
    Ok(out)
}

/// Runs data-parallel training on `records` over `ranks` thread ranks and
/// returns the per-rank timings of each timed epoch.
pub fn timed_epochs(
    records: Vec<GraphRecord>,
    ranks: usize,
    model: &ModelConfig,
    opts: &ScalingOptions,
) -> Result<Vec<Vec<PhaseTiming>>, ScalingError> {
    if opts.timed_epochs == 0 {
        return Err(ScalingError::Config("timed_epochs must be at least 1".into()));
    }
    let skip = usize::from(opts.warmup);
    let data = BTreeMap::from([(Group::Train, records)]);
    let cfg = TrainConfig {
        max_epochs: skip + opts.timed_epochs,
        patience: None,
        shuffle_seed: opts.shuffle_seed,
        clock: opts.clock,
        ..Default::default()
    };
    let store_opts = StoreOptions { groups: vec![Group::Train], ..Default::default() };
    let init = Model::init(model);
    let results = run_thread_ranks(&DataSource::Records(&data), ranks, &store_opts, |mut env: RankEnv| {
        let mut ctx = RankContext { comm: &mut env.comm, store: &env.store, meter: None };
        train(&mut ctx, init.clone(), None, &cfg).map(|o| o.epochs[skip..].iter().map(|e| e.timing).collect::<Vec<_>>())
    })?;
    let per_rank = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok((0..opts.timed_epochs).map(|e| per_rank.iter().map(|r| r[e]).collect()).collect())
}

/// Fixed total sample count across rank counts.
pub fn run_strong_scaling(
    records: &[GraphRecord],
    rank_counts: &[usize],
    model: &ModelConfig,
    opts: &ScalingOptions,
) -> Result<ScalingReport, ScalingError> {
    check_ranks(rank_counts, opts)?;
    let mut rows = Vec::new();
    for &p in rank_counts {
        let timings = timed_epochs(records.to_vec(), p, model, opts)?;
        rows.push(summarize(p, records.len(), timings));
    }
    Ok(ScalingReport { mode: ScalingMode::Strong, clock: opts.clock, rank_counts: rank_counts.to_vec(), rows })
}

/// Fixed per-rank sample count; the generator seed is shared so larger runs
/// extend smaller ones.
pub fn run_weak_scaling(
    generator: &SyntheticConfig,
    per_rank: usize,
    rank_counts: &[usize],
    model: &ModelConfig,
    opts: &ScalingOptions,
) -> Result<ScalingReport, ScalingError> {
    check_ranks(rank_counts, opts)?;
    let mut rows = Vec::new();
    for &p in rank_counts {
        let records = generate_synthetic(&SyntheticConfig { count: per_rank * p, ..generator.clone() })?;
        let timings = timed_epochs(records, p, model, opts)?;
        rows.push(summarize(p, per_rank * p, timings));
    }
    Ok(ScalingReport { mode: ScalingMode::Weak, clock: opts.clock, rank_counts: rank_counts.to_vec(), rows })
}
