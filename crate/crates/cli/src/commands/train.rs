use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use gfm_core::container::ContainerReader;
use gfm_core::model::ModelConfig;
use gfm_core::Model;
use gfm_runtime::comm::{Communicator, TcpComm, DEFAULT_TIMEOUT};
use gfm_runtime::ddstore::{read_rendezvous, write_rendezvous_line, DDStore, Endpoint, LocalStore, TcpTransport};
use gfm_runtime::launch::{run_thread_ranks, store_layout, DataSource, StoreOptions};
use gfm_runtime::trainer::{param_digest, train as train_ranks, EpochMetrics, NanEvent, RankContext, StopReason, TrainConfig, TrainOutcome};
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::cli::{recheck, RankArgs, TrainArgs};
use crate::config::{Launcher, PipelineConfig, StoreConfig};
use crate::util::{claim_outputs, read_json, usage, write_json};

pub const CHECKPOINT_FILE: &str = "model.gfmp";
pub const METRICS_FILE: &str = "train.json";

/// How long ranks wait for each other to appear.
const JOIN_TIMEOUT: Duration = Duration::from_secs(60);

pub fn store_options(s: &StoreConfig) -> StoreOptions {
    StoreOptions {
        replication: s.replication,
        chunk: s.chunk,
        fetch_timeout: Duration::from_secs_f64(s.fetch_timeout_s),
        ..Default::default()
    }
}

/// Everything a rank process needs besides its rank and the container.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankJob {
    pub ranks: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub store: StoreConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankReport {
    pub rank: usize,
    pub epochs: Vec<EpochMetrics>,
    pub stop: StopReason,
    pub nan_events: Vec<NanEvent>,
    pub param_count: usize,
    pub param_digest: u64,
}

impl RankReport {
    fn new(rank: usize, o: TrainOutcome) -> Self {
        Self {
            rank,
            param_count: o.model.param_count(),
            param_digest: param_digest(&o.model.params),
            epochs: o.epochs,
            stop: o.stop,
            nan_events: o.nan_events,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub ranks: usize,
    pub launcher: Launcher,
    pub model: ModelConfig,
    pub stop: StopReason,
    pub epochs: Vec<EpochMetrics>,
    pub final_val_mae: Option<f64>,
    pub param_count: usize,
    pub param_digest: u64,
    pub checkpoint: PathBuf,
    pub elapsed_s: f64,
}

/// Trains on `container` with thread ranks and returns one report per rank.
pub fn train_threads(container: &Path, job: &RankJob) -> Result<Vec<RankReport>> {
    let reader = ContainerReader::open(container)?;
    let init = Model::init(&job.model);
    let results = run_thread_ranks(&DataSource::Container(&reader), job.ranks, &store_options(&job.store), |mut env| {
        let rank = env.store.rank();
        let mut ctx = RankContext { comm: &mut env.comm, store: &env.store, meter: None };
        train_ranks(&mut ctx, init.clone(), None, &job.train).map(|o| RankReport::new(rank, o))
    })?;
    Ok(results.into_iter().collect::<Result<Vec<_>, _>>()?)
}

fn rendezvous_path() -> PathBuf {
    match std::env::var_os("GFM_RENDEZVOUS") {
        Some(p) if !p.is_empty() => PathBuf::from(p),
        _ => {
            let nanos = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_nanos());
            std::env::temp_dir().join(format!("gfm-rendezvous-{}-{nanos}", std::process::id()))
        }
    }
}

fn kill_all(children: &mut [Child]) {
    for c in children {
        let _ = c.kill();
        let _ = c.wait();
    }
}

/// Trains with one child process per rank, joined through a rendezvous file.
pub fn train_processes(container: &Path, job: &RankJob) -> Result<Vec<RankReport>> {
    let rendezvous = rendezvous_path();
    if rendezvous.exists() {
        std::fs::remove_file(&rendezvous).with_context(|| format!("clearing {}", rendezvous.display()))?;
    }
    let job_path = rendezvous.with_extension("job.json");
    write_json(&job_path, job)?;
    let exe = std::env::current_exe()?;
    let mut children = Vec::new();
    for r in 0..job.ranks {
        let spawned = Command::new(&exe)
            .arg("rank")
            .arg("--container")
            .arg(container)
            .args(["--rank", &r.to_string()])
            .arg("--job")
            .arg(&job_path)
            .arg("--rendezvous")
            .arg(&rendezvous)
            .env("GFM_RENDEZVOUS", &rendezvous)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn();
        match spawned {
            Ok(c) => children.push(c),
            Err(e) => {
                kill_all(&mut children);
                return Err(e).context("spawning rank process");
            }
        }
    }
    info!(event = "ranks_spawned", ranks = job.ranks, rendezvous = %rendezvous.display());

    // a failed rank would leave its peers waiting on timeouts; stop them all
    let mut done = vec![false; children.len()];
    let mut failure = None;
    while failure.is_none() && done.iter().any(|d| !d) {
        for (r, c) in children.iter_mut().enumerate() {
            if done[r] {
                continue;
            }
            if let Some(status) = c.try_wait()? {
                done[r] = true;
                if !status.success() {
                    failure = Some(format!("rank {r} exited with {status}"));
                    break;
                }
            }
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    let mut reports = Vec::new();
    if failure.is_none() {
        for (r, c) in children.iter_mut().enumerate() {
            let mut text = String::new();
            c.stdout.take().expect("piped").read_to_string(&mut text)?;
            reports.push(serde_json::from_str::<RankReport>(&text).with_context(|| format!("rank {r} report"))?);
        }
    }
    kill_all(&mut children);
    let _ = std::fs::remove_file(&rendezvous);
    let _ = std::fs::remove_file(&job_path);
    if let Some(f) = failure {
        bail!(f);
    }
    Ok(reports)
}

pub fn train(mut cfg: PipelineConfig, a: TrainArgs) -> Result<()> {
    let t = &mut cfg.train;
    t.ranks = a.ranks.unwrap_or(t.ranks);
    t.launcher = a.launcher.unwrap_or(t.launcher);
    t.epochs = a.epochs.unwrap_or(t.epochs);
    if let Some(p) = a.patience {
        t.patience = (p > 0).then_some(p);
    }
    t.shuffle_seed = a.shuffle_seed.unwrap_or(t.shuffle_seed);
    if let Some(m) = &a.model {
        cfg.model = read_json(m).map_err(|e| usage(format!("--model: {e:#}")))?;
    }
    recheck(&cfg)?;
    if !a.container.is_dir() {
        return Err(usage(format!("--container {}: not a directory", a.container.display())));
    }
    claim_outputs(&[&a.out.out], a.out.force)?;
    std::fs::create_dir_all(&a.out.out)?;
    let checkpoint = a.out.out.join(CHECKPOINT_FILE);
    let t = &cfg.train;
    let job = RankJob {
        ranks: t.ranks,
        model: cfg.model.clone(),
        train: TrainConfig {
            max_epochs: t.epochs,
            patience: t.patience,
            shuffle_seed: t.shuffle_seed,
            optimizer: t.optimizer,
            clock: t.clock,
            wall_clock_limit_s: t.wall_clock_limit_s,
            checkpoint: Some(std::path::absolute(&checkpoint)?),
            ..Default::default()
        },
        store: cfg.store.clone(),
    };
    let started = Instant::now();
    let reports = match t.launcher {
        Launcher::Thread => train_threads(&a.container, &job)?,
        Launcher::Process => train_processes(&a.container, &job)?,
    };
    let first = &reports[0];
    if let Some(r) = reports.iter().find(|r| r.param_digest != first.param_digest) {
        bail!("rank {} finished with different parameters than rank 0", r.rank);
    }
    if first.stop == StopReason::NonFinite {
        warn!(event = "non_finite", epochs = first.epochs.len(), "training stopped on a non-finite loss");
    }
    let summary = TrainSummary {
        ranks: job.ranks,
        launcher: t.launcher,
        model: job.model.clone(),
        stop: first.stop,
        final_val_mae: first.epochs.last().and_then(|e| e.val_mae),
        epochs: first.epochs.clone(),
        param_count: first.param_count,
        param_digest: first.param_digest,
        checkpoint: PathBuf::from(CHECKPOINT_FILE),
        elapsed_s: started.elapsed().as_secs_f64(),
    };
    write_json(&a.out.out.join(METRICS_FILE), &summary)?;
    info!(event = "trained", epochs = summary.epochs.len(), stop = ?summary.stop, val_mae = summary.final_val_mae);
    Ok(())
}

/// One rank of a process launch.
pub fn rank(a: RankArgs) -> Result<()> {
    let job: RankJob = read_json(&a.job)?;
    if a.rank >= job.ranks {
        return Err(usage(format!("rank {} of {}", a.rank, job.ranks)));
    }
    let endpoint = Endpoint::bind("127.0.0.1:0")?;
    write_rendezvous_line(&a.rendezvous, a.rank, endpoint.local_addr())?;
    let peers = read_rendezvous(&a.rendezvous, job.ranks, JOIN_TIMEOUT)?;

    let reader = ContainerReader::open(&a.container)?;
    let opts = store_options(&job.store);
    let layout = store_layout(&DataSource::Container(&reader), job.ranks, &opts)?;
    let local = Arc::new(LocalStore::load(&reader, &layout, a.rank)?);
    endpoint.serve_store(local.clone());
    let mut comm = if a.rank == 0 {
        let links = endpoint.take_comm_links().expect("links taken once");
        TcpComm::accept(job.ranks, &links, DEFAULT_TIMEOUT)?
    } else {
        TcpComm::connect(a.rank, job.ranks, peers[0], DEFAULT_TIMEOUT)?
    };
    // every shard is loaded before anyone fetches
    comm.barrier()?;
    let store = DDStore::new(a.rank, layout, local, Arc::new(TcpTransport::new(peers, opts.fetch_timeout)));
    let mut ctx = RankContext { comm: &mut comm, store: &store, meter: None };
    let out = train_ranks(&mut ctx, Model::init(&job.model), None, &job.train)?;
    println!("{}", serde_json::to_string(&RankReport::new(a.rank, out))?);
    Ok(())
}
