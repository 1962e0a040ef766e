use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gfm_core::checkpoint::Checkpoint;
use gfm_core::container::{ContainerReader, Group};
use gfm_core::model::ModelConfig;
use gfm_core::uq::{
    ensemble_predict, load_members, pareto_front, relative_uncertainty, select_ensemble, split_metrics, DatasetStd,
    SelectionPolicy, StructureResidual, Tier, TrialScore,
};
use gfm_runtime::hpo::{read_history, TrialStatus};
use gfm_runtime::trainer::{StopReason, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::cli::{recheck, SelectArgs, UqArgs};
use crate::commands::train::{train_threads, RankJob};
use crate::config::PipelineConfig;
use crate::util::{claim_outputs, companion, read_json, write_json};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FullTraining {
    pub epochs: usize,
    pub stop: StopReason,
    pub final_val_mae: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemberEntry {
    pub trial_id: u64,
    pub tier: Tier,
    /// Search-time score.
    pub validation_mae: f64,
    pub energy_kwh: f64,
    pub config: ModelConfig,
    /// Relative to the directory holding the member list.
    pub checkpoint: PathBuf,
    pub full_training: FullTraining,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MembersFile {
    pub policy: SelectionPolicy,
    pub epochs: usize,
    pub patience: Option<usize>,
    /// Completed trials not dominated in (validation MAE, energy).
    pub pareto_front: Vec<u64>,
    pub members: Vec<MemberEntry>,
}

pub fn select(mut cfg: PipelineConfig, a: SelectArgs) -> Result<()> {
    let s = &mut cfg.selection;
    s.tau1 = a.tau1.unwrap_or(s.tau1);
    s.tau2 = a.tau2.unwrap_or(s.tau2);
    s.k2 = a.k2.unwrap_or(s.k2);
    s.epochs = a.epochs.unwrap_or(s.epochs);
    if let Some(p) = a.patience {
        s.patience = (p > 0).then_some(p);
    }
    cfg.train.ranks = a.ranks.unwrap_or(cfg.train.ranks);
    recheck(&cfg)?;
    let s = &cfg.selection;
    let policy = SelectionPolicy { tau1: s.tau1, tau2: s.tau2, k2: s.k2 };

    let history = read_history(&a.history).with_context(|| format!("reading {}", a.history.display()))?;
    let completed: Vec<_> = history.iter().filter(|t| t.status == TrialStatus::Completed && t.validation_mae.is_some()).collect();
    let scores: Vec<TrialScore> = completed
        .iter()
        .map(|t| TrialScore { trial_id: t.trial_id, validation_mae: t.validation_mae.unwrap(), energy_kwh: t.energy_kwh })
        .collect();
    let chosen = select_ensemble(&scores, &policy)?;
    let points: Vec<(f64, f64)> = scores.iter().map(|t| (t.validation_mae, t.energy_kwh)).collect();
    let front: Vec<u64> = pareto_front(&points).into_iter().map(|i| scores[i].trial_id).collect();
    info!(event = "selected", completed = scores.len(), members = chosen.len(), pareto = front.len());
    if chosen.is_empty() {
        warn!(event = "empty_selection", "no trial falls under tau2; the member list is empty");
    }

    let ckpt_dir = companion(&a.out.out, "members");
    claim_outputs(&[&a.out.out, &ckpt_dir], a.out.force)?;
    std::fs::create_dir_all(&ckpt_dir)?;
    let dir_name = PathBuf::from(ckpt_dir.file_name().expect("companion has a name"));
    let mut members = Vec::new();
    for m in &chosen {
        let trial = completed.iter().find(|t| t.trial_id == m.trial_id).expect("selected from history");
        let file = format!("member-{}.gfmp", m.trial_id);
        let job = RankJob {
            ranks: cfg.train.ranks,
            model: trial.config.clone(),
            train: TrainConfig {
                max_epochs: s.epochs,
                patience: s.patience,
                shuffle_seed: cfg.train.shuffle_seed,
                optimizer: cfg.train.optimizer,
                checkpoint: Some(std::path::absolute(ckpt_dir.join(&file))?),
                ..Default::default()
            },
            store: cfg.store.clone(),
        };
        let report = train_threads(&a.container, &job)?.remove(0);
        let full = FullTraining {
            epochs: report.epochs.len(),
            stop: report.stop,
            final_val_mae: report.epochs.last().and_then(|e| e.val_mae),
        };
        info!(event = "member_trained", trial = m.trial_id, epochs = full.epochs, val_mae = full.final_val_mae);
        members.push(MemberEntry {
            trial_id: m.trial_id,
            tier: m.tier,
            validation_mae: m.validation_mae,
            energy_kwh: m.energy_kwh,
            config: trial.config.clone(),
            checkpoint: dir_name.join(file),
            full_training: full,
        });
    }
    let out = MembersFile { policy, epochs: s.epochs, patience: s.patience, pareto_front: front, members };
    write_json(&a.out.out, &out)
}

#[derive(Debug, Serialize)]
struct ParityRow<'a> {
    split: &'a str,
    index: usize,
    source: &'a str,
    n_atoms: usize,
    target_energy_per_atom: f64,
    mean_energy_per_atom: f64,
    sigma_energy_per_atom: f64,
    relative_sigma_energy: f64,
    sigma_force: f64,
    relative_sigma_force: f64,
    members: usize,
}

fn sample_indices(n: usize, sample: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match sample {
        Some(k) if k < n => {
            let mut v = rand::seq::index::sample(rng, n, k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..n).collect(),
    }
}

fn base_dir(path: &Path) -> &Path {
    path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."))
}

pub fn uq_report(a: UqArgs) -> Result<()> {
    let list: MembersFile = read_json(&a.members)?;
    if list.members.is_empty() {
        bail!("{} lists no members", a.members.display());
    }
    let base = base_dir(&a.members);
    let checkpoints = list
        .members
        .iter()
        .map(|m| {
            let p = base.join(&m.checkpoint);
            Checkpoint::load(&p).with_context(|| format!("loading {}", p.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    let models = load_members::<f64>(&checkpoints)?;
    let table = match &a.std_table {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            DatasetStd::from_json(&text).map_err(|e| anyhow::anyhow!("{}: {e}", p.display()))?
        }
        None => DatasetStd::builtin(),
    };
    let reader = ContainerReader::open(&a.container)?;
    let parity_path = a.out.out.join("parity.csv");
    let metrics_path = a.out.out.join("metrics.csv");
    claim_outputs(&[&a.out.out], a.out.force)?;
    std::fs::create_dir_all(&a.out.out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut parity = csv::Writer::from_path(&parity_path)?;
    let mut residuals = Vec::new();
    for &group in &a.split.0 {
        let n = reader.manifest().record_count(group);
        for i in sample_indices(n, a.sample, &mut rng) {
            let rec = reader.read_record(group, i)?;
            let pred = ensemble_predict(&models, &rec)?;
            let std = table.lookup(&rec.source_tag)?;
            let atoms = rec.n_atoms() as f64;
            let sigma_force = pred.force_std_summary(a.force_reduction);
            let row = ParityRow {
                split: group.name(),
                index: i,
                source: &rec.source_tag,
                n_atoms: rec.n_atoms(),
                target_energy_per_atom: rec.energy / atoms,
                mean_energy_per_atom: pred.energy / atoms,
                sigma_energy_per_atom: pred.energy_std / atoms,
                relative_sigma_energy: relative_uncertainty(pred.energy_std / atoms, std.energy)?,
                sigma_force,
                relative_sigma_force: relative_uncertainty(sigma_force, std.force)?,
                members: pred.members,
            };
            parity.serialize(&row)?;
            residuals.push(StructureResidual {
                split: group.name().to_string(),
                source_tag: rec.source_tag.clone(),
                energy_per_atom: (pred.energy - rec.energy) / atoms,
                forces: pred.forces.iter().zip(&rec.forces).flat_map(|(p, t)| (0..3).map(move |c| p[c] - t[c])).collect(),
            });
        }
    }
    parity.flush()?;

    let names: Vec<&str> = a.split.0.iter().map(|g: &Group| g.name()).collect();
    let (rows, notices) = split_metrics(&residuals, &names);
    for n in notices {
        warn!(event = "empty_split", "{n}");
    }
    let mut metrics = csv::Writer::from_path(&metrics_path)?;
    for r in &rows {
        if r.energy_rmse < r.energy_mae || r.force_rmse < r.force_mae {
            bail!("metrics row {}/{} has RMSE below MAE", r.split, r.source);
        }
        metrics.serialize(r)?;
    }
    metrics.flush()?;
    info!(event = "uq_report", structures = residuals.len(), members = models.len(), rows = rows.len());
    Ok(())
}
