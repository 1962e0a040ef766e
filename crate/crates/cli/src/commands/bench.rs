use std::fs::File;
use std::io::BufWriter;

use anyhow::Result;
use gfm_core::model::ModelConfig;
use gfm_core::preprocess::{generate_synthetic, SyntheticConfig};
use gfm_runtime::scaling::{mixed_workload, run_strong_scaling, run_weak_scaling, ScalingMode, ScalingOptions};
use tracing::info;

use crate::cli::{ScaleBenchArgs, Workload};
use crate::config::PipelineConfig;
use crate::util::{claim_outputs, companion, read_json, usage, write_json};

pub fn scale_bench(cfg: PipelineConfig, a: ScaleBenchArgs) -> Result<()> {
    // benchmark models are workloads, so only the structural checks apply
    let model: ModelConfig = match &a.model {
        Some(p) => read_json(p).map_err(|e| usage(format!("--model: {e:#}")))?,
        None => cfg.model.clone(),
    };
    model.validate().map_err(|e| usage(format!("model: {e}")))?;
    let mode: ScalingMode = a.mode.into();
    if a.ranks.0.is_empty() || a.timed_epochs == 0 {
        return Err(usage("--ranks needs at least one count and --timed-epochs at least 1"));
    }
    if mode == ScalingMode::Weak && a.workload == Workload::Mixed {
        return Err(usage("weak scaling uses the uniform workload"));
    }
    let atoms = a.atoms.unwrap_or(match a.workload {
        Workload::Uniform => (10, 10),
        Workload::Mixed => (10, 400),
    });
    let csv_path = companion(&a.out.out, "phases.csv");
    claim_outputs(&[&a.out.out, &csv_path], a.out.force)?;

    let opts = ScalingOptions { clock: a.clock, timed_epochs: a.timed_epochs, shuffle_seed: a.seed, ..Default::default() };
    let generator = SyntheticConfig {
        n_atoms_range: atoms,
        element_distribution: cfg.data.elements.clone(),
        box_length: cfg.data.box_length,
        cutoff_radius: cfg.data.cutoff_radius,
        seed: a.seed,
        ..Default::default()
    };
    let report = match (mode, a.workload) {
        (ScalingMode::Strong, Workload::Uniform) => {
            let records = generate_synthetic(&SyntheticConfig { count: a.samples, ..generator })?;
            run_strong_scaling(&records, &a.ranks.0, &model, &opts)?
        }
        (ScalingMode::Strong, Workload::Mixed) => {
            let records = mixed_workload(a.samples, atoms, a.seed)?;
            run_strong_scaling(&records, &a.ranks.0, &model, &opts)?
        }
        (ScalingMode::Weak, _) => run_weak_scaling(&generator, a.per_rank, &a.ranks.0, &model, &opts)?,
    };
    for row in &report.rows {
        info!(event = "scaling_row", ranks = row.ranks, samples = row.samples, epoch_s = row.epoch_time_s, lif = ?row.lif);
    }
    write_json(&a.out.out, &report)?;
    report.write_phase_csv(BufWriter::new(File::create(&csv_path)?))?;
    Ok(())
}
