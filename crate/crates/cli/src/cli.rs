use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use gfm_core::container::Group;
use gfm_core::uq::ForceReduction;
use gfm_runtime::scaling::ScalingMode;
use gfm_runtime::timing::PhaseClock;

use crate::config::{validate_config, Launcher, PipelineConfig};
use crate::util::{parse_duration_s, parse_pair, parse_ratios, usage, List};

const AFTER_HELP: &str = "\
Exit codes: 0 success, 1 the stage failed, 2 bad invocation or configuration.
Environment:
  GFM_LOG_LEVEL   error | warn | info | debug | trace (default info); JSON lines on stderr
  GFM_RENDEZVOUS  rendezvous file for process ranks (default: a fresh temporary file)";

#[derive(Debug, Parser)]
#[command(name = "gfm", version, about = "Scalable multitask training pipeline for atomistic graph data", after_help = AFTER_HELP)]
pub struct Cli {
    /// Pipeline configuration (JSON); flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct OutArgs {
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Replace existing outputs instead of refusing.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate labeled synthetic structures as extended XYZ.
    Generate(GenerateArgs),
    /// Filter, realign and split a dataset into a container.
    Preprocess(PreprocessArgs),
    /// Repack a container or extended-XYZ file with a given sub-file count.
    WriteContainer(WriteContainerArgs),
    /// Measure parallel container reads and store fetch latency.
    BenchIo(BenchIoArgs),
    /// Data-parallel training on a container.
    Train(TrainArgs),
    /// Strong or weak scaling benchmark with per-phase timing.
    ScaleBench(ScaleBenchArgs),
    /// Asynchronous Bayesian hyperparameter search.
    Hpo(HpoArgs),
    /// Pick ensemble members from a search history and train them fully.
    SelectEnsemble(SelectArgs),
    /// Ensemble predictions, uncertainties and error metrics.
    UqReport(UqArgs),
    /// Validate a configuration and print every effective value.
    Config(ConfigArgs),
    #[command(hide = true)]
    Rank(RankArgs),
    #[command(hide = true)]
    HpoTrial(HpoTrialArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Generate(_) => "generate",
            Self::Preprocess(_) => "preprocess",
            Self::WriteContainer(_) => "write-container",
            Self::BenchIo(_) => "bench-io",
            Self::Train(_) => "train",
            Self::ScaleBench(_) => "scale-bench",
            Self::Hpo(_) => "hpo",
            Self::SelectEnsemble(_) => "select-ensemble",
            Self::UqReport(_) => "uq-report",
            Self::Config(_) => "config",
            Self::Rank(_) => "rank",
            Self::HpoTrial(_) => "hpo-trial",
        }
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub count: Option<usize>,
    /// Atoms per structure, inclusive.
    #[arg(long, value_name = "LO,HI", value_parser = parse_pair)]
    pub atoms: Option<(usize, usize)>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub box_length: Option<f64>,
    #[arg(long)]
    pub cutoff: Option<f64>,
    #[arg(long)]
    pub source_tag: Option<String>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Extended-XYZ file, or `synthetic` to generate from the data section.
    #[arg(long = "in", value_name = "PATH|synthetic")]
    pub input: String,
    /// eV/angstrom; structures with a larger force spectral norm are dropped.
    #[arg(long)]
    pub filter_threshold: Option<f64>,
    #[arg(long, overrides_with = "no_realign")]
    pub realign: bool,
    #[arg(long)]
    pub no_realign: bool,
    #[arg(long, value_name = "TRAIN,VAL,TEST", value_parser = parse_ratios)]
    pub split: Option<[f64; 3]>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub subfiles: Option<u32>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct WriteContainerArgs {
    /// A container directory or an extended-XYZ file.
    #[arg(long = "in", value_name = "PATH")]
    pub input: PathBuf,
    #[arg(long)]
    pub subfiles: Option<u32>,
    /// Split for extended-XYZ input.
    #[arg(long, value_name = "TRAIN,VAL,TEST", value_parser = parse_ratios)]
    pub split: Option<[f64; 3]>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct BenchIoArgs {
    #[arg(long)]
    pub container: PathBuf,
    #[arg(long, default_value = "trainset")]
    pub group: Group,
    #[arg(long, default_value = "1,2,4,8")]
    pub readers: List<usize>,
    /// Random fetches per latency measurement.
    #[arg(long, default_value_t = 10_000)]
    pub fetches: usize,
    /// Ranks of the in-memory store.
    #[arg(long, default_value_t = 4)]
    pub ranks: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub container: PathBuf,
    #[arg(long)]
    pub ranks: Option<usize>,
    #[arg(long, value_enum)]
    pub launcher: Option<Launcher>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Epochs without improvement before stopping; 0 disables early stopping.
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub shuffle_seed: Option<u64>,
    /// Model configuration (JSON), replacing the model section.
    #[arg(long, value_name = "FILE")]
    pub model: Option<PathBuf>,
    /// Output directory: `model.gfmp` and `train.json`.
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[arg(long)]
    pub container: PathBuf,
    #[arg(long)]
    pub rank: usize,
    #[arg(long)]
    pub job: PathBuf,
    #[arg(long)]
    pub rendezvous: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScaleBenchArgs {
    #[arg(long, value_enum)]
    pub mode: ScalingModeArg,
    #[arg(long, default_value = "1,2,4,8")]
    pub ranks: List<usize>,
    /// Total graphs (strong mode).
    #[arg(long, default_value_t = 50_000)]
    pub samples: usize,
    /// Graphs per rank (weak mode).
    #[arg(long, default_value_t = gfm_runtime::scaling::DEFAULT_PER_RANK)]
    pub per_rank: usize,
    #[arg(long, value_enum, default_value = "uniform")]
    pub workload: Workload,
    /// Atoms per graph; defaults to 10,10 for uniform and 10,400 for mixed.
    #[arg(long, value_name = "LO,HI", value_parser = parse_pair)]
    pub atoms: Option<(usize, usize)>,
    #[arg(long, value_name = "FILE")]
    pub model: Option<PathBuf>,
    /// Clock for compute phases: wall or thread-cpu.
    #[arg(long, default_value = "wall")]
    pub clock: PhaseClock,
    #[arg(long, default_value_t = 1)]
    pub timed_epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report JSON; the phase CSV goes beside it as `<stem>.phases.csv`.
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ScalingModeArg {
    Strong,
    Weak,
}

impl From<ScalingModeArg> for ScalingMode {
    fn from(m: ScalingModeArg) -> Self {
        match m {
            ScalingModeArg::Strong => ScalingMode::Strong,
            ScalingModeArg::Weak => ScalingMode::Weak,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Workload {
    /// Same-size graphs.
    Uniform,
    /// Graph sizes spread evenly over the atom range at constant density.
    Mixed,
}

#[derive(Debug, Args)]
pub struct HpoArgs {
    #[arg(long)]
    pub container: PathBuf,
    /// Search space (JSON), replacing the one in the config.
    #[arg(long, value_name = "FILE")]
    pub space: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub fidelity: Option<usize>,
    #[arg(long)]
    pub max_trials: Option<usize>,
    /// Wall-clock budget, e.g. `2h`, `90s` or plain seconds.
    #[arg(long, value_parser = parse_duration_s)]
    pub budget: Option<f64>,
    /// History of an earlier run to warm-start from.
    #[arg(long, value_name = "FILE")]
    pub restart: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run trials on threads of this process instead of worker processes.
    #[arg(long)]
    pub in_process: bool,
    /// History (JSON lines); `<stem>.summary.json` and `<stem>.samples/` go beside it.
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct HpoTrialArgs {
    #[arg(long)]
    pub container: PathBuf,
    /// Trial job (JSON).
    #[arg(long)]
    pub job: String,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[arg(long)]
    pub history: PathBuf,
    #[arg(long)]
    pub tau1: Option<f64>,
    #[arg(long)]
    pub tau2: Option<f64>,
    #[arg(long)]
    pub k2: Option<usize>,
    /// Container the members are trained on.
    #[arg(long)]
    pub container: PathBuf,
    /// Full-training epochs per member.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// 0 disables early stopping.
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub ranks: Option<usize>,
    /// Member list (JSON); checkpoints go to `<stem>.members/` beside it.
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct UqArgs {
    #[arg(long)]
    pub members: PathBuf,
    #[arg(long)]
    pub container: PathBuf,
    #[arg(long, default_value = "testset")]
    pub split: List<Group>,
    /// Per-source dataset STDs (JSON object of `{"energy": .., "force": ..}`);
    /// defaults to the built-in table of the public pre-training sources.
    #[arg(long, value_name = "FILE")]
    pub std_table: Option<PathBuf>,
    /// Uniformly sample this many structures per split.
    #[arg(long)]
    pub sample: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Per-structure force uncertainty summary: max, mean or l2.
    #[arg(long, default_value = "max")]
    pub force_reduction: ForceReduction,
    /// Directory for `parity.csv` and `metrics.csv`.
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Document to check; defaults to `--config`, then the empty document.
    pub file: Option<PathBuf>,
}

fn issues_error(issues: &[crate::config::ConfigIssue]) -> anyhow::Error {
    let lines: Vec<String> = issues.iter().map(|i| format!("  {i}")).collect();
    usage(format!("invalid configuration:\n{}", lines.join("\n")))
}

pub fn load_config(path: Option<&std::path::Path>) -> Result<PipelineConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| usage(format!("reading {}: {e}", p.display())))?,
        None => String::new(),
    };
    validate_config(&text).map_err(|i| issues_error(&i))
}

/// Re-checks a config after flags were applied.
pub fn recheck(cfg: &PipelineConfig) -> Result<()> {
    let issues = cfg.issues();
    if issues.is_empty() {
        Ok(())
    } else {
        Err(issues_error(&issues))
    }
}

pub fn run(cli: Cli) -> Result<()> {
    use crate::commands::*;
    let cfg_path = cli.config.as_deref();
    match cli.command {
        Command::Generate(a) => data::generate(load_config(cfg_path)?, a),
        Command::Preprocess(a) => data::preprocess(load_config(cfg_path)?, a),
        Command::WriteContainer(a) => data::write_container(load_config(cfg_path)?, a),
        Command::BenchIo(a) => data::bench_io(load_config(cfg_path)?, a),
        Command::Train(a) => train::train(load_config(cfg_path)?, a),
        Command::Rank(a) => train::rank(a),
        Command::ScaleBench(a) => bench::scale_bench(load_config(cfg_path)?, a),
        Command::Hpo(a) => search::hpo(load_config(cfg_path)?, a),
        Command::HpoTrial(a) => search::hpo_trial(a),
        Command::SelectEnsemble(a) => ensemble::select(load_config(cfg_path)?, a),
        Command::UqReport(a) => ensemble::uq_report(a),
        Command::Config(a) => {
            let cfg = load_config(a.file.as_deref().or(cfg_path))?;
            println!("{}", crate::config::normalized(&cfg));
            Ok(())
        }
    }
}
