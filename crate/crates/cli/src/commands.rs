//! Command-line surface: `svo generate | ingest | train | eval | snr`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use svo_core::eval::{k_step_predict, latent_means, r_squared, LatentMode};
use svo_core::grad::measure_snr;
use svo_core::model::Trajectory;
use svo_core::rng::{derive_rng, stream, LiveSource};
use svo_core::systems::{
    ingest_csv, simulate_fn, simulate_lorenz, Dataset, FnConfig, IngestConfig, LorenzConfig,
};

use crate::artifacts::{
    write_latents_csv, write_rollout_csv, write_rollout_trials_csv, write_slopes_json,
    write_snr_csv, Checkpoint,
};
use crate::config::{parse_estimator_list, parse_k_grid, resolve_out_dir, RunConfig};
use crate::train::{split_trials, train};

#[derive(Parser)]
#[command(
    name = "svo",
    version,
    about = "Train and evaluate particle-smoothing variational state-space models"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Simulate a benchmark system and write a dataset.
    Generate(GenerateArgs),
    /// Convert a CSV of observation rows into a dataset.
    Ingest(IngestArgs),
    /// Run a training job described by a run-config JSON file.
    Train(TrainArgs),
    /// Score a checkpoint: k-step rollouts and posterior latent means.
    Eval(EvalArgs),
    /// Measure gradient signal-to-noise ratios across particle counts.
    Snr(SnrArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SystemKind {
    /// Two-dimensional relaxation oscillator observed through its voltage.
    Fn,
    /// Three-dimensional chaotic attractor observed through a random network.
    Lorenz,
}

#[derive(Args)]
pub struct GenerateArgs {
    /// Which benchmark system to simulate.
    #[arg(long, value_enum)]
    pub system: SystemKind,
    /// Optional spec JSON: {"n_trials", "seed", "config": {...}}; any missing
    /// field takes its default.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory that receives dataset.json and generate_spec.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Override the spec's trial count.
    #[arg(long)]
    pub trials: Option<usize>,
    /// Override the spec's master seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct IngestArgs {
    /// Headerless CSV; each row is one recording, values column-major by time.
    #[arg(long)]
    pub csv: PathBuf,
    /// Optional IngestConfig JSON (downsample_to, segments_per_trial,
    /// normalize, split).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory that receives dataset.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Run-config JSON path.
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    /// Weighted particle mean from the forward filter.
    Filter,
    /// Mean over backward-simulated smoothed trajectories.
    Smooth,
}

impl From<EvalMode> for LatentMode {
    fn from(m: EvalMode) -> Self {
        match m {
            EvalMode::Filter => LatentMode::Filter,
            EvalMode::Smooth => LatentMode::Smooth,
        }
    }
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// dataset.json to score against.
    #[arg(long)]
    pub data: PathBuf,
    /// Largest prediction horizon.
    #[arg(long, default_value_t = 10)]
    pub kmax: usize,
    #[arg(long, value_enum, default_value_t = EvalMode::Filter)]
    pub mode: EvalMode,
    /// Particle count for the forward filter.
    #[arg(long, default_value_t = 32)]
    pub particles: usize,
    /// Subparticle count for backward simulation (smooth mode only).
    #[arg(long, default_value_t = 16)]
    pub subparticles: usize,
    /// Which trials to score: train, val, test, or all.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Output directory; defaults to the checkpoint's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct SnrArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// dataset.json providing the conditioning trajectories.
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated particle counts, e.g. 4,8,16,32.
    #[arg(long)]
    pub kgrid: String,
    /// Comma-separated estimator names: biased, categorical, concrete,
    /// concrete:<temperature>, concrete:inverse_k.
    #[arg(long, default_value = "biased,categorical,concrete")]
    pub estimators: String,
    /// Gradient samples per (estimator, particle count) cell.
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    /// Output directory; defaults to the checkpoint's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Condition every sample on this single trial index instead of cycling
    /// through the training split.
    #[arg(long)]
    pub trial: Option<usize>,
}

/// Spec file for `generate`; every field optional.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateFnSpec {
    pub n_trials: usize,
    pub seed: u64,
    pub config: FnConfig,
}

impl Default for GenerateFnSpec {
    fn default() -> Self {
        Self {
            n_trials: 100,
            seed: 0,
            config: FnConfig::default(),
        }
    }
}

/// Spec file for `generate --system lorenz`; every field optional.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateLorenzSpec {
    pub n_trials: usize,
    pub seed: u64,
    pub config: LorenzConfig,
}

impl Default for GenerateLorenzSpec {
    fn default() -> Self {
        Self {
            n_trials: 100,
            seed: 0,
            config: LorenzConfig::default(),
        }
    }
}

pub fn run() -> anyhow::Result<()> {
    dispatch(Cli::parse())
}

pub fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Ingest(args) => cmd_ingest(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Snr(args) => cmd_snr(args),
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn cmd_generate(args: GenerateArgs) -> anyhow::Result<()> {
    let out = resolve_out_dir(&args.out);
    std::fs::create_dir_all(&out)
        .with_context(|| format!("creating output directory {}", out.display()))?;
    let (dataset, spec_json) = match args.system {
        SystemKind::Fn => {
            let mut spec: GenerateFnSpec = match &args.config {
                Some(p) => read_json(p)?,
                None => GenerateFnSpec::default(),
            };
            if let Some(n) = args.trials {
                spec.n_trials = n;
            }
            if let Some(s) = args.seed {
                spec.seed = s;
            }
            let ds = simulate_fn(&spec.config, spec.n_trials, spec.seed)?;
            (ds, serde_json::to_string_pretty(&spec)?)
        }
        SystemKind::Lorenz => {
            let mut spec: GenerateLorenzSpec = match &args.config {
                Some(p) => read_json(p)?,
                None => GenerateLorenzSpec::default(),
            };
            if let Some(n) = args.trials {
                spec.n_trials = n;
            }
            if let Some(s) = args.seed {
                spec.seed = s;
            }
            let ds = simulate_lorenz(&spec.config, spec.n_trials, spec.seed)?;
            (ds, serde_json::to_string_pretty(&spec)?)
        }
    };
    std::fs::write(out.join("generate_spec.json"), spec_json)?;
    let path = out.join("dataset.json");
    dataset.save_json(&path)?;
    println!(
        "wrote {} ({} trials: {} train / {} val / {} test, t_len {}, d_x {})",
        path.display(),
        dataset.trials.len(),
        dataset.train_idx.len(),
        dataset.val_idx.len(),
        dataset.test_idx.len(),
        dataset.t_len(),
        dataset.trials[0].d_x,
    );
    Ok(())
}

fn cmd_ingest(args: IngestArgs) -> anyhow::Result<()> {
    let cfg: IngestConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => IngestConfig::default(),
    };
    let out = resolve_out_dir(&args.out);
    std::fs::create_dir_all(&out)
        .with_context(|| format!("creating output directory {}", out.display()))?;
    let dataset = ingest_csv(&args.csv, &cfg)
        .with_context(|| format!("ingesting {}", args.csv.display()))?;
    let path = out.join("dataset.json");
    dataset.save_json(&path)?;
    println!(
        "wrote {} ({} trials: {} train / {} val / {} test, t_len {})",
        path.display(),
        dataset.trials.len(),
        dataset.train_idx.len(),
        dataset.val_idx.len(),
        dataset.test_idx.len(),
        dataset.t_len(),
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    let outcome = train(&cfg)?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    if let Some(last) = outcome.rows.last() {
        println!(
            "epoch {}: train {:.4}, val {:.4}",
            last.epoch, last.train_obj, last.val_obj
        );
    }
    println!(
        "wrote {} and {}",
        outcome.out_dir.join("training_log.csv").display(),
        outcome.final_checkpoint.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let (model, store) = ckpt.instantiate()?;
    let dataset = Dataset::load_json(&args.data)
        .with_context(|| format!("loading dataset {}", args.data.display()))?;
    let trials = split_trials(&dataset, &args.split)?;
    if trials.is_empty() {
        bail!("split `{}` is empty", args.split);
    }
    if args.kmax == 0 || args.kmax >= dataset.t_len() {
        bail!(
            "kmax must be in 1..{} for this dataset, got {}",
            dataset.t_len(),
            args.kmax
        );
    }
    let out = out_dir_for(&args.out, &args.checkpoint)?;
    let mode: LatentMode = args.mode.into();

    let mut predictions = Vec::with_capacity(trials.len());
    let mut latents: Vec<(usize, Vec<f64>)> = Vec::with_capacity(trials.len());
    for (pos, trial) in trials.iter().enumerate() {
        let mut rng = derive_rng(args.seed, &[stream::EVAL, 0, pos as u64]);
        let mut source = LiveSource::new(&mut rng);
        predictions.push(k_step_predict(
            &model,
            &store,
            trial,
            args.kmax,
            mode,
            args.particles,
            args.subparticles,
            &mut source,
        )?);
        let mut rng = derive_rng(args.seed, &[stream::EVAL, 1, pos as u64]);
        let mut source = LiveSource::new(&mut rng);
        latents.push((
            pos,
            latent_means(
                &model,
                &store,
                trial,
                mode,
                args.particles,
                args.subparticles,
                &mut source,
            )?,
        ));
    }
    let report = r_squared(&predictions, &trials, args.kmax)?;

    write_rollout_csv(&out.join("rollout.csv"), &report)?;
    write_rollout_trials_csv(&out.join("rollout_trials.csv"), &report)?;
    write_latents_csv(&out.join("latents.csv"), model.d_z(), &latents)?;
    std::fs::write(
        out.join("rollout_report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    let r2_summary: Vec<String> = report
        .r2
        .iter()
        .map(|r| match r {
            Some(v) => format!("{v:.4}"),
            None => "undef".to_string(),
        })
        .collect();
    println!(
        "scored {} {} trials at k=1..{}: R^2 [{}]",
        trials.len(),
        args.split,
        args.kmax,
        r2_summary.join(", ")
    );
    println!("wrote rollout.csv, rollout_trials.csv, latents.csv, rollout_report.json in {}", out.display());
    Ok(())
}

fn cmd_snr(args: SnrArgs) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let (model, store) = ckpt.instantiate()?;
    let dataset = Dataset::load_json(&args.data)
        .with_context(|| format!("loading dataset {}", args.data.display()))?;
    let k_grid = parse_k_grid(&args.kgrid)?;
    let kinds = parse_estimator_list(&args.estimators)?;
    let trials: Vec<Trajectory> = match args.trial {
        Some(idx) => {
            let Some(t) = dataset.trials.get(idx) else {
                bail!(
                    "trial index {idx} out of range (dataset has {})",
                    dataset.trials.len()
                );
            };
            vec![t.clone()]
        }
        None => split_trials(&dataset, "train")?.into_iter().cloned().collect(),
    };
    if trials.is_empty() {
        bail!("no trials to condition on");
    }
    let out = out_dir_for(&args.out, &args.checkpoint)?;
    let report = measure_snr(&model, &store, &trials, &k_grid, &kinds, args.n, args.seed)?;
    write_snr_csv(&out.join("snr.csv"), &report)?;
    write_slopes_json(&out.join("slopes.json"), &report)?;
    for s in &report.slopes {
        println!(
            "{} / {}: slope {:.3} over {} particle counts",
            s.kind, s.group, s.slope, s.n_points
        );
    }
    println!("wrote snr.csv and slopes.json in {}", out.display());
    Ok(())
}

fn out_dir_for(explicit: &Option<PathBuf>, checkpoint: &Path) -> anyhow::Result<PathBuf> {
    let dir = match explicit {
        Some(d) => resolve_out_dir(d),
        None => checkpoint
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(".")),
    };
    std::fs::create_dir_all(&dir)
        .with_context(|| format!("creating output directory {}", dir.display()))?;
    Ok(dir)
}
