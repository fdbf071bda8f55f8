use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hvae_cli::commands::{self, PlanRecord};
use hvae_cli::config::{AllocationSpec, DataRef, EvalSpec, Orientation, RunConfig, SweepConfig};
use hvae_cli::report::{csv_string, write_json, write_report_csv};
use hvae_cli::CliError;
use hvae_core::datasets::DATA_ROOT_ENV;
use hvae_core::Exec;

#[derive(Parser)]
#[command(name = "hvae-ood", version, about = "Latent allocation, training and OOD evaluation for hierarchical VAEs")]
#[command(after_help = "Named datasets (data:<name>:<split>) resolve under $HVAE_DATA_ROOT.")]
struct Cli {
    /// Disable data-parallel execution.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the layer dims for a budget, depth and ratio, or a control plan.
    Allocate(AllocateArgs),
    /// Train a model from a TOML run config.
    Train(TrainArgs),
    /// Score ID and OOD data with a checkpoint and emit metric rows.
    Eval(EvalArgs),
    /// Train and evaluate a grid of allocations and aggregate a heatmap.
    Sweep(SweepArgs),
    /// Estimate the mutual information between the input and one latent layer.
    Mi(MiArgs),
    /// Reconstruct inputs keeping only the bottom k posterior latents.
    Recon(ReconArgs),
}

#[derive(Args)]
struct AllocateArgs {
    #[arg(long, requires_all = ["depth", "ratio"], conflicts_with = "control")]
    budget: Option<usize>,
    #[arg(long, requires = "budget")]
    depth: Option<usize>,
    #[arg(long, requires = "budget")]
    ratio: Option<f64>,
    /// Named control plan, e.g. `grayscale:Stable`.
    #[arg(long, required_unless_present = "budget")]
    control: Option<String>,
    /// Write the plan record as JSON here.
    #[arg(long)]
    record: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// JSON-lines training log; stdout when absent.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Continue from an existing checkpoint at `--out`.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// ID data: an IDX path, `data:<name>:<split>` or `synth:<gen>:<n>:<HxWxC>:<seed>`.
    #[arg(long)]
    id: String,
    /// OOD data, repeatable.
    #[arg(long, required = true)]
    ood: Vec<String>,
    /// Take eval settings from a run config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    /// Importance samples per bound.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    eval_samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Treat larger LLR as in-distribution.
    #[arg(long)]
    high_is_id: bool,
    /// Configuration label for the report rows.
    #[arg(long)]
    label: Option<String>,
    /// Directory for report.csv and report.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Concurrent cells.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct MiArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: String,
    /// 1-based latent layer.
    #[arg(long)]
    layer: usize,
    /// Monte Carlo samples per input.
    #[arg(long, default_value_t = 16)]
    samples: usize,
    /// Inputs used.
    #[arg(long, default_value_t = 1000)]
    inputs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReconArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: String,
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 16)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// IDX output for the reconstructions.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable record"));
}

fn run(cli: Cli) -> Result<(), CliError> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    match cli.cmd {
        Cmd::Allocate(a) => {
            let spec = AllocationSpec { budget: a.budget, depth: a.depth, ratio: a.ratio, dims: None, control: a.control };
            let plan: PlanRecord = commands::allocate(&spec)?;
            let dims: Vec<String> = plan.dims.iter().map(usize::to_string).collect();
            println!("{}", dims.join(" "));
            if let Some(path) = a.record {
                write_json(&plan, &path)?;
            }
        }
        Cmd::Train(a) => {
            let cfg = RunConfig::load(&a.config)?;
            let ckpt = match a.log {
                Some(path) => {
                    let mut f = fs::File::create(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
                    commands::train(&cfg, &a.out, &mut f, a.resume)?
                }
                None => commands::train(&cfg, &a.out, &mut io::stdout().lock(), a.resume)?,
            };
            eprintln!("wrote {} (epoch {})", a.out.display(), ckpt.header.epoch);
        }
        Cmd::Eval(a) => {
            let mut eval = match &a.config {
                Some(p) => RunConfig::load(p)?.eval,
                None => EvalSpec::default(),
            };
            eval.k_llr = a.k.unwrap_or(eval.k_llr);
            eval.importance_samples = a.samples.unwrap_or(eval.importance_samples);
            eval.eval_samples = a.eval_samples.unwrap_or(eval.eval_samples);
            eval.seed = a.seed.unwrap_or(eval.seed);
            if a.high_is_id {
                eval.orientation = Orientation::HighIsId;
            }
            let id = DataRef::parse_arg(&a.id)?;
            let oods = a.ood.iter().map(|s| DataRef::parse_arg(s)).collect::<Result<Vec<_>, _>>()?;
            let outcome = commands::evaluate(&a.checkpoint, &eval, &id, &oods, a.label.as_deref(), exec)?;
            print!("{}", csv_string(&outcome.report.rows)?);
            if let Some(dir) = a.out {
                fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
                write_report_csv(&outcome.report.rows, &dir.join("report.csv"))?;
                write_json(&outcome.report, &dir.join("report.json"))?;
            }
        }
        Cmd::Sweep(a) => {
            let cfg = SweepConfig::load(&a.config)?;
            let heatmap = commands::sweep(&cfg, &a.out, a.jobs.max(1), exec);
            match heatmap {
                Ok(h) => {
                    print!("{}", h.to_csv());
                    if let Some(r) = h.r_star {
                        println!("r* = {r}");
                    }
                }
                Err(e) => {
                    if let CliError::SweepFailures { .. } = e {
                        eprintln!("partial heatmap written to {}", a.out.display());
                    }
                    return Err(e);
                }
            }
        }
        Cmd::Mi(a) => {
            let data = DataRef::parse_arg(&a.data)?;
            let rec = commands::mutual_information(&a.checkpoint, &data, a.layer, a.samples, a.inputs, a.seed, exec)?;
            print_json(&rec);
            if let Some(path) = a.out {
                write_json(&rec, &path)?;
            }
        }
        Cmd::Recon(a) => {
            let data = DataRef::parse_arg(&a.data)?;
            let rec = commands::reconstruct(&a.checkpoint, &data, a.k, a.n, a.seed, a.out.as_deref())?;
            print_json(&rec);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {
            let _ = io::stdout().flush();
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, CliError::Data(_)) && std::env::var_os(DATA_ROOT_ENV).is_none() {
                eprintln!("hint: named datasets resolve under ${DATA_ROOT_ENV}");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
