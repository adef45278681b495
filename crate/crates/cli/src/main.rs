//! `eqtaa` command line: corpus synthesis, model training and evaluation.
//!
//! Exit codes: 0 success, 2 usage or input error, 3 numerical failure.
//! `EQTAA_THREADS` sets the worker thread count (overrides `run.threads`).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use eqtaa_core::config::RunConfig;
use eqtaa_core::pipeline::{self, TaaVariant, TripleSplit};
use eqtaa_core::Error;

#[derive(Parser, Debug)]
#[command(name = "eqtaa", version, about = "Synthetic accident clips, diffusion rewriting and accident anticipation")]
struct Cli {
    /// Config file of `section.key=value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed every stage derives its seed from.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Starting defaults before the config file is applied.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Paper)]
    preset: Preset,
    /// Extra `section.key=value` override; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    /// Stated hyperparameters (8000 diffusion steps, 1800 triples).
    Paper,
    /// One-hour single-core budget.
    Toy,
}

#[derive(Args, Debug, Clone, Copy)]
struct VariantArgs {
    /// Drop the equivariant triple loss (lambda = 0).
    #[arg(long)]
    no_etl: bool,
    /// Disable adaptive token sampling.
    #[arg(long)]
    no_adptoks: bool,
}

impl From<VariantArgs> for TaaVariant {
    fn from(v: VariantArgs) -> Self {
        TaaVariant {
            no_etl: v.no_etl,
            no_adptoks: v.no_adptoks,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic corpus and its manifest.
    Synth {
        /// Total clip count, keeping the role mix.
        #[arg(long)]
        count: Option<usize>,
        /// Rebuild the corpus from this manifest instead of planning one.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train the latent codec.
    TrainCodec,
    /// Train the diffusion model.
    TrainAvd {
        #[arg(long)]
        steps: Option<usize>,
        /// Continue from the existing checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Generate triple sets from anchor clips.
    GenTriples {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        heldout: Option<usize>,
    },
    /// Train the anticipation encoder on the triple sets.
    TrainTaa {
        #[command(flatten)]
        variant: VariantArgs,
    },
    /// Score the labelled evaluation clips and write the report.
    Evaluate {
        #[command(flatten)]
        variant: VariantArgs,
    },
}

fn load_config(cli: &Cli) -> eqtaa_core::Result<RunConfig> {
    let mut cfg = match cli.preset {
        Preset::Paper => RunConfig::default(),
        Preset::Toy => RunConfig::toy(),
    };
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidInput(format!("cannot read {}: {e}", path.display())))?;
        cfg = cfg.with_text(&text)?;
    }
    let pairs = cli
        .overrides
        .iter()
        .map(|s| {
            s.split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("expected KEY=VALUE, got `{s}`")))
        })
        .collect::<eqtaa_core::Result<Vec<_>>>()?;
    cfg = cfg.with_pairs(pairs)?;
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.run.out = out.clone();
    }
    Ok(cfg)
}

fn set_threads(cfg: &RunConfig) {
    let threads = std::env::var("EQTAA_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .or(cfg.run.threads);
    if let Some(n) = threads.filter(|n| *n > 0) {
        // read by the tensor backend when its pool starts
        std::env::set_var("RAYON_NUM_THREADS", n.to_string());
    }
}

fn print_json(v: serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(&v).unwrap_or_default());
}

fn run(cli: Cli) -> eqtaa_core::Result<()> {
    let mut cfg = load_config(&cli)?;
    set_threads(&cfg);
    std::fs::create_dir_all(&cfg.run.out)
        .map_err(|e| Error::InvalidInput(format!("cannot create {}: {e}", cfg.run.out.display())))?;
    match cli.command {
        Command::Synth { count, manifest } => {
            let clips = match manifest {
                Some(m) => pipeline::regenerate_corpus(&m, &pipeline::Layout::new(&cfg.run.out).corpus())?,
                None => pipeline::cmd_synth(&cfg, count)?.clips,
            };
            print_json(serde_json::json!({ "clips": clips }));
        }
        Command::TrainCodec => {
            let r = pipeline::cmd_train_codec(&cfg)?;
            print_json(serde_json::json!({ "heldout_mse": r.heldout_mse, "heldout_psnr": r.heldout_psnr }));
        }
        Command::TrainAvd { steps, resume } => {
            if let Some(s) = steps {
                cfg.avd.steps = s;
            }
            let logs = pipeline::cmd_train_avd(&cfg, resume)?;
            print_json(serde_json::json!({ "steps_run": logs.len(), "last_loss": logs.last().map(|l| l.loss) }));
        }
        Command::GenTriples { count, heldout } => {
            let train = pipeline::cmd_gen_triples(&cfg, TripleSplit::Train, count.unwrap_or(cfg.triples.count))?;
            let held = pipeline::cmd_gen_triples(&cfg, TripleSplit::Heldout, heldout.unwrap_or(cfg.triples.heldout))?;
            print_json(serde_json::json!({ "triples": train.len(), "heldout": held.len() }));
        }
        Command::TrainTaa { variant } => {
            let logs = pipeline::cmd_train_taa(&cfg, variant.into())?;
            print_json(serde_json::json!({ "steps": logs.len(), "last_total": logs.last().map(|l| l.total) }));
        }
        Command::Evaluate { variant } => {
            let report = pipeline::cmd_evaluate(&cfg, variant.into())?;
            print_json(serde_json::to_value(&report)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 3 })
        }
    }
}
