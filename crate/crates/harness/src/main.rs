use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use tipool_harness::canonical::cmd_canonical;
use tipool_harness::dataset;
use tipool_harness::gradcheck::{cmd_grad_check, GradCheckOptions, Scale};
use tipool_harness::sweep::{cmd_sweep_phi, to_csv, trend, BatchRule};
use tipool_harness::train::{cmd_train, evaluate, network_from_checkpoint};
use tipool_harness::{Checkpoint, HarnessError, Result, TrainConfig};

#[derive(Parser)]
#[command(name = "tipool", version, about = "Transformation-invariant pooling CNNs")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Zero wall-clock columns so identical runs give identical files.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Output directory (overrides the config's out_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Base directory for relative data paths.
    #[arg(long, global = true, default_value = ".")]
    data: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum BatchRuleArg {
    /// Same batch size for every count.
    Fixed,
    /// Batch size inversely proportional to |Phi|: equal optimizer steps.
    MatchedSteps,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Mini,
    Full,
}

#[derive(Subcommand)]
enum Command {
    /// Materialize the configured train/test subsets as IDX files.
    GenData,
    /// Train and write metrics.csv plus checkpoints.
    Train {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Classification error of a checkpoint on the configured data.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Compare analytic gradients with finite differences.
    GradCheck {
        #[arg(long, value_enum, default_value = "mini")]
        scale: ScaleArg,
        /// Negate the convolution gradients (the check must then fail).
        #[arg(long)]
        corrupt_conv: bool,
    },
    /// Test error versus the number of pooled rotations.
    SweepPhi {
        #[arg(long, value_delimiter = ',', default_value = "1,4,8,16,24")]
        counts: Vec<usize>,
        /// Seeds to run; the CSV holds per-count medians.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, value_enum, default_value = "matched-steps")]
        batch_rule: BatchRuleArg,
    },
    /// Export canonical instances as PGM images plus a CSV.
    Canonical {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
        images: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        features: Vec<usize>,
    },
}

fn config(cli: &Cli) -> Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.deterministic |= cli.deterministic;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = config(&cli)?;
    match cli.command {
        Command::GenData => {
            for path in dataset::gen_data(&cfg.data, &cli.data, &cfg.out_dir)? {
                println!("wrote {}", path.display());
            }
        }
        Command::Train { resume } => {
            let s = cmd_train(cfg, &cli.data, resume.as_deref())?;
            println!(
                "epochs = {}\npresentations = {}\nfinal_test_err_pct = {:.4}\nbest_test_err_pct = {:.4}",
                s.epochs, s.presentations, s.final_test_err_pct, s.best_test_err_pct
            );
        }
        Command::Eval { checkpoint, split } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let data = dataset::load(&cfg.data, &cli.data)?;
            let set = match split {
                SplitArg::Train => &data.train,
                SplitArg::Test => &data.test,
            };
            let mut net = network_from_checkpoint(&ck)?;
            println!("error_pct = {:.4}", evaluate(&mut net, ck.header.regime, set)?);
        }
        Command::GradCheck { scale, corrupt_conv } => {
            let scale = match scale {
                ScaleArg::Mini => Scale::Mini,
                ScaleArg::Full => Scale::Full,
            };
            let report = cmd_grad_check(&GradCheckOptions { scale, seed: cfg.seed, corrupt_conv })?;
            println!("{report}");
            if !report.passed() {
                return Err(HarnessError::Check("gradients disagree with finite differences".into()));
            }
        }
        Command::SweepPhi { counts, seeds, batch_rule } => {
            let rule = match batch_rule {
                BatchRuleArg::Fixed => BatchRule::Fixed,
                BatchRuleArg::MatchedSteps => BatchRule::MatchedSteps,
            };
            let rows = cmd_sweep_phi(&cfg, &cli.data, &counts, &seeds, rule)?;
            print!("{}", to_csv(&rows));
            if rows.len() > 1 {
                println!("spearman = {:.4}", trend(&rows));
            }
        }
        Command::Canonical { checkpoint, images, features } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let data = dataset::load(&cfg.data, &cli.data)?;
            let rows = cmd_canonical(&ck, &data.test, &images, &features, &cfg.out_dir)?;
            println!("wrote {} canonical instances to {}", rows.len(), cfg.out_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
