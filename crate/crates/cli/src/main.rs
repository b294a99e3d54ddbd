//! `camforge` command-line driver.
//!
//! Every verb reads an optional `key = value` config file (`--config`) and
//! then any number of `--key value` overrides.
//!
//! Exit codes: 0 ok, 1 usage/config/data error, 2 non-finite loss during
//! training, 3 gradient verification failure.

mod commands;
mod overrides;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use camforge::runconfig::RunConfig;

const THREADS_ENV: &str = "CAMFORGE_THREADS";

#[derive(Parser)]
#[command(name = "camforge", version, about = "Attention-refined CAM seeds on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset into `data_dir`.
    GenData(Common),
    /// Train a model on `data_dir`; writes `checkpoint`, `out_dir/loss.csv` and `out_dir/epochs.csv`.
    Train(Common),
    /// Write seed masks and `metrics.json` for every image in `data_dir`.
    Seed(Common),
    /// mIoU at every value of `thresholds`; writes `sweep.csv` and `sweep.pgm`.
    Sweep(Common),
    /// Score the masks in `out_dir/masks` against the ground truth.
    Eval(Common),
    /// Train and seed with noise off, k = 1 and k = 2 from one init.
    Ablate(Common),
    /// Finite-difference check of the loss gradients.
    Gradcheck(GradcheckArgs),
    /// Write attention maps of image `sample_index` as snapshots and heatmaps.
    DumpAttn(Common),
}

#[derive(Args)]
struct Common {
    /// Run config file (`key = value` lines).
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Config overrides, e.g. `--noise off --epochs 5`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Seed for the random inputs and the model init.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Route logits through an op with a wrong backward rule.
    #[arg(long, hide = true)]
    corrupt_backward: bool,
}

impl Common {
    fn load(&self) -> anyhow::Result<RunConfig> {
        let text = match &self.config {
            Some(path) => std::fs::read_to_string(path)
                .map_err(|e| camforge::Error::Config(format!("{}: {e}", path.display())))?,
            None => String::new(),
        };
        let pairs = overrides::parse(&self.overrides)?;
        Ok(RunConfig::parse(&text, &pairs)?)
    }
}

fn init_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| camforge::Error::Config(format!("{THREADS_ENV}={raw:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    match cli.command {
        Command::GenData(c) => commands::gen_data(&c.load()?),
        Command::Train(c) => commands::train(&c.load()?),
        Command::Seed(c) => commands::seed(&c.load()?),
        Command::Sweep(c) => commands::sweep(&c.load()?),
        Command::Eval(c) => commands::eval(&c.load()?),
        Command::Ablate(c) => commands::ablate(&c.load()?),
        Command::Gradcheck(a) => commands::gradcheck(a.seed, a.corrupt_backward),
        Command::DumpAttn(c) => commands::dump_attn(&c.load()?),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<commands::VerificationFailed>().is_some() {
        return 3;
    }
    match err.downcast_ref::<camforge::Error>() {
        Some(camforge::Error::NonFinite { .. }) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
