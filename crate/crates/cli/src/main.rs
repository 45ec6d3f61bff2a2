use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ropetp_cli::{commands, CliError, CliResult, RunConfig};

#[derive(Parser)]
#[command(name = "ropetp", version, about = "Desk-scale body regression and trajectory diffusion experiments")]
struct Args {
    /// Run configuration, TOML or JSON.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate motion and scene datasets.
    GenData,
    /// Train the trajectory denoiser.
    TrainTraj {
        #[arg(long)]
        resume: bool,
    },
    /// Train the part-attention regressor.
    TrainRope {
        #[arg(long)]
        resume: bool,
    },
    /// Predict on the held-out sets with every trained model.
    Sample,
    /// Score predictions.
    Eval,
    /// Occlusion sensitivity map of the regressor.
    Occmap,
    /// Finite-difference check of every differentiable op.
    Gradcheck,
}

fn config(args: &Args) -> CliResult<RunConfig> {
    let mut cfg = match (&args.config, args.seed) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(seed)) => RunConfig::with_seed(seed),
        (None, None) => return Err(CliError::Usage("either --config or --seed is required".into())),
    };
    if let Some(seed) = args.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn run(args: Args) -> CliResult<()> {
    if let Command::Gradcheck = args.command {
        let out = args.out.clone().unwrap_or_else(|| PathBuf::from("."));
        return commands::gradcheck(&out, args.seed.unwrap_or(0), &mut std::io::stdout());
    }
    let cfg = config(&args)?;
    match args.command {
        Command::GenData => commands::gen_data(&cfg),
        Command::TrainTraj { resume } => commands::train_traj(&cfg, resume),
        Command::TrainRope { resume } => commands::train_rope(&cfg, resume),
        Command::Sample => commands::sample(&cfg),
        Command::Eval => commands::eval(&cfg).map(|r| print!("{}", r.to_csv())),
        Command::Occmap => commands::occmap(&cfg),
        Command::Gradcheck => unreachable!(),
    }
}

fn main() -> ExitCode {
    ropetp_cli::tune_allocator();
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
