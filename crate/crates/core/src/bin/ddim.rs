use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ddim_core::harness::config::{Overrides, RunConfig};
use ddim_core::harness::experiments::{Experiment, Report};
use ddim_core::harness::verify;
use ddim_core::{Error, SubsequenceMode};

#[derive(Parser)]
#[command(name = "ddim", version, about = "Generalized diffusion sampling experiments on toy data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of sampling steps S
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, conflicts_with = "sigma_hat")]
    eta: Option<f64>,
    /// Use the larger sigma-hat noise scale
    #[arg(long)]
    sigma_hat: bool,
    #[arg(long)]
    mode: Option<SubsequenceMode>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    plot: Option<Switch>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate samples from fresh latents
    Sample(Common),
    /// Encode data to latents and report the round-trip error
    Encode(Common),
    /// Per-dimension reconstruction error over several step counts
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = [10, 50, 100, 500])]
        s_values: Vec<usize>,
    },
    /// Decode an 11x11 slerp grid of latents
    Interpolate(Common),
    /// Wall-clock sampling time against S
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = [10, 20, 50, 100])]
        s_values: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Run the named property checks; exits nonzero if any fails
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Restrict to these checks
        #[arg(long = "check")]
        checks: Vec<String>,
        /// List check names and exit
        #[arg(long)]
        list: bool,
    },
}

fn load(c: &Common) -> Result<Experiment, Error> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: c.seed,
        steps: c.steps,
        eta: c.eta,
        sigma_hat: c.sigma_hat,
        mode: c.mode,
        out: c.out.clone(),
        chains: c.chains,
        plot: c.plot.map(|s| matches!(s, Switch::On)),
    });
    Experiment::new(cfg)
}

fn print_report(r: &Report) {
    for row in &r.rows {
        println!("{},{},{},{},{:e},{:.6}", row.experiment, row.s, row.policy, row.metric, row.value, row.seconds);
    }
    for f in &r.files {
        eprintln!("wrote {}", f.display());
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Sample(c) => print_report(&load(&c)?.sample()?),
        Command::Encode(c) => print_report(&load(&c)?.encode()?),
        Command::Reconstruct { common, s_values } => print_report(&load(&common)?.reconstruct(&s_values)?),
        Command::Interpolate(c) => print_report(&load(&c)?.interpolate()?),
        Command::Bench { common, s_values, repeats } => {
            let (report, fit) = load(&common)?.bench(&s_values, repeats)?;
            print_report(&report);
            eprintln!("slope {:e} s/step, R2 {:.5}", fit.slope, fit.r_squared);
        }
        Command::Verify { seed, checks, list } => {
            if list {
                for (name, _) in verify::CHECKS {
                    println!("{name}");
                }
                return Ok(ExitCode::SUCCESS);
            }
            if let Some(bad) = checks.iter().find(|c| !verify::CHECKS.iter().any(|(n, _)| n == c)) {
                return Err(Error::Config { field: "--check".into(), message: format!("unknown check {bad}") });
            }
            let outcomes = verify::run_all(seed, &checks);
            for o in &outcomes {
                println!("{}", serde_json::to_string(o).expect("outcome serialises"));
            }
            let failed = outcomes.iter().filter(|o| !o.passed).count();
            println!(
                "{}",
                serde_json::json!({ "summary": { "checks": outcomes.len(), "failed": failed, "passed": failed == 0 } })
            );
            return Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE });
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
