use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hydrolimit::config::Config;
use hydrolimit::harness::{self, Outcome};

#[derive(Parser, Debug)]
#[command(name = "hydrolimit", version, about = "Kinetic-to-NSF hydrodynamic limit toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Flat TOML config; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (overrides `output_dir` from the config).
    #[arg(long, global = true)]
    output: Option<PathBuf>,

    /// Worker threads for the rayon pool.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// ν, κ (direct and dual), spectral gap and frequency bounds of the kernel.
    TransportCoeffs,
    /// Low spectrum of L with kernel, symmetry and QKerL checks.
    Spectrum,
    /// Kinetic run with a diagnostics time series and a final snapshot.
    Simulate,
    /// NSF reference run with its energy law.
    Nsf,
    /// Functionals of a stored snapshot.
    Diagnose,
    /// ε-sweep against the NSF reference.
    Sweep,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::TransportCoeffs => "transport-coeffs",
            Command::Spectrum => "spectrum",
            Command::Simulate => "simulate",
            Command::Nsf => "nsf",
            Command::Diagnose => "diagnose",
            Command::Sweep => "sweep",
        }
    }
}

fn run(cli: &Cli) -> hydrolimit::Result<Outcome> {
    let config = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let out = cli
        .output
        .clone()
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(cli.command.name()));
    match cli.command {
        Command::TransportCoeffs => harness::cmd_transport_coeffs(&config, &out),
        Command::Spectrum => harness::cmd_spectrum(&config, &out),
        Command::Simulate => harness::cmd_simulate(&config, &out),
        Command::Nsf => harness::cmd_nsf(&config, &out),
        Command::Diagnose => harness::cmd_diagnose(&config, &out),
        Command::Sweep => harness::cmd_sweep(&config, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(outcome) => {
            for c in &outcome.checks {
                println!(
                    "{} {} = {:e} ({})",
                    if c.pass { "PASS" } else { "FAIL" },
                    c.name,
                    c.value,
                    c.bound
                );
            }
            for f in &outcome.files {
                println!("wrote {}", f.display());
            }
            if outcome.pass() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
