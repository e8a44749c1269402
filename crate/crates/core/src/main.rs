use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use powerloc::harness::{default_output, preset, presets, run_to, ExperimentConfig, Status};

/// Seeded experiments for multi-scale analysis with power-law hopping.
///
/// The worker count is read from POWERLOC_WORKERS (default: all cores).
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a TOML config, or a preset as `preset:<name>`.
    Run {
        config: String,
        /// Output directory (overrides the config).
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// List the shipped presets.
    ListPresets,
    /// Print a preset as TOML.
    ShowPreset { name: String },
    /// Parse and check a config without running it.
    Validate { config: String },
}

fn load(arg: &str) -> powerloc::Result<ExperimentConfig> {
    match arg.strip_prefix("preset:") {
        Some(name) => preset(name).ok_or_else(|| powerloc::Error::Config(format!("unknown preset {name:?}"))),
        None => ExperimentConfig::load(arg.as_ref()),
    }
}

fn fail(e: powerloc::Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(Status::of_error(&e) as u8)
}

fn init_workers() -> Result<(), String> {
    let Ok(v) = std::env::var("POWERLOC_WORKERS") else { return Ok(()) };
    let n: usize = v.parse().map_err(|_| format!("POWERLOC_WORKERS must be a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_workers() {
        eprintln!("error: {e}");
        return ExitCode::from(Status::ConfigError as u8);
    }
    match cli.command {
        Command::ListPresets => {
            for (name, desc, _) in presets() {
                println!("{name:<20} {desc}");
            }
            ExitCode::SUCCESS
        }
        Command::ShowPreset { name } => match preset(&name) {
            Some(c) => {
                print!("{}", c.to_toml());
                ExitCode::SUCCESS
            }
            None => fail(powerloc::Error::Config(format!("unknown preset {name:?}"))),
        },
        Command::Validate { config } => match load(&config).and_then(|c| c.validate()) {
            Ok(()) => {
                println!("ok");
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
        Command::Run { config, output } => {
            let cfg = match load(&config) {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            let dir = output.or_else(|| cfg.output.clone()).unwrap_or_else(|| default_output(&cfg));
            match run_to(&cfg, &dir) {
                Ok(out) => {
                    for line in &out.summary {
                        println!("{line}");
                    }
                    println!("{} -> {}", if out.passed { "pass" } else { "FAIL" }, dir.display());
                    if out.passed {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(Status::AssertionFailed as u8)
                    }
                }
                Err(e) => fail(e),
            }
        }
    }
}
