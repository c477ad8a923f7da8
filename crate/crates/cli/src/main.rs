use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fabricnet::config::ScenarioConfig;
use fabricnet::output::write_text;
use fabricnet::runner::{self, seed_list, Command, RunOptions};
use fabricnet::Error;

const EXIT_VALIDATION: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "fabricnet", version, about = "Factory/network co-simulation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Check a scenario file and report every problem found.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run an experiment pipeline and write its outputs and manifest.
    Run {
        #[arg(value_enum)]
        experiment: Experiment,
        #[arg(long)]
        config: PathBuf,
        /// First seed; the scenario's master_seed when omitted.
        #[arg(long)]
        seed: Option<u64>,
        /// Number of consecutive seeds.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Comma-separated variants (offload policies, slicing variants,
        /// positioning methods).
        #[arg(long, value_delimiter = ',')]
        policies: Vec<String>,
        /// Training episodes for slicing.
        #[arg(long)]
        episodes: Option<usize>,
        /// Worker threads; all cores when 0.
        #[arg(long, default_value_t = 0)]
        threads: usize,
    },
    /// Summarize metrics files by group: mean and population std.
    Compare {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "policy")]
        group_by: Vec<String>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Experiment {
    Offload,
    Slicing,
    Locate,
    Monitor,
}

impl From<Experiment> for Command {
    fn from(e: Experiment) -> Self {
        match e {
            Experiment::Offload => Command::Offload,
            Experiment::Slicing => Command::Slicing,
            Experiment::Locate => Command::Locate,
            Experiment::Monitor => Command::Monitor,
        }
    }
}

fn out_dir(flag: PathBuf) -> PathBuf {
    match std::env::var_os("FABRICNET_OUT") {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => flag,
    }
}

/// Reads, parses and validates; any failure is a validation failure.
fn load(path: &Path) -> Result<(ScenarioConfig, String), ExitCode> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        eprintln!("error: {}", Error::io(path, e));
        ExitCode::from(EXIT_VALIDATION)
    })?;
    let cfg = ScenarioConfig::parse(&text).map_err(|e| {
        eprintln!("error: {}: {e}", path.display());
        ExitCode::from(EXIT_VALIDATION)
    })?;
    let diags = cfg.validate();
    if !diags.is_empty() {
        for d in &diags {
            eprintln!("{}: {d}", path.display());
        }
        return Err(ExitCode::from(EXIT_VALIDATION));
    }
    Ok((cfg, text))
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Cmd::Validate { config } => match load(&config) {
            Ok(_) => {
                println!("{}: ok", config.display());
                ExitCode::SUCCESS
            }
            Err(code) => code,
        },
        Cmd::Run {
            experiment,
            config,
            seed,
            seeds,
            out,
            policies,
            episodes,
            threads,
        } => {
            let (cfg, text) = match load(&config) {
                Ok(v) => v,
                Err(code) => return code,
            };
            let opts = RunOptions {
                seeds: seed_list(seed.unwrap_or(cfg.master_seed), seeds),
                policies,
                episodes,
                threads,
            };
            let dir = out_dir(out);
            match runner::run(&cfg, &text, experiment.into(), &opts, &dir) {
                Ok(m) => {
                    for f in &m.files {
                        println!("{}", dir.join(&f.name).display());
                    }
                    println!("{}", dir.join(runner::MANIFEST_FILE).display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(EXIT_RUNTIME)
                }
            }
        }
        Cmd::Compare { files, group_by, out } => {
            let texts = match files
                .iter()
                .map(|f| std::fs::read_to_string(f).map_err(|e| Error::io(f, e)))
                .collect::<Result<Vec<_>, _>>()
            {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(EXIT_VALIDATION);
                }
            };
            let cmp = match runner::compare(&texts, &group_by) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(EXIT_VALIDATION);
                }
            };
            print!("{}", cmp.render());
            let path = out_dir(out).join("compare.json");
            if let Err(e) = write_text(&path, &cmp.to_json()) {
                eprintln!("error: {e}");
                return ExitCode::from(EXIT_RUNTIME);
            }
            ExitCode::SUCCESS
        }
    }
}
