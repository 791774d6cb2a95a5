//! `emar`: run, sweep and validate repair experiments from a config file.
//!
//! Exit codes: 0 on success, 1 when the config cannot be read or is invalid,
//! 2 when the experiment itself fails or its output cannot be written.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use emar_core::config::{parse_config, RunManifest, KNOWN_KEYS};
use emar_core::rng::splitmix64;
use emar_core::{run_experiment, ExperimentConfig};

#[derive(Parser)]
#[command(name = "emar", version, about = "Corruption-aware repair for hierarchical federated learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its CSVs and manifest.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; falls back to the config's `output_dir`.
        #[arg(long, env = "EMAR_OUT_DIR")]
        out: Option<PathBuf>,
    },
    /// Run one experiment per value of a parameter, each in its own
    /// subdirectory with a seed derived from the master seed and the value.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// `corruption_rate`, `packet_loss`, `delta_val`, `rank`, or any
        /// dotted config key.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Master seed; overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, env = "EMAR_OUT_DIR")]
        out: Option<PathBuf>,
    },
    /// Parse and validate a config file, then exit.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
}

enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            let (Failure::Config(e) | Failure::Runtime(e)) = &failure;
            eprintln!("error: {e:#}");
            ExitCode::from(failure.code())
        }
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run { config, seed, out } => {
            let text = read_config(&config)?;
            let mut cfg = parse_config(&text)
                .with_context(|| format!("in {}", config.display()))
                .map_err(Failure::Config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let dir = output_dir(out, &cfg)?;
            run_one(&cfg, &dir)
        }
        Command::Sweep {
            config,
            param,
            values,
            seed,
            out,
        } => {
            let text = read_config(&config)?;
            let base = parse_config(&text)
                .with_context(|| format!("in {}", config.display()))
                .map_err(Failure::Config)?;
            let master = seed.unwrap_or(base.seed);
            let root = output_dir(out, &base)?;
            let key = sweep_key(&param).map_err(Failure::Config)?;
            // Parse every point before running any, so a bad value fails fast.
            let points = values
                .iter()
                .map(|value| {
                    let mut cfg = parse_config(&override_key(&text, key, value))
                        .with_context(|| format!("sweep value `{value}`"))
                        .map_err(Failure::Config)?;
                    cfg.seed = derive_sweep_seed(master, value);
                    Ok((value, cfg))
                })
                .collect::<Result<Vec<_>, Failure>>()?;
            for (value, cfg) in &points {
                let dir = root.join(format!("{param}={value}"));
                run_one(cfg, &dir)?;
            }
            Ok(())
        }
        Command::ValidateConfig { config } => {
            let text = read_config(&config)?;
            parse_config(&text)
                .with_context(|| format!("in {}", config.display()))
                .map_err(Failure::Config)?;
            Ok(())
        }
    }
}

fn read_config(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))
        .map_err(Failure::Config)
}

fn output_dir(flag: Option<PathBuf>, cfg: &ExperimentConfig) -> Result<PathBuf, Failure> {
    flag.or_else(|| cfg.output_dir.clone()).ok_or_else(|| {
        Failure::Config(anyhow!(
            "no output directory: pass --out, set EMAR_OUT_DIR, or set output_dir in the config"
        ))
    })
}

fn run_one(cfg: &ExperimentConfig, dir: &Path) -> Result<(), Failure> {
    let manifest = RunManifest::new(cfg);
    let result = run_experiment(cfg)
        .with_context(|| format!("experiment with seed {}", cfg.seed))
        .map_err(Failure::Runtime)?;
    result
        .write_outputs(dir, &manifest)
        .map_err(|e| Failure::Runtime(e.into()))?;
    if let Some(s) = result.summary() {
        println!(
            "{}: {} rounds, final loss {:.6}, final accuracy {:.4}",
            dir.display(),
            s.rounds,
            s.final_loss,
            s.final_accuracy
        );
    } else {
        println!("{}: no rounds", dir.display());
    }
    Ok(())
}

fn sweep_key(param: &str) -> anyhow::Result<&str> {
    let key = match param {
        "corruption_rate" => "corruption.rate",
        "packet_loss" => "topology.packet_loss",
        "delta_val" => "repair.delta_val",
        "rank" => "repair.rank",
        other => other,
    };
    if key == "seed" || !KNOWN_KEYS.contains(&key) {
        return Err(anyhow!("cannot sweep `{param}`: not a config key"));
    }
    Ok(key)
}

/// The config text with every line for `key` replaced by `key = value`.
fn override_key(text: &str, key: &str, value: &str) -> String {
    let mut out: String = text
        .lines()
        .filter(|line| {
            let body = line.split('#').next().unwrap_or("");
            body.split_once('=').map(|(k, _)| k.trim()) != Some(key)
        })
        .flat_map(|line| [line, "\n"])
        .collect();
    out.push_str(&format!("{key} = {value}\n"));
    out
}

/// `master XOR hash(value)`, hashing the value's text so `0.1` and `0.10`
/// stay distinct points with distinct seeds.
fn derive_sweep_seed(master: u64, value: &str) -> u64 {
    let h = value
        .bytes()
        .fold(splitmix64(value.len() as u64), |h, b| splitmix64(h ^ b as u64));
    master ^ h
}
