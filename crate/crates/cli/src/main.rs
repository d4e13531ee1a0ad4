use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use loadpat::pipeline::{self, PipelineConfig, PipelineError};
use loadpat::synthgen::{self, GeneratorConfig};

#[derive(Parser)]
#[command(name = "loadpat", version, about = "Household load-pattern analysis pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline. Any config key can also be set with `--key value`
    /// (dotted for nested keys, e.g. `--hyper.train.epochs 200`).
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Last stage to run: ingest, cluster, distribution, featsel, train, compare, report.
        #[arg(long)]
        stage: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Inclusive range, e.g. `2,10`.
        #[arg(long)]
        k_range: Option<String>,
        #[arg(long)]
        bins: Option<usize>,
        /// Grid as JSON: `{"hidden_layers":[3],"widths":[64],"learning_rates":[0.1]}`.
        #[arg(long)]
        grid: Option<String>,
        /// Print the resolved config and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Write a synthetic cohort (meter.csv, survey.csv, truth.json).
    Generate {
        #[arg(long)]
        out_dir: PathBuf,
        /// Generator config as JSON; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        households: Option<usize>,
        #[arg(long)]
        days: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Rebuild the report tables from an existing artifact directory.
    Report {
        #[arg(long)]
        out_dir: PathBuf,
    },
}

const RUN_FLAGS: [&str; 8] = [
    "--config",
    "--stage",
    "--seed",
    "--out-dir",
    "--k-range",
    "--bins",
    "--grid",
    "--print-config",
];

/// Pulls `--key value` pairs that clap does not know out of a `run` command line.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    if args.get(1).map(String::as_str) != Some("run") {
        return (args, Vec::new());
    }
    let mut known = Vec::new();
    let mut extra = Vec::new();
    let mut it = args.into_iter().peekable();
    while let Some(a) = it.next() {
        let name = a.split('=').next().unwrap_or(&a).to_string();
        let generic = a.starts_with("--") && !RUN_FLAGS.contains(&name.as_str()) && a != "--help";
        if !generic {
            known.push(a);
            continue;
        }
        match a.split_once('=') {
            Some((k, v)) => extra.push((k.to_string(), v.to_string())),
            None => {
                let v = it.next().unwrap_or_default();
                extra.push((a, v));
            }
        }
    }
    (known, extra)
}

fn config_error(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(1)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(1);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match cli.command {
        Command::Run {
            config,
            stage,
            seed,
            out_dir,
            k_range,
            bins,
            grid,
            print_config,
        } => {
            let mut cfg = match config {
                Some(p) => match PipelineConfig::load(&p) {
                    Ok(c) => c,
                    Err(e) => return config_error(e),
                },
                None => PipelineConfig::default(),
            };
            let mut sets: Vec<(String, String)> = Vec::new();
            let mut push = |k: &str, v: Option<String>| {
                if let Some(v) = v {
                    sets.push((k.to_string(), v));
                }
            };
            push("stage", stage.map(|s| format!("\"{s}\"")));
            push("seed", seed.map(|s| s.to_string()));
            push("out_dir", out_dir.map(|p| serde_json::Value::from(p.to_string_lossy()).to_string()));
            push("k_range", k_range);
            push("bins", bins.map(|b| b.to_string()));
            push("grid", grid);
            for (k, v) in sets.into_iter().chain(overrides) {
                if let Err(e) = cfg.set(&k, &v) {
                    return config_error(e);
                }
            }
            if print_config {
                println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
                return ExitCode::SUCCESS;
            }
            match pipeline::run_pipeline(&cfg) {
                Ok(outcome) => {
                    let last = outcome.completed.last().map_or("none", |s| s.as_str());
                    println!("completed through {last}; artifacts in {}", outcome.out_dir.display());
                    for row in &outcome.report.comparison {
                        println!("{:>10} {:>8} {:.6}", row.model, row.day_class, row.avg_loss);
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => exit_with(&e),
            }
        }
        Command::Generate {
            out_dir,
            config,
            seed,
            households,
            days,
            noise,
        } => match generate(out_dir, config, seed, households, days, noise) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => config_error(format!("{e:#}")),
        },
        Command::Report { out_dir } => match pipeline::emit_report(&out_dir) {
            Ok(files) => {
                for f in files {
                    println!("{}", f.display());
                }
                ExitCode::SUCCESS
            }
            Err(e) => exit_with(&e),
        },
    }
}

fn exit_with(e: &PipelineError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn generate(
    out_dir: PathBuf,
    config: Option<PathBuf>,
    seed: Option<u64>,
    households: Option<usize>,
    days: Option<usize>,
    noise: Option<f64>,
) -> anyhow::Result<()> {
    let mut cfg: GeneratorConfig = match config {
        Some(p) => {
            let text = fs::read_to_string(&p).with_context(|| p.display().to_string())?;
            serde_json::from_str(&text).with_context(|| p.display().to_string())?
        }
        None => GeneratorConfig::default(),
    };
    cfg.seed = seed.unwrap_or(cfg.seed);
    cfg.households = households.unwrap_or(cfg.households);
    cfg.days = days.unwrap_or(cfg.days);
    cfg.noise = noise.unwrap_or(cfg.noise);
    let g = synthgen::generate(&cfg)?;
    fs::create_dir_all(&out_dir).with_context(|| out_dir.display().to_string())?;
    fs::write(out_dir.join("meter.csv"), &g.meter_csv)?;
    fs::write(out_dir.join("survey.csv"), &g.survey_csv)?;
    fs::write(out_dir.join("truth.json"), g.truth.to_json() + "\n")?;
    println!(
        "{} households x {} days written to {}",
        cfg.households,
        cfg.days,
        out_dir.display()
    );
    Ok(())
}
