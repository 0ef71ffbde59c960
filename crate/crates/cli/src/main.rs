//! `taco`: train, sweep and report on leave-one-group-out experiments.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data error (including an
//! empty report), 3 training failure.

mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;
use taco_core::experiment::{self, Method, RunConfig};
use taco_core::{ingest, Error, Result};

#[derive(Parser)]
#[command(name = "taco", version, about = "Contrastive meta-learning experiments for activity recognition")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one configuration over its seeds.
    Train(RunArgs),
    /// Run every (method, fraction, target) combination.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated training fractions.
        #[arg(long, value_delimiter = ',', default_value = "0.2,0.4,0.6,0.8,1.0")]
        fractions: Vec<f64>,
        /// Comma-separated target groups; all groups when omitted.
        #[arg(long, value_delimiter = ',')]
        targets: Vec<usize>,
        /// Comma-separated methods.
        #[arg(long, value_delimiter = ',', default_value = "taco,erm")]
        methods: Vec<String>,
    },
    /// Aggregate experiment records below a directory.
    Report { dir: PathBuf },
    /// Write a synthetic dataset in the canonical on-disk format.
    SynthData {
        #[command(flatten)]
        run: RunArgs,
        /// Destination directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a dataset directory and list every problem found.
    ValidateData { dir: PathBuf },
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// TOML or flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base preset: standard or desk.
    #[arg(long, default_value = "standard")]
    preset: String,
    /// Override any config key, e.g. `--set meta.alpha=0.001`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    target: Option<usize>,
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    precision: Option<String>,
    /// Output root; overrides the TACO_OUTPUT_ROOT environment variable.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl RunArgs {
    /// Preset, then config file, then environment, then flags.
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = config::preset(&self.preset)?;
        if let Some(p) = &self.config {
            cfg = config::apply(&cfg, &config::read_file(p)?)?;
        }
        let mut sets: Vec<(String, Value)> = Vec::new();
        if let Ok(root) = std::env::var(config::OUTPUT_ROOT_ENV) {
            if !root.is_empty() {
                sets.push(("output_dir".into(), Value::String(root)));
            }
        }
        let mut flag = |k: &str, v: Value| sets.push((k.to_string(), v));
        if let Some(v) = &self.dataset {
            flag("dataset_path", Value::String(v.display().to_string()));
        }
        if let Some(v) = &self.method {
            flag("method", Value::String(v.clone()));
        }
        if let Some(v) = self.target {
            flag("target_group", v.into());
        }
        if let Some(v) = self.fraction {
            flag("train_fraction", v.into());
        }
        if !self.seeds.is_empty() {
            flag("seeds", self.seeds.clone().into());
        }
        if let Some(v) = self.epochs {
            flag("meta.max_epochs", v.into());
        }
        if let Some(v) = &self.precision {
            flag("precision", Value::String(v.clone()));
        }
        if let Some(v) = &self.output_dir {
            flag("output_dir", Value::String(v.display().to_string()));
        }
        for s in &self.sets {
            sets.push(config::parse_assignment(s)?);
        }
        config::apply(&cfg, &sets)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parameter { .. } => 1,
        Error::Data { .. } | Error::Dataset(_) | Error::Empty(_) | Error::Io { .. } | Error::Json(_) | Error::Checkpoint(_) => 2,
        Error::Training(_) | Error::Shape(_) => 3,
    }
}

fn fmt_acc(m: Option<f64>, s: Option<f64>) -> String {
    match (m, s) {
        (Some(m), Some(s)) => format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s),
        _ => "n/a".into(),
    }
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let rec = experiment::run_experiment(&cfg)?;
            for s in &rec.seeds {
                match (s.accuracy, &s.error) {
                    (Some(a), _) => println!("seed {}: {:.2}%", s.seed, 100.0 * a),
                    (None, Some(e)) => println!("seed {}: failed: {e}", s.seed),
                    _ => {}
                }
            }
            println!(
                "{} target {} fraction {}: {}",
                rec.method.name(),
                rec.target_group,
                rec.train_fraction,
                fmt_acc(rec.mean, rec.std)
            );
            println!("record: {}", cfg.output_dir.join(experiment::run_dir_name(&cfg, &rec.dataset)).join("record.json").display());
            if rec.partial {
                return Ok(3);
            }
        }
        Command::Sweep { run, fractions, targets, methods } => {
            let cfg = run.resolve()?;
            let methods = methods
                .iter()
                .map(|m| Method::parse(m).ok_or_else(|| Error::config(format!("unknown method `{m}`"))))
                .collect::<Result<Vec<_>>>()?;
            let targets = if targets.is_empty() {
                (0..experiment::prepare_data(&cfg)?.domains.len()).collect()
            } else {
                targets
            };
            let rep = experiment::sweep(&cfg, &fractions, &targets, &methods)?;
            print!("fraction");
            for m in &rep.methods {
                print!("\t{}", m.name());
            }
            println!();
            for (i, f) in rep.fractions.iter().enumerate() {
                print!("{f}");
                for m in &rep.methods {
                    match rep.curves[m][i] {
                        Some(a) => print!("\t{:.2}", 100.0 * a),
                        None => print!("\tn/a"),
                    }
                }
                println!();
            }
            for (m, rho) in &rep.spearman {
                println!("spearman {}: {}", m.name(), rho.map_or("n/a".into(), |r| format!("{r:.3}")));
            }
            println!("written to {}", cfg.output_dir.join("sweep").display());
            if rep.cells.iter().any(|c| c.partial) {
                return Ok(3);
            }
        }
        Command::Report { dir } => {
            let rep = experiment::report(&dir)?;
            print!("{}", rep.table());
            for s in &rep.skipped {
                eprintln!("skipped: {s}");
            }
        }
        Command::SynthData { run, out } => {
            let cfg = run.resolve()?;
            let (manifest, domains) = ingest::synth_domains(&cfg.synth)?;
            let m = ingest::write_dataset(&out, &manifest, &domains)?;
            println!("wrote {} subjects to {}", m.subjects.len(), out.display());
        }
        Command::ValidateData { dir } => {
            let problems = ingest::check_dataset(&dir)?;
            if problems.is_empty() {
                println!("{}: ok", dir.display());
            } else {
                for p in &problems {
                    println!("{p}");
                }
                eprintln!("{} problem(s) found", problems.len());
                return Ok(2);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
