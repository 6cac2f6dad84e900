use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use uwf_core::error::{Error, Result};
use uwf_core::pipeline::{self, Context, RunConfig};
use uwf_core::synth::SynthConfig;

/// Ultra-widefield fundus screening: split, train, fuse, evaluate, explain.
#[derive(Parser)]
#[command(name = "uwf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stratified train/val/test split of the manifest.
    Split(RunArgs),
    /// Two-stage training of every configured architecture.
    Train(RunArgs),
    /// Cache features and train the fusion head.
    Fuse(RunArgs),
    /// Write the metrics report for this run and any extra runs.
    Evaluate(RunArgs),
    /// Grad-CAM panels and an HTML report.
    Explain {
        #[command(flatten)]
        run: RunArgs,
        /// Image ids to explain (default: from the config).
        ids: Vec<String>,
    },
    /// Generate a synthetic fundus dataset.
    Synth(SynthArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Run config (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Recompute outputs that already exist.
    #[arg(long)]
    force: bool,
    /// Override a config key, e.g. `--set train.max_epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_kv)]
    set: Vec<(String, String)>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<String>,
    #[arg(long)]
    task: Option<u8>,
    #[arg(long)]
    domain: Option<String>,
    /// Restrict to these architectures (repeatable).
    #[arg(long = "arch")]
    arch: Vec<String>,
    /// Save each spatial preprocessing stage as PNG.
    #[arg(long)]
    dump_stages: bool,
    /// Save each normalized spectrum as PNG.
    #[arg(long)]
    dump_spectrum: bool,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for images/ and manifest.csv.
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 128)]
    image_size: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    blur_fraction: Option<f64>,
    /// Also write a compact foundation encoder archive here.
    #[arg(long)]
    encoder: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    encoder_input: usize,
    #[arg(long)]
    force: bool,
}

fn parse_kv(s: &str) -> std::result::Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))
}

fn quoted(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

impl RunArgs {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut o = Vec::new();
        if let Some(s) = self.seed {
            o.push(("seed".into(), s.to_string()));
        }
        if let Some(d) = &self.output_dir {
            o.push(("output_dir".into(), quoted(d)));
        }
        if let Some(t) = self.task {
            o.push(("task".into(), t.to_string()));
        }
        if let Some(d) = &self.domain {
            o.push(("domain".into(), quoted(d)));
        }
        if !self.arch.is_empty() {
            let list: Vec<String> = self.arch.iter().map(|a| quoted(a)).collect();
            o.push(("architectures".into(), format!("[{}]", list.join(", "))));
        }
        if self.dump_stages {
            o.push(("debug.dump_stages".into(), "true".into()));
        }
        if self.dump_spectrum {
            o.push(("debug.dump_spectrum".into(), "true".into()));
        }
        o.extend(self.set.iter().cloned());
        o
    }

    fn load(&self) -> Result<(RunConfig, Context)> {
        let cfg = RunConfig::load(&self.config, &self.overrides())?;
        let ctx = Context {
            force: self.force,
            cache_dir: std::env::var_os("UWF_CACHE_DIR").map(PathBuf::from),
        };
        Ok((cfg, ctx))
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Split(a) => {
            let (cfg, ctx) = a.load()?;
            println!("{}", pipeline::cmd_split(&cfg, &ctx)?.display());
        }
        Command::Train(a) => {
            let (cfg, ctx) = a.load()?;
            for p in pipeline::cmd_train(&cfg, &ctx)? {
                println!("{}", p.display());
            }
        }
        Command::Fuse(a) => {
            let (cfg, ctx) = a.load()?;
            println!("{}", pipeline::cmd_fuse(&cfg, &ctx)?.display());
        }
        Command::Evaluate(a) => {
            let (cfg, ctx) = a.load()?;
            match pipeline::cmd_evaluate(&cfg, &ctx) {
                Ok(report) => print!("{}", report.to_table()),
                Err(e @ Error::UndefinedMetric(_)) => {
                    let txt = cfg.layout().eval_dir().join("report.txt");
                    if let Ok(t) = std::fs::read_to_string(txt) {
                        print!("{t}");
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
        }
        Command::Explain { run, ids } => {
            let (cfg, ctx) = run.load()?;
            println!("{}", pipeline::cmd_explain(&cfg, &ctx, &ids)?.display());
        }
        Command::Synth(a) => {
            let mut cfg = SynthConfig {
                n: a.n,
                image_size: a.image_size,
                seed: a.seed,
                ..SynthConfig::default()
            };
            if let Some(b) = a.blur_fraction {
                cfg.blur_fraction = b;
            }
            cfg.validate()?;
            let ctx = Context {
                force: a.force,
                cache_dir: None,
            };
            let enc = a.encoder.as_deref().map(|p| (p, a.encoder_input));
            println!("{}", pipeline::cmd_synth(&a.out, &cfg, enc, &ctx)?.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
