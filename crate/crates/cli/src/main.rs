use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mkt_core::config::RunConfig;
use mkt_core::error::{MktError, Result};
use mkt_core::pipeline;

#[derive(Parser)]
#[command(name = "mkt", version, about = "Open-vocabulary multi-label classification on a synthetic world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// key=value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed from the config
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Extra KEY=VALUE overrides, applied after the config file
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset
    Gen(Common),
    /// Run stage 1 and stage 2 training
    Train(Common),
    /// Evaluate a checkpoint on the test split
    Eval(Common),
    /// Nearest-label retrieval under a checkpoint's context
    Retrieve(Common),
    /// Train and evaluate over a list of lambda or k values
    Sweep(Common),
    /// Finite-difference check of every differentiable op
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn resolve(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &c.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| MktError::Config(format!("override {kv:?} is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = c.seed {
        cfg.set_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen(c) => {
            let hash = pipeline::cmd_gen(&resolve(&c)?, &c.out)?;
            println!("{hash}");
        }
        Command::Train(c) => {
            let t = pipeline::cmd_train(&resolve(&c)?, &c.out)?;
            println!("steps {}", t.log.len());
            println!("stage2 loss {:.6} -> {:.6}", t.summary.start_loss, t.summary.end_loss);
        }
        Command::Eval(c) => {
            for r in pipeline::cmd_eval(&resolve(&c)?, &c.out)? {
                print!("{}", r.to_text());
            }
        }
        Command::Retrieve(c) => {
            let r = pipeline::cmd_retrieve(&resolve(&c)?, &c.out)?;
            print!("{}", r.to_text());
        }
        Command::Sweep(c) => {
            let cfg = resolve(&c)?;
            let points = pipeline::cmd_sweep(&cfg, &c.out)?;
            print!("{}", pipeline::sweep_csv(&cfg, &points));
        }
        Command::Gradcheck { instances, out } => {
            let (cases, text) = pipeline::cmd_gradcheck(instances)?;
            print!("{text}");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(|e| MktError::io(&dir, e))?;
                let path = dir.join("gradcheck.txt");
                std::fs::write(&path, &text).map_err(|e| MktError::io(&path, e))?;
            }
            if let Some(bad) = cases.iter().find(|c| !c.passed()) {
                return Err(MktError::GradCheckFailed(bad.op.to_string()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
