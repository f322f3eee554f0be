use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use light_peft::bench::{bench, BenchMode};
use light_peft::data::generate;
use light_peft::io::{load_config, swap_adapter, Checkpoint, Stage};
use light_peft::pipeline::{
    estimate, evaluate, finetune, initial_state, prune_all, run_all, sweep, SweepAxis, TrainConfig,
};
use light_peft::report::{bench_table, run_report, sweep_table, Format};
use light_peft::Error;

#[derive(Parser)]
#[command(
    name = "lpeft",
    version,
    about = "Early estimation and structured pruning for PEFT training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the run seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for checkpoints and reports.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long, default_value = "text", value_parser = ["text", "tsv"])]
    format: String,
}

#[derive(Subcommand)]
enum Command {
    /// Estimation phase only; writes estimated.lpft and importance.tsv.
    Estimate(Common),
    /// Prunes an estimated checkpoint; writes pruned.lpft.
    Prune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Fine-tunes a pruned checkpoint; writes finetuned.lpft.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Estimate, prune, fine-tune and evaluate.
    RunAll(Common),
    /// Accuracy of a checkpoint on the configured task's eval split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Runs the adapter checkpoint's modules on the base checkpoint's pruned foundation.
    Swap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        adapter: PathBuf,
    },
    /// Forward/backward timing and memory accounting.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = ["model-size", "rank-sweep", "module-count-sweep", "pruned-vs-dense"])]
        mode: String,
        #[arg(long, default_value_t = 3)]
        reps: usize,
    },
    /// Full pipeline once per value of one knob.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = ["rho", "t_prime", "lambda"])]
        axis: String,
        /// Comma-separated values, at least two.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Estimate(c) | Command::RunAll(c) => c,
            Command::Prune { common, .. }
            | Command::Finetune { common, .. }
            | Command::Eval { common, .. }
            | Command::Swap { common, .. }
            | Command::Bench { common, .. }
            | Command::Sweep { common, .. } => common,
        }
    }
}

/// Exit status for a failure: 2 when the configuration is at fault, 3 otherwise.
enum Failure {
    Config(Error),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
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
        Err(Failure::Config(e)) => {
            eprintln!("lpeft: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("lpeft: {e}");
            ExitCode::from(3)
        }
    }
}

fn resolve_config(c: &Common) -> Result<TrainConfig, Failure> {
    let mut cfg = load_config(&c.config).map_err(|e| Failure::Config(with_path(e, &c.config)))?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    }
}

fn format_of(c: &Common) -> Format {
    Format::parse(&c.format).expect("clap restricts the values")
}

fn out_path(c: &Common, name: &str) -> Result<PathBuf, Failure> {
    fs::create_dir_all(&c.out)?;
    Ok(c.out.join(name))
}

fn load_for(cfg: &TrainConfig, path: &Path) -> Result<Checkpoint, Failure> {
    let ck = Checkpoint::load(path).map_err(|e| with_path(e, path))?;
    if ck.model_config != cfg.model || ck.foundation_seed != cfg.foundation_seed {
        return Err(Failure::Config(Error::Config(format!(
            "{} was built for a different model or foundation seed than the config",
            path.display()
        ))));
    }
    Ok(ck)
}

fn run(cmd: Command) -> Result<(), Failure> {
    let common = cmd.common();
    let cfg = resolve_config(common)?;
    let format = format_of(common);
    match &cmd {
        Command::Estimate(c) => {
            let (train, _) = generate(&cfg.task)?;
            let (mut model, mut peft, mut masks) = initial_state(&cfg)?;
            let est = estimate(&mut model, &mut peft, &mut masks, &train, &cfg)?;
            let path = out_path(c, "estimated.lpft")?;
            Checkpoint::estimated(&cfg, &model, &peft, &masks, &est.ledger).save(&path)?;
            est.ledger
                .write_tsv(fs::File::create(out_path(c, "importance.tsv")?)?)?;
            println!(
                "estimation steps {} final objective {:.6}",
                est.losses.len(),
                est.losses.last().copied().unwrap_or(f64::NAN)
            );
            println!("wrote {}", path.display());
        }
        Command::Prune { common: c, checkpoint } => {
            let ck = load_for(&cfg, checkpoint)?;
            if ck.stage != Stage::Estimated {
                return Err(Failure::Config(Error::Config(format!(
                    "{} is a {} checkpoint; prune needs an estimated one",
                    checkpoint.display(),
                    ck.stage.name()
                ))));
            }
            let ledger = ck
                .ledger
                .as_ref()
                .ok_or_else(|| Error::Malformed("estimated checkpoint without a ledger".into()))?;
            let model = ck.build_model()?;
            let pruned = prune_all(&model, &ck.peft, &ck.masks, ledger, &cfg)?;
            let path = out_path(c, "pruned.lpft")?;
            Checkpoint::pruned(&cfg, &pruned, Stage::Pruned).save(&path)?;
            println!("plan {}", pruned.plan);
            println!("wrote {}", path.display());
        }
        Command::Finetune { common: c, checkpoint } => {
            let ck = load_for(&cfg, checkpoint)?;
            if ck.stage == Stage::Estimated {
                return Err(Failure::Config(Error::Config(format!(
                    "{} is not pruned yet",
                    checkpoint.display()
                ))));
            }
            let (train, eval) = generate(&cfg.task)?;
            let (mut model, mut peft) = ck.runnable()?;
            let losses = finetune(&mut model, &mut peft, &train, &cfg, cfg.finetune_steps())?;
            let accuracy = evaluate(&model, &peft, &eval)?;
            let out = Checkpoint {
                stage: Stage::Finetuned,
                peft,
                classifier_w: model.classifier_w.clone(),
                classifier_b: model.classifier_b.clone(),
                ledger: None,
                ..ck
            };
            let path = out_path(c, "finetuned.lpft")?;
            out.save(&path)?;
            println!(
                "finetune steps {} final loss {:.6}",
                losses.len(),
                losses.last().copied().unwrap_or(f64::NAN)
            );
            println!("eval accuracy {accuracy:.6}");
            println!("wrote {}", path.display());
        }
        Command::RunAll(c) => {
            let outcome = run_all(&cfg)?;
            let path = out_path(c, "finetuned.lpft")?;
            Checkpoint::pruned(&cfg, &outcome.pruned, Stage::Finetuned).save(&path)?;
            let text = run_report(&outcome.report, format);
            let ext = if format == Format::Tsv { "tsv" } else { "txt" };
            fs::write(out_path(c, &format!("report.{ext}"))?, &text)?;
            outcome
                .ledger
                .write_tsv(fs::File::create(out_path(c, "importance.tsv")?)?)?;
            print!("{text}");
            info!("wrote {}", path.display());
        }
        Command::Eval { checkpoint, .. } => {
            let ck = load_for(&cfg, checkpoint)?;
            let (_, eval) = generate(&cfg.task)?;
            let (model, peft) = ck.runnable()?;
            println!("eval accuracy {:.6}", evaluate(&model, &peft, &eval)?);
        }
        Command::Swap { base, adapter, .. } => {
            let b = load_for(&cfg, base)?;
            let a = load_for(&cfg, adapter)?;
            let (model, peft) = swap_adapter(&b, &a)?;
            let (_, eval) = generate(&cfg.task)?;
            println!("swapped {} onto {}", adapter.display(), base.display());
            println!("eval accuracy {:.6}", evaluate(&model, &peft, &eval)?);
        }
        Command::Bench { mode, reps, .. } => {
            let mode = BenchMode::parse(mode).expect("clap restricts the values");
            let results = bench(mode, &cfg, *reps)?;
            print!("{}", bench_table(&results, format));
        }
        Command::Sweep {
            axis, values, threads, ..
        } => {
            let axis = SweepAxis::parse(axis).expect("clap restricts the values");
            let rows = sweep(&cfg, axis, values, *threads).map_err(|e| match e {
                Error::InvalidValue { .. } | Error::Config(_) => Failure::Config(e),
                other => Failure::Runtime(other),
            })?;
            print!("{}", sweep_table(axis, &rows, format));
        }
    }
    Ok(())
}
