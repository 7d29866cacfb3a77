//! `gtn`: pretraining, transfer, evaluation, forgetting study, analysis and
//! the acceptance suite from one binary.
//!
//! Exit codes: 0 success, 1 a criterion failed, 2 usage or config error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use gtn_core::data::Split;
use gtn_core::experiment::acceptance::{write_report, Suite, CRITERIA};
use gtn_core::experiment::commands::{
    archive_run, cmd_analyze, cmd_eval, cmd_lwf, cmd_pretrain, cmd_transfer, StageMetrics, Task,
};
use gtn_core::experiment::ExperimentConfig;
use gtn_core::model::Variant;
use gtn_core::Error;

const VERSION: &str = env!("GTN_VERSION");

#[derive(Parser, Debug)]
#[command(name = "gtn", version = VERSION, about = "Gated transfer network experiments")]
struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override any config key, e.g. `--set optim.lr=0.05`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    sets: Vec<String>,

    /// Shortcut for `run.seeds`, comma separated.
    #[arg(long, value_delimiter = ',', global = true)]
    seeds: Option<Vec<u64>>,

    /// Shortcut for `run.output`.
    #[arg(long, global = true)]
    output: Option<PathBuf>,

    /// Shortcut for `run.threads`.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Shortcut for `optim.epochs`.
    #[arg(long, global = true)]
    epochs: Option<usize>,

    /// Shortcut for `optim.lr`.
    #[arg(long, global = true)]
    lr: Option<f64>,

    /// Shortcut for `data.overlap`.
    #[arg(long, global = true)]
    overlap: Option<f64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train backbone and classifier on each seed's source task.
    Pretrain,
    /// Fine-tune a variant on each seed's target task.
    Transfer {
        /// Shortcut for `model.variant`.
        #[arg(long)]
        variant: Option<Variant>,
        /// Pretrained checkpoint, or a run directory holding one per seed.
        #[arg(long)]
        source: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and print the statistics as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "target")]
        task: TaskArg,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Seed of the data; defaults to the first configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Re-fine-tune target models on the source and report forgetting.
    Lwf {
        /// Pretrained checkpoint or run directory (default: the output).
        #[arg(long)]
        source: Option<PathBuf>,
        /// Target checkpoint or run directory (default: the output).
        #[arg(long)]
        target: Option<PathBuf>,
    },
    /// Gate report, features and classifier weights of a checkpoint.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "target")]
        task: TaskArg,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the acceptance suite and write the report.
    Reproduce {
        /// Report directory.
        #[arg(long, default_value = "results")]
        results: PathBuf,
        /// Run only these criteria, comma separated.
        #[arg(long, value_delimiter = ',')]
        only: Option<Vec<u32>>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    Source,
    Target,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Source => Task::Source,
            TaskArg::Target => Task::Target,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

/// `--set` pairs first, then the shortcut flags.
fn overrides(cli: &Cli) -> Result<Vec<(String, String)>, Error> {
    let mut out = Vec::new();
    for s in &cli.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set '{s}' must look like section.key=value")))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    let mut push = |k: &str, v: String| out.push((k.to_string(), v));
    if let Some(seeds) = &cli.seeds {
        let list: Vec<String> = seeds.iter().map(u64::to_string).collect();
        push("run.seeds", format!("[{}]", list.join(", ")));
    }
    if let Some(o) = &cli.output {
        push("run.output", toml_string(&o.display().to_string()));
    }
    if let Some(t) = cli.threads {
        push("run.threads", t.to_string());
    }
    if let Some(e) = cli.epochs {
        push("optim.epochs", e.to_string());
    }
    if let Some(lr) = cli.lr {
        push("optim.lr", format!("{lr:?}"));
    }
    if let Some(o) = cli.overlap {
        push("data.overlap", format!("{o:?}"));
    }
    if let Command::Transfer { variant: Some(v), .. } = &cli.command {
        push("model.variant", toml_string(v.name()));
    }
    Ok(out)
}

/// A TOML basic string.
fn toml_string(s: &str) -> String {
    let mut out = String::from("\"");
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

fn print_stage(records: &[StageMetrics]) {
    for m in records {
        let gate = m.test.gate_mean.map(|g| format!(" gate_mean {g:.4}")).unwrap_or_default();
        println!(
            "seed {}: {} {} test_acc {:.4}{gate}",
            m.seed, m.stage, m.variant, m.test.accuracy
        );
    }
}

enum Failure {
    Criteria,
    Error(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

fn first_seed(cfg: &ExperimentConfig, seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| cfg.seeds()[0])
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = ExperimentConfig::resolve(cli.config.as_deref(), &overrides(&cli)?)?;
    match cli.command {
        Command::Pretrain => print_stage(&cmd_pretrain(&cfg, VERSION)?),
        Command::Transfer { source, .. } => {
            print_stage(&cmd_transfer(&cfg, VERSION, cfg.model.variant, source.as_deref())?)
        }
        Command::Eval {
            checkpoint,
            task,
            split,
            seed,
        } => {
            let stats = cmd_eval(&cfg, &checkpoint, task.into(), split.into(), first_seed(&cfg, seed))?;
            println!("{}", serde_json::to_string_pretty(&stats).expect("serialisable"));
        }
        Command::Lwf { source, target } => {
            let report = cmd_lwf(&cfg, VERSION, source.as_deref(), target.as_deref())?;
            print!("{}", report.to_csv());
            for (variant, gap) in &report.gap {
                println!("gap to oracle ({variant}): {gap:.4}");
            }
        }
        Command::Analyze {
            checkpoint,
            out,
            task,
            split,
            seed,
        } => {
            let dir = cmd_analyze(&cfg, &checkpoint, out.as_deref(), task.into(), split.into(), first_seed(&cfg, seed))?;
            println!("analysis written to {}", dir.display());
        }
        Command::Reproduce { results, only } => return reproduce(cfg, &results, only),
    }
    Ok(())
}

fn reproduce(mut cfg: ExperimentConfig, results: &Path, only: Option<Vec<u32>>) -> Result<(), Failure> {
    let ids = only.unwrap_or_else(|| CRITERIA.to_vec());
    if let Some(bad) = ids.iter().find(|id| !CRITERIA.contains(id)) {
        return Err(Error::Config(format!("unknown criterion {bad} (expected 1-10)")).into());
    }
    cfg.run.output = results.to_path_buf();
    archive_run(&cfg, VERSION)?;
    let suite = Suite::new(cfg, VERSION, results)?;
    let mut outcomes = Vec::new();
    for id in ids {
        let o = suite.run(id);
        println!("{}", o.result.line());
        outcomes.push(o);
    }
    write_report(results, &outcomes)?;
    let passed = outcomes.iter().filter(|o| o.result.pass).count();
    println!("{passed}/{} criteria passed; report in {}", outcomes.len(), results.display());
    if passed == outcomes.len() {
        Ok(())
    } else {
        Err(Failure::Criteria)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Criteria) => ExitCode::from(1),
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
