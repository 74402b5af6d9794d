use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use sfuda_core::eval::EvalReport;
use sfuda_core::pipeline::{cmd_adapt, cmd_evaluate, cmd_train_oracle, cmd_train_source};
use sfuda_core::report::{compare, load_reports};
use sfuda_core::{AdaptConfig, Error, Mode, Real, Result};

#[derive(Parser)]
#[command(name = "sfuda", version, about = "Source-free domain adaptation for segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Compute device (only `cpu` is available).
    #[arg(long)]
    device: Option<String>,
}

impl Common {
    fn resolve(&self) -> Result<AdaptConfig> {
        let mut cfg = match &self.config {
            Some(p) => AdaptConfig::read(p)?,
            None => AdaptConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = &self.device {
            cfg.device = d.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the source model (or, with --oracle, a model on labeled target data).
    TrainSource {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        oracle: bool,
    },
    /// Adapt the source model to the target data.
    Adapt {
        #[command(flatten)]
        common: Common,
        /// stage1, stage2, stage1->stage2 or stage2->stage1.
        #[arg(long, default_value = "stage1->stage2")]
        mode: String,
        /// Source checkpoint; defaults to `<output_dir>/source.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Write Stage I pseudo-label maps as PNGs into this directory.
        #[arg(long)]
        dump_stage1: Option<PathBuf>,
    },
    /// Score a checkpoint on the target data.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Mode recorded in the report, e.g. `direct` for a source model.
        #[arg(long, default_value = "evaluate")]
        label: String,
    },
    /// Tabulate and plot every report in a directory.
    Report {
        #[command(flatten)]
        common: Common,
        /// Report directory; defaults to `<output_dir>/reports`.
        #[arg(long)]
        reports: Option<PathBuf>,
        /// Where to write the table and plots; defaults to the report directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the fully resolved configuration as TOML.
    PrintConfig {
        #[command(flatten)]
        common: Common,
    },
}

fn summary(r: &EvalReport) -> serde_json::Value {
    let means: serde_json::Map<_, _> = r.aggregate.iter().map(|(k, s)| (k.clone(), json!(s.mean))).collect();
    json!({
        "mode": r.meta.mode,
        "dataset": r.meta.dataset_id,
        "dice": means,
        "target_label_reads_during_adaptation": r.meta.target_label_reads_during_adaptation,
    })
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    match cli.command {
        Command::TrainSource { common, oracle } => {
            let cfg = common.resolve()?;
            let out = if oracle { cmd_train_oracle::<Real>(&cfg)? } else { cmd_train_source::<Real>(&cfg)? };
            Ok(json!({ "checkpoint": out.checkpoint, "report": summary(&out.report) }))
        }
        Command::Adapt { common, mode, checkpoint, dump_stage1 } => {
            let cfg = common.resolve()?;
            let mode: Mode = mode.parse()?;
            let out = cmd_adapt::<Real>(&cfg, mode, checkpoint.as_deref(), dump_stage1.as_deref())?;
            Ok(json!({
                "checkpoint": out.checkpoint,
                "target_label_reads_during_adaptation": out.target_label_reads,
                "direct": out.direct.as_ref().map(summary),
                "stages": out.stages.iter().map(summary).collect::<Vec<_>>(),
            }))
        }
        Command::Evaluate { common, checkpoint, label } => {
            let cfg = common.resolve()?;
            Ok(summary(&cmd_evaluate::<Real>(&cfg, &checkpoint, &label)?))
        }
        Command::Report { common, reports, out } => {
            let dir = match reports {
                Some(d) => d,
                None => common.resolve()?.output_dir.join("reports"),
            };
            let table = compare(&load_reports(&dir)?)?;
            let out = out.unwrap_or_else(|| dir.clone());
            table.save(&out)?;
            print!("{}", table.to_markdown());
            Ok(serde_json::Value::Null)
        }
        Command::PrintConfig { common } => {
            print!("{}", common.resolve()?.to_toml());
            Ok(serde_json::Value::Null)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(serde_json::Value::Null) => ExitCode::SUCCESS,
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::FAILURE
        }
    }
}

fn error_json(e: &Error) -> serde_json::Value {
    json!({ "error": e.kind(), "message": e.to_string(), "details": e.details() })
}
