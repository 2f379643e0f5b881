use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use causalrec::cli::{
    cmd_bench, cmd_eval, cmd_generate, cmd_train, cmd_verify, ExperimentConfig, Overrides,
    ReportFormat,
};

#[derive(Parser)]
#[command(
    name = "causalrec",
    about = "Desk-scale experiments comparing interleaved and decoupled sequential recommenders"
)]
struct Cli {
    /// TOML experiment config; omit to use a built-in preset via --preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in preset (`fig3`: the two-user dog/cat fixture).
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Overrides both the generator and trainer seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides model.architecture.
    #[arg(long, global = true)]
    arch: Option<String>,
    /// Overrides output_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Report format: table-text or structured.
    #[arg(long, global = true)]
    format: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset and print a summary.
    Generate {
        /// Dataset destination; defaults to <output_dir>/dataset.jsonl.
        #[arg(long)]
        dataset_out: Option<PathBuf>,
    },
    /// Train one architecture; writes a checkpoint and a metrics report.
    Train,
    /// Evaluate a checkpoint under the candidate-isolation protocol.
    Eval {
        /// Checkpoint path; defaults to <output_dir>/<architecture>.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train every benchmark architecture and emit the comparison table.
    Bench,
    /// Run the invariant suites; exits nonzero if any fails.
    Verify,
}

fn resolve_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match (&cli.config, cli.preset.as_deref()) {
        (Some(_), Some(_)) => bail!("pass either --config or --preset, not both"),
        (Some(path), None) => ExperimentConfig::load(path)?,
        (None, Some("fig3")) => ExperimentConfig::fig3(),
        (None, Some(other)) => bail!("unknown preset {other:?}; available: fig3"),
        (None, None) => bail!("provide --config <file> or --preset fig3"),
    };
    cfg.apply_overrides(&Overrides {
        seed: cli.seed,
        arch: cli.arch.clone(),
        out: cli.out.clone(),
        format: cli.format.clone(),
    })?;
    Ok(cfg)
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();

    if let Command::Verify = cli.command {
        let seed = cli.seed.unwrap_or(1234);
        let (summary, ok) = cmd_verify(seed);
        print!("{summary}");
        if !ok {
            bail!("verification failed");
        }
        return Ok(());
    }

    let cfg = resolve_config(&cli)?;
    match cli.command {
        Command::Generate { dataset_out } => {
            let summary =
                cmd_generate(&cfg, dataset_out.as_deref()).context("generating dataset")?;
            println!(
                "wrote {} users / {} events ({} context, {} candidate) to {}",
                summary.n_users,
                summary.n_events,
                summary.context_events,
                summary.candidate_events,
                summary.path.display()
            );
            for (task, rate) in &summary.per_task_base_rate {
                println!("base rate {task}: {rate:.4}");
            }
        }
        Command::Train => {
            let artifacts = cmd_train(&cfg).context("training")?;
            println!("checkpoint: {}", artifacts.checkpoint_path.display());
            println!("report:     {}", artifacts.report_path.display());
            println!(
                "eval_loss {:.6}  per-step {:.2} ms  wall-clock {:.2} s",
                artifacts.report.eval_loss,
                artifacts.report.per_step_ms,
                artifacts.report.train_wall_clock_s
            );
            for (task, ne) in &artifacts.report.per_task_ne {
                println!("ne {task}: {ne:.6}");
            }
        }
        Command::Eval { checkpoint } => {
            let path = checkpoint.unwrap_or_else(|| {
                cfg.output_dir.join(format!("{}.ckpt", cfg.model.architecture.name()))
            });
            let report = cmd_eval(&cfg, &path).context("evaluating")?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Bench => {
            let artifacts = cmd_bench(&cfg).context("benchmarking")?;
            match cfg.report_format {
                ReportFormat::TableText => print!("{}", artifacts.table),
                ReportFormat::Structured => println!("{}", artifacts.structured),
            }
            eprintln!("table:   {}", artifacts.table_path.display());
            eprintln!("report:  {}", artifacts.report_path.display());
            eprintln!("history: {}", artifacts.history_path.display());
        }
        Command::Verify => unreachable!("handled above"),
    }
    Ok(())
}
