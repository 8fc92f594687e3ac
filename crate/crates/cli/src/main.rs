use std::path::PathBuf;
use std::process::ExitCode;

use alad::finetune::FinetuneMode;
use alad::numerics::OpKind;
use alad::{Error, Result};
use alad_cli::commands::{self, AlignArgs, FinetuneTarget, Run};
use alad_cli::config::{RunConfig, StudentPreset, TaskChoice};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "alad", version, about = "Alignment-adapter experiment pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML); the preset-A defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; the first configured seed when omitted.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root; runs land in `<out>/seed-<seed>`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct Target {
    #[arg(long)]
    mode: Option<FinetuneMode>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    task: Option<TaskChoice>,
    /// Fine-tune or evaluate the teacher reference instead of the student.
    #[arg(long)]
    reference: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the unlabelled corpus and both task datasets.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// MLM-pretrain the teacher on the corpus.
    PretrainTeacher {
        #[command(flatten)]
        common: Common,
    },
    /// Prune or pretrain the student encoder.
    DeriveStudent {
        #[command(flatten)]
        common: Common,
    },
    /// Train an alignment adapter.
    Align {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        phase: u8,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        task: Option<TaskChoice>,
        /// Start phase 2 from a fresh adapter instead of the phase-1 weights.
        #[arg(long)]
        from_scratch: bool,
    },
    /// Fine-tune a stack on a task and write its run report.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        target: Target,
    },
    /// Re-evaluate a fine-tuned stack on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        target: Target,
    },
    /// Aggregate run reports into a table.
    Report {
        /// Directories to scan for run reports.
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Finite-difference check of every op and composite path.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        instances: usize,
        /// Corrupt one op's backward to confirm the check catches it.
        #[arg(long)]
        inject_fault: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print a default run configuration.
    Config {
        #[arg(long, default_value = "a")]
        student: StudentPreset,
    },
}

fn run_for(common: &Common) -> Result<Run> {
    let config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    Run::new(config, common.seed, common.out.clone())
}

fn target_for(run: &Run, t: &Target) -> FinetuneTarget {
    FinetuneTarget::from_run(run, t.mode, t.window, t.task, t.reference)
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common } => {
            let run = run_for(&common)?;
            let s = commands::cmd_gen_data(&run)?;
            println!("corpus {} sequences, tagging {} sequences, spanqa {} items -> {}", s.corpus, s.tagging, s.spanqa, run.dir.display());
        }
        Command::PretrainTeacher { common } => {
            let run = run_for(&common)?;
            let losses = commands::cmd_pretrain_teacher(&run)?;
            println!("teacher mlm loss {:.4} -> {:.4}", losses[0], losses[losses.len() - 1]);
        }
        Command::DeriveStudent { common } => {
            let run = run_for(&common)?;
            let losses = commands::cmd_derive_student(&run)?;
            match (losses.first(), losses.last()) {
                (Some(a), Some(b)) => println!("student {} mlm loss {a:.4} -> {b:.4}", run.config.student.name()),
                _ => println!("student {} pruned from teacher", run.config.student.name()),
            }
        }
        Command::Align { common, phase, window, task, from_scratch } => {
            let run = run_for(&common)?;
            let args = AlignArgs { phase, window_n: window, task, from_scratch };
            let rec = commands::cmd_align(&run, &args)?;
            println!(
                "phase {phase} validation mse {:.5} -> {:.5} over {} steps",
                rec.initial_validation().unwrap_or(f64::NAN),
                rec.final_validation().unwrap_or(f64::NAN),
                rec.train_mse.len()
            );
        }
        Command::Finetune { common, target } => {
            let run = run_for(&common)?;
            let report = commands::cmd_finetune(&run, &target_for(&run, &target))?;
            println!("{}", report.to_json()?);
        }
        Command::Eval { common, target } => {
            let run = run_for(&common)?;
            let metrics = commands::cmd_eval(&run, &target_for(&run, &target))?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
        }
        Command::Report { dirs, out } => {
            let table = commands::cmd_report(&dirs, &out)?;
            print!("{}", table.render());
        }
        Command::Gradcheck { instances, inject_fault, seed } => {
            let fault = inject_fault
                .map(|name| OpKind::from_name(&name).ok_or_else(|| Error::Config(format!("unknown op {name:?}"))))
                .transpose()?;
            let reports = commands::cmd_gradcheck(instances, fault, seed)?;
            print!("{}", commands::render_gradcheck(&reports));
            let failed = reports.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                return Err(Error::Contract(format!("{failed} gradient checks failed")));
            }
        }
        Command::Config { student } => print!("{}", RunConfig::preset(student).to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(alad_cli::exit_code(&e) as u8)
        }
    }
}
