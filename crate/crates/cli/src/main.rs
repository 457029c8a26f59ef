//! `sdbert` command-line driver.
//!
//! Exit codes: 0 success, 2 configuration/validation/load error, 3 numeric
//! failure during training, 1 anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sdbert::attention::{build_mask, SparsityConfig};
use sdbert::bench::{run_bench, BenchConfig};
use sdbert::pipeline::{output_dir, run_distill, run_eval, run_train_teacher};
use sdbert::run_config::RunConfig;
use sdbert::Error;

#[derive(Parser)]
#[command(
    name = "sdbert",
    version,
    about = "Sparse-attention encoder training, distillation and benchmarks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the teacher; writes teacher.ckpt, vocab.txt and teacher_report.json.
    TrainTeacher {
        #[arg(long)]
        config: PathBuf,
    },
    /// Distill a student from a teacher checkpoint; writes student.ckpt and student_report.json.
    Distill {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Print the accuracy of a checkpoint on a TSV file.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Print a sparse attention mask, one row of permitted keys per line.
    MaskDump {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        g: usize,
        #[arg(long, default_value_t = 0)]
        w: usize,
        #[arg(long, default_value_t = 0)]
        r: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Time the attention sublayer under full and sparse masks; prints JSON.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "128,256,512,1024,2048")]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        d_model: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        #[arg(long, default_value_t = 2)]
        g: usize,
        #[arg(long, default_value_t = 8)]
        w: usize,
        #[arg(long, default_value_t = 4)]
        r: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::NonFinite { .. } => 3,
        Error::Config(_)
        | Error::Data(_)
        | Error::Parse { .. }
        | Error::Io(_)
        | Error::Checkpoint(_)
        | Error::Vocabulary { .. }
        | Error::Length { .. } => 2,
        Error::Dimension(_) | Error::Contract(_) | Error::DegenerateRow { .. } => 1,
    }
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::TrainTeacher { config } => {
            let cfg = RunConfig::load(&config)?;
            let dir = output_dir(&cfg)?;
            let out = run_train_teacher(&cfg, &dir)?;
            println!(
                "teacher: accuracy {:.4}, {} parameters, {:.1}s -> {}",
                out.report.accuracy,
                out.parameter_count,
                out.report.wall_clock_seconds,
                out.checkpoint.display()
            );
        }
        Command::Distill { config, teacher } => {
            let cfg = RunConfig::load(&config)?;
            let dir = output_dir(&cfg)?;
            let out = run_distill(&cfg, &teacher, &dir)?;
            println!(
                "student: accuracy {:.4}, {} parameters, {:.1}s -> {}",
                out.report.accuracy,
                out.parameter_count,
                out.report.wall_clock_seconds,
                out.checkpoint.display()
            );
        }
        Command::Eval { ckpt, data } => {
            println!("{:.4}", run_eval(&ckpt, &data)?);
        }
        Command::MaskDump { n, g, w, r, seed } => {
            let mask = build_mask(&SparsityConfig::new(g, w, r, seed), n)?;
            print!("{}", mask.dump());
        }
        Command::Bench {
            lengths,
            d_model,
            heads,
            reps,
            g,
            w,
            r,
            seed,
        } => {
            let result = run_bench(&BenchConfig {
                lengths,
                d_model,
                heads,
                repetitions: reps,
                sparsity: SparsityConfig::new(g, w, r, seed),
                seed,
            })?;
            println!(
                "{}",
                serde_json::to_string_pretty(&result).expect("bench result serializes")
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
