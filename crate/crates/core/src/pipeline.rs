//! File-level orchestration of the two training phases.

use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::data::{build_vocab, load_tsv, synth_dataset, Example, Vocabulary};
use crate::distill::{distill_student, train_teacher, Teacher, TrainReport};
use crate::error::{Error, Result};
use crate::run_config::{DataSource, RunConfig};

/// Overrides `output_dir` from the run configuration when set.
pub const OUTPUT_DIR_ENV: &str = "SDBERT_OUTPUT_DIR";

pub const TEACHER_CHECKPOINT: &str = "teacher.ckpt";
pub const TEACHER_REPORT: &str = "teacher_report.json";
pub const STUDENT_CHECKPOINT: &str = "student.ckpt";
pub const STUDENT_REPORT: &str = "student_report.json";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
}

/// Loads or generates the data and splits it.
///
/// Synthetic label noise corrupts the training split only: the held-out
/// tail is scored against the clean labels of the same texts.
pub fn prepare_data(cfg: &RunConfig) -> Result<Splits> {
    let holdout = |len: usize| -> Result<usize> {
        let eval = ((len as f64) * cfg.eval_fraction).ceil() as usize;
        if eval == 0 || eval >= len {
            return Err(Error::Data(format!(
                "cannot split {len} examples with eval_fraction {}",
                cfg.eval_fraction
            )));
        }
        Ok(len - eval)
    };
    match &cfg.data {
        DataSource::Synthetic { count, seed, noise } => {
            let mut noisy = synth_dataset(*count, *seed, *noise)?;
            let mut clean = synth_dataset(*count, *seed, 0.0)?;
            let cut = holdout(noisy.len())?;
            noisy.truncate(cut);
            let eval = clean.split_off(cut);
            Ok(Splits { train: noisy, eval })
        }
        DataSource::Tsv {
            train,
            eval: Some(eval),
        } => {
            let train = load_tsv(train)?;
            let eval = load_tsv(eval)?;
            if train.is_empty() || eval.is_empty() {
                return Err(Error::Data("data files must not be empty".into()));
            }
            Ok(Splits { train, eval })
        }
        DataSource::Tsv { train, eval: None } => {
            let mut train = load_tsv(train)?;
            if train.len() < 2 {
                return Err(Error::Data(
                    "training file needs at least two examples to split".into(),
                ));
            }
            let cut = holdout(train.len())?;
            let eval = train.split_off(cut);
            Ok(Splits { train, eval })
        }
    }
}

/// Resolves the artifact directory (environment override first) and creates it.
pub fn output_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = std::env::var_os(OUTPUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| cfg.output_dir.clone());
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

#[derive(Debug, Clone)]
pub struct PhaseOutcome {
    pub checkpoint: PathBuf,
    pub report_path: PathBuf,
    pub report: TrainReport,
    pub parameter_count: usize,
}

pub fn run_train_teacher(cfg: &RunConfig, out_dir: &Path) -> Result<PhaseOutcome> {
    cfg.validate()?;
    let splits = prepare_data(cfg)?;
    let vocab = build_vocab(&splits.train, cfg.teacher.vocab_size)?;
    let (params, report) = train_teacher(
        &splits.train,
        &splits.eval,
        &vocab,
        &cfg.teacher,
        &cfg.teacher_train,
    )?;
    let parameter_count = params.num_elements();
    let ckpt = Checkpoint {
        config: cfg.teacher.clone(),
        vocab: Some(vocab.clone()),
        params,
    };
    let checkpoint = out_dir.join(TEACHER_CHECKPOINT);
    let report_path = out_dir.join(TEACHER_REPORT);
    ckpt.save(&checkpoint)?;
    vocab.save(out_dir.join(VOCAB_FILE))?;
    fs::write(&report_path, report.to_json())?;
    Ok(PhaseOutcome {
        checkpoint,
        report_path,
        report,
        parameter_count,
    })
}

pub fn load_teacher(path: &Path) -> Result<(Checkpoint, Vocabulary)> {
    let ckpt = Checkpoint::load(path).map_err(|e| match e {
        Error::Io(io) => Error::Checkpoint(format!("{}: {io}", path.display())),
        other => other,
    })?;
    let vocab = ckpt
        .vocab
        .clone()
        .ok_or_else(|| Error::Checkpoint("teacher checkpoint carries no vocabulary".into()))?;
    Ok((ckpt, vocab))
}

pub fn run_distill(cfg: &RunConfig, teacher_path: &Path, out_dir: &Path) -> Result<PhaseOutcome> {
    cfg.validate()?;
    let (teacher, vocab) = load_teacher(teacher_path)?;
    if teacher.config.num_layers < cfg.student.num_layers
        || teacher.config.num_heads < cfg.student.num_heads
    {
        return Err(Error::Config(
            "student must not be larger than the teacher checkpoint".into(),
        ));
    }
    let splits = prepare_data(cfg)?;
    let rebuilt = build_vocab(&splits.train, cfg.student.vocab_size)?;
    if rebuilt != vocab {
        return Err(Error::Checkpoint(
            "teacher vocabulary does not match the configured training data".into(),
        ));
    }
    let (params, report) = distill_student(
        Teacher {
            params: &teacher.params,
            config: &teacher.config,
        },
        &cfg.student,
        &splits.train,
        &splits.eval,
        &vocab,
        &cfg.distill_config(),
    )?;
    let parameter_count = params.num_elements();
    let ckpt = Checkpoint {
        config: cfg.student.clone(),
        vocab: Some(vocab),
        params,
    };
    let checkpoint = out_dir.join(STUDENT_CHECKPOINT);
    let report_path = out_dir.join(STUDENT_REPORT);
    ckpt.save(&checkpoint)?;
    fs::write(&report_path, report.to_json())?;
    Ok(PhaseOutcome {
        checkpoint,
        report_path,
        report,
        parameter_count,
    })
}

/// Accuracy of a saved model on a TSV file.
pub fn run_eval(checkpoint: &Path, data: &Path) -> Result<f64> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let vocab = ckpt
        .vocab
        .ok_or_else(|| Error::Checkpoint("checkpoint carries no vocabulary".into()))?;
    let examples = load_tsv(data)?;
    if examples.is_empty() {
        return Err(Error::Data(format!("{} holds no examples", data.display())));
    }
    crate::distill::evaluate(&ckpt.params, &ckpt.config, &vocab, &examples)
}
