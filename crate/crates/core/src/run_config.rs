//! Flat `key=value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is
//! optional; unset keys take the `desk` preset value. Unknown or repeated
//! keys are rejected.
//!
//! | key | meaning | desk default |
//! |-----|---------|--------------|
//! | `preset` | only `desk` is defined | `desk` |
//! | `output_dir` | artifact directory | `runs` |
//! | `train_data` | TSV training file (disables the synthetic corpus) | unset |
//! | `eval_data` | TSV evaluation file | unset |
//! | `synth_count`, `synth_seed`, `synth_noise` | synthetic corpus | `2000`, `7`, `0.05` |
//! | `eval_fraction` | held-out tail when no `eval_data` is given | `0.2` |
//! | `vocab_size`, `max_len`, `d_model`, `d_ff`, `num_classes` | shared widths | `2000`, `128`, `64`, `256`, `2` |
//! | `teacher_layers`, `teacher_heads` | teacher shape | `2`, `4` |
//! | `student_layers`, `student_heads` | student shape | `1`, `2` |
//! | `attention` | `sparse` or `full` | `sparse` |
//! | `global_tokens`, `window`, `random_keys`, `mask_seed` | sparsity pattern | `1`, `4`, `2`, `0` |
//! | `teacher_epochs`, `student_epochs` | passes over the training split | `3`, `3` |
//! | `batch_size`, `learning_rate` | mini-batch Adam | `32`, `1e-3` |
//! | `beta1`, `beta2`, `epsilon` | Adam moments | `0.9`, `0.999`, `1e-8` |
//! | `seed` | parameter init and shuffling | `7` |
//! | `alpha` | weight of the supervised term when distilling | `0.5` |

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::attention::SparsityConfig;
use crate::distill::{DistillConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{AttentionMode, ModelConfig};

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Tsv {
        train: PathBuf,
        eval: Option<PathBuf>,
    },
    Synthetic {
        count: usize,
        seed: u64,
        noise: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub data: DataSource,
    pub eval_fraction: f64,
    pub teacher: ModelConfig,
    pub student: ModelConfig,
    pub teacher_train: TrainConfig,
    pub student_train: TrainConfig,
    pub alpha: f64,
}

impl RunConfig {
    pub fn desk() -> Self {
        let train = TrainConfig {
            epochs: 3,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 7,
            ..TrainConfig::default()
        };
        Self {
            output_dir: PathBuf::from("runs"),
            data: DataSource::Synthetic {
                count: 2000,
                seed: 7,
                noise: 0.05,
            },
            eval_fraction: 0.2,
            teacher: ModelConfig::desk_teacher(),
            student: ModelConfig::desk_student(),
            teacher_train: train.clone(),
            student_train: train,
            alpha: 0.5,
        }
    }

    pub fn distill_config(&self) -> DistillConfig {
        DistillConfig {
            alpha: self.alpha,
            train: self.student_train.clone(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::desk();
        let mut seen = HashSet::new();
        let mut train_data: Option<PathBuf> = None;
        let mut eval_data: Option<PathBuf> = None;
        let (mut synth_count, mut synth_seed, mut synth_noise) = (2000usize, 7u64, 0.05f64);
        let mut synth_keys = false;
        let mut attention = "sparse".to_string();
        let mut sparsity = SparsityConfig::new(1, 4, 2, 0);

        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let line_no = i + 1;
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: line_no,
                message: "expected key=value".into(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!(
                    "line {line_no}: duplicate key {key}"
                )));
            }
            let v = Value {
                key,
                value,
                line_no,
            };
            match key {
                "preset" => {
                    if value != "desk" {
                        return Err(Error::Config(format!(
                            "line {line_no}: unknown preset {value:?}"
                        )));
                    }
                }
                "output_dir" => cfg.output_dir = PathBuf::from(value),
                "train_data" => train_data = Some(PathBuf::from(value)),
                "eval_data" => eval_data = Some(PathBuf::from(value)),
                "synth_count" => (synth_count, synth_keys) = (v.parse()?, true),
                "synth_seed" => (synth_seed, synth_keys) = (v.parse()?, true),
                "synth_noise" => (synth_noise, synth_keys) = (v.parse()?, true),
                "eval_fraction" => cfg.eval_fraction = v.parse()?,
                "vocab_size" => both(&mut cfg, |m| &mut m.vocab_size, v.parse()?),
                "max_len" => both(&mut cfg, |m| &mut m.max_len, v.parse()?),
                "d_model" => both(&mut cfg, |m| &mut m.d_model, v.parse()?),
                "d_ff" => both(&mut cfg, |m| &mut m.d_ff, v.parse()?),
                "num_classes" => both(&mut cfg, |m| &mut m.num_classes, v.parse()?),
                "teacher_layers" => cfg.teacher.num_layers = v.parse()?,
                "teacher_heads" => cfg.teacher.num_heads = v.parse()?,
                "student_layers" => cfg.student.num_layers = v.parse()?,
                "student_heads" => cfg.student.num_heads = v.parse()?,
                "attention" => attention = value.to_string(),
                "global_tokens" => sparsity.global_tokens = v.parse()?,
                "window" => sparsity.window = v.parse()?,
                "random_keys" => sparsity.random_keys = v.parse()?,
                "mask_seed" => sparsity.seed = v.parse()?,
                "teacher_epochs" => cfg.teacher_train.epochs = v.parse()?,
                "student_epochs" => cfg.student_train.epochs = v.parse()?,
                "batch_size" => train_both(&mut cfg, |t| &mut t.batch_size, v.parse()?),
                "learning_rate" => train_both(&mut cfg, |t| &mut t.learning_rate, v.parse()?),
                "beta1" => train_both(&mut cfg, |t| &mut t.beta1, v.parse()?),
                "beta2" => train_both(&mut cfg, |t| &mut t.beta2, v.parse()?),
                "epsilon" => train_both(&mut cfg, |t| &mut t.epsilon, v.parse()?),
                "seed" => train_both(&mut cfg, |t| &mut t.seed, v.parse()?),
                "alpha" => cfg.alpha = v.parse()?,
                other => {
                    return Err(Error::Config(format!(
                        "line {line_no}: unknown key {other:?}"
                    )))
                }
            }
        }

        let mode = match attention.as_str() {
            "sparse" => AttentionMode::Sparse(sparsity),
            "full" => AttentionMode::Full,
            other => {
                return Err(Error::Config(format!(
                    "attention must be sparse or full, got {other:?}"
                )))
            }
        };
        cfg.teacher.attention = mode;
        cfg.student.attention = mode;

        cfg.data = match (train_data, synth_keys) {
            (Some(_), true) => {
                return Err(Error::Config(
                    "train_data and synth_* keys are mutually exclusive".into(),
                ))
            }
            (Some(train), false) => DataSource::Tsv {
                train,
                eval: eval_data,
            },
            (None, _) => {
                if eval_data.is_some() {
                    return Err(Error::Config("eval_data requires train_data".into()));
                }
                DataSource::Synthetic {
                    count: synth_count,
                    seed: synth_seed,
                    noise: synth_noise,
                }
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every value and that referenced input files exist.
    pub fn validate(&self) -> Result<()> {
        self.teacher.validate()?;
        self.student.validate()?;
        self.teacher_train.validate()?;
        self.distill_config().validate()?;
        if self.student.num_layers > self.teacher.num_layers
            || self.student.num_heads > self.teacher.num_heads
        {
            return Err(Error::Config(
                "student must not have more layers or heads than the teacher".into(),
            ));
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return Err(Error::Config(format!(
                "eval_fraction {} outside (0, 1)",
                self.eval_fraction
            )));
        }
        if let AttentionMode::Sparse(s) = self.teacher.attention {
            if s.global_tokens > self.teacher.max_len {
                return Err(Error::Config("global_tokens exceed max_len".into()));
            }
        }
        match &self.data {
            DataSource::Tsv { train, eval } => {
                for p in std::iter::once(train).chain(eval) {
                    if !p.is_file() {
                        return Err(Error::Config(format!(
                            "data file {} does not exist",
                            p.display()
                        )));
                    }
                }
            }
            DataSource::Synthetic { count, noise, .. } => {
                if *count < 2 || !(0.0..0.5).contains(noise) {
                    return Err(Error::Config(
                        "synth_count must be ≥ 2 and synth_noise in [0, 0.5)".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

struct Value<'a> {
    key: &'a str,
    value: &'a str,
    line_no: usize,
}

impl Value<'_> {
    fn parse<T: FromStr>(&self) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.value.parse().map_err(|e| {
            Error::Config(format!(
                "line {}: {} = {:?}: {e}",
                self.line_no, self.key, self.value
            ))
        })
    }
}

fn both<T: Copy>(cfg: &mut RunConfig, field: impl Fn(&mut ModelConfig) -> &mut T, value: T) {
    *field(&mut cfg.teacher) = value;
    *field(&mut cfg.student) = value;
}

fn train_both<T: Copy>(cfg: &mut RunConfig, field: impl Fn(&mut TrainConfig) -> &mut T, value: T) {
    *field(&mut cfg.teacher_train) = value;
    *field(&mut cfg.student_train) = value;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_the_desk_preset() {
        assert_eq!(
            RunConfig::parse("# nothing\n\n").unwrap(),
            RunConfig::desk()
        );
    }

    #[test]
    fn desk_preset_shapes() {
        let d = RunConfig::desk();
        assert_eq!((d.teacher.num_layers, d.teacher.num_heads), (2, 4));
        assert_eq!((d.student.num_layers, d.student.num_heads), (1, 2));
        assert_eq!(
            (
                d.teacher.d_model,
                d.teacher.d_ff,
                d.teacher.max_len,
                d.teacher.vocab_size
            ),
            (64, 256, 128, 2000)
        );
        assert_eq!(
            d.teacher.attention,
            AttentionMode::Sparse(SparsityConfig::new(1, 4, 2, 0))
        );
        assert_eq!(d.alpha, 0.5);
    }

    #[test]
    fn overrides_apply() {
        let cfg = RunConfig::parse("d_model=32\nattention=full\nalpha=1\nseed=3\n").unwrap();
        assert_eq!(cfg.student.d_model, 32);
        assert_eq!(cfg.teacher.attention, AttentionMode::Full);
        assert_eq!(cfg.alpha, 1.0);
        assert_eq!(cfg.student_train.seed, 3);
    }

    #[test]
    fn rejects_unknown_duplicate_and_bad_values() {
        assert!(matches!(
            RunConfig::parse("colour=blue"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::parse("seed=1\nseed=2"),
            Err(Error::Config(_))
        ));
        assert!(matches!(RunConfig::parse("alpha=2"), Err(Error::Config(_))));
        assert!(matches!(
            RunConfig::parse("batch_size=x"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::parse("student_layers=5"),
            Err(Error::Config(_))
        ));
        assert!(RunConfig::parse("no equals sign").is_err());
    }

    #[test]
    fn missing_data_file_is_a_config_error() {
        assert!(matches!(
            RunConfig::parse("train_data=/definitely/not/here.tsv"),
            Err(Error::Config(_))
        ));
    }
}
