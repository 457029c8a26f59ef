//! Teacher training and teacher → student logit distillation.
//!
//! The student objective is
//! `L = α·CE(labels, z_S) + (1 − α)·mean_batch ‖z_T − z_S‖²`
//! on raw logits, with the distance term added as a penalty. The squared
//! norm is summed over classes (not averaged), so it equals `C ×` per-class
//! MSE; the constant does not move any optimum.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::{batch_iter, EncodedBatch, Example, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{check_shapes, forward, forward_on_tape, init_params, ModelConfig, Parameters};
use crate::tensor::Tensor;

/// Mini-batch and Adam settings shared by both training phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 32,
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    /// Weight of the supervised term.
    pub alpha: f64,
    pub train: TrainConfig,
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        self.train.validate()
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::Config(format!("alpha {alpha} outside [0, 1]")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub distill: f64,
    pub combined: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub ce: f64,
    pub distill: f64,
    pub combined: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub accuracy: f64,
    pub wall_clock_seconds: f64,
    pub epochs: Vec<EpochLoss>,
    /// Per-batch losses in update order.
    #[serde(skip)]
    pub steps: Vec<LossBreakdown>,
}

impl TrainReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn ce_loss_on_tape(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

pub fn distill_loss_on_tape(tape: &mut Tape, student: Var, teacher: &Tensor) -> Result<Var> {
    tape.squared_distance(student, teacher)
}

/// Records `alpha·CE + (1−alpha)·distill` and returns its handle together
/// with the three scalar values.
pub fn combined_loss_on_tape(
    tape: &mut Tape,
    alpha: f64,
    student: Var,
    labels: &[usize],
    teacher: &Tensor,
) -> Result<(Var, LossBreakdown)> {
    check_alpha(alpha)?;
    let ce = ce_loss_on_tape(tape, student, labels)?;
    let distill = distill_loss_on_tape(tape, student, teacher)?;
    let weighted_ce = tape.scale(ce, alpha)?;
    let weighted_distill = tape.scale(distill, 1.0 - alpha)?;
    let combined = tape.add(weighted_ce, weighted_distill)?;
    let breakdown = LossBreakdown {
        ce: tape.value(ce).item()?,
        distill: tape.value(distill).item()?,
        combined: tape.value(combined).item()?,
    };
    Ok((combined, breakdown))
}

pub fn ce_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let z = tape.constant(logits.clone());
    let loss = ce_loss_on_tape(&mut tape, z, labels)?;
    tape.value(loss).item()
}

pub fn distill_loss(student: &Tensor, teacher: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let z = tape.constant(student.clone());
    let loss = distill_loss_on_tape(&mut tape, z, teacher)?;
    tape.value(loss).item()
}

pub fn combined_loss(
    alpha: f64,
    student: &Tensor,
    labels: &[usize],
    teacher: &Tensor,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let z = tape.constant(student.clone());
    Ok(combined_loss_on_tape(&mut tape, alpha, z, labels, teacher)?.1)
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: &TrainConfig, params: &Parameters) -> Self {
        let sizes: Vec<usize> = params.named().iter().map(|(_, t)| t.numel()).collect();
        Self {
            lr: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.epsilon,
            step: 0,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step as usize
    }

    /// Applies one update from the grad slots of `params`, then clears them.
    pub fn step(&mut self, params: &mut Parameters) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for ((t, m), v) in params
            .items_mut()
            .into_iter()
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            let Some(g) = t.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            for (((w, gi), mi), vi) in t
                .data_mut()
                .iter_mut()
                .zip(&g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            if t.data().iter().any(|w| !w.is_finite()) {
                return Err(Error::NonFinite { op: "adam" });
            }
            t.zero_grad();
        }
        Ok(())
    }
}

/// Fraction of examples whose argmax logit (lowest index on ties) equals the label.
pub fn evaluate(
    params: &Parameters,
    config: &ModelConfig,
    vocab: &Vocabulary,
    data: &[Example],
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0usize;
    for batch in batch_iter(data, vocab, config.max_len, 64, None)? {
        let batch = batch?;
        let logits = forward(params, config, &batch)?;
        correct += count_correct(&logits, &batch.labels);
    }
    Ok(correct as f64 / data.len() as f64)
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.cols();
    logits
        .data()
        .chunks_exact(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    argmax_rows(logits)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count()
}

/// Frozen model whose logits the student is pulled towards.
#[derive(Debug, Clone, Copy)]
pub struct Teacher<'a> {
    pub params: &'a Parameters,
    pub config: &'a ModelConfig,
}

struct Phase<'a> {
    teacher: Option<(Teacher<'a>, f64)>,
}

fn check_data(train: &[Example], eval: &[Example], classes: usize) -> Result<()> {
    if train.is_empty() || eval.is_empty() {
        return Err(Error::Data(
            "training and evaluation sets must be non-empty".into(),
        ));
    }
    if let Some(ex) = train.iter().chain(eval).find(|e| e.label >= classes) {
        return Err(Error::Data(format!(
            "label {} outside {classes} classes",
            ex.label
        )));
    }
    Ok(())
}

fn shuffle_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(epoch as u64 + 1)
}

fn fit(
    config: &ModelConfig,
    train_cfg: &TrainConfig,
    vocab: &Vocabulary,
    train: &[Example],
    eval: &[Example],
    phase: Phase<'_>,
) -> Result<(Parameters, TrainReport)> {
    config.validate()?;
    train_cfg.validate()?;
    check_data(train, eval, config.num_classes)?;
    if vocab.len() > config.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary of {} tokens exceeds vocab_size {}",
            vocab.len(),
            config.vocab_size
        )));
    }
    let started = Instant::now();
    let mut params = init_params(config, train_cfg.seed)?;
    let mut adam = Adam::new(train_cfg, &params);
    let mut epochs = Vec::with_capacity(train_cfg.epochs);
    let mut steps = Vec::new();

    for epoch in 0..train_cfg.epochs {
        let mut sum = LossBreakdown {
            ce: 0.0,
            distill: 0.0,
            combined: 0.0,
        };
        let mut batches = 0usize;
        let seed = shuffle_seed(train_cfg.seed, epoch);
        for batch in batch_iter(
            train,
            vocab,
            config.max_len,
            train_cfg.batch_size,
            Some(seed),
        )? {
            let batch = batch?;
            let losses = train_step(&mut params, &mut adam, config, &batch, &phase)?;
            sum.ce += losses.ce;
            sum.distill += losses.distill;
            sum.combined += losses.combined;
            batches += 1;
            steps.push(losses);
        }
        let n = batches as f64;
        epochs.push(EpochLoss {
            epoch: epoch + 1,
            ce: sum.ce / n,
            distill: sum.distill / n,
            combined: sum.combined / n,
        });
    }

    let accuracy = evaluate(&params, config, vocab, eval)?;
    let report = TrainReport {
        accuracy,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        epochs,
        steps,
    };
    Ok((params, report))
}

fn train_step(
    params: &mut Parameters,
    adam: &mut Adam,
    config: &ModelConfig,
    batch: &EncodedBatch,
    phase: &Phase<'_>,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, true);
    let logits = forward_on_tape(&mut tape, &vars, config, batch)?;
    let (loss, breakdown) = match &phase.teacher {
        Some((teacher, alpha)) => {
            let target = forward(teacher.params, teacher.config, batch)?;
            combined_loss_on_tape(&mut tape, *alpha, logits, &batch.labels, &target)?
        }
        None => {
            let ce = ce_loss_on_tape(&mut tape, logits, &batch.labels)?;
            let v = tape.value(ce).item()?;
            (
                ce,
                LossBreakdown {
                    ce: v,
                    distill: 0.0,
                    combined: v,
                },
            )
        }
    };
    let grads = tape.backward(loss)?;
    params.load_grads(&grads, &vars)?;
    adam.step(params)?;
    Ok(breakdown)
}

/// Supervised training on cross-entropy alone.
pub fn train_teacher(
    train: &[Example],
    eval: &[Example],
    vocab: &Vocabulary,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<(Parameters, TrainReport)> {
    fit(
        model_config,
        train_config,
        vocab,
        train,
        eval,
        Phase { teacher: None },
    )
}

/// Trains a freshly initialized student against the frozen teacher's logits.
pub fn distill_student(
    teacher: Teacher<'_>,
    student_config: &ModelConfig,
    train: &[Example],
    eval: &[Example],
    vocab: &Vocabulary,
    distill_config: &DistillConfig,
) -> Result<(Parameters, TrainReport)> {
    distill_config.validate()?;
    check_shapes(teacher.params, teacher.config)?;
    if teacher.config.vocab_size != student_config.vocab_size {
        return Err(Error::Config(format!(
            "teacher vocab_size {} differs from student {}",
            teacher.config.vocab_size, student_config.vocab_size
        )));
    }
    if teacher.config.num_classes != student_config.num_classes {
        return Err(Error::Config(format!(
            "teacher has {} classes, student {}",
            teacher.config.num_classes, student_config.num_classes
        )));
    }
    if teacher.config.max_len < student_config.max_len {
        return Err(Error::Config(
            "student max_len exceeds the teacher's".into(),
        ));
    }
    fit(
        student_config,
        &distill_config.train,
        vocab,
        train,
        eval,
        Phase {
            teacher: Some((teacher, distill_config.alpha)),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Tensor {
        Tensor::from_rows(&[v]).unwrap()
    }

    #[test]
    fn ce_uniform_logits() {
        let l = ce_loss(&row(&[0.0, 0.0]), &[0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(l, ce_loss(&row(&[0.0, 0.0]), &[1]).unwrap());
    }

    #[test]
    fn ce_saturated() {
        assert!(ce_loss(&row(&[30.0, -30.0]), &[0]).unwrap() <= 1e-9);
    }

    #[test]
    fn ce_direct_evaluation() {
        let expected = -(1f64.exp() / (1f64.exp() + (-1f64).exp())).ln();
        let l = ce_loss(&row(&[1.0, -1.0]), &[0]).unwrap();
        assert!((l - expected).abs() < 1e-12);
        assert!((l - 0.1269).abs() < 1e-4);
    }

    #[test]
    fn ce_label_out_of_range() {
        assert!(matches!(
            ce_loss(&row(&[1.0, -1.0]), &[2]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn distill_basic_values() {
        let z = row(&[0.3, -0.1]);
        assert_eq!(distill_loss(&z, &z).unwrap(), 0.0);
        assert_eq!(
            distill_loss(&row(&[0.0, 0.0]), &row(&[1.0, -1.0])).unwrap(),
            2.0
        );
        assert!(matches!(
            distill_loss(&row(&[0.0, 0.0]), &Tensor::zeros(&[2, 2])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn distill_gradient_is_analytic() {
        let mut tape = Tape::new();
        let zs = tape.param(row(&[0.0, 0.0]));
        let loss = distill_loss_on_tape(&mut tape, zs, &row(&[1.0, -1.0])).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(zs).unwrap(), &[-2.0, 2.0]);
    }

    #[test]
    fn combined_endpoints_and_hand_case() {
        let zs = row(&[0.4, -0.2]);
        let zb = row(&[1.0, -1.0]);
        let ce = ce_loss(&zs, &[0]).unwrap();
        let d = distill_loss(&zs, &zb).unwrap();
        assert_eq!(
            combined_loss(1.0, &zs, &[0], &zb)
                .unwrap()
                .combined
                .to_bits(),
            ce.to_bits()
        );
        assert_eq!(
            combined_loss(0.0, &zs, &[0], &zb)
                .unwrap()
                .combined
                .to_bits(),
            d.to_bits()
        );
        assert_eq!(combined_loss(0.0, &zb, &[1], &zb).unwrap().combined, 0.0);
        let hand = combined_loss(0.5, &row(&[0.0, 0.0]), &[0], &zb).unwrap();
        assert!((hand.combined - 1.3466).abs() < 1e-3, "{hand:?}");
    }

    #[test]
    fn combined_rejects_bad_alpha() {
        let z = row(&[0.0, 0.0]);
        assert!(matches!(
            combined_loss(1.5, &z, &[0], &z),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            combined_loss(-0.1, &z, &[0], &z),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(
            argmax_rows(&Tensor::from_rows(&[&[1.0, 1.0], &[0.0, 2.0]]).unwrap()),
            vec![0, 1]
        );
    }

    #[test]
    fn train_config_validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        assert!(TrainConfig {
            epochs: 0,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            batch_size: 0,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            learning_rate: 0.0,
            ..ok
        }
        .validate()
        .is_err());
    }
}
