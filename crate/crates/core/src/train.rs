//! Minibatch SGD training and distillation fine-tuning.
//!
//! Fine-tuning loss: `CE(y, p) + alpha * KL(q || p)`, where `p` is the
//! student's softmax output and `q` the frozen teacher's.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::capture::AttentionCapture;
use crate::criteria;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tape::{softmax_in_place, Tape, Var};
use crate::tensor::Tensor;
use crate::vit::VitModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-4,
            weight_decay: 1e-3,
            alpha: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.weight_decay >= 0.0) || !(self.alpha >= 0.0) {
            return Err(Error::Config("weight_decay and alpha must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    /// Mean over heads of the entropy of each head's epoch-averaged map.
    pub mean_entropy_per_layer: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// Cross-entropy plus `alpha` times `KL(teacher || student)`. With
/// `alpha == 0` this is exactly the cross-entropy node.
pub fn loss(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    teacher_logits: Option<&Tensor>,
    alpha: f64,
) -> Result<Var> {
    let ce = tape.cross_entropy(logits, labels)?;
    if alpha == 0.0 {
        return Ok(ce);
    }
    let teacher = teacher_logits
        .ok_or_else(|| Error::contract("distillation weight alpha > 0 needs teacher logits"))?;
    let q = softmax_rows(teacher);
    let log_p = tape.log_softmax_rows(logits)?;
    let kl = tape.kl_divergence(log_p, &q)?;
    let kl = tape.scale(kl, alpha);
    tape.add(ce, kl)
}

fn softmax_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    let n = t.last_dim();
    for row in out.data_mut().chunks_mut(n) {
        softmax_in_place(row);
    }
    out
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

pub fn predict_all(model: &VitModel, data: &Dataset, batch_size: usize) -> Result<Tensor> {
    let mut out = Vec::with_capacity(data.len() * model.spec.num_classes);
    for batch in data.batches(batch_size) {
        out.extend(model.predict(&batch?.images)?.into_data());
    }
    Tensor::new(vec![data.len(), model.spec.num_classes], out)
}

/// Top-1 accuracy in `[0, 1]`.
pub fn evaluate(model: &VitModel, data: &Dataset, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let logits = predict_all(model, data, batch_size)?;
    let correct = data
        .labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(logits.row(i)) == y)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Mean head entropy per layer of maps averaged over `data`, weights frozen.
pub fn measure_entropy(model: &VitModel, data: &Dataset, batch_size: usize) -> Result<Vec<f64>> {
    let mut capture = AttentionCapture::new(model);
    for batch in data.batches(batch_size) {
        let mut tape = Tape::new();
        model.forward(&mut tape, &batch?.images, Some(&mut capture))?;
    }
    criteria::mean_entropy_per_layer(&capture)
}

pub fn train(model: &mut VitModel, train: &Dataset, val: Option<&Dataset>, config: &TrainConfig) -> Result<TrainLog> {
    run(model, None, train, val, config)
}

/// Trains `student` with the distillation loss against the frozen
/// `teacher`. With `alpha == 0` the teacher is never consulted.
pub fn finetune(
    student: &mut VitModel,
    teacher: &VitModel,
    train: &Dataset,
    val: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<TrainLog> {
    if teacher.spec.num_classes != student.spec.num_classes {
        return Err(Error::contract("teacher and student disagree on the class count"));
    }
    run(student, Some(teacher), train, val, config)
}

fn run(
    model: &mut VitModel,
    teacher: Option<&VitModel>,
    data: &Dataset,
    val: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<TrainLog> {
    config.validate()?;
    let mut log = TrainLog::default();
    if config.epochs == 0 {
        return Ok(log);
    }
    if data.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    // Without a teacher the distillation term does not apply.
    let alpha = if teacher.is_some() { config.alpha } else { 0.0 };
    let teacher_logits = match teacher {
        Some(t) if alpha > 0.0 => Some(predict_all(t, data, config.batch_size)?),
        _ => None,
    };
    let decays: Vec<bool> = model.params().iter().map(|(_, t)| t.rank() >= 2).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 1..=config.epochs {
        let snapshot = model.clone();
        order.shuffle(&mut rng);
        let mut epoch_loss = f64::NAN;
        let outcome = (|| -> Result<EpochRecord> {
            let mut capture = AttentionCapture::new(model);
            let (mut loss_sum, mut correct) = (0.0, 0usize);
            for idx in order.chunks(config.batch_size) {
                let batch = data.subset(idx)?;
                let teacher_batch = teacher_logits.as_ref().map(|t| t.select_outer(idx)).transpose()?;
                let mut tape = Tape::new();
                let trace = model.forward(&mut tape, &batch.images, Some(&mut capture))?;
                let l = loss(&mut tape, trace.logits, &batch.labels, teacher_batch.as_ref(), alpha)?;
                let lv = tape.value(l).item();
                if !lv.is_finite() {
                    epoch_loss = lv;
                    return Err(Error::NumericInput("loss"));
                }
                loss_sum += lv * idx.len() as f64;
                let logits = tape.value(trace.logits);
                correct += batch
                    .labels
                    .iter()
                    .enumerate()
                    .filter(|&(i, &y)| argmax(logits.row(i)) == y)
                    .count();
                tape.backward(l)?;
                let grads: Vec<Option<Tensor>> = trace.params.iter().map(|&p| tape.grad(p).cloned()).collect();
                for ((param, grad), &decay) in model.params_mut().into_iter().zip(grads).zip(&decays) {
                    let Some(grad) = grad else { continue };
                    let wd = if decay { config.weight_decay } else { 0.0 };
                    for (w, g) in param.data_mut().iter_mut().zip(grad.data()) {
                        *w -= config.learning_rate * (g + wd * *w);
                    }
                }
            }
            if !model.params().iter().all(|(_, t)| t.all_finite()) {
                return Err(Error::NumericInput("parameters"));
            }
            let val_acc = val.map(|v| evaluate(model, v, config.batch_size)).transpose()?;
            Ok(EpochRecord {
                epoch,
                loss: loss_sum / data.len() as f64,
                train_acc: correct as f64 / data.len() as f64,
                val_acc,
                mean_entropy_per_layer: criteria::mean_entropy_per_layer(&capture)?,
            })
        })();
        match outcome {
            Ok(record) => log.records.push(record),
            // Any non-finite value means the weights blew up; keep the last
            // good epoch.
            Err(Error::NumericInput(_)) => {
                *model = snapshot;
                return Err(Error::Divergence { epoch, loss: epoch_loss });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_zero_is_plain_cross_entropy() {
        let mut tape = Tape::new();
        let logits = tape.param(&Tensor::from_rows(&[&[0.2, -0.4, 1.0]]));
        let l = loss(&mut tape, logits, &[1], None, 0.0).unwrap();
        let ce = tape.cross_entropy(logits, &[1]).unwrap();
        assert_eq!(tape.value(l).item(), tape.value(ce).item());
    }

    #[test]
    fn alpha_without_teacher_is_rejected() {
        let mut tape = Tape::new();
        let logits = tape.param(&Tensor::from_rows(&[&[0.2, -0.4]]));
        assert!(matches!(loss(&mut tape, logits, &[0], None, 0.5), Err(Error::Contract(_))));
    }

    #[test]
    fn identical_teacher_adds_nothing() {
        let t = Tensor::from_rows(&[&[0.2, -0.4, 1.0], &[3.0, 0.0, -1.0]]);
        let mut tape = Tape::new();
        let logits = tape.param(&t);
        let l = loss(&mut tape, logits, &[2, 0], Some(&t), 0.7).unwrap();
        let ce = tape.cross_entropy(logits, &[2, 0]).unwrap();
        assert!((tape.value(l).item() - tape.value(ce).item()).abs() < 1e-12);
    }

    #[test]
    fn uniform_student_costs_ln_classes() {
        let mut tape = Tape::new();
        let logits = tape.param(&Tensor::zeros(vec![1, 4]));
        let l = loss(&mut tape, logits, &[3], None, 0.0).unwrap();
        assert!((tape.value(l).item() - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
