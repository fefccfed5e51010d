//! Single-fold training loop: AdamW with decoupled weight decay, cosine
//! learning-rate decay to a tenth of the initial rate, per-epoch validation,
//! and best-validation-accuracy checkpointing.

use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::ParameterArchive;
use crate::datapipe::augment::{augment_train, preprocess_eval, AugmentConfig};
use crate::datapipe::image::{Label, LabeledImage};
use crate::error::{Error, Result};
use crate::fgd::Model;
use crate::nn::Ctx;
use crate::trainer::metrics::{compute_metrics, ConfusionCounts, MetricsReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub learning_rate: f64,
    /// Decoupled (AdamW) weight decay.
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Final learning rate as a fraction of the initial one.
    pub final_lr_ratio: f64,
    pub seed: u64,
    pub augment: bool,
    /// Optional per-class loss weights `[positive, negative]`.
    pub class_weights: Option<[f64; 2]>,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            learning_rate: 6e-5,
            weight_decay: 0.05,
            epochs: 50,
            batch_size: 8,
            final_lr_ratio: 0.1,
            seed: 0,
            augment: true,
            class_weights: None,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("need learning_rate > 0, epochs >= 1, batch_size >= 1".into()));
        }
        if !(self.weight_decay >= 0.0) || !(self.final_lr_ratio > 0.0 && self.final_lr_ratio <= 1.0) {
            return Err(Error::Config("invalid weight decay or final lr ratio".into()));
        }
        Ok(())
    }

    /// Cosine annealing from `learning_rate` (epoch 0) to
    /// `learning_rate * final_lr_ratio` (last epoch).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let lo = self.learning_rate * self.final_lr_ratio;
        if self.epochs <= 1 {
            return self.learning_rate;
        }
        let t = epoch.min(self.epochs - 1) as f64 / (self.epochs - 1) as f64;
        lo + (self.learning_rate - lo) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub counts: ConfusionCounts,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResults {
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub checkpoints_saved: usize,
    pub train: SplitResult,
    pub validate: SplitResult,
    pub test: Option<SplitResult>,
    pub epochs: Vec<EpochRecord>,
    pub checkpoint: Option<PathBuf>,
}

pub struct FoldData<'a> {
    pub train: Vec<&'a LabeledImage>,
    pub val: Vec<&'a LabeledImage>,
    pub test: Vec<&'a LabeledImage>,
}

/// Where a fold writes its checkpoint and epoch log.
#[derive(Debug, Clone, Default)]
pub struct FoldOutputs {
    pub checkpoint: Option<PathBuf>,
    pub epoch_log: Option<PathBuf>,
}

/// Index of the winning class; exact ties go to the higher index, so a
/// binary 0.5/0.5 output is negative.
pub fn predict_row(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v >= row[best] {
            best = i;
        }
    }
    best
}

fn stack(tensors: Vec<Tensor>) -> Result<Tensor> {
    Ok(Tensor::stack(&tensors, 0)?)
}

fn eval_batches(images: &[&LabeledImage], aug: &AugmentConfig, batch: usize) -> Result<Vec<(Tensor, Vec<Label>)>> {
    images
        .chunks(batch)
        .map(|chunk| {
            let ts = chunk.iter().map(|i| preprocess_eval(&i.pixels, aug)).collect::<Result<Vec<_>>>()?;
            Ok((stack(ts)?, chunk.iter().map(|i| i.label).collect()))
        })
        .collect()
}

fn tally(probs: &Tensor, labels: &[Label], counts: &mut ConfusionCounts) -> Result<()> {
    let rows = probs.to_dtype(DType::F32)?.to_vec2::<f32>()?;
    for (row, label) in rows.iter().zip(labels) {
        counts.record(*label == Label::Positive, predict_row(row) == Label::Positive.index());
    }
    Ok(())
}

fn evaluate_batches(model: &Model, batches: &[(Tensor, Vec<Label>)]) -> Result<ConfusionCounts> {
    let ctx = Ctx::eval();
    let mut counts = ConfusionCounts::default();
    for (x, labels) in batches {
        tally(&model.forward(x, &ctx)?, labels, &mut counts)?;
    }
    Ok(counts)
}

/// Confusion counts of `model` over `images` with the evaluation transform.
pub fn evaluate(model: &Model, images: &[&LabeledImage], aug: &AugmentConfig, batch: usize) -> Result<ConfusionCounts> {
    if images.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    evaluate_batches(model, &eval_batches(images, aug, batch.max(1))?)
}

fn split_result(counts: ConfusionCounts) -> Result<SplitResult> {
    Ok(SplitResult {
        metrics: compute_metrics(&counts)?,
        counts,
    })
}

/// Mean cross-entropy of softmax(logits) against integer targets.
pub fn cross_entropy(logits: &Tensor, targets: &[usize], class_weights: Option<[f64; 2]>) -> Result<Tensor> {
    let (b, k) = logits.dims2()?;
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let log_norm = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    let log_probs = shifted.broadcast_sub(&log_norm)?;
    let mut weights = vec![0f64; b * k];
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let w = class_weights.map_or(1.0, |cw| cw.get(t).copied().unwrap_or(1.0));
        weights[i * k + t] = w;
        total += w;
    }
    let weights = Tensor::from_vec(weights, (b, k), &Device::Cpu)?.to_dtype(logits.dtype())?;
    Ok((log_probs.mul(&weights)?.sum_all()?.neg()? / total)?)
}

fn write_epoch_log(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from("epoch,lr,train_loss,train_acc,val_acc\n");
    for r in records {
        text.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.lr, r.train_loss, r.train_acc, r.val_acc));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Trains `model` in place, then restores the best-validation checkpoint and
/// reports train/validation/test metrics for it.
pub fn train_fold(
    model: &Model,
    data: &FoldData<'_>,
    hp: &Hyperparams,
    aug: &AugmentConfig,
    outputs: &FoldOutputs,
) -> Result<FoldResults> {
    hp.validate()?;
    aug.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Data("fold needs non-empty train and validation sets".into()));
    }
    let mut opt = AdamW::new(
        model.store().trainable_vars(),
        ParamsAdamW {
            lr: hp.learning_rate,
            weight_decay: hp.weight_decay,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let val_batches = eval_batches(&data.val, aug, hp.batch_size)?;
    let cached_train: Option<Vec<Tensor>> = if hp.augment {
        None
    } else {
        Some(data.train.iter().map(|i| preprocess_eval(&i.pixels, aug)).collect::<Result<_>>()?)
    };

    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut records = Vec::with_capacity(hp.epochs);
    let mut best: Option<(usize, f64, ParameterArchive)> = None;
    let mut saved = 0;
    for epoch in 0..hp.epochs {
        let lr = hp.lr_at(epoch);
        opt.set_learning_rate(lr);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for (bi, idx) in order.chunks(hp.batch_size).enumerate() {
            let inputs = idx
                .iter()
                .map(|&i| match &cached_train {
                    Some(c) => Ok(c[i].clone()),
                    None => augment_train(&data.train[i].pixels, aug, &mut rng),
                })
                .collect::<Result<Vec<_>>>()?;
            let x = stack(inputs)?;
            let targets: Vec<usize> = idx.iter().map(|&i| data.train[i].label.index()).collect();
            let ctx = Ctx::train(rand::Rng::gen(&mut rng));
            let logits = model.logits(&x, &ctx)?;
            let loss = cross_entropy(&logits, &targets, hp.class_weights)?;
            let lv = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !lv.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            opt.backward_step(&loss)?;
            let rows = logits.detach().to_dtype(DType::F32)?.to_vec2::<f32>()?;
            correct += rows.iter().zip(&targets).filter(|(r, t)| predict_row(r) == **t).count();
            loss_sum += lv * idx.len() as f64;
            seen += idx.len();
        }
        let val_acc = evaluate_batches(model, &val_batches)?.accuracy().unwrap_or(0.0);
        records.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            val_acc,
        });
        log::info!(
            "epoch {epoch}: lr {lr:.3e} loss {:.4} train acc {:.4} val acc {val_acc:.4}",
            loss_sum / seen as f64,
            correct as f64 / seen as f64
        );
        if best.as_ref().is_none_or(|(_, acc, _)| val_acc > *acc) {
            let ckpt = model.checkpoint()?;
            if let Some(path) = &outputs.checkpoint {
                ckpt.save(path)?;
            }
            saved += 1;
            best = Some((epoch, val_acc, ckpt));
        }
        if let Some(path) = &outputs.epoch_log {
            write_epoch_log(path, &records)?;
        }
    }

    let (best_epoch, best_val_acc, ckpt) = best.expect("at least one epoch");
    model.load_checkpoint(&ckpt)?;
    let test = if data.test.is_empty() {
        None
    } else {
        Some(split_result(evaluate(model, &data.test, aug, hp.batch_size)?)?)
    };
    Ok(FoldResults {
        best_epoch,
        best_val_acc,
        checkpoints_saved: saved,
        train: split_result(evaluate(model, &data.train, aug, hp.batch_size)?)?,
        validate: split_result(evaluate_batches(model, &val_batches)?)?,
        test,
        epochs: records,
        checkpoint: outputs.checkpoint.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let hp = Hyperparams::default();
        assert!((hp.lr_at(0) - 6e-5).abs() < 1e-9);
        assert!((hp.lr_at(hp.epochs - 1) - 6e-6).abs() < 1e-9);
        let mid = hp.lr_at(hp.epochs / 2);
        assert!(mid < 6e-5 && mid > 6e-6);
    }

    #[test]
    fn schedule_is_monotone() {
        let hp = Hyperparams { epochs: 7, ..Default::default() };
        let lrs: Vec<f64> = (0..7).map(|e| hp.lr_at(e)).collect();
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn ties_go_negative() {
        assert_eq!(predict_row(&[0.5, 0.5]), Label::Negative.index());
        assert_eq!(predict_row(&[1.0, 0.0]), Label::Positive.index());
        assert_eq!(predict_row(&[0.2, 0.8]), Label::Negative.index());
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let logits = Tensor::zeros((3, 2), DType::F64, &Device::Cpu).unwrap();
        let l = cross_entropy(&logits, &[0, 1, 1], None).unwrap().to_scalar::<f64>().unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn class_weights_reweight_mean() {
        let logits = Tensor::new(&[[2.0f64, 0.0], [0.0, 0.0]], &Device::Cpu).unwrap();
        let l = cross_entropy(&logits, &[0, 1], Some([3.0, 1.0])).unwrap().to_scalar::<f64>().unwrap();
        let a = -(2f64.exp() / (2f64.exp() + 1.0)).ln();
        let b = 2f64.ln();
        assert!((l - (3.0 * a + b) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_hyperparams() {
        assert!(Hyperparams { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(Hyperparams { epochs: 0, ..Default::default() }.validate().is_err());
    }
}
