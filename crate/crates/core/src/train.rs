//! Cross-entropy training with Adam, and evaluation.
//!
//! Each mini-batch runs one tape per sample in parallel; the per-sample
//! gradients are summed in sample order, so results do not depend on the
//! thread count.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::backbone::{MetaInput, Model};
use crate::config::FusionMode;
use crate::dataset::{balance_by_augmentation, Sample, Split};
use crate::error::{Error, Result};
use crate::fusion::{mask_probability, mask_seed, sample_key, sample_meta_mask, splitmix, MaskSchedule, MetaMask};
use crate::metrics::{precision, roc_auc, sensitivity, specificity, ConfusionMatrix, Rate, RocPoint};
use crate::params::ParamStore;
use crate::tensor::Tensor;

fn default_epochs() -> usize {
    10
}
fn default_batch() -> usize {
    8
}
fn default_lr() -> f64 {
    3e-4
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    /// Seeds shuffling and meta masking.
    #[serde(default)]
    pub seed: u64,
    /// Also save a checkpoint every this many epochs (0 = best only).
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Top up minority classes of the training split by augmentation.
    #[serde(default)]
    pub balance: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return fail("train.epochs must be ≥ 1".into());
        }
        if self.batch_size == 0 {
            return fail("train.batch_size must be ≥ 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("train.learning_rate must be ≥ 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail(format!(
                "Adam betas must lie in [0, 1), got ({}, {})",
                self.beta1, self.beta2
            ));
        }
        if !(self.adam_eps > 0.0) {
            return fail(format!("train.adam_eps must be > 0, got {}", self.adam_eps));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

/// One bias-corrected Adam update of every parameter that has a gradient.
pub fn adam_step(params: &mut ParamStore, grads: &ParamStore, state: &mut AdamState, hp: AdamParams) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (name, g) in grads.iter() {
        let p = params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("`{name}`: parameter {:?} vs gradient {:?}", p.shape(), g.shape()),
            ));
        }
        let n = g.numel();
        let m = state.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
            *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
        }
    }
    Ok(())
}

struct SampleResult {
    loss: f64,
    correct: bool,
    probs: Vec<f64>,
    predicted: usize,
    grads: Option<ParamStore>,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn run_sample(model: &Model, sample: &Sample, mask: MetaMask, with_grads: bool) -> Result<SampleResult> {
    let mut tape = Tape::new();
    let meta = match model.config.fusion {
        FusionMode::VisionOnly => MetaInput::Absent,
        _ => MetaInput::Record {
            record: &sample.meta,
            mask,
        },
    };
    let out = model.forward(&mut tape, &sample.image, meta)?;
    let loss = tape.cross_entropy(out.logits, sample.label)?;
    let logits = tape.value(out.logits).data().to_vec();
    let predicted = argmax(&logits);
    let grads = if with_grads {
        Some(tape.backward(loss)?.to_store(&model.params))
    } else {
        None
    };
    Ok(SampleResult {
        loss: tape.value(loss).item()?,
        correct: predicted == sample.label,
        probs: softmax(&logits),
        predicted,
        grads,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub mask_p: f64,
}

pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Parameters from the epoch with the best validation accuracy (ties: lower loss, then earlier).
    pub best: Model,
    pub best_epoch: usize,
    /// Parameters after the last epoch.
    pub last: Model,
}

fn loss_and_accuracy(model: &Model, samples: &[&Sample]) -> Result<(f64, f64)> {
    let results: Vec<SampleResult> = samples
        .par_iter()
        .map(|s| run_sample(model, s, MetaMask::NONE, false))
        .collect::<Result<_>>()?;
    let n = results.len() as f64;
    let loss = results.iter().map(|r| r.loss).sum::<f64>() / n;
    let acc = results.iter().filter(|r| r.correct).count() as f64 / n;
    Ok((loss, acc))
}

/// Trains `model` on the train split of `samples`, validating on the val
/// split after every epoch. `on_epoch` sees each record and the current model.
pub fn train(
    model: &Model,
    samples: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &Model) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.config.validate()?;
    let k = model.config.num_classes;
    for s in samples {
        s.validate(k)?;
        model.check_image(&s.image)?;
    }
    let mut train_set: Vec<Sample> = samples.iter().filter(|s| s.split == Some(Split::Train)).cloned().collect();
    let val_set: Vec<&Sample> = samples.iter().filter(|s| s.split == Some(Split::Val)).collect();
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Validation(format!(
            "training needs non-empty train and val splits, got {} and {}",
            train_set.len(),
            val_set.len()
        )));
    }
    if cfg.balance {
        let mut counts = vec![0usize; k];
        for s in &train_set {
            counts[s.label] += 1;
        }
        let target = counts.iter().copied().max().unwrap_or(0);
        train_set = balance_by_augmentation(&train_set, k, target, cfg.seed)?;
    }
    let schedule = MaskSchedule::new(model.config.mask_p_start, model.config.mask_p_end, cfg.epochs)?;
    let early = model.config.fusion == FusionMode::Early;
    let hp = cfg.adam();

    let mut current = model.clone();
    let mut state = AdamState::default();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, f64, usize, Model)> = None;

    for epoch in 0..cfg.epochs {
        let mask_p = if early { mask_probability(&schedule, epoch)? } else { 0.0 };
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(splitmix(cfg.seed ^ splitmix(epoch as u64))));

        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<SampleResult> = batch
                .par_iter()
                .map(|&i| {
                    let s = &train_set[i];
                    let mask = if early {
                        sample_meta_mask(mask_p, mask_seed(cfg.seed, sample_key(&s.id), epoch))
                    } else {
                        MetaMask::NONE
                    };
                    run_sample(&current, s, mask, true)
                })
                .collect::<Result<_>>()?;
            let mut total: Option<ParamStore> = None;
            for r in results {
                loss_sum += r.loss;
                correct += r.correct as usize;
                let g = r.grads.expect("requested");
                match total.as_mut() {
                    None => total = Some(g),
                    Some(t) => {
                        for (name, acc) in t.iter_mut() {
                            let add = g.get(name).expect("same manifest");
                            for (a, b) in acc.data_mut().iter_mut().zip(add.data()) {
                                *a += b;
                            }
                        }
                    }
                }
            }
            let mut grads = total.expect("non-empty batch");
            let scale = 1.0 / batch.len() as f64;
            for (_, g) in grads.iter_mut() {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
            adam_step(&mut current.params, &grads, &mut state, hp)?;
        }

        let n = train_set.len() as f64;
        let (val_loss, val_acc) = loss_and_accuracy(&current, &val_set)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            val_loss,
            val_acc,
            mask_p,
        };
        on_epoch(&record, &current)?;
        let improves = match &best {
            None => true,
            Some((acc, loss, _, _)) => val_acc > *acc || (val_acc == *acc && val_loss < *loss),
        };
        if improves {
            best = Some((val_acc, val_loss, epoch, current.clone()));
        }
        history.push(record);
    }
    let (_, _, best_epoch, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        history,
        best,
        best_epoch,
        last: current,
    })
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in history {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Json {
            context: "history record".into(),
            source: e,
        })?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: usize,
    pub support: u64,
    pub sensitivity: Rate,
    pub specificity: Rate,
    pub precision: Rate,
    /// One-vs-rest AUC of the softmax score; undefined when the class or its
    /// complement is absent.
    pub auc: Rate,
    pub roc: Vec<RocPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_samples: usize,
    pub num_classes: usize,
    pub fusion: FusionMode,
    pub accuracy: f64,
    pub loss: f64,
    pub confusion: ConfusionMatrix,
    pub per_class: Vec<ClassReport>,
}

/// Argmax predictions, metrics and one-vs-rest ROC for `samples`, with
/// metadata fed in full when the model fuses it.
pub fn evaluate(model: &Model, samples: &[&Sample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Validation("cannot evaluate an empty sample list".into()));
    }
    let k = model.config.num_classes;
    for s in samples {
        s.validate(k)?;
        model.check_image(&s.image)?;
    }
    let results: Vec<SampleResult> = samples
        .par_iter()
        .map(|s| run_sample(model, s, MetaMask::NONE, false))
        .collect::<Result<_>>()?;
    let cm = ConfusionMatrix::from_pairs(k, samples.iter().zip(&results).map(|(s, r)| (s.label, r.predicted)))?;
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let scores: Vec<f64> = results.iter().map(|r| r.probs[c]).collect();
        let labels: Vec<bool> = samples.iter().map(|s| s.label == c).collect();
        let (auc, roc) = match roc_auc(&scores, &labels) {
            Ok(curve) => (Rate::Defined(curve.auc), curve.points),
            Err(_) => (Rate::Undefined, Vec::new()),
        };
        per_class.push(ClassReport {
            class: c,
            support: cm.counts[c].iter().sum(),
            sensitivity: sensitivity(&cm, c),
            specificity: specificity(&cm, c),
            precision: precision(&cm, c),
            auc,
            roc,
        });
    }
    Ok(EvalReport {
        num_samples: samples.len(),
        num_classes: k,
        fusion: model.config.fusion,
        accuracy: cm.trace() as f64 / cm.total() as f64,
        loss: results.iter().map(|r| r.loss).sum::<f64>() / results.len() as f64,
        confusion: cm,
        per_class,
    })
}

/// Softmax class probabilities for one image.
pub fn predict_proba(model: &Model, image: &Tensor, meta: MetaInput<'_>) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, image, meta)?;
    Ok(softmax(tape.value(out.logits).data()))
}
