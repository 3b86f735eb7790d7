//! Training on poisoned mixtures. The data-outsourcing loss is plain
//! cross-entropy over the relabeled mixture; the model-outsourcing loss adds
//! a momentum-center regularizer that pulls dirty features onto the target
//! class center and cover features onto their true class centers, with
//! centers tracked from clean samples only.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{FeatureSplitClassifier, ModelConfig, ParamGrads};
use crate::nn::cross_entropy;
use crate::poison::{PoisonedDataset, SampleTag};
use crate::seed::{rng_from, substream};
use crate::trigger::{apply_trigger, TriggerSpec};
use crate::Image;

/// Per-class feature centers with momentum updates from clean samples.
#[derive(Debug, Clone)]
pub struct CenterBank {
    pub centers: Array2<f64>,
    pub momentum: f64,
    pub initialized: Vec<bool>,
}

impl CenterBank {
    pub fn new(num_classes: usize, feature_dim: usize, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::contract(format!(
                "center momentum must lie in [0, 1], got {momentum}"
            )));
        }
        Ok(Self {
            centers: Array2::zeros((num_classes, feature_dim)),
            momentum,
            initialized: vec![false; num_classes],
        })
    }

    pub fn num_classes(&self) -> usize {
        self.initialized.len()
    }

    /// `C_i ← m·C_i + (1−m)·f_i` per clean sample, in the given order. An
    /// uninitialized center is set to the first feature of its class.
    pub fn update(&mut self, clean_features: &[Array1<f64>], clean_labels: &[usize]) -> Result<()> {
        if clean_features.len() != clean_labels.len() {
            return Err(Error::contract("features/labels length mismatch"));
        }
        for (f, &y) in clean_features.iter().zip(clean_labels.iter()) {
            if y >= self.num_classes() {
                return Err(Error::contract(format!(
                    "label {y} out of range for {} centers",
                    self.num_classes()
                )));
            }
            if f.len() != self.centers.ncols() {
                return Err(Error::contract("feature dimension mismatch"));
            }
            let mut center = self.centers.row_mut(y);
            if !self.initialized[y] {
                center.assign(f);
                self.initialized[y] = true;
            } else {
                let m = self.momentum;
                center.zip_mut_with(f, |c, &fv| *c = m * *c + (1.0 - m) * fv);
            }
        }
        Ok(())
    }

    pub fn center(&self, class: usize) -> Result<ndarray::ArrayView1<'_, f64>> {
        if class >= self.num_classes() {
            return Err(Error::contract(format!("class {class} out of range")));
        }
        if !self.initialized[class] {
            return Err(Error::UninitializedCenter { class });
        }
        Ok(self.centers.row(class))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Attacker only controls the data; plain cross-entropy training.
    DataOutsourcing,
    /// Attacker controls training; adds the momentum-center regularizer.
    ModelOutsourcing,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub scenario: Scenario,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the center regularizer in the total loss.
    pub center_weight: f64,
    /// Momentum of the center updates.
    pub center_momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::DataOutsourcing,
            epochs: 100,
            batch_size: 128,
            learning_rate: 0.1,
            center_weight: 1.0,
            center_momentum: 0.99,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::contract("epochs and batch_size must be >= 1"));
        }
        if self.center_weight < 0.0 {
            return Err(Error::contract("center_weight must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.center_momentum) {
            return Err(Error::contract("center_momentum must lie in [0, 1]"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::contract("learning_rate must be > 0"));
        }
        Ok(())
    }
}

/// One training sample as the loss functions see it.
#[derive(Debug, Clone, Copy)]
pub struct BatchSample<'a> {
    pub image: &'a Image,
    pub label: usize,
    pub tag: SampleTag,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepLoss {
    pub epoch: usize,
    pub batch: usize,
    pub total: f64,
    pub do_loss: f64,
    pub mc_loss: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochLoss {
    pub total: f64,
    pub do_loss: f64,
    pub mc_loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<EpochLoss>,
    pub step_losses: Vec<StepLoss>,
    /// Clean-data accuracy (%) on the evaluation set, when one was given.
    pub cda: Option<f64>,
    /// Attack success rate (%) on the evaluation set, when a trigger was
    /// given and the run actually poisons.
    pub asr: Option<f64>,
    pub checkpoint_path: Option<PathBuf>,
    pub config: TrainConfig,
    /// Final class centers (model-outsourcing runs only).
    #[serde(skip)]
    pub final_centers: Option<Array2<f64>>,
}

/// Cross-entropy of the relabeled mixture, averaged over the batch. The
/// provenance split contributes nothing here beyond the labels already
/// reflecting it; summing the clean/dirty/cover subsets separately gives the
/// same number.
pub fn loss_do(model: &FeatureSplitClassifier, batch: &[BatchSample<'_>]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::contract("loss_do: empty batch"));
    }
    let total: f64 = batch
        .par_iter()
        .map(|s| {
            let trace = model.forward_trace(s.image)?;
            Ok(cross_entropy(&trace.logits, s.label).0)
        })
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .sum();
    Ok(total / batch.len() as f64)
}

fn mse(a: &Array1<f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = x - y;
        acc += d * d;
    }
    acc / a.len() as f64
}

/// Center-matching loss: dirty features against the target-class center,
/// cover features against their true-class centers, averaged over the
/// poisoned samples. Empty input gives 0.
pub fn loss_mc(
    dirty_features: &[Array1<f64>],
    cover_features: &[Array1<f64>],
    cover_true_labels: &[usize],
    bank: &CenterBank,
    target_label: usize,
) -> Result<f64> {
    if cover_features.len() != cover_true_labels.len() {
        return Err(Error::contract("cover features/labels length mismatch"));
    }
    let n = dirty_features.len() + cover_features.len();
    if n == 0 {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    if !dirty_features.is_empty() {
        let target_center = bank.center(target_label)?;
        for f in dirty_features {
            acc += mse(f, target_center);
        }
    }
    for (f, &y) in cover_features.iter().zip(cover_true_labels.iter()) {
        acc += mse(f, bank.center(y)?);
    }
    Ok(acc / n as f64)
}

/// Combined loss `loss_do + weight * loss_mc` over one provenance-tagged
/// batch. `weight = 0` skips the center terms entirely.
pub fn loss_mo(
    model: &FeatureSplitClassifier,
    batch: &[BatchSample<'_>],
    bank: &CenterBank,
    target_label: usize,
    weight: f64,
) -> Result<f64> {
    let do_part = loss_do(model, batch)?;
    if weight == 0.0 {
        return Ok(do_part);
    }
    let mut dirty = Vec::new();
    let mut cover = Vec::new();
    let mut cover_labels = Vec::new();
    for s in batch {
        match s.tag {
            SampleTag::Dirty => dirty.push(model.features(s.image)?),
            SampleTag::Cover => {
                cover.push(model.features(s.image)?);
                cover_labels.push(s.label);
            }
            SampleTag::Clean => {}
        }
    }
    let mc_part = loss_mc(&dirty, &cover, &cover_labels, bank, target_label)?;
    Ok(do_part + weight * mc_part)
}

/// Observation hook for training internals (used by tests to audit the
/// center recursion). The default implementation ignores everything.
pub trait TrainObserver {
    /// Called once per center update batch with `(label, feature)` pairs in
    /// exactly the order they entered the momentum recursion.
    fn on_center_updates(&mut self, _updates: &[(usize, Array1<f64>)]) {}
}

impl TrainObserver for () {}

/// Records the clean-feature stream; replaying it through a fresh
/// [`CenterBank`] must reproduce training's final centers.
#[derive(Debug, Default)]
pub struct CenterAudit {
    pub stream: Vec<(usize, Array1<f64>)>,
}

impl TrainObserver for CenterAudit {
    fn on_center_updates(&mut self, updates: &[(usize, Array1<f64>)]) {
        self.stream.extend_from_slice(updates);
    }
}

/// Evaluation inputs for the end-of-training report.
#[derive(Debug, Clone, Copy)]
pub struct EvalContext<'a> {
    pub test_set: &'a LabeledDataset,
    pub trigger: Option<&'a TriggerSpec>,
}

pub fn train_backdoored_model(
    dataset: &PoisonedDataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    eval: Option<EvalContext<'_>>,
) -> Result<(FeatureSplitClassifier, TrainReport)> {
    train_backdoored_model_observed(dataset, model_cfg, train_cfg, eval, &mut ())
}

/// Training loop: seeded shuffling into fixed-size batches; per batch the
/// forward traces are computed, centers are updated from the batch's clean
/// members (model outsourcing), and one SGD step is taken on the combined
/// loss. Aborts with diagnostics on a non-finite loss.
pub fn train_backdoored_model_observed(
    dataset: &PoisonedDataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    eval: Option<EvalContext<'_>>,
    observer: &mut dyn TrainObserver,
) -> Result<(FeatureSplitClassifier, TrainReport)> {
    train_cfg.validate()?;
    model_cfg.validate()?;
    if dataset.total_len() == 0 {
        return Err(Error::contract("cannot train on an empty dataset"));
    }
    let target_label = dataset
        .dirty
        .first()
        .map(|(_, y)| *y)
        .unwrap_or(usize::MAX);
    let mut model = FeatureSplitClassifier::init(model_cfg.clone())?;
    let use_centers = train_cfg.scenario == Scenario::ModelOutsourcing;
    let mut bank = CenterBank::new(
        dataset.num_classes,
        model_cfg.feature_dim,
        train_cfg.center_momentum,
    )?;

    if use_centers {
        // Warm-up: seed every class center from its first clean sample so the
        // center terms of the very first batches are well-defined.
        let mut warm: Vec<(usize, Array1<f64>)> = Vec::new();
        let mut pending: Vec<bool> = vec![true; dataset.num_classes];
        for (img, label) in dataset.clean.samples() {
            if pending[label] {
                pending[label] = false;
                warm.push((label, model.features(img)?));
                if !pending.iter().any(|&p| p) {
                    break;
                }
            }
        }
        let (labels, feats): (Vec<usize>, Vec<Array1<f64>>) = warm.iter().cloned().unzip();
        bank.update(&feats, &labels)?;
        observer.on_center_updates(&warm);
    }

    let n = dataset.total_len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = rng_from(substream(train_cfg.seed, "train-shuffle"));
    let mut epoch_losses = Vec::with_capacity(train_cfg.epochs);
    let mut step_losses = Vec::new();
    let lambda = if use_centers { train_cfg.center_weight } else { 0.0 };

    for epoch in 0..train_cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_total = 0.0;
        let mut epoch_do = 0.0;
        let mut epoch_mc = 0.0;
        for (batch_idx, chunk) in order.chunks(train_cfg.batch_size).enumerate() {
            let batch: Vec<(&Image, usize, SampleTag)> = chunk
                .iter()
                .map(|&i| dataset.get(i))
                .collect();
            let traces = batch
                .par_iter()
                .map(|(img, _, _)| model.forward_trace(img))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| match e {
                    Error::Diverged(detail) => Error::NonFiniteLoss {
                        epoch,
                        batch: batch_idx,
                        detail,
                    },
                    other => other,
                })?;

            if use_centers {
                let clean_updates: Vec<(usize, Array1<f64>)> = batch
                    .iter()
                    .zip(traces.iter())
                    .filter(|((_, _, tag), _)| *tag == SampleTag::Clean)
                    .map(|((_, label, _), trace)| (*label, trace.feature.clone()))
                    .collect();
                if !clean_updates.is_empty() {
                    let (labels, feats): (Vec<usize>, Vec<Array1<f64>>) =
                        clean_updates.iter().cloned().unzip();
                    bank.update(&feats, &labels)?;
                    observer.on_center_updates(&clean_updates);
                }
            }

            let b = batch.len() as f64;
            let n_poisoned = batch
                .iter()
                .filter(|(_, _, tag)| *tag != SampleTag::Clean)
                .count();
            let feature_dim = model.config.feature_dim as f64;

            let mut do_loss = 0.0;
            let mut mc_loss = 0.0;
            let mut grads = ParamGrads::zeros_like(&model);
            let per_sample: Vec<(f64, f64, ParamGrads)> = batch
                .par_iter()
                .zip(traces.par_iter())
                .map(|((_, label, tag), trace)| {
                    let (ce, mut d_logits) = cross_entropy(&trace.logits, *label);
                    d_logits.mapv_inplace(|v| v / b);
                    let mut sample_mc = 0.0;
                    let d_feature = if lambda > 0.0 && *tag != SampleTag::Clean && n_poisoned > 0
                    {
                        let center_class = if *tag == SampleTag::Dirty {
                            target_label
                        } else {
                            *label
                        };
                        let center = bank.center(center_class)?;
                        sample_mc = mse(&trace.feature, center);
                        let scale = lambda * 2.0 / (feature_dim * n_poisoned as f64);
                        let mut d: Array1<f64> = &trace.feature - &center;
                        d.mapv_inplace(|v| v * scale);
                        Some(d)
                    } else {
                        None
                    };
                    let (g, _) = model.backward(trace, &d_logits, d_feature.as_ref());
                    Ok((ce, sample_mc, g))
                })
                .collect::<Result<Vec<_>>>()?;
            for (ce, sample_mc, g) in &per_sample {
                do_loss += ce;
                mc_loss += sample_mc;
                grads.add_assign(g);
            }
            do_loss /= b;
            if n_poisoned > 0 {
                mc_loss /= n_poisoned as f64;
            }
            let total = do_loss + lambda * mc_loss;
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    detail: format!("total={total} do={do_loss} mc={mc_loss}"),
                });
            }
            model.apply_sgd(&grads, train_cfg.learning_rate);

            step_losses.push(StepLoss {
                epoch,
                batch: batch_idx,
                total,
                do_loss,
                mc_loss,
            });
            epoch_total += total * b;
            epoch_do += do_loss * b;
            epoch_mc += mc_loss * b;
        }
        let scale = 1.0 / n as f64;
        epoch_losses.push(EpochLoss {
            total: epoch_total * scale,
            do_loss: epoch_do * scale,
            mc_loss: epoch_mc * scale,
        });
        log::debug!(
            "epoch {epoch}: total {:.4} do {:.4} mc {:.4}",
            epoch_losses[epoch].total,
            epoch_losses[epoch].do_loss,
            epoch_losses[epoch].mc_loss
        );
    }

    let mut cda = None;
    let mut asr = None;
    if let Some(ctx) = eval {
        cda = Some(evaluate_cda(&model, ctx.test_set)?);
        if let Some(trigger) = ctx.trigger {
            if !dataset.dirty.is_empty() {
                asr = Some(evaluate_asr(&model, ctx.test_set, trigger)?);
            }
        }
    }

    let report = TrainReport {
        epoch_losses,
        step_losses,
        cda,
        asr,
        checkpoint_path: None,
        config: *train_cfg,
        final_centers: use_centers.then_some(bank.centers),
    };
    Ok((model, report))
}

/// Percentage of clean test samples classified correctly.
pub fn evaluate_cda(model: &FeatureSplitClassifier, clean_test: &LabeledDataset) -> Result<f64> {
    if clean_test.is_empty() {
        return Err(Error::contract("evaluate_cda: empty test set"));
    }
    let correct: usize = clean_test
        .images
        .par_iter()
        .zip(clean_test.labels.par_iter())
        .map(|(img, &label)| Ok(usize::from(model.predict(img)? == label)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(100.0 * correct as f64 / clean_test.len() as f64)
}

/// Percentage of triggered test samples classified as the target label,
/// over samples whose true class is not the target class.
pub fn evaluate_asr(
    model: &FeatureSplitClassifier,
    test_set: &LabeledDataset,
    spec: &TriggerSpec,
) -> Result<f64> {
    let eligible: Vec<&Image> = test_set
        .samples()
        .filter(|(_, label)| *label != spec.target_label)
        .map(|(img, _)| img)
        .collect();
    if eligible.is_empty() {
        return Err(Error::contract(
            "evaluate_asr: no test samples outside the target class",
        ));
    }
    let hits: usize = eligible
        .par_iter()
        .map(|img| {
            let triggered = apply_trigger(img, spec)?;
            Ok(usize::from(model.predict(&triggered)? == spec.target_label))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(100.0 * hits as f64 / eligible.len() as f64)
}
