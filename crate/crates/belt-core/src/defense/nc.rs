//! Trigger reverse engineering: per class, optimize a continuous mask and
//! pattern so that stamping any clean input flips it to that class, while an
//! l1 penalty shrinks the mask. A class whose recovered mask is anomalously
//! small (median-absolute-deviation index above 2) marks the model as
//! backdoored.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::excl::GradientModel;
use crate::nn::{argmax, softmax, Adam};
use crate::seed::{rng_from, substream, substream_indexed};
use crate::Image;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NcConfig {
    /// Optimization epochs over the clean set, per class.
    pub opt_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// First nonzero value of the l1 weight β once the reversed trigger
    /// reaches `asr_threshold`.
    pub init_beta: f64,
    /// Batch attack-success fraction the reversed trigger must keep while β
    /// squeezes the mask.
    pub asr_threshold: f64,
    /// Consecutive batches above/below threshold before β moves.
    pub patience: usize,
    /// β multiplier/divisor.
    pub beta_factor: f64,
    /// Initial mask value (sigmoid-space), uniform over pixels.
    pub mask_init: f64,
    /// Initial pattern value before seeded jitter.
    pub pattern_init: f64,
    /// Independent scan repetitions to average.
    pub repeats: usize,
    pub seed: u64,
}

impl Default for NcConfig {
    fn default() -> Self {
        Self {
            opt_epochs: 100,
            batch_size: 32,
            learning_rate: 0.1,
            init_beta: 1e-3,
            asr_threshold: 0.97,
            patience: 5,
            beta_factor: 1.5,
            mask_init: 0.5,
            pattern_init: 0.5,
            repeats: 3,
            seed: 0,
        }
    }
}

impl NcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.patience == 0 || self.repeats == 0 {
            return Err(Error::contract("batch_size, patience, repeats must be >= 1"));
        }
        if !(self.beta_factor > 1.0) {
            return Err(Error::contract("beta_factor must be > 1"));
        }
        if !(0.0..=1.0).contains(&self.asr_threshold) {
            return Err(Error::contract("asr_threshold must lie in [0, 1]"));
        }
        for (name, v) in [("mask_init", self.mask_init), ("pattern_init", self.pattern_init)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::contract(format!("{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }
}

/// The recovered (pattern, mask) for one class.
#[derive(Debug, Clone)]
pub struct ReversedTrigger {
    pub class: usize,
    pub pattern: Image,
    pub mask: Array2<f64>,
    pub l1_norm: f64,
    /// Fraction of the clean set driven to `class` by the reversed trigger.
    pub asr: f64,
}

const LOGIT_LIMIT: f64 = 40.0;

fn logit(p: f64) -> f64 {
    if p <= 0.0 {
        -LOGIT_LIMIT
    } else if p >= 1.0 {
        LOGIT_LIMIT
    } else {
        (p / (1.0 - p)).ln().clamp(-LOGIT_LIMIT, LOGIT_LIMIT)
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

struct ReversedCandidate {
    mask: Array2<f64>,
    pattern: Image,
    l1: f64,
}

/// Stamps `x` with the candidate: `x' = (1−M)·x + M·P`, mask shared across
/// channels.
fn stamp(x: &Image, mask: &Array2<f64>, pattern: &Image) -> Image {
    let (c, h, w) = x.dim();
    Image::from_shape_fn((c, h, w), |(ci, i, j)| {
        (1.0 - mask[[i, j]]) * x[[ci, i, j]] + mask[[i, j]] * pattern[[ci, i, j]]
    })
}

/// Loss and logit-space gradients of the reversal objective on one batch:
/// mean cross-entropy toward `target_class` of every stamped input plus
/// `beta` times the mask l1 norm, differentiated through the sigmoid
/// reparameterization. Returns `(loss, hits, d_theta_m, d_theta_p)` where
/// `hits` counts stamped inputs already classified as the class. Exposed
/// for finite-difference verification.
pub fn nc_objective_and_gradient<M: GradientModel + ?Sized>(
    model: &M,
    inputs: &[&Image],
    target_class: usize,
    theta_m: &Array2<f64>,
    theta_p: &Image,
    beta: f64,
) -> Result<(f64, usize, Array2<f64>, Image)> {
    if inputs.is_empty() {
        return Err(Error::contract("nc: empty batch"));
    }
    let (c, h, w) = theta_p.dim();
    let mask = theta_m.mapv(sigmoid);
    let pattern = theta_p.mapv(sigmoid);
    let b = inputs.len() as f64;

    let per_sample: Vec<(f64, bool, Image)> = inputs
        .par_iter()
        .map(|x| {
            let stamped = stamp(x, &mask, &pattern);
            let (logits, d_input) = model.logits_with_input_grad(&stamped, &|logits| {
                let mut d = softmax(logits);
                d[target_class] -= 1.0;
                d.mapv_inplace(|v| v / b);
                d
            })?;
            let probs = softmax(&logits);
            let ce = -(probs[target_class].max(f64::MIN_POSITIVE)).ln();
            let hit = argmax(&logits) == target_class;
            Ok((ce, hit, d_input))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut ce_loss = 0.0;
    let mut hits = 0usize;
    let mut d_mask = Array2::<f64>::zeros((h, w));
    let mut d_pattern = Image::zeros((c, h, w));
    for ((ce, hit, d_input), x) in per_sample.iter().zip(inputs.iter()) {
        ce_loss += ce / b;
        hits += usize::from(*hit);
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let g = d_input[[ci, i, j]];
                    d_mask[[i, j]] += g * (pattern[[ci, i, j]] - x[[ci, i, j]]);
                    d_pattern[[ci, i, j]] += g * mask[[i, j]];
                }
            }
        }
    }
    let loss = ce_loss + beta * mask.sum();
    d_mask += beta;

    // chain through the sigmoid reparameterization
    let d_theta_m = Array2::from_shape_fn((h, w), |(i, j)| {
        let m = mask[[i, j]];
        d_mask[[i, j]] * m * (1.0 - m)
    });
    let d_theta_p = Image::from_shape_fn((c, h, w), |(ci, i, j)| {
        let p = pattern[[ci, i, j]];
        d_pattern[[ci, i, j]] * p * (1.0 - p)
    });
    Ok((loss, hits, d_theta_m, d_theta_p))
}

fn reverse_once<M: GradientModel + ?Sized>(
    model: &M,
    clean_set: &LabeledDataset,
    target_class: usize,
    cfg: &NcConfig,
    seed: u64,
    learning_rate: f64,
) -> Result<ReversedCandidate> {
    let (c, h, w) = clean_set
        .input_shape()
        .ok_or_else(|| Error::contract("nc: empty clean set"))?;
    let mut theta_m = Array2::<f64>::from_elem((h, w), logit(cfg.mask_init));
    let mut rng = rng_from(substream(seed, "nc-pattern-init"));
    let mut theta_p = Image::from_shape_fn((c, h, w), |_| {
        logit(cfg.pattern_init) + rng.gen_range(-0.5..=0.5)
    });

    let n_params = h * w + c * h * w;
    let mut adam = Adam::new(n_params, learning_rate);
    let mut beta = 0.0;
    let mut up_count = 0usize;
    let mut down_count = 0usize;
    let mut best: Option<ReversedCandidate> = None;

    let mut order: Vec<usize> = (0..clean_set.len()).collect();
    let mut shuffle_rng = rng_from(substream(seed, "nc-shuffle"));

    for epoch in 0..cfg.opt_epochs {
        order.shuffle(&mut shuffle_rng);
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mask = theta_m.mapv(sigmoid);
            let pattern = theta_p.mapv(sigmoid);
            let b = chunk.len() as f64;
            let inputs: Vec<&Image> = chunk.iter().map(|&i| &clean_set.images[i]).collect();

            let (loss, hits, d_theta_m, d_theta_p) =
                nc_objective_and_gradient(model, &inputs, target_class, &theta_m, &theta_p, beta)?;
            let l1: f64 = mask.sum();
            if !loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "nc: non-finite loss at epoch {epoch} batch {batch_idx} (class {target_class})"
                )));
            }

            let mut grads = Vec::with_capacity(n_params);
            grads.extend(d_theta_m.iter());
            grads.extend(d_theta_p.iter());
            let mut params = Vec::with_capacity(n_params);
            params.extend(theta_m.iter());
            params.extend(theta_p.iter());
            adam.step(&mut params, &grads);
            for (dst, src) in theta_m.iter_mut().zip(params.iter()) {
                *dst = src.clamp(-LOGIT_LIMIT, LOGIT_LIMIT);
            }
            for (dst, src) in theta_p.iter_mut().zip(params[h * w..].iter()) {
                *dst = src.clamp(-LOGIT_LIMIT, LOGIT_LIMIT);
            }

            // β control: squeeze the mask while the reversed trigger works,
            // back off when it stops working.
            let batch_asr = hits as f64 / b;
            if batch_asr >= cfg.asr_threshold {
                up_count += 1;
                down_count = 0;
                if l1 < best.as_ref().map_or(f64::INFINITY, |b| b.l1) {
                    best = Some(ReversedCandidate {
                        mask: mask.clone(),
                        pattern: pattern.clone(),
                        l1,
                    });
                }
            } else {
                down_count += 1;
                up_count = 0;
            }
            if up_count >= cfg.patience {
                up_count = 0;
                beta = if beta == 0.0 { cfg.init_beta } else { beta * cfg.beta_factor };
            } else if down_count >= cfg.patience && beta > 0.0 {
                down_count = 0;
                beta /= cfg.beta_factor;
            }
        }
    }

    Ok(best.unwrap_or_else(|| {
        let mask = theta_m.mapv(sigmoid);
        let l1 = mask.sum();
        ReversedCandidate {
            mask,
            pattern: theta_p.mapv(sigmoid),
            l1,
        }
    }))
}

/// Recovers the smallest mask+pattern that flips the clean set to
/// `target_class`. On divergence the optimization restarts once at a tenth
/// of the learning rate.
pub fn nc_reverse_trigger<M: GradientModel + ?Sized>(
    model: &M,
    clean_set: &LabeledDataset,
    target_class: usize,
    cfg: &NcConfig,
    seed: u64,
) -> Result<ReversedTrigger> {
    cfg.validate()?;
    if clean_set.is_empty() {
        return Err(Error::contract("nc: empty clean set"));
    }
    if target_class >= model.num_classes() {
        return Err(Error::contract(format!(
            "nc: class {target_class} out of range"
        )));
    }
    let candidate = match reverse_once(model, clean_set, target_class, cfg, seed, cfg.learning_rate)
    {
        Ok(c) => c,
        Err(Error::Diverged(first)) => {
            log::warn!("{first}; retrying at learning rate {}", cfg.learning_rate / 10.0);
            reverse_once(
                model,
                clean_set,
                target_class,
                cfg,
                seed,
                cfg.learning_rate / 10.0,
            )?
        }
        Err(other) => return Err(other),
    };

    let hits: usize = clean_set
        .images
        .par_iter()
        .map(|x| {
            let stamped = stamp(x, &candidate.mask, &candidate.pattern);
            Ok(usize::from(model.predict_class(&stamped)? == target_class))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(ReversedTrigger {
        class: target_class,
        pattern: candidate.pattern,
        mask: candidate.mask,
        l1_norm: candidate.l1,
        asr: hits as f64 / clean_set.len() as f64,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NcVerdict {
    /// Mask l1 norms per class (averaged over repeats in a scan).
    pub per_class_l1: Vec<f64>,
    /// Anomaly index (averaged over repeats in a scan).
    pub anomaly_index: f64,
    /// True iff the index strictly exceeds 2.
    pub flagged: bool,
    pub repeats: usize,
    pub per_repeat_indices: Vec<f64>,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Median-absolute-deviation anomaly index of the smallest norm:
/// `|min − median| / (1.4826 · median(|norms − median|))`.
pub fn nc_anomaly_index(l1_norms: &[f64]) -> Result<NcVerdict> {
    if l1_norms.len() < 3 {
        return Err(Error::contract("anomaly index needs >= 3 classes"));
    }
    if l1_norms.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::contract("mask norms must be finite and nonnegative"));
    }
    let mut sorted = l1_norms.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let med = median(&sorted);
    let mut deviations: Vec<f64> = l1_norms.iter().map(|v| (v - med).abs()).collect();
    deviations.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let mad = median(&deviations);
    if mad == 0.0 {
        return Err(Error::DegenerateNormDistribution);
    }
    let index = (sorted[0] - med).abs() / (1.4826 * mad);
    Ok(NcVerdict {
        per_class_l1: l1_norms.to_vec(),
        anomaly_index: index,
        flagged: index > 2.0,
        repeats: 1,
        per_repeat_indices: vec![index],
    })
}

/// Full scan: reverse a trigger per class, compute the anomaly index, and
/// average over independently seeded repeats.
pub fn nc_scan<M: GradientModel + ?Sized>(
    model: &M,
    clean_set: &LabeledDataset,
    cfg: &NcConfig,
) -> Result<NcVerdict> {
    cfg.validate()?;
    let k = model.num_classes();
    let mut per_repeat_indices = Vec::with_capacity(cfg.repeats);
    let mut l1_sums = vec![0.0; k];
    for repeat in 0..cfg.repeats {
        let repeat_seed = substream_indexed(cfg.seed, "nc-repeat", repeat as u64);
        let norms: Vec<f64> = (0..k)
            .into_par_iter()
            .map(|class| {
                let class_seed = substream_indexed(repeat_seed, "nc-class", class as u64);
                Ok(nc_reverse_trigger(model, clean_set, class, cfg, class_seed)?.l1_norm)
            })
            .collect::<Result<Vec<_>>>()?;
        for (sum, norm) in l1_sums.iter_mut().zip(norms.iter()) {
            *sum += norm;
        }
        let verdict = nc_anomaly_index(&norms)?;
        log::info!(
            "nc repeat {repeat}: index {:.3}, norms {:?}",
            verdict.anomaly_index,
            norms.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>()
        );
        per_repeat_indices.push(verdict.anomaly_index);
    }
    let mean_index = per_repeat_indices.iter().sum::<f64>() / cfg.repeats as f64;
    Ok(NcVerdict {
        per_class_l1: l1_sums.iter().map(|s| s / cfg.repeats as f64).collect(),
        anomaly_index: mean_index,
        flagged: mean_index > 2.0,
        repeats: cfg.repeats,
        per_repeat_indices,
    })
}
