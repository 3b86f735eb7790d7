//! Trigger exclusivity: for each poisoned sample, find the largest-norm
//! distortion of the trigger pattern that still drives the model to the
//! target class, then score `1 − ‖δ_max‖₂ / ‖δ_b‖₂` and average.
//!
//! The search minimizes `−log softmax(F(x'))_{y_t} + λ·‖δ_b − δ‖₂` over the
//! trigger support with Adam, where the regularizer steers δ toward the
//! perturbation boundary δ_b and λ grows dynamically in the second half of
//! the schedule whenever the perturbed trigger still activates. Ablation
//! modes replace the directional regularizer with `−λ‖δ‖₂` and/or freeze λ.

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::FeatureSplitClassifier;
use crate::nn::{argmax, softmax, Adam};
use crate::seed::{rng_from, substream, substream_indexed};
use crate::trigger::{apply_trigger, l2_norm, perturbation_boundary, TriggerSpec};
use crate::Image;

/// Anything the optimizer can query for logits and input gradients. The
/// gradient callback receives the logits and returns the loss gradient
/// w.r.t. them.
pub trait GradientModel: Sync {
    fn num_classes(&self) -> usize;
    fn logits(&self, x: &Image) -> Result<Array1<f64>>;
    fn logits_with_input_grad(
        &self,
        x: &Image,
        d_logits_of: &(dyn Fn(&Array1<f64>) -> Array1<f64> + Sync),
    ) -> Result<(Array1<f64>, Image)>;

    fn predict_class(&self, x: &Image) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }
}

impl GradientModel for FeatureSplitClassifier {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn logits(&self, x: &Image) -> Result<Array1<f64>> {
        self.forward(x)
    }

    fn logits_with_input_grad(
        &self,
        x: &Image,
        d_logits_of: &(dyn Fn(&Array1<f64>) -> Array1<f64> + Sync),
    ) -> Result<(Array1<f64>, Image)> {
        let trace = self.forward_trace(x)?;
        let d_logits = d_logits_of(&trace.logits);
        let d_input = self.input_gradient(&trace, &d_logits);
        Ok((trace.logits.clone(), d_input))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveMode {
    /// Directional regularizer toward δ_b, dynamic λ.
    Full,
    /// Plain `−λ‖δ‖₂` with a static λ.
    Intuitive,
    /// `−λ‖δ‖₂` but keeping the dynamic λ schedule.
    NoDirection,
    /// Directional regularizer with λ frozen at its initial value.
    StaticLambda,
}

impl ObjectiveMode {
    pub const ALL: [ObjectiveMode; 4] = [
        ObjectiveMode::Full,
        ObjectiveMode::Intuitive,
        ObjectiveMode::NoDirection,
        ObjectiveMode::StaticLambda,
    ];

    fn directional(self) -> bool {
        matches!(self, ObjectiveMode::Full | ObjectiveMode::StaticLambda)
    }

    fn dynamic_lambda(self) -> bool {
        matches!(self, ObjectiveMode::Full | ObjectiveMode::NoDirection)
    }
}

impl std::fmt::Display for ObjectiveMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            ObjectiveMode::Full => "full",
            ObjectiveMode::Intuitive => "intuitive",
            ObjectiveMode::NoDirection => "no_direction",
            ObjectiveMode::StaticLambda => "static_lambda",
        };
        f.write_str(name)
    }
}

/// Norm used for the constraint and the score. Only the Euclidean norm is
/// implemented; the enum is the extension point.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    #[default]
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExclConfig {
    /// Optimization epochs per sample.
    pub epochs: usize,
    pub learning_rate: f64,
    /// Initial regularizer weight.
    pub lambda_init: f64,
    pub objective_mode: ObjectiveMode,
    /// Number of samples to measure.
    pub n: usize,
    pub norm: NormKind,
    pub seed: u64,
}

impl Default for ExclConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            learning_rate: 1e-3,
            lambda_init: 0.1,
            objective_mode: ObjectiveMode::Full,
            n: 100,
            norm: NormKind::Euclidean,
            seed: 0,
        }
    }
}

impl ExclConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 2 {
            return Err(Error::contract("excl epochs must be >= 2"));
        }
        if self.n < 1 {
            return Err(Error::contract("excl n must be >= 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::contract("excl learning_rate must be > 0"));
        }
        if self.lambda_init < 0.0 {
            return Err(Error::contract("excl lambda_init must be >= 0"));
        }
        Ok(())
    }
}

/// Per-sample exclusivity: `1 − bound / boundary`, clamped into [0, 1].
pub fn exclusivity_score(bound_norm: f64, boundary_norm: f64) -> f64 {
    (1.0 - bound_norm / boundary_norm).clamp(0.0, 1.0)
}

/// Outcome of one per-sample bound search.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundResult {
    pub id: usize,
    pub bound_norm: f64,
    pub boundary_norm: f64,
    /// `1 − bound_norm / boundary_norm`; absent when the sample failed its
    /// precondition (trigger inactive at δ = 0).
    pub excl: Option<f64>,
    pub success: bool,
    /// The largest-norm still-activating δ found.
    #[serde(skip)]
    pub delta_max: Option<Image>,
    /// λ value per epoch (diagnostics; frozen modes stay constant).
    #[serde(skip)]
    pub lambda_history: Vec<f64>,
}

/// Value and δ-gradient of the search objective at the given δ. Exposed for
/// finite-difference verification.
pub fn objective_and_gradient<M: GradientModel + ?Sized>(
    model: &M,
    x: &Image,
    spec: &TriggerSpec,
    delta: &Image,
    delta_b: &Image,
    lambda: f64,
    mode: ObjectiveMode,
) -> Result<(f64, Image)> {
    let target = spec.target_label;
    // Pre-clip injection and the clip pass-through mask.
    let mut pre = x * &spec.input_mask;
    pre += &(&(&spec.pattern + delta) * &spec.trigger_mask);
    let x_prime = pre.mapv(|v| v.clamp(0.0, 1.0));

    let (logits, d_input) = model.logits_with_input_grad(&x_prime, &|logits| {
        let mut d = softmax(logits);
        d[target] -= 1.0;
        d
    })?;
    let probs = softmax(&logits);
    let ce = -(probs[target].max(f64::MIN_POSITIVE)).ln();

    // Chain rule through clip and injection: dx'/dδ = m_p on the support
    // where the pre-clip value is inside [0, 1], else 0.
    let mut d_delta = Image::zeros(delta.raw_dim());
    ndarray::Zip::from(&mut d_delta)
        .and(&d_input)
        .and(&pre)
        .and(&spec.trigger_mask)
        .for_each(|d, &dx, &u, &m| {
            if m > 0.0 && (0.0..=1.0).contains(&u) {
                *d = dx * m;
            }
        });

    let value;
    if mode.directional() {
        let residual = delta_b - delta;
        let res_norm = l2_norm(&residual);
        value = ce + lambda * res_norm;
        if res_norm > 0.0 {
            let scale = lambda / res_norm;
            ndarray::Zip::from(&mut d_delta)
                .and(&residual)
                .and(&spec.trigger_mask)
                .for_each(|d, &r, &m| {
                    if m > 0.0 {
                        // d/dδ λ‖δ_b − δ‖ = −λ·(δ_b − δ)/‖δ_b − δ‖
                        *d -= scale * r;
                    }
                });
        }
    } else {
        let norm = l2_norm(delta);
        value = ce - lambda * norm;
        if norm > 0.0 {
            let scale = lambda / norm;
            ndarray::Zip::from(&mut d_delta)
                .and(delta)
                .and(&spec.trigger_mask)
                .for_each(|d, &dv, &m| {
                    if m > 0.0 {
                        *d -= scale * dv;
                    }
                });
        }
    }
    Ok((value, d_delta))
}

/// Searches for the largest still-activating trigger distortion on one
/// sample. The returned bound is the maximum-norm activating δ seen across
/// the whole trajectory; δ is re-projected after every step onto the trigger
/// support and the per-element box that keeps `p + δ` a valid pixel value,
/// so every candidate is a realizable trigger.
pub fn optimize_trigger_upper_bound<M: GradientModel + ?Sized>(
    model: &M,
    sample_id: usize,
    x: &Image,
    spec: &TriggerSpec,
    cfg: &ExclConfig,
) -> Result<BoundResult> {
    cfg.validate()?;
    let boundary = perturbation_boundary(spec, (0.0, 1.0))?;
    let boundary_norm = boundary.l2_norm;

    // Precondition: the unperturbed trigger must activate on this sample.
    let baseline = apply_trigger(x, spec)?;
    if model.predict_class(&baseline)? != spec.target_label {
        return Ok(BoundResult {
            id: sample_id,
            bound_norm: 0.0,
            boundary_norm,
            excl: None,
            success: false,
            delta_max: None,
            lambda_history: Vec::new(),
        });
    }

    // δ = 0 activates by the precondition; start the search from a tiny
    // seeded off-zero point so the norm terms are differentiable.
    let mut rng = rng_from(substream_indexed(cfg.seed, "delta-init", sample_id as u64));
    let mut delta = Image::zeros(spec.pattern.raw_dim());
    ndarray::Zip::from(&mut delta)
        .and(&spec.trigger_mask)
        .for_each(|d, &m| {
            if m > 0.0 {
                *d = rng.gen_range(-1e-3..=1e-3);
            }
        });

    let mut best_norm = 0.0;
    let mut best_delta = Image::zeros(spec.pattern.raw_dim());
    let mut lambda = cfg.lambda_init;
    let mut lambda_history = Vec::with_capacity(cfg.epochs);
    let mut adam = Adam::new(delta.len(), cfg.learning_rate);

    let evaluate = |delta: &Image,
                        best_norm: &mut f64,
                        best_delta: &mut Image|
     -> Result<Array1<f64>> {
        let x_prime = crate::trigger::apply_perturbed_trigger(x, spec, delta)?;
        let logits = model.logits(&x_prime)?;
        if argmax(&logits) == spec.target_label {
            let norm = l2_norm(delta);
            if norm > *best_norm {
                *best_norm = norm;
                best_delta.assign(delta);
            }
        }
        Ok(logits)
    };

    for epoch in 1..=cfg.epochs {
        let logits = evaluate(&delta, &mut best_norm, &mut best_delta)?;
        if cfg.objective_mode.dynamic_lambda() && 2 * epoch > cfg.epochs {
            let probs = softmax(&logits);
            let target_prob = probs[spec.target_label];
            let runner_up = probs
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != spec.target_label)
                .map(|(_, &p)| p)
                .fold(f64::NEG_INFINITY, f64::max);
            lambda = (lambda + target_prob - runner_up).max(0.0);
        }
        lambda_history.push(lambda);

        let (_, grad) = objective_and_gradient(
            model,
            x,
            spec,
            &delta,
            &boundary.delta_b,
            lambda,
            cfg.objective_mode,
        )?;
        let grad_flat: Vec<f64> = grad.iter().copied().collect();
        let mut delta_flat: Vec<f64> = delta.iter().copied().collect();
        adam.step(&mut delta_flat, &grad_flat);
        delta = Image::from_shape_vec(delta.raw_dim(), delta_flat)
            .expect("delta reshape preserves length");

        // Project: confine to the trigger support and clamp each element so
        // p + δ stays a valid pixel value. Out-of-range coordinates would be
        // clipped out of the stimulus anyway and only inflate ‖δ‖ with
        // displacement the model never sees. The box makes ‖δ‖₂ ≤ ‖δ_b‖₂
        // automatic (δ_b is the farthest corner of the box); the norm cap
        // stays as a guard.
        ndarray::Zip::from(&mut delta)
            .and(&spec.trigger_mask)
            .and(&spec.pattern)
            .for_each(|d, &m, &p| {
                if m <= 0.0 {
                    *d = 0.0;
                } else {
                    *d = d.clamp(0.0 - p, 1.0 - p);
                }
            });
        let norm = l2_norm(&delta);
        if norm > boundary_norm {
            delta *= boundary_norm / norm;
        }
    }
    // The last step's iterate has not been scored yet.
    evaluate(&delta, &mut best_norm, &mut best_delta)?;

    let bound_norm = best_norm.min(boundary_norm);
    let excl = exclusivity_score(bound_norm, boundary_norm);
    Ok(BoundResult {
        id: sample_id,
        bound_norm,
        boundary_norm,
        excl: Some(excl),
        success: true,
        delta_max: Some(best_delta),
        lambda_history,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExclReport {
    /// Mean per-sample exclusivity over successful samples, in [0, 1].
    pub aggregate_excl: f64,
    pub n_requested: usize,
    pub n_succeeded: usize,
    pub per_sample: Vec<BoundResult>,
    pub mode: ObjectiveMode,
    pub seed: u64,
    /// True when fewer than `n` eligible samples were available.
    pub shortfall: bool,
}

impl ExclReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::contract(format!("excl report encode: {e}")))
    }
}

/// Samples whose label differs from the target class and whose triggered
/// version is predicted as the target (the backdoor works on them).
pub fn eligible_sample_ids<M: GradientModel + ?Sized>(
    model: &M,
    dataset: &LabeledDataset,
    spec: &TriggerSpec,
) -> Result<Vec<usize>> {
    let flags: Vec<bool> = dataset
        .images
        .par_iter()
        .zip(dataset.labels.par_iter())
        .map(|(img, &label)| {
            if label == spec.target_label {
                return Ok(false);
            }
            let triggered = apply_trigger(img, spec)?;
            Ok(model.predict_class(&triggered)? == spec.target_label)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(flags
        .into_iter()
        .enumerate()
        .filter_map(|(i, ok)| ok.then_some(i))
        .collect())
}

fn select_samples(eligible: &[usize], n: usize, seed: u64) -> (Vec<usize>, bool) {
    let mut ids = eligible.to_vec();
    ids.shuffle(&mut rng_from(substream(seed, "excl-select")));
    let shortfall = ids.len() < n;
    ids.truncate(n);
    (ids, shortfall)
}

/// Runs the bound search over a seeded selection of eligible samples and
/// averages the per-sample scores. Per-sample searches are independent and
/// run in parallel; results are folded in selection order.
pub fn measure_exclusivity<M: GradientModel + ?Sized>(
    model: &M,
    dataset: &LabeledDataset,
    spec: &TriggerSpec,
    cfg: &ExclConfig,
) -> Result<ExclReport> {
    cfg.validate()?;
    let eligible = eligible_sample_ids(model, dataset, spec)?;
    if eligible.is_empty() {
        return Err(Error::contract(
            "no eligible samples: the trigger activates on none of the non-target inputs",
        ));
    }
    let (ids, shortfall) = select_samples(&eligible, cfg.n, cfg.seed);
    if shortfall {
        log::warn!(
            "requested {} samples but only {} are eligible",
            cfg.n,
            ids.len()
        );
    }
    let per_sample: Vec<BoundResult> = ids
        .par_iter()
        .map(|&id| optimize_trigger_upper_bound(model, id, &dataset.images[id], spec, cfg))
        .collect::<Result<Vec<_>>>()?;

    let succeeded: Vec<f64> = per_sample.iter().filter_map(|r| r.excl).collect();
    if succeeded.is_empty() {
        return Err(Error::contract("all selected samples failed the trigger precondition"));
    }
    let aggregate_excl = succeeded.iter().sum::<f64>() / succeeded.len() as f64;
    Ok(ExclReport {
        aggregate_excl,
        n_requested: cfg.n,
        n_succeeded: succeeded.len(),
        per_sample,
        mode: cfg.objective_mode,
        seed: cfg.seed,
        shortfall,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: ObjectiveMode,
    pub mean_bound_norm: f64,
    pub mean_boundary_norm: f64,
    pub mean_excl: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub sample_ids: Vec<usize>,
    pub seed: u64,
}

/// Evaluates every objective mode on one shared seeded sample selection.
pub fn run_ablation<M: GradientModel + ?Sized>(
    model: &M,
    dataset: &LabeledDataset,
    spec: &TriggerSpec,
    cfg: &ExclConfig,
) -> Result<AblationTable> {
    cfg.validate()?;
    let eligible = eligible_sample_ids(model, dataset, spec)?;
    if eligible.is_empty() {
        return Err(Error::contract(
            "no eligible samples: the trigger activates on none of the non-target inputs",
        ));
    }
    let (ids, _) = select_samples(&eligible, cfg.n, cfg.seed);
    let mut rows = Vec::with_capacity(ObjectiveMode::ALL.len());
    for mode in ObjectiveMode::ALL {
        let mode_cfg = ExclConfig {
            objective_mode: mode,
            ..*cfg
        };
        let results: Vec<BoundResult> = ids
            .par_iter()
            .map(|&id| {
                optimize_trigger_upper_bound(model, id, &dataset.images[id], spec, &mode_cfg)
            })
            .collect::<Result<Vec<_>>>()?;
        let ok: Vec<&BoundResult> = results.iter().filter(|r| r.success).collect();
        if ok.is_empty() {
            return Err(Error::contract("all samples failed in ablation run"));
        }
        let inv = 1.0 / ok.len() as f64;
        rows.push(AblationRow {
            mode,
            mean_bound_norm: ok.iter().map(|r| r.bound_norm).sum::<f64>() * inv,
            mean_boundary_norm: ok.iter().map(|r| r.boundary_norm).sum::<f64>() * inv,
            mean_excl: ok.iter().filter_map(|r| r.excl).sum::<f64>() * inv,
        });
    }
    Ok(AblationTable {
        rows,
        sample_ids: ids,
        seed: cfg.seed,
    })
}
