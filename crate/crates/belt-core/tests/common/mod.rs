//! Shared desk-scale fixtures: the synthetic 4-class task, a 6x6 patch
//! trigger, poisoning presets, and oracle helpers used across the
//! integration suites.

#![allow(dead_code)]

use std::time::Instant;

use belt_core::dataset::{make_synthetic_dataset, LabeledDataset, Split};
use belt_core::excl::GradientModel;
use belt_core::model::{FeatureSplitClassifier, ModelConfig};
use belt_core::poison::{build_poisoned_dataset, PoisonConfig};
use belt_core::train::{train_backdoored_model, EvalContext, Scenario, TrainConfig, TrainReport};
use belt_core::trigger::{
    apply_perturbed_trigger, perturbation_boundary, PatternFill, TriggerSpec,
};
use belt_core::Image;

pub const DESK_SHAPE: (usize, usize, usize) = (3, 20, 20);
pub const DESK_CLASSES: usize = 4;
pub const DESK_TRAIN_PER_CLASS: usize = 500;
pub const DESK_TEST_PER_CLASS: usize = 100;
pub const DESK_EPOCHS: usize = 100;
pub const DESK_BATCH: usize = 32;
/// 0.1 is unstable on this task late in training (the backdoor fades in and
/// out between epochs); 0.05 converges to a steady ASR for every variant.
pub const DESK_LR: f64 = 0.05;
/// Feature-center pull for the model-outsourcing variant, scaled down from
/// the full-size default so it shapes the feature layout without fighting
/// the classification loss on this small task.
pub const DESK_CENTER_WEIGHT: f64 = 0.05;
pub const DESK_POISON_RATE: f64 = 0.02;
pub const DESK_TARGET: usize = 0;
/// Bound-search budget: 600 steps of 1e-3 give each trigger cell up to 0.6
/// of displacement travel. That is deep enough to reach the re-activating
/// displaced patterns a texture-keyed detector admits, but not so deep that
/// the search can sculpt bespoke adversarial noise into any model, which
/// would flatten every score toward zero.
pub const DESK_EXCL_EPOCHS: usize = 600;
pub const DESK_EXCL_LR: f64 = 1e-3;
/// Samples per exclusivity estimate, sized for single-core wall time.
pub const DESK_EXCL_N: usize = 10;
pub const DESK_NC_EPOCHS: usize = 40;

pub fn desk_train_set(seed: u64) -> LabeledDataset {
    make_synthetic_dataset(DESK_CLASSES, DESK_TRAIN_PER_CLASS, DESK_SHAPE, seed).unwrap()
}

pub fn desk_test_set(seed: u64) -> LabeledDataset {
    // Different stream than the train draw; the class structure itself is
    // seed-independent, so this is a held-out split of the same task.
    make_synthetic_dataset(DESK_CLASSES, DESK_TEST_PER_CLASS, DESK_SHAPE, seed ^ 0x7E57)
        .unwrap()
        .with_split(Split::Test)
}

/// 6x6 two-level checkerboard patch in the bottom-right corner, clear of
/// every class blob. Because each cell sits at 0 or 1, the farthest
/// in-range displacement of the whole patch is its phase inversion — an
/// equally vivid checkerboard shifted by one cell. A model that keys on
/// the texture (local contrast energy) stays activated far along that
/// displacement ray; a model forced to lock onto the exact cell phase does
/// not. That contrast is what the exclusivity score measures, so this
/// trigger separates the training recipes much more sharply than a flat
/// patch whose only available displacement is fading out.
pub fn desk_trigger() -> TriggerSpec {
    // Same cell value in every channel, row-major (channel, row, col).
    let values: Vec<f64> = (0..3 * 6 * 6)
        .map(|i| {
            let (r, c) = ((i % 36) / 6, i % 6);
            if (r + c) % 2 == 0 {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    TriggerSpec::patch(
        DESK_SHAPE,
        (14, 14),
        (6, 6),
        &PatternFill::Inline { values },
        DESK_TARGET,
    )
    .unwrap()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModelKind {
    Benign,
    /// Dirty-only poisoning (ratio 100:0).
    Vanilla,
    /// Dirty + cover poisoning (50:50) at the given mask rate.
    BeltPlus { mask_rate: f64 },
    /// BeltPlus poisoning plus the feature-center loss.
    BeltPlusPlus { mask_rate: f64 },
}

impl ModelKind {
    pub fn poison_config(&self, seed: u64) -> PoisonConfig {
        let base = PoisonConfig {
            poison_rate: DESK_POISON_RATE,
            seed,
            ..PoisonConfig::default()
        };
        match *self {
            ModelKind::Benign => PoisonConfig {
                poison_rate: 0.0,
                ..base
            },
            ModelKind::Vanilla => PoisonConfig {
                dirty_cover_ratio: (100.0, 0.0),
                ..base
            },
            ModelKind::BeltPlus { mask_rate } | ModelKind::BeltPlusPlus { mask_rate } => {
                PoisonConfig {
                    dirty_cover_ratio: (50.0, 50.0),
                    mask_rate,
                    ..base
                }
            }
        }
    }

    pub fn scenario(&self) -> Scenario {
        match self {
            ModelKind::BeltPlusPlus { .. } => Scenario::ModelOutsourcing,
            _ => Scenario::DataOutsourcing,
        }
    }
}

/// Trains one desk model end to end and evaluates it on the held-out set.
pub fn train_desk_model(kind: ModelKind, seed: u64) -> (FeatureSplitClassifier, TrainReport) {
    let train = desk_train_set(seed);
    let test = desk_test_set(seed);
    let spec = desk_trigger();
    let poisoned = build_poisoned_dataset(&train, &spec, &kind.poison_config(seed)).unwrap();
    let cfg = TrainConfig {
        scenario: kind.scenario(),
        epochs: DESK_EPOCHS,
        batch_size: DESK_BATCH,
        learning_rate: DESK_LR,
        center_weight: DESK_CENTER_WEIGHT,
        seed,
        ..TrainConfig::default()
    };
    let model_cfg = ModelConfig::desk(DESK_SHAPE, DESK_CLASSES, seed);
    train_backdoored_model(
        &poisoned,
        &model_cfg,
        &cfg,
        Some(EvalContext {
            test_set: &test,
            trigger: Some(&spec),
        }),
    )
    .unwrap()
}

/// Independent bound oracle: scan along the boundary ray and return the
/// largest activating norm `alpha * ||delta_b||` on a grid of `steps`
/// points. No gradients, no optimizer state.
pub fn line_scan_bound<M: GradientModel + ?Sized>(
    model: &M,
    spec: &TriggerSpec,
    x: &Image,
    steps: usize,
) -> f64 {
    let boundary = perturbation_boundary(spec, (0.0, 1.0)).unwrap();
    let mut best = 0.0;
    for k in 1..=steps {
        let alpha = k as f64 / steps as f64;
        let delta = boundary.delta_b.mapv(|v| v * alpha);
        let x_prime = apply_perturbed_trigger(x, spec, &delta).unwrap();
        if model.predict_class(&x_prime).unwrap() == spec.target_label {
            let norm = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > best {
                best = norm;
            }
        }
    }
    best
}

pub fn timed<T>(label: &str, f: impl FnOnce() -> T) -> T {
    let start = Instant::now();
    let out = f();
    eprintln!("  [{label}: {:.1}s]", start.elapsed().as_secs_f64());
    out
}
