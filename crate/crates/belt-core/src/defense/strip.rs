//! Perturbation-entropy screening: blend an input with random clean
//! overlays and sum the prediction entropies. A conventionally backdoored
//! input keeps its target prediction under blending (low entropy), so the
//! triggered-entropy distribution separates from the clean one; the overlap
//! coefficient of the two histograms quantifies how well the model evades
//! this screen.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::excl::GradientModel;
use crate::nn::softmax;
use crate::seed::{rng_from, substream_indexed};
use crate::Image;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StripConfig {
    /// Overlays blended per screened input.
    pub n_overlays: usize,
    /// Inputs screened per side (clean / triggered).
    pub n_inputs: usize,
    /// Histogram bins for the overlap coefficient.
    pub bins: usize,
    pub seed: u64,
}

impl Default for StripConfig {
    fn default() -> Self {
        Self {
            n_overlays: 100,
            n_inputs: 200,
            bins: 20,
            seed: 0,
        }
    }
}

impl StripConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_overlays == 0 || self.n_inputs == 0 || self.bins == 0 {
            return Err(Error::contract("strip: all counts must be >= 1"));
        }
        Ok(())
    }
}

/// Pixelwise mean of the input and one overlay.
pub fn blend(input: &Image, overlay: &Image) -> Image {
    (input + overlay) / 2.0
}

fn shannon_entropy_nat(probs: &ndarray::Array1<f64>) -> f64 {
    probs
        .iter()
        .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
        .sum()
}

/// Sum of prediction entropies (natural log) over an explicit overlay list.
pub fn strip_entropy_over<M: GradientModel + ?Sized>(
    model: &M,
    input: &Image,
    overlays: &[&Image],
) -> Result<f64> {
    if overlays.is_empty() {
        return Err(Error::contract("strip: empty overlay set"));
    }
    let mut total = 0.0;
    for overlay in overlays {
        let blended = blend(input, overlay);
        let probs = softmax(&model.logits(&blended)?);
        total += shannon_entropy_nat(&probs);
    }
    Ok(total)
}

/// Draws `n` overlays from the overlay set (seeded, with replacement) and
/// sums the blended-prediction entropies.
pub fn strip_entropy<M: GradientModel + ?Sized>(
    model: &M,
    input: &Image,
    overlay_set: &[Image],
    n: usize,
    seed: u64,
) -> Result<f64> {
    if overlay_set.is_empty() {
        return Err(Error::contract("strip: empty overlay set"));
    }
    if n == 0 {
        return Err(Error::contract("strip: n must be >= 1"));
    }
    let mut rng = rng_from(seed);
    let overlays: Vec<&Image> = (0..n)
        .map(|_| &overlay_set[rng.gen_range(0..overlay_set.len())])
        .collect();
    strip_entropy_over(model, input, &overlays)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub p1: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub p99: f64,
}

/// Linear-interpolation percentile over a sorted copy of `values`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite entropies"));
    let rank = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = rank - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    }
}

impl Percentiles {
    pub fn of(values: &[f64]) -> Self {
        Self {
            p1: percentile(values, 1.0),
            p25: percentile(values, 25.0),
            p50: percentile(values, 50.0),
            p75: percentile(values, 75.0),
            p99: percentile(values, 99.0),
        }
    }
}

/// Overlap coefficient of two samples: histograms over their combined range
/// are normalized to fractions and the bin-wise minima are summed. Equal
/// distributions give ≈ 1, disjoint ones 0. A degenerate combined range
/// (all values identical) counts as full overlap.
pub fn histogram_overlap(a: &[f64], b: &[f64], bins: usize) -> f64 {
    assert!(bins > 0 && !a.is_empty() && !b.is_empty());
    let lo = a.iter().chain(b).cloned().fold(f64::INFINITY, f64::min);
    let hi = a.iter().chain(b).cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return 1.0;
    }
    let width = (hi - lo) / bins as f64;
    let histogram = |values: &[f64]| {
        let mut h = vec![0.0; bins];
        for &v in values {
            let idx = (((v - lo) / width) as usize).min(bins - 1);
            h[idx] += 1.0 / values.len() as f64;
        }
        h
    };
    let ha = histogram(a);
    let hb = histogram(b);
    ha.iter().zip(hb.iter()).map(|(x, y)| x.min(*y)).sum()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StripVerdict {
    pub clean_entropies: Vec<f64>,
    pub trigger_entropies: Vec<f64>,
    pub clean_percentiles: Percentiles,
    pub trigger_percentiles: Percentiles,
    /// Histogram overlap coefficient of the two entropy distributions.
    pub overlap: f64,
    pub n_overlays: usize,
    pub seed: u64,
}

/// Screens both input sets and summarizes the two entropy distributions.
/// Per-input entropies use independent seed substreams, so results do not
/// depend on evaluation order or thread count.
pub fn strip_scan<M: GradientModel + ?Sized>(
    model: &M,
    clean_inputs: &[Image],
    trigger_inputs: &[Image],
    overlay_set: &[Image],
    cfg: &StripConfig,
) -> Result<StripVerdict> {
    cfg.validate()?;
    if clean_inputs.is_empty() || trigger_inputs.is_empty() {
        return Err(Error::contract("strip: both input sets must be nonempty"));
    }
    if overlay_set.is_empty() {
        return Err(Error::contract("strip: empty overlay set"));
    }
    let entropies = |inputs: &[Image], stream: &'static str| -> Result<Vec<f64>> {
        inputs
            .par_iter()
            .enumerate()
            .map(|(i, input)| {
                let seed = substream_indexed(cfg.seed, stream, i as u64);
                strip_entropy(model, input, overlay_set, cfg.n_overlays, seed)
            })
            .collect()
    };
    let clean_entropies = entropies(clean_inputs, "strip-clean")?;
    let trigger_entropies = entropies(trigger_inputs, "strip-trigger")?;
    let overlap = histogram_overlap(&clean_entropies, &trigger_entropies, cfg.bins);
    Ok(StripVerdict {
        clean_percentiles: Percentiles::of(&clean_entropies),
        trigger_percentiles: Percentiles::of(&trigger_entropies),
        overlap,
        clean_entropies,
        trigger_entropies,
        n_overlays: cfg.n_overlays,
        seed: cfg.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array1;

    /// Emits fixed logits regardless of input.
    struct FixedLogits(Vec<f64>);

    impl GradientModel for FixedLogits {
        fn num_classes(&self) -> usize {
            self.0.len()
        }
        fn logits(&self, _x: &Image) -> Result<Array1<f64>> {
            Ok(Array1::from_vec(self.0.clone()))
        }
        fn logits_with_input_grad(
            &self,
            x: &Image,
            _d: &(dyn Fn(&Array1<f64>) -> Array1<f64> + Sync),
        ) -> Result<(Array1<f64>, Image)> {
            Ok((self.logits(x)?, Image::zeros(x.raw_dim())))
        }
    }

    fn overlays(n: usize) -> Vec<Image> {
        (0..n)
            .map(|i| Image::from_elem((1, 4, 4), i as f64 / n as f64))
            .collect()
    }

    #[test]
    fn uniform_model_maximizes_entropy() {
        let model = FixedLogits(vec![0.0; 4]);
        let x = Image::zeros((1, 4, 4));
        let e = strip_entropy(&model, &x, &overlays(5), 100, 0).unwrap();
        assert_abs_diff_eq!(e, 100.0 * 4.0f64.ln(), epsilon = 1e-9);
    }

    #[test]
    fn one_hot_model_minimizes_entropy() {
        let model = FixedLogits(vec![1e4, 0.0, 0.0]);
        let x = Image::zeros((1, 4, 4));
        let e = strip_entropy(&model, &x, &overlays(5), 50, 0).unwrap();
        assert_abs_diff_eq!(e, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn two_class_half_half_example() {
        let model = FixedLogits(vec![0.3, 0.3]);
        let x = Image::zeros((1, 4, 4));
        let e = strip_entropy(&model, &x, &overlays(3), 10, 9).unwrap();
        assert_abs_diff_eq!(e, 10.0 * 2.0f64.ln(), epsilon = 1e-9);
    }

    #[test]
    fn entropy_sum_is_overlay_order_invariant() {
        let model = FixedLogits(vec![0.9, 0.1, -0.4]);
        let x = Image::from_elem((1, 4, 4), 0.25);
        let set = overlays(8);
        let refs: Vec<&Image> = set.iter().collect();
        let mut shuffled = refs.clone();
        shuffled.reverse();
        shuffled.swap(0, 3);
        let a = strip_entropy_over(&model, &x, &refs).unwrap();
        let b = strip_entropy_over(&model, &x, &shuffled).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-9);
    }

    #[test]
    fn empty_overlay_set_rejected() {
        let model = FixedLogits(vec![0.0, 0.0]);
        let x = Image::zeros((1, 4, 4));
        assert!(strip_entropy(&model, &x, &[], 10, 0).is_err());
    }

    #[test]
    fn blend_is_pixel_mean() {
        let a = Image::from_elem((1, 2, 2), 0.2);
        let b = Image::from_elem((1, 2, 2), 0.6);
        let out = blend(&a, &b);
        assert!(out.iter().all(|&v| (v - 0.4).abs() < 1e-12));
    }

    #[test]
    fn percentiles_interpolate() {
        let values: Vec<f64> = (0..=100).map(|i| i as f64).collect();
        let p = Percentiles::of(&values);
        assert_abs_diff_eq!(p.p1, 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(p.p50, 50.0, epsilon = 1e-9);
        assert_abs_diff_eq!(p.p99, 99.0, epsilon = 1e-9);
    }

    #[test]
    fn overlap_identical_disjoint_and_degenerate() {
        let a: Vec<f64> = (0..100).map(|i| i as f64 / 100.0).collect();
        assert_abs_diff_eq!(histogram_overlap(&a, &a, 20), 1.0, epsilon = 1e-12);

        let b: Vec<f64> = a.iter().map(|v| v + 10.0).collect();
        assert_abs_diff_eq!(histogram_overlap(&a, &b, 20), 0.0, epsilon = 1e-12);

        let c = vec![3.0; 10];
        assert_abs_diff_eq!(histogram_overlap(&c, &c, 20), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn scan_reports_both_sides_deterministically() {
        let model = FixedLogits(vec![0.2, -0.1, 0.4]);
        let clean = overlays(6);
        let triggered = overlays(6);
        let cfg = StripConfig {
            n_overlays: 10,
            n_inputs: 6,
            bins: 5,
            seed: 3,
        };
        let a = strip_scan(&model, &clean, &triggered, &clean, &cfg).unwrap();
        let b = strip_scan(&model, &clean, &triggered, &clean, &cfg).unwrap();
        assert_eq!(a.clean_entropies, b.clean_entropies);
        assert_eq!(a.overlap, b.overlap);
        // fixed-logit model: every entropy identical, full overlap
        assert_abs_diff_eq!(a.overlap, 1.0, epsilon = 1e-12);
    }
}
