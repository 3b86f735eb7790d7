//! Trigger-injection algebra.
//!
//! A trigger is a pattern `p` plus a pair of complementary masks: the trigger
//! mask `m_p` says how strongly each element of `p` replaces the input, the
//! input mask `m_x = 1 - m_p` says how much of the original input survives.
//! Poisoning an input is `x * m_x + p * m_p`, clipped to the pixel range.
//!
//! This module also computes the perturbation boundary (the farthest in-range
//! displacement of every pattern element) and constructs the "cover" triggers
//! used to suppress fuzzy-trigger activation during poisoning.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::error::{check_same_shape, Error, Result};
use crate::seed::rng_from;
use crate::Image;

/// Patch triggers use a binary mask; blended triggers a uniform transparency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerKind {
    Patch,
    Blended,
}

/// Default blended-trigger transparency.
pub const DEFAULT_BLEND_ALPHA: f64 = 0.2;

/// A trigger: pattern, masks, and the label it drives inputs to.
#[derive(Debug, Clone)]
pub struct TriggerSpec {
    pub pattern: Image,
    pub trigger_mask: Image,
    pub input_mask: Image,
    pub target_label: usize,
    pub kind: TriggerKind,
}

impl TriggerSpec {
    /// Builds a spec from a pattern and trigger mask; the input mask is
    /// derived as `1 - trigger_mask`.
    pub fn new(
        pattern: Image,
        trigger_mask: Image,
        target_label: usize,
        kind: TriggerKind,
    ) -> Result<Self> {
        check_same_shape("TriggerSpec", pattern.shape(), trigger_mask.shape())?;
        if pattern.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::contract("trigger pattern values must lie in [0, 1]"));
        }
        match kind {
            TriggerKind::Patch => {
                if trigger_mask.iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::contract(
                        "patch trigger mask elements must be exactly 0 or 1",
                    ));
                }
            }
            TriggerKind::Blended => {
                if trigger_mask.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                    return Err(Error::contract(
                        "blended trigger mask elements must lie in [0, 1]",
                    ));
                }
            }
        }
        let input_mask = trigger_mask.mapv(|v| 1.0 - v);
        Ok(Self {
            pattern,
            trigger_mask,
            input_mask,
            target_label,
            kind,
        })
    }

    /// Rectangular patch trigger at `origin = (row, col)` with `size = (h, w)`.
    pub fn patch(
        input_shape: (usize, usize, usize),
        origin: (usize, usize),
        size: (usize, usize),
        fill: &PatternFill,
        target_label: usize,
    ) -> Result<Self> {
        let (c, h, w) = input_shape;
        let (r0, c0) = origin;
        let (ph, pw) = size;
        if ph == 0 || pw == 0 {
            return Err(Error::contract("patch size must be nonzero"));
        }
        if r0 + ph > h || c0 + pw > w {
            return Err(Error::contract(format!(
                "patch {}x{} at ({}, {}) exceeds input {}x{}",
                ph, pw, r0, c0, h, w
            )));
        }
        let mut pattern = Image::zeros((c, h, w));
        let mut mask = Image::zeros((c, h, w));
        let values = fill.materialize(c * ph * pw)?;
        let mut k = 0;
        for ch in 0..c {
            for i in r0..r0 + ph {
                for j in c0..c0 + pw {
                    pattern[[ch, i, j]] = values[k];
                    mask[[ch, i, j]] = 1.0;
                    k += 1;
                }
            }
        }
        Self::new(pattern, mask, target_label, TriggerKind::Patch)
    }

    /// Full-image blended trigger with uniform transparency `alpha`.
    pub fn blended(pattern: Image, alpha: f64, target_label: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::contract("blend alpha must lie in [0, 1]"));
        }
        let mask = Image::from_elem(pattern.raw_dim(), alpha);
        Self::new(pattern, mask, target_label, TriggerKind::Blended)
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        let d = self.pattern.dim();
        (d.0, d.1, d.2)
    }

    /// Elements where the trigger mask is active.
    pub fn support_size(&self) -> usize {
        self.trigger_mask.iter().filter(|&&v| v > 0.0).count()
    }

    /// Spatial pixels (row, col) where any channel of the trigger mask is
    /// active. Cover masking drops whole pixels, matching how a trigger is
    /// visually occluded.
    pub fn support_pixels(&self) -> Vec<(usize, usize)> {
        let (c, h, w) = self.input_shape();
        let mut pixels = Vec::new();
        for i in 0..h {
            for j in 0..w {
                if (0..c).any(|ch| self.trigger_mask[[ch, i, j]] > 0.0) {
                    pixels.push((i, j));
                }
            }
        }
        pixels
    }
}

/// How a patch/blended pattern gets its values.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum PatternFill {
    /// Uniform random values in [0, 1], deterministic per seed.
    Random { seed: u64 },
    /// A single constant value.
    Solid { value: f64 },
    /// Explicit values, row-major over (channel, row, col) of the filled region.
    Inline { values: Vec<f64> },
    /// Pixels of an image file, rescaled to [0, 1].
    ImageFile { path: PathBuf },
}

impl PatternFill {
    fn materialize(&self, count: usize) -> Result<Vec<f64>> {
        match self {
            PatternFill::Random { seed } => {
                let mut rng = rng_from(*seed);
                Ok((0..count).map(|_| rng.gen_range(0.0..=1.0)).collect())
            }
            PatternFill::Solid { value } => {
                if !(0.0..=1.0).contains(value) {
                    return Err(Error::contract("solid fill value must lie in [0, 1]"));
                }
                Ok(vec![*value; count])
            }
            PatternFill::Inline { values } => {
                if values.len() != count {
                    return Err(Error::contract(format!(
                        "inline pattern has {} values, region needs {}",
                        values.len(),
                        count
                    )));
                }
                Ok(values.clone())
            }
            PatternFill::ImageFile { path } => {
                let img = load_pattern_image(path)?;
                if img.len() != count {
                    return Err(Error::contract(format!(
                        "pattern image {} has {} elements, region needs {}",
                        path.display(),
                        img.len(),
                        count
                    )));
                }
                Ok(img.into_raw_vec_and_offset().0)
            }
        }
    }
}

fn load_pattern_image(path: &Path) -> Result<Image> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Image::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for ch in 0..3 {
            out[[ch, y as usize, x as usize]] = f64::from(px.0[ch]) / 255.0;
        }
    }
    Ok(out)
}

/// Serializable trigger description (the on-disk form of a [`TriggerSpec`]).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TriggerDoc {
    pub kind: TriggerKind,
    pub target_label: usize,
    /// Patch origin (row, col); required for `kind = patch`.
    pub position: Option<(usize, usize)>,
    /// Patch size (height, width); required for `kind = patch`.
    pub size: Option<(usize, usize)>,
    /// Blend transparency; used by `kind = blended` (default 0.2).
    pub alpha: Option<f64>,
    pub pattern: PatternFill,
}

impl TriggerDoc {
    pub fn to_spec(&self, input_shape: (usize, usize, usize)) -> Result<TriggerSpec> {
        match self.kind {
            TriggerKind::Patch => {
                let position = self
                    .position
                    .ok_or_else(|| Error::contract("patch trigger requires `position`"))?;
                let size = self
                    .size
                    .ok_or_else(|| Error::contract("patch trigger requires `size`"))?;
                TriggerSpec::patch(input_shape, position, size, &self.pattern, self.target_label)
            }
            TriggerKind::Blended => {
                let (c, h, w) = input_shape;
                let values = self.pattern.materialize(c * h * w)?;
                let pattern = Image::from_shape_vec((c, h, w), values)
                    .map_err(|e| Error::contract(format!("blended pattern shape: {e}")))?;
                let alpha = self.alpha.unwrap_or(DEFAULT_BLEND_ALPHA);
                TriggerSpec::blended(pattern, alpha, self.target_label)
            }
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::contract(format!("trigger encode: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::contract(format!("trigger decode: {e}")))
    }
}

/// Applies a trigger: `clip(x * m_x + p * m_p, 0, 1)`. `x` is not mutated.
pub fn apply_trigger(x: &Image, spec: &TriggerSpec) -> Result<Image> {
    check_same_shape("apply_trigger", spec.pattern.shape(), x.shape())?;
    let mut out = x * &spec.input_mask;
    out += &(&spec.pattern * &spec.trigger_mask);
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(out)
}

/// Applies a trigger whose pattern is perturbed by `delta`:
/// `clip(x * m_x + (p + delta) * m_p, 0, 1)`.
///
/// `delta` is masked to the trigger support before use, so off-support
/// components are inert.
pub fn apply_perturbed_trigger(x: &Image, spec: &TriggerSpec, delta: &Image) -> Result<Image> {
    check_same_shape("apply_perturbed_trigger", spec.pattern.shape(), x.shape())?;
    check_same_shape("apply_perturbed_trigger", spec.pattern.shape(), delta.shape())?;
    let mut out = x * &spec.input_mask;
    let mut perturbed = spec.pattern.clone();
    ndarray::Zip::from(&mut perturbed)
        .and(delta)
        .and(&spec.trigger_mask)
        .for_each(|p, &d, &m| {
            if m > 0.0 {
                *p += d;
            }
        });
    out += &(&perturbed * &spec.trigger_mask);
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(out)
}

/// The farthest in-range displacement of every supported pattern element.
#[derive(Debug, Clone)]
pub struct PerturbationBoundary {
    pub delta_b: Image,
    pub l2_norm: f64,
}

impl PerturbationBoundary {
    /// Recomputes the Euclidean norm from `delta_b`.
    pub fn recomputed_norm(&self) -> f64 {
        l2_norm(&self.delta_b)
    }
}

pub fn l2_norm(t: &Image) -> f64 {
    t.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Per supported element `t` in `[t_min, t_max]`:
/// `delta_b = t_max - round((t - t_min) / (t_max - t_min)) * (t_max - t_min) - t`,
/// i.e. the signed distance to the farthest endpoint of the range. Rounding
/// of the mid-range tie is half away from zero, so `t = 0.5` in `[0, 1]`
/// maps to `-0.5`. Elements outside the trigger support are zero.
pub fn perturbation_boundary(
    spec: &TriggerSpec,
    value_range: (f64, f64),
) -> Result<PerturbationBoundary> {
    let (t_min, t_max) = value_range;
    if !(t_min < t_max) {
        return Err(Error::contract(format!(
            "invalid value range: ({t_min}, {t_max})"
        )));
    }
    if spec.support_size() == 0 {
        return Err(Error::EmptyTriggerSupport);
    }
    let span = t_max - t_min;
    let mut delta_b = Image::zeros(spec.pattern.raw_dim());
    let mut bad_value = None;
    ndarray::Zip::from(&mut delta_b)
        .and(&spec.pattern)
        .and(&spec.trigger_mask)
        .for_each(|d, &t, &m| {
            if m > 0.0 {
                if !(t_min..=t_max).contains(&t) {
                    bad_value = Some(t);
                } else {
                    *d = t_max - ((t - t_min) / span).round() * span - t;
                }
            }
        });
    if let Some(t) = bad_value {
        return Err(Error::contract(format!(
            "pattern value {t} outside range ({t_min}, {t_max})"
        )));
    }
    let l2_norm = l2_norm(&delta_b);
    Ok(PerturbationBoundary { delta_b, l2_norm })
}

/// How a cover (fuzzy) trigger is derived from the original.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoverMethod {
    /// Zero out a fraction of the trigger's support pixels.
    Mask,
    /// Resample every supported element from the empirical distribution of
    /// the original pattern's supported values.
    RandomSample,
    /// Add clipped Gaussian noise to the pattern on the support.
    Noise,
}

/// A concrete fuzzy trigger, reproducible from `(base, method, param, seed)`.
#[derive(Debug, Clone)]
pub struct CoverTrigger {
    pub base: TriggerSpec,
    pub method: CoverMethod,
    pub mask_rate: f64,
    pub noise_sigma: f64,
    /// 1 where a support pixel was dropped (mask method only; zeros otherwise).
    pub realized_mask: Array2<u8>,
    pub seed: u64,
    realized: TriggerSpec,
}

impl CoverTrigger {
    /// The modified trigger to feed through [`apply_trigger`].
    pub fn spec(&self) -> &TriggerSpec {
        &self.realized
    }

    /// Applies this cover trigger to an input.
    pub fn apply(&self, x: &Image) -> Result<Image> {
        apply_trigger(x, &self.realized)
    }
}

/// Builds a cover trigger. `param` is the mask rate for [`CoverMethod::Mask`],
/// the noise sigma for [`CoverMethod::Noise`], and ignored for
/// [`CoverMethod::RandomSample`]. Same arguments give a bit-identical result.
pub fn make_cover_trigger(
    spec: &TriggerSpec,
    method: CoverMethod,
    param: f64,
    seed: u64,
) -> Result<CoverTrigger> {
    let (_, h, w) = spec.input_shape();
    let mut realized_mask = Array2::<u8>::zeros((h, w));
    let mut rng = rng_from(seed);
    let (mask_rate, noise_sigma) = match method {
        CoverMethod::Mask => (param, 0.0),
        CoverMethod::Noise => (0.0, param),
        CoverMethod::RandomSample => (0.0, 0.0),
    };

    let realized = match method {
        CoverMethod::Mask => {
            if !(0.0..=1.0).contains(&param) {
                return Err(Error::contract(format!(
                    "mask_rate must lie in [0, 1], got {param}"
                )));
            }
            if param == 0.0 {
                log::warn!(
                    "cover trigger with mask_rate = 0 duplicates the dirty trigger under a conflicting label"
                );
            }
            let pixels = spec.support_pixels();
            if pixels.is_empty() {
                return Err(Error::EmptyTriggerSupport);
            }
            let n_drop = (param * pixels.len() as f64).round() as usize;
            let mut order: Vec<usize> = (0..pixels.len()).collect();
            order.shuffle(&mut rng);
            let mut trigger_mask = spec.trigger_mask.clone();
            let c = spec.input_shape().0;
            for &k in order.iter().take(n_drop) {
                let (i, j) = pixels[k];
                realized_mask[[i, j]] = 1;
                for ch in 0..c {
                    trigger_mask[[ch, i, j]] = 0.0;
                }
            }
            TriggerSpec::new(
                spec.pattern.clone(),
                trigger_mask,
                spec.target_label,
                spec.kind,
            )?
        }
        CoverMethod::RandomSample => {
            let pool: Vec<f64> = spec
                .pattern
                .iter()
                .zip(spec.trigger_mask.iter())
                .filter(|(_, &m)| m > 0.0)
                .map(|(&p, _)| p)
                .collect();
            if pool.is_empty() {
                return Err(Error::EmptyTriggerSupport);
            }
            let mut pattern = spec.pattern.clone();
            ndarray::Zip::from(&mut pattern)
                .and(&spec.trigger_mask)
                .for_each(|p, &m| {
                    if m > 0.0 {
                        *p = pool[rng.gen_range(0..pool.len())];
                    }
                });
            TriggerSpec::new(
                pattern,
                spec.trigger_mask.clone(),
                spec.target_label,
                spec.kind,
            )?
        }
        CoverMethod::Noise => {
            if !(param >= 0.0) {
                return Err(Error::contract(format!(
                    "noise sigma must be >= 0, got {param}"
                )));
            }
            if spec.support_size() == 0 {
                return Err(Error::EmptyTriggerSupport);
            }
            let normal = Normal::new(0.0, param.max(f64::MIN_POSITIVE))
                .expect("sigma validated nonnegative");
            let mut pattern = spec.pattern.clone();
            ndarray::Zip::from(&mut pattern)
                .and(&spec.trigger_mask)
                .for_each(|p, &m| {
                    if m > 0.0 {
                        let n: f64 = if param == 0.0 {
                            0.0
                        } else {
                            normal.sample(&mut rng)
                        };
                        *p = (*p + n).clamp(0.0, 1.0);
                    }
                });
            TriggerSpec::new(
                pattern,
                spec.trigger_mask.clone(),
                spec.target_label,
                spec.kind,
            )?
        }
    };

    Ok(CoverTrigger {
        base: spec.clone(),
        method,
        mask_rate,
        noise_sigma,
        realized_mask,
        seed,
        realized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;

    fn uniform_image(shape: (usize, usize, usize), v: f64) -> Image {
        Array3::from_elem(shape, v)
    }

    fn demo_patch() -> TriggerSpec {
        TriggerSpec::patch(
            (3, 16, 16),
            (10, 10),
            (6, 6),
            &PatternFill::Random { seed: 7 },
            0,
        )
        .unwrap()
    }

    #[test]
    fn apply_identity_when_mask_zero() {
        let shape = (1, 4, 4);
        let x = uniform_image(shape, 0.25);
        let spec = TriggerSpec::new(
            uniform_image(shape, 0.9),
            Image::zeros(shape),
            0,
            TriggerKind::Blended,
        )
        .unwrap();
        let out = apply_trigger(&x, &spec).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn apply_full_replacement_when_mask_one() {
        let shape = (1, 4, 4);
        let x = uniform_image(shape, 0.25);
        let p = uniform_image(shape, 0.9);
        let spec =
            TriggerSpec::new(p.clone(), Image::from_elem(shape, 1.0), 0, TriggerKind::Patch)
                .unwrap();
        let out = apply_trigger(&x, &spec).unwrap();
        assert_eq!(out, p);
    }

    #[test]
    fn patch_replaces_inside_keeps_outside() {
        let spec = demo_patch();
        let x = uniform_image((3, 16, 16), 0.5);
        let out = apply_trigger(&x, &spec).unwrap();
        for ch in 0..3 {
            for i in 0..16 {
                for j in 0..16 {
                    if (10..16).contains(&i) && (10..16).contains(&j) {
                        assert_eq!(out[[ch, i, j]], spec.pattern[[ch, i, j]]);
                    } else {
                        assert_eq!(out[[ch, i, j]], 0.5);
                    }
                }
            }
        }
    }

    #[test]
    fn apply_rejects_shape_mismatch_naming_dimension() {
        let spec = demo_patch();
        let x = uniform_image((3, 16, 8), 0.5);
        let err = apply_trigger(&x, &spec).unwrap_err();
        match err {
            Error::ShapeMismatch {
                dimension, expected, actual, ..
            } => {
                assert_eq!(dimension, 2);
                assert_eq!(expected, 16);
                assert_eq!(actual, 8);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn perturbed_with_zero_delta_matches_apply() {
        let spec = demo_patch();
        let x = uniform_image((3, 16, 16), 0.3);
        let zero = Image::zeros((3, 16, 16));
        let a = apply_trigger(&x, &spec).unwrap();
        let b = apply_perturbed_trigger(&x, &spec, &zero).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn perturbed_single_element() {
        let shape = (1, 2, 2);
        let spec = TriggerSpec::new(
            uniform_image(shape, 0.5),
            Image::from_elem(shape, 1.0),
            0,
            TriggerKind::Patch,
        )
        .unwrap();
        let x = uniform_image(shape, 0.1);
        let mut delta = Image::zeros(shape);
        delta[[0, 0, 0]] = 0.2;
        let out = apply_perturbed_trigger(&x, &spec, &delta).unwrap();
        assert_abs_diff_eq!(out[[0, 0, 0]], 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(out[[0, 0, 1]], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn boundary_endpoints_and_midpoint() {
        let shape = (1, 1, 3);
        let mut pattern = Image::zeros(shape);
        pattern[[0, 0, 0]] = 0.0;
        pattern[[0, 0, 1]] = 1.0;
        pattern[[0, 0, 2]] = 0.5;
        let spec =
            TriggerSpec::new(pattern, Image::from_elem(shape, 1.0), 0, TriggerKind::Patch)
                .unwrap();
        let b = perturbation_boundary(&spec, (0.0, 1.0)).unwrap();
        assert_eq!(b.delta_b[[0, 0, 0]], 1.0);
        assert_eq!(b.delta_b[[0, 0, 1]], -1.0);
        // mid-range tie rounds half away from zero
        assert_eq!(b.delta_b[[0, 0, 2]], -0.5);
    }

    #[test]
    fn boundary_matches_farthest_endpoint_rule() {
        let shape = (1, 1, 1);
        let mut pattern = Image::zeros(shape);
        pattern[[0, 0, 0]] = 0.3;
        let spec =
            TriggerSpec::new(pattern, Image::from_elem(shape, 1.0), 0, TriggerKind::Patch)
                .unwrap();
        let b = perturbation_boundary(&spec, (0.0, 1.0)).unwrap();
        assert_abs_diff_eq!(b.delta_b[[0, 0, 0]], 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(b.l2_norm, b.recomputed_norm(), epsilon = 1e-12);
    }

    #[test]
    fn boundary_zero_outside_support_and_errors_on_empty() {
        let spec = demo_patch();
        let b = perturbation_boundary(&spec, (0.0, 1.0)).unwrap();
        for ch in 0..3 {
            assert_eq!(b.delta_b[[ch, 0, 0]], 0.0);
        }
        let empty = TriggerSpec::new(
            Image::zeros((1, 2, 2)),
            Image::zeros((1, 2, 2)),
            0,
            TriggerKind::Patch,
        )
        .unwrap();
        assert!(matches!(
            perturbation_boundary(&empty, (0.0, 1.0)),
            Err(Error::EmptyTriggerSupport)
        ));
    }

    #[test]
    fn cover_mask_drops_exact_pixel_count() {
        let spec = demo_patch();
        let cover = make_cover_trigger(&spec, CoverMethod::Mask, 0.2, 11).unwrap();
        let dropped: usize = cover.realized_mask.iter().map(|&v| v as usize).sum();
        assert_eq!(dropped, 7); // round(0.2 * 36)
    }

    #[test]
    fn cover_mask_rate_one_is_identity() {
        let spec = demo_patch();
        let cover = make_cover_trigger(&spec, CoverMethod::Mask, 1.0, 3).unwrap();
        let x = uniform_image((3, 16, 16), 0.4);
        let out = cover.apply(&x).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn cover_noise_clips_to_unit_range() {
        let spec = demo_patch();
        let cover = make_cover_trigger(&spec, CoverMethod::Noise, 0.5, 3).unwrap();
        assert!(cover
            .spec()
            .pattern
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn cover_same_seed_is_bit_identical() {
        let spec = demo_patch();
        for method in [CoverMethod::Mask, CoverMethod::RandomSample, CoverMethod::Noise] {
            let param = if method == CoverMethod::Mask { 0.3 } else { 0.1 };
            let a = make_cover_trigger(&spec, method, param, 99).unwrap();
            let b = make_cover_trigger(&spec, method, param, 99).unwrap();
            assert_eq!(a.realized_mask, b.realized_mask);
            assert_eq!(a.spec().pattern, b.spec().pattern);
            assert_eq!(a.spec().trigger_mask, b.spec().trigger_mask);
        }
    }

    #[test]
    fn cover_mask_rate_out_of_range_rejected() {
        let spec = demo_patch();
        assert!(make_cover_trigger(&spec, CoverMethod::Mask, 1.5, 0).is_err());
    }

    #[test]
    fn trigger_doc_roundtrip() {
        let doc = TriggerDoc {
            kind: TriggerKind::Patch,
            target_label: 2,
            position: Some((10, 10)),
            size: Some((6, 6)),
            alpha: None,
            pattern: PatternFill::Random { seed: 7 },
        };
        let text = doc.to_toml().unwrap();
        let back = TriggerDoc::from_toml(&text).unwrap();
        let a = doc.to_spec((3, 16, 16)).unwrap();
        let b = back.to_spec((3, 16, 16)).unwrap();
        assert_eq!(a.pattern, b.pattern);
        assert_eq!(a.target_label, b.target_label);
    }
}
