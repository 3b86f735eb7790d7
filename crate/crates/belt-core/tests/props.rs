//! Randomized invariants over the trigger algebra, poisoning bookkeeping,
//! scan statistics, and serialization.

use belt_core::dataset::{load_packed, save_packed, LabeledDataset, Split};
use belt_core::defense::{histogram_overlap, nc_anomaly_index, Percentiles};
use belt_core::excl::exclusivity_score;
use belt_core::poison::{build_poisoned_dataset, PoisonConfig, SampleTag};
use belt_core::trigger::{
    apply_perturbed_trigger, make_cover_trigger, perturbation_boundary, CoverMethod, PatternFill,
    TriggerSpec,
};
use belt_core::Image;
use proptest::prelude::*;

fn small_trigger(origin: (usize, usize), size: (usize, usize), fill: f64) -> TriggerSpec {
    TriggerSpec::patch((1, 8, 8), origin, size, &PatternFill::Solid { value: fill }, 0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Stamped-and-perturbed outputs stay in [0, 1] and never move an
    /// element off the trigger support, whatever the delta.
    #[test]
    fn perturbed_trigger_clips_and_confines(
        oi in 0usize..5, oj in 0usize..5,
        si in 1usize..4, sj in 1usize..4,
        fill in 0.0f64..=1.0,
        amp in -4.0f64..4.0,
    ) {
        let spec = small_trigger((oi, oj), (si, sj), fill);
        let x = Image::from_shape_fn((1, 8, 8), |(_, i, j)| ((i * 8 + j) % 10) as f64 / 10.0);
        let delta = Image::from_elem((1, 8, 8), amp);
        let out = apply_perturbed_trigger(&x, &spec, &delta).unwrap();
        for ((c, i, j), &v) in out.indexed_iter() {
            prop_assert!((0.0..=1.0).contains(&v));
            let inside = (oi..oi + si).contains(&i) && (oj..oj + sj).contains(&j);
            if !inside {
                prop_assert_eq!(v, x[(c, i, j)]);
            }
        }
    }

    /// The boundary displacement beats every feasible displacement in
    /// magnitude, elementwise.
    #[test]
    fn boundary_is_elementwise_maximal(fill in 0.0f64..=1.0, probe in 0.0f64..=1.0) {
        let spec = small_trigger((2, 2), (3, 3), fill);
        let boundary = perturbation_boundary(&spec, (0.0, 1.0)).unwrap();
        for ((c, i, j), &d) in boundary.delta_b.indexed_iter() {
            if spec.trigger_mask[(c, i, j)] == 0.0 {
                continue;
            }
            let t = spec.pattern[(c, i, j)];
            prop_assert!(d.abs() + 1e-12 >= (probe - t).abs());
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&(t + d)));
        }
    }

    /// Cover triggers are bit-reproducible from their seed.
    #[test]
    fn cover_triggers_reproduce_from_seed(seed in 0u64..1000, rate in 0.1f64..=1.0) {
        let spec = small_trigger((1, 1), (3, 3), 0.5);
        let a = make_cover_trigger(&spec, CoverMethod::Mask, rate, seed).unwrap();
        let b = make_cover_trigger(&spec, CoverMethod::Mask, rate, seed).unwrap();
        prop_assert_eq!(&a.realized_mask, &b.realized_mask);
        prop_assert_eq!(&a.spec().pattern, &b.spec().pattern);
        prop_assert_eq!(&a.spec().input_mask, &b.spec().input_mask);
    }

    /// Poisoning splits the budget exactly and tags every sample.
    #[test]
    fn poison_budget_is_exact(
        rate in 0.0f64..0.3,
        wd in 1.0f64..100.0,
        wc in 0.0f64..100.0,
        seed in 0u64..100,
    ) {
        let images: Vec<Image> = (0..50)
            .map(|k| Image::from_elem((1, 8, 8), k as f64 / 50.0))
            .collect();
        let labels: Vec<usize> = (0..50).map(|k| k % 2).collect();
        let base = LabeledDataset::new(images, labels, 2, Split::Train).unwrap();
        let spec = small_trigger((0, 0), (2, 2), 1.0);
        let cfg = PoisonConfig {
            poison_rate: rate,
            dirty_cover_ratio: (wd, wc),
            seed,
            ..PoisonConfig::default()
        };
        let ds = build_poisoned_dataset(&base, &spec, &cfg).unwrap();
        let n_poison = (rate * 50.0).round() as usize;
        let n_dirty = ((n_poison as f64) * wd / (wd + wc)).round() as usize;
        prop_assert_eq!(ds.dirty.len(), n_dirty);
        prop_assert_eq!(ds.cover.len(), n_poison - n_dirty);
        prop_assert_eq!(ds.total_len(), 50);
        let mut tags = vec![0usize; 3];
        for k in 0..ds.total_len() {
            match ds.get(k).2 {
                SampleTag::Clean => tags[0] += 1,
                SampleTag::Dirty => tags[1] += 1,
                SampleTag::Cover => tags[2] += 1,
            }
        }
        prop_assert_eq!(tags[1], ds.dirty.len());
        prop_assert_eq!(tags[2], ds.cover.len());
    }

    /// The anomaly index is invariant under positive rescaling of the norm
    /// vector.
    #[test]
    fn anomaly_index_scale_invariant(scale in 0.01f64..100.0) {
        let norms = [2.0, 10.0, 11.0, 12.0, 13.0, 14.0, 15.0, 16.0, 17.0, 18.0];
        let scaled: Vec<f64> = norms.iter().map(|v| v * scale).collect();
        let a = nc_anomaly_index(&norms).unwrap();
        let b = nc_anomaly_index(&scaled).unwrap();
        prop_assert!((a.anomaly_index - b.anomaly_index).abs() < 1e-9);
        prop_assert_eq!(a.flagged, b.flagged);
    }

    /// Exclusivity decreases as the found bound grows, and stays in [0, 1].
    #[test]
    fn exclusivity_monotone_in_bound(b1 in 0.0f64..10.0, b2 in 0.0f64..10.0) {
        let boundary = 10.0;
        let (lo, hi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
        let e_lo = exclusivity_score(lo, boundary);
        let e_hi = exclusivity_score(hi, boundary);
        prop_assert!(e_lo >= e_hi);
        prop_assert!((0.0..=1.0).contains(&e_lo));
    }

    /// Histogram overlap is symmetric, bounded, and 1 on identical samples.
    #[test]
    fn overlap_bounded_and_symmetric(
        a in prop::collection::vec(0.0f64..5.0, 5..40),
        b in prop::collection::vec(0.0f64..5.0, 5..40),
    ) {
        let ab = histogram_overlap(&a, &b, 12);
        let ba = histogram_overlap(&b, &a, 12);
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
        prop_assert!((histogram_overlap(&a, &a, 12) - 1.0).abs() < 1e-12);
    }

    /// Percentile summaries are ordered.
    #[test]
    fn percentiles_are_ordered(values in prop::collection::vec(-10.0f64..10.0, 2..50)) {
        let p = Percentiles::of(&values);
        prop_assert!(p.p1 <= p.p25 && p.p25 <= p.p50 && p.p50 <= p.p75 && p.p75 <= p.p99);
    }

    /// Packed save/load round-trips labels exactly and pixels to f32
    /// precision.
    #[test]
    fn packed_roundtrip(seed in 0u64..50) {
        let ds = belt_core::dataset::make_synthetic_dataset(2, 3, (2, 6, 6), seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.beltpack");
        save_packed(&ds, &path).unwrap();
        let back = load_packed(&path).unwrap();
        prop_assert_eq!(&ds.labels, &back.labels);
        for (a, b) in ds.images.iter().zip(back.images.iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() <= 1e-7);
            }
        }
    }
}
