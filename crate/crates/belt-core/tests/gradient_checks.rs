//! Central finite-difference verification of every analytic gradient the
//! optimizers consume: classifier parameter grads, input grads, the bound
//! search objective in all modes, and the trigger-reversal objective.

use belt_core::defense::nc::nc_objective_and_gradient;
use belt_core::excl::{objective_and_gradient, GradientModel, ObjectiveMode};
use belt_core::model::{FeatureSplitClassifier, ModelConfig};
use belt_core::nn::cross_entropy;
use belt_core::poison::SampleTag;
use belt_core::train::{loss_do, BatchSample};
use belt_core::trigger::{perturbation_boundary, PatternFill, TriggerSpec};
use belt_core::Image;
use ndarray::{Array1, Array2};

const H: f64 = 1e-5;
const TOL: f64 = 1e-3;

fn tiny_model(seed: u64) -> FeatureSplitClassifier {
    FeatureSplitClassifier::init(ModelConfig::desk((2, 8, 8), 3, seed)).unwrap()
}

fn tiny_input(salt: usize) -> Image {
    Image::from_shape_fn((2, 8, 8), |(c, i, j)| {
        ((salt + c * 31 + i * 7 + j * 3) % 17) as f64 / 17.0
    })
}

fn rel_l2(analytic: &[f64], fd: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(fd)
        .map(|(a, f)| (a - f) * (a - f))
        .sum::<f64>()
        .sqrt();
    let denom: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / denom.max(1e-12)
}

#[test]
fn classifier_parameter_gradients_match_finite_differences() {
    let model = tiny_model(3);
    let images: Vec<Image> = (0..4).map(tiny_input).collect();
    let labels = [0usize, 1, 2, 0];
    let batch: Vec<BatchSample> = images
        .iter()
        .zip(labels.iter())
        .map(|(image, &label)| BatchSample {
            image,
            label,
            tag: SampleTag::Clean,
        })
        .collect();

    // analytic: mean-CE gradient assembled like the trainer
    let b = batch.len() as f64;
    let mut grads = None;
    for s in &batch {
        let trace = model.forward_trace(s.image).unwrap();
        let (_, mut d_logits) = cross_entropy(&trace.logits, s.label);
        d_logits.mapv_inplace(|v| v / b);
        let (g, _) = model.backward(&trace, &d_logits, None);
        match &mut grads {
            None => grads = Some(g),
            Some(acc) => acc.add_assign(&g),
        }
    }
    let analytic = FeatureSplitClassifier::grads_flat(&grads.unwrap());

    let params = model.params_flat();
    let mut probe = model.clone();
    let stride = (params.len() / 64).max(1);
    let mut an = Vec::new();
    let mut fd = Vec::new();
    for k in (0..params.len()).step_by(stride) {
        let mut p = params.clone();
        p[k] += H;
        probe.set_params_flat(&p).unwrap();
        let fp = loss_do(&probe, &batch).unwrap();
        p[k] -= 2.0 * H;
        probe.set_params_flat(&p).unwrap();
        let fm = loss_do(&probe, &batch).unwrap();
        an.push(analytic[k]);
        fd.push((fp - fm) / (2.0 * H));
    }
    let err = rel_l2(&an, &fd);
    assert!(err <= TOL, "parameter gradient relative error {err:.3e}");
}

#[test]
fn input_gradient_matches_finite_differences() {
    let model = tiny_model(5);
    let x = tiny_input(9);
    // scalar objective: weighted logit combination with fixed coefficients
    let coeffs = Array1::from_vec(vec![0.7, -0.3, 0.4]);
    let weights = coeffs.clone();
    let (_, d_input) = model
        .logits_with_input_grad(&x, &move |_| weights.clone())
        .unwrap();

    let mut an = Vec::new();
    let mut fd = Vec::new();
    for (idx, _) in x.indexed_iter().step_by(7) {
        let mut plus = x.clone();
        plus[idx] += H;
        let mut minus = x.clone();
        minus[idx] -= H;
        let fp = model.logits(&plus).unwrap().dot(&coeffs);
        let fm = model.logits(&minus).unwrap().dot(&coeffs);
        an.push(d_input[idx]);
        fd.push((fp - fm) / (2.0 * H));
    }
    let err = rel_l2(&an, &fd);
    assert!(err <= TOL, "input gradient relative error {err:.3e}");
}

#[test]
fn bound_search_objective_gradient_matches_finite_differences() {
    let model = tiny_model(7);
    let x = tiny_input(2);
    let spec = TriggerSpec::patch(
        (2, 8, 8),
        (1, 1),
        (4, 4),
        &PatternFill::Solid { value: 0.4 },
        2,
    )
    .unwrap();
    let boundary = perturbation_boundary(&spec, (0.0, 1.0)).unwrap();

    // interior delta on the support, away from the clip edges
    let mut delta = Image::zeros((2, 8, 8));
    for ((c, i, j), v) in delta.indexed_iter_mut() {
        if (1..5).contains(&i) && (1..5).contains(&j) {
            *v = ((c + 2 * i + j) % 7) as f64 / 100.0 - 0.03;
        }
    }

    for mode in ObjectiveMode::ALL {
        let (_, grad) =
            objective_and_gradient(&model, &x, &spec, &delta, &boundary.delta_b, 0.3, mode)
                .unwrap();
        let mut an = Vec::new();
        let mut fd = Vec::new();
        for ((c, i, j), _) in delta.indexed_iter() {
            if !((1..5).contains(&i) && (1..5).contains(&j)) {
                continue;
            }
            let mut plus = delta.clone();
            plus[(c, i, j)] += H;
            let mut minus = delta.clone();
            minus[(c, i, j)] -= H;
            let (fp, _) =
                objective_and_gradient(&model, &x, &spec, &plus, &boundary.delta_b, 0.3, mode)
                    .unwrap();
            let (fm, _) =
                objective_and_gradient(&model, &x, &spec, &minus, &boundary.delta_b, 0.3, mode)
                    .unwrap();
            an.push(grad[(c, i, j)]);
            fd.push((fp - fm) / (2.0 * H));
        }
        let err = rel_l2(&an, &fd);
        assert!(err <= TOL, "{mode} objective gradient relative error {err:.3e}");
    }
}

#[test]
fn off_support_objective_gradient_is_zero() {
    let model = tiny_model(7);
    let x = tiny_input(4);
    let spec = TriggerSpec::patch(
        (2, 8, 8),
        (1, 1),
        (3, 3),
        &PatternFill::Solid { value: 0.5 },
        1,
    )
    .unwrap();
    let boundary = perturbation_boundary(&spec, (0.0, 1.0)).unwrap();
    let delta = Image::zeros((2, 8, 8));
    let (_, grad) =
        objective_and_gradient(&model, &x, &spec, &delta, &boundary.delta_b, 0.1, ObjectiveMode::Full)
            .unwrap();
    for ((_, i, j), &g) in grad.indexed_iter() {
        if !((1..4).contains(&i) && (1..4).contains(&j)) {
            assert_eq!(g, 0.0, "gradient leaked off the trigger support at ({i},{j})");
        }
    }
}

#[test]
fn reversal_objective_gradient_matches_finite_differences() {
    let model = tiny_model(11);
    let images: Vec<Image> = (0..3).map(tiny_input).collect();
    let inputs: Vec<&Image> = images.iter().collect();
    let theta_m = Array2::from_shape_fn((8, 8), |(i, j)| ((i * 8 + j) % 9) as f64 / 4.0 - 1.0);
    let theta_p = Image::from_shape_fn((2, 8, 8), |(c, i, j)| {
        ((c * 64 + i * 8 + j) % 11) as f64 / 5.0 - 1.0
    });
    let beta = 0.02;
    let target = 1usize;

    let (_, _, d_theta_m, d_theta_p) =
        nc_objective_and_gradient(&model, &inputs, target, &theta_m, &theta_p, beta).unwrap();

    let loss_at = |tm: &Array2<f64>, tp: &Image| {
        nc_objective_and_gradient(&model, &inputs, target, tm, tp, beta)
            .unwrap()
            .0
    };

    let mut an = Vec::new();
    let mut fd = Vec::new();
    for ((i, j), _) in theta_m.indexed_iter().step_by(5) {
        let mut plus = theta_m.clone();
        plus[(i, j)] += H;
        let mut minus = theta_m.clone();
        minus[(i, j)] -= H;
        an.push(d_theta_m[(i, j)]);
        fd.push((loss_at(&plus, &theta_p) - loss_at(&minus, &theta_p)) / (2.0 * H));
    }
    for (idx, _) in theta_p.indexed_iter().step_by(11) {
        let mut plus = theta_p.clone();
        plus[idx] += H;
        let mut minus = theta_p.clone();
        minus[idx] -= H;
        an.push(d_theta_p[idx]);
        fd.push((loss_at(&theta_m, &plus) - loss_at(&theta_m, &minus)) / (2.0 * H));
    }
    let err = rel_l2(&an, &fd);
    assert!(err <= TOL, "reversal gradient relative error {err:.3e}");
}

#[test]
fn center_loss_feature_gradient_matches_finite_differences() {
    use belt_core::train::{loss_mc, CenterBank};

    // d loss_mc / d f = 2 (f − C) / (d · n) for a single dirty feature
    let mut bank = CenterBank::new(2, 4, 0.9).unwrap();
    bank.update(
        &[Array1::from_vec(vec![0.1, 0.2, 0.3, 0.4])],
        &[1],
    )
    .unwrap();
    let f = Array1::from_vec(vec![0.5, -0.2, 0.8, 0.0]);
    let center = bank.center(1).unwrap().to_owned();
    let analytic: Array1<f64> = (&f - &center).mapv(|v| v * 2.0 / 4.0);

    for k in 0..4 {
        let mut plus = f.clone();
        plus[k] += H;
        let mut minus = f.clone();
        minus[k] -= H;
        let fp = loss_mc(&[plus], &[], &[], &bank, 1).unwrap();
        let fm = loss_mc(&[minus], &[], &[], &bank, 1).unwrap();
        let fd = (fp - fm) / (2.0 * H);
        assert!(
            (analytic[k] - fd).abs() <= TOL * fd.abs().max(1.0),
            "feature gradient coord {k}: analytic {} vs fd {fd}",
            analytic[k]
        );
    }
}
