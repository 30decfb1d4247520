use super::*;
use crate::net::loss::variational_loss_value;
use crate::rng::rng_from_seed;
use crate::tensor::DType;

fn t64(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::from_f64(shape, data).unwrap()
}

fn var_layer(mu_w: Tensor, rho_w: Tensor, mu_b: Tensor, rho_b: Tensor, prior: f64) -> Layer {
    Layer::Variational(GaussianVariationalLayer {
        mu_w,
        rho_w,
        mu_b,
        rho_b,
        prior_sigma: prior,
    })
}

fn softplus_f64(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[test]
fn zero_noise_forward_matches_deterministic_twin_at_mu() {
    let mut rng = rng_from_seed(3);
    let model = StochasticModel::variational_mlp(4, &[5], 3, 1.0, DType::F64, &mut rng).unwrap();
    let affine_layers: Vec<Layer> = model
        .layers()
        .iter()
        .map(|l| match l {
            Layer::Variational(v) => Layer::Affine(AffineLayer {
                weight: v.mu_w.clone(),
                bias: v.mu_b.clone(),
            }),
            Layer::Affine(a) => Layer::Affine(a.clone()),
        })
        .collect();
    let twin = StochasticModel::from_layers(affine_layers, 3).unwrap();

    let x = t64(vec![2, 4], vec![0.3, -0.2, 0.9, 0.0, 1.5, -1.1, 0.4, 0.2]);
    let zeros = NoiseVector::zeros_like(&model);
    let stochastic = model.forward(&x, &zeros).unwrap();
    let deterministic = twin.forward(&x, &NoiseVector::empty()).unwrap();
    assert!(stochastic.bits_eq(&deterministic));
}

#[test]
fn identity_layer_passes_input_through() {
    let layer = var_layer(
        t64(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]),
        t64(vec![2, 2], vec![-20.0; 4]),
        t64(vec![2], vec![0.0, 0.0]),
        t64(vec![2], vec![-20.0; 2]),
        1.0,
    );
    let model = StochasticModel::from_layers(vec![layer], 2).unwrap();
    let x = t64(vec![1, 2], vec![0.2, -0.1]);
    let logits = model
        .forward(&x, &NoiseVector::zeros_like(&model))
        .unwrap();
    assert_eq!(logits.to_f64_vec(), vec![0.2, -0.1]);
}

#[test]
fn two_layer_forward_matches_straight_line_arithmetic() {
    let mut rng = rng_from_seed(42);
    let model = StochasticModel::variational_mlp(3, &[4], 2, 1.0, DType::F64, &mut rng).unwrap();
    let eps = sample_noise(&model, &mut rng_from_seed(7));
    let x = t64(vec![1, 3], vec![0.25, -0.5, 1.0]);
    let logits = model.forward(&x, &eps).unwrap();

    // Independent re-implementation with plain loops.
    let mut h = x.to_f64_vec();
    for (i, layer) in model.layers().iter().enumerate() {
        let v = match layer {
            Layer::Variational(v) => v,
            Layer::Affine(_) => unreachable!(),
        };
        let (rows, cols) = (v.mu_w.shape()[0], v.mu_w.shape()[1]);
        let mu_w = v.mu_w.to_f64_vec();
        let rho_w = v.rho_w.to_f64_vec();
        let mu_b = v.mu_b.to_f64_vec();
        let rho_b = v.rho_b.to_f64_vec();
        let eps_w = eps.get(i, ParamKind::Weight).unwrap().to_f64_vec();
        let eps_b = eps.get(i, ParamKind::Bias).unwrap().to_f64_vec();
        let mut out = vec![0.0; cols];
        for c in 0..cols {
            let mut acc = 0.0;
            for r in 0..rows {
                let w = mu_w[r * cols + c] + softplus_f64(rho_w[r * cols + c]) * eps_w[r * cols + c];
                acc += h[r] * w;
            }
            acc += mu_b[c] + softplus_f64(rho_b[c]) * eps_b[c];
            out[c] = if i + 1 < model.layers().len() {
                acc.max(0.0)
            } else {
                acc
            };
        }
        h = out;
    }

    let got = logits.to_f64_vec();
    for (g, e) in got.iter().zip(&h) {
        assert!((g - e).abs() < 1e-9, "forward {g} vs oracle {e}");
    }
}

#[test]
fn noise_mismatch_lists_missing_and_extra_entries() {
    let mut rng = rng_from_seed(1);
    let model = StochasticModel::variational_mlp(3, &[2], 2, 1.0, DType::F64, &mut rng).unwrap();
    let x = t64(vec![1, 3], vec![0.0, 0.0, 0.0]);

    let mut eps = sample_noise(&model, &mut rng_from_seed(2));
    eps.push(9, ParamKind::Weight, Tensor::zeros(vec![1, 1], DType::F64));
    let err = model.forward(&x, &eps).unwrap_err();
    match err {
        ModelError::NoiseMismatch { missing, extra } => {
            assert!(missing.is_empty());
            assert_eq!(extra, vec!["layer9.weight".to_string()]);
        }
        other => panic!("unexpected error {other:?}"),
    }

    let err = model.forward(&x, &NoiseVector::empty()).unwrap_err();
    match err {
        ModelError::NoiseMismatch { missing, extra } => {
            assert_eq!(missing.len(), 4);
            assert!(extra.is_empty());
        }
        other => panic!("unexpected error {other:?}"),
    }
}

#[test]
fn deterministic_ensemble_equals_single_softmax_for_any_m() {
    let mut rng = rng_from_seed(5);
    let model = StochasticModel::deterministic_mlp(4, &[6], 3, DType::F32, &mut rng);
    let x = Tensor::from_f32(vec![2, 4], vec![0.1, 0.9, -0.4, 0.2, 0.0, 0.3, 0.8, -0.6]).unwrap();
    let reference = softmax_probs_f64(&model.forward(&x, &NoiseVector::empty()).unwrap());
    for m in [1usize, 7, 40] {
        let probs = predict_ensemble(&model, &x, m, &mut rng_from_seed(0)).unwrap();
        assert!(probs.bits_eq(&reference), "m_eval = {m}");
    }
}

#[test]
fn single_member_ensemble_equals_that_forward() {
    let mut rng = rng_from_seed(6);
    let model = StochasticModel::variational_mlp(3, &[4], 2, 1.0, DType::F64, &mut rng).unwrap();
    let x = t64(vec![1, 3], vec![0.5, -0.5, 0.25]);

    let probs = predict_ensemble(&model, &x, 1, &mut rng_from_seed(13)).unwrap();
    let eps = sample_noise(&model, &mut rng_from_seed(13));
    let reference = softmax_probs_f64(&model.forward(&x, &eps).unwrap());
    assert!(probs.bits_eq(&reference));
}

#[test]
fn ensemble_rows_sum_to_one() {
    let mut rng = rng_from_seed(8);
    let model = StochasticModel::variational_mlp(5, &[7, 4], 3, 1.0, DType::F32, &mut rng).unwrap();
    let mut xrng = rng_from_seed(77);
    for trial in 0..5 {
        let x = Tensor::from_f64_values(
            vec![3, 5],
            &(0..15)
                .map(|_| crate::rng::standard_normal(&mut xrng))
                .collect::<Vec<_>>(),
            DType::F32,
        )
        .unwrap();
        let probs = predict_ensemble(&model, &x, 9, &mut rng_from_seed(trial)).unwrap();
        let v = probs.to_f64_vec();
        for r in 0..3 {
            let sum: f64 = v[r * 3..(r + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "row sum {sum}");
        }
    }
}

#[test]
fn vanishing_sigma_recovers_the_deterministic_softmax() {
    let mut rng = rng_from_seed(9);
    let mut model =
        StochasticModel::variational_mlp(4, &[5], 3, 1.0, DType::F64, &mut rng).unwrap();
    let tiny_rho = softplus_inverse(1e-7);
    for spec in model.param_specs() {
        if matches!(spec.1, ParamRole::RhoW | ParamRole::RhoB) {
            let p = model.param_mut(spec.0, spec.1);
            *p = Tensor::from_f64_values(p.shape().to_vec(), &vec![tiny_rho; p.numel()], p.dtype())
                .unwrap();
        }
    }
    assert!(model.max_sigma() <= 1e-6);

    let x = t64(vec![2, 4], vec![0.4, -0.3, 0.8, 0.1, -0.9, 0.6, 0.0, 0.5]);
    let probs = predict_ensemble(&model, &x, 5, &mut rng_from_seed(21)).unwrap();
    let reference =
        softmax_probs_f64(&model.forward(&x, &NoiseVector::zeros_like(&model)).unwrap());
    assert!(probs.max_abs_diff(&reference).unwrap() <= 1e-5);
}

#[test]
fn ensemble_modes_agree_for_deterministic_models() {
    let mut rng = rng_from_seed(14);
    let model = StochasticModel::deterministic_mlp(3, &[4], 2, DType::F64, &mut rng);
    let x = t64(vec![1, 3], vec![0.2, 0.4, -0.6]);
    let p = predict_ensemble_mode(&model, &x, 4, EnsembleMode::AverageProbs, &mut rng_from_seed(0))
        .unwrap();
    let l =
        predict_ensemble_mode(&model, &x, 4, EnsembleMode::AverageLogits, &mut rng_from_seed(0))
            .unwrap();
    assert!(p.max_abs_diff(&l).unwrap() < 1e-12);
}

// -- KL divergence --------------------------------------------------------

fn single_entry_layer(mu: f64, rho: f64, prior: f64) -> GaussianVariationalLayer {
    GaussianVariationalLayer {
        mu_w: t64(vec![1, 1], vec![mu]),
        rho_w: t64(vec![1, 1], vec![rho]),
        // Bias pinned at the prior so only the weight entry contributes.
        mu_b: t64(vec![1], vec![0.0]),
        rho_b: t64(vec![1], vec![rho]),
        prior_sigma: prior,
    }
}

#[test]
fn kl_is_zero_exactly_when_posterior_equals_prior() {
    let rho = 0.54;
    let sigma = softplus_f64(rho);
    let layer = single_entry_layer(0.0, rho, sigma);
    assert_eq!(kl_to_prior(&layer).unwrap(), 0.0);
}

#[test]
fn kl_of_unit_mean_shift_is_one_half() {
    let rho = softplus_inverse(1.0);
    let mut layer = single_entry_layer(1.0, rho, 1.0);
    // Cancel the bias term by keeping it at the prior.
    layer.rho_b = t64(vec![1], vec![rho]);
    let kl = kl_to_prior(&layer).unwrap();
    assert!((kl - 0.5).abs() < 1e-12, "kl {kl}");
}

#[test]
fn kl_is_positive_away_from_the_prior() {
    let mut rng = rng_from_seed(31);
    for _ in 0..10 {
        let mu = crate::rng::standard_normal(&mut rng);
        let rho = crate::rng::standard_normal(&mut rng);
        let layer = single_entry_layer(mu, rho, 1.0);
        let kl = kl_to_prior(&layer).unwrap();
        let at_prior = (mu.abs() < 1e-12) && (softplus_f64(rho) - 1.0).abs() < 1e-12;
        if !at_prior {
            assert!(kl > 0.0, "kl {kl} for mu {mu} rho {rho}");
        }
    }
}

#[test]
fn kl_rejects_non_positive_prior() {
    let layer = single_entry_layer(0.0, 0.0, 0.0);
    assert!(matches!(
        kl_to_prior(&layer),
        Err(ModelError::NonPositivePrior(_))
    ));
}

/// Simpson-rule evaluation of the KL integral, the independent oracle for
/// the closed form.
fn kl_quadrature(mu: f64, sigma: f64, prior: f64) -> f64 {
    let lo = mu - 20.0 * sigma;
    let hi = mu + 20.0 * sigma;
    let n = 40_000usize; // even
    let h = (hi - lo) / n as f64;
    let q = |x: f64| {
        let z = (x - mu) / sigma;
        (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
    };
    let log_ratio = |x: f64| {
        (prior / sigma).ln() - (x - mu) * (x - mu) / (2.0 * sigma * sigma)
            + x * x / (2.0 * prior * prior)
    };
    let f = |x: f64| q(x) * log_ratio(x);
    let mut acc = f(lo) + f(hi);
    for i in 1..n {
        let x = lo + i as f64 * h;
        acc += f(x) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}

#[test]
fn kl_closed_form_matches_quadrature() {
    let mu = 0.5;
    let sigma = 0.3;
    let rho = softplus_inverse(sigma);
    let realized = softplus_f64(rho);
    let layer = single_entry_layer(mu, rho, 1.0);
    // Remove the bias contribution analytically: mu_b = 0, sigma_b = realized.
    let bias_kl = (1.0 / realized).ln() + realized * realized / 2.0 - 0.5;
    let weight_kl = kl_to_prior(&layer).unwrap() - bias_kl;
    let oracle = kl_quadrature(mu, realized, 1.0);
    assert!(
        (weight_kl - oracle).abs() <= 1e-6,
        "closed form {weight_kl} vs quadrature {oracle}"
    );
}

// -- variational loss -----------------------------------------------------

#[test]
fn zero_kl_weight_reduces_to_mean_cross_entropy() {
    let mut rng = rng_from_seed(17);
    let model = StochasticModel::variational_mlp(3, &[4], 2, 1.0, DType::F64, &mut rng).unwrap();
    let x = t64(vec![2, 3], vec![0.1, 0.2, 0.3, -0.1, -0.2, -0.3]);
    let labels = [0usize, 1];
    let eps = sample_noise(&model, &mut rng_from_seed(4));

    let loss = variational_loss_value(&model, &x, &labels, &eps, 0.0, 100).unwrap();

    let logits = model.forward(&x, &eps).unwrap();
    let mut tr = Trace::new();
    let l = tr.constant(logits);
    let ce = tr.cross_entropy_logits(l, &labels).unwrap();
    let mean = tr.mean(ce).unwrap();
    let expected = tr.value(mean).scalar_value().unwrap();
    assert_eq!(loss, expected);
}

#[test]
fn kl_term_vanishes_when_posterior_equals_prior() {
    // Posterior pinned at the realized sigma of rho = 0.3, mu = 0.
    let rho = 0.3;
    let sigma = softplus_f64(rho);
    let layer = var_layer(
        t64(vec![2, 2], vec![0.0; 4]),
        t64(vec![2, 2], vec![rho; 4]),
        t64(vec![2], vec![0.0; 2]),
        t64(vec![2], vec![rho; 2]),
        sigma,
    );
    let model = StochasticModel::from_layers(vec![layer], 2).unwrap();
    let x = t64(vec![1, 2], vec![0.7, -0.4]);
    let eps = sample_noise(&model, &mut rng_from_seed(2));

    let with_kl = variational_loss_value(&model, &x, &[1], &eps, 1.0, 10).unwrap();
    let without = variational_loss_value(&model, &x, &[1], &eps, 0.0, 10).unwrap();
    assert!(
        (with_kl - without).abs() < 1e-12,
        "kl leak {}",
        with_kl - without
    );
}

#[test]
fn loss_matches_straight_line_oracle_on_fixed_seed() {
    let mut rng = rng_from_seed(23);
    let model = StochasticModel::variational_mlp(2, &[3], 2, 1.0, DType::F64, &mut rng).unwrap();
    let x = t64(vec![2, 2], vec![0.3, 0.1, -0.6, 0.9]);
    let labels = [1usize, 0];
    let eps = sample_noise(&model, &mut rng_from_seed(52));
    let kl_weight = 0.7;
    let dataset_size = 50usize;

    let got = variational_loss_value(&model, &x, &labels, &eps, kl_weight, dataset_size).unwrap();

    // Straight-line recomputation.
    let logits = model.forward(&x, &eps).unwrap().to_f64_vec();
    let mut ce_sum = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = &logits[r * 2..(r + 1) * 2];
        let m = row[0].max(row[1]);
        let lse = m + ((row[0] - m).exp() + (row[1] - m).exp()).ln();
        ce_sum += lse - row[y];
    }
    let mut kl = 0.0;
    for layer in model.layers() {
        if let Layer::Variational(v) = layer {
            kl += kl_to_prior(v).unwrap();
        }
    }
    let expected = ce_sum / labels.len() as f64 + kl_weight * kl / dataset_size as f64;
    assert!((got - expected).abs() <= 1e-6, "{got} vs {expected}");
}

#[test]
fn empty_batch_is_an_error() {
    let mut rng = rng_from_seed(2);
    let model = StochasticModel::variational_mlp(2, &[2], 2, 1.0, DType::F64, &mut rng).unwrap();
    let x = t64(vec![1, 2], vec![0.0, 0.0]);
    let eps = sample_noise(&model, &mut rng_from_seed(3));
    let err = variational_loss_value(&model, &x, &[], &eps, 1.0, 10).unwrap_err();
    assert!(matches!(err, ModelError::EmptyBatch));
}
