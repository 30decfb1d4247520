// Scratch harness for tuning the desk experiment constants.

use abnn_core::attack::AttackConfig;
use abnn_core::eval::{robust_accuracy, steps_sweep, AttackKind};
use abnn_core::net::StochasticModel;
use abnn_core::rng::{derive_rng, derive_seed, rng_from_seed};
use abnn_core::tensor::DType;
use abnn_core::train::{train_defense, DefenseKind, OptimizerKind, TrainConfig};
use abnn_cli::config::SyntheticSpec;
use abnn_cli::synthetic::gen_synthetic_with;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(11);
    let widths: Vec<usize> = args
        .get(2)
        .map(|s| s.split(',').map(|w| w.parse().unwrap()).collect())
        .unwrap_or_else(|| vec![32, 24, 16]);
    let spec = SyntheticSpec {
        classes: 4,
        dim: 24,
        per_class: 135,
        separation: 0.55,
        sigma: 0.09,
    };
    let distribution = derive_seed(seed, 0, 0xF00);
    let data = gen_synthetic_with(&spec, distribution, derive_seed(seed, 1, 0xF00), DType::F32)
        .unwrap();
    let eval_spec = SyntheticSpec { per_class: 250, ..spec.clone() };
    let eval_data =
        gen_synthetic_with(&eval_spec, distribution, derive_seed(seed, 0, 0xF01), DType::F32)
            .unwrap();

    let gamma = 0.15;
    let mut cfg = TrainConfig::defaults_for(DefenseKind::AdvBnnNaive, gamma, seed);
    cfg.epochs = 40;
    cfg.batch_size = 32;
    cfg.learning_rate = 1e-2;
    cfg.optimizer = OptimizerKind::adam_default();
    cfg.kl_weight = 0.1;
    cfg.inner_attack.steps = 10;
    cfg.inner_attack.m_grad = 10;
    cfg.inner_attack.eta = AttackConfig::default_eta(gamma, 10);

    let mut init_rng = derive_rng(seed, 0, 0xF02);
    let mut model =
        StochasticModel::variational_mlp(24, &widths, 4, 1.0, DType::F32, &mut init_rng)
            .unwrap();
    let mut train_rng = rng_from_seed(derive_seed(seed, 0, 0xF03));
    train_defense(&mut model, &data, &cfg, &mut train_rng).unwrap();
    println!("trained: max_sigma {:.3}", model.max_sigma());

    for eval_gamma in [0.135f64, 0.15] {
        let atk = AttackConfig {
            eta: 7.5 * eval_gamma / 150.0,
            m_grad: 10,
            ..AttackConfig::new(eval_gamma, 150, 10, 99)
        };
        let naive = robust_accuracy(
            &model, &eval_data, AttackKind::Naive, &atk, 40, &mut rng_from_seed(2),
        )
        .unwrap()
        .accuracy;
        let averaged = robust_accuracy(
            &model, &eval_data, AttackKind::Averaged, &atk, 40, &mut rng_from_seed(2),
        )
        .unwrap()
        .accuracy;
        println!(
            "gamma {eval_gamma} eta 7.5g/T: naive {naive:.3} averaged {averaged:.3} gap {:.1}pts",
            100.0 * (naive - averaged),
        );
    }
    let _ = steps_sweep;
}
