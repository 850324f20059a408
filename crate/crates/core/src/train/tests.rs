use super::*;
use crate::adapters::{
    trainable_param_count, Adapter, AdapterBase, AdapterExtras, AdapterKind, AdapterSpec, LoRAState, NamedTensor,
};
use crate::linalg::Matrix;
use crate::rng::{gaussian_matrix, seeded};

fn linear_task(n: usize, m: usize, samples: usize, seed: u64) -> LinearTask {
    let mut rng = seeded(seed);
    LinearTask {
        x: gaussian_matrix(&mut rng, samples, m, 1.0),
        y: gaussian_matrix(&mut rng, samples, n, 1.0),
    }
}

fn rank_for(kind: AdapterKind) -> usize {
    match kind {
        AdapterKind::OFT => 2,
        AdapterKind::SVDiff => 0,
        _ => 2,
    }
}

fn adapter_model(kind: AdapterKind, seed: u64) -> Model {
    let w = gaussian_matrix(&mut seeded(seed), 6, 9, 1.0);
    let spec = AdapterSpec::new(kind, rank_for(kind))
        .with_seed(seed)
        .with_extras(AdapterExtras {
            lidb_a: 3,
            lidb_b: 4,
            ..AdapterExtras::default()
        });
    Model::with_spec(Task::Linear(linear_task(6, 9, 12, seed + 1)), w, Some(&spec)).unwrap()
}

#[test]
fn zero_init_loss_equals_base_loss() {
    for kind in AdapterKind::ALL {
        let model = adapter_model(kind, 3);
        let Tuning::Adapter { base, .. } = &model.tuning else { unreachable!() };
        let full = Model::new(model.task.clone(), Tuning::Full(base.weight().clone()));
        let tol = 1e-12 * (1.0 + full.loss().unwrap());
        assert!((model.loss().unwrap() - full.loss().unwrap()).abs() <= tol, "{kind}");
    }
    // Kinds whose zero state adds an exact zero reproduce the loss bit-for-bit.
    for kind in [AdapterKind::LoRA, AdapterKind::SpectralA, AdapterKind::SpectralR, AdapterKind::VeRA] {
        let model = adapter_model(kind, 4);
        let Tuning::Adapter { base, .. } = &model.tuning else { unreachable!() };
        let full = Model::new(model.task.clone(), Tuning::Full(base.weight().clone()));
        assert_eq!(model.loss().unwrap(), full.loss().unwrap(), "{kind}");
    }
}

#[test]
fn scalar_lora_gradient_by_hand() {
    // w' = w + a·b on a single sample: L = (w'x − y)², ∂L/∂a = 2(w'x − y)x·b.
    let (w, a, b, x, y) = (0.7, 0.3, -1.2, 2.0, 0.5);
    let task = Task::Linear(LinearTask {
        x: Matrix::from_rows(&[&[x]]),
        y: Matrix::from_rows(&[&[y]]),
    });
    let base = AdapterBase::new(Matrix::from_rows(&[&[w]])).unwrap();
    let state = crate::adapters::AdapterState::LoRA(LoRAState {
        a: Matrix::from_rows(&[&[a]]),
        b: Matrix::from_rows(&[&[b]]),
        scale: 1.0,
    });
    let model = Model::new(task, Tuning::Adapter { base, state });
    let (loss, g) = model.loss_and_grad(None).unwrap();
    let resid = (w + a * b) * x - y;
    assert!((loss - resid * resid).abs() < 1e-15);
    assert!((g[0][0] - 2.0 * resid * x * b).abs() < 1e-14);
    assert!((g[1][0] - 2.0 * resid * x * a).abs() < 1e-14);
}

#[test]
fn grad_check_examples() {
    let mut rng = seeded(11);
    let cases = [
        (AdapterKind::SpectralA, gaussian_matrix(&mut rng, 6, 9, 1.0), 2),
        (AdapterKind::SpectralR, gaussian_matrix(&mut rng, 8, 8, 1.0), 3),
        (AdapterKind::DoRAVector, gaussian_matrix(&mut rng, 16, 1, 1.0), 1),
    ];
    for (kind, base, r) in cases {
        let err = grad_check(kind, &base, r, 5).unwrap();
        assert!(err <= 1e-5, "{kind}: {err}");
    }
}

#[test]
fn toynet_gradients_match_finite_differences() {
    let cfg = ToyNetConfig::default();
    let (net, w1, w2) = planar_toynet(&cfg).unwrap();
    let full = Model::new(Task::ToyNet(net.clone()), Tuning::Full(w1.clone())).with_head(w2.clone());
    let (_, g) = full.loss_and_grad(None).unwrap();
    assert!(max_relative_error(&g, &finite_difference_grad(&full).unwrap()) <= 1e-5);

    for kind in [AdapterKind::SpectralA, AdapterKind::LoRA, AdapterKind::OFT] {
        let r = if kind == AdapterKind::OFT { 2 } else { 1 };
        let mut model = Model::with_spec(Task::ToyNet(net.clone()), w1.clone(), Some(&AdapterSpec::new(kind, r)))
            .unwrap()
            .with_head(w2.clone());
        if let Tuning::Adapter { state, .. } = &mut model.tuning {
            state.perturb(&mut seeded(2), 0.2);
        }
        let (_, g) = model.loss_and_grad(None).unwrap();
        let err = max_relative_error(&g, &finite_difference_grad(&model).unwrap());
        assert!(err <= 1e-5, "{kind}: {err}");
    }
}

#[test]
fn zero_steps_keep_initial_loss() {
    let mut model = adapter_model(AdapterKind::LoRA, 1);
    let initial = model.loss().unwrap();
    let trace = train(&mut model, &TrainConfig { steps: 0, ..TrainConfig::default() }).unwrap();
    assert_eq!(trace.rows.len(), 1);
    assert_eq!(trace.rows[0].loss, initial);
}

#[test]
fn line_search_is_monotone_on_least_squares() {
    let task = linear_task(4, 6, 20, 7);
    let mut model = Model::new(Task::Linear(task), Tuning::Full(Matrix::zeros(4, 6)));
    let cfg = TrainConfig {
        optimizer: OptimizerKind::LineSearch,
        learning_rate: 0.1,
        steps: 50,
        ..TrainConfig::default()
    };
    let trace = train(&mut model, &cfg).unwrap();
    assert_eq!(trace.rows.len(), 51);
    for w in trace.rows.windows(2) {
        assert!(w[1].loss <= w[0].loss);
    }
    assert!(trace.final_loss() < trace.rows[0].loss);
}

#[test]
fn sgd_below_inverse_lipschitz_is_monotone() {
    let task = linear_task(3, 5, 30, 8);
    // Hessian of (1/N)‖XWᵀ − Y‖² is (2/N)·XᵀX per row of W.
    let gram = task.x.t_matmul(&task.x).unwrap().scale(2.0 / 30.0);
    let lipschitz = crate::linalg::svd_thin(&gram).unwrap().s()[0];
    let mut model = Model::new(Task::Linear(task), Tuning::Full(Matrix::zeros(3, 5)));
    let cfg = TrainConfig {
        learning_rate: 0.9 / lipschitz,
        steps: 200,
        ..TrainConfig::default()
    };
    let trace = train(&mut model, &cfg).unwrap();
    for w in trace.rows.windows(2) {
        // Once converged the loss only moves by rounding.
        assert!(w[1].loss <= w[0].loss * (1.0 + 4.0 * f64::EPSILON), "{} -> {} at {}", w[0].loss, w[1].loss, w[1].step);
    }
}

#[test]
fn runs_are_bit_identical() {
    for optimizer in [OptimizerKind::Sgd, OptimizerKind::SgdMomentum, OptimizerKind::AdamW] {
        let cfg = TrainConfig {
            optimizer,
            steps: 30,
            batch_size: Some(5),
            seed: 4,
            ..TrainConfig::default()
        };
        let mut a = adapter_model(AdapterKind::SpectralR, 2);
        let mut b = adapter_model(AdapterKind::SpectralR, 2);
        assert_eq!(train(&mut a, &cfg).unwrap(), train(&mut b, &cfg).unwrap());
    }
}

fn frozen(model: &Model) -> (Matrix, Vec<NamedTensor>) {
    let Tuning::Adapter { base, state } = &model.tuning else { unreachable!() };
    (base.weight().clone(), state.tensors().into_iter().filter(|t| t.frozen).collect())
}

#[test]
fn training_touches_only_trainable_tensors() {
    for kind in AdapterKind::ALL {
        let mut model = adapter_model(kind, 6);
        let before = frozen(&model);
        let cfg = TrainConfig {
            optimizer: OptimizerKind::AdamW,
            learning_rate: 1e-3,
            steps: 20,
            ..TrainConfig::default()
        };
        train(&mut model, &cfg).unwrap().check().unwrap();
        assert_eq!(frozen(&model), before, "{kind}");
        let extras = AdapterExtras {
            lidb_a: 3,
            lidb_b: 4,
            ..AdapterExtras::default()
        };
        assert_eq!(model.num_trainable(), trainable_param_count(kind, 6, 9, rank_for(kind), &extras), "{kind}");
    }
}

#[test]
fn divergence_stops_with_trace() {
    let mut model = Model::new(Task::Linear(linear_task(3, 4, 10, 1)), Tuning::Full(Matrix::zeros(3, 4)));
    let cfg = TrainConfig {
        learning_rate: 50.0,
        steps: 500,
        ..TrainConfig::default()
    };
    let trace = train(&mut model, &cfg).unwrap();
    let step = trace.diverged_at.expect("diverges");
    assert_eq!(trace.rows.len(), step + 1);
    assert!(matches!(trace.check(), Err(crate::Error::Training { .. })));
}

#[test]
fn config_errors_are_listed_together() {
    let cfg = TrainConfig {
        optimizer: OptimizerKind::LineSearch,
        learning_rate: -1.0,
        batch_size: Some(0),
        weight_decay: Some(0.1),
        ..TrainConfig::default()
    };
    assert_eq!(cfg.validate().len(), 4);
    let json = r#"{"optimizer":"adam-w","learning_rate":0.001,"steps":3}"#;
    let parsed: TrainConfig = serde_json::from_str(json).unwrap();
    assert_eq!(parsed.resolved_weight_decay(), ADAMW_WEIGHT_DECAY);
    assert!(serde_json::from_str::<TrainConfig>(r#"{"lr":1}"#).is_err());
}

#[test]
fn trace_csv_layout() {
    let mut model = adapter_model(AdapterKind::LoRA, 1).with_reference(Matrix::zeros(6, 9));
    let trace = train(&mut model, &TrainConfig { steps: 2, ..TrainConfig::default() }).unwrap();
    let csv = trace.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,loss,metric,param_norm");
    assert_eq!(lines.len(), 4);
    assert!(!csv.contains('\r'));
    assert_eq!(lines[1].split(',').count(), 4);
}

#[test]
fn rank_recovery_separates_methods() {
    let rep = experiment_rank_recovery(8, 12, 2, 0, &rank_recovery_default_train()).unwrap();
    assert!((rep.lora_floor - 61f64.sqrt()).abs() < 1e-12);
    assert!(rep.certificate_distance <= 1e-9);
    assert!(rep.spectral.terminal_distance <= 1e-6, "{}", rep.spectral.terminal_distance);
    assert!(rep.lora.terminal_distance >= 0.95 * rep.lora_floor);
    assert_eq!(rep.lora.trainable, rep.spectral.trainable);
}

#[test]
fn rank_recovery_with_rank_zero_stays_put() {
    let cfg = TrainConfig { steps: 10, ..rank_recovery_default_train() };
    let rep = experiment_rank_recovery(8, 12, 0, 0, &cfg).unwrap();
    assert_eq!(rep.lora_floor, 0.0);
    assert!(rep.lora.losses.iter().chain(&rep.spectral.losses).all(|&l| l == rep.lora.losses[0]));
}

#[test]
fn subspace_alignment_converges_with_weight_decay() {
    let rep = experiment_subspace_alignment(&ToyNetConfig::default(), &ToyNetConfig::default_train()).unwrap();
    assert!(!rep.diverged);
    assert!(rep.out_of_plane_max <= 1e-3, "{}", rep.out_of_plane_max);
    assert!(rep.plane_angle <= 1e-2, "{}", rep.plane_angle);
    assert!(rep.projected_objective <= rep.objective);
    assert!(rep.noisy_top_angle <= 5e-2);
    assert!(rep.noisy_neuron_angle > rep.noisy_top_angle);

    let control = ToyNetConfig {
        weight_decay: 0.0,
        ..ToyNetConfig::default()
    };
    let cfg = TrainConfig { steps: 2000, ..ToyNetConfig::default_train() };
    let rep = experiment_subspace_alignment(&control, &cfg).unwrap();
    assert!(rep.out_of_plane_max.is_finite());
}

#[test]
fn loss_compare_matches_budgets() {
    let extras = AdapterExtras::default();
    assert_eq!(match_budget(AdapterKind::SpectralR, 8, 12, 40, &extras), Some(4));
    assert_eq!(match_budget(AdapterKind::OFT, 8, 12, 40, &extras), Some(2));
    assert_eq!(match_budget(AdapterKind::SVDiff, 8, 12, 40, &extras), Some(0));
    assert_eq!(match_budget(AdapterKind::SpectralA, 8, 12, 40, &extras), Some(2));

    let rep = experiment_loss_compare(8, 12, 2, 0, &rank_recovery_default_train()).unwrap();
    assert_eq!(rep.budget, 40);
    let spectral = rep.runs.iter().find(|r| r.kind == Some(AdapterKind::SpectralA)).unwrap();
    assert!(spectral.terminal_distance < rep.lora_floor);
    let csv = rep.to_csv();
    let header = csv.lines().next().unwrap();
    assert_eq!(header, "step,LoRA_r2,SpectralA_r2,SpectralR_r4,OFT_r2,SVDiff,full");
    assert_eq!(csv.lines().count(), 20_002);
}
