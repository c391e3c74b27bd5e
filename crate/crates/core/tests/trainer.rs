use lorasb::adapter::AdapterMethod;
use lorasb::checks::{FD_FLOOR_FRACTION, FD_STEP, FD_TOL};
use lorasb::experiment::{Arm, ExperimentConfig};
use lorasb::init::{InitKind, OptimizerModel};
use lorasb::model::{make_teacher_student_task, Activation, Batch, LayerSpec, LossKind, ModelStack};
use lorasb::optim::{AdamWConfig, OptimizerConfig};
use lorasb::oracle::{fd_relative_error, fd_weight_gradient, sample_coords};
use lorasb::train::{train, GradientPathway, TrainConfig};
use lorasb::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Full-batch SGD estimate: the initialization is the truncated first gradient step.
fn first_step_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.init.optimizer_model = OptimizerModel::Sgd;
    c.init.budget_fraction = 1.0;
    c.init.eta = None;
    c
}

#[test]
fn lora_sb_reaches_a_tenth_of_the_pretrained_svd_baseline() {
    let c = first_step_config();
    let sb = Arm::new("sb", AdapterMethod::LoraSb, InitKind::LoraSb, GradientPathway::Corrected);
    let xs = Arm::new("xs", AdapterMethod::LoraXs, InitKind::PissaStyle, GradientPathway::RawXs);
    let mut wins = 0;
    for seed in 0..10 {
        let task = make_teacher_student_task(&c.task_for(seed)).unwrap();
        let model = task.student(task.w0.clone()).unwrap();
        let a = train(&model, &c.train_config(&sb, seed).unwrap(), &task.data).unwrap();
        let b = train(&model, &c.train_config(&xs, seed).unwrap(), &task.data).unwrap();
        assert_eq!(a.records.len(), b.records.len());
        if a.final_loss < 0.1 * b.final_loss {
            wins += 1;
        }
    }
    assert!(wins >= 8, "only {wins}/10 seeds");
}

fn tanh_stack(seed: u64) -> (ModelStack, Batch) {
    let layers = vec![
        LayerSpec { in_dim: 7, out_dim: 9, activation: Activation::Tanh, has_bias: true },
        LayerSpec { in_dim: 9, out_dim: 8, activation: Activation::Tanh, has_bias: true },
        LayerSpec { in_dim: 8, out_dim: 4, activation: Activation::Identity, has_bias: false },
    ];
    let mut model = ModelStack::random(layers, LossKind::SoftmaxCrossEntropy, seed).unwrap();
    model.set_bias(0, (0..9).map(|i| 0.1 * i as f64 - 0.4).collect()).unwrap();
    model.set_bias(1, (0..8).map(|i| 0.3 - 0.05 * i as f64).collect()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let inputs = Matrix::random_normal(10, 7, 1.0, &mut rng);
    let targets = Matrix::from_fn(10, 4, |i, k| if (i * 3 + 1) % 4 == k { 1.0 } else { 0.0 });
    (model, Batch::new(inputs, targets).unwrap())
}

#[test]
fn three_layer_tanh_backward_matches_finite_differences() {
    for seed in 0..3 {
        let (model, batch) = tanh_stack(seed);
        let (_, _, grads) = model.loss_and_gradients(&batch).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (layer, g) in grads.weights.iter().enumerate() {
            let coords = sample_coords(g.rows(), g.cols(), 100, &mut rng);
            let fd = fd_weight_gradient(&model, &batch, layer, &coords, FD_STEP).unwrap();
            let an: Vec<f64> = coords.iter().map(|&(i, j)| g[(i, j)]).collect();
            let floor = FD_FLOOR_FRACTION * an.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let err = fd_relative_error(&fd, &an, floor);
            assert!(err < FD_TOL, "seed {seed} layer {layer}: {err:e}");
        }
    }
}

#[test]
fn adamw_training_on_a_deep_stack_keeps_invariants() {
    let (model, batch) = tanh_stack(7);
    let base = ExperimentConfig::default();
    let arm = Arm::new("sb", AdapterMethod::LoraSb, InitKind::LoraSb, GradientPathway::Corrected);
    let cfg = TrainConfig {
        optimizer: OptimizerConfig::Adamw(AdamWConfig::default()),
        eta: 1e-2,
        steps: 60,
        batch_size: batch.len(),
        strict: true,
        lemma2_check_every: 1,
        recipe: lorasb::InitRecipe {
            rank: 3,
            sample_budget: batch.len(),
            ..base.train_config(&arm, 0).unwrap().recipe
        },
        ..base.train_config(&arm, 0).unwrap()
    };
    let report = train(&model, &cfg, &batch).unwrap();
    assert!(report.final_loss < report.initial_loss);
    assert!(report.records.iter().all(|r| r.subspace_ok == Some(true)));
    assert_eq!(report.final_adapters.len(), 3);
}
