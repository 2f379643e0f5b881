// Scratch hyperparameter probe (deleted before release).

use causalrec::data::{bayes_optimal_accuracy, generate_dataset, GeneratorConfig};
use causalrec::models::{Architecture, ModelConfig};
use causalrec::numeric::with_finite_checks;
use causalrec::training::{accuracy, evaluate, train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3e-3);
    let batch: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(8);
    let users: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(2000);

    let gen = GeneratorConfig {
        n_users: users,
        n_categories: 2,
        items_per_category: 50,
        seq_len: 64,
        noise_rate: 0.05,
        n_tasks: 3,
        label_correlation: vec![0.0, 0.15, 0.25],
        candidate_fraction: 0.25,
        seed: 2024,
        feature_jitter: 0.1,
        continuous_dwell: false,
        fixed_preferences: None,
    };
    println!("bayes optimum: {}", bayes_optimal_accuracy(&gen));
    let data = generate_dataset(&gen).unwrap();

    let tc = TrainConfig {
        learning_rate: lr,
        lr_scale_dhn: 0.5,
        epochs: 1,
        batch_size: batch,
        adam: Default::default(),
        seed: 7,
        label_clamp: 1e-7,
    };

    with_finite_checks(false, || {
        for arch in [Architecture::AttnLfa, Architecture::AttnMvp, Architecture::AttnMvpNoLfa] {
            let mc = ModelConfig {
                architecture: arch,
                d_model: 32,
                n_layers: 2,
                n_heads: 4,
                lambda: 1.0,
                n_tasks: gen.n_tasks,
                mmoe_experts: 4,
                late_fusion_dim: gen.late_fusion_dim(),
                d_item: gen.d_item(),
                d_action: gen.d_action(),
                rope_base: 10000.0,
                max_seq_len: 64,
                dhn_action_first: false,
            };
            let t0 = std::time::Instant::now();
            let outcome = train::<f64>(&mc, &tc, &data).unwrap();
            let eval = evaluate(&outcome.model, &data, tc.batch_size, tc.label_clamp).unwrap();
            let acc = accuracy(&eval.per_task_probs[0], &eval.per_task_labels[0]);
            println!(
                "{arch}: lr={lr} batch={batch} acc={acc:.4} eval_loss={:.4} first_loss={:.4} last_loss={:.4} wall={:.1}s",
                eval.eval_loss,
                outcome.loss_trajectory.first().unwrap(),
                outcome.loss_trajectory.last().unwrap(),
                t0.elapsed().as_secs_f64()
            );
        }
    });
}
