// Scratch criterion-5 probe (deleted before release).

use causalrec::data::{generate_dataset, GeneratorConfig};
use causalrec::models::{Architecture, ModelConfig};
use causalrec::numeric::with_finite_checks;
use causalrec::training::{accuracy, evaluate, train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3e-3);
    let batch: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(8);
    let users: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let n_seeds: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(5);

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
    let data = generate_dataset(&gen).unwrap();

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
            let mut losses = Vec::new();
            let mut accs = Vec::new();
            for seed in 0..n_seeds {
                let tc = TrainConfig {
                    learning_rate: lr,
                    lr_scale_dhn: 0.5,
                    epochs: 1,
                    batch_size: batch,
                    adam: Default::default(),
                    seed: 1000 + seed,
                    label_clamp: 1e-7,
                };
                let outcome = train::<f64>(&mc, &tc, &data).unwrap();
                let eval = evaluate(&outcome.model, &data, batch, 1e-7).unwrap();
                losses.push(eval.eval_loss);
                accs.push(accuracy(&eval.per_task_probs[0], &eval.per_task_labels[0]));
            }
            let mean = losses.iter().sum::<f64>() / losses.len() as f64;
            let mean_acc = accs.iter().sum::<f64>() / accs.len() as f64;
            println!(
                "{arch}: mean_loss={mean:.5} losses={:?} mean_acc={mean_acc:.4}",
                losses.iter().map(|l| (l * 1e4).round() / 1e4).collect::<Vec<_>>()
            );
        }
    });
}
