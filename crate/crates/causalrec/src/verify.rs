//! Self-contained invariant suites behind the `verify` subcommand: oracle
//! equivalence, rotary-encoding properties, mask predicates, leakage
//! probes, gradient checks, and normalized-entropy laws. Each suite reports
//! per-case pass/fail counts; a corruption hook lets tests prove the suites
//! actually detect violations.

use crate::attention::{
    apply_rope_rows, masked_attention_oracle, strict_causal_attention_shifted, AttentionMask,
    ContextRule, RopeParams,
};
use crate::data::task_names;
use crate::models::{Architecture, ForwardMode, Model, ModelConfig, SequenceBatch};
use crate::numeric::{grad_check, Tensor};
use crate::training::normalized_entropy;

/// Deliberate defects injected by tests to confirm the suites catch them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Corruption {
    /// Replace the strict-causal reference mask with one that wrongly
    /// permits the diagonal.
    StrictCausalDiagonal,
}

pub struct SuiteResult {
    pub name: &'static str,
    pub passed: usize,
    pub failures: Vec<String>,
}

impl SuiteResult {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

fn rand_tensor(n: usize, d: usize, seed: u64) -> Tensor<f64> {
    let mut s = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(12345);
    let data: Vec<f64> = (0..n * d)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect();
    Tensor::from_vec(data, &[n, d]).unwrap()
}

fn strict_causal_suite(seed: u64, corruption: Option<Corruption>) -> SuiteResult {
    let mut result = SuiteResult { name: "strict-causal-equivalence", passed: 0, failures: vec![] };
    for n in 1..=24usize {
        for rep in 0..3u64 {
            let base = seed ^ ((n as u64) << 8) ^ rep;
            let q = rand_tensor(n, 8, base);
            let k = rand_tensor(n, 8, base + 1);
            let v = rand_tensor(n, 8, base + 2);
            let fast = match strict_causal_attention_shifted(&q, &k, &v) {
                Ok(t) => t,
                Err(e) => {
                    result.failures.push(format!("N={n}: shifted kernel failed: {e}"));
                    continue;
                }
            };
            let mask = match corruption {
                // The corrupted reference wrongly permits self-attention.
                Some(Corruption::StrictCausalDiagonal) => AttentionMask::causal(n),
                None => AttentionMask::strict_causal(n),
            };
            let slow = masked_attention_oracle(&q, &k, &v, &mask).unwrap();
            match fast.max_abs_diff(&slow) {
                Ok(diff) if diff <= 1e-12 => result.passed += 1,
                Ok(diff) => result.failures.push(format!(
                    "N={n} rep={rep}: query-shift kernel must equal the strict-causal \
                     explicit-mask oracle (diagonal excluded); max abs diff {diff:.3e}"
                )),
                Err(e) => result.failures.push(format!("N={n}: {e}")),
            }
        }
    }
    result
}

fn rope_suite(seed: u64) -> SuiteResult {
    let mut result = SuiteResult { name: "rope-properties", passed: 0, failures: vec![] };
    let params = RopeParams::with_default_base(8, 4096).unwrap();
    for rep in 0..8u64 {
        let x = rand_tensor(1, 8, seed ^ (rep + 1));
        let at0 = apply_rope_rows(&x, &params, &[0]).unwrap();
        if x.max_abs_diff(&at0).unwrap() == 0.0 {
            result.passed += 1;
        } else {
            result.failures.push(format!("rep={rep}: rotation at position 0 is not identity"));
        }
        let rotated = apply_rope_rows(&x, &params, &[37 + rep as usize]).unwrap();
        let norm = |t: &Tensor<f64>| t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm(&x) - norm(&rotated)).abs() <= 1e-10 {
            result.passed += 1;
        } else {
            result.failures.push(format!("rep={rep}: rotation changed the vector norm"));
        }
        let q = rand_tensor(1, 8, seed ^ (rep + 100));
        let k = rand_tensor(1, 8, seed ^ (rep + 200));
        let dot = |qp: usize, kp: usize| -> f64 {
            let qr = apply_rope_rows(&q, &params, &[qp]).unwrap();
            let kr = apply_rope_rows(&k, &params, &[kp]).unwrap();
            qr.data().iter().zip(kr.data()).map(|(a, b)| a * b).sum()
        };
        if (dot(9, 4) - dot(9 + 50, 4 + 50)).abs() <= 1e-10 {
            result.passed += 1;
        } else {
            result.failures.push(format!("rep={rep}: common position shift moved a q·k logit"));
        }
    }
    result
}

fn mask_suite(_seed: u64) -> SuiteResult {
    let mut result = SuiteResult { name: "mask-predicates", passed: 0, failures: vec![] };
    for (seq, ctx) in [(5usize, 3usize), (6, 0), (6, 6), (9, 4)] {
        for rule in [ContextRule::Causal, ContextRule::StrictCausal] {
            let mask = AttentionMask::candidate_isolation(seq, ctx, rule).unwrap();
            let matrix = mask.permit_matrix();
            let mut bad = 0;
            for q in 0..seq {
                for k in 0..seq {
                    let want = if q < ctx { rule.permits(q, k) && k < ctx } else { k < ctx };
                    if matrix[q * seq + k] != want {
                        bad += 1;
                    }
                }
            }
            if bad == 0 {
                result.passed += 1;
            } else {
                result.failures.push(format!(
                    "seq={seq} ctx={ctx} {rule:?}: {bad} cells violate the isolation predicate"
                ));
            }
        }
    }
    result
}

fn verify_config(arch: Architecture) -> ModelConfig {
    ModelConfig {
        architecture: arch,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        lambda: 1.0,
        n_tasks: 3,
        mmoe_experts: 2,
        late_fusion_dim: 4,
        d_item: 2,
        d_action: 3,
        rope_base: crate::attention::DEFAULT_ROPE_BASE,
        max_seq_len: 64,
        dhn_action_first: false,
    }
}

fn batch_with(
    cfg: &ModelConfig,
    seq: usize,
    items: Tensor<f64>,
    actions: Tensor<f64>,
    seed: u64,
) -> SequenceBatch<f64> {
    let labels: Vec<f64> =
        (0..seq * cfg.n_tasks).map(|i| ((i * 7 + 3) % 5 < 2) as u8 as f64).collect();
    SequenceBatch::new(
        items,
        actions,
        Tensor::from_vec(labels, &[1, seq, cfg.n_tasks]).unwrap(),
        rand_tensor(seq, cfg.late_fusion_dim, seed)
            .reshape(&[1, seq, cfg.late_fusion_dim])
            .unwrap(),
        vec![seq],
        vec![seq],
    )
    .unwrap()
}

fn leakage_suite(seed: u64) -> SuiteResult {
    let mut result = SuiteResult { name: "leakage-probes", passed: 0, failures: vec![] };
    let seq = 6usize;
    for arch in Architecture::ALL {
        let cfg = verify_config(arch);
        let model = Model::<f64>::new(&cfg, seed ^ 0xA5).unwrap();
        let items = rand_tensor(seq, cfg.d_item, seed + 1).reshape(&[1, seq, cfg.d_item]).unwrap();
        let actions =
            rand_tensor(seq, cfg.d_action, seed + 2).reshape(&[1, seq, cfg.d_action]).unwrap();
        let batch = batch_with(&cfg, seq, items.clone(), actions.clone(), seed + 3);
        let base = model.forward(&batch, ForwardMode::Train).unwrap();
        let mut violations = Vec::new();
        for m in 0..seq {
            let mut bumped = actions.data().to_vec();
            for f in 0..cfg.d_action {
                bumped[m * cfg.d_action + f] += 2.0;
            }
            let bumped = Tensor::from_vec(bumped, &[1, seq, cfg.d_action]).unwrap();
            let out = model
                .forward(&batch_with(&cfg, seq, items.clone(), bumped, seed + 3), ForwardMode::Train)
                .unwrap();
            for n in 0..=m {
                let a = &base.logits.data()[n * cfg.n_tasks..(n + 1) * cfg.n_tasks];
                let b = &out.logits.data()[n * cfg.n_tasks..(n + 1) * cfg.n_tasks];
                if a != b {
                    violations.push(format!("a_{m} moved logits at step {n}"));
                }
            }
        }
        if violations.is_empty() {
            result.passed += 1;
        } else {
            result
                .failures
                .push(format!("{arch}: action inputs leaked: {}", violations.join(", ")));
        }
    }
    result
}

fn gradient_suite(seed: u64) -> SuiteResult {
    let mut result = SuiteResult { name: "gradient-checks", passed: 0, failures: vec![] };
    let seq = 4usize;
    for arch in Architecture::ALL {
        let mut cfg = verify_config(arch);
        cfg.n_layers = 1;
        let model = Model::<f64>::new(&cfg, seed ^ 0x5A).unwrap();
        let actions =
            rand_tensor(seq, cfg.d_action, seed + 5).reshape(&[1, seq, cfg.d_action]).unwrap();
        let item_data = rand_tensor(seq, cfg.d_item, seed + 4);
        let x = Tensor::param(item_data.data().to_vec(), &[1, seq, cfg.d_item]).unwrap();
        let f = |x: &Tensor<f64>| {
            let batch = batch_with(&cfg, seq, x.clone(), actions.clone(), seed + 6);
            let out = model
                .forward(&batch, ForwardMode::Train)
                .map_err(|e| crate::numeric::NumericError::Contract(e.to_string()))?;
            let mask = batch.loss_mask(false);
            out.logits.masked_bce_sum(&batch.labels, std::sync::Arc::new(mask), 1e-7)
        };
        match grad_check(f, &x, 1e-5) {
            Ok(err) if err <= 1e-5 => result.passed += 1,
            Ok(err) => result
                .failures
                .push(format!("{arch}: gradient mismatch, max relative error {err:.3e}")),
            Err(e) => result.failures.push(format!("{arch}: gradient check failed: {e}")),
        }
    }
    result
}

fn ne_suite(_seed: u64) -> SuiteResult {
    let mut result = SuiteResult { name: "ne-metric-laws", passed: 0, failures: vec![] };
    let labels: Vec<f64> = (0..24).map(|i| ((i % 3) == 0) as u8 as f64).collect();
    let base = labels.iter().sum::<f64>() / labels.len() as f64;
    match normalized_entropy(&vec![base; labels.len()], &labels) {
        Ok(ne) if (ne - 1.0).abs() <= 1e-9 => result.passed += 1,
        Ok(ne) => result.failures.push(format!("constant base-rate predictor scored NE {ne}")),
        Err(e) => result.failures.push(format!("constant predictor NE failed: {e}")),
    }
    let clamp = 1e-7;
    let mut prev = f64::INFINITY;
    let mut monotone = true;
    for step in 0..=8 {
        let alpha = step as f64 / 8.0;
        let probs: Vec<f64> = labels
            .iter()
            .map(|&y| (1.0 - alpha) * base + alpha * if y > 0.5 { 1.0 - clamp } else { clamp })
            .collect();
        let ne = normalized_entropy(&probs, &labels).unwrap();
        if ne > prev + 1e-12 {
            monotone = false;
        }
        prev = ne;
    }
    if monotone {
        result.passed += 1;
    } else {
        result.failures.push("NE rose while interpolating toward the truth".into());
    }
    for t in task_names(3) {
        // Names are fixed; the report columns depend on them.
        if ["long_dwell", "contribution", "like"].contains(&t.as_str()) {
            result.passed += 1;
        } else {
            result.failures.push(format!("unexpected task name {t}"));
        }
    }
    result
}

/// Runs every suite. `corruption` injects a deliberate defect so tests can
/// confirm the affected suite fails and names the broken invariant.
pub fn run_all(seed: u64, corruption: Option<Corruption>) -> Vec<SuiteResult> {
    vec![
        strict_causal_suite(seed, corruption),
        rope_suite(seed),
        mask_suite(seed),
        leakage_suite(seed),
        gradient_suite(seed),
        ne_suite(seed),
    ]
}

pub fn all_passed(results: &[SuiteResult]) -> bool {
    results.iter().all(SuiteResult::ok)
}

/// One line per suite plus failure details.
pub fn render(results: &[SuiteResult]) -> String {
    let mut out = String::new();
    for r in results {
        out.push_str(&format!(
            "{:<26} {} ({} passed, {} failed)\n",
            r.name,
            if r.ok() { "PASS" } else { "FAIL" },
            r.passed,
            r.failures.len()
        ));
        for f in &r.failures {
            out.push_str(&format!("    {f}\n"));
        }
    }
    out
}
