use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DataError, Event, GeneratorConfig, Result, UserSequence};

const USER_SALT: u64 = 0x75736572;
const ITEM_SALT: u64 = 0x6974656d;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

pub(crate) fn derived_seed(seed: u64, salt: u64, index: u64) -> u64 {
    splitmix(seed ^ splitmix(salt.wrapping_add(index.wrapping_mul(0x9e3779b97f4a7c15))))
}

/// Acklam's rational approximation of the standard normal quantile,
/// accurate to ~1e-9 over (0, 1).
fn probit(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    let p_low = 0.02425;
    if p < p_low {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - p_low {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -probit(1.0 - p)
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Item feature vector: category one-hot plus a small jitter that is stable
/// per item id, so recurring items look identical but distinct items within
/// a category do not collapse.
fn item_features(cfg: &GeneratorConfig, item_id: u64, category: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(cfg.seed, ITEM_SALT, item_id));
    (0..cfg.n_categories)
        .map(|c| {
            let base = if c == category { 1.0 } else { 0.0 };
            let jitter = cfg.feature_jitter * standard_normal(&mut rng);
            (base + jitter) as f32
        })
        .collect()
}

/// Generates one user's sequence. The preference is a uniform sign
/// assignment over categories (or a fixed one from the config), items are
/// sampled uniformly, and the primary label is "preferred category" flipped
/// with probability `noise_rate` — or, in continuous mode, a thresholded
/// log-normal dwell time with the same flip probability. Auxiliary labels
/// are correlated flips of the primary.
pub fn generate_user(cfg: &GeneratorConfig, user_index: u64) -> Result<UserSequence> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(cfg.seed, USER_SALT, user_index));
    let preference: Vec<i8> = match &cfg.fixed_preferences {
        Some(prefs) => prefs[user_index as usize % prefs.len()].clone(),
        None => (0..cfg.n_categories).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect(),
    };
    // Quantile for the continuous-dwell threshold: P(dwell > τ | preferred)
    // = 1 − noise_rate with τ = 1 in log-space 0.
    let z = if cfg.continuous_dwell { probit(1.0 - cfg.noise_rate) } else { 0.0 };

    let mut events = Vec::with_capacity(cfg.seq_len);
    for k in 0..cfg.seq_len {
        let category = rng.gen_range(0..cfg.n_categories);
        let slot = rng.gen_range(0..cfg.items_per_category);
        let item_id = (category * cfg.items_per_category + slot) as u64;
        let preferred = preference[category] > 0;

        let primary = if cfg.continuous_dwell {
            let mu = if preferred { z } else { -z };
            let dwell = (mu + standard_normal(&mut rng)).exp();
            dwell > 1.0
        } else {
            preferred ^ rng.gen_bool(cfg.noise_rate)
        };
        let labels: Vec<u8> = (0..cfg.n_tasks)
            .map(|t| {
                let flipped =
                    if t == 0 { primary } else { primary ^ rng.gen_bool(cfg.label_correlation[t]) };
                flipped as u8
            })
            .collect();

        events.push(Event {
            item_id,
            category_id: category as u32,
            features: item_features(cfg, item_id, category),
            timestamp: (k + 1) as u64,
            labels,
        });
    }
    Ok(UserSequence {
        user_id: user_index,
        preference,
        context_len: cfg.context_len(),
        events,
    })
}

pub fn generate_dataset(cfg: &GeneratorConfig) -> Result<Vec<UserSequence>> {
    cfg.validate()?;
    (0..cfg.n_users as u64).map(|u| generate_user(cfg, u)).collect()
}

/// Accuracy of the predictor that knows each user's preference vector:
/// it is wrong exactly when the label flips, so 1 − noise_rate.
pub fn bayes_optimal_accuracy(cfg: &GeneratorConfig) -> f64 {
    1.0 - cfg.noise_rate
}

/// Accuracy of a preference-blind predictor on balanced data.
pub fn preference_blind_accuracy() -> f64 {
    0.5
}

/// Per-event counting features over STRICTLY prior events: impressions so
/// far, then positives so far for each task. Event 0 is all zeros.
pub fn synth_late_fusion(seq: &UserSequence) -> Vec<Vec<u64>> {
    let n_tasks = seq.events.first().map_or(0, |e| e.labels.len());
    let mut impressions = 0u64;
    let mut positives = vec![0u64; n_tasks];
    seq.events
        .iter()
        .map(|event| {
            let mut row = Vec::with_capacity(1 + n_tasks);
            row.push(impressions);
            row.extend_from_slice(&positives);
            impressions += 1;
            for (p, &l) in positives.iter_mut().zip(&event.labels) {
                *p += l as u64;
            }
            row
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::small_config;

    fn fig3_config() -> GeneratorConfig {
        GeneratorConfig {
            n_users: 2,
            n_categories: 2,
            items_per_category: 4,
            seq_len: 8,
            noise_rate: 0.0,
            n_tasks: 1,
            label_correlation: vec![0.0],
            candidate_fraction: 0.25,
            seed: 3,
            feature_jitter: 0.05,
            continuous_dwell: false,
            fixed_preferences: Some(vec![vec![1, -1], vec![-1, 1]]),
        }
    }

    #[test]
    fn fig3_users_have_deterministic_opposed_labels() {
        // User A: every category-0 event labeled 1, category-1 labeled 0.
        // User B is the mirror image.
        let cfg = fig3_config();
        let a = generate_user(&cfg, 0).unwrap();
        let b = generate_user(&cfg, 1).unwrap();
        for e in &a.events {
            assert_eq!(e.labels[0], (e.category_id == 0) as u8);
        }
        for e in &b.events {
            assert_eq!(e.labels[0], (e.category_id == 1) as u8);
        }
    }

    #[test]
    fn uninformative_noise_rate_is_rejected() {
        let mut cfg = small_config();
        cfg.noise_rate = 0.5;
        assert!(matches!(generate_user(&cfg, 0).unwrap_err(), DataError::Config(_)));
    }

    #[test]
    fn population_base_rate_concentrates_on_half() {
        let mut cfg = small_config();
        cfg.n_users = 700;
        cfg.seq_len = 16; // 11_200 events ≥ 10⁴
        let data = generate_dataset(&cfg).unwrap();
        let mut positives = 0u64;
        let mut total = 0u64;
        for seq in &data {
            for e in &seq.events {
                positives += e.labels[0] as u64;
                total += 1;
            }
        }
        let rate = positives as f64 / total as f64;
        let sigma = (0.25 / total as f64).sqrt();
        assert!(
            (rate - 0.5).abs() <= 3.0 * sigma,
            "base rate {rate} strays beyond 3σ = {}",
            3.0 * sigma
        );
    }

    #[test]
    fn bayes_optimum_is_one_minus_noise() {
        let mut cfg = small_config();
        cfg.noise_rate = 0.0;
        // validate() would reject 0 noise for continuous mode only.
        assert_eq!(bayes_optimal_accuracy(&cfg), 1.0);
        cfg.noise_rate = 0.1;
        assert!((bayes_optimal_accuracy(&cfg) - 0.9).abs() < 1e-15);
        assert_eq!(preference_blind_accuracy(), 0.5);
    }

    #[test]
    fn oracle_predictor_matches_closed_form_accuracy() {
        // Monte Carlo over ≥ 10⁵ events: predicting "preferred category"
        // scores within ±0.005 of 1 − noise_rate.
        let mut cfg = small_config();
        cfg.n_users = 1600;
        cfg.seq_len = 64;
        cfg.noise_rate = 0.12;
        let data = generate_dataset(&cfg).unwrap();
        let mut hits = 0u64;
        let mut total = 0u64;
        for seq in &data {
            for e in &seq.events {
                let predicted = (seq.preference[e.category_id as usize] > 0) as u8;
                hits += (predicted == e.labels[0]) as u64;
                total += 1;
            }
        }
        assert!(total >= 100_000);
        let acc = hits as f64 / total as f64;
        assert!(
            (acc - bayes_optimal_accuracy(&cfg)).abs() <= 0.005,
            "oracle accuracy {acc} vs closed form {}",
            bayes_optimal_accuracy(&cfg)
        );
    }

    #[test]
    fn continuous_dwell_threshold_matches_noise_semantics() {
        let mut cfg = small_config();
        cfg.continuous_dwell = true;
        cfg.noise_rate = 0.2;
        cfg.n_users = 1000;
        cfg.seq_len = 32;
        let data = generate_dataset(&cfg).unwrap();
        let mut hits = 0u64;
        let mut total = 0u64;
        for seq in &data {
            for e in &seq.events {
                let predicted = (seq.preference[e.category_id as usize] > 0) as u8;
                hits += (predicted == e.labels[0]) as u64;
                total += 1;
            }
        }
        let acc = hits as f64 / total as f64;
        let sigma = (0.2 * 0.8 / total as f64).sqrt();
        assert!(
            (acc - 0.8).abs() <= 4.0 * sigma + 1e-9,
            "dwell-threshold accuracy {acc} should track 1 − noise = 0.8"
        );
    }

    #[test]
    fn late_fusion_counts_match_brute_force_tally() {
        let cfg = small_config();
        let seq = generate_user(&cfg, 3).unwrap();
        let counts = synth_late_fusion(&seq);
        assert!(counts[0].iter().all(|&c| c == 0), "event 0 must see empty history");
        for n in 0..seq.events.len() {
            assert_eq!(counts[n][0], n as u64);
            for t in 0..cfg.n_tasks {
                let tally: u64 =
                    seq.events[..n].iter().map(|e| e.labels[t] as u64).sum();
                assert_eq!(counts[n][1 + t], tally, "event {n} task {t}");
            }
            if n > 0 {
                for j in 0..counts[n].len() {
                    assert!(counts[n][j] >= counts[n - 1][j], "counts must be non-decreasing");
                }
            }
        }
    }

    #[test]
    fn derived_features_ignore_truncated_future() {
        // Leak-freedom: recomputing on the sequence truncated at n leaves
        // every feature at events < n unchanged.
        let cfg = small_config();
        let seq = generate_user(&cfg, 5).unwrap();
        let full = synth_late_fusion(&seq);
        for n in 1..seq.events.len() {
            let mut truncated = seq.clone();
            truncated.events.truncate(n);
            let partial = synth_late_fusion(&truncated);
            assert_eq!(&full[..n], &partial[..], "truncation at {n} changed past features");
        }
    }

    #[test]
    fn temporal_split_is_valid() {
        let cfg = small_config();
        for seq in generate_dataset(&cfg).unwrap() {
            let c = seq.context_len;
            let max_context = seq.events[..c].iter().map(|e| e.timestamp).max().unwrap();
            let min_candidate = seq.events[c..].iter().map(|e| e.timestamp).min().unwrap();
            assert!(max_context < min_candidate);
            let mut prev = 0;
            for e in &seq.events {
                assert!(e.timestamp > prev, "timestamps must strictly increase");
                prev = e.timestamp;
            }
        }
    }

    #[test]
    fn identical_items_recur_with_identical_features() {
        let cfg = small_config();
        let data = generate_dataset(&cfg).unwrap();
        let mut seen: std::collections::HashMap<u64, Vec<f32>> = Default::default();
        let mut repeats = 0;
        for seq in &data {
            for e in &seq.events {
                if let Some(prev) = seen.get(&e.item_id) {
                    assert_eq!(prev, &e.features, "item {} drifted", e.item_id);
                    repeats += 1;
                } else {
                    seen.insert(e.item_id, e.features.clone());
                }
            }
        }
        assert!(repeats > 0, "test needs recurring items to be meaningful");
    }
}
