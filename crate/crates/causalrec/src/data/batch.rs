use crate::models::SequenceBatch;
use crate::numeric::{Scalar, Tensor};

use super::generator::{derived_seed, synth_late_fusion};
use super::{DataError, Result, UserSequence};

/// Half-width of the uniform jitter added to label values to form action
/// feature vectors. Small enough that classes stay separated.
pub const ACTION_FEATURE_JITTER: f64 = 0.25;

const ACTION_SALT: u64 = 0x616374;

/// How candidate positions see counting features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LateFusionMode {
    /// Counts over strictly prior events — the training view, where every
    /// position is history.
    Running,
    /// Candidate positions reuse the counts at the context boundary, because
    /// at serving time the labels of other candidates are unknown. Context
    /// positions keep their running counts.
    FrozenAtContext,
}

fn unit_interval(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Synthetic stand-in for real action feature vectors: the label vector
/// plus deterministic per-cell confidence jitter.
fn action_features(seq: &UserSequence, event_idx: usize, n_tasks: usize) -> Vec<f64> {
    let e = &seq.events[event_idx];
    (0..n_tasks)
        .map(|t| {
            let h = derived_seed(
                ACTION_SALT,
                seq.user_id,
                (event_idx as u64) << 8 | t as u64,
            );
            let u = unit_interval(h) * 2.0 - 1.0;
            e.labels[t] as f64 + ACTION_FEATURE_JITTER * u
        })
        .collect()
}

/// Packs sequences into right-padded batches of at most `batch_size` rows.
/// Emits `ceil(n_sequences / batch_size)` batches; labels at pad positions
/// are ignored by every loss via the batch's masks.
pub fn make_batches<T: Scalar>(
    sequences: &[UserSequence],
    batch_size: usize,
    seq_len: usize,
    mode: LateFusionMode,
) -> Result<Vec<SequenceBatch<T>>> {
    if batch_size == 0 {
        return Err(DataError::Batch("batch_size must be ≥ 1".into()));
    }
    if sequences.is_empty() {
        return Ok(Vec::new());
    }
    let first = &sequences[0];
    let d_item = first.events.first().map_or(0, |e| e.features.len());
    let n_tasks = first.events.first().map_or(0, |e| e.labels.len());
    if d_item == 0 || n_tasks == 0 {
        return Err(DataError::Batch("sequences carry empty feature or label vectors".into()));
    }
    let d_action = n_tasks;
    let late_dim = 1 + n_tasks;

    for seq in sequences {
        if seq.events.len() > seq_len {
            return Err(DataError::Batch(format!(
                "user {} has {} events, exceeding batch seq_len {seq_len}",
                seq.user_id,
                seq.events.len()
            )));
        }
        if seq.context_len > seq.events.len() {
            return Err(DataError::Batch(format!(
                "user {} declares context_len {} beyond its {} events",
                seq.user_id,
                seq.context_len,
                seq.events.len()
            )));
        }
        for e in &seq.events {
            if e.features.len() != d_item || e.labels.len() != n_tasks {
                return Err(DataError::Batch(format!(
                    "user {} mixes feature/label widths",
                    seq.user_id
                )));
            }
        }
    }

    let mut batches = Vec::with_capacity(sequences.len().div_ceil(batch_size));
    for chunk in sequences.chunks(batch_size) {
        let rows = chunk.len();
        let mut items = vec![T::ZERO; rows * seq_len * d_item];
        let mut actions = vec![T::ZERO; rows * seq_len * d_action];
        let mut labels = vec![T::ZERO; rows * seq_len * n_tasks];
        let mut late = vec![T::ZERO; rows * seq_len * late_dim];
        let mut context_len = Vec::with_capacity(rows);
        let mut valid_len = Vec::with_capacity(rows);

        for (r, seq) in chunk.iter().enumerate() {
            let n = seq.events.len();
            let c = seq.context_len;
            context_len.push(c);
            valid_len.push(n);
            let counts = synth_late_fusion(seq);
            for (k, e) in seq.events.iter().enumerate() {
                for (f, &v) in e.features.iter().enumerate() {
                    items[(r * seq_len + k) * d_item + f] = T::from_f64(v as f64);
                }
                for (t, v) in action_features(seq, k, n_tasks).into_iter().enumerate() {
                    actions[(r * seq_len + k) * d_action + t] = T::from_f64(v);
                }
                for (t, &l) in e.labels.iter().enumerate() {
                    labels[(r * seq_len + k) * n_tasks + t] = T::from_f64(l as f64);
                }
                let source = match mode {
                    LateFusionMode::Running => &counts[k],
                    LateFusionMode::FrozenAtContext => &counts[k.min(c)],
                };
                let impressions = source[0] as f64;
                late[(r * seq_len + k) * late_dim] = T::from_f64(impressions / seq_len as f64);
                for t in 0..n_tasks {
                    let rate = source[1 + t] as f64 / impressions.max(1.0);
                    late[(r * seq_len + k) * late_dim + 1 + t] = T::from_f64(rate);
                }
            }
        }

        let batch = SequenceBatch::new(
            Tensor::from_vec(items, &[rows, seq_len, d_item])
                .map_err(|e| DataError::Batch(e.to_string()))?,
            Tensor::from_vec(actions, &[rows, seq_len, d_action])
                .map_err(|e| DataError::Batch(e.to_string()))?,
            Tensor::from_vec(labels, &[rows, seq_len, n_tasks])
                .map_err(|e| DataError::Batch(e.to_string()))?,
            Tensor::from_vec(late, &[rows, seq_len, late_dim])
                .map_err(|e| DataError::Batch(e.to_string()))?,
            context_len,
            valid_len,
        )
        .map_err(|e| DataError::Batch(e.to_string()))?;
        batches.push(batch);
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, small_config};

    #[test]
    fn batch_count_is_ceiling_division() {
        let mut cfg = small_config();
        cfg.n_users = 10;
        let data = generate_dataset(&cfg).unwrap();
        let batches = make_batches::<f64>(&data, 4, cfg.seq_len, LateFusionMode::Running).unwrap();
        assert_eq!(batches.len(), 3);
        assert_eq!(batches[2].rows(), 2);
    }

    #[test]
    fn equal_length_sequences_need_no_padding() {
        let cfg = small_config();
        let data = generate_dataset(&cfg).unwrap();
        let batches = make_batches::<f64>(&data, 4, cfg.seq_len, LateFusionMode::Running).unwrap();
        for b in &batches {
            assert!(b.valid_len.iter().all(|&n| n == cfg.seq_len));
            assert!(b.loss_mask(false).iter().all(|&m| m));
        }
    }

    #[test]
    fn pad_positions_are_masked_out_of_losses() {
        let cfg = small_config();
        let data = generate_dataset(&cfg).unwrap();
        let padded_len = cfg.seq_len + 5;
        let batches = make_batches::<f64>(&data, 3, padded_len, LateFusionMode::Running).unwrap();
        for b in &batches {
            let mask = b.loss_mask(false);
            let tasks = b.n_tasks();
            for r in 0..b.rows() {
                for p in cfg.seq_len..padded_len {
                    for t in 0..tasks {
                        assert!(!mask[(r * padded_len + p) * tasks + t]);
                    }
                }
            }
        }
    }

    #[test]
    fn frozen_mode_reuses_context_boundary_counts_for_candidates() {
        let cfg = small_config();
        let data = generate_dataset(&cfg).unwrap();
        let running =
            make_batches::<f64>(&data, cfg.n_users, cfg.seq_len, LateFusionMode::Running).unwrap();
        let frozen =
            make_batches::<f64>(&data, cfg.n_users, cfg.seq_len, LateFusionMode::FrozenAtContext)
                .unwrap();
        let (run, fro) = (&running[0], &frozen[0]);
        let late_dim = 1 + cfg.n_tasks;
        for r in 0..run.rows() {
            let c = run.context_len[r];
            let cell = |b: &crate::models::SequenceBatch<f64>, p: usize, j: usize| {
                b.late_fusion.data()[(r * cfg.seq_len + p) * late_dim + j]
            };
            for p in 0..cfg.seq_len {
                for j in 0..late_dim {
                    if p <= c {
                        assert_eq!(cell(run, p, j), cell(fro, p, j));
                    } else {
                        assert_eq!(cell(fro, p, j), cell(fro, c, j));
                    }
                }
            }
        }
    }

    #[test]
    fn oversized_sequences_are_rejected() {
        let cfg = small_config();
        let data = generate_dataset(&cfg).unwrap();
        let err = make_batches::<f64>(&data, 4, cfg.seq_len - 1, LateFusionMode::Running)
            .unwrap_err();
        assert!(matches!(err, DataError::Batch(_)));
    }

    #[test]
    fn action_features_stay_near_their_labels() {
        let cfg = small_config();
        let data = generate_dataset(&cfg).unwrap();
        let b = &make_batches::<f64>(&data, cfg.n_users, cfg.seq_len, LateFusionMode::Running)
            .unwrap()[0];
        for (a, l) in b.action_features.data().iter().zip(b.labels.data()) {
            assert!((a - l).abs() <= ACTION_FEATURE_JITTER + 1e-12);
        }
    }
}
