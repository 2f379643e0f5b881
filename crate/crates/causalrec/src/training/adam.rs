use std::collections::HashMap;

use crate::models::Model;
use crate::numeric::{Scalar, Tape, Tensor};

use super::{AdamParams, Result, TrainError};

struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with decoupled weight decay. Moment estimates are kept in f64 and
/// keyed by parameter name, so they survive the tensor replacement that a
/// functional update implies.
pub struct Adam {
    lr: f64,
    hp: AdamParams,
    t: usize,
    slots: HashMap<String, Slot>,
}

impl Adam {
    pub fn new(lr: f64, hp: AdamParams) -> Self {
        Adam { lr, hp, t: 0, slots: HashMap::new() }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// One update over every parameter that received a gradient.
    pub fn step<T: Scalar>(&mut self, model: &mut Model<T>, tape: &Tape<T>) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.hp.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.hp.beta2.powi(self.t as i32);
        let (b1, b2, eps, wd, lr) = (self.hp.beta1, self.hp.beta2, self.hp.eps, self.hp.weight_decay, self.lr);

        let mut bad: Option<String> = None;
        model.visit_params_mut(&mut |name, param| {
            let Some(grad) = tape.grad(param) else { return };
            let slot = self
                .slots
                .entry(name.clone())
                .or_insert_with(|| Slot { m: vec![0.0; param.numel()], v: vec![0.0; param.numel()] });
            let mut data: Vec<T> = param.data().to_vec();
            for i in 0..data.len() {
                let g = grad.data()[i].to_f64();
                if !g.is_finite() {
                    bad = Some(name.clone());
                    return;
                }
                slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * g;
                slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * g * g;
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                let p = data[i].to_f64();
                data[i] = T::from_f64(p - lr * (m_hat / (v_hat.sqrt() + eps) + wd * p));
            }
            *param = Tensor::param(data, param.shape()).expect("param shape is stable");
        });
        if let Some(name) = bad {
            return Err(TrainError::Contract(format!("non-finite gradient for parameter {name}")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Architecture, ForwardMode, Model, ModelConfig};
    use crate::numeric::Tensor;

    fn bowl_config() -> ModelConfig {
        ModelConfig {
            architecture: Architecture::AttnLfa,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            lambda: 1.0,
            n_tasks: 2,
            mmoe_experts: 1,
            late_fusion_dim: 3,
            d_item: 2,
            d_action: 2,
            rope_base: crate::attention::DEFAULT_ROPE_BASE,
            max_seq_len: 16,
            dhn_action_first: false,
        }
    }

    #[test]
    fn single_step_on_quadratic_bowl_moves_toward_minimum() {
        // Minimize ‖p − target‖² for one real model parameter.
        let mut model = Model::<f64>::new(&bowl_config(), 5).unwrap();
        let name = "item_proj.l1.w";
        let before = model.param(name).unwrap();
        let target = Tensor::<f64>::full(before.shape(), 3.0);
        let dist = |t: &Tensor<f64>| -> f64 {
            t.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum()
        };
        let d0 = dist(&before);
        let loss = before.sub(&target).unwrap();
        let loss = loss.mul(&loss).unwrap().sum_all().unwrap();
        let tape = loss.backward().unwrap();
        let mut adam = Adam::new(0.05, AdamParams::default());
        adam.step(&mut model, &tape).unwrap();
        let after = model.param(name).unwrap();
        assert!(dist(&after) < d0, "step moved away from the minimum");
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let cfg = bowl_config();
        let mut model = Model::<f64>::new(&cfg, 6).unwrap();
        let before = model.named_params();
        let batch = crate::models::forward_tests::tiny_batch(&cfg, 2, 6, 6, 4, 9);
        let out = model.forward(&batch, ForwardMode::Train).unwrap();
        let mask = batch.loss_mask(false);
        let loss =
            crate::training::multitask_bce(&out.logits, &batch.labels, &mask, 1e-7).unwrap();
        let tape = loss.backward().unwrap();
        let mut adam = Adam::new(0.0, AdamParams::default());
        adam.step(&mut model, &tape).unwrap();
        for ((name, a), (_, b)) in before.iter().zip(model.named_params().iter()) {
            assert!(a.bit_eq(b), "{name} moved under lr 0");
        }
    }
}
