use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::MultiheadWeights;
use crate::numeric::{Result as NumResult, Scalar, Tensor};

use super::{ModelError, Result};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Stable 64-bit FNV-1a, used to derive per-parameter seeds from names so
/// initialization is independent of construction order.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub(crate) struct ParamInit {
    seed: u64,
}

impl ParamInit {
    pub(crate) fn new(seed: u64) -> Self {
        ParamInit { seed }
    }

    fn rng_for(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name.as_bytes()))
    }

    /// Gaussian(0, std²) via Box–Muller.
    pub(crate) fn normal<T: Scalar>(&self, name: &str, shape: &[usize], std: f64) -> Tensor<T> {
        let mut rng = self.rng_for(name);
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        while data.len() < numel {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen();
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = std::f64::consts::TAU * u2;
            data.push(T::from_f64(r * theta.cos() * std));
            if data.len() < numel {
                data.push(T::from_f64(r * theta.sin() * std));
            }
        }
        Tensor::param(data, shape).expect("init shape")
    }

    pub(crate) fn zeros<T: Scalar>(&self, shape: &[usize]) -> Tensor<T> {
        Tensor::param(vec![T::ZERO; shape.iter().product()], shape).expect("init shape")
    }

    pub(crate) fn ones<T: Scalar>(&self, shape: &[usize]) -> Tensor<T> {
        Tensor::param(vec![T::ONE; shape.iter().product()], shape).expect("init shape")
    }

    pub(crate) fn linear<T: Scalar>(&self, name: &str, d_in: usize, d_out: usize, bias: bool) -> Linear<T> {
        let std = 1.0 / (d_in as f64).sqrt();
        Linear {
            w: self.normal(&format!("{name}.w"), &[d_in, d_out], std),
            b: bias.then(|| self.zeros(&[d_out])),
        }
    }
}

#[derive(Clone)]
pub(crate) struct Linear<T: Scalar> {
    pub(crate) w: Tensor<T>,
    pub(crate) b: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub(crate) fn forward(&self, x: &Tensor<T>) -> NumResult<Tensor<T>> {
        let y = x.matmul(&self.w)?;
        match &self.b {
            Some(b) => y.add_row_broadcast(b),
            None => Ok(y),
        }
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(format!("{prefix}.w"), &self.w);
        if let Some(b) = &self.b {
            f(format!("{prefix}.b"), b);
        }
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}.w"), &mut self.w);
        if let Some(b) = &mut self.b {
            f(format!("{prefix}.b"), b);
        }
    }
}

/// Two-layer MLP with SiLU, used for the feature projection networks and
/// the transformer feed-forward sublayer.
#[derive(Clone)]
pub(crate) struct Mlp<T: Scalar> {
    pub(crate) l1: Linear<T>,
    pub(crate) l2: Linear<T>,
}

impl<T: Scalar> Mlp<T> {
    pub(crate) fn init(init: &ParamInit, name: &str, d_in: usize, d_hidden: usize, d_out: usize) -> Self {
        Mlp {
            l1: init.linear(&format!("{name}.l1"), d_in, d_hidden, true),
            l2: init.linear(&format!("{name}.l2"), d_hidden, d_out, true),
        }
    }

    pub(crate) fn forward(&self, x: &Tensor<T>) -> NumResult<Tensor<T>> {
        self.l2.forward(&self.l1.forward(x)?.silu()?)
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.l1.visit(&format!("{prefix}.l1"), f);
        self.l2.visit(&format!("{prefix}.l2"), f);
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.l1.visit_mut(&format!("{prefix}.l1"), f);
        self.l2.visit_mut(&format!("{prefix}.l2"), f);
    }
}

#[derive(Clone)]
pub(crate) struct LayerNormP<T: Scalar> {
    pub(crate) gain: Tensor<T>,
    pub(crate) bias: Tensor<T>,
}

impl<T: Scalar> LayerNormP<T> {
    fn init(init: &ParamInit, d: usize) -> Self {
        LayerNormP { gain: init.ones(&[d]), bias: init.zeros(&[d]) }
    }

    pub(crate) fn forward(&self, x: &Tensor<T>) -> NumResult<Tensor<T>> {
        x.layernorm(&self.gain, &self.bias, LN_EPS)
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(format!("{prefix}.gain"), &self.gain);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}.gain"), &mut self.gain);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

/// Pre-norm transformer block: attention sublayer plus two-layer
/// feed-forward, residual around each. `cross_ln` normalizes the other
/// stream's contribution to the value mix in dual-stream blocks.
#[derive(Clone)]
pub(crate) struct Block<T: Scalar> {
    pub(crate) ln1: LayerNormP<T>,
    pub(crate) attn: MultiheadWeights<T>,
    pub(crate) ln2: LayerNormP<T>,
    pub(crate) ffn: Mlp<T>,
    pub(crate) cross_ln: Option<LayerNormP<T>>,
}

impl<T: Scalar> Block<T> {
    pub(crate) fn init(init: &ParamInit, name: &str, d: usize, cross: bool) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        Block {
            ln1: LayerNormP::init(init, d),
            attn: MultiheadWeights {
                w_q: init.normal(&format!("{name}.attn.w_q"), &[d, d], std),
                w_k: init.normal(&format!("{name}.attn.w_k"), &[d, d], std),
                w_v: init.normal(&format!("{name}.attn.w_v"), &[d, d], std),
                w_o: init.normal(&format!("{name}.attn.w_o"), &[d, d], std),
            },
            ln2: LayerNormP::init(init, d),
            ffn: Mlp::init(init, &format!("{name}.ffn"), d, 4 * d, d),
            cross_ln: cross.then(|| LayerNormP::init(init, d)),
        }
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.ln1.visit(&format!("{prefix}.ln1"), f);
        f(format!("{prefix}.attn.w_q"), &self.attn.w_q);
        f(format!("{prefix}.attn.w_k"), &self.attn.w_k);
        f(format!("{prefix}.attn.w_v"), &self.attn.w_v);
        f(format!("{prefix}.attn.w_o"), &self.attn.w_o);
        self.ln2.visit(&format!("{prefix}.ln2"), f);
        self.ffn.visit(&format!("{prefix}.ffn"), f);
        if let Some(c) = &self.cross_ln {
            c.visit(&format!("{prefix}.cross_ln"), f);
        }
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.ln1.visit_mut(&format!("{prefix}.ln1"), f);
        f(format!("{prefix}.attn.w_q"), &mut self.attn.w_q);
        f(format!("{prefix}.attn.w_k"), &mut self.attn.w_k);
        f(format!("{prefix}.attn.w_v"), &mut self.attn.w_v);
        f(format!("{prefix}.attn.w_o"), &mut self.attn.w_o);
        self.ln2.visit_mut(&format!("{prefix}.ln2"), f);
        self.ffn.visit_mut(&format!("{prefix}.ffn"), f);
        if let Some(c) = &mut self.cross_ln {
            c.visit_mut(&format!("{prefix}.cross_ln"), f);
        }
    }
}

/// Multi-gate mixture-of-experts head parameters: shared expert MLPs, one
/// softmax gate per task, one scalar logit tower per task.
#[derive(Clone)]
pub struct MmoeParams<T: Scalar> {
    pub(crate) experts: Vec<Mlp<T>>,
    pub(crate) gates: Vec<Linear<T>>,
    pub(crate) towers: Vec<Linear<T>>,
}

impl<T: Scalar> MmoeParams<T> {
    pub(crate) fn init(
        init: &ParamInit,
        name: &str,
        d_in: usize,
        d_expert: usize,
        n_experts: usize,
        n_tasks: usize,
    ) -> Self {
        MmoeParams {
            experts: (0..n_experts)
                .map(|e| Mlp::init(init, &format!("{name}.experts.{e}"), d_in, d_expert, d_expert))
                .collect(),
            gates: (0..n_tasks)
                .map(|t| init.linear(&format!("{name}.gates.{t}"), d_in, n_experts, true))
                .collect(),
            towers: (0..n_tasks)
                .map(|t| init.linear(&format!("{name}.towers.{t}"), d_expert, 1, true))
                .collect(),
        }
    }

    /// Test/demo constructor with seeded random parameters.
    pub fn new_seeded(
        d_in: usize,
        d_expert: usize,
        n_experts: usize,
        n_tasks: usize,
        seed: u64,
    ) -> Result<Self> {
        if n_experts == 0 || n_tasks == 0 {
            return Err(ModelError::Config("mmoe needs n_experts ≥ 1 and n_tasks ≥ 1".into()));
        }
        Ok(Self::init(&ParamInit::new(seed), "head", d_in, d_expert, n_experts, n_tasks))
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        for (e, expert) in self.experts.iter().enumerate() {
            expert.visit(&format!("{prefix}.experts.{e}"), f);
        }
        for (t, gate) in self.gates.iter().enumerate() {
            gate.visit(&format!("{prefix}.gates.{t}"), f);
        }
        for (t, tower) in self.towers.iter().enumerate() {
            tower.visit(&format!("{prefix}.towers.{t}"), f);
        }
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (e, expert) in self.experts.iter_mut().enumerate() {
            expert.visit_mut(&format!("{prefix}.experts.{e}"), f);
        }
        for (t, gate) in self.gates.iter_mut().enumerate() {
            gate.visit_mut(&format!("{prefix}.gates.{t}"), f);
        }
        for (t, tower) in self.towers.iter_mut().enumerate() {
            tower.visit_mut(&format!("{prefix}.towers.{t}"), f);
        }
    }

    /// Per-task gate weights over experts, rows summing to 1. Exposed for
    /// inspection and tests.
    pub fn gate_weights(&self, features: &Tensor<T>, task: usize) -> NumResult<Tensor<T>> {
        self.gates[task].forward(features)?.softmax_lastdim()
    }
}

/// Multi-gate mixture-of-experts head: shared experts, per-task softmax
/// gates over experts, per-task scalar logit towers. `features` is
/// [n, d_in]; the result is [n, n_tasks].
pub fn mmoe_head<T: Scalar>(features: &Tensor<T>, params: &MmoeParams<T>) -> NumResult<Tensor<T>> {
    let expert_outs: Vec<Tensor<T>> = params
        .experts
        .iter()
        .map(|e| e.forward(features))
        .collect::<NumResult<_>>()?;
    let n = features.shape()[0];
    let mut task_logits = Vec::with_capacity(params.gates.len());
    for (gate, tower) in params.gates.iter().zip(&params.towers) {
        let weights = gate.forward(features)?.softmax_lastdim()?;
        let mut mixed: Option<Tensor<T>> = None;
        for (e, expert_out) in expert_outs.iter().enumerate() {
            let w_e = weights.slice_cols(e, 1)?.reshape(&[n])?;
            let contrib = expert_out.row_scale(&w_e)?;
            mixed = Some(match mixed {
                Some(acc) => acc.add(&contrib)?,
                None => contrib,
            });
        }
        task_logits.push(tower.forward(&mixed.expect("n_experts ≥ 1"))?);
    }
    Tensor::concat_cols(&task_logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::grad_check;

    fn features(n: usize, d: usize, seed: u64) -> Tensor<f64> {
        ParamInit::new(seed).normal("x", &[n, d], 1.0)
    }

    #[test]
    fn single_expert_head_collapses_to_tower_of_expert() {
        let params = MmoeParams::<f64>::new_seeded(6, 5, 1, 2, 42).unwrap();
        let x = features(4, 6, 1);
        let head = mmoe_head(&x, &params).unwrap();
        // Gate over one expert is exactly weight 1.
        let expert = params.experts[0].forward(&x).unwrap();
        for t in 0..2 {
            let want = params.towers[t].forward(&expert).unwrap();
            for (h, w) in head.slice_cols(t, 1).unwrap().data().iter().zip(want.data()) {
                assert!((h - w).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn gate_weights_sum_to_one() {
        let params = MmoeParams::<f64>::new_seeded(6, 5, 3, 2, 43).unwrap();
        let x = features(5, 6, 2);
        for t in 0..2 {
            let w = params.gate_weights(&x, t).unwrap();
            for row in w.data().chunks_exact(3) {
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let params = MmoeParams::<f64>::new_seeded(4, 3, 2, 2, 44).unwrap();
        let x = Tensor::<f64>::param(features(3, 4, 3).data().to_vec(), &[3, 4]).unwrap();
        let err = grad_check(|x| mmoe_head(x, &params), &x, 1e-5).unwrap();
        assert!(err <= 1e-5, "rel err {err}");
    }

    #[test]
    fn init_is_deterministic_and_order_independent() {
        let a = ParamInit::new(7).normal::<f64>("blocks.0.attn.w_q", &[4, 4], 0.5);
        let _unrelated = ParamInit::new(7).normal::<f64>("zzz", &[64], 0.5);
        let b = ParamInit::new(7).normal::<f64>("blocks.0.attn.w_q", &[4, 4], 0.5);
        assert!(a.bit_eq(&b));
    }
}
