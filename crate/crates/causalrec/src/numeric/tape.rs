use std::collections::HashMap;

use super::ops::{matmul_bt_raw, matmul_raw, matmul_tn_raw, sigmoid, Op};
use super::scalar::Scalar;
use super::tensor::Tensor;
use super::{NumericError, Result};

/// Result of a reverse sweep: the recorded operations in forward topological
/// order plus the accumulated gradient for every node reached from the loss.
#[derive(Debug)]
pub struct Tape<T: Scalar> {
    order: Vec<Tensor<T>>,
    grads: HashMap<u64, Tensor<T>>,
}

impl<T: Scalar> Tape<T> {
    /// Gradient of the loss w.r.t. `t`, if `t` was reachable from the loss.
    pub fn grad(&self, t: &Tensor<T>) -> Option<&Tensor<T>> {
        self.grads.get(&t.id())
    }

    /// Gradient of the loss w.r.t. `t`, zeros if unreachable.
    pub fn grad_or_zeros(&self, t: &Tensor<T>) -> Tensor<T> {
        match self.grads.get(&t.id()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(t.shape()),
        }
    }

    /// Recorded nodes in forward topological order.
    pub fn nodes(&self) -> &[Tensor<T>] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

/// Reverse-mode sweep from a scalar loss. Visits every recorded node exactly
/// once in reverse topological order and accumulates gradients into every
/// reachable leaf.
pub fn backward<T: Scalar>(loss: &Tensor<T>) -> Result<Tape<T>> {
    if !loss.is_scalar() {
        return Err(NumericError::Contract(format!(
            "backward needs a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    if !loss.requires_grad() {
        return Err(NumericError::Contract(
            "backward: loss is not on the tape (no differentiable inputs)".into(),
        ));
    }

    // Iterative post-order DFS over differentiable nodes.
    enum Item<T: Scalar> {
        Visit(Tensor<T>),
        Emit(Tensor<T>),
    }
    let mut order: Vec<Tensor<T>> = Vec::new();
    let mut visited: std::collections::HashSet<u64> = std::collections::HashSet::new();
    let mut stack = vec![Item::Visit(loss.clone())];
    while let Some(item) = stack.pop() {
        match item {
            Item::Visit(t) => {
                if !visited.insert(t.id()) {
                    continue;
                }
                stack.push(Item::Emit(t.clone()));
                if let Some(op) = t.op() {
                    for p in op.parents() {
                        if p.requires_grad() && !visited.contains(&p.id()) {
                            stack.push(Item::Visit(p.clone()));
                        }
                    }
                }
            }
            Item::Emit(t) => order.push(t),
        }
    }

    let mut bufs: HashMap<u64, Vec<T>> = HashMap::new();
    bufs.insert(loss.id(), vec![T::ONE]);

    for node in order.iter().rev() {
        let g = match bufs.get(&node.id()) {
            Some(g) => g.clone(),
            None => continue,
        };
        if let Some(op) = node.op() {
            apply_vjp(node, op, &g, &mut bufs);
        }
    }

    let shapes: HashMap<u64, &[usize]> = order.iter().map(|t| (t.id(), t.shape())).collect();
    let grads = bufs
        .into_iter()
        .map(|(id, buf)| {
            let shape = shapes.get(&id).expect("gradient for unvisited node").to_vec();
            (id, Tensor::build_grad(buf, shape))
        })
        .collect();

    Ok(Tape { order, grads })
}

impl<T: Scalar> Tensor<T> {
    pub fn backward(&self) -> Result<Tape<T>> {
        backward(self)
    }

    pub(crate) fn build_grad(data: Vec<T>, shape: Vec<usize>) -> Tensor<T> {
        Tensor::from_vec(data, &shape).expect("gradient buffer shape mismatch")
    }
}

fn acc<T: Scalar>(bufs: &mut HashMap<u64, Vec<T>>, t: &Tensor<T>, add: &[T]) {
    if !t.requires_grad() {
        return;
    }
    let buf = bufs.entry(t.id()).or_insert_with(|| vec![T::ZERO; t.numel()]);
    debug_assert_eq!(buf.len(), add.len());
    for (b, &a) in buf.iter_mut().zip(add) {
        *b = *b + a;
    }
}

fn softmax_vjp<T: Scalar>(y: &[T], g: &[T], d: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; y.len()];
    for r in 0..y.len() / d {
        let yr = &y[r * d..(r + 1) * d];
        let gr = &g[r * d..(r + 1) * d];
        let mut dot = T::ZERO;
        for (&yv, &gv) in yr.iter().zip(gr) {
            dot = dot + yv * gv;
        }
        for (o, (&yv, &gv)) in out[r * d..(r + 1) * d].iter_mut().zip(yr.iter().zip(gr)) {
            *o = yv * (gv - dot);
        }
    }
    out
}

fn apply_vjp<T: Scalar>(node: &Tensor<T>, op: &Op<T>, g: &[T], bufs: &mut HashMap<u64, Vec<T>>) {
    match op {
        Op::Matmul { a, b } => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            if a.requires_grad() {
                acc(bufs, a, &matmul_bt_raw(g, b.data(), m, n, k));
            }
            if b.requires_grad() {
                acc(bufs, b, &matmul_tn_raw(a.data(), g, m, k, n));
            }
        }
        Op::MatmulBt { a, b } => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[0];
            if a.requires_grad() {
                acc(bufs, a, &matmul_raw(g, b.data(), m, n, k));
            }
            if b.requires_grad() {
                acc(bufs, b, &matmul_tn_raw(g, a.data(), m, n, k));
            }
        }
        Op::Add { a, b } => {
            acc(bufs, a, g);
            acc(bufs, b, g);
        }
        Op::Sub { a, b } => {
            acc(bufs, a, g);
            if b.requires_grad() {
                let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                acc(bufs, b, &neg);
            }
        }
        Op::Mul { a, b } => {
            if a.requires_grad() {
                let da: Vec<T> = g.iter().zip(b.data()).map(|(&gv, &bv)| gv * bv).collect();
                acc(bufs, a, &da);
            }
            if b.requires_grad() {
                let db: Vec<T> = g.iter().zip(a.data()).map(|(&gv, &av)| gv * av).collect();
                acc(bufs, b, &db);
            }
        }
        Op::Scale { x, c } => {
            let dx: Vec<T> = g.iter().map(|&v| v * *c).collect();
            acc(bufs, x, &dx);
        }
        Op::Neg { x } => {
            let dx: Vec<T> = g.iter().map(|&v| -v).collect();
            acc(bufs, x, &dx);
        }
        Op::AddRowBroadcast { x, bias } => {
            acc(bufs, x, g);
            if bias.requires_grad() {
                let d = bias.numel();
                let mut db = vec![T::ZERO; d];
                for row in g.chunks_exact(d) {
                    for (o, &v) in db.iter_mut().zip(row) {
                        *o = *o + v;
                    }
                }
                acc(bufs, bias, &db);
            }
        }
        Op::RowScale { x, s } => {
            let d = x.last_dim();
            if x.requires_grad() {
                let mut dx = vec![T::ZERO; x.numel()];
                for (r, &f) in s.data().iter().enumerate() {
                    for (o, &v) in dx[r * d..(r + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *o = v * f;
                    }
                }
                acc(bufs, x, &dx);
            }
            if s.requires_grad() {
                let mut ds = vec![T::ZERO; s.numel()];
                for (r, o) in ds.iter_mut().enumerate() {
                    let xr = &x.data()[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    for (&xv, &gv) in xr.iter().zip(gr) {
                        *o = *o + xv * gv;
                    }
                }
                acc(bufs, s, &ds);
            }
        }
        Op::Silu { x } => {
            let dx: Vec<T> = g
                .iter()
                .zip(x.data())
                .map(|(&gv, &xv)| {
                    let s = sigmoid(xv);
                    gv * s * (T::ONE + xv * (T::ONE - s))
                })
                .collect();
            acc(bufs, x, &dx);
        }
        Op::SoftmaxLastDim { x } | Op::CausalSoftmax { x } | Op::MaskedSoftmax { x } => {
            // Non-permitted cells have y = 0, so the row formula zeroes them.
            let d = node.last_dim();
            acc(bufs, x, &softmax_vjp(node.data(), g, d));
        }
        Op::LayerNorm { x, gain, bias, eps } => {
            let d = x.last_dim();
            let rows = x.rows();
            let inv_d = T::from_f64(1.0 / d as f64);
            let eps_t = T::from_f64(*eps);
            let mut dx = vec![T::ZERO; x.numel()];
            let mut dgain = vec![T::ZERO; d];
            let mut dbias = vec![T::ZERO; d];
            for r in 0..rows {
                let xr = &x.data()[r * d..(r + 1) * d];
                let gr = &g[r * d..(r + 1) * d];
                let mut mean = T::ZERO;
                for &v in xr {
                    mean = mean + v;
                }
                mean = mean * inv_d;
                let mut var = T::ZERO;
                for &v in xr {
                    let c = v - mean;
                    var = var + c * c;
                }
                var = var * inv_d;
                let inv_std = T::ONE / (var + eps_t).sqrt();

                let mut gg_mean = T::ZERO;
                let mut ggx_mean = T::ZERO;
                for j in 0..d {
                    let xh = (xr[j] - mean) * inv_std;
                    let gg = gr[j] * gain.data()[j];
                    gg_mean = gg_mean + gg;
                    ggx_mean = ggx_mean + gg * xh;
                    dgain[j] = dgain[j] + gr[j] * xh;
                    dbias[j] = dbias[j] + gr[j];
                }
                gg_mean = gg_mean * inv_d;
                ggx_mean = ggx_mean * inv_d;
                for j in 0..d {
                    let xh = (xr[j] - mean) * inv_std;
                    let gg = gr[j] * gain.data()[j];
                    dx[r * d + j] = inv_std * (gg - gg_mean - xh * ggx_mean);
                }
            }
            acc(bufs, x, &dx);
            acc(bufs, gain, &dgain);
            acc(bufs, bias, &dbias);
        }
        Op::RotatePairs { x, cos, sin } => {
            let d = x.last_dim();
            let half = d / 2;
            let mut dx = vec![T::ZERO; x.numel()];
            for r in 0..x.rows() {
                for p in 0..half {
                    let (c, s) = (cos[r * half + p], sin[r * half + p]);
                    let (g0, g1) = (g[r * d + 2 * p], g[r * d + 2 * p + 1]);
                    dx[r * d + 2 * p] = c * g0 + s * g1;
                    dx[r * d + 2 * p + 1] = -s * g0 + c * g1;
                }
            }
            acc(bufs, x, &dx);
        }
        Op::SumAll { x } => {
            let dx = vec![g[0]; x.numel()];
            acc(bufs, x, &dx);
        }
        Op::SliceCols { x, start, len } => {
            let d = x.last_dim();
            let mut dx = vec![T::ZERO; x.numel()];
            for r in 0..x.rows() {
                for j in 0..*len {
                    dx[r * d + start + j] = g[r * len + j];
                }
            }
            acc(bufs, x, &dx);
        }
        Op::ConcatCols { parts } => {
            let rows = node.rows();
            let total = node.last_dim();
            let mut offset = 0;
            for p in parts {
                let d = p.last_dim();
                if p.requires_grad() {
                    let mut dp = vec![T::ZERO; p.numel()];
                    for r in 0..rows {
                        dp[r * d..(r + 1) * d]
                            .copy_from_slice(&g[r * total + offset..r * total + offset + d]);
                    }
                    acc(bufs, p, &dp);
                }
                offset += d;
            }
        }
        Op::SliceDim0 { x, start, len } => {
            let stride: usize = x.shape()[1..].iter().product();
            let mut dx = vec![T::ZERO; x.numel()];
            dx[start * stride..(start + len) * stride].copy_from_slice(g);
            acc(bufs, x, &dx);
        }
        Op::PadDim0 { x, top } => {
            let stride: usize = x.shape()[1..].iter().product();
            let n = x.shape()[0];
            let dx = g[top * stride..(top + n) * stride].to_vec();
            acc(bufs, x, &dx);
        }
        Op::ConcatDim0 { parts } => {
            let mut offset = 0;
            for p in parts {
                let len = p.numel();
                if p.requires_grad() {
                    acc(bufs, p, &g[offset..offset + len]);
                }
                offset += len;
            }
        }
        Op::GatherDim0 { x, idx } => {
            let stride: usize = x.shape()[1..].iter().product();
            let mut dx = vec![T::ZERO; x.numel()];
            for (i, &src) in idx.iter().enumerate() {
                for (o, &v) in dx[src * stride..(src + 1) * stride]
                    .iter_mut()
                    .zip(&g[i * stride..(i + 1) * stride])
                {
                    *o = *o + v;
                }
            }
            acc(bufs, x, &dx);
        }
        Op::InterleaveDim0 { a, b } => {
            let stride: usize = a.shape()[1..].iter().product();
            let n = a.shape()[0];
            if a.requires_grad() {
                let mut da = vec![T::ZERO; a.numel()];
                for i in 0..n {
                    da[i * stride..(i + 1) * stride]
                        .copy_from_slice(&g[2 * i * stride..(2 * i + 1) * stride]);
                }
                acc(bufs, a, &da);
            }
            if b.requires_grad() {
                let mut db = vec![T::ZERO; b.numel()];
                for i in 0..n {
                    db[i * stride..(i + 1) * stride]
                        .copy_from_slice(&g[(2 * i + 1) * stride..(2 * i + 2) * stride]);
                }
                acc(bufs, b, &db);
            }
        }
        Op::Reshape { x } => {
            acc(bufs, x, g);
        }
        Op::MaskedBceSum { logits, labels, mask, clamp } => {
            if logits.requires_grad() {
                let scale = g[0];
                let lo = T::from_f64(*clamp);
                let hi = T::from_f64(1.0 - *clamp);
                let mut dz = vec![T::ZERO; logits.numel()];
                for (i, ((&z, &y), &valid)) in
                    logits.data().iter().zip(labels.data()).zip(mask.iter()).enumerate()
                {
                    if !valid {
                        continue;
                    }
                    let p = sigmoid(z);
                    // Clamped cells have a constant loss, hence zero slope.
                    if p < lo || p > hi {
                        continue;
                    }
                    dz[i] = scale * (p - y);
                }
                acc(bufs, logits, &dz);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn p(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::param(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let x = p(&[1.0, -2.0, 3.0], &[3]);
        let tape = x.sum_all().unwrap().backward().unwrap();
        assert_eq!(tape.grad(&x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_sum_square_is_two_x() {
        let x = p(&[1.0, -2.0, 0.5], &[3]);
        let loss = x.mul(&x).unwrap().sum_all().unwrap();
        let tape = loss.backward().unwrap();
        assert_eq!(tape.grad(&x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn loss_gradient_wrt_itself_is_ones() {
        let x = p(&[1.0, 2.0], &[2]);
        let loss = x.sum_all().unwrap();
        let tape = loss.backward().unwrap();
        assert_eq!(tape.grad(&loss).unwrap().data(), &[1.0]);
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let x = p(&[1.0, 2.0], &[2]);
        let err = x.backward().unwrap_err();
        assert!(matches!(err, NumericError::Contract(_)));
    }

    #[test]
    fn constant_loss_is_contract_error() {
        let x = Tensor::<f64>::from_vec(vec![1.0], &[1]).unwrap();
        assert!(matches!(x.backward().unwrap_err(), NumericError::Contract(_)));
    }

    #[test]
    fn diamond_graph_accumulates_once_per_path() {
        // loss = sum(2x) + sum(3x)  ⇒  d/dx = 5
        let x = p(&[1.0], &[1]);
        let a = x.scale(2.0).unwrap();
        let b = x.scale(3.0).unwrap();
        let loss = a.add(&b).unwrap().sum_all().unwrap();
        let tape = loss.backward().unwrap();
        assert_eq!(tape.grad(&x).unwrap().data(), &[5.0]);
    }

    #[test]
    fn random_graph_matches_central_differences() {
        // f(x) = sum(softmax(x·W) ⊙ (x·W)) over a fixed W: three recorded ops.
        let w = Tensor::<f64>::from_vec(
            vec![0.3, -0.7, 0.9, 0.1, 0.5, -0.2, -0.4, 0.8, 0.6],
            &[3, 3],
        )
        .unwrap();
        let x0 = [0.2, -0.6, 0.4, 0.9, -0.3, 0.05];
        let f = |x: &Tensor<f64>| {
            let h = x.matmul(&w).unwrap();
            h.softmax_lastdim().unwrap().mul(&h).unwrap().sum_all().unwrap()
        };
        let x = p(&x0, &[2, 3]);
        let analytic = f(&x).backward().unwrap().grad(&x).unwrap().clone();
        let eps = 1e-6;
        for i in 0..6 {
            let up = f(&x.with_value_at(i, x0[i] + eps)).data()[0];
            let dn = f(&x.with_value_at(i, x0[i] - eps)).data()[0];
            let cd = (up - dn) / (2.0 * eps);
            let a = analytic.data()[i];
            let rel = (a - cd).abs() / f64::max(1.0, cd.abs());
            assert!(rel <= 1e-5, "coord {i}: analytic {a} vs central {cd}");
        }
    }

    #[test]
    fn masked_bce_gradient_is_zero_on_invalid_cells() {
        let z = p(&[0.3, -0.2, 1.4, 0.0], &[2, 2]);
        let y = Tensor::from_vec(vec![1.0, 0.0, 1.0, 1.0], &[2, 2]).unwrap();
        let mask = Arc::new(vec![true, false, true, false]);
        let loss = z.masked_bce_sum(&y, mask, 1e-7).unwrap();
        let tape = loss.backward().unwrap();
        let g = tape.grad(&z).unwrap();
        assert_eq!(g.data()[1], 0.0);
        assert_eq!(g.data()[3], 0.0);
        assert!(g.data()[0] != 0.0 && g.data()[2] != 0.0);
    }
}
