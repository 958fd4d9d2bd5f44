//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`GradTape`] records every differentiable operation in execution order;
//! [`GradTape::backward`] replays the record in exact reverse order and
//! accumulates gradients. Operations are a closed set tailored to the
//! architecture: linear maps, layer normalization, GRU-style gating,
//! multi-head attention with relative positions, and the PPO loss heads.
//!
//! Loss-level reductions accumulate in f64 regardless of the tape's scalar
//! type; activations stay in the tape's own precision.

use crate::params::ParameterStore;
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};
use std::collections::BTreeMap;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Constant payload of the PPO policy loss: everything the clipped
/// surrogate needs besides the network outputs. Kept in f64 — ratios are
/// probability quotients and lose too much in f32.
#[derive(Debug, Clone)]
pub struct PolicyLossData {
    /// Actions taken at rollout time, row-major [batch, action_dim].
    pub actions: Vec<f64>,
    /// Log-probabilities recorded at collection time, one per sample.
    pub old_log_probs: Vec<f64>,
    /// Normalized advantages, one per sample.
    pub advantages: Vec<f64>,
    /// PPO clip range epsilon.
    pub clip: f64,
}

enum Op<T: Scalar> {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    Add { a: Var, b: Var },
    Relu { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64, stats: Vec<(T, T)> },
    Gate { x: Var, y: Var, w: Var, b: Var, lambda: Tensor<T> },
    ConcatRows { a: Var, b: Var },
    Attention { q: Var, k: Var, v: Var, rel: Var, heads: usize, mem_len: usize, span: usize, probs: Tensor<T> },
    SumAll { x: Var },
    Scale { x: Var, c: f64 },
    AddScaled { parts: Vec<(Var, f64)> },
    PolicyLoss { mean: Var, log_std: Var, data: PolicyLossData },
    GaussianEntropy { log_std: Var },
    ValueLoss { v: Var, returns: Vec<f64> },
}

struct Meta<T: Scalar> {
    op: Op<T>,
    needs_grad: bool,
    name: Option<String>,
}

pub struct GradTape<T: Scalar> {
    values: Vec<Tensor<T>>,
    grads: Vec<Option<Tensor<T>>>,
    metas: Vec<Meta<T>>,
    param_vars: BTreeMap<String, Var>,
}

/// log-std entries are clamped to this band everywhere the policy touches
/// them (sampling, densities, entropy) so all paths see one distribution.
pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

pub fn clamp_log_std(v: f64) -> f64 {
    v.clamp(LOG_STD_MIN, LOG_STD_MAX)
}

pub const LN_2PI: f64 = 1.8378770664093453;

/// Diagonal-Gaussian log density at `action`, evaluated in f64 from the
/// network's (possibly f32) outputs. Shared by sampling, evaluation and the
/// training loss so that identical inputs give bit-identical results.
pub fn gaussian_log_prob<T: Scalar>(mean: &[T], log_std: &[T], action: &[f64]) -> f64 {
    debug_assert_eq!(mean.len(), action.len());
    debug_assert_eq!(log_std.len(), action.len());
    let mut lp = 0.0f64;
    for d in 0..mean.len() {
        let ls = clamp_log_std(log_std[d].wide());
        let sd = ls.exp();
        let z = (action[d] - mean[d].wide()) / sd;
        lp += -0.5 * z * z - ls - 0.5 * LN_2PI;
    }
    lp
}

/// Closed-form entropy of the diagonal Gaussian with the given log-stds.
pub fn gaussian_entropy<T: Scalar>(log_std: &[T]) -> f64 {
    log_std.iter().map(|&ls| clamp_log_std(ls.wide()) + 0.5 * (LN_2PI + 1.0)).sum()
}

/// Per-sample clipped surrogate min(r*A, clip(r, 1-eps, 1+eps)*A).
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip: f64) -> f64 {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * advantage;
    unclipped.min(clipped)
}

impl<T: Scalar> GradTape<T> {
    pub fn new() -> Self {
        GradTape { values: Vec::new(), grads: Vec::new(), metas: Vec::new(), param_vars: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.values.push(value);
        self.grads.push(None);
        self.metas.push(Meta { op, needs_grad, name: None });
        Var(self.values.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.metas[v.0].needs_grad
    }

    /// Constant input: no gradient flows into it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable input (used by gradient checks and tests).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Bind a named parameter from the store. Repeated binds of the same
    /// name return the same node so its gradient accumulates once.
    pub fn param(&mut self, name: &str, store: &ParameterStore<T>) -> Var {
        if let Some(&v) = self.param_vars.get(name) {
            return v;
        }
        let v = self.push(store.get(name).clone(), Op::Leaf, true);
        self.metas[v.0].name = Some(name.to_string());
        self.param_vars.insert(name.to_string(), v);
        v
    }

    /// y = x W + b
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (batch, d_in) = (self.values[x.0].rows(), self.values[x.0].cols());
        let (wi, wo) = (self.values[w.0].shape()[0], self.values[w.0].shape()[1]);
        assert_eq!(d_in, wi, "linear: input dim {} does not match weight rows {}", d_in, wi);
        if let Some(bv) = b {
            assert_eq!(self.values[bv.0].numel(), wo, "linear: bias length mismatch");
        }
        let mut out = Tensor::zeros(&[batch, wo]);
        tensor::linear_forward(
            self.values[x.0].data(),
            self.values[w.0].data(),
            b.map(|bv| self.values[bv.0].data()),
            batch,
            d_in,
            wo,
            out.data_mut(),
        );
        let needs = self.needs(x) || self.needs(w) || b.map_or(false, |bv| self.needs(bv));
        self.push(out, Op::Linear { x, w, b }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.values[a.0].shape(), self.values[b.0].shape(), "add: shape mismatch");
        let mut out = self.values[a.0].clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.values[b.0].data()) {
            *o = *o + v;
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Add { a, b }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.values[x.0].map(|v| if v > T::zero() { v } else { T::zero() });
        let needs = self.needs(x);
        self.push(out, Op::Relu { x }, needs)
    }

    /// Per-row normalization to zero mean / unit variance, then affine
    /// transform by gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let rows = self.values[x.0].rows();
        let d = self.values[x.0].cols();
        assert!(d >= 1 && eps > 0.0);
        assert_eq!(self.values[gain.0].numel(), d, "layer_norm: gain length mismatch");
        assert_eq!(self.values[bias.0].numel(), d, "layer_norm: bias length mismatch");
        let mut out = Tensor::zeros(&[rows, d]);
        let mut stats = Vec::with_capacity(rows);
        let dt = T::of(d as f64);
        let epst = T::of(eps);
        for r in 0..rows {
            let xr = self.values[x.0].row(r);
            let mut mean = T::zero();
            for &v in xr {
                mean += v;
            }
            mean = mean / dt;
            let mut var = T::zero();
            for &v in xr {
                let c = v - mean;
                var += c * c;
            }
            var = var / dt;
            let inv = T::one() / (var + epst).sqrt();
            stats.push((mean, inv));
            let g = self.values[gain.0].data();
            let b = self.values[bias.0].data();
            let or = out.row_mut(r);
            for i in 0..d {
                or[i] = (xr[i] - mean) * inv * g[i] + b[i];
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(out, Op::LayerNorm { x, gain, bias, eps, stats }, needs)
    }

    /// GRU-style gate: lambda = sigmoid([x, y] W + b);
    /// out = lambda .* x + (1 - lambda) .* y.
    pub fn gate(&mut self, x: Var, y: Var, w: Var, b: Var) -> Var {
        let rows = self.values[x.0].rows();
        let d = self.values[x.0].cols();
        assert_eq!(self.values[y.0].shape(), self.values[x.0].shape(), "gate: x/y shape mismatch");
        assert_eq!(self.values[w.0].shape(), &[2 * d, d], "gate: weight must be [2d, d]");
        assert_eq!(self.values[b.0].numel(), d, "gate: bias length mismatch");
        let mut z = Tensor::zeros(&[rows, d]);
        let w_all = self.values[w.0].data();
        tensor::linear_forward(
            self.values[x.0].data(),
            &w_all[..d * d],
            Some(self.values[b.0].data()),
            rows,
            d,
            d,
            z.data_mut(),
        );
        tensor::matmul_acc(self.values[y.0].data(), &w_all[d * d..], rows, d, d, z.data_mut());
        let lambda = z.map(|v| T::one() / (T::one() + (-v).exp()));
        let mut out = Tensor::zeros(&[rows, d]);
        {
            let xd = self.values[x.0].data();
            let yd = self.values[y.0].data();
            let ld = lambda.data();
            let od = out.data_mut();
            for i in 0..od.len() {
                od[i] = ld[i] * xd[i] + (T::one() - ld[i]) * yd[i];
            }
        }
        let needs = self.needs(x) || self.needs(y) || self.needs(w) || self.needs(b);
        self.push(out, Op::Gate { x, y, w, b, lambda }, needs)
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let c = self.values[a.0].cols();
        assert_eq!(c, self.values[b.0].cols(), "concat_rows: column mismatch");
        let (ra, rb) = (self.values[a.0].rows(), self.values[b.0].rows());
        let mut data = Vec::with_capacity((ra + rb) * c);
        data.extend_from_slice(self.values[a.0].data());
        data.extend_from_slice(self.values[b.0].data());
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::from_vec(&[ra + rb, c], data), Op::ConcatRows { a, b }, needs)
    }

    /// Multi-head attention with relative positional scores and a sliding
    /// causal band. Queries are the last `rows(q)` positions of the window
    /// `k`/`v` (the first `mem_len` window rows are memory); query `i` may
    /// attend window position `j` iff `0 <= (mem_len + i) - j <= span`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, rel: Var, heads: usize, mem_len: usize, span: usize) -> Var {
        let (out, probs) = attention_forward(
            &self.values[q.0],
            &self.values[k.0],
            &self.values[v.0],
            &self.values[rel.0],
            heads,
            mem_len,
            span,
        );
        let needs = self.needs(q) || self.needs(k) || self.needs(v) || self.needs(rel);
        self.push(out, Op::Attention { q, k, v, rel, heads, mem_len, span, probs }, needs)
    }

    /// Scalar sum of all entries, accumulated in f64.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.values[x.0].data().iter().map(|v| v.wide()).sum();
        let needs = self.needs(x);
        self.push(Tensor::from_vec(&[1], vec![T::of(s)]), Op::SumAll { x }, needs)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let ct = T::of(c);
        let out = self.values[x.0].map(|v| v * ct);
        let needs = self.needs(x);
        self.push(out, Op::Scale { x, c }, needs)
    }

    /// Weighted sum of scalar nodes: sum_p c_p * x_p. Used to combine loss
    /// components into the total objective.
    pub fn add_scaled(&mut self, parts: Vec<(Var, f64)>) -> Var {
        let mut total = 0.0f64;
        let mut needs = false;
        for &(v, c) in &parts {
            assert_eq!(self.values[v.0].numel(), 1, "add_scaled expects scalar nodes");
            total += c * self.values[v.0].data()[0].wide();
            needs |= self.needs(v);
        }
        self.push(Tensor::from_vec(&[1], vec![T::of(total)]), Op::AddScaled { parts }, needs)
    }

    /// Negated mean clipped surrogate of the PPO objective, computed in f64
    /// from the policy head outputs.
    pub fn policy_loss(&mut self, mean: Var, log_std: Var, data: PolicyLossData) -> Var {
        let batch = self.values[mean.0].rows();
        let adim = self.values[mean.0].cols();
        assert_eq!(self.values[log_std.0].numel(), adim, "policy_loss: log_std length mismatch");
        assert_eq!(data.actions.len(), batch * adim);
        assert_eq!(data.old_log_probs.len(), batch);
        assert_eq!(data.advantages.len(), batch);
        let mut total = 0.0f64;
        for i in 0..batch {
            let lp = gaussian_log_prob(
                self.values[mean.0].row(i),
                self.values[log_std.0].data(),
                &data.actions[i * adim..(i + 1) * adim],
            );
            let ratio = (lp - data.old_log_probs[i]).exp();
            total += clipped_surrogate(ratio, data.advantages[i], data.clip);
        }
        let loss = -(total / batch as f64);
        let needs = self.needs(mean) || self.needs(log_std);
        self.push(Tensor::from_vec(&[1], vec![T::of(loss)]), Op::PolicyLoss { mean, log_std, data }, needs)
    }

    /// Closed-form diagonal-Gaussian entropy (state-independent).
    pub fn entropy(&mut self, log_std: Var) -> Var {
        let h = gaussian_entropy(self.values[log_std.0].data());
        let needs = self.needs(log_std);
        self.push(Tensor::from_vec(&[1], vec![T::of(h)]), Op::GaussianEntropy { log_std }, needs)
    }

    /// Mean squared error of predicted values against fixed returns.
    pub fn value_loss(&mut self, v: Var, returns: Vec<f64>) -> Var {
        let n = self.values[v.0].numel();
        assert_eq!(n, returns.len(), "value_loss: length mismatch");
        let mut total = 0.0f64;
        for (pv, rv) in self.values[v.0].data().iter().zip(returns.iter()) {
            let d = pv.wide() - rv;
            total += d * d;
        }
        let loss = total / n as f64;
        let needs = self.needs(v);
        self.push(Tensor::from_vec(&[1], vec![T::of(loss)]), Op::ValueLoss { v, returns }, needs)
    }

    fn grad_buf(&mut self, v: Var) -> &mut Tensor<T> {
        if self.grads[v.0].is_none() {
            let shape = self.values[v.0].shape().to_vec();
            self.grads[v.0] = Some(Tensor::zeros(&shape));
        }
        self.grads[v.0].as_mut().unwrap()
    }

    /// Reverse sweep from a scalar root. Gradients accumulate into every
    /// node that needs them; constants are skipped.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.values[root.0].numel(), 1, "backward root must be scalar");
        self.grad_buf(root).data_mut()[0] = T::one();
        for idx in (0..=root.0).rev() {
            if !self.metas[idx].needs_grad {
                continue;
            }
            let gout = match self.grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(idx, &gout);
            self.grads[idx] = Some(gout);
        }
    }

    fn backprop_node(&mut self, idx: usize, gout: &Tensor<T>) {
        // Ops are moved out so input gradients can be mutated; Leaf is a
        // cheap placeholder while we work.
        let op = std::mem::replace(&mut self.metas[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (batch, d_in) = (self.values[x.0].rows(), self.values[x.0].cols());
                let d_out = self.values[w.0].shape()[1];
                if self.needs(*x) {
                    let w_val = self.values[w.0].clone();
                    let g = self.grad_buf(*x);
                    let mut dx = vec![T::zero(); batch * d_in];
                    tensor::matmul_nt(gout.data(), transpose_view(&w_val).data(), batch, d_out, d_in, &mut dx);
                    for (o, v) in g.data_mut().iter_mut().zip(dx) {
                        *o = *o + v;
                    }
                }
                if self.needs(*w) {
                    let x_val = self.values[x.0].clone();
                    let g = self.grad_buf(*w);
                    tensor::matmul_tn_acc(x_val.data(), gout.data(), batch, d_in, d_out, g.data_mut());
                }
                if let Some(bv) = b {
                    if self.needs(*bv) {
                        let g = self.grad_buf(*bv);
                        tensor::col_sum_acc(gout.data(), batch, d_out, g.data_mut());
                    }
                }
            }
            Op::Add { a, b } => {
                for &inp in &[*a, *b] {
                    if self.needs(inp) {
                        let g = self.grad_buf(inp);
                        for (o, &v) in g.data_mut().iter_mut().zip(gout.data()) {
                            *o = *o + v;
                        }
                    }
                }
            }
            Op::Relu { x } => {
                if self.needs(*x) {
                    let x_val = self.values[x.0].clone();
                    let g = self.grad_buf(*x);
                    for ((o, &v), &xv) in g.data_mut().iter_mut().zip(gout.data()).zip(x_val.data()) {
                        if xv > T::zero() {
                            *o = *o + v;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, eps: _, stats } => {
                let rows = self.values[x.0].rows();
                let d = self.values[x.0].cols();
                let dt = T::of(d as f64);
                let x_val = self.values[x.0].clone();
                let gain_val = self.values[gain.0].clone();
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(&[rows, d]);
                    for r in 0..rows {
                        let (mean, inv) = stats[r];
                        let xr = x_val.row(r);
                        let gr = gout.row(r);
                        let gd = gain_val.data();
                        // dyh = dy .* gain; dx = inv*(dyh - mean(dyh) - xhat*mean(dyh .* xhat))
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for i in 0..d {
                            let xh = (xr[i] - mean) * inv;
                            let dyh = gr[i] * gd[i];
                            m1 += dyh;
                            m2 += dyh * xh;
                        }
                        m1 = m1 / dt;
                        m2 = m2 / dt;
                        let dr = dx.row_mut(r);
                        for i in 0..d {
                            let xh = (xr[i] - mean) * inv;
                            let dyh = gr[i] * gd[i];
                            dr[i] = (dyh - m1 - xh * m2) * inv;
                        }
                    }
                    let g = self.grad_buf(*x);
                    for (o, &v) in g.data_mut().iter_mut().zip(dx.data()) {
                        *o = *o + v;
                    }
                }
                if self.needs(*gain) {
                    let mut dg = vec![T::zero(); d];
                    for r in 0..rows {
                        let (mean, inv) = stats[r];
                        let xr = x_val.row(r);
                        let gr = gout.row(r);
                        for i in 0..d {
                            dg[i] = dg[i] + gr[i] * (xr[i] - mean) * inv;
                        }
                    }
                    let g = self.grad_buf(*gain);
                    for (o, v) in g.data_mut().iter_mut().zip(dg) {
                        *o = *o + v;
                    }
                }
                if self.needs(*bias) {
                    let g = self.grad_buf(*bias);
                    tensor::col_sum_acc(gout.data(), rows, d, g.data_mut());
                }
            }
            Op::Gate { x, y, w, b, lambda } => {
                let rows = self.values[x.0].rows();
                let d = self.values[x.0].cols();
                let x_val = self.values[x.0].clone();
                let y_val = self.values[y.0].clone();
                let w_val = self.values[w.0].clone();
                // dz = dout .* (x - y) .* lambda .* (1 - lambda)
                let mut dz = Tensor::zeros(&[rows, d]);
                {
                    let xd = x_val.data();
                    let yd = y_val.data();
                    let ld = lambda.data();
                    let dd = dz.data_mut();
                    for i in 0..dd.len() {
                        dd[i] = gout.data()[i] * (xd[i] - yd[i]) * ld[i] * (T::one() - ld[i]);
                    }
                }
                let w_all = w_val.data();
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); rows * d];
                    // lambda .* dout + dz W_top^T
                    for i in 0..dx.len() {
                        dx[i] = lambda.data()[i] * gout.data()[i];
                    }
                    let mut dx_lin = vec![T::zero(); rows * d];
                    tensor::matmul_nt(dz.data(), &transpose_square(&w_all[..d * d], d), rows, d, d, &mut dx_lin);
                    let g = self.grad_buf(*x);
                    for i in 0..rows * d {
                        g.data_mut()[i] = g.data_mut()[i] + dx[i] + dx_lin[i];
                    }
                }
                if self.needs(*y) {
                    let mut dy = vec![T::zero(); rows * d];
                    for i in 0..dy.len() {
                        dy[i] = (T::one() - lambda.data()[i]) * gout.data()[i];
                    }
                    let mut dy_lin = vec![T::zero(); rows * d];
                    tensor::matmul_nt(dz.data(), &transpose_square(&w_all[d * d..], d), rows, d, d, &mut dy_lin);
                    let g = self.grad_buf(*y);
                    for i in 0..rows * d {
                        g.data_mut()[i] = g.data_mut()[i] + dy[i] + dy_lin[i];
                    }
                }
                if self.needs(*w) {
                    let g = self.grad_buf(*w);
                    let (top, bot) = g.data_mut().split_at_mut(d * d);
                    tensor::matmul_tn_acc(x_val.data(), dz.data(), rows, d, d, top);
                    tensor::matmul_tn_acc(y_val.data(), dz.data(), rows, d, d, bot);
                }
                if self.needs(*b) {
                    let g = self.grad_buf(*b);
                    tensor::col_sum_acc(dz.data(), rows, d, g.data_mut());
                }
            }
            Op::ConcatRows { a, b } => {
                let ra = self.values[a.0].rows();
                let c = self.values[a.0].cols();
                if self.needs(*a) {
                    let g = self.grad_buf(*a);
                    for (o, &v) in g.data_mut().iter_mut().zip(&gout.data()[..ra * c]) {
                        *o = *o + v;
                    }
                }
                if self.needs(*b) {
                    let g = self.grad_buf(*b);
                    for (o, &v) in g.data_mut().iter_mut().zip(&gout.data()[ra * c..]) {
                        *o = *o + v;
                    }
                }
            }
            Op::Attention { q, k, v, rel, heads, mem_len, span, probs } => {
                let grads = attention_backward(
                    &self.values[q.0],
                    &self.values[k.0],
                    &self.values[v.0],
                    &self.values[rel.0],
                    probs,
                    gout,
                    *heads,
                    *mem_len,
                    *span,
                );
                for (inp, gin) in [(*q, grads.0), (*k, grads.1), (*v, grads.2), (*rel, grads.3)] {
                    if self.needs(inp) {
                        let g = self.grad_buf(inp);
                        for (o, &gv) in g.data_mut().iter_mut().zip(gin.data()) {
                            *o = *o + gv;
                        }
                    }
                }
            }
            Op::SumAll { x } => {
                if self.needs(*x) {
                    let s = gout.data()[0];
                    let g = self.grad_buf(*x);
                    for o in g.data_mut() {
                        *o = *o + s;
                    }
                }
            }
            Op::Scale { x, c } => {
                if self.needs(*x) {
                    let ct = T::of(*c);
                    let g = self.grad_buf(*x);
                    for (o, &v) in g.data_mut().iter_mut().zip(gout.data()) {
                        *o = *o + ct * v;
                    }
                }
            }
            Op::AddScaled { parts } => {
                let s = gout.data()[0];
                for &(p, c) in parts {
                    if self.needs(p) {
                        let g = self.grad_buf(p);
                        g.data_mut()[0] = g.data_mut()[0] + s * T::of(c);
                    }
                }
            }
            Op::PolicyLoss { mean, log_std, data } => {
                let batch = self.values[mean.0].rows();
                let adim = self.values[mean.0].cols();
                let seed = gout.data()[0].wide();
                let mean_val = self.values[mean.0].clone();
                let ls_val = self.values[log_std.0].clone();
                let mut dmean = vec![0.0f64; batch * adim];
                let mut dls = vec![0.0f64; adim];
                for i in 0..batch {
                    let mrow = mean_val.row(i);
                    let arow = &data.actions[i * adim..(i + 1) * adim];
                    let lp = gaussian_log_prob(mrow, ls_val.data(), arow);
                    let ratio = (lp - data.old_log_probs[i]).exp();
                    let adv = data.advantages[i];
                    let unclipped = ratio * adv;
                    let clipped = ratio.clamp(1.0 - data.clip, 1.0 + data.clip) * adv;
                    // d surrogate / d logp: active only on the unclipped branch.
                    if unclipped <= clipped {
                        let dlp = -seed * adv * ratio / batch as f64;
                        for d in 0..adim {
                            let raw = ls_val.data()[d].wide();
                            let ls = clamp_log_std(raw);
                            let sd = ls.exp();
                            let z = (arow[d] - mrow[d].wide()) / sd;
                            // dlogp/dmean = z / sd ; dlogp/dls = z^2 - 1 (inside clamp band)
                            dmean[i * adim + d] += dlp * z / sd;
                            if (LOG_STD_MIN..=LOG_STD_MAX).contains(&raw) {
                                dls[d] += dlp * (z * z - 1.0);
                            }
                        }
                    }
                }
                if self.needs(*mean) {
                    let g = self.grad_buf(*mean);
                    for (o, v) in g.data_mut().iter_mut().zip(dmean) {
                        *o = *o + T::of(v);
                    }
                }
                if self.needs(*log_std) {
                    let g = self.grad_buf(*log_std);
                    for (o, v) in g.data_mut().iter_mut().zip(dls) {
                        *o = *o + T::of(v);
                    }
                }
            }
            Op::GaussianEntropy { log_std } => {
                if self.needs(*log_std) {
                    let seed = gout.data()[0];
                    let ls_val = self.values[log_std.0].clone();
                    let g = self.grad_buf(*log_std);
                    for (o, &raw) in g.data_mut().iter_mut().zip(ls_val.data()) {
                        let rw = raw.wide();
                        if (LOG_STD_MIN..=LOG_STD_MAX).contains(&rw) {
                            *o = *o + seed;
                        }
                    }
                }
            }
            Op::ValueLoss { v, returns } => {
                if self.needs(*v) {
                    let n = returns.len() as f64;
                    let seed = gout.data()[0].wide();
                    let v_val = self.values[v.0].clone();
                    let g = self.grad_buf(*v);
                    for i in 0..returns.len() {
                        let dv = seed * 2.0 * (v_val.data()[i].wide() - returns[i]) / n;
                        g.data_mut()[i] = g.data_mut()[i] + T::of(dv);
                    }
                }
            }
        }
        self.metas[idx].op = op;
    }

    /// Fold gradients of named parameter nodes into the store accumulators.
    pub fn accumulate_param_grads(&self, store: &mut ParameterStore<T>) {
        for (name, &var) in &self.param_vars {
            if let Some(g) = &self.grads[var.0] {
                store.grad_mut(name).data_mut().iter_mut().zip(g.data()).for_each(|(o, &v)| *o = *o + v);
            }
        }
    }
}

impl<T: Scalar> Default for GradTape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn transpose_view<T: Scalar>(w: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (w.shape()[0], w.shape()[1]);
    let mut out = Tensor::zeros(&[c, r]);
    for i in 0..r {
        for j in 0..c {
            out.data_mut()[j * r + i] = w.data()[i * c + j];
        }
    }
    out
}

fn transpose_square<T: Scalar>(w: &[T], d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); d * d];
    for i in 0..d {
        for j in 0..d {
            out[j * d + i] = w[i * d + j];
        }
    }
    out
}

/// Attention forward pass, shared by the tape and by tests that inspect the
/// weights directly. Returns (output [c, d], probs [c, L]).
///
/// Scores: A[i][j] = (q_i . k_j + q_i . rel[(mem_len + i) - j]) / sqrt(d_k),
/// softmax over the causal band 0 <= (mem_len + i) - j <= span. Positions
/// outside the band carry exactly zero weight.
pub fn attention_forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    rel: &Tensor<T>,
    heads: usize,
    mem_len: usize,
    span: usize,
) -> (Tensor<T>, Tensor<T>) {
    let c = q.rows();
    let d = q.cols();
    let win = k.rows();
    assert!(win > 0, "attention: empty window");
    assert!(c > 0, "attention: no queries");
    assert_eq!(v.rows(), win, "attention: k/v row mismatch");
    assert_eq!(k.cols(), d, "attention: k dim mismatch");
    assert_eq!(v.cols(), d, "attention: v dim mismatch");
    assert_eq!(win, mem_len + c, "attention: window must be memory plus queries");
    assert!(d % heads == 0, "attention: dim not divisible by heads");
    assert!(rel.rows() > span, "attention: rel table too small for span");
    assert_eq!(rel.cols(), d, "attention: rel dim mismatch");
    let dk = d / heads;
    let scale = T::of(1.0 / (dk as f64).sqrt());

    let mut out = Tensor::zeros(&[c, d]);
    let mut probs = Tensor::zeros(&[c, win]);
    let mut scores = vec![T::zero(); win];
    for h in 0..heads {
        let col = h * dk;
        for i in 0..c {
            let abs_pos = mem_len + i;
            let lo = abs_pos.saturating_sub(span);
            let qi = &q.row(i)[col..col + dk];
            for j in lo..=abs_pos {
                let off = abs_pos - j;
                let s = tensor::dot(qi, &k.row(j)[col..col + dk])
                    + tensor::dot(qi, &rel.row(off)[col..col + dk]);
                scores[j] = s * scale;
            }
            // Numerically stable softmax over the band.
            let mut mx = scores[lo];
            for j in lo + 1..=abs_pos {
                if scores[j] > mx {
                    mx = scores[j];
                }
            }
            let mut denom = T::zero();
            for j in lo..=abs_pos {
                let e = (scores[j] - mx).exp();
                scores[j] = e;
                denom += e;
            }
            let pr = probs.row_mut(i);
            for j in lo..=abs_pos {
                pr[j] = scores[j] / denom;
            }
            let orow = &mut out.row_mut(i)[col..col + dk];
            for j in lo..=abs_pos {
                let w = pr[j];
                let vr = &v.row(j)[col..col + dk];
                for (o, &vv) in orow.iter_mut().zip(vr.iter()) {
                    *o = *o + w * vv;
                }
            }
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    rel: &Tensor<T>,
    probs: &Tensor<T>,
    gout: &Tensor<T>,
    heads: usize,
    mem_len: usize,
    span: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>) {
    let c = q.rows();
    let d = q.cols();
    let win = k.rows();
    let dk = d / heads;
    let scale = T::of(1.0 / (dk as f64).sqrt());
    let mut dq = Tensor::zeros(&[c, d]);
    let mut dkt = Tensor::zeros(&[win, d]);
    let mut dv = Tensor::zeros(&[win, d]);
    let mut drel = Tensor::zeros(&[rel.rows(), d]);
    let mut dp = vec![T::zero(); win];
    let mut ds = vec![T::zero(); win];
    for h in 0..heads {
        let col = h * dk;
        for i in 0..c {
            let abs_pos = mem_len + i;
            let lo = abs_pos.saturating_sub(span);
            let go = &gout.row(i)[col..col + dk];
            let pr = probs.row(i);
            // dP[j] = dout . v_j ; softmax backward: dS = P .* (dP - sum(dP .* P))
            let mut inner = T::zero();
            for j in lo..=abs_pos {
                let d_p = tensor::dot(go, &v.row(j)[col..col + dk]);
                dp[j] = d_p;
                inner += d_p * pr[j];
            }
            for j in lo..=abs_pos {
                ds[j] = pr[j] * (dp[j] - inner) * scale;
            }
            let qi = &q.row(i)[col..col + dk];
            let dqi = &mut dq.row_mut(i)[col..col + dk];
            for j in lo..=abs_pos {
                let off = abs_pos - j;
                let w = pr[j];
                let s = ds[j];
                // dV_j += P * dout
                {
                    let dvj = &mut dv.row_mut(j)[col..col + dk];
                    for (o, &g) in dvj.iter_mut().zip(go.iter()) {
                        *o = *o + w * g;
                    }
                }
                // dQ_i += dS * (k_j + rel_off); dK_j += dS * q_i; dRel_off += dS * q_i
                {
                    let kj = &k.row(j)[col..col + dk];
                    let rj = &rel.row(off)[col..col + dk];
                    for t in 0..dk {
                        dqi[t] = dqi[t] + s * (kj[t] + rj[t]);
                    }
                }
                {
                    let dkj = &mut dkt.row_mut(j)[col..col + dk];
                    for (o, &qv) in dkj.iter_mut().zip(qi.iter()) {
                        *o = *o + s * qv;
                    }
                }
                {
                    let drj = &mut drel.row_mut(off)[col..col + dk];
                    for (o, &qv) in drj.iter_mut().zip(qi.iter()) {
                        *o = *o + s * qv;
                    }
                }
            }
        }
    }
    (dq, dkt, dv, drel)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data)
    }

    #[test]
    fn linear_identity_and_zero_input() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.input(t64(&[1, 2], vec![1.0, 0.0]));
        let w = tape.input(Tensor::eye(2));
        let b = tape.input(t64(&[2], vec![0.0, 0.0]));
        let y = tape.linear(x, w, Some(b));
        assert_eq!(tape.value(y).data(), &[1.0, 0.0]);

        let mut tape = GradTape::<f64>::new();
        let x = tape.input(t64(&[1, 2], vec![0.0, 0.0]));
        let w = tape.input(t64(&[2, 2], vec![5.0, -3.0, 2.0, 7.0]));
        let b = tape.input(t64(&[2], vec![3.0, 4.0]));
        let y = tape.linear(x, w, Some(b));
        assert_eq!(tape.value(y).data(), &[3.0, 4.0]);
    }

    #[test]
    fn linear_hand_matrix_multiply() {
        // x=[[1,2]], W=[[1,1],[1,-1]] -> [[3,-1]]
        let mut tape = GradTape::<f64>::new();
        let x = tape.input(t64(&[1, 2], vec![1.0, 2.0]));
        let w = tape.input(t64(&[2, 2], vec![1.0, 1.0, 1.0, -1.0]));
        let b = tape.input(t64(&[2], vec![0.0, 0.0]));
        let y = tape.linear(x, w, Some(b));
        assert_eq!(tape.value(y).data(), &[3.0, -1.0]);
    }

    #[test]
    fn layer_norm_constant_row_collapses_to_bias() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.input(t64(&[1, 4], vec![3.5; 4]));
        let g = tape.input(t64(&[4], vec![1.0; 4]));
        let b = tape.input(t64(&[4], vec![0.25; 4]));
        let y = tape.layer_norm(x, g, b, 1e-5);
        for &v in tape.value(y).data() {
            assert!((v - 0.25).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_hand_computed() {
        // x=[1,2,3]: mean 2, pop variance 2/3 -> [-1.2247, 0, 1.2247]
        let mut tape = GradTape::<f64>::new();
        let x = tape.input(t64(&[1, 3], vec![1.0, 2.0, 3.0]));
        let g = tape.input(t64(&[3], vec![1.0; 3]));
        let b = tape.input(t64(&[3], vec![0.0; 3]));
        let y = tape.layer_norm(x, g, b, 1e-10);
        let out = tape.value(y).data();
        assert!((out[0] + 1.224744871).abs() < 1e-6);
        assert!(out[1].abs() < 1e-9);
        assert!((out[2] - 1.224744871).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_already_normalized_passthrough() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.input(t64(&[1, 2], vec![1.0, -1.0]));
        let g = tape.input(t64(&[2], vec![1.0, 1.0]));
        let b = tape.input(t64(&[2], vec![0.0, 0.0]));
        let y = tape.layer_norm(x, g, b, 1e-12);
        let out = tape.value(y).data();
        assert!((out[0] - 1.0).abs() < 1e-6);
        assert!((out[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn gate_saturation_behaviour() {
        let d = 3;
        let x_data = vec![0.3, -0.7, 1.1];
        let y_data = vec![-0.2, 0.4, 0.9];
        for (bias, expect_x) in [(20.0, true), (-20.0, false)] {
            let mut tape = GradTape::<f64>::new();
            let x = tape.input(t64(&[1, d], x_data.clone()));
            let y = tape.input(t64(&[1, d], y_data.clone()));
            let w = tape.input(Tensor::zeros(&[2 * d, d]));
            let b = tape.input(t64(&[d], vec![bias; d]));
            let out = tape.gate(x, y, w, b);
            let expect = if expect_x { &x_data } else { &y_data };
            for (o, e) in tape.value(out).data().iter().zip(expect) {
                assert!((o - e).abs() < 1e-6, "gate bias {} output {} expected {}", bias, o, e);
            }
        }
        // Zero weights and bias: exact average.
        let mut tape = GradTape::<f64>::new();
        let x = tape.input(t64(&[1, d], x_data.clone()));
        let y = tape.input(t64(&[1, d], y_data.clone()));
        let w = tape.input(Tensor::zeros(&[2 * d, d]));
        let b = tape.input(Tensor::zeros(&[d]));
        let out = tape.gate(x, y, w, b);
        for i in 0..d {
            assert_eq!(tape.value(out).data()[i], (x_data[i] + y_data[i]) / 2.0);
        }
    }

    #[test]
    fn attention_single_token_returns_value_row() {
        // L=1: softmax over one element is 1, output = value projection.
        let d = 4;
        let mut tape = GradTape::<f64>::new();
        let q = tape.input(t64(&[1, d], vec![0.3, -0.1, 0.8, 0.2]));
        let k = tape.input(t64(&[1, d], vec![1.0, 2.0, -1.0, 0.5]));
        let v = tape.input(t64(&[1, d], vec![4.0, 3.0, 2.0, 1.0]));
        let rel = tape.input(Tensor::zeros(&[9, d]));
        let out = tape.attention(q, k, v, rel, 2, 0, 8);
        assert_eq!(tape.value(out).data(), &[4.0, 3.0, 2.0, 1.0]);
    }

    #[test]
    fn attention_constant_scores_give_uniform_weights() {
        // W^K = 0 analog: all key rows zero, rel zero -> uniform over band.
        let d = 2;
        let win = 5;
        let q = t64(&[1, d], vec![0.7, -0.4]);
        let k = Tensor::zeros(&[win, d]);
        let mut v = Tensor::zeros(&[win, d]);
        for j in 0..win {
            v.data_mut()[j * d] = j as f64;
        }
        let rel = Tensor::zeros(&[win, d]);
        let (out, probs) = attention_forward(&q, &k, &v, &rel, 1, win - 1, win - 1);
        for j in 0..win {
            assert!((probs.data()[j] - 0.2).abs() < 1e-12);
        }
        assert!((out.data()[0] - 2.0).abs() < 1e-12); // mean of 0..4
    }

    #[test]
    fn attention_rows_sum_to_one_and_mask_is_exact() {
        let d = 4;
        let mem = 3;
        let c = 4;
        let win = mem + c;
        let mut rng = 42u64;
        let mut next = || {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((rng >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        };
        let q = t64(&[c, d], (0..c * d).map(|_| next()).collect());
        let k = t64(&[win, d], (0..win * d).map(|_| next()).collect());
        let v = t64(&[win, d], (0..win * d).map(|_| next()).collect());
        let rel = t64(&[mem + 1, d], (0..(mem + 1) * d).map(|_| next()).collect());
        let (_, probs) = attention_forward(&q, &k, &v, &rel, 2, mem, mem);
        for i in 0..c {
            let row = probs.row(i);
            let sum: f64 = row.iter().sum();
            assert!((sum - 2.0).abs() < 1e-9, "two heads, each row sums to 1");
            // Future positions and positions beyond the span are exactly zero.
            for j in 0..win {
                let abs = mem + i;
                if j > abs || abs - j > mem {
                    assert_eq!(row[j], 0.0);
                }
            }
        }
    }

    #[test]
    fn attention_shift_invariance() {
        // Scores depend only on i - j: the same physical window evaluated at
        // two different absolute offsets (one-step vs chunked batching) must
        // agree bitwise.
        let d = 4;
        let mem = 4;
        let mut rng = 7u64;
        let mut next = || {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((rng >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        };
        let total = mem + 3;
        let embeds = t64(&[total, d], (0..total * d).map(|_| next()).collect());
        let rel = t64(&[mem + 1, d], (0..(mem + 1) * d).map(|_| next()).collect());

        // Chunked: queries are the last 3 rows.
        let q_chunk = t64(&[3, d], embeds.data()[mem * d..].to_vec());
        let (out_chunk, _) = attention_forward(&q_chunk, &embeds, &embeds, &rel, 2, mem, mem);

        // One-step: evaluate the final row with its own 4-row memory window
        // (absolute positions shifted by 3).
        let q_one = t64(&[1, d], embeds.data()[(total - 1) * d..].to_vec());
        let win_rows = t64(&[mem + 1, d], embeds.data()[(total - 1 - mem) * d..].to_vec());
        let (out_one, _) = attention_forward(&q_one, &win_rows, &win_rows, &rel, 2, mem, mem);

        let last_chunk_row = &out_chunk.data()[2 * d..];
        assert_eq!(last_chunk_row, out_one.data(), "outputs must match bitwise across shifts");
    }

    #[test]
    #[should_panic(expected = "empty attention window")]
    fn attention_empty_window_errors() {
        let q = Tensor::<f64>::zeros(&[0, 4]);
        let k = Tensor::<f64>::zeros(&[0, 4]);
        let v = Tensor::<f64>::zeros(&[0, 4]);
        let rel = Tensor::<f64>::zeros(&[1, 4]);
        attention_forward(&q, &k, &v, &rel, 1, 0, 0);
    }

    #[test]
    fn clipped_surrogate_examples() {
        // ratio 1: surrogate equals the advantage.
        assert_eq!(clipped_surrogate(1.0, 2.5, 0.2), 2.5);
        // ratio 2, eps 0.2, A=1 -> min(2, 1.2) = 1.2
        assert_eq!(clipped_surrogate(2.0, 1.0, 0.2), 1.2);
        // ratio 0.5, eps 0.2, A=-1 -> min(-0.5, -0.8) = -0.8
        assert_eq!(clipped_surrogate(0.5, -1.0, 0.2), -0.8);
    }

    #[test]
    fn entropy_closed_form() {
        // sigma = 1, dim = 3: 3 * 0.5 * ln(2*pi*e) ~= 4.2568
        let ls = [0.0f64; 3];
        let h = gaussian_entropy(&ls);
        assert!((h - 4.256815599).abs() < 1e-6);
    }

    #[test]
    fn backward_through_simple_graph() {
        // y = sum(relu(x W)) with hand-checkable numbers.
        let mut tape = GradTape::<f64>::new();
        let x = tape.input(t64(&[1, 2], vec![1.0, -2.0]));
        let w = tape.input(t64(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let h = tape.linear(x, w, None);
        let r = tape.relu(h);
        let y = tape.sum_all(r);
        tape.backward(y);
        // h = [1, -2]; relu kills the second component.
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 0.0]);
        assert_eq!(tape.grad(w).unwrap().data(), &[1.0, 0.0, -2.0, 0.0]);
    }
}
