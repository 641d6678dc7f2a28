//! Minimal dense building blocks with explicit backward passes.
//!
//! Everything is `f64` and row-major. Gradients live in a structure of the
//! same type as the parameters (`zeros_like`), and every `backward` call
//! accumulates into it, so batch gradients are plain sums over examples.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::io::hash_f64_arrays;

/// A named-shape array of parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.gen_range(-bound..=bound)).collect(),
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }
}

/// A collection of parameter tensors with stable names and ordering.
pub trait Module: Clone {
    fn params(&self) -> Vec<(String, &Tensor)>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.fill_zero();
        g
    }

    fn fill_zero(&mut self) {
        for t in self.params_mut() {
            t.data.fill(0.0);
        }
    }

    /// `self += scale * other`, tensor by tensor.
    fn add_scaled(&mut self, other: &Self, scale: f64) {
        let src: Vec<&Tensor> = other.params().into_iter().map(|(_, t)| t).collect();
        for (dst, src) in self.params_mut().into_iter().zip(src) {
            for (d, s) in dst.data.iter_mut().zip(&src.data) {
                *d += scale * s;
            }
        }
    }

    fn scale(&mut self, factor: f64) {
        for t in self.params_mut() {
            t.data.iter_mut().for_each(|x| *x *= factor);
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.data.len()).sum()
    }

    /// Bit-exact fingerprint of all parameter values.
    fn param_hash(&self) -> String {
        let params = self.params();
        hash_f64_arrays(params.iter().map(|(_, t)| t.data.as_slice()))
    }

    fn all_finite(&self) -> bool {
        self.params()
            .iter()
            .all(|(_, t)| t.data.iter().all(|x| x.is_finite()))
    }
}

pub(crate) fn prefixed<'a>(prefix: &str, inner: Vec<(String, &'a Tensor)>) -> Vec<(String, &'a Tensor)> {
    inner
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}

// ── numerics ────────────────────────────────────────────────────────────

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators so the loop vectorises
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax in place.
pub fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mut out = x.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

// ── affine layer ────────────────────────────────────────────────────────

/// `y = W x + b` with `W` of shape `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (inputs.max(1) as f64).sqrt();
        Self {
            w: Tensor::uniform(&[outputs, inputs], bound, rng),
            b: Tensor::uniform(&[outputs], bound, rng),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            w: Tensor::zeros(&[outputs, inputs]),
            b: Tensor::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.w.shape[1]
    }

    pub fn outputs(&self) -> usize {
        self.w.shape[0]
    }

    pub fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out.iter_mut().zip(self.w.data.chunks_exact(x.len()).zip(&self.b.data)) {
            *o = dot(row, x) + b;
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.outputs()];
        self.forward_into(x, &mut out);
        out
    }

    /// Output `i` only.
    pub fn forward_one(&self, x: &[f64], i: usize) -> f64 {
        dot(self.w.row(i), x) + self.b.data[i]
    }

    /// Accumulate parameter gradients for upstream `dout`; optionally add `W^T dout` to `dx`.
    pub fn backward(&self, x: &[f64], dout: &[f64], grad: &mut Linear, dx: Option<&mut [f64]>) {
        let n = x.len();
        for (i, &d) in dout.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            axpy(d, x, &mut grad.w.data[i * n..(i + 1) * n]);
            grad.b.data[i] += d;
        }
        if let Some(dx) = dx {
            for (i, &d) in dout.iter().enumerate() {
                if d != 0.0 {
                    axpy(d, self.w.row(i), dx);
                }
            }
        }
    }

    /// Backward for a gradient on output `i` only.
    pub fn backward_one(&self, x: &[f64], i: usize, d: f64, grad: &mut Linear, dx: Option<&mut [f64]>) {
        let n = x.len();
        axpy(d, x, &mut grad.w.data[i * n..(i + 1) * n]);
        grad.b.data[i] += d;
        if let Some(dx) = dx {
            axpy(d, self.w.row(i), dx);
        }
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<(String, &Tensor)> {
        vec![("w".into(), &self.w), ("b".into(), &self.b)]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w, &mut self.b]
    }
}

// ── LSTM ────────────────────────────────────────────────────────────────

/// Single-layer LSTM with gates ordered `[input, forget, cell, output]` and a
/// zero initial state.
#[derive(Debug, Clone, PartialEq)]
pub struct Lstm {
    pub wx: Tensor,
    pub wh: Tensor,
    pub b: Tensor,
}

/// Forward activations kept for backpropagation through time.
#[derive(Debug, Clone, Default)]
pub struct LstmTrace {
    hidden: usize,
    /// Post-activation gates, `T x 4h`.
    gates: Vec<f64>,
    /// Cell states, `T x h`.
    cells: Vec<f64>,
    /// Hidden outputs, `T x h`.
    pub outputs: Vec<f64>,
}

impl LstmTrace {
    pub fn len(&self) -> usize {
        if self.hidden == 0 {
            0
        } else {
            self.outputs.len() / self.hidden
        }
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    pub fn output(&self, t: usize) -> &[f64] {
        &self.outputs[t * self.hidden..(t + 1) * self.hidden]
    }
}

impl Lstm {
    pub fn new(inputs: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (hidden.max(1) as f64).sqrt();
        Self {
            wx: Tensor::uniform(&[4 * hidden, inputs], bound, rng),
            wh: Tensor::uniform(&[4 * hidden, hidden], bound, rng),
            b: Tensor::uniform(&[4 * hidden], bound, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.wh.shape[1]
    }

    pub fn inputs(&self) -> usize {
        self.wx.shape[1]
    }

    /// Run over `inputs` (flattened `T x in`).
    pub fn forward(&self, inputs: &[f64]) -> LstmTrace {
        let h = self.hidden();
        let n_in = self.inputs();
        let steps = inputs.len() / n_in;
        let mut trace = LstmTrace {
            hidden: h,
            gates: vec![0.0; steps * 4 * h],
            cells: vec![0.0; steps * h],
            outputs: vec![0.0; steps * h],
        };
        let zeros = vec![0.0; h];
        let mut z = vec![0.0; 4 * h];
        for t in 0..steps {
            let x = &inputs[t * n_in..(t + 1) * n_in];
            let (h_prev, c_prev) = if t == 0 {
                (&zeros[..], &zeros[..])
            } else {
                (
                    &trace.outputs[(t - 1) * h..t * h],
                    &trace.cells[(t - 1) * h..t * h],
                )
            };
            for (r, zr) in z.iter_mut().enumerate() {
                *zr = self.b.data[r] + dot(self.wx.row(r), x) + dot(self.wh.row(r), h_prev);
            }
            let mut c_new = vec![0.0; h];
            let mut h_new = vec![0.0; h];
            let g = &mut trace.gates[t * 4 * h..(t + 1) * 4 * h];
            for j in 0..h {
                let i_g = sigmoid(z[j]);
                let f_g = sigmoid(z[h + j]);
                let c_g = z[2 * h + j].tanh();
                let o_g = sigmoid(z[3 * h + j]);
                g[j] = i_g;
                g[h + j] = f_g;
                g[2 * h + j] = c_g;
                g[3 * h + j] = o_g;
                c_new[j] = f_g * c_prev[j] + i_g * c_g;
                h_new[j] = o_g * c_new[j].tanh();
            }
            trace.cells[t * h..(t + 1) * h].copy_from_slice(&c_new);
            trace.outputs[t * h..(t + 1) * h].copy_from_slice(&h_new);
        }
        trace
    }

    /// Backpropagate `d_outputs` (`T x h`) through time. Accumulates parameter
    /// gradients and returns the gradient with respect to the inputs.
    pub fn backward(
        &self,
        inputs: &[f64],
        trace: &LstmTrace,
        d_outputs: &[f64],
        grad: &mut Lstm,
    ) -> Vec<f64> {
        let h = self.hidden();
        let n_in = self.inputs();
        let steps = trace.len();
        let mut d_inputs = vec![0.0; inputs.len()];
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        let mut dz = vec![0.0; 4 * h];
        let zeros = vec![0.0; h];
        for t in (0..steps).rev() {
            let g = &trace.gates[t * 4 * h..(t + 1) * 4 * h];
            let c = &trace.cells[t * h..(t + 1) * h];
            let c_prev = if t == 0 {
                &zeros[..]
            } else {
                &trace.cells[(t - 1) * h..t * h]
            };
            for j in 0..h {
                let dh = d_outputs[t * h + j] + dh_next[j];
                let (i_g, f_g, c_g, o_g) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
                let tc = c[j].tanh();
                let d_o = dh * tc;
                let dc = dc_next[j] + dh * o_g * (1.0 - tc * tc);
                dz[j] = dc * c_g * i_g * (1.0 - i_g);
                dz[h + j] = dc * c_prev[j] * f_g * (1.0 - f_g);
                dz[2 * h + j] = dc * i_g * (1.0 - c_g * c_g);
                dz[3 * h + j] = d_o * o_g * (1.0 - o_g);
                dc_next[j] = dc * f_g;
            }
            let x = &inputs[t * n_in..(t + 1) * n_in];
            let h_prev = if t == 0 {
                &zeros[..]
            } else {
                trace.output(t - 1)
            };
            dh_next.fill(0.0);
            let dx = &mut d_inputs[t * n_in..(t + 1) * n_in];
            for (r, &d) in dz.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                grad.b.data[r] += d;
                axpy(d, x, grad.wx.row_mut(r));
                axpy(d, self.wx.row(r), dx);
                if t > 0 {
                    axpy(d, h_prev, grad.wh.row_mut(r));
                    axpy(d, self.wh.row(r), &mut dh_next);
                }
            }
        }
        d_inputs
    }
}

impl Module for Lstm {
    fn params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("wx".into(), &self.wx),
            ("wh".into(), &self.wh),
            ("b".into(), &self.b),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.wx, &mut self.wh, &mut self.b]
    }
}

// ── optimiser ───────────────────────────────────────────────────────────

/// Adam with bias correction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step<M: Module>(&mut self, params: &mut M, grads: &M) {
        let grads: Vec<&Tensor> = grads.params().into_iter().map(|(_, t)| t).collect();
        let mut params = params.params_mut();
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.data.len()]).collect();
            self.v = self.m.clone();
        }
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, (p, g)) in params.iter_mut().zip(&grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..g.data.len() {
                let gi = g.data[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p.data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

pub mod gradcheck {
    //! Central finite differences over every parameter of a module.

    use super::Module;

    /// Largest relative error between analytic and numeric gradients, with
    /// the denominator floored at `floor` so near-zero entries compare absolutely.
    pub fn max_rel_error<M: Module>(
        model: &M,
        analytic: &M,
        loss: impl Fn(&M) -> f64,
        h: f64,
        floor: f64,
    ) -> f64 {
        let mut worst = 0.0f64;
        let grads: Vec<Vec<f64>> = analytic
            .params()
            .iter()
            .map(|(_, t)| t.data.clone())
            .collect();
        let mut probe = model.clone();
        let sizes: Vec<usize> = model.params().iter().map(|(_, t)| t.data.len()).collect();
        for (k, &n) in sizes.iter().enumerate() {
            for i in 0..n {
                let orig = probe.params_mut()[k].data[i];
                probe.params_mut()[k].data[i] = orig + h;
                let up = loss(&probe);
                probe.params_mut()[k].data[i] = orig - h;
                let down = loss(&probe);
                probe.params_mut()[k].data[i] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = grads[k][i];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
                worst = worst.max(err);
            }
        }
        worst
    }
}
