//! Event embedding, per-step max-pooling and the recurrent health-state encoder.
//!
//! An event `(i, v)` is embedded as `W [e^i ; e'^v] + b`, where `e^i` is a
//! learned variable vector and `e'^v` the fixed sinusoidal code of the value
//! sub-range. Splitting `W` into its variable and value blocks lets a batch
//! precompute `W_var e^i` and `W_val e'^v` once per vocabulary entry, which
//! makes each event embedding a single vector sum.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bins::DiscreteEvent;
use crate::error::{DacError, Result};
use crate::nn::{axpy, prefixed, Linear, Lstm, LstmTrace, Module, Tensor};

/// Dimensions of the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    /// Embedding and state dimension `k`.
    pub dim: usize,
    /// Number of value sub-ranges `V`.
    pub subranges: usize,
    pub num_variables: usize,
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.subranges == 0 || self.num_variables == 0 {
            return Err(DacError::validation(format!(
                "embedding dimension, sub-range count and vocabulary must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// The `2k` sinusoidal code of sub-range `v`: `sin(v j / (V k))` for the first
/// half and `cos(v j / (V k))` for the second, `0 <= j < k`.
pub fn positional_code(v: usize, subranges: usize, dim: usize) -> Result<Vec<f64>> {
    if v == 0 || v > subranges {
        return Err(DacError::validation(format!(
            "sub-range {v} outside 1..={subranges}"
        )));
    }
    let denom = (subranges * dim) as f64;
    let mut code = vec![0.0; 2 * dim];
    for j in 0..dim {
        let x = (v * j) as f64 / denom;
        code[j] = x.sin();
        code[dim + j] = x.cos();
    }
    Ok(code)
}

/// Elementwise maximum of a non-empty set of vectors.
pub fn max_pool(vectors: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = vectors
        .first()
        .ok_or_else(|| DacError::validation("cannot pool an empty event set"))?;
    let mut out = first.clone();
    for v in &vectors[1..] {
        for (o, x) in out.iter_mut().zip(v) {
            *o = o.max(*x);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateEncoder {
    pub config: EmbeddingConfig,
    /// Learned variable vectors, `[num_variables, k]`.
    pub var_emb: Tensor,
    /// Affine map `3k -> k` over `[e^i ; e'^v]`.
    pub proj: Linear,
    pub lstm: Lstm,
    /// Fixed value codes, `[V, 2k]`.
    codes: Vec<f64>,
}

/// Per-batch lookup tables: `W_var e^i` for every variable and `W_val e'^v`
/// for every sub-range. The same type holds their gradients during backward.
#[derive(Debug, Clone)]
pub struct EmbeddingTables {
    dim: usize,
    var_part: Vec<f64>,
    val_part: Vec<f64>,
    bias: Vec<f64>,
}

impl EmbeddingTables {
    fn zeros(config: &EmbeddingConfig) -> Self {
        Self {
            dim: config.dim,
            var_part: vec![0.0; config.num_variables * config.dim],
            val_part: vec![0.0; config.subranges * config.dim],
            bias: vec![0.0; config.dim],
        }
    }

    fn var(&self, i: u32) -> &[f64] {
        &self.var_part[i as usize * self.dim..(i as usize + 1) * self.dim]
    }

    fn val(&self, v: u16) -> &[f64] {
        let r = v as usize - 1;
        &self.val_part[r * self.dim..(r + 1) * self.dim]
    }
}

/// Forward activations for one trajectory.
#[derive(Debug, Clone)]
pub struct Encoding {
    dim: usize,
    /// Pooled step inputs, `T x k`.
    pooled: Vec<f64>,
    /// Index of the winning event for every pooled coordinate, `T x k`.
    winners: Vec<u32>,
    trace: LstmTrace,
}

impl Encoding {
    pub fn len(&self) -> usize {
        self.pooled.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.pooled.is_empty()
    }

    /// Health state `s_t` (0-based `t`).
    pub fn state(&self, t: usize) -> &[f64] {
        self.trace.output(t)
    }

    /// All states flattened, `T x k`.
    pub fn states(&self) -> &[f64] {
        &self.trace.outputs
    }

    /// Pooled step embedding `e_t`.
    pub fn pooled(&self, t: usize) -> &[f64] {
        &self.pooled[t * self.dim..(t + 1) * self.dim]
    }
}

impl StateEncoder {
    pub fn new(config: EmbeddingConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let k = config.dim;
        let bound = 1.0 / (k as f64).sqrt();
        let var_emb = Tensor::uniform(&[config.num_variables, k], bound, rng);
        let mut proj = Linear::zeros(3 * k, k);
        proj.w = Tensor::uniform(&[k, 3 * k], bound, rng);
        proj.b = Tensor::uniform(&[k], bound, rng);
        let lstm = Lstm::new(k, k, rng);
        Ok(Self::from_parts(config, var_emb, proj, lstm))
    }

    pub fn from_parts(config: EmbeddingConfig, var_emb: Tensor, proj: Linear, lstm: Lstm) -> Self {
        let codes = (1..=config.subranges)
            .flat_map(|v| positional_code(v, config.subranges, config.dim).expect("v in range"))
            .collect();
        Self {
            config,
            var_emb,
            proj,
            lstm,
            codes,
        }
    }

    fn code(&self, v: u16) -> &[f64] {
        let k2 = 2 * self.config.dim;
        let r = v as usize - 1;
        &self.codes[r * k2..(r + 1) * k2]
    }

    fn check_event(&self, e: &DiscreteEvent) -> Result<()> {
        if e.variable as usize >= self.config.num_variables {
            return Err(DacError::UnknownVariable(e.variable));
        }
        if e.subrange == 0 || e.subrange as usize > self.config.subranges {
            return Err(DacError::validation(format!(
                "sub-range {} outside 1..={}",
                e.subrange, self.config.subranges
            )));
        }
        Ok(())
    }

    /// Reject empty steps, unknown variables and out-of-range sub-ranges.
    pub fn check_steps(&self, steps: &[Vec<DiscreteEvent>]) -> Result<()> {
        if steps.is_empty() {
            return Err(DacError::validation("cannot encode an empty trajectory"));
        }
        for events in steps {
            if events.is_empty() {
                return Err(DacError::validation("step has no observation events"));
            }
            events.iter().try_for_each(|e| self.check_event(e))?;
        }
        Ok(())
    }

    /// Embed a single event by the direct route: concatenate, then apply the affine map.
    pub fn embed_event(&self, event: DiscreteEvent) -> Result<Vec<f64>> {
        self.check_event(&event)?;
        let mut cat = self.var_emb.row(event.variable as usize).to_vec();
        cat.extend_from_slice(self.code(event.subrange));
        Ok(self.proj.forward(&cat))
    }

    pub fn tables(&self) -> EmbeddingTables {
        let k = self.config.dim;
        let mut t = EmbeddingTables::zeros(&self.config);
        for i in 0..self.config.num_variables {
            let e = self.var_emb.row(i);
            for r in 0..k {
                t.var_part[i * k + r] = crate::nn::dot(&self.proj.w.row(r)[..k], e);
            }
        }
        for v in 0..self.config.subranges {
            let code = self.code(v as u16 + 1);
            for r in 0..k {
                t.val_part[v * k + r] = crate::nn::dot(&self.proj.w.row(r)[k..], code);
            }
        }
        t.bias.copy_from_slice(&self.proj.b.data);
        t
    }

    pub fn zero_tables(&self) -> EmbeddingTables {
        EmbeddingTables::zeros(&self.config)
    }

    /// Encode already-validated steps.
    pub fn encode(&self, tables: &EmbeddingTables, steps: &[Vec<DiscreteEvent>]) -> Encoding {
        let k = self.config.dim;
        let mut pooled = vec![f64::NEG_INFINITY; steps.len() * k];
        let mut winners = vec![0u32; steps.len() * k];
        let mut emb = vec![0.0; k];
        for (t, events) in steps.iter().enumerate() {
            let out = &mut pooled[t * k..(t + 1) * k];
            let win = &mut winners[t * k..(t + 1) * k];
            for (m, e) in events.iter().enumerate() {
                let (a, b) = (tables.var(e.variable), tables.val(e.subrange));
                for j in 0..k {
                    emb[j] = a[j] + b[j] + tables.bias[j];
                }
                for j in 0..k {
                    if emb[j] > out[j] {
                        out[j] = emb[j];
                        win[j] = m as u32;
                    }
                }
            }
        }
        let trace = self.lstm.forward(&pooled);
        Encoding {
            dim: k,
            pooled,
            winners,
            trace,
        }
    }

    /// Validate and encode one trajectory, returning the states `s_1..s_T`.
    pub fn encode_states(&self, steps: &[Vec<DiscreteEvent>]) -> Result<Vec<Vec<f64>>> {
        self.check_steps(steps)?;
        let enc = self.encode(&self.tables(), steps);
        Ok((0..enc.len()).map(|t| enc.state(t).to_vec()).collect())
    }

    /// Backpropagate `d_states` (`T x k`) into the LSTM parameters of `grad`
    /// and the embedding-table gradients `d_tables`.
    pub fn backward(
        &self,
        steps: &[Vec<DiscreteEvent>],
        enc: &Encoding,
        d_states: &[f64],
        grad: &mut StateEncoder,
        d_tables: &mut EmbeddingTables,
    ) {
        let k = self.config.dim;
        let d_pooled = self
            .lstm
            .backward(&enc.pooled, &enc.trace, d_states, &mut grad.lstm);
        for (t, events) in steps.iter().enumerate() {
            for j in 0..k {
                let d = d_pooled[t * k + j];
                if d == 0.0 {
                    continue;
                }
                let e = events[enc.winners[t * k + j] as usize];
                d_tables.var_part[e.variable as usize * k + j] += d;
                d_tables.val_part[(e.subrange as usize - 1) * k + j] += d;
                d_tables.bias[j] += d;
            }
        }
    }

    /// Push accumulated table gradients into the embedding parameters of `grad`.
    pub fn finish_backward(&self, d_tables: &EmbeddingTables, grad: &mut StateEncoder) {
        let k = self.config.dim;
        let cols = 3 * k;
        for i in 0..self.config.num_variables {
            let d = &d_tables.var_part[i * k..(i + 1) * k];
            let e = self.var_emb.row(i);
            for (r, &dr) in d.iter().enumerate() {
                if dr == 0.0 {
                    continue;
                }
                axpy(dr, e, &mut grad.proj.w.data[r * cols..r * cols + k]);
                axpy(dr, &self.proj.w.row(r)[..k], grad.var_emb.row_mut(i));
            }
        }
        for v in 0..self.config.subranges {
            let d = &d_tables.val_part[v * k..(v + 1) * k];
            let code = self.code(v as u16 + 1);
            for (r, &dr) in d.iter().enumerate() {
                if dr != 0.0 {
                    axpy(dr, code, &mut grad.proj.w.data[r * cols + k..(r + 1) * cols]);
                }
            }
        }
        axpy(1.0, &d_tables.bias, &mut grad.proj.b.data);
    }

    /// Remove all memory from the recurrent cell: recurrent weights are zeroed
    /// and the forget gate is saturated shut, so `s_t` depends on `e_t` alone.
    pub fn make_memoryless(&mut self) {
        let h = self.lstm.hidden();
        self.lstm.wh.data.fill(0.0);
        let n_in = self.lstm.inputs();
        for r in h..2 * h {
            self.lstm.wx.data[r * n_in..(r + 1) * n_in].fill(0.0);
            self.lstm.b.data[r] = -1e3;
        }
    }
}

impl Module for StateEncoder {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("var_emb".to_string(), &self.var_emb)];
        out.extend(prefixed("proj", self.proj.params()));
        out.extend(prefixed("lstm", self.lstm.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.var_emb];
        out.extend(self.proj.params_mut());
        out.extend(self.lstm.params_mut());
        out
    }
}
