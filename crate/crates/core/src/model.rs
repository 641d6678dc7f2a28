//! Encoder-plus-head networks and the supervised fitting loop shared by the
//! risk model and the behavior clone.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::action::{ActionTriple, ChangeClass};
use crate::bins::{DiscreteEvent, ValueBins};
use crate::encoder::{EmbeddingConfig, EmbeddingTables, Encoding, StateEncoder};
use crate::error::{DacError, Result};
use crate::nn::{prefixed, Adam, Linear, Module, Tensor};
use crate::trajectory::PatientTrajectory;

/// A trajectory in model-ready form.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedPatient {
    pub patient_id: u64,
    pub outcome: u8,
    pub steps: Vec<Vec<DiscreteEvent>>,
    /// Flat action index per step.
    pub actions: Vec<usize>,
    /// Change-class index per step (27 = initial).
    pub classes: Vec<usize>,
}

impl PreparedPatient {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn died(&self) -> bool {
        self.outcome == 1
    }

    /// Previous action for each step (`None` at the first).
    pub fn previous_actions(&self) -> impl Iterator<Item = Option<ActionTriple>> + '_ {
        (0..self.len()).map(|t| {
            (t > 0).then(|| ActionTriple::from_flat_index(self.actions[t - 1]).expect("valid index"))
        })
    }
}

pub fn prepare(trajs: &[PatientTrajectory], bins: &ValueBins) -> Result<Vec<PreparedPatient>> {
    trajs
        .iter()
        .map(|traj| {
            let actions: Vec<ActionTriple> = traj.actions().collect();
            let classes = (0..actions.len())
                .map(|t| ChangeClass::between(t.checked_sub(1).map(|p| actions[p]), actions[t]).index())
                .collect();
            Ok(PreparedPatient {
                patient_id: traj.patient_id,
                outcome: traj.outcome,
                steps: bins.discretize(traj)?,
                actions: actions.iter().map(|a| a.flat_index()).collect(),
                classes,
            })
        })
        .collect()
}

/// State encoder followed by an affine head applied at every step.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderHead {
    pub encoder: StateEncoder,
    pub head: Linear,
}

/// Forward pass of one patient.
#[derive(Debug, Clone)]
pub struct HeadPass {
    pub encoding: Encoding,
    /// Head outputs, `T x outputs`.
    pub outputs: Vec<f64>,
}

impl HeadPass {
    pub fn output(&self, t: usize, width: usize) -> &[f64] {
        &self.outputs[t * width..(t + 1) * width]
    }
}

impl EncoderHead {
    pub fn new(config: EmbeddingConfig, outputs: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let encoder = StateEncoder::new(config, rng)?;
        let head = Linear::new(config.dim, outputs, rng);
        Ok(Self { encoder, head })
    }

    pub fn outputs(&self) -> usize {
        self.head.outputs()
    }

    pub fn forward(&self, tables: &EmbeddingTables, steps: &[Vec<DiscreteEvent>]) -> HeadPass {
        let encoding = self.encoder.encode(tables, steps);
        let m = self.outputs();
        let mut outputs = vec![0.0; encoding.len() * m];
        for t in 0..encoding.len() {
            self.head
                .forward_into(encoding.state(t), &mut outputs[t * m..(t + 1) * m]);
        }
        HeadPass { encoding, outputs }
    }

    /// Raw head outputs for every step of a validated patient.
    pub fn predict(&self, steps: &[Vec<DiscreteEvent>]) -> Result<Vec<Vec<f64>>> {
        self.encoder.check_steps(steps)?;
        let pass = self.forward(&self.encoder.tables(), steps);
        let m = self.outputs();
        Ok(pass.outputs.chunks(m).map(<[f64]>::to_vec).collect())
    }

    pub fn backward(
        &self,
        steps: &[Vec<DiscreteEvent>],
        pass: &HeadPass,
        d_outputs: &[f64],
        grad: &mut EncoderHead,
        d_tables: &mut EmbeddingTables,
    ) {
        let k = self.encoder.config.dim;
        let m = self.outputs();
        let len = pass.encoding.len();
        let mut d_states = vec![0.0; len * k];
        for t in 0..len {
            self.head.backward(
                pass.encoding.state(t),
                &d_outputs[t * m..(t + 1) * m],
                &mut grad.head,
                Some(&mut d_states[t * k..(t + 1) * k]),
            );
        }
        self.encoder
            .backward(steps, &pass.encoding, &d_states, &mut grad.encoder, d_tables);
    }
}

impl Module for EncoderHead {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = prefixed("encoder", self.encoder.params());
        out.extend(prefixed("head", self.head.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.encoder.params_mut();
        out.extend(self.head.params_mut());
        out
    }
}

/// Optimisation settings for the supervised pre-training stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(DacError::validation("epochs and batch size must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(DacError::validation("learning rate must be positive"));
        }
        Ok(())
    }
}

/// Mean per-step loss and its gradient for a batch of patients. `loss` fills
/// `d_outputs` (summed, unnormalized) and returns the summed loss.
pub fn batch_gradient<F>(model: &EncoderHead, batch: &[&PreparedPatient], loss: &F) -> (f64, EncoderHead)
where
    F: Fn(&PreparedPatient, &HeadPass, &mut [f64]) -> f64,
{
    let tables = model.encoder.tables();
    let mut grad = model.zeros_like();
    let mut d_tables = model.encoder.zero_tables();
    let mut total = 0.0;
    let mut count = 0usize;
    for p in batch {
        let pass = model.forward(&tables, &p.steps);
        let mut d = vec![0.0; pass.outputs.len()];
        total += loss(p, &pass, &mut d);
        count += p.len();
        model.backward(&p.steps, &pass, &d, &mut grad, &mut d_tables);
    }
    model.encoder.finish_backward(&d_tables, &mut grad.encoder);
    let scale = 1.0 / count.max(1) as f64;
    grad.scale(scale);
    (total * scale, grad)
}

/// Adam over shuffled mini-batches of item indices; `batch_grad` returns the
/// mean loss and gradient of one batch. Returns the mean loss per epoch.
pub fn fit_module<M, G>(model: &mut M, items: usize, config: &FitConfig, batch_grad: G) -> Result<Vec<f64>>
where
    M: Module,
    G: Fn(&M, &[usize]) -> (f64, M),
{
    config.validate()?;
    if items == 0 {
        return Err(DacError::validation("cannot fit on an empty training set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Adam::new(config.learning_rate);
    let mut order: Vec<usize> = (0..items).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let (l, grad) = batch_grad(model, chunk);
            if !l.is_finite() || !grad.all_finite() {
                return Err(DacError::Numerical(format!(
                    "non-finite loss during pre-training (epoch {epoch})"
                )));
            }
            opt.step(model, &grad);
            sum += l;
            batches += 1;
        }
        history.push(sum / batches as f64);
    }
    Ok(history)
}

/// [`fit_module`] for an encoder-plus-head network with a per-patient loss.
pub fn fit<F>(
    model: &mut EncoderHead,
    patients: &[&PreparedPatient],
    config: &FitConfig,
    loss: F,
) -> Result<Vec<f64>>
where
    F: Fn(&PreparedPatient, &HeadPass, &mut [f64]) -> f64,
{
    for p in patients {
        model.encoder.check_steps(&p.steps)?;
    }
    fit_module(model, patients.len(), config, |m, idx| {
        let batch: Vec<&PreparedPatient> = idx.iter().map(|&i| patients[i]).collect();
        batch_gradient(m, &batch, &loss)
    })
}
