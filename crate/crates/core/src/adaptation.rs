//! Policy adaptation by next-state matching: a dynamics model on the source
//! cohort, a copy fine-tuned on the target cohort, and a recommender that
//! picks the target action whose predicted next covariates are closest to
//! what the source action would produce under the source dynamics.

use std::collections::BTreeSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::action::NUM_ACTIONS;
use crate::checkpoint::Checkpoint;
use crate::error::{DacError, Result};
use crate::io::atomic_write;
use crate::model::{fit_module, FitConfig, PreparedPatient};
use crate::nn::{argmax, dot, Linear, Module, Tensor};
use crate::trainer::DacModel;
use crate::trajectory::{PatientTrajectory, Step};

/// Variables observed in both cohorts, z-scored with one cohort's statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpace {
    pub variables: Vec<u32>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl CovariateSpace {
    /// Sorted intersection of the variables each cohort ever observes.
    pub fn shared_variables(a: &[PatientTrajectory], b: &[PatientTrajectory]) -> Vec<u32> {
        let vars = |ts: &[PatientTrajectory]| -> BTreeSet<u32> {
            ts.iter()
                .flat_map(|t| t.steps.iter().flat_map(|s| s.events.iter().map(|e| e.variable)))
                .collect()
        };
        vars(a).intersection(&vars(b)).copied().collect()
    }

    /// Mean and standard deviation of each variable over every step of `trajs`.
    /// A variable with zero spread keeps unit scale.
    pub fn fit<'a>(variables: Vec<u32>, trajs: impl IntoIterator<Item = &'a PatientTrajectory>) -> Result<Self> {
        if variables.is_empty() {
            return Err(DacError::validation("the cohorts share no observed variable"));
        }
        let n = variables.len();
        let (mut sum, mut sq, mut count) = (vec![0.0; n], vec![0.0; n], vec![0usize; n]);
        for t in trajs {
            for step in &t.steps {
                for e in &step.events {
                    if let Ok(i) = variables.binary_search(&e.variable) {
                        sum[i] += e.value;
                        sq[i] += e.value * e.value;
                        count[i] += 1;
                    }
                }
            }
        }
        let mut mean = vec![0.0; n];
        let mut sd = vec![1.0; n];
        for i in 0..n {
            if count[i] == 0 {
                continue;
            }
            let c = count[i] as f64;
            mean[i] = sum[i] / c;
            let var = (sq[i] / c - mean[i] * mean[i]).max(0.0);
            if var > 0.0 {
                sd[i] = var.sqrt();
            }
        }
        Ok(Self { variables, mean, sd })
    }

    pub fn dim(&self) -> usize {
        self.variables.len()
    }

    /// Z-scored covariates of one step; the last event of a variable wins and
    /// unobserved variables sit at the mean (zero).
    pub fn vector(&self, step: &Step) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        for e in &step.events {
            if let Ok(i) = self.variables.binary_search(&e.variable) {
                x[i] = (e.value - self.mean[i]) / self.sd[i];
            }
        }
        x
    }
}

/// `(s_t, a_t) -> x_{t+1}` training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: usize,
    pub next: Vec<f64>,
}

/// Transitions of every patient, with states from `model`'s encoder.
pub fn transitions(
    model: &DacModel,
    patients: &[&PreparedPatient],
    trajs: &[&PatientTrajectory],
    space: &CovariateSpace,
) -> Result<Vec<Transition>> {
    if patients.len() != trajs.len() {
        return Err(DacError::validation("prepared and raw cohorts differ in size"));
    }
    let mut out = Vec::new();
    for (p, raw) in patients.iter().zip(trajs) {
        if p.patient_id != raw.patient_id || p.len() != raw.len() {
            return Err(DacError::validation(format!(
                "prepared patient {} does not match raw patient {}",
                p.patient_id, raw.patient_id
            )));
        }
        let states = model.encoder.encode_states(&p.steps)?;
        for t in 0..p.len().saturating_sub(1) {
            out.push(Transition {
                state: states[t].clone(),
                action: p.actions[t],
                next: space.vector(&raw.steps[t + 1]),
            });
        }
    }
    Ok(out)
}

/// `f(s, a) = W [s; E_a] + b` with a learned action embedding `E`.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsModel {
    pub action_embedding: Tensor,
    pub map: Linear,
}

impl DynamicsModel {
    pub fn new(state_dim: usize, action_dim: usize, outputs: usize, seed: u64) -> Result<Self> {
        if state_dim == 0 || action_dim == 0 || outputs == 0 {
            return Err(DacError::validation("dynamics dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            action_embedding: Tensor::uniform(&[NUM_ACTIONS, action_dim], 1.0, &mut rng),
            map: Linear::new(state_dim + action_dim, outputs, &mut rng),
        })
    }

    pub fn action_dim(&self) -> usize {
        self.action_embedding.cols()
    }

    pub fn state_dim(&self) -> usize {
        self.map.inputs() - self.action_dim()
    }

    pub fn outputs(&self) -> usize {
        self.map.outputs()
    }

    fn input(&self, state: &[f64], action: usize) -> Vec<f64> {
        let mut x = state.to_vec();
        x.extend_from_slice(self.action_embedding.row(action));
        x
    }

    pub fn predict(&self, state: &[f64], action: usize) -> Vec<f64> {
        self.map.forward(&self.input(state, action))
    }

    /// `W_a E_a + b` for every action: predictions split as `W_s s + offset_a`.
    pub fn action_offsets(&self) -> Vec<Vec<f64>> {
        let k = self.state_dim();
        (0..NUM_ACTIONS)
            .map(|a| {
                let e = self.action_embedding.row(a);
                (0..self.outputs())
                    .map(|o| dot(&self.map.w.row(o)[k..], e) + self.map.b.data[o])
                    .collect()
            })
            .collect()
    }

    /// `W_s s` without the action part.
    pub fn state_part(&self, state: &[f64]) -> Vec<f64> {
        let k = self.state_dim();
        (0..self.outputs()).map(|o| dot(&self.map.w.row(o)[..k], state)).collect()
    }

    /// Mean squared error `mean_i ||f(s_i, a_i) - x_i||^2` and its gradient.
    pub fn loss_and_gradient(&self, batch: &[&Transition]) -> (f64, Self) {
        let mut grad = self.zeros_like();
        let mut loss = 0.0;
        let n = batch.len().max(1) as f64;
        let k = self.state_dim();
        for tr in batch {
            let x = self.input(&tr.state, tr.action);
            let pred = self.map.forward(&x);
            let d: Vec<f64> = pred.iter().zip(&tr.next).map(|(p, y)| 2.0 * (p - y) / n).collect();
            loss += pred.iter().zip(&tr.next).map(|(p, y)| (p - y).powi(2)).sum::<f64>();
            let mut dx = vec![0.0; x.len()];
            self.map.backward(&x, &d, &mut grad.map, Some(&mut dx));
            for (g, v) in grad.action_embedding.row_mut(tr.action).iter_mut().zip(&dx[k..]) {
                *g += v;
            }
        }
        (loss / n, grad)
    }

    pub fn checkpoint(&self, space: &CovariateSpace) -> Checkpoint {
        Checkpoint::from_module(
            "dynamics",
            self,
            serde_json::json!({
                "state_dim": self.state_dim(),
                "action_dim": self.action_dim(),
                "space": space,
            }),
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, CovariateSpace)> {
        ck.require_kind("dynamics")?;
        let dim = |key: &str| {
            ck.meta[key]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| DacError::validation(format!("dynamics checkpoint lacks {key}")))
        };
        let space: CovariateSpace = serde_json::from_value(ck.meta["space"].clone())?;
        let mut model = Self::new(dim("state_dim")?, dim("action_dim")?, space.dim(), 0)?;
        ck.load_into(&mut model)?;
        Ok((model, space))
    }
}

impl Module for DynamicsModel {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("action_embedding".to_string(), &self.action_embedding)];
        out.extend(crate::nn::prefixed("map", self.map.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.action_embedding];
        out.extend(self.map.params_mut());
        out
    }
}

/// Settings of the dynamics fits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DynamicsConfig {
    pub action_dim: usize,
    pub fit: FitConfig,
    /// Fine-tuning on the target cohort.
    pub fine_tune: FitConfig,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self {
            action_dim: 8,
            fit: FitConfig {
                epochs: 10,
                batch_size: 256,
                learning_rate: 1e-2,
                seed: 0,
            },
            fine_tune: FitConfig {
                epochs: 10,
                batch_size: 256,
                learning_rate: 1e-2,
                seed: 1,
            },
        }
    }
}

/// Least-squares fit from random initialisation. Returns the model and the
/// mean loss of each epoch.
pub fn train_dynamics(
    data: &[Transition],
    state_dim: usize,
    action_dim: usize,
    fit: &FitConfig,
) -> Result<(DynamicsModel, Vec<f64>)> {
    let first = data
        .first()
        .ok_or_else(|| DacError::validation("no transitions: every trajectory has a single step"))?;
    let mut model = DynamicsModel::new(state_dim, action_dim, first.next.len(), fit.seed)?;
    let history = fine_tune(&mut model, data, fit)?;
    Ok((model, history))
}

/// Continue fitting `model` on `data`; no data leaves it untouched.
pub fn fine_tune(model: &mut DynamicsModel, data: &[Transition], fit: &FitConfig) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Ok(Vec::new());
    }
    if data
        .iter()
        .any(|t| t.state.len() != model.state_dim() || t.next.len() != model.outputs() || t.action >= NUM_ACTIONS)
    {
        return Err(DacError::validation("transition shapes do not match the dynamics model"));
    }
    fit_module(model, data.len(), fit, |m: &DynamicsModel, idx: &[usize]| {
        let batch: Vec<&Transition> = idx.iter().map(|&i| &data[i]).collect();
        m.loss_and_gradient(&batch)
    })
}

/// One adapted decision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptedDecision {
    pub source_action: usize,
    pub action: usize,
    pub distance: f64,
    /// Gap between the runner-up distance and the chosen one.
    pub margin: f64,
}

/// Exhaustive argmin over `distances`, lowest index on ties; returns
/// `(index, best, margin)`.
pub fn argmin_with_margin(distances: &[f64]) -> (usize, f64, f64) {
    let mut best = 0;
    for (i, d) in distances.iter().enumerate() {
        if *d < distances[best] {
            best = i;
        }
    }
    let runner_up = distances
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != best)
        .map(|(_, d)| *d)
        .fold(f64::INFINITY, f64::min);
    (best, distances[best], runner_up - distances[best])
}

/// Source policy plus the two dynamics models.
#[derive(Debug, Clone)]
pub struct AdaptedPolicy {
    pub source: DacModel,
    pub source_dynamics: DynamicsModel,
    pub target_dynamics: DynamicsModel,
    source_offsets: Vec<Vec<f64>>,
    target_offsets: Vec<Vec<f64>>,
}

impl AdaptedPolicy {
    pub fn new(source: DacModel, source_dynamics: DynamicsModel, target_dynamics: DynamicsModel) -> Result<Self> {
        let k = source.encoder.config.dim;
        if source_dynamics.state_dim() != k
            || target_dynamics.state_dim() != k
            || source_dynamics.outputs() != target_dynamics.outputs()
        {
            return Err(DacError::validation("dynamics models do not fit the source policy's state space"));
        }
        let source_offsets = source_dynamics.action_offsets();
        let target_offsets = target_dynamics.action_offsets();
        Ok(Self {
            source_offsets,
            source,
            source_dynamics,
            target_dynamics,
            target_offsets,
        })
    }

    /// Target action for a state given the source policy's choice.
    pub fn adapt_action(&self, state: &[f64], source_action: usize) -> AdaptedDecision {
        // same summation order as the target side, so equal models give exactly zero
        let reference: Vec<f64> = self
            .source_dynamics
            .state_part(state)
            .iter()
            .zip(&self.source_offsets[source_action])
            .map(|(b, o)| b + o)
            .collect();
        let base = self.target_dynamics.state_part(state);
        let distances: Vec<f64> = self
            .target_offsets
            .iter()
            .map(|off| {
                base.iter()
                    .zip(off)
                    .zip(&reference)
                    .map(|((b, o), r)| (b + o - r).powi(2))
                    .sum()
            })
            .collect();
        let (action, distance, margin) = argmin_with_margin(&distances);
        AdaptedDecision {
            source_action,
            action,
            distance,
            margin,
        }
    }

    pub fn decide(&self, state: &[f64]) -> AdaptedDecision {
        self.adapt_action(state, argmax(&self.source.actor.forward(state)))
    }

    pub fn decisions(&self, patient: &PreparedPatient) -> Result<Vec<AdaptedDecision>> {
        Ok(self
            .source
            .encoder
            .encode_states(&patient.steps)?
            .iter()
            .map(|s| self.decide(s))
            .collect())
    }

    pub fn recommend(&self, patient: &PreparedPatient) -> Result<Vec<usize>> {
        Ok(self.decisions(patient)?.iter().map(|d| d.action).collect())
    }
}

/// Initialise the target dynamics from the source ones, fine-tune on the
/// target transitions and wrap everything in an adapted policy.
pub fn run_adaptation(
    source: &DacModel,
    source_dynamics: &DynamicsModel,
    target: &[Transition],
    fit: &FitConfig,
) -> Result<AdaptedPolicy> {
    let mut target_dynamics = source_dynamics.clone();
    fine_tune(&mut target_dynamics, target, fit)?;
    AdaptedPolicy::new(source.clone(), source_dynamics.clone(), target_dynamics)
}

/// Per-step CSV of adapted decisions.
pub fn write_adaptation_csv(
    path: &Path,
    rows: &[(u64, Vec<AdaptedDecision>)],
) -> Result<()> {
    let mut out = String::from("patient_id,step,source_action,adapted_action,distance,margin\n");
    for (id, decisions) in rows {
        for (t, d) in decisions.iter().enumerate() {
            out.push_str(&format!(
                "{id},{t},{},{},{},{}\n",
                d.source_action, d.action, d.distance, d.margin
            ));
        }
    }
    atomic_write(path, out.as_bytes())
}
