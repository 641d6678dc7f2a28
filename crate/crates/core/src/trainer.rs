//! The deconfounding actor-critic training loop.
//!
//! One shared state encoder feeds three heads over the 343 actions: the actor
//! (softmax policy), the long-term critic (bootstrapped toward the terminal
//! outcome reward with a periodically synced target copy) and the mortality
//! head (per-action sigmoid trained on the taken action). Each batch produces
//! one combined gradient: the weighted policy-gradient surrogate with the
//! reward treated as a constant, the squared temporal-difference error and the
//! mortality cross-entropy.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::action::NUM_ACTIONS;
use crate::checkpoint::Checkpoint;
use crate::encoder::{EmbeddingConfig, StateEncoder};
use crate::error::{DacError, Result};
use crate::evaluation::{wis_from_log_ratios, BEHAVIOR_FLOOR};
use crate::io::atomic_write;
use crate::model::PreparedPatient;
use crate::nn::{argmax, log_sum_exp, prefixed, sigmoid, softmax_in_place, Adam, Linear, Module, Tensor};
use crate::rewards::{combined_reward, short_term_reward, step_reward, WeightClip};
use crate::risk::{batch_ids, binary_cross_entropy, sample_balanced_batch, PatientPools};

/// Switches that remove one ingredient of the method each.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Uniform mini-batches instead of risk-matched pairs.
    pub no_resample: bool,
    /// All deconfounding weights set to 1.
    pub no_iptw: bool,
    /// Reward mixing weight forced to 1 (long-term only).
    pub no_short: bool,
    /// Reward mixing weight forced to 0 (short-term only).
    pub no_long: bool,
}

impl Ablation {
    /// Parse a command-line name: `rsp`, `dcf`, `short` or `long`.
    pub fn single(name: &str) -> Result<Self> {
        let mut a = Self::default();
        match name {
            "rsp" => a.no_resample = true,
            "dcf" => a.no_iptw = true,
            "short" => a.no_short = true,
            "long" => a.no_long = true,
            other => {
                return Err(DacError::validation(format!(
                    "unknown ablation {other:?}; expected rsp, dcf, short or long"
                )))
            }
        }
        Ok(a)
    }

    /// Short label used in file names and tables.
    pub fn label(&self) -> String {
        let parts: Vec<&str> = [
            (self.no_resample, "rsp"),
            (self.no_iptw, "dcf"),
            (self.no_short, "short"),
            (self.no_long, "long"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        if parts.is_empty() {
            "dac".to_string()
        } else {
            format!("dac-{}", parts.join("-"))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the long-term reward in the combined reward.
    pub alpha: f64,
    pub gamma: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Updates between target-head syncs.
    pub sync_every: u64,
    pub seed: u64,
    pub clip: WeightClip,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            gamma: 0.99,
            learning_rate: 1e-4,
            batch_size: 256,
            epochs: 20,
            sync_every: 100,
            seed: 0,
            clip: WeightClip::default(),
            ablation: Ablation::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(DacError::validation(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(DacError::validation(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(DacError::validation("learning rate must be positive"));
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(DacError::validation("batch size must be even and at least 2"));
        }
        if self.epochs == 0 || self.sync_every == 0 {
            return Err(DacError::validation("epochs and sync interval must be positive"));
        }
        if self.ablation.no_short && self.ablation.no_long {
            return Err(DacError::validation(
                "removing both the short- and long-term rewards leaves nothing to learn",
            ));
        }
        self.clip.validate()
    }

    /// Mixing weight after the reward ablations.
    pub fn effective_alpha(&self) -> f64 {
        if self.ablation.no_short {
            1.0
        } else if self.ablation.no_long {
            0.0
        } else {
            self.alpha
        }
    }
}

/// Encoder plus actor, long-term and mortality heads.
#[derive(Debug, Clone, PartialEq)]
pub struct DacModel {
    pub encoder: StateEncoder,
    pub actor: Linear,
    pub long_term: Linear,
    pub mortality: Linear,
}

impl Module for DacModel {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = prefixed("encoder", self.encoder.params());
        out.extend(prefixed("actor", self.actor.params()));
        out.extend(prefixed("long_term", self.long_term.params()));
        out.extend(prefixed("mortality", self.mortality.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.encoder.params_mut();
        out.extend(self.actor.params_mut());
        out.extend(self.long_term.params_mut());
        out.extend(self.mortality.params_mut());
        out
    }
}

/// Head outputs at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutputs {
    pub policy: Vec<f64>,
    pub long_term: Vec<f64>,
    pub mortality: Vec<f64>,
}

impl DacModel {
    pub fn new(config: EmbeddingConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = StateEncoder::new(config, &mut rng)?;
        let k = config.dim;
        Ok(Self {
            encoder,
            actor: Linear::new(k, NUM_ACTIONS, &mut rng),
            long_term: Linear::new(k, NUM_ACTIONS, &mut rng),
            mortality: Linear::new(k, NUM_ACTIONS, &mut rng),
        })
    }

    /// Random encoder with all-zero heads: a uniform initial policy, and
    /// value and risk outputs that stay neutral for actions never logged.
    pub fn neutral(config: EmbeddingConfig, seed: u64) -> Result<Self> {
        let mut model = Self::new(config, seed)?;
        let k = config.dim;
        model.actor = Linear::zeros(k, NUM_ACTIONS);
        model.long_term = Linear::zeros(k, NUM_ACTIONS);
        model.mortality = Linear::zeros(k, NUM_ACTIONS);
        Ok(model)
    }

    pub fn heads(&self, state: &[f64]) -> StepOutputs {
        let mut policy = self.actor.forward(state);
        softmax_in_place(&mut policy);
        StepOutputs {
            policy,
            long_term: self.long_term.forward(state),
            mortality: self.mortality.forward(state).into_iter().map(sigmoid).collect(),
        }
    }

    /// Head outputs at every step of a patient.
    pub fn evaluate(&self, patient: &PreparedPatient) -> Result<Vec<StepOutputs>> {
        Ok(self
            .encoder
            .encode_states(&patient.steps)?
            .iter()
            .map(|s| self.heads(s))
            .collect())
    }

    /// Policy distribution at every step.
    pub fn policy(&self, patient: &PreparedPatient) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .encoder
            .encode_states(&patient.steps)?
            .iter()
            .map(|s| {
                let mut p = self.actor.forward(s);
                softmax_in_place(&mut p);
                p
            })
            .collect())
    }

    /// Most probable action at every step (lowest index on ties).
    pub fn recommend(&self, patient: &PreparedPatient) -> Result<Vec<usize>> {
        Ok(self
            .encoder
            .encode_states(&patient.steps)?
            .iter()
            .map(|s| argmax(&self.actor.forward(s)))
            .collect())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_module(
            "dac",
            self,
            serde_json::json!({ "embedding": self.encoder.config }),
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.require_kind("dac")?;
        let config: EmbeddingConfig = serde_json::from_value(ck.meta["embedding"].clone())?;
        let mut model = Self::new(config, 0)?;
        ck.load_into(&mut model)?;
        Ok(model)
    }
}

/// One training patient with its precomputed deconfounding weights.
#[derive(Debug, Clone, Copy)]
pub struct WeightedPatient<'a> {
    pub patient: &'a PreparedPatient,
    pub weights: &'a [f64],
}

/// TD target `R^m_t + gamma * max_a target(s_{t+1})[a]`, with no bootstrap at the last step.
pub fn td_target(terminal_reward: f64, next_target_values: Option<&[f64]>, gamma: f64) -> f64 {
    match next_target_values {
        Some(v) => terminal_reward + gamma * v[argmax(v)],
        None => terminal_reward,
    }
}

/// Mean per-step losses of a batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchLosses {
    /// Policy surrogate `-mean(Q log pi(a_t))`.
    pub actor: f64,
    pub critic: f64,
    pub mortality: f64,
    /// Mean combined reward `Q`.
    pub mean_q: f64,
}

impl BatchLosses {
    pub fn is_finite(&self) -> bool {
        self.actor.is_finite() && self.critic.is_finite() && self.mortality.is_finite()
    }
}

/// Losses and combined gradient of one batch. `target` is the frozen copy of
/// the long-term head used for bootstrapping.
pub fn batch_gradient(
    model: &DacModel,
    target: &Linear,
    batch: &[WeightedPatient],
    config: &TrainConfig,
) -> Result<(BatchLosses, DacModel)> {
    let steps: usize = batch.iter().map(|b| b.patient.len()).sum();
    if steps == 0 {
        return Err(DacError::validation("empty training batch"));
    }
    let n = steps as f64;
    let alpha = config.effective_alpha();
    let tables = model.encoder.tables();
    let mut grad = model.zeros_like();
    let mut d_tables = model.encoder.zero_tables();
    let mut losses = BatchLosses::default();
    let k = model.encoder.config.dim;
    for item in batch {
        let p = item.patient;
        if item.weights.len() != p.len() {
            return Err(DacError::validation(format!(
                "patient {} has {} weights for {} steps",
                p.patient_id,
                item.weights.len(),
                p.len()
            )));
        }
        let enc = model.encoder.encode(&tables, &p.steps);
        let len = enc.len();
        let y = f64::from(p.outcome);
        let mut d_states = vec![0.0; len * k];
        let mut logits = vec![0.0; NUM_ACTIONS];
        let mut values = vec![0.0; NUM_ACTIONS];
        let mut mort = vec![0.0; NUM_ACTIONS];
        let mut next_target = vec![0.0; NUM_ACTIONS];
        let mut d_head = vec![0.0; NUM_ACTIONS];
        for t in 0..len {
            let s = enc.state(t);
            let a = p.actions[t];
            model.actor.forward_into(s, &mut logits);
            model.long_term.forward_into(s, &mut values);
            model.mortality.forward_into(s, &mut mort);
            let lse = log_sum_exp(&logits);
            let log_pa = logits[a] - lse;
            let mut policy = logits.clone();
            softmax_in_place(&mut policy);
            for m in mort.iter_mut() {
                *m = sigmoid(*m);
            }

            // rewards, all treated as constants for the actor
            let weight = if config.ablation.no_iptw { 1.0 } else { item.weights[t] };
            let r_short = short_term_reward(&policy, &mort, a);
            let q = combined_reward(weight, values[a], r_short, alpha);

            let next = if t + 1 < len {
                target.forward_into(enc.state(t + 1), &mut next_target);
                Some(&next_target[..])
            } else {
                None
            };
            let z = td_target(step_reward(p.outcome, t, len)?, next, config.gamma);

            losses.critic += (values[a] - z).powi(2);
            losses.mortality += binary_cross_entropy(mort[a], y);
            losses.mean_q += q;

            let ds = &mut d_states[t * k..(t + 1) * k];
            // actor: d(-q log pi_a)/dz = q (pi - onehot)
            losses.actor -= q * log_pa;
            for (d, &pi) in d_head.iter_mut().zip(&policy) {
                *d = q * pi / n;
            }
            d_head[a] -= q / n;
            model.actor.backward(s, &d_head, &mut grad.actor, Some(ds));
            model
                .long_term
                .backward_one(s, a, 2.0 * (values[a] - z) / n, &mut grad.long_term, Some(ds));
            model
                .mortality
                .backward_one(s, a, (mort[a] - y) / n, &mut grad.mortality, Some(ds));
        }
        model
            .encoder
            .backward(&p.steps, &enc, &d_states, &mut grad.encoder, &mut d_tables);
    }
    model.encoder.finish_backward(&d_tables, &mut grad.encoder);
    losses.actor /= n;
    losses.critic /= n;
    losses.mortality /= n;
    losses.mean_q /= n;
    Ok((losses, grad))
}

/// Everything the loop reads: training patients with weights, their risk
/// pools, and a validation set with behavior probabilities for WIS.
pub struct TrainingData<'a> {
    pub train: Vec<WeightedPatient<'a>>,
    pub pools: Option<PatientPools>,
    pub validation: Vec<&'a PreparedPatient>,
    /// Behavior probability of the logged action at each validation step.
    pub validation_behavior: Vec<Vec<f64>>,
}

/// Per-epoch record written to the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub updates: u64,
    pub losses: BatchLosses,
    pub validation_wis: f64,
}

/// Resumable state of a training run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: DacModel,
    pub target: Linear,
    pub optimizer: Adam,
    /// Epochs completed.
    pub epoch: usize,
    pub updates: u64,
    pub best: Option<(usize, f64, DacModel)>,
    pub history: Vec<EpochMetrics>,
}

impl TrainState {
    pub fn new(model: DacModel, config: &TrainConfig) -> Self {
        Self {
            target: model.long_term.clone(),
            model,
            optimizer: Adam::new(config.learning_rate),
            epoch: 0,
            updates: 0,
            best: None,
            history: Vec::new(),
        }
    }

    /// Validation-selected snapshot, or the current model before any epoch.
    pub fn best_model(&self) -> &DacModel {
        self.best.as_ref().map_or(&self.model, |b| &b.2)
    }
}

#[derive(Serialize, Deserialize)]
struct SavedState {
    format: String,
    config: TrainConfig,
    model: Checkpoint,
    target: Checkpoint,
    optimizer: Adam,
    epoch: usize,
    updates: u64,
    best_epoch: Option<usize>,
    best_wis: Option<f64>,
    best_model: Option<Checkpoint>,
    history: Vec<EpochMetrics>,
}

impl TrainState {
    pub fn save(&self, path: &Path, config: &TrainConfig, run_id: Option<&str>, config_hash: Option<&str>) -> Result<()> {
        let prov = |ck: Checkpoint| ck.with_provenance(run_id.map(String::from), config_hash.map(String::from));
        let saved = SavedState {
            format: "dac-train-state".into(),
            config: *config,
            model: prov(self.model.checkpoint()),
            target: prov(Checkpoint::from_module("target", &self.target, serde_json::Value::Null)),
            optimizer: self.optimizer.clone(),
            epoch: self.epoch,
            updates: self.updates,
            best_epoch: self.best.as_ref().map(|b| b.0),
            best_wis: self.best.as_ref().map(|b| b.1),
            best_model: self.best.as_ref().map(|b| prov(b.2.checkpoint())),
            history: self.history.clone(),
        };
        atomic_write(path, &serde_json::to_vec(&saved)?)
    }

    /// Load a saved run; returns the state and the configuration it ran under.
    pub fn load(path: &Path) -> Result<(Self, TrainConfig)> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => DacError::MissingArtifact(path.display().to_string()),
            _ => e.into(),
        })?;
        let saved: SavedState = serde_json::from_slice(&bytes)?;
        if saved.format != "dac-train-state" {
            return Err(DacError::Format {
                path: path.display().to_string(),
                reason: format!("unexpected format {:?}", saved.format),
            });
        }
        let model = DacModel::from_checkpoint(&saved.model)?;
        let mut target = model.long_term.clone();
        saved.target.load_into(&mut target)?;
        let best = match (saved.best_epoch, saved.best_wis, saved.best_model) {
            (Some(e), Some(w), Some(ck)) => Some((e, w, DacModel::from_checkpoint(&ck)?)),
            _ => None,
        };
        Ok((
            Self {
                model,
                target,
                optimizer: saved.optimizer,
                epoch: saved.epoch,
                updates: saved.updates,
                best,
                history: saved.history,
            },
            saved.config,
        ))
    }
}

/// WIS of the model's stochastic policy on the validation patients with
/// terminal rewards only.
pub fn policy_wis(
    model: &DacModel,
    patients: &[&PreparedPatient],
    behavior: &[Vec<f64>],
    gamma: f64,
) -> Result<f64> {
    let mut log_rho = Vec::with_capacity(patients.len());
    let mut returns = Vec::with_capacity(patients.len());
    for (p, b) in patients.iter().zip(behavior) {
        let states = model.encoder.encode_states(&p.steps)?;
        let mut lr = 0.0;
        for (t, s) in states.iter().enumerate() {
            let logits = model.actor.forward(s);
            let log_pi = logits[p.actions[t]] - log_sum_exp(&logits);
            lr += log_pi - b[t].max(BEHAVIOR_FLOOR).ln();
        }
        log_rho.push(lr);
        let mut g = 0.0;
        for t in (0..p.len()).rev() {
            g = step_reward(p.outcome, t, p.len())? + gamma * g;
        }
        returns.push(g);
    }
    wis_from_log_ratios(&log_rho, &returns)
}

/// Batches of one epoch: risk-matched pairs, or a shuffled pass without them.
fn epoch_batches(data: &TrainingData, config: &TrainConfig, epoch: usize, index: &HashMap<u64, usize>) -> Result<Vec<Vec<usize>>> {
    let n = data.train.len();
    let batches = n.div_ceil(config.batch_size);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(epoch as u64 + 1);
    if config.ablation.no_resample {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        return Ok(order.chunks(config.batch_size).map(<[usize]>::to_vec).collect());
    }
    let pools = data
        .pools
        .as_ref()
        .ok_or_else(|| DacError::validation("risk-matched batches need patient pools"))?;
    (0..batches)
        .map(|_| {
            let pairs = sample_balanced_batch(pools, config.batch_size, &mut rng)?;
            batch_ids(&pairs)
                .into_iter()
                .map(|id| {
                    index.get(&id).copied().ok_or_else(|| {
                        DacError::validation(format!("pooled patient {id} is not in the training set"))
                    })
                })
                .collect()
        })
        .collect()
}

/// Run (or continue) training until `config.epochs` epochs are complete.
/// `on_epoch` sees the state after every epoch, e.g. to checkpoint it.
pub fn train_dac(
    data: &TrainingData,
    config: &TrainConfig,
    mut state: TrainState,
    mut on_epoch: impl FnMut(&TrainState) -> Result<()>,
) -> Result<TrainState> {
    config.validate()?;
    if data.train.is_empty() || data.validation.is_empty() {
        return Err(DacError::validation("training and validation sets must be non-empty"));
    }
    if data.validation.len() != data.validation_behavior.len() {
        return Err(DacError::validation("validation behavior probabilities missing"));
    }
    for item in &data.train {
        state.model.encoder.check_steps(&item.patient.steps)?;
    }
    let index: HashMap<u64, usize> = data
        .train
        .iter()
        .enumerate()
        .map(|(i, w)| (w.patient.patient_id, i))
        .collect();
    while state.epoch < config.epochs {
        let epoch = state.epoch;
        let mut sum = BatchLosses::default();
        let batches = epoch_batches(data, config, epoch, &index)?;
        for idx in &batches {
            let batch: Vec<WeightedPatient> = idx.iter().map(|&i| data.train[i]).collect();
            let (losses, grad) = batch_gradient(&state.model, &state.target, &batch, config)?;
            if !losses.is_finite() || !grad.all_finite() {
                return Err(DacError::Numerical(format!(
                    "non-finite loss at epoch {epoch}, update {}: {losses:?}",
                    state.updates
                )));
            }
            state.optimizer.step(&mut state.model, &grad);
            state.updates += 1;
            if state.updates % config.sync_every == 0 {
                state.target = state.model.long_term.clone();
            }
            sum.actor += losses.actor;
            sum.critic += losses.critic;
            sum.mortality += losses.mortality;
            sum.mean_q += losses.mean_q;
        }
        let m = batches.len() as f64;
        let losses = BatchLosses {
            actor: sum.actor / m,
            critic: sum.critic / m,
            mortality: sum.mortality / m,
            mean_q: sum.mean_q / m,
        };
        let validation_wis = policy_wis(&state.model, &data.validation, &data.validation_behavior, config.gamma)?;
        state.epoch += 1;
        state.history.push(EpochMetrics {
            epoch: state.epoch,
            updates: state.updates,
            losses,
            validation_wis,
        });
        if state.best.as_ref().map_or(true, |b| validation_wis > b.1) {
            state.best = Some((state.epoch, validation_wis, state.model.clone()));
        }
        on_epoch(&state)?;
    }
    Ok(state)
}
