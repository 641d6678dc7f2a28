//! Deconfounding weights and reward shaping.
//!
//! Inverse probability of treatment weights compare how likely the logged
//! change-class sequence is under a covariate-free sequence model (the
//! numerator) against the state-conditioned behavior clone (the denominator).
//! The clone predicts the full 343-way action and is marginalized to change
//! classes relative to the previous logged action, so the same network also
//! serves as the imitation-learning baseline policy.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::action::{ChangeTable, NUM_ACTIONS, NUM_CHANGE_CLASSES};
use crate::checkpoint::Checkpoint;
use crate::encoder::EmbeddingConfig;
use crate::error::{DacError, Result};
use crate::io::atomic_write;
use crate::model::{fit, fit_module, EncoderHead, FitConfig, HeadPass, PreparedPatient};
use crate::nn::{log_sum_exp, prefixed, softmax, softmax_in_place, Linear, Lstm, Module, Tensor};

/// Index of the initial (no previous action) change class.
pub const INITIAL_CLASS: usize = NUM_CHANGE_CLASSES;
/// Token vocabulary of the numerator: 27 change classes plus the initial marker.
pub const NUM_TOKENS: usize = NUM_CHANGE_CLASSES + 1;

/// Terminal mortality reward magnitude.
pub const TERMINAL_REWARD: f64 = 15.0;

fn check_classes(classes: &[usize]) -> Result<()> {
    match classes.first() {
        None => return Err(DacError::validation("empty change-class sequence")),
        Some(&c) if c != INITIAL_CLASS => {
            return Err(DacError::validation(format!(
                "change-class sequence must start with the initial class, found {c}"
            )))
        }
        _ => {}
    }
    if let Some(&c) = classes[1..].iter().find(|&&c| c >= NUM_CHANGE_CLASSES) {
        return Err(DacError::validation(format!(
            "change class {c} after the first step"
        )));
    }
    Ok(())
}

/// Recurrent model of the next change class given the previous ones.
#[derive(Debug, Clone, PartialEq)]
pub struct NumeratorModel {
    pub lstm: Lstm,
    pub head: Linear,
}

impl Module for NumeratorModel {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = prefixed("lstm", self.lstm.params());
        out.extend(prefixed("head", self.head.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.lstm.params_mut();
        out.extend(self.head.params_mut());
        out
    }
}

impl NumeratorModel {
    pub fn new(hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            lstm: Lstm::new(NUM_TOKENS, hidden, &mut rng),
            head: Linear::new(hidden, NUM_CHANGE_CLASSES, &mut rng),
        }
    }

    /// One-hot inputs for every class but the last.
    fn inputs(classes: &[usize]) -> Vec<f64> {
        let n = classes.len() - 1;
        let mut x = vec![0.0; n * NUM_TOKENS];
        for (t, &c) in classes[..n].iter().enumerate() {
            x[t * NUM_TOKENS + c] = 1.0;
        }
        x
    }

    fn logits(&self, classes: &[usize]) -> (Vec<f64>, crate::nn::LstmTrace, Vec<f64>) {
        let x = Self::inputs(classes);
        let trace = self.lstm.forward(&x);
        let mut logits = vec![0.0; trace.len() * NUM_CHANGE_CLASSES];
        for t in 0..trace.len() {
            self.head.forward_into(
                trace.output(t),
                &mut logits[t * NUM_CHANGE_CLASSES..(t + 1) * NUM_CHANGE_CLASSES],
            );
        }
        (x, trace, logits)
    }

    /// Distribution of the class at step `t` given classes `0..t`, for every
    /// `t >= 1`. Entry `t - 1` of the result belongs to step `t`.
    pub fn conditionals(&self, classes: &[usize]) -> Result<Vec<Vec<f64>>> {
        check_classes(classes)?;
        if classes.len() < 2 {
            return Ok(Vec::new());
        }
        let (_, _, logits) = self.logits(classes);
        Ok(logits.chunks(NUM_CHANGE_CLASSES).map(softmax).collect())
    }

    /// Summed negative log-likelihood of one sequence; accumulates its gradient.
    fn nll_backward(&self, classes: &[usize], grad: &mut NumeratorModel) -> f64 {
        if classes.len() < 2 {
            return 0.0;
        }
        let (x, trace, mut logits) = self.logits(classes);
        let h = self.lstm.hidden();
        let mut d_out = vec![0.0; trace.len() * h];
        let mut nll = 0.0;
        for t in 0..trace.len() {
            let z = &mut logits[t * NUM_CHANGE_CLASSES..(t + 1) * NUM_CHANGE_CLASSES];
            let target = classes[t + 1];
            nll += log_sum_exp(z) - z[target];
            softmax_in_place(z);
            z[target] -= 1.0;
            self.head
                .backward(trace.output(t), z, &mut grad.head, Some(&mut d_out[t * h..(t + 1) * h]));
        }
        self.lstm.backward(&x, &trace, &d_out, &mut grad.lstm);
        nll
    }

    /// Mean per-prediction negative log-likelihood and gradient of a batch.
    pub fn batch_gradient(&self, batch: &[&[usize]]) -> (f64, NumeratorModel) {
        let mut grad = self.zeros_like();
        let mut total = 0.0;
        let mut count = 0usize;
        for seq in batch {
            total += self.nll_backward(seq, &mut grad);
            count += seq.len().saturating_sub(1);
        }
        let scale = 1.0 / count.max(1) as f64;
        grad.scale(scale);
        (total * scale, grad)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_module(
            "numerator",
            self,
            serde_json::json!({ "hidden": self.lstm.hidden() }),
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.require_kind("numerator")?;
        let hidden = ck.meta["hidden"]
            .as_u64()
            .ok_or_else(|| DacError::validation("numerator checkpoint lacks its hidden size"))?;
        let mut model = Self::new(hidden as usize, 0);
        ck.load_into(&mut model)?;
        Ok(model)
    }
}

/// Maximum-likelihood fit of the numerator on change-class sequences.
pub fn train_numerator(
    sequences: &[&[usize]],
    hidden: usize,
    config: &FitConfig,
) -> Result<(NumeratorModel, Vec<f64>)> {
    for seq in sequences {
        check_classes(seq)?;
    }
    if hidden == 0 {
        return Err(DacError::validation("numerator hidden size must be positive"));
    }
    let mut model = NumeratorModel::new(hidden, config.seed);
    let history = fit_module(&mut model, sequences.len(), config, |m, idx| {
        let batch: Vec<&[usize]> = idx.iter().map(|&i| sequences[i]).collect();
        m.batch_gradient(&batch)
    })?;
    Ok((model, history))
}

/// Cross-entropy of the logged action; fills `d` with `softmax - onehot`.
pub fn clone_loss(p: &PreparedPatient, pass: &HeadPass, d: &mut [f64]) -> f64 {
    let mut total = 0.0;
    for (t, &a) in p.actions.iter().enumerate() {
        let z = pass.output(t, NUM_ACTIONS);
        total += log_sum_exp(z) - z[a];
        let dz = &mut d[t * NUM_ACTIONS..(t + 1) * NUM_ACTIONS];
        dz.copy_from_slice(z);
        softmax_in_place(dz);
        dz[a] -= 1.0;
    }
    total
}

/// Imitation of the logged policy: a distribution over all 343 actions per state.
#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorClone {
    pub net: EncoderHead,
}

impl BehaviorClone {
    pub fn new(config: EmbeddingConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            net: EncoderHead::new(config, NUM_ACTIONS, &mut rng)?,
        })
    }

    /// Action distribution at every step.
    pub fn action_probs(&self, patient: &PreparedPatient) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .net
            .predict(&patient.steps)?
            .into_iter()
            .map(|mut z| {
                softmax_in_place(&mut z);
                z
            })
            .collect())
    }

    /// Probability the clone assigns to the logged change class at every
    /// step; the first step is the initial class and gets probability 1.
    pub fn logged_class_probs(&self, patient: &PreparedPatient, table: &ChangeTable) -> Result<Vec<f64>> {
        let probs = self.action_probs(patient)?;
        Ok((0..patient.len())
            .map(|t| {
                if t == 0 {
                    1.0
                } else {
                    table.marginalize(patient.actions[t - 1], &probs[t])[patient.classes[t]]
                }
            })
            .collect())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_module(
            "clone",
            &self.net,
            serde_json::json!({ "embedding": self.net.encoder.config }),
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.require_kind("clone")?;
        let config: EmbeddingConfig = serde_json::from_value(ck.meta["embedding"].clone())?;
        let mut model = Self::new(config, 0)?;
        ck.load_into(&mut model.net)?;
        Ok(model)
    }
}

pub fn train_behavior_clone(
    patients: &[&PreparedPatient],
    embedding: EmbeddingConfig,
    config: &FitConfig,
) -> Result<(BehaviorClone, Vec<f64>)> {
    let mut model = BehaviorClone::new(embedding, config.seed)?;
    let history = fit(&mut model.net, patients, config, clone_loss)?;
    Ok((model, history))
}

/// Stabilizers for the weight product.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightClip {
    /// Floor applied to both probabilities before the ratio.
    pub floor: f64,
    pub min: f64,
    pub max: f64,
}

impl Default for WeightClip {
    fn default() -> Self {
        Self {
            floor: 1e-4,
            min: 0.1,
            max: 10.0,
        }
    }
}

impl WeightClip {
    pub fn validate(&self) -> Result<()> {
        if !(self.floor > 0.0 && self.min > 0.0 && self.min <= self.max && self.max.is_finite()) {
            return Err(DacError::validation(format!("invalid weight clip {self:?}")));
        }
        Ok(())
    }
}

/// `w_t = clip(prod_{tau <= t} numerator_tau / denominator_tau)`. The running
/// product itself is not clipped, only each reported weight.
pub fn iptw_weights(numerator: &[f64], denominator: &[f64], clip: &WeightClip) -> Result<Vec<f64>> {
    clip.validate()?;
    if numerator.len() != denominator.len() {
        return Err(DacError::validation("numerator and denominator lengths differ"));
    }
    let mut running = 1.0;
    Ok(numerator
        .iter()
        .zip(denominator)
        .map(|(&n, &d)| {
            running *= n.max(clip.floor) / d.max(clip.floor);
            running.clamp(clip.min, clip.max)
        })
        .collect())
}

/// Numerator probabilities of the logged classes (1 for the initial step).
pub fn numerator_logged_probs(numerator: &NumeratorModel, patient: &PreparedPatient) -> Result<Vec<f64>> {
    let cond = numerator.conditionals(&patient.classes)?;
    Ok(std::iter::once(1.0)
        .chain(cond.iter().zip(&patient.classes[1..]).map(|(p, &c)| p[c]))
        .collect())
}

/// Weights of every step of one patient under frozen numerator and clone.
pub fn patient_weights(
    patient: &PreparedPatient,
    numerator: &NumeratorModel,
    clone: &BehaviorClone,
    table: &ChangeTable,
    clip: &WeightClip,
) -> Result<Vec<f64>> {
    let num = numerator_logged_probs(numerator, patient)?;
    let den = clone.logged_class_probs(patient, table)?;
    iptw_weights(&num, &den, clip)
}

/// `sum_a pi(a) p_m(a) - p_m(a_t)`: positive when the taken action is less
/// deadly than the policy's average action.
pub fn short_term_reward(policy: &[f64], mortality: &[f64], action: usize) -> f64 {
    crate::nn::dot(policy, mortality) - mortality[action]
}

/// `-15` for a death, `+15` for a survival.
pub fn terminal_reward(outcome: u8) -> Result<f64> {
    match outcome {
        0 => Ok(TERMINAL_REWARD),
        1 => Ok(-TERMINAL_REWARD),
        o => Err(DacError::validation(format!("outcome {o} is not 0 or 1"))),
    }
}

/// Mortality reward at step `t` of a trajectory of `len` steps: zero except at the last.
pub fn step_reward(outcome: u8, t: usize, len: usize) -> Result<f64> {
    if t + 1 == len {
        terminal_reward(outcome)
    } else {
        Ok(0.0)
    }
}

/// `w (alpha R^l + (1 - alpha) R^s)`.
pub fn combined_reward(weight: f64, long_term: f64, short_term: f64, alpha: f64) -> f64 {
    weight * (alpha * long_term + (1.0 - alpha) * short_term)
}

/// One audited step of a training batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardRow {
    pub patient_id: u64,
    pub step: usize,
    pub action: usize,
    pub weight: f64,
    pub long_term: f64,
    pub short_term: f64,
    pub combined: f64,
}

pub fn write_reward_csv(path: &Path, rows: &[RewardRow]) -> Result<()> {
    let mut out = String::from("patient_id,step,action,weight,long_term,short_term,combined\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.patient_id, r.step, r.action, r.weight, r.long_term, r.short_term, r.combined
        ));
    }
    atomic_write(path, out.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::ActionTriple;
    use crate::bins::DiscreteEvent;
    use crate::nn::gradcheck;
    use crate::stats::total_variation;
    use proptest::prelude::*;
    use rand::Rng;

    fn clip(min: f64, max: f64) -> WeightClip {
        WeightClip { floor: 1e-4, min, max }
    }

    #[test]
    fn identical_policies_give_unit_weights() {
        let p = [0.3, 0.2, 0.9, 0.05];
        assert_eq!(iptw_weights(&p, &p, &WeightClip::default()).unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn two_step_product() {
        let w = iptw_weights(&[0.5, 0.4], &[0.25, 0.8], &WeightClip::default()).unwrap();
        assert!((w[0] - 2.0).abs() < 1e-12);
        assert!((w[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clipping_applies_to_each_weight() {
        let w = iptw_weights(&[0.9; 3], &[0.3; 3], &clip(0.1, 10.0)).unwrap();
        assert!((w[0] - 3.0).abs() < 1e-12 && (w[1] - 9.0).abs() < 1e-12);
        assert_eq!(w[2], 10.0);
        // the running product is not clipped: dropping back below the cap
        let w = iptw_weights(&[0.9, 0.9, 0.1], &[0.1, 0.1, 0.9], &clip(0.1, 10.0)).unwrap();
        assert_eq!(w[1], 10.0);
        assert!((w[2] - 9.0).abs() < 1e-9);
    }

    #[test]
    fn zero_denominator_is_floored() {
        let w = iptw_weights(&[0.5], &[0.0], &clip(0.1, 1e9)).unwrap();
        assert!((w[0] - 0.5 / 1e-4).abs() < 1e-6);
        assert!(iptw_weights(&[0.5], &[0.5], &clip(2.0, 1.0)).is_err());
    }

    proptest! {
        #[test]
        fn tighter_caps_never_raise_weights(
            r in prop::collection::vec((0.01f64..1.0, 0.01f64..1.0), 1..12),
            cap in 1.0f64..10.0,
        ) {
            let (n, d): (Vec<f64>, Vec<f64>) = r.into_iter().unzip();
            let loose = iptw_weights(&n, &d, &clip(0.1, 10.0)).unwrap();
            let tight = iptw_weights(&n, &d, &clip(0.1, cap)).unwrap();
            prop_assert!(tight.iter().zip(&loose).all(|(t, l)| t <= l));
            let unit = iptw_weights(&n, &d, &clip(1.0, 1.0)).unwrap();
            prop_assert!(unit.iter().all(|&w| w == 1.0));
        }

        #[test]
        fn short_term_reward_averages_to_zero(logits in prop::collection::vec(-3.0f64..3.0, 2..20), seed in 0u64..1000) {
            let pi = softmax(&logits);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pm: Vec<f64> = (0..pi.len()).map(|_| rng.gen::<f64>()).collect();
            let mean: f64 = (0..pi.len()).map(|a| pi[a] * short_term_reward(&pi, &pm, a)).sum();
            prop_assert!(mean.abs() < 1e-12);
            for a in 0..pi.len() {
                let r = short_term_reward(&pi, &pm, a);
                prop_assert!((-1.0..=1.0).contains(&r));
            }
        }

        #[test]
        fn combined_reward_is_linear(w in 0.0f64..10.0, a in 0.0f64..1.0, l1 in -15.0f64..15.0, l2 in -15.0f64..15.0, s in -1.0f64..1.0) {
            let lhs = combined_reward(w, l1 + l2, s, a);
            let rhs = combined_reward(w, l1, s, a) + combined_reward(w, l2, 0.0, a);
            prop_assert!((lhs - rhs).abs() < 1e-9);
        }
    }

    #[test]
    fn short_term_reward_examples() {
        assert_eq!(short_term_reward(&[0.0, 1.0, 0.0], &[0.3, 0.7, 0.1], 1), 0.0);
        assert!(short_term_reward(&[0.2, 0.5, 0.3], &[0.4; 3], 2).abs() < 1e-15);
        assert!((short_term_reward(&[0.5, 0.5], &[0.2, 0.6], 1) + 0.2).abs() < 1e-12);
    }

    #[test]
    fn terminal_and_combined_examples() {
        assert_eq!(terminal_reward(1).unwrap(), -15.0);
        assert_eq!(terminal_reward(0).unwrap(), 15.0);
        assert!(terminal_reward(2).is_err());
        assert_eq!(step_reward(1, 3, 8).unwrap(), 0.0);
        assert_eq!(step_reward(1, 7, 8).unwrap(), -15.0);
        assert_eq!(combined_reward(0.0, 15.0, -0.7, 0.1), 0.0);
        assert!((combined_reward(1.0, 15.0, 0.0, 0.1) - 1.5).abs() < 1e-12);
    }

    fn fit_config(epochs: usize, lr: f64) -> FitConfig {
        FitConfig {
            epochs,
            batch_size: 64,
            learning_rate: lr,
            seed: 1,
        }
    }

    #[test]
    fn uniform_sequences_give_uniform_conditionals() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let seqs: Vec<Vec<usize>> = (0..10_000)
            .map(|_| {
                std::iter::once(INITIAL_CLASS)
                    .chain((0..5).map(|_| rng.gen_range(0..NUM_CHANGE_CLASSES)))
                    .collect()
            })
            .collect();
        let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
        let (model, _) = train_numerator(&refs, 8, &fit_config(3, 3e-3)).unwrap();
        let uniform = vec![1.0 / NUM_CHANGE_CLASSES as f64; NUM_CHANGE_CLASSES];
        let mut worst = 0.0f64;
        for seq in seqs.iter().take(200) {
            for p in model.conditionals(seq).unwrap() {
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                worst = worst.max(total_variation(&p, &uniform));
            }
        }
        assert!(worst <= 0.05, "largest TV from uniform {worst}");
    }

    #[test]
    fn repeating_pattern_is_memorized() {
        let seq: Vec<usize> = std::iter::once(INITIAL_CLASS)
            .chain((0..7).map(|t| if t % 2 == 0 { 4 } else { 22 }))
            .collect();
        let refs: Vec<&[usize]> = vec![seq.as_slice(); 32];
        let (model, _) = train_numerator(&refs, 8, &fit_config(400, 1e-2)).unwrap();
        let probs = numerator_logged_probs(&model, &patient_with_classes(&seq)).unwrap();
        assert!(probs.iter().all(|&p| p > 0.95), "{probs:?}");
    }

    fn patient_with_classes(classes: &[usize]) -> PreparedPatient {
        PreparedPatient {
            patient_id: 0,
            outcome: 0,
            steps: vec![vec![DiscreteEvent { variable: 0, subrange: 1 }]; classes.len()],
            actions: vec![0; classes.len()],
            classes: classes.to_vec(),
        }
    }

    #[test]
    fn malformed_sequences_are_rejected() {
        let model = NumeratorModel::new(4, 0);
        assert!(model.conditionals(&[3, 4]).is_err());
        assert!(model.conditionals(&[INITIAL_CLASS, INITIAL_CLASS]).is_err());
        assert!(model.conditionals(&[]).is_err());
    }

    #[test]
    fn numerator_gradient_matches_finite_differences() {
        let model = NumeratorModel::new(5, 3);
        let seqs: Vec<Vec<usize>> = vec![vec![INITIAL_CLASS, 3, 17, 26, 0], vec![INITIAL_CLASS, 13]];
        let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
        let (_, grad) = model.batch_gradient(&refs);
        let err = gradcheck::max_rel_error(&model, &grad, |m| m.batch_gradient(&refs).0, 1e-6, 1e-4);
        assert!(err <= 1e-4, "relative error {err}");
    }

    const CHARTED: EmbeddingConfig = EmbeddingConfig {
        dim: 16,
        subranges: 7,
        num_variables: 3,
    };

    /// Settings charted as observations: variable p carries the level of setting p.
    fn kept_patient(id: u64, action: ActionTriple, len: usize) -> PreparedPatient {
        let levels = action.levels();
        let step: Vec<DiscreteEvent> = (0..3)
            .map(|p| DiscreteEvent {
                variable: p as u32,
                subrange: u16::from(levels[p]),
            })
            .collect();
        let classes = (0..len)
            .map(|t| crate::action::ChangeClass::between((t > 0).then_some(action), action).index())
            .collect();
        PreparedPatient {
            patient_id: id,
            outcome: 0,
            steps: vec![step; len],
            actions: vec![action.flat_index(); len],
            classes,
        }
    }

    #[test]
    fn clone_learns_to_keep_settings() {
        let settings = [
            ActionTriple::new(1, 2, 3).unwrap(),
            ActionTriple::new(4, 4, 7).unwrap(),
            ActionTriple::new(6, 1, 5).unwrap(),
            ActionTriple::new(2, 5, 1).unwrap(),
        ];
        let cohort: Vec<PreparedPatient> = (0..200)
            .map(|i| kept_patient(i, settings[i as usize % 4], 4))
            .collect();
        let refs: Vec<&PreparedPatient> = cohort.iter().collect();
        // the value codes of nearby levels differ little, so this takes a while
        let (clone, _) = train_behavior_clone(&refs, CHARTED, &fit_config(400, 3e-3)).unwrap();
        let table = ChangeTable::new();
        let keep = crate::action::ChangeClass::between(Some(settings[0]), settings[0]).index();
        for p in cohort.iter().take(4) {
            assert!(p.classes[1..].iter().all(|&c| c == keep));
            let probs = clone.logged_class_probs(p, &table).unwrap();
            assert!(probs[1..].iter().all(|&x| x >= 0.95), "{probs:?}");
        }
        // evaluation is deterministic
        assert_eq!(clone.action_probs(&cohort[0]).unwrap(), clone.action_probs(&cohort[0]).unwrap());
    }

    #[test]
    fn clone_gradient_matches_finite_differences() {
        let config = EmbeddingConfig {
            dim: 3,
            subranges: 7,
            num_variables: 3,
        };
        let clone = BehaviorClone::new(config, 2).unwrap();
        let ps = [
            kept_patient(0, ActionTriple::new(1, 2, 3).unwrap(), 3),
            kept_patient(1, ActionTriple::new(7, 7, 7).unwrap(), 2),
        ];
        let batch: Vec<&PreparedPatient> = ps.iter().collect();
        let (_, grad) = crate::model::batch_gradient(&clone.net, &batch, &clone_loss);
        let loss = |m: &EncoderHead| crate::model::batch_gradient(m, &batch, &clone_loss).0;
        let err = gradcheck::max_rel_error(&clone.net, &grad, loss, 1e-6, 1e-4);
        assert!(err <= 1e-4, "relative error {err}");
    }

    #[test]
    fn weights_of_a_patient_start_at_one_and_checkpoints_round_trip() {
        let clone = BehaviorClone::new(CHARTED, 0).unwrap();
        let numerator = NumeratorModel::new(4, 0);
        let p = kept_patient(3, ActionTriple::new(3, 3, 3).unwrap(), 5);
        let w = patient_weights(&p, &numerator, &clone, &ChangeTable::new(), &WeightClip::default()).unwrap();
        assert_eq!(w.len(), 5);
        assert_eq!(w[0], 1.0);
        assert!(w.iter().all(|&x| (0.1..=10.0).contains(&x)));
        let back = NumeratorModel::from_checkpoint(&numerator.checkpoint()).unwrap();
        assert_eq!(back, numerator);
        let back = BehaviorClone::from_checkpoint(&clone.checkpoint()).unwrap();
        assert_eq!(back, clone);
    }

    #[test]
    fn reward_csv_has_one_row_per_step() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rewards.csv");
        let row = RewardRow {
            patient_id: 1,
            step: 0,
            action: 5,
            weight: 1.0,
            long_term: 2.0,
            short_term: -0.1,
            combined: 0.11,
        };
        write_reward_csv(&path, &[row, row]).unwrap();
        assert_eq!(std::fs::read_to_string(path).unwrap().lines().count(), 3);
    }
}
