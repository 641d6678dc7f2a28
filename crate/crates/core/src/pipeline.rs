//! End-to-end wiring: discretize a cohort, split it, pre-train the frozen
//! estimators, derive weights and pools, train policies and score them.

use serde::{Deserialize, Serialize};

use crate::action::{ActionTriple, ChangeTable};
use crate::bins::ValueBins;
use crate::encoder::EmbeddingConfig;
use crate::error::{DacError, Result};
use crate::evaluation::{acc_metrics, importance_ratio, smoothed_prob, wis, WeightedTrajectory, SMOOTHING};
use crate::model::{prepare, FitConfig, PreparedPatient};
use crate::rewards::{
    numerator_logged_probs, patient_weights, step_reward, train_behavior_clone, train_numerator, BehaviorClone,
    NumeratorModel,
};
use crate::risk::{train_risk_model, PatientPools, RiskModel};
use crate::split::{CohortSplit, FoldDesignation};
use crate::synthetic::SyntheticGroundTruth;
use crate::trainer::{train_dac, DacModel, TrainConfig, TrainState, TrainingData, WeightedPatient};
use crate::trajectory::PatientTrajectory;

/// Everything besides the cohort itself that a source experiment needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// State dimension `k`.
    pub embedding_dim: usize,
    /// Value sub-ranges `V` per variable.
    pub subranges: usize,
    pub split_seed: u64,
    /// Which rotation of the ten folds to use.
    pub fold_run: usize,
    pub risk: FitConfig,
    pub clone: FitConfig,
    pub numerator: FitConfig,
    pub numerator_hidden: usize,
    pub train: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let fit = FitConfig {
            epochs: 10,
            batch_size: 64,
            learning_rate: 3e-3,
            seed: 0,
        };
        Self {
            embedding_dim: 32,
            subranges: 20,
            split_seed: 0,
            fold_run: 0,
            risk: fit,
            clone: fit,
            numerator: fit,
            numerator_hidden: 16,
            // batch 256 at lr 1e-4 gives too few updates per epoch on a
            // desk-sized cohort
            train: TrainConfig {
                learning_rate: 1e-3,
                batch_size: 64,
                epochs: 12,
                ..TrainConfig::default()
            },
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.subranges == 0 || self.numerator_hidden == 0 {
            return Err(DacError::validation(
                "pipeline.embedding_dim, pipeline.subranges and pipeline.numerator_hidden must be positive",
            ));
        }
        self.risk.validate().map_err(|e| e.within("pipeline.risk"))?;
        self.clone.validate().map_err(|e| e.within("pipeline.clone"))?;
        self.numerator.validate().map_err(|e| e.within("pipeline.numerator"))?;
        self.train.validate().map_err(|e| e.within("pipeline.train"))
    }

    /// Same settings with every seed offset by `seed`.
    pub fn reseeded(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.split_seed = seed;
        c.risk.seed = seed;
        c.clone.seed = seed.wrapping_add(1);
        c.numerator.seed = seed.wrapping_add(2);
        c.train.seed = seed;
        c
    }
}

/// What a patient is used for in one experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Train,
    Validation,
    Test,
}

/// A discretized cohort with its fold assignment.
#[derive(Debug, Clone)]
pub struct PreparedCohort {
    pub bins: ValueBins,
    pub split: CohortSplit,
    pub embedding: EmbeddingConfig,
    pub patients: Vec<PreparedPatient>,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl PreparedCohort {
    /// Split, fit value bins on the training folds and discretize everyone.
    pub fn new(trajs: &[PatientTrajectory], config: &PipelineConfig) -> Result<Self> {
        let ids: Vec<u64> = trajs.iter().map(|t| t.patient_id).collect();
        let split = CohortSplit::new(&ids, config.split_seed)?;
        let folds = FoldDesignation::for_run(config.fold_run);
        let fold = |t: &PatientTrajectory| split.fold_of(t.patient_id).expect("every id is split");
        let bins = ValueBins::fit(
            trajs.iter().filter(|t| folds.train.contains(&fold(t))),
            config.subranges,
        )?;
        Self::with_bins(trajs, config, split, bins)
    }

    /// Discretize with existing bins (for a cohort scored in another cohort's coordinates).
    pub fn with_bins(
        trajs: &[PatientTrajectory],
        config: &PipelineConfig,
        split: CohortSplit,
        bins: ValueBins,
    ) -> Result<Self> {
        let folds = FoldDesignation::for_run(config.fold_run);
        let role = |id: u64| -> Result<Role> {
            let f = split
                .fold_of(id)
                .ok_or_else(|| DacError::validation(format!("patient {id} is not in the split")))?;
            Ok(if folds.train.contains(&f) {
                Role::Train
            } else if folds.validation == f {
                Role::Validation
            } else {
                Role::Test
            })
        };
        let roles = trajs.iter().map(|t| role(t.patient_id)).collect::<Result<Vec<_>>>()?;
        Self::assemble(trajs, &roles, config.embedding_dim, split.clone(), bins)
    }

    /// Discretize `trajs` and file each one under the matching entry of `roles`.
    pub fn assemble(
        trajs: &[PatientTrajectory],
        roles: &[Role],
        embedding_dim: usize,
        split: CohortSplit,
        bins: ValueBins,
    ) -> Result<Self> {
        if roles.len() != trajs.len() {
            return Err(DacError::validation("one role per trajectory is required"));
        }
        let patients = prepare(trajs, &bins)?;
        let (mut train, mut validation, mut test) = (Vec::new(), Vec::new(), Vec::new());
        for (i, role) in roles.iter().enumerate() {
            match role {
                Role::Train => train.push(i),
                Role::Validation => validation.push(i),
                Role::Test => test.push(i),
            }
        }
        let embedding = EmbeddingConfig {
            dim: embedding_dim,
            subranges: bins.subranges,
            num_variables: bins.num_variables(),
        };
        Ok(Self {
            bins,
            split,
            embedding,
            patients,
            train,
            validation,
            test,
        })
    }

    pub fn subset(&self, idx: &[usize]) -> Vec<&PreparedPatient> {
        idx.iter().map(|&i| &self.patients[i]).collect()
    }
}

/// Frozen estimators trained before the policy.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub risk: RiskModel,
    pub numerator: NumeratorModel,
    pub clone: BehaviorClone,
}

pub fn pretrain(cohort: &PreparedCohort, config: &PipelineConfig) -> Result<Pretrained> {
    let train = cohort.subset(&cohort.train);
    let (risk, _) = train_risk_model(&train, cohort.embedding, &config.risk)?;
    let sequences: Vec<&[usize]> = train.iter().map(|p| p.classes.as_slice()).collect();
    let (numerator, _) = train_numerator(&sequences, config.numerator_hidden, &config.numerator)?;
    let (clone, _) = train_behavior_clone(&train, cohort.embedding, &config.clone)?;
    Ok(Pretrained {
        risk,
        numerator,
        clone,
    })
}

/// Weights of every training patient and the risk pools.
#[derive(Debug, Clone)]
pub struct Deconfounding {
    /// Aligned with `PreparedCohort::train`.
    pub weights: Vec<Vec<f64>>,
    pub pools: PatientPools,
}

pub fn deconfound(cohort: &PreparedCohort, pre: &Pretrained, train: &TrainConfig) -> Result<Deconfounding> {
    let table = ChangeTable::new();
    let patients = cohort.subset(&cohort.train);
    let weights = patients
        .iter()
        .map(|p| patient_weights(p, &pre.numerator, &pre.clone, &table, &train.clip))
        .collect::<Result<Vec<_>>>()?;
    let pools = PatientPools::from_model(&pre.risk, &patients)?;
    Ok(Deconfounding { weights, pools })
}

/// Behavior probability of each logged action, per validation step.
pub fn logged_behavior_probs(clone: &BehaviorClone, patients: &[&PreparedPatient]) -> Result<Vec<Vec<f64>>> {
    patients
        .iter()
        .map(|p| {
            let probs = clone.action_probs(p)?;
            Ok((0..p.len()).map(|t| probs[t][p.actions[t]]).collect())
        })
        .collect()
}

pub fn training_data<'a>(
    cohort: &'a PreparedCohort,
    pre: &Pretrained,
    dec: &'a Deconfounding,
) -> Result<TrainingData<'a>> {
    let validation = cohort.subset(&cohort.validation);
    Ok(TrainingData {
        train: cohort
            .train
            .iter()
            .zip(&dec.weights)
            .map(|(&i, w)| WeightedPatient {
                patient: &cohort.patients[i],
                weights: w,
            })
            .collect(),
        pools: Some(dec.pools.clone()),
        validation_behavior: logged_behavior_probs(&pre.clone, &validation)?,
        validation,
    })
}

/// Train one policy from a fresh model seeded by `config.seed`.
pub fn train_policy(
    cohort: &PreparedCohort,
    pre: &Pretrained,
    dec: &Deconfounding,
    config: &TrainConfig,
    on_epoch: impl FnMut(&TrainState) -> Result<()>,
) -> Result<TrainState> {
    let data = training_data(cohort, pre, dec)?;
    let model = DacModel::neutral(cohort.embedding, config.seed)?;
    train_dac(&data, config, TrainState::new(model, config), on_epoch)
}

/// Oracle actions of the given patients, step by step.
pub fn oracle_of(truth: &SyntheticGroundTruth, patients: &[&PreparedPatient]) -> Result<Vec<Vec<ActionTriple>>> {
    patients
        .iter()
        .map(|p| {
            truth
                .patient(p.patient_id)
                .map(|t| t.oracle.clone())
                .ok_or_else(|| DacError::validation(format!("no oracle for patient {}", p.patient_id)))
        })
        .collect()
}

/// ACC-3 and ACC-1 of per-step recommendations (flat indices) against the oracle.
pub fn acc_of(recommended: &[Vec<usize>], oracle: &[Vec<ActionTriple>]) -> Result<(f64, f64)> {
    let rec: Vec<ActionTriple> = recommended
        .iter()
        .flatten()
        .map(|&a| ActionTriple::from_flat_index(a))
        .collect::<Result<_>>()?;
    let orc: Vec<ActionTriple> = oracle.iter().flatten().copied().collect();
    acc_metrics(&rec, &orc)
}

/// Recommendations of the behavior clone (its most probable action).
pub fn clone_recommendations(clone: &BehaviorClone, patients: &[&PreparedPatient]) -> Result<Vec<Vec<usize>>> {
    patients
        .iter()
        .map(|p| Ok(clone.action_probs(p)?.iter().map(|q| crate::nn::argmax(q)).collect()))
        .collect()
}

pub fn dac_recommendations(model: &DacModel, patients: &[&PreparedPatient]) -> Result<Vec<Vec<usize>>> {
    patients.iter().map(|p| model.recommend(p)).collect()
}

/// Numerator probabilities of every training patient's logged classes, for audit.
pub fn numerator_table(cohort: &PreparedCohort, pre: &Pretrained) -> Result<Vec<Vec<f64>>> {
    cohort
        .subset(&cohort.train)
        .iter()
        .map(|p| numerator_logged_probs(&pre.numerator, p))
        .collect()
}

/// WIS of deterministic recommendations, smoothed so unchosen actions keep
/// a little mass.
pub fn recommendation_wis(
    recommended: &[Vec<usize>],
    patients: &[&PreparedPatient],
    behavior: &[Vec<f64>],
    gamma: f64,
) -> Result<f64> {
    if recommended.len() != patients.len() || behavior.len() != patients.len() {
        return Err(DacError::validation("recommendations, patients and behavior differ in size"));
    }
    let trajs = patients
        .iter()
        .zip(recommended)
        .zip(behavior)
        .map(|((p, rec), b)| {
            Ok(WeightedTrajectory {
                ratios: (0..p.len())
                    .map(|t| importance_ratio(smoothed_prob(rec[t], p.actions[t], SMOOTHING), b[t]))
                    .collect(),
                rewards: (0..p.len())
                    .map(|t| step_reward(p.outcome, t, p.len()))
                    .collect::<Result<_>>()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    wis(&trajs, gamma)
}
