//! Seeded studies on simulated cohorts: policy variants scored against the
//! oracle, and the adaptation trend on a perturbed target cohort.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::action::ActionTriple;
use crate::adaptation::{run_adaptation, train_dynamics, transitions, CovariateSpace, DynamicsConfig};
use crate::bins::ValueBins;
use crate::error::{DacError, Result};
use crate::model::PreparedPatient;
use crate::pipeline::{
    acc_of, clone_recommendations, dac_recommendations, deconfound, logged_behavior_probs, oracle_of, pretrain,
    recommendation_wis, train_policy, Deconfounding, PipelineConfig, PreparedCohort, Pretrained, Role,
};
use crate::rewards::train_behavior_clone;
use crate::split::{CohortSplit, FoldDesignation};
use crate::synthetic::{simulate_cohort, SyntheticConfig, SyntheticGroundTruth};
use crate::trainer::{Ablation, DacModel, TrainConfig, TrainState};
use crate::trajectory::PatientTrajectory;

/// A simulated source cohort with its frozen estimators.
pub struct SourceRun {
    pub trajectories: Vec<PatientTrajectory>,
    pub truth: SyntheticGroundTruth,
    pub config: PipelineConfig,
    pub cohort: PreparedCohort,
    pub pretrained: Pretrained,
    pub deconfounding: Deconfounding,
}

impl SourceRun {
    pub fn simulate(synthetic: &SyntheticConfig, config: &PipelineConfig) -> Result<Self> {
        let (trajectories, truth) = simulate_cohort(synthetic)?;
        Self::from_cohort(trajectories, truth, config)
    }

    pub fn from_cohort(
        trajectories: Vec<PatientTrajectory>,
        truth: SyntheticGroundTruth,
        config: &PipelineConfig,
    ) -> Result<Self> {
        config.validate()?;
        let cohort = PreparedCohort::new(&trajectories, config)?;
        let pretrained = pretrain(&cohort, config)?;
        let deconfounding = deconfound(&cohort, &pretrained, &config.train)?;
        Ok(Self {
            trajectories,
            truth,
            config: config.clone(),
            cohort,
            pretrained,
            deconfounding,
        })
    }

    pub fn test_patients(&self) -> Vec<&PreparedPatient> {
        self.cohort.subset(&self.cohort.test)
    }

    pub fn oracle(&self) -> Result<Vec<Vec<ActionTriple>>> {
        oracle_of(&self.truth, &self.test_patients())
    }

    /// Train a policy with `train` (seed, ablation and α included).
    pub fn train(&self, train: &TrainConfig) -> Result<TrainState> {
        train_policy(&self.cohort, &self.pretrained, &self.deconfounding, train, |_| Ok(()))
    }

    /// ACC-3 and ACC-1 of a policy on the test folds.
    pub fn dac_acc(&self, model: &DacModel) -> Result<(f64, f64)> {
        let test = self.test_patients();
        acc_of(&dac_recommendations(model, &test)?, &self.oracle()?)
    }

    pub fn clone_acc(&self) -> Result<(f64, f64)> {
        let test = self.test_patients();
        acc_of(&clone_recommendations(&self.pretrained.clone, &test)?, &self.oracle()?)
    }
}

/// Oracle agreement of one policy on the test folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantScore {
    pub label: String,
    pub acc3: f64,
    pub acc1: f64,
}

impl SourceRun {
    /// Train `train` and score its validation-selected snapshot.
    pub fn score(&self, label: &str, train: &TrainConfig) -> Result<VariantScore> {
        let state = self.train(train)?;
        let (acc3, acc1) = self.dac_acc(state.best_model())?;
        Ok(VariantScore {
            label: label.to_string(),
            acc3,
            acc1,
        })
    }

    pub fn clone_score(&self) -> Result<VariantScore> {
        let (acc3, acc1) = self.clone_acc()?;
        Ok(VariantScore {
            label: "clone".into(),
            acc3,
            acc1,
        })
    }
}

/// The full method and its four single-ingredient ablations.
pub fn ablation_variants(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let mut out = vec![("dac".to_string(), TrainConfig { ablation: Ablation::default(), ..*base })];
    for name in ["rsp", "dcf", "short", "long"] {
        let ablation = Ablation::single(name).expect("known ablation");
        out.push((ablation.label(), TrainConfig { ablation, ..*base }));
    }
    out
}

/// The full method at each mixing weight.
pub fn alpha_variants(base: &TrainConfig, alphas: &[f64]) -> Vec<(String, TrainConfig)> {
    alphas
        .iter()
        .map(|&alpha| {
            (
                format!("alpha={alpha}"),
                TrainConfig {
                    alpha,
                    ablation: Ablation::default(),
                    ..*base
                },
            )
        })
        .collect()
}

/// How the target cohort differs from the source and which slices of it
/// the target-side learners may see.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptationSettings {
    /// Standard deviation of the additive noise on the dynamics coefficients.
    pub perturbation: f64,
    pub target_shift: [f64; 3],
    /// Fractions of the target cohort available for training.
    pub fractions: Vec<f64>,
    pub dynamics: DynamicsConfig,
}

impl Default for AdaptationSettings {
    fn default() -> Self {
        Self {
            perturbation: 0.2,
            target_shift: [1.0, -1.0, 1.0],
            fractions: vec![0.1, 0.3, 0.5],
            dynamics: DynamicsConfig::default(),
        }
    }
}

impl AdaptationSettings {
    pub fn target_config(&self, source: &SyntheticConfig) -> SyntheticConfig {
        SyntheticConfig {
            cohort: source.cohort + 1,
            dynamics_perturbation: self.perturbation,
            target_shift: self.target_shift,
            ..source.clone()
        }
    }
}

/// WIS on the target test folds at one training fraction.
///
/// At fraction 0 nothing is fine-tuned, the adapted policy is the source
/// policy and there is no scratch policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptationPoint {
    pub fraction: f64,
    pub target_patients: usize,
    pub adapted: f64,
    pub zero_shot: f64,
    pub scratch: Option<f64>,
}

impl AdaptationPoint {
    /// Advantage of the adapted source policy over training from scratch.
    pub fn gap_to_scratch(&self) -> Option<f64> {
        self.scratch.map(|s| self.adapted - s)
    }
}

/// Recommended flat action indices per target test patient.
pub type Decisions = Vec<(u64, Vec<usize>)>;

/// Scores plus the decisions behind them.
#[derive(Debug, Clone)]
pub struct AdaptationStudy {
    pub points: Vec<AdaptationPoint>,
    pub source_decisions: Decisions,
    /// Adapted decisions, aligned with `points`.
    pub adapted_decisions: Vec<Decisions>,
}

/// Simulate the target cohort and score adapted, zero-shot and scratch
/// policies at every fraction.
pub fn adaptation_study(
    source: &SourceRun,
    source_model: &DacModel,
    synthetic: &SyntheticConfig,
    settings: &AdaptationSettings,
) -> Result<AdaptationStudy> {
    let config = &source.config;
    let (target, _) = simulate_cohort(&settings.target_config(synthetic))?;
    let ids: Vec<u64> = target.iter().map(|t| t.patient_id).collect();
    let split = CohortSplit::new(&ids, config.split_seed)?;
    let folds = FoldDesignation::for_run(config.fold_run);
    let position: HashMap<u64, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();

    // target patients in source coordinates, for the source-side policies
    let target_src = PreparedCohort::with_bins(&target, config, split.clone(), source.cohort.bins.clone())?;
    let test = target_src.subset(&target_src.test);
    let mut seen = target_src.train.clone();
    seen.extend(&target_src.validation);
    let (behavior_clone, _) =
        train_behavior_clone(&target_src.subset(&seen), target_src.embedding, &config.clone)?;
    let behavior = logged_behavior_probs(&behavior_clone, &test)?;
    let gamma = config.train.gamma;

    let source_recs = dac_recommendations(source_model, &test)?;
    let zero_shot = recommendation_wis(&source_recs, &test, &behavior, gamma)?;
    let tag = |recs: Vec<Vec<usize>>| -> Decisions { test.iter().map(|p| p.patient_id).zip(recs).collect() };

    let shared = CovariateSpace::shared_variables(&source.trajectories, &target);
    let src_train_trajs: Vec<&PatientTrajectory> =
        source.cohort.train.iter().map(|&i| &source.trajectories[i]).collect();
    let source_space = CovariateSpace::fit(shared.clone(), src_train_trajs.iter().copied())?;
    let source_transitions = transitions(
        source_model,
        &source.cohort.subset(&source.cohort.train),
        &src_train_trajs,
        &source_space,
    )?;
    let (source_dynamics, _) = train_dynamics(
        &source_transitions,
        source_model.encoder.config.dim,
        settings.dynamics.action_dim,
        &settings.dynamics.fit,
    )?;

    // nested training pools: a fixed shuffle of the training folds
    let mut pool: Vec<u64> = ids
        .iter()
        .copied()
        .filter(|id| split.fold_of(*id).is_some_and(|f| folds.train.contains(&f)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.split_seed);
    rng.set_stream(7);
    pool.shuffle(&mut rng);

    let test_ids: Vec<u64> = target_src.test.iter().map(|&i| target_src.patients[i].patient_id).collect();
    let mut points = Vec::with_capacity(settings.fractions.len());
    let mut adapted_decisions = Vec::with_capacity(settings.fractions.len());
    for &fraction in &settings.fractions {
        if fraction == 0.0 {
            points.push(AdaptationPoint {
                fraction,
                target_patients: 0,
                adapted: zero_shot,
                zero_shot,
                scratch: None,
            });
            adapted_decisions.push(tag(source_recs.clone()));
            continue;
        }
        let n = (fraction * target.len() as f64).round() as usize;
        if !(fraction > 0.0) || n > pool.len() || n < 10 {
            return Err(DacError::validation(format!(
                "target fraction {fraction} gives {n} patients; need 0 or 10..={}",
                pool.len()
            )));
        }
        let chosen = &pool[..n];
        let chosen_trajs: Vec<&PatientTrajectory> = chosen.iter().map(|id| &target[position[id]]).collect();

        // adapted: fine-tune the source dynamics on the chosen patients
        let target_space = CovariateSpace::fit(shared.clone(), chosen_trajs.iter().copied())?;
        let chosen_src: Vec<&PreparedPatient> =
            chosen.iter().map(|id| &target_src.patients[position[id]]).collect();
        let target_transitions = transitions(source_model, &chosen_src, &chosen_trajs, &target_space)?;
        let adapted_policy = run_adaptation(
            source_model,
            &source_dynamics,
            &target_transitions,
            &settings.dynamics.fine_tune,
        )?;
        let adapted_recs = test
            .iter()
            .map(|p| adapted_policy.recommend(p))
            .collect::<Result<Vec<_>>>()?;
        let adapted = recommendation_wis(&adapted_recs, &test, &behavior, gamma)?;

        // scratch: the whole pipeline on the chosen patients only
        let scratch_model = train_scratch(&target, &position, chosen, &test_ids, &split, config)?;
        let scratch_recs = dac_recommendations(&scratch_model.0, &scratch_model.1.subset(&scratch_model.1.test))?;
        let scratch = recommendation_wis(&scratch_recs, &test, &behavior, gamma)?;

        points.push(AdaptationPoint {
            fraction,
            target_patients: n,
            adapted,
            zero_shot,
            scratch: Some(scratch),
        });
        adapted_decisions.push(tag(adapted_recs));
    }
    Ok(AdaptationStudy {
        points,
        source_decisions: tag(source_recs),
        adapted_decisions,
    })
}

/// Train a policy from nothing on `chosen` (every tenth held out for
/// validation) and return it with its own view of the test patients.
fn train_scratch(
    target: &[PatientTrajectory],
    position: &HashMap<u64, usize>,
    chosen: &[u64],
    test_ids: &[u64],
    split: &CohortSplit,
    config: &PipelineConfig,
) -> Result<(DacModel, PreparedCohort)> {
    let mut trajs = Vec::with_capacity(chosen.len() + test_ids.len());
    let mut roles = Vec::with_capacity(trajs.capacity());
    for (i, id) in chosen.iter().enumerate() {
        trajs.push(target[position[id]].clone());
        roles.push(if i % 10 == 9 { Role::Validation } else { Role::Train });
    }
    for id in test_ids {
        trajs.push(target[position[id]].clone());
        roles.push(Role::Test);
    }
    let bins = ValueBins::fit(
        trajs.iter().zip(&roles).filter(|(_, r)| **r == Role::Train).map(|(t, _)| t),
        config.subranges,
    )?;
    let cohort = PreparedCohort::assemble(&trajs, &roles, config.embedding_dim, split.clone(), bins)?;
    let pretrained = pretrain(&cohort, config)?;
    let dec = deconfound(&cohort, &pretrained, &config.train)?;
    let state = train_policy(&cohort, &pretrained, &dec, &config.train, |_| Ok(()))?;
    Ok((state.best_model().clone(), cohort))
}
