//! Standalone mortality-risk model and the risk-matched balanced batch sampler.
//!
//! The risk model is the state encoder with a single sigmoid output, trained
//! with per-step binary cross-entropy against the patient's outcome. Each
//! training patient is summarized by its maximal per-step risk; survivors and
//! non-survivors are kept in separate pools sorted by that score, and a batch
//! pairs uniformly drawn non-survivors with the survivor of nearest score.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::encoder::EmbeddingConfig;
use crate::error::{DacError, Result};
use crate::model::{fit, EncoderHead, FitConfig, HeadPass, PreparedPatient};
use crate::nn::sigmoid;
use crate::trajectory::write_json_lines;

/// Floor inside the logarithms of the cross-entropy.
pub const BCE_FLOOR: f64 = 1e-7;

/// `-(y ln p + (1 - y) ln(1 - p))` with both log arguments floored.
pub fn binary_cross_entropy(p: f64, y: f64) -> f64 {
    -(y * p.max(BCE_FLOOR).ln() + (1.0 - y) * (1.0 - p).max(BCE_FLOOR).ln())
}

/// Same loss from a logit, computed without forming the probability.
pub fn bce_with_logit(z: f64, y: f64) -> f64 {
    // softplus(z) - y z
    z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z
}

/// Per-step loss used to train the risk model; fills `d` with `sigmoid(z) - y`.
pub fn risk_loss(p: &PreparedPatient, pass: &HeadPass, d: &mut [f64]) -> f64 {
    let y = f64::from(p.outcome);
    let mut total = 0.0;
    for (t, &z) in pass.outputs.iter().enumerate() {
        total += bce_with_logit(z, y);
        d[t] = sigmoid(z) - y;
    }
    total
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskModel {
    pub net: EncoderHead,
}

impl RiskModel {
    pub fn new(config: EmbeddingConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            net: EncoderHead::new(config, 1, &mut rng)?,
        })
    }

    /// Mortality probability at every step.
    pub fn step_risks(&self, patient: &PreparedPatient) -> Result<Vec<f64>> {
        Ok(self
            .net
            .predict(&patient.steps)?
            .into_iter()
            .map(|z| sigmoid(z[0]))
            .collect())
    }

    pub fn max_risk(&self, patient: &PreparedPatient) -> Result<f64> {
        let risks = self.step_risks(patient)?;
        if risks.is_empty() {
            return Err(DacError::validation(format!(
                "patient {} has no steps to score",
                patient.patient_id
            )));
        }
        Ok(risks.into_iter().fold(f64::NEG_INFINITY, f64::max))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_module(
            "risk",
            &self.net,
            serde_json::json!({ "embedding": self.net.encoder.config }),
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.require_kind("risk")?;
        let config: EmbeddingConfig = serde_json::from_value(ck.meta["embedding"].clone())?;
        let mut model = Self::new(config, 0)?;
        ck.load_into(&mut model.net)?;
        Ok(model)
    }
}

/// Fit the risk model. Both outcomes must occur in the training set.
pub fn train_risk_model(
    patients: &[&PreparedPatient],
    embedding: EmbeddingConfig,
    fit_config: &FitConfig,
) -> Result<(RiskModel, Vec<f64>)> {
    let deaths = patients.iter().filter(|p| p.died()).count();
    if deaths == 0 || deaths == patients.len() {
        return Err(DacError::validation(
            "risk model needs survivors and non-survivors in the training set",
        ));
    }
    let mut model = RiskModel::new(embedding, fit_config.seed)?;
    let history = fit(&mut model.net, patients, fit_config, risk_loss)?;
    Ok((model, history))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub patient_id: u64,
    pub max_risk: f64,
}

/// Survivor and non-survivor pools, each sorted by `(max_risk, patient_id)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientPools {
    pub survivors: Vec<PoolEntry>,
    pub nonsurvivors: Vec<PoolEntry>,
}

fn sort_pool(pool: &mut [PoolEntry]) {
    pool.sort_by(|a, b| {
        a.max_risk
            .total_cmp(&b.max_risk)
            .then(a.patient_id.cmp(&b.patient_id))
    });
}

impl PatientPools {
    /// Split scored patients `(id, outcome, max_risk)` by outcome.
    pub fn new(scored: impl IntoIterator<Item = (u64, u8, f64)>) -> Result<Self> {
        let mut survivors = Vec::new();
        let mut nonsurvivors = Vec::new();
        for (patient_id, outcome, max_risk) in scored {
            if !max_risk.is_finite() {
                return Err(DacError::Numerical(format!(
                    "patient {patient_id} has non-finite risk"
                )));
            }
            let entry = PoolEntry { patient_id, max_risk };
            match outcome {
                0 => survivors.push(entry),
                1 => nonsurvivors.push(entry),
                o => return Err(DacError::validation(format!("outcome {o} is not 0 or 1"))),
            }
        }
        sort_pool(&mut survivors);
        sort_pool(&mut nonsurvivors);
        Ok(Self {
            survivors,
            nonsurvivors,
        })
    }

    /// Score every patient with the frozen risk model and pool them.
    pub fn from_model(model: &RiskModel, patients: &[&PreparedPatient]) -> Result<Self> {
        let scored = patients
            .iter()
            .map(|p| Ok((p.patient_id, p.outcome, model.max_risk(p)?)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(scored)
    }

    pub fn len(&self) -> usize {
        self.survivors.len() + self.nonsurvivors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Survivor closest in risk to `risk`; equal distances go to the lower id.
    pub fn nearest_survivor(&self, risk: f64) -> Option<PoolEntry> {
        let pool = &self.survivors;
        let first_at_or_above = pool.partition_point(|e| e.max_risk < risk);
        let above = pool.get(first_at_or_above).copied();
        // lowest id among the largest risk strictly below
        let below = first_at_or_above.checked_sub(1).map(|i| {
            let r = pool[i].max_risk;
            pool[pool.partition_point(|e| e.max_risk < r)]
        });
        match (below, above) {
            (None, x) | (x, None) => x,
            (Some(b), Some(a)) => {
                let (db, da) = (risk - b.max_risk, a.max_risk - risk);
                Some(if db < da || (db == da && b.patient_id < a.patient_id) {
                    b
                } else {
                    a
                })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub nonsurvivor: PoolEntry,
    pub survivor: PoolEntry,
}

impl MatchedPair {
    pub fn risk_gap(&self) -> f64 {
        (self.nonsurvivor.max_risk - self.survivor.max_risk).abs()
    }
}

/// Draw `batch_size / 2` non-survivors uniformly with replacement and pair
/// each with its nearest survivor.
pub fn sample_balanced_batch(
    pools: &PatientPools,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<MatchedPair>> {
    if batch_size == 0 || batch_size % 2 != 0 {
        return Err(DacError::validation(format!(
            "balanced batch size must be even and positive, got {batch_size}"
        )));
    }
    if pools.survivors.is_empty() || pools.nonsurvivors.is_empty() {
        return Err(DacError::validation(
            "balanced sampling needs both pools non-empty",
        ));
    }
    Ok((0..batch_size / 2)
        .map(|_| {
            let nonsurvivor = pools.nonsurvivors[rng.gen_range(0..pools.nonsurvivors.len())];
            let survivor = pools
                .nearest_survivor(nonsurvivor.max_risk)
                .expect("survivor pool checked non-empty");
            MatchedPair {
                nonsurvivor,
                survivor,
            }
        })
        .collect())
}

/// Patient ids of a batch, non-survivor then survivor for each pair.
pub fn batch_ids(pairs: &[MatchedPair]) -> Vec<u64> {
    pairs
        .iter()
        .flat_map(|p| [p.nonsurvivor.patient_id, p.survivor.patient_id])
        .collect()
}

#[derive(Debug, Clone, Serialize)]
struct ManifestRecord<'a> {
    batch: usize,
    pairs: &'a [MatchedPair],
}

/// Write batches as JSON lines (header, then one record per batch) for audit.
pub fn write_batch_manifest(
    path: &Path,
    run_id: Option<&str>,
    batches: &[Vec<MatchedPair>],
) -> Result<()> {
    let header = serde_json::json!({ "format": "dac-batch-manifest", "version": 1, "run_id": run_id });
    let records: Vec<ManifestRecord> = batches
        .iter()
        .enumerate()
        .map(|(batch, pairs)| ManifestRecord { batch, pairs })
        .collect();
    write_json_lines(path, &header, &records)
}
