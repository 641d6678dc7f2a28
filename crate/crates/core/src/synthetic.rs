//! Confounded autoregressive patient simulator with a rollout oracle.
//!
//! Observed covariates `o_t` and hidden confounders `s_t` follow order-`p`
//! autoregressions driven by a scalar treatment signal `u_t`:
//!
//! ```text
//! s_{t,j} = (1/p) sum_r (mu_{r,j} s_{t-r,j} + upsilon_r u_{t-r}) + eps_t
//! o_{t,j} = (1/p) sum_r (alpha_{r,j} o_{t-r,j} + beta_r u_{t-r}) + lambda (L s_t)_j + eta_t
//! q_t     = mean(s_1..s_t) + G o_t
//! y       = w . q_{T+1} + b
//! ```
//!
//! The treatment signal `u(a, o_t)` lies in `[-1, 1]` and peaks when each
//! ventilator level sits at a state-dependent target `tau_p(o_t)`. Clinicians
//! draw actions from `softmax(kappa * theta_a . q_t)`, so the hidden `s_t`
//! drives both treatment and outcome. The outcome is read one step after the
//! final action so that every action, including the last, affects `y`.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::action::{ActionTriple, LEVELS, NUM_ACTIONS};
use crate::error::{DacError, Result};
use crate::io::atomic_write;
use crate::nn::softmax_in_place;
use crate::trajectory::{ObservationEvent, PatientTrajectory, Step};

pub const GROUND_TRUTH_FORMAT: &str = "dac-ground-truth";

/// Generator settings. Coefficients are drawn from `seed`; patients from
/// `seed` and `cohort`, so two cohorts with the same seed share a world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    /// Autoregressive order `p`.
    pub order: usize,
    /// Decision steps per patient `T`.
    pub steps: usize,
    pub dim_obs: usize,
    pub dim_hidden: usize,
    /// Confounding strength of the clinician policy.
    pub kappa: f64,
    pub n_survivors: usize,
    pub n_nonsurvivors: usize,
    /// Standard deviation of the treatment coefficients `beta_r`, `upsilon_r`.
    pub treatment_sd: f64,
    /// Standard deviation of the innovations `eta_t`, `eps_t`.
    pub noise_sd: f64,
    /// Standard deviation of the pre-admission lags.
    pub initial_sd: f64,
    /// Strength `lambda` of the hidden-state imprint on observations.
    pub obs_coupling: f64,
    /// Scale of the clinician preference vectors `theta`.
    pub preference_sd: f64,
    /// Scale of the target map `tau_p(o) = 4 + 3 tanh(zeta_p . o + delta_p)`.
    pub target_gain: f64,
    /// Variance of the outcome bias `b`.
    pub outcome_bias_var: f64,
    /// Probability that a covariate goes unobserved at a step.
    pub missing_rate: f64,
    /// Added to every autoregressive and treatment coefficient, drawn once
    /// with this standard deviation; zero leaves the dynamics unperturbed.
    pub dynamics_perturbation: f64,
    /// Shift of the per-parameter target levels.
    pub target_shift: [f64; 3],
    pub seed: u64,
    /// Patient stream selector.
    pub cohort: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            order: 4,
            steps: 8,
            dim_obs: 8,
            dim_hidden: 4,
            kappa: 2.0,
            n_survivors: 1_000,
            n_nonsurvivors: 3_000,
            treatment_sd: 0.6,
            noise_sd: 0.3,
            initial_sd: 1.0,
            obs_coupling: 0.5,
            preference_sd: 0.5,
            target_gain: 2.0,
            outcome_bias_var: 0.1,
            missing_rate: 0.0,
            dynamics_perturbation: 0.0,
            target_shift: [0.0; 3],
            seed: 0,
            cohort: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(DacError::validation(m));
        if self.order == 0 {
            return fail("synthetic.order must be at least 1".into());
        }
        if self.steps < self.order {
            return fail(format!(
                "synthetic.steps ({}) must be at least synthetic.order ({})",
                self.steps, self.order
            ));
        }
        if self.dim_obs == 0 || self.dim_hidden == 0 {
            return fail("synthetic dimensions must be at least 1".into());
        }
        if !(self.kappa.is_finite() && self.kappa >= 0.0) {
            return fail(format!("synthetic.kappa must be finite and >= 0, got {}", self.kappa));
        }
        if self.n_patients() < 2 {
            return fail("synthetic cohort needs at least two patients".into());
        }
        let non_negative = [
            ("treatment_sd", self.treatment_sd),
            ("noise_sd", self.noise_sd),
            ("initial_sd", self.initial_sd),
            ("preference_sd", self.preference_sd),
            ("target_gain", self.target_gain),
            ("outcome_bias_var", self.outcome_bias_var),
            ("dynamics_perturbation", self.dynamics_perturbation),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return fail(format!("synthetic.{name} must be finite and >= 0, got {v}"));
            }
        }
        if !self.obs_coupling.is_finite() || self.target_shift.iter().any(|x| !x.is_finite()) {
            return fail("synthetic coupling and target shift must be finite".into());
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return fail(format!(
                "synthetic.missing_rate must lie in [0, 1), got {}",
                self.missing_rate
            ));
        }
        Ok(())
    }

    pub fn n_patients(&self) -> usize {
        self.n_survivors + self.n_nonsurvivors
    }

    pub fn mortality_fraction(&self) -> f64 {
        self.n_nonsurvivors as f64 / self.n_patients() as f64
    }
}

/// Every fixed quantity of a simulated world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub order: usize,
    pub steps: usize,
    /// `alpha[r][j]` for lag `r + 1`.
    pub alpha: Vec<Vec<f64>>,
    pub mu: Vec<Vec<f64>>,
    pub beta: Vec<f64>,
    pub upsilon: Vec<f64>,
    /// `G`, `[dim_hidden][dim_obs]`.
    pub g: Vec<Vec<f64>>,
    /// `L`, `[dim_obs][dim_hidden]`, already scaled by the coupling strength.
    pub coupling: Vec<Vec<f64>>,
    pub w: Vec<f64>,
    pub b: f64,
    /// `zeta[p]`, one per ventilator parameter.
    pub zeta: Vec<Vec<f64>>,
    pub delta: [f64; 3],
    pub target_shift: [f64; 3],
    /// `theta[p][level - 1]`, each of length `dim_hidden`; an action's
    /// preference vector is the sum over its three levels.
    pub theta: Vec<Vec<Vec<f64>>>,
    pub kappa: f64,
    /// Signs applied to `beta` then `upsilon` so that a larger treatment
    /// signal lowers the outcome.
    pub treatment_signs: Vec<f64>,
}

/// Lag window of the two autoregressions, most recent first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagState {
    pub obs: Vec<Vec<f64>>,
    pub hidden: Vec<Vec<f64>>,
    pub treatment: Vec<f64>,
}

/// Ground truth for one simulated patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientTruth {
    pub patient_id: u64,
    /// Pre-admission lags `o_0, o_{-1}, ...` and `s_0, s_{-1}, ...`.
    pub initial: LagState,
    /// `o_1..o_{T+1}` (the last one is never observed).
    pub obs: Vec<Vec<f64>>,
    /// `s_1..s_{T+1}`.
    pub hidden: Vec<Vec<f64>>,
    /// Innovations `eta_1..eta_{T+1}` and `eps_1..eps_{T+1}`.
    pub obs_noise: Vec<Vec<f64>>,
    pub hidden_noise: Vec<Vec<f64>>,
    /// Confounders `q_1..q_T`.
    pub confounders: Vec<Vec<f64>>,
    /// Treatment signals `u_1..u_T` of the logged actions.
    pub treatment: Vec<f64>,
    pub y: f64,
    pub oracle: Vec<ActionTriple>,
}

/// Coefficients, labelling threshold and per-patient truth of a cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticGroundTruth {
    pub config: SyntheticConfig,
    pub coefficients: Coefficients,
    pub threshold: f64,
    pub patients: Vec<PatientTruth>,
}

impl SyntheticGroundTruth {
    pub fn patient(&self, id: u64) -> Option<&PatientTruth> {
        self.patients
            .binary_search_by_key(&id, |p| p.patient_id)
            .ok()
            .map(|i| &self.patients[i])
    }

    /// Header line (config, coefficients, threshold) then one line per patient.
    pub fn save(&self, path: &Path, run_id: Option<&str>, config_hash: Option<&str>) -> Result<()> {
        let header = serde_json::json!({
            "format": GROUND_TRUTH_FORMAT,
            "version": 1,
            "run_id": run_id,
            "config_hash": config_hash,
            "config": self.config,
            "coefficients": self.coefficients,
            "threshold": self.threshold,
        });
        let mut buf = serde_json::to_vec(&header)?;
        buf.push(b'\n');
        for p in &self.patients {
            serde_json::to_writer(&mut buf, p)?;
            buf.push(b'\n');
        }
        atomic_write(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let bad = |reason: String| DacError::Format {
            path: path.display().to_string(),
            reason,
        };
        let mut lines = text.lines();
        let header: serde_json::Value = serde_json::from_str(lines.next().ok_or_else(|| bad("empty file".into()))?)?;
        if header["format"] != GROUND_TRUTH_FORMAT {
            return Err(bad(format!("unexpected format {}", header["format"])));
        }
        let config = serde_json::from_value(header["config"].clone())?;
        let coefficients = serde_json::from_value(header["coefficients"].clone())?;
        let threshold = header["threshold"]
            .as_f64()
            .ok_or_else(|| bad("missing threshold".into()))?;
        let patients = lines
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<PatientTruth>, _>>()?;
        Ok(Self {
            config,
            coefficients,
            threshold,
            patients,
        })
    }
}

// ── recursions ──────────────────────────────────────────────────────────

/// One autoregressive step without noise:
/// `x_j = (1/p) sum_r (coef[r][j] lags[r][j] + treat[r] u_lags[r])`.
pub fn ar_step(coef: &[Vec<f64>], lags: &[Vec<f64>], treat: &[f64], u_lags: &[f64]) -> Vec<f64> {
    let p = coef.len();
    let dim = coef[0].len();
    let mut out = vec![0.0; dim];
    for (j, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for r in 0..p {
            acc += coef[r][j] * lags[r][j] + treat[r] * u_lags[r];
        }
        *o = acc / p as f64;
    }
    out
}

/// Per-parameter target level in `[1, 7]`.
pub fn target_levels(coef: &Coefficients, obs: &[f64]) -> [f64; 3] {
    let mut tau = [0.0; 3];
    for (p, t) in tau.iter_mut().enumerate() {
        let z: f64 = coef.zeta[p].iter().zip(obs).map(|(a, b)| a * b).sum::<f64>() + coef.delta[p];
        *t = (4.0 + 3.0 * z.tanh() + coef.target_shift[p]).clamp(1.0, LEVELS as f64);
    }
    tau
}

/// Treatment signal in `[-1, 1]`: one minus two thirds of the summed squared
/// level misses, each measured in units of the full six-level span.
pub fn treatment_signal(action: ActionTriple, tau: &[f64; 3]) -> f64 {
    let miss: f64 = action
        .levels()
        .iter()
        .zip(tau)
        .map(|(&l, &t)| ((l as f64 - t) / 6.0).powi(2))
        .sum();
    1.0 - 2.0 / 3.0 * miss
}

/// The action maximizing the treatment signal; on a half-level tie the lower level wins.
pub fn greedy_action(tau: &[f64; 3]) -> ActionTriple {
    let lvl = |t: f64| ((t - 0.5).ceil() as i64).clamp(1, LEVELS as i64) as u8;
    ActionTriple::new(lvl(tau[0]), lvl(tau[1]), lvl(tau[2])).expect("clamped level")
}

/// Confounder `q_t = mean(s_1..s_t) + G o_t`.
fn confounder(coef: &Coefficients, hidden_sum: &[f64], count: usize, obs: &[f64]) -> Vec<f64> {
    coef.g
        .iter()
        .zip(hidden_sum)
        .map(|(row, s)| s / count as f64 + row.iter().zip(obs).map(|(a, b)| a * b).sum::<f64>())
        .collect()
}

fn outcome(coef: &Coefficients, q: &[f64]) -> f64 {
    coef.w.iter().zip(q).map(|(a, b)| a * b).sum::<f64>() + coef.b
}

/// Unnormalized clinician logits `kappa * theta_a . q` for every flat action.
pub fn behavior_logits(coef: &Coefficients, q: &[f64]) -> Vec<f64> {
    let dot = |v: &[f64]| v.iter().zip(q).map(|(a, b)| a * b).sum::<f64>();
    let per: Vec<Vec<f64>> = coef
        .theta
        .iter()
        .map(|levels| levels.iter().map(|v| dot(v)).collect())
        .collect();
    ActionTriple::all()
        .map(|a| {
            let [x, y, z] = a.levels();
            coef.kappa
                * (per[0][x as usize - 1] + per[1][y as usize - 1] + per[2][z as usize - 1])
        })
        .collect()
}

/// `P(a = j | q) ∝ exp(kappa * score_j)` for arbitrary per-action scores.
pub fn behavior_distribution(scores: &[f64], kappa: f64) -> Vec<f64> {
    let mut p: Vec<f64> = scores.iter().map(|s| kappa * s).collect();
    softmax_in_place(&mut p);
    p
}

/// The clinician's distribution over all 343 actions at confounder `q`.
pub fn behavior_probs(coef: &Coefficients, q: &[f64]) -> Vec<f64> {
    let mut p = behavior_logits(coef, q);
    softmax_in_place(&mut p);
    p
}

fn push_front<T: Clone>(lags: &mut Vec<T>, x: T) {
    lags.insert(0, x);
    lags.pop();
}

/// Advance the lag window by one step with the given innovations.
fn advance(coef: &Coefficients, lags: &mut LagState, obs_noise: &[f64], hidden_noise: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut s = ar_step(&coef.mu, &lags.hidden, &coef.upsilon, &lags.treatment);
    for (x, e) in s.iter_mut().zip(hidden_noise) {
        *x += e;
    }
    let mut o = ar_step(&coef.alpha, &lags.obs, &coef.beta, &lags.treatment);
    for (j, x) in o.iter_mut().enumerate() {
        *x += coef.coupling[j].iter().zip(&s).map(|(a, b)| a * b).sum::<f64>() + obs_noise[j];
    }
    push_front(&mut lags.hidden, s.clone());
    push_front(&mut lags.obs, o.clone());
    (o, s)
}

// ── coefficient draws ───────────────────────────────────────────────────

fn normal(mean: f64, sd: f64) -> Normal<f64> {
    Normal::new(mean, sd).expect("finite sd")
}

/// Draw the world's coefficients from `config.seed`.
pub fn draw_coefficients(config: &SyntheticConfig) -> Result<Coefficients> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let p = config.order;
    let (dim_o, dim_s) = (config.dim_obs, config.dim_hidden);
    let ar = |rng: &mut ChaCha8Rng, dim: usize| -> Vec<Vec<f64>> {
        (1..=p)
            .map(|r| {
                let law = normal(1.0 - r as f64 / p as f64, 1.0 / p as f64);
                (0..dim).map(|_| law.sample(rng)).collect()
            })
            .collect()
    };
    let mut alpha = ar(&mut rng, dim_o);
    let mut mu = ar(&mut rng, dim_s);
    let treat = normal(0.0, config.treatment_sd.max(0.0));
    let mut beta: Vec<f64> = (0..p).map(|_| treat.sample(&mut rng)).collect();
    let mut upsilon: Vec<f64> = (0..p).map(|_| treat.sample(&mut rng)).collect();
    let unit = Uniform::new_inclusive(-1.0, 1.0);
    let g = (0..dim_s)
        .map(|_| (0..dim_o).map(|_| unit.sample(&mut rng)).collect())
        .collect();
    let coupling = (0..dim_o)
        .map(|_| {
            (0..dim_s)
                .map(|_| config.obs_coupling * unit.sample(&mut rng))
                .collect()
        })
        .collect();
    let w = (0..dim_s).map(|_| unit.sample(&mut rng)).collect();
    let b = normal(0.0, config.outcome_bias_var.sqrt()).sample(&mut rng);
    let zeta_law = normal(0.0, config.target_gain / (dim_o as f64).sqrt());
    let zeta = (0..3)
        .map(|_| (0..dim_o).map(|_| zeta_law.sample(&mut rng)).collect())
        .collect();
    let delta_law = normal(0.0, 0.5);
    let delta = [(); 3].map(|_| delta_law.sample(&mut rng));
    let pref = normal(0.0, config.preference_sd);
    let theta = (0..3)
        .map(|_| {
            (0..LEVELS)
                .map(|_| (0..dim_s).map(|_| pref.sample(&mut rng)).collect())
                .collect()
        })
        .collect();

    if config.dynamics_perturbation > 0.0 {
        // separate stream so the unperturbed world stays identical
        let mut prng = ChaCha8Rng::seed_from_u64(config.seed);
        prng.set_stream(u64::MAX);
        let law = normal(0.0, config.dynamics_perturbation);
        for row in alpha.iter_mut().chain(mu.iter_mut()) {
            row.iter_mut().for_each(|x| *x += law.sample(&mut prng));
        }
        for x in beta.iter_mut().chain(upsilon.iter_mut()) {
            *x += law.sample(&mut prng);
        }
    }

    let mut coef = Coefficients {
        order: p,
        steps: config.steps,
        alpha,
        mu,
        beta,
        upsilon,
        g,
        coupling,
        w,
        b,
        zeta,
        delta,
        target_shift: config.target_shift,
        theta,
        kappa: config.kappa,
        treatment_signs: Vec::new(),
    };
    orient_treatment(&mut coef);
    Ok(coef)
}

/// Choose signs for the individually symmetric treatment coefficients so
/// that a larger treatment signal lowers the outcome at as many steps as
/// possible (then by the largest total benefit). Flipping the sign of a
/// coefficient drawn from a centred law leaves its distribution unchanged.
fn orient_treatment(coef: &mut Coefficients) {
    let p = coef.order;
    let original: Vec<f64> = coef.beta.iter().chain(&coef.upsilon).copied().collect();
    let n = original.len();
    // sensitivity contributed by each coefficient alone
    let mut parts: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut single = coef.clone();
        let vals: Vec<f64> = (0..n).map(|k| if k == i { original[k] } else { 0.0 }).collect();
        single.beta = vals[..p].to_vec();
        single.upsilon = vals[p..].to_vec();
        parts.push(treatment_sensitivity(&single));
    }
    let score = |mask: u64| {
        let steps = parts[0].len();
        let c: Vec<f64> = (0..steps)
            .map(|t| {
                (0..n)
                    .map(|i| if mask >> i & 1 == 1 { -parts[i][t] } else { parts[i][t] })
                    .sum::<f64>()
            })
            .collect();
        let negative = c.iter().filter(|&&x| x < 0.0).count();
        (negative, -c.iter().sum::<f64>())
    };
    let masks: Box<dyn Iterator<Item = u64>> = if n <= 16 {
        Box::new(0..1u64 << n)
    } else {
        Box::new([0u64, (1u64 << n.min(63)) - 1].into_iter())
    };
    let mut best = (0u64, score(0));
    for mask in masks {
        let sc = score(mask);
        if sc.0 > best.1 .0 || (sc.0 == best.1 .0 && sc.1 > best.1 .1) {
            best = (mask, sc);
        }
    }
    let signs: Vec<f64> = (0..n)
        .map(|i| if best.0 >> i & 1 == 1 { -1.0 } else { 1.0 })
        .collect();
    for (i, x) in coef.beta.iter_mut().chain(coef.upsilon.iter_mut()).enumerate() {
        *x *= signs[i];
    }
    coef.treatment_signs = signs;
}

/// `d y / d u_t` for `t = 1..T` with the treatment sequence held exogenous.
pub fn treatment_sensitivity(coef: &Coefficients) -> Vec<f64> {
    let run = |bump: Option<usize>| -> f64 {
        let p = coef.order;
        let mut lags = LagState {
            obs: vec![vec![0.0; coef.alpha[0].len()]; p],
            hidden: vec![vec![0.0; coef.mu[0].len()]; p],
            treatment: vec![0.0; p],
        };
        let zeros_o = vec![0.0; coef.alpha[0].len()];
        let zeros_s = vec![0.0; coef.mu[0].len()];
        let mut sum = vec![0.0; zeros_s.len()];
        let mut last_o = zeros_o.clone();
        for t in 1..=coef.steps + 1 {
            let (o, s) = advance(coef, &mut lags, &zeros_o, &zeros_s);
            sum.iter_mut().zip(&s).for_each(|(a, b)| *a += b);
            last_o = o;
            let u = if Some(t) == bump { 1.0 } else { 0.0 };
            push_front(&mut lags.treatment, u);
        }
        outcome(coef, &confounder(coef, &sum, coef.steps + 1, &last_o)) - coef.b
    };
    let base = run(None);
    (1..=coef.steps).map(|t| run(Some(t)) - base).collect()
}

// ── simulation ──────────────────────────────────────────────────────────

/// Split raw outcomes into binary labels with the requested mortality fraction.
///
/// With `n1 = round(fraction * n)`, the threshold is the midpoint between the
/// `n - n1` lowest value and the next one; label 1 means `y > threshold`.
pub fn label_outcomes(y: &[f64], mortality_fraction: f64) -> Result<(Vec<u8>, f64)> {
    if !(0.0..=1.0).contains(&mortality_fraction) {
        return Err(DacError::validation(format!(
            "mortality fraction must lie in [0, 1], got {mortality_fraction}"
        )));
    }
    let mut sorted: Vec<f64> = y.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted.len() < 2 || sorted.first() == sorted.last() {
        return Err(DacError::validation(
            "outcome labelling needs at least two distinct values",
        ));
    }
    let n = sorted.len();
    let n1 = (mortality_fraction * n as f64).round() as usize;
    let threshold = if n1 == 0 {
        sorted[n - 1]
    } else if n1 == n {
        sorted[0] - 1.0
    } else {
        0.5 * (sorted[n - n1 - 1] + sorted[n - n1])
    };
    Ok((y.iter().map(|&v| u8::from(v > threshold)).collect(), threshold))
}

fn patient_rng(seed: u64, cohort: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ cohort.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index + 1);
    rng
}

/// Simulate the cohort, label outcomes and attach oracle actions.
pub fn simulate_cohort(config: &SyntheticConfig) -> Result<(Vec<PatientTrajectory>, SyntheticGroundTruth)> {
    let coef = draw_coefficients(config)?;
    simulate_with(config, coef)
}

/// Simulate with externally supplied coefficients.
pub fn simulate_with(
    config: &SyntheticConfig,
    coef: Coefficients,
) -> Result<(Vec<PatientTrajectory>, SyntheticGroundTruth)> {
    config.validate()?;
    let n = config.n_patients();
    let mut raw: Vec<(Vec<Step>, PatientTruth)> = Vec::with_capacity(n);
    for i in 0..n as u64 {
        let mut rng = patient_rng(config.seed, config.cohort, i);
        raw.push(simulate_patient(config, &coef, i, &mut rng));
    }
    let y: Vec<f64> = raw.iter().map(|(_, t)| t.y).collect();
    let (labels, threshold) = label_outcomes(&y, config.mortality_fraction())?;
    let mut trajectories = Vec::with_capacity(n);
    let mut truths = Vec::with_capacity(n);
    for ((steps, mut truth), label) in raw.into_iter().zip(labels) {
        truth.oracle = oracle_actions(&coef, &truth);
        trajectories.push(PatientTrajectory::new(truth.patient_id, label, steps)?);
        truths.push(truth);
    }
    Ok((
        trajectories,
        SyntheticGroundTruth {
            config: config.clone(),
            coefficients: coef,
            threshold,
            patients: truths,
        },
    ))
}

fn simulate_patient(
    config: &SyntheticConfig,
    coef: &Coefficients,
    patient_id: u64,
    rng: &mut ChaCha8Rng,
) -> (Vec<Step>, PatientTruth) {
    let p = config.order;
    let (dim_o, dim_s) = (config.dim_obs, config.dim_hidden);
    let init = normal(0.0, config.initial_sd);
    let initial = LagState {
        obs: (0..p).map(|_| (0..dim_o).map(|_| init.sample(rng)).collect()).collect(),
        hidden: (0..p).map(|_| (0..dim_s).map(|_| init.sample(rng)).collect()).collect(),
        treatment: vec![0.0; p],
    };
    let noise = normal(0.0, config.noise_sd);
    let mut lags = initial.clone();
    let mut truth = PatientTruth {
        patient_id,
        initial,
        obs: Vec::new(),
        hidden: Vec::new(),
        obs_noise: Vec::new(),
        hidden_noise: Vec::new(),
        confounders: Vec::new(),
        treatment: Vec::new(),
        y: 0.0,
        oracle: Vec::new(),
    };
    let mut steps = Vec::with_capacity(config.steps);
    let mut hidden_sum = vec![0.0; dim_s];
    for t in 1..=config.steps + 1 {
        let eta: Vec<f64> = (0..dim_o).map(|_| noise.sample(rng)).collect();
        let eps: Vec<f64> = (0..dim_s).map(|_| noise.sample(rng)).collect();
        let (o, s) = advance(coef, &mut lags, &eta, &eps);
        hidden_sum.iter_mut().zip(&s).for_each(|(a, b)| *a += b);
        let q = confounder(coef, &hidden_sum, t, &o);
        truth.obs.push(o.clone());
        truth.hidden.push(s);
        truth.obs_noise.push(eta);
        truth.hidden_noise.push(eps);
        if t > config.steps {
            truth.y = outcome(coef, &q);
            break;
        }
        let probs = behavior_probs(coef, &q);
        let action = ActionTriple::from_flat_index(sample_index(&probs, rng)).expect("valid index");
        let u = treatment_signal(action, &target_levels(coef, &o));
        push_front(&mut lags.treatment, u);
        truth.treatment.push(u);
        truth.confounders.push(q);
        steps.push(Step {
            events: observe(&o, config.missing_rate, rng),
            action,
        });
    }
    (steps, truth)
}

fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let x: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if x < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn observe(obs: &[f64], missing_rate: f64, rng: &mut impl Rng) -> Vec<ObservationEvent> {
    let mut events: Vec<ObservationEvent> = Vec::with_capacity(obs.len());
    for (j, &value) in obs.iter().enumerate() {
        let keep = missing_rate == 0.0 || rng.gen::<f64>() >= missing_rate;
        if keep {
            events.push(ObservationEvent {
                variable: j as u32,
                value,
            });
        }
    }
    if events.is_empty() {
        let j = rng.gen_range(0..obs.len());
        events.push(ObservationEvent {
            variable: j as u32,
            value: obs[j],
        });
    }
    events
}

/// Re-run a patient on its recorded innovations with actions chosen by
/// `policy(t, o_t, q_t)` (1-based `t`) and return the raw outcome `y`.
pub fn replay_outcome(
    coef: &Coefficients,
    truth: &PatientTruth,
    mut policy: impl FnMut(usize, &[f64], &[f64]) -> ActionTriple,
) -> f64 {
    let mut lags = truth.initial.clone();
    let mut hidden_sum = vec![0.0; coef.mu[0].len()];
    let steps = truth.treatment.len();
    for t in 1..=steps + 1 {
        let (o, s) = advance(coef, &mut lags, &truth.obs_noise[t - 1], &truth.hidden_noise[t - 1]);
        hidden_sum.iter_mut().zip(&s).for_each(|(a, b)| *a += b);
        let q = confounder(coef, &hidden_sum, t, &o);
        if t > steps {
            return outcome(coef, &q);
        }
        let a = policy(t, &o, &q);
        push_front(&mut lags.treatment, treatment_signal(a, &target_levels(coef, &o)));
    }
    unreachable!("loop returns at the final step")
}

// ── oracle ──────────────────────────────────────────────────────────────

/// Outcome after applying treatment signal `u` at step `t` (1-based) from the
/// given lag window, with zero innovations and greedy actions afterwards.
fn rollout(coef: &Coefficients, lags: &LagState, hidden_sum: &[f64], t: usize, u: f64) -> f64 {
    let mut lags = lags.clone();
    let mut sum = hidden_sum.to_vec();
    push_front(&mut lags.treatment, u);
    let zeros_o = vec![0.0; coef.alpha[0].len()];
    let zeros_s = vec![0.0; coef.mu[0].len()];
    let mut tt = t + 1;
    loop {
        let (o, s) = advance(coef, &mut lags, &zeros_o, &zeros_s);
        sum.iter_mut().zip(&s).for_each(|(a, b)| *a += b);
        if tt > coef.steps {
            return outcome(coef, &confounder(coef, &sum, tt, &o));
        }
        let tau = target_levels(coef, &o);
        push_front(&mut lags.treatment, treatment_signal(greedy_action(&tau), &tau));
        tt += 1;
    }
}

/// Allocation-free copy of [`rollout`] over flat ring-less lag buffers.
struct FastRollout<'a> {
    coef: &'a Coefficients,
    obs: Vec<f64>,
    hidden: Vec<f64>,
    treat: Vec<f64>,
    sum: Vec<f64>,
    o: Vec<f64>,
    s: Vec<f64>,
}

impl<'a> FastRollout<'a> {
    fn new(coef: &'a Coefficients) -> Self {
        let (p, dim_o, dim_s) = (coef.order, coef.alpha[0].len(), coef.mu[0].len());
        Self {
            coef,
            obs: vec![0.0; p * dim_o],
            hidden: vec![0.0; p * dim_s],
            treat: vec![0.0; p],
            sum: vec![0.0; dim_s],
            o: vec![0.0; dim_o],
            s: vec![0.0; dim_s],
        }
    }

    fn load(&mut self, lags: &LagState, hidden_sum: &[f64]) {
        let (dim_o, dim_s) = (self.o.len(), self.s.len());
        for (r, (o, h)) in lags.obs.iter().zip(&lags.hidden).enumerate() {
            self.obs[r * dim_o..(r + 1) * dim_o].copy_from_slice(o);
            self.hidden[r * dim_s..(r + 1) * dim_s].copy_from_slice(h);
        }
        self.treat.copy_from_slice(&lags.treatment);
        self.sum.copy_from_slice(hidden_sum);
    }

    fn shift_treatment(&mut self, u: f64) {
        let n = self.treat.len();
        self.treat.copy_within(0..n - 1, 1);
        self.treat[0] = u;
    }

    fn step(&mut self) {
        let c = self.coef;
        let p = c.order;
        let (dim_o, dim_s) = (self.o.len(), self.s.len());
        for j in 0..dim_s {
            let mut acc = 0.0;
            for r in 0..p {
                acc += c.mu[r][j] * self.hidden[r * dim_s + j] + c.upsilon[r] * self.treat[r];
            }
            self.s[j] = acc / p as f64 + 0.0;
        }
        for j in 0..dim_o {
            let mut acc = 0.0;
            for r in 0..p {
                acc += c.alpha[r][j] * self.obs[r * dim_o + j] + c.beta[r] * self.treat[r];
            }
            let lam: f64 = c.coupling[j].iter().zip(&self.s).map(|(a, b)| a * b).sum();
            self.o[j] = acc / p as f64 + lam + 0.0;
        }
        self.hidden.copy_within(0..(p - 1) * dim_s, dim_s);
        self.hidden[..dim_s].copy_from_slice(&self.s);
        self.obs.copy_within(0..(p - 1) * dim_o, dim_o);
        self.obs[..dim_o].copy_from_slice(&self.o);
        for (a, b) in self.sum.iter_mut().zip(&self.s) {
            *a += b;
        }
    }

    fn outcome(&self, count: usize) -> f64 {
        let c = self.coef;
        let q: Vec<f64> = c
            .g
            .iter()
            .zip(&self.sum)
            .map(|(row, s)| s / count as f64 + row.iter().zip(&self.o).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        outcome(c, &q)
    }

    fn run(&mut self, lags: &LagState, hidden_sum: &[f64], t: usize, u: f64) -> f64 {
        self.load(lags, hidden_sum);
        self.shift_treatment(u);
        let mut tt = t + 1;
        loop {
            self.step();
            if tt > self.coef.steps {
                return self.outcome(tt);
            }
            let tau = target_levels(self.coef, &self.o);
            self.shift_treatment(treatment_signal(greedy_action(&tau), &tau));
            tt += 1;
        }
    }
}

/// Exhaustive argmin of the rolled-out outcome over all actions; the lowest
/// flat index wins ties.
fn best_action(
    fast: &mut FastRollout,
    lags: &LagState,
    hidden_sum: &[f64],
    t: usize,
    obs: &[f64],
) -> ActionTriple {
    let tau = target_levels(fast.coef, obs);
    let mut cache: HashMap<u64, f64> = HashMap::new();
    let mut best = (f64::INFINITY, 0usize);
    for idx in 0..NUM_ACTIONS {
        let a = ActionTriple::from_flat_index(idx).expect("valid index");
        let u = treatment_signal(a, &tau);
        let y = *cache
            .entry(u.to_bits())
            .or_insert_with(|| fast.run(lags, hidden_sum, t, u));
        if y < best.0 {
            best = (y, idx);
        }
    }
    ActionTriple::from_flat_index(best.1).expect("valid index")
}

/// Oracle actions for every step, reusing the recorded path of the patient.
pub fn oracle_actions(coef: &Coefficients, truth: &PatientTruth) -> Vec<ActionTriple> {
    let p = coef.order;
    let steps = truth.treatment.len();
    let mut out = Vec::with_capacity(steps);
    let mut fast = FastRollout::new(coef);
    let mut hidden_sum = vec![0.0; truth.hidden[0].len()];
    for t in 1..=steps {
        // lag window right after observing o_t
        let lag = |series: &Vec<Vec<f64>>, init: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            (0..p)
                .map(|r| {
                    if t > r {
                        series[t - 1 - r].clone()
                    } else {
                        init[r - t].clone()
                    }
                })
                .collect()
        };
        let lags = LagState {
            obs: lag(&truth.obs, &truth.initial.obs),
            hidden: lag(&truth.hidden, &truth.initial.hidden),
            treatment: (1..=p)
                .map(|r| if t > r { truth.treatment[t - 1 - r] } else { 0.0 })
                .collect(),
        };
        hidden_sum
            .iter_mut()
            .zip(&truth.hidden[t - 1])
            .for_each(|(a, b)| *a += b);
        out.push(best_action(&mut fast, &lags, &hidden_sum, t, &truth.obs[t - 1]));
    }
    out
}

/// Oracle action at step `t` (1-based) computed from scratch: the patient's
/// history is re-simulated from its initial lags, recorded innovations and
/// logged actions, then every action is rolled out without caching.
pub fn oracle_action_naive(coef: &Coefficients, truth: &PatientTruth, logged: &[ActionTriple], t: usize) -> Result<ActionTriple> {
    if t == 0 || t > logged.len() {
        return Err(DacError::validation(format!("step {t} outside 1..={}", logged.len())));
    }
    let mut lags = truth.initial.clone();
    let mut hidden_sum = vec![0.0; coef.mu[0].len()];
    let mut obs = Vec::new();
    for step in 1..=t {
        if step > 1 {
            let prev_obs = &obs;
            let tau = target_levels(coef, prev_obs);
            push_front(&mut lags.treatment, treatment_signal(logged[step - 2], &tau));
        }
        let (o, s) = advance(coef, &mut lags, &truth.obs_noise[step - 1], &truth.hidden_noise[step - 1]);
        for j in 0..s.len() {
            hidden_sum[j] += s[j];
        }
        obs = o;
    }
    let tau = target_levels(coef, &obs);
    let mut best = (f64::INFINITY, 0usize);
    for idx in 0..NUM_ACTIONS {
        let a = ActionTriple::from_flat_index(idx)?;
        let y = rollout(coef, &lags, &hidden_sum, t, treatment_signal(a, &tau));
        if y < best.0 {
            best = (y, idx);
        }
    }
    ActionTriple::from_flat_index(best.1)
}
