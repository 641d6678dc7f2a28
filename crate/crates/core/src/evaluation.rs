//! Off-policy value estimates, calibrated mortality, oracle agreement and the
//! descriptive tables behind the report figures.

use serde::{Deserialize, Serialize};

use crate::action::{ActionTriple, LEVELS, NUM_ACTIONS};
use crate::error::{DacError, Result};

/// Floor on behavior probabilities in importance ratios.
pub const BEHAVIOR_FLOOR: f64 = 1e-4;
/// Probability mass a deterministic policy spreads over its non-chosen actions.
pub const SMOOTHING: f64 = 0.01;

/// Probability of `action` under a deterministic choice smoothed by `eps`.
pub fn smoothed_prob(chosen: usize, action: usize, eps: f64) -> f64 {
    if action == chosen {
        1.0 - eps
    } else {
        eps / (NUM_ACTIONS - 1) as f64
    }
}

/// `pi1 / max(pi0, floor)`.
pub fn importance_ratio(pi1: f64, pi0: f64) -> f64 {
    pi1 / pi0.max(BEHAVIOR_FLOOR)
}

/// Per-step importance ratios and rewards of one logged trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedTrajectory {
    pub ratios: Vec<f64>,
    pub rewards: Vec<f64>,
}

impl WeightedTrajectory {
    pub fn cumulative_ratio(&self) -> f64 {
        self.ratios.iter().product()
    }

    pub fn discounted_return(&self, gamma: f64) -> f64 {
        let mut g = 0.0;
        let mut discount = 1.0;
        for r in &self.rewards {
            g += discount * r;
            discount *= gamma;
        }
        g
    }
}

/// Trajectory-wise weighted importance sampling: each trajectory's discounted
/// return is scaled by its cumulative ratio over the dataset-average cumulative
/// ratio, and the scaled returns are averaged.
pub fn wis(trajectories: &[WeightedTrajectory], gamma: f64) -> Result<f64> {
    let log_rho: Vec<f64> = trajectories
        .iter()
        .map(|t| t.ratios.iter().map(|r| r.ln()).sum())
        .collect();
    let returns: Vec<f64> = trajectories.iter().map(|t| t.discounted_return(gamma)).collect();
    wis_from_log_ratios(&log_rho, &returns)
}

/// [`wis`] from log cumulative ratios and discounted returns. The estimate
/// is invariant to a common scale of the ratios, so they are shifted by
/// their maximum first and long products cannot underflow to zero.
pub fn wis_from_log_ratios(log_rho: &[f64], returns: &[f64]) -> Result<f64> {
    if log_rho.is_empty() {
        return Err(DacError::validation("WIS needs at least one trajectory"));
    }
    if log_rho.len() != returns.len() {
        return Err(DacError::validation("one return per trajectory expected"));
    }
    let top = log_rho.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return Err(DacError::Numerical(format!("largest log cumulative ratio {top}")));
    }
    let rho: Vec<f64> = log_rho.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = rho.iter().sum();
    Ok(rho.iter().zip(returns).map(|(r, g)| r * g).sum::<f64>() / total)
}

/// Fraction of steps with all three settings right, and with each setting right.
pub fn acc_metrics(recommended: &[ActionTriple], oracle: &[ActionTriple]) -> Result<(f64, f64)> {
    if recommended.len() != oracle.len() {
        return Err(DacError::validation(format!(
            "{} recommendations for {} oracle actions",
            recommended.len(),
            oracle.len()
        )));
    }
    if oracle.is_empty() {
        return Err(DacError::validation("no oracle actions to compare against"));
    }
    let mut all3 = 0usize;
    let mut each = 0usize;
    for (r, o) in recommended.iter().zip(oracle) {
        let hits = r.levels().iter().zip(o.levels()).filter(|(a, b)| **a == *b).count();
        each += hits;
        all3 += usize::from(hits == 3);
    }
    let n = oracle.len() as f64;
    Ok((all3 as f64 / n, each as f64 / (3.0 * n)))
}

pub const CALIBRATION_BIN_WIDTH: f64 = 0.02;
pub const CALIBRATION_MIN_COUNT: usize = 20;

/// Piecewise-linear map from predicted risk to observed mortality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    /// Interval `[lo, hi)` of each (possibly merged) bin.
    pub edges: Vec<(f64, f64)>,
    /// Bin centres, increasing.
    pub centers: Vec<f64>,
    /// Observed mortality per bin.
    pub rates: Vec<f64>,
    pub counts: Vec<usize>,
}

impl CalibrationCurve {
    /// Build directly from `(center, rate)` points.
    pub fn from_points(points: &[(f64, f64)]) -> Result<Self> {
        if points.is_empty() || points.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(DacError::validation("calibration points must be non-empty and increasing"));
        }
        Ok(Self {
            edges: points.iter().map(|&(c, _)| (c, c)).collect(),
            centers: points.iter().map(|p| p.0).collect(),
            rates: points.iter().map(|p| p.1).collect(),
            counts: vec![0; points.len()],
        })
    }

    /// Fixed-width bins on `[0, 1]`; bins holding fewer than `min_count`
    /// samples are merged with their right neighbour (the last with its left).
    pub fn fit(predicted: &[f64], died: &[bool], width: f64, min_count: usize) -> Result<Self> {
        if predicted.len() != died.len() || predicted.is_empty() {
            return Err(DacError::validation("calibration needs equal, non-empty inputs"));
        }
        let deaths = died.iter().filter(|&&d| d).count();
        if deaths == 0 || deaths == died.len() {
            return Err(DacError::validation("calibration set has a single outcome class"));
        }
        if predicted.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(DacError::validation("predicted risks must lie in [0, 1]"));
        }
        let nbins = (1.0 / width).round() as usize;
        let mut count = vec![0usize; nbins];
        let mut dead = vec![0usize; nbins];
        for (&p, &d) in predicted.iter().zip(died) {
            let b = ((p / width) as usize).min(nbins - 1);
            count[b] += 1;
            dead[b] += usize::from(d);
        }
        // groups of consecutive bins: (first bin, last bin, count, deaths)
        let mut groups: Vec<(usize, usize, usize, usize)> = Vec::new();
        let mut open: Option<(usize, usize, usize, usize)> = None;
        for b in 0..nbins {
            let g = open.get_or_insert((b, b, 0, 0));
            g.1 = b;
            g.2 += count[b];
            g.3 += dead[b];
            if g.2 >= min_count {
                groups.push(open.take().expect("group is open"));
            }
        }
        if let Some(rest) = open {
            match groups.last_mut() {
                Some(last) => {
                    last.1 = rest.1;
                    last.2 += rest.2;
                    last.3 += rest.3;
                }
                None => groups.push(rest),
            }
        }
        // the first group absorbs any empty leading bins, the last any trailing ones
        let edges: Vec<(f64, f64)> = groups
            .iter()
            .map(|g| (g.0 as f64 * width, (g.1 + 1) as f64 * width))
            .collect();
        Ok(Self {
            centers: edges.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect(),
            edges,
            rates: groups.iter().map(|g| g.3 as f64 / g.2 as f64).collect(),
            counts: groups.iter().map(|g| g.2).collect(),
        })
    }

    /// Mortality at `risk`: linear between neighbouring centres, flat beyond the ends.
    pub fn eval(&self, risk: f64) -> f64 {
        let c = &self.centers;
        if risk <= c[0] {
            return self.rates[0];
        }
        if risk >= c[c.len() - 1] {
            return self.rates[c.len() - 1];
        }
        let i = c.partition_point(|&x| x <= risk);
        let (x0, x1) = (c[i - 1], c[i]);
        let (y0, y1) = (self.rates[i - 1], self.rates[i]);
        y0 + (y1 - y0) * (risk - x0) / (x1 - x0)
    }
}

/// Mean calibrated mortality of the predicted risks of a policy's actions.
pub fn estimated_mortality(policy_risks: &[f64], curve: &CalibrationCurve) -> Result<f64> {
    if policy_risks.is_empty() {
        return Err(DacError::validation("no states to estimate mortality on"));
    }
    Ok(policy_risks.iter().map(|&r| curve.eval(r)).sum::<f64>() / policy_risks.len() as f64)
}

/// Per-setting marginal histograms over the 7 levels; each row sums to 1.
pub fn action_histograms(actions: &[ActionTriple]) -> [[f64; LEVELS as usize]; 3] {
    let mut h = [[0.0; LEVELS as usize]; 3];
    for a in actions {
        for (p, l) in a.levels().iter().enumerate() {
            h[p][usize::from(*l) - 1] += 1.0;
        }
    }
    let n = actions.len().max(1) as f64;
    for row in &mut h {
        for x in row.iter_mut() {
            *x /= n;
        }
    }
    h
}

/// Steps and mortality per recommended-minus-actual level difference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseDifferenceCurve {
    /// Offsets `-6..=6`.
    pub offsets: Vec<i32>,
    pub counts: Vec<usize>,
    /// Fraction of those steps belonging to patients who died (`None` if empty).
    pub mortality: Vec<Option<f64>>,
}

pub fn dose_difference(
    recommended: &[ActionTriple],
    actual: &[ActionTriple],
    died: &[bool],
    setting: usize,
) -> Result<DoseDifferenceCurve> {
    if recommended.len() != actual.len() || actual.len() != died.len() {
        return Err(DacError::validation("dose-difference inputs differ in length"));
    }
    let span = i32::from(LEVELS) - 1;
    let width = (2 * span + 1) as usize;
    let mut counts = vec![0usize; width];
    let mut deaths = vec![0usize; width];
    for ((r, a), &d) in recommended.iter().zip(actual).zip(died) {
        let diff = i32::from(r.levels()[setting]) - i32::from(a.levels()[setting]);
        let b = (diff + span) as usize;
        counts[b] += 1;
        deaths[b] += usize::from(d);
    }
    Ok(DoseDifferenceCurve {
        offsets: (-span..=span).collect(),
        mortality: counts
            .iter()
            .zip(&deaths)
            .map(|(&c, &d)| (c > 0).then(|| d as f64 / c as f64))
            .collect(),
        counts,
    })
}

/// Mortality by decile of expected return.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnCurve {
    pub mean_return: Vec<f64>,
    pub mortality: Vec<f64>,
    pub counts: Vec<usize>,
}

pub fn return_vs_mortality(returns: &[f64], died: &[bool], groups: usize) -> Result<ReturnCurve> {
    if returns.len() != died.len() || returns.len() < groups || groups == 0 {
        return Err(DacError::validation("need at least one sample per return group"));
    }
    let mut idx: Vec<usize> = (0..returns.len()).collect();
    idx.sort_by(|&a, &b| returns[a].total_cmp(&returns[b]).then(a.cmp(&b)));
    let n = idx.len();
    let mut curve = ReturnCurve {
        mean_return: Vec::new(),
        mortality: Vec::new(),
        counts: Vec::new(),
    };
    for g in 0..groups {
        let part = &idx[g * n / groups..(g + 1) * n / groups];
        let m = part.len() as f64;
        curve.mean_return.push(part.iter().map(|&i| returns[i]).sum::<f64>() / m);
        curve.mortality.push(part.iter().filter(|&&i| died[i]).count() as f64 / m);
        curve.counts.push(part.len());
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn traj(ratios: &[f64], rewards: &[f64]) -> WeightedTrajectory {
        WeightedTrajectory {
            ratios: ratios.to_vec(),
            rewards: rewards.to_vec(),
        }
    }

    #[test]
    fn wis_survives_tiny_ratio_products() {
        let d = [traj(&[1e-200, 1e-200], &[0.0, 15.0]), traj(&[3e-200, 1e-200], &[0.0, -15.0])];
        let expect = (15.0 - 3.0 * 15.0) * 0.99 / 4.0;
        assert!((wis(&d, 0.99).unwrap() - expect).abs() < 1e-9);
        assert!(wis(&[traj(&[0.0], &[15.0])], 0.99).is_err());
    }

    #[test]
    fn wis_worked_example() {
        let d = [traj(&[2.0], &[15.0]), traj(&[0.5], &[-15.0])];
        assert!((wis(&d, 0.99).unwrap() - 9.0).abs() < 1e-12);
        assert!(wis(&[], 0.99).is_err());
    }

    #[test]
    fn wis_of_one_trajectory_is_its_return() {
        let t = traj(&[3.0, 0.2, 7.0], &[0.0, 0.0, -15.0]);
        let g = t.discounted_return(0.9);
        assert!((wis(&[t], 0.9).unwrap() - g).abs() < 1e-12);
        assert!((g + 15.0 * 0.81).abs() < 1e-12);
    }

    #[test]
    fn wis_with_unit_ratios_is_average_return() {
        let d = [traj(&[1.0; 2], &[0.0, 15.0]), traj(&[1.0; 2], &[0.0, -15.0]), traj(&[1.0; 2], &[0.0, 15.0])];
        let avg = (15.0 * 0.99) / 3.0;
        assert!((wis(&d, 0.99).unwrap() - avg).abs() < 1e-12);
    }

    #[test]
    fn smoothing_sums_to_one() {
        let total: f64 = (0..NUM_ACTIONS).map(|a| smoothed_prob(17, a, SMOOTHING)).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(smoothed_prob(17, 17, SMOOTHING), 0.99);
        assert_eq!(importance_ratio(0.5, 0.0), 0.5 / BEHAVIOR_FLOOR);
    }

    fn triple(l: [u8; 3]) -> ActionTriple {
        ActionTriple::new(l[0], l[1], l[2]).unwrap()
    }

    #[test]
    fn acc_examples() {
        let o = vec![triple([1, 2, 3]), triple([7, 7, 7])];
        assert_eq!(acc_metrics(&o, &o).unwrap(), (1.0, 1.0));
        let r = vec![triple([1, 3, 4]), triple([7, 1, 1])];
        let (a3, a1) = acc_metrics(&r, &o).unwrap();
        assert_eq!(a3, 0.0);
        assert!((a1 - 1.0 / 3.0).abs() < 1e-15);
        assert!(acc_metrics(&r, &[]).is_err());
    }

    proptest! {
        #[test]
        fn acc3_never_exceeds_acc1(pairs in prop::collection::vec((0usize..343, 0usize..343), 1..50)) {
            let r: Vec<ActionTriple> = pairs.iter().map(|p| ActionTriple::from_flat_index(p.0).unwrap()).collect();
            let o: Vec<ActionTriple> = pairs.iter().map(|p| ActionTriple::from_flat_index(p.1).unwrap()).collect();
            let (a3, a1) = acc_metrics(&r, &o).unwrap();
            prop_assert!(a3 <= a1 && (0.0..=1.0).contains(&a1));
        }

        #[test]
        fn calibration_stays_in_unit_interval(v in prop::collection::vec((0.0f64..=1.0, any::<bool>()), 2..300), q in 0.0f64..=1.0) {
            prop_assume!(v.iter().any(|x| x.1) && v.iter().any(|x| !x.1));
            let (p, d): (Vec<f64>, Vec<bool>) = v.into_iter().unzip();
            let c = CalibrationCurve::fit(&p, &d, CALIBRATION_BIN_WIDTH, CALIBRATION_MIN_COUNT).unwrap();
            prop_assert!((0.0..=1.0).contains(&c.eval(q)));
            prop_assert_eq!(c.counts.iter().sum::<usize>(), p.len());
            prop_assert!(c.counts.len() == 1 || c.counts.iter().all(|&n| n >= CALIBRATION_MIN_COUNT));
        }

        #[test]
        fn raising_the_curve_raises_em(risks in prop::collection::vec(0.0f64..1.0, 1..40), bump in 0.0f64..0.3) {
            let lo = CalibrationCurve::from_points(&[(0.1, 0.2), (0.5, 0.3), (0.9, 0.6)]).unwrap();
            let hi = CalibrationCurve::from_points(&[(0.1, 0.2 + bump), (0.5, 0.3 + bump), (0.9, 0.6)]).unwrap();
            prop_assert!(estimated_mortality(&risks, &hi).unwrap() >= estimated_mortality(&risks, &lo).unwrap());
        }
    }

    #[test]
    fn interpolation_by_hand() {
        let c = CalibrationCurve::from_points(&[(0.1, 0.2), (0.5, 0.6)]).unwrap();
        assert!((c.eval(0.3) - 0.4).abs() < 1e-12);
        assert_eq!(c.eval(0.0), 0.2);
        assert_eq!(c.eval(0.95), 0.6);
        let c = CalibrationCurve::from_points(&[(0.5, 0.6)]).unwrap();
        assert!((estimated_mortality(&[0.5; 10], &c).unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn calibrated_risks_give_identity_curve() {
        // 100 samples at each bin centre with mortality equal to the centre
        let mut p = Vec::new();
        let mut d = Vec::new();
        for b in 0..50 {
            let c = 0.01 + 0.02 * b as f64;
            let deaths = (c * 100.0).round() as usize;
            for i in 0..100 {
                p.push(c);
                d.push(i < deaths);
            }
        }
        let curve = CalibrationCurve::fit(&p, &d, CALIBRATION_BIN_WIDTH, CALIBRATION_MIN_COUNT).unwrap();
        assert_eq!(curve.centers.len(), 50);
        for q in [0.05, 0.33, 0.5, 0.81] {
            assert!((curve.eval(q) - q).abs() <= 0.01, "{q} -> {}", curve.eval(q));
        }
        // identity curve: EM is the mean risk
        let risks = [0.11, 0.31, 0.71];
        let em = estimated_mortality(&risks, &curve).unwrap();
        assert!((em - risks.iter().sum::<f64>() / 3.0).abs() <= 0.01);
    }

    #[test]
    fn sparse_bins_are_merged() {
        let p: Vec<f64> = (0..30).map(|i| 0.105 + 0.001 * f64::from(i % 3)).chain((0..30).map(|_| 0.5)).collect();
        let d: Vec<bool> = (0..60).map(|i| i % 2 == 0).collect();
        let c = CalibrationCurve::fit(&p, &d, 0.02, 20).unwrap();
        assert_eq!(c.counts, vec![30, 30]);
        assert!(CalibrationCurve::fit(&p, &[false; 60], 0.02, 20).is_err());
    }

    #[test]
    fn histograms_and_dose_differences() {
        let actual = vec![triple([3, 4, 2]), triple([1, 1, 1]), triple([5, 5, 5]), triple([2, 2, 2])];
        let h = action_histograms(&actual);
        assert!(h.iter().all(|row| (row.iter().sum::<f64>() - 1.0).abs() < 1e-9));
        assert_eq!(action_histograms(&actual), h);
        // vt differences {-1, 0, 0, +2}
        let rec = vec![triple([2, 4, 2]), triple([1, 1, 1]), triple([5, 5, 5]), triple([4, 2, 2])];
        let died = [true, false, true, false];
        let c = dose_difference(&rec, &actual, &died, 0).unwrap();
        let at = |o: i32| c.counts[(o + 6) as usize];
        assert_eq!((at(-1), at(0), at(2)), (1, 2, 1));
        assert_eq!(c.counts.iter().sum::<usize>(), 4);
        assert_eq!(c.mortality[6], Some(0.5));
        let same = dose_difference(&actual, &actual, &died, 2).unwrap();
        assert_eq!(same.counts[6], 4);
    }

    #[test]
    fn return_deciles() {
        let returns: Vec<f64> = (0..100).map(f64::from).collect();
        let died: Vec<bool> = (0..100).map(|i| i < 30).collect();
        let c = return_vs_mortality(&returns, &died, 10).unwrap();
        assert_eq!(c.counts, vec![10; 10]);
        assert_eq!(&c.mortality[..4], &[1.0, 1.0, 1.0, 0.0]);
        assert!((c.mean_return[0] - 4.5).abs() < 1e-12);
    }
}
