//! Small statistical tests used by the resampler audit, the acceptance suite
//! and the evaluation reports.

use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, DiscreteCDF};

use crate::error::{DacError, Result};

/// Two-sample Kolmogorov-Smirnov statistic `sup |F_a - F_b|`.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(DacError::validation("KS statistic needs two non-empty samples"));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        // advance past every copy of the smaller value so ties move together
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}

/// Area under the ROC curve by the rank-sum formula; tied scores count one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(DacError::validation("scores and labels differ in length"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(DacError::validation("AUROC needs both classes"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&x, &y| scores[x].total_cmp(&scores[y]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * mid_rank;
        i = j + 1;
    }
    let pos = pos as f64;
    Ok((rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg as f64))
}

/// Pearson chi-square test of independence on a contingency table. Rows and
/// columns with zero total are dropped. Returns `(statistic, dof, p_value)`.
pub fn chi_square_independence(table: &[Vec<u64>]) -> Result<(f64, usize, f64)> {
    let cols = table.first().map_or(0, Vec::len);
    if table.iter().any(|r| r.len() != cols) {
        return Err(DacError::validation("ragged contingency table"));
    }
    let row_tot: Vec<f64> = table.iter().map(|r| r.iter().sum::<u64>() as f64).collect();
    let col_tot: Vec<f64> = (0..cols)
        .map(|c| table.iter().map(|r| r[c]).sum::<u64>() as f64)
        .collect();
    let n: f64 = row_tot.iter().sum();
    let rows_kept = row_tot.iter().filter(|&&x| x > 0.0).count();
    let cols_kept = col_tot.iter().filter(|&&x| x > 0.0).count();
    if rows_kept < 2 || cols_kept < 2 {
        // a single non-empty row or column carries no evidence against independence
        return Ok((0.0, 0, 1.0));
    }
    let mut stat = 0.0;
    for (r, row) in table.iter().enumerate() {
        for (c, &obs) in row.iter().enumerate() {
            let expected = row_tot[r] * col_tot[c] / n;
            if expected > 0.0 {
                stat += (obs as f64 - expected).powi(2) / expected;
            }
        }
    }
    let dof = (rows_kept - 1) * (cols_kept - 1);
    let dist = ChiSquared::new(dof as f64).map_err(|e| DacError::Numerical(e.to_string()))?;
    Ok((stat, dof, dist.sf(stat)))
}

/// One-sided sign test: probability of at least `successes` out of `trials`
/// under a fair coin.
pub fn sign_test_p(successes: u64, trials: u64) -> Result<f64> {
    if successes > trials || trials == 0 {
        return Err(DacError::validation("sign test needs 0 <= successes <= trials, trials > 0"));
    }
    if successes == 0 {
        return Ok(1.0);
    }
    let dist = Binomial::new(0.5, trials).map_err(|e| DacError::Numerical(e.to_string()))?;
    Ok(dist.sf(successes - 1))
}

/// Total-variation distance between two probability vectors.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}
