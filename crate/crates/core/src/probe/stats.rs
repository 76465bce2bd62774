// SPDX-License-Identifier: MIT OR Apache-2.0

//! Rank correlation, divergences and the mean-of-log approximation bound.

use crate::error::{Error, Result};

/// Two-sided tail probability of Student's t with `dof` degrees of freedom,
/// `P(|T| >= |t|)`, via the regularized incomplete beta function.
pub fn t_two_sided_p(t: f64, dof: f64) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    if t.is_infinite() {
        return 0.0;
    }
    let x = dof / (dof + t * t);
    statrs::function::beta::beta_reg(dof / 2.0, 0.5, x).clamp(0.0, 1.0)
}

/// Fractional ranks starting at 1, averaging tied values.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // positions i..j share the mean of ranks i+1..=j
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

/// Pearson correlation. Errors when either input has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!(
            "correlation inputs of length {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::Degenerate("zero variance in correlation input".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with average ranks on ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!(
            "spearman inputs of length {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 3 {
        return Err(Error::Degenerate(format!(
            "spearman needs at least 3 points, got {}",
            x.len()
        )));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(Error::Degenerate("NaN in spearman input".into()));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// `KL(p || q)` in nats. Entries of `q` below `floor` are raised to `floor`
/// where `p` has mass; terms with `p = 0` contribute nothing.
pub fn kl_divergence(p: &[f64], q: &[f64], floor: f64) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.max(floor).ln()))
        .sum::<f64>()
        .max(0.0)
}

/// Jensen-Shannon divergence in bits, so the result lies in [0, 1].
pub fn js_divergence_bits(p: &[f64], q: &[f64]) -> f64 {
    let mut js = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            js += 0.5 * a * (a / m).log2();
        }
        if b > 0.0 {
            js += 0.5 * b * (b / m).log2();
        }
    }
    js.clamp(0.0, 1.0)
}

/// Squared gap between log-of-mean and mean-of-log for positive samples,
/// together with the bound `(mean - p0)^2 / p0^2` where `p0` is the minimum.
///
/// Returns `(actual_sq_error, bound)`.
pub fn approx_error_bound(probs: &[f64]) -> Result<(f64, f64)> {
    if probs.is_empty() {
        return Err(Error::Degenerate("empty probability sample".into()));
    }
    if let Some(p) = probs.iter().find(|p| !(**p > 0.0) || !p.is_finite()) {
        return Err(Error::Invariant(format!(
            "approximation bound needs positive finite values, got {p}"
        )));
    }
    let n = probs.len() as f64;
    let mean = probs.iter().sum::<f64>() / n;
    let mean_log = probs.iter().map(|p| p.ln()).sum::<f64>() / n;
    let p0 = probs.iter().copied().fold(f64::INFINITY, f64::min);
    let gap = mean.ln() - mean_log;
    let actual = gap * gap;
    let bound = ((mean - p0) / p0).powi(2);
    Ok((actual, bound))
}

#[cfg(test)]
mod tests {
    use super::*;

    // Independent rank-then-Pearson: ranks by counting, no sorting.
    fn oracle_spearman(x: &[f64], y: &[f64]) -> f64 {
        let rank = |v: &[f64]| -> Vec<f64> {
            v.iter()
                .map(|&a| {
                    let less = v.iter().filter(|&&b| b < a).count() as f64;
                    let equal = v.iter().filter(|&&b| b == a).count() as f64;
                    less + (equal + 1.0) / 2.0
                })
                .collect()
        };
        let (rx, ry) = (rank(x), rank(y));
        let n = rx.len() as f64;
        let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
        let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    }

    #[test]
    fn spearman_monotone_and_antitone() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y = [0.1, 0.5, 2.0, 7.0, 100.0];
        assert!((spearman(&x, &y).unwrap() - 1.0).abs() < 1e-15);
        let rev: Vec<f64> = y.iter().rev().copied().collect();
        assert!((spearman(&x, &rev).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn spearman_with_ties_matches_oracle() {
        let x = [1.0, 2.0, 2.0, 4.0];
        let y = [10.0, 20.0, 30.0, 40.0];
        let got = spearman(&x, &y).unwrap();
        assert!((got - oracle_spearman(&x, &y)).abs() < 1e-12);
        // ranks (1, 2.5, 2.5, 4) vs (1,2,3,4): r = 4.5 / sqrt(4.5 * 5)
        assert!((got - (4.5f64 / (4.5f64 * 5.0).sqrt())).abs() < 1e-12);
    }

    #[test]
    fn spearman_rejects_constant_and_short_inputs() {
        assert!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(spearman(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn t_p_values_match_reference() {
        // Reference values from scipy.stats.t.sf(|t|, dof) * 2.
        let cases = [
            (2.0, 10.0, 0.073_388_034_770_740_39),
            (0.5, 3.0, 0.651_447_964_848_151),
            (4.0, 191.0, 9.050_286_514_498_984e-5),
            (-1.3, 25.0, 0.205_459_720_367_625_75),
            (8.0, 191.0, 1.171_272_484_279_333_8e-13),
        ];
        for (t, dof, expected) in cases {
            let p = t_two_sided_p(t, dof);
            assert!((p - expected).abs() < 1e-10, "t={t} dof={dof}: {p} vs {expected}");
        }
        assert_eq!(t_two_sided_p(0.0, 5.0), 1.0);
        assert_eq!(t_two_sided_p(f64::INFINITY, 5.0), 0.0);
    }

    #[test]
    fn approx_bound_degenerate_and_hand_case() {
        let (a, b) = approx_error_bound(&[0.3, 0.3, 0.3]).unwrap();
        assert!(a.abs() < 1e-30 && b.abs() < 1e-30);

        let (a, b) = approx_error_bound(&[0.1, 0.2]).unwrap();
        // 50-digit evaluation of (ln 0.15 - (ln 0.1 + ln 0.2) / 2)^2
        assert!((a - 0.003_468_210_872_108_224).abs() < 1e-15);
        assert!((b - 0.25).abs() < 1e-12);
        assert!(a <= b);
        assert!(approx_error_bound(&[0.1, 0.0]).is_err());
    }

    #[test]
    fn kl_and_js_basics() {
        let p = [0.5, 0.5];
        assert_eq!(kl_divergence(&p, &p, 1e-12), 0.0);
        assert!(js_divergence_bits(&[1.0, 0.0], &[0.0, 1.0]) > 0.999_999);
        assert_eq!(js_divergence_bits(&p, &p), 0.0);
    }
}
