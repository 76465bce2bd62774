// SPDX-License-Identifier: MIT OR Apache-2.0

//! Ordinary least squares with an intercept, solved by Householder QR on the
//! column-centered design.
//!
//! Centering separates the intercept from the slopes (Frisch-Waugh), so the
//! slope block of `(XᵀX)⁻¹` is `R⁻¹R⁻ᵀ` of the centered QR and the intercept
//! variance is `σ²(1/n + x̄ᵀR⁻¹R⁻ᵀx̄)`.

use nalgebra::{DMatrix, DVector};
use ndarray::ArrayView2;

use super::stats::t_two_sided_p;
use super::EncodingFit;
use crate::error::{Error, Result};

/// Relative threshold on `|R_jj| / max |R_ii|` below which the design is
/// treated as rank deficient.
pub const RANK_TOL: f64 = 1e-10;

pub fn ols_fit(targets: &[f64], features: ArrayView2<'_, f64>) -> Result<EncodingFit> {
    let (n, d) = features.dim();
    if targets.len() != n {
        return Err(Error::Shape(format!(
            "{} targets for {n} feature rows",
            targets.len()
        )));
    }
    if d == 0 {
        return Err(Error::Shape("design has no feature columns".into()));
    }
    if n < d + 2 {
        return Err(Error::RankDeficient(format!(
            "need at least d + 2 = {} observations, got {n}",
            d + 2
        )));
    }
    if targets.iter().any(|v| !v.is_finite()) || features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invariant("non-finite value in regression input".into()));
    }

    let nf = n as f64;
    let y_mean = targets.iter().sum::<f64>() / nf;
    let x_mean: Vec<f64> = features
        .columns()
        .into_iter()
        .map(|c| c.sum() / nf)
        .collect();
    let xc = DMatrix::from_fn(n, d, |i, j| features[[i, j]] - x_mean[j]);
    let yc = DVector::from_iterator(n, targets.iter().map(|y| y - y_mean));

    let qr = xc.clone().qr();
    let r = qr.r();
    let r_max = (0..d).map(|j| r[(j, j)].abs()).fold(0.0, f64::max);
    for j in 0..d {
        if r[(j, j)].abs() <= RANK_TOL * r_max || r_max == 0.0 {
            return Err(Error::RankDeficient(format!(
                "feature column {j} is (nearly) a linear combination of the others or constant"
            )));
        }
    }

    let mut qty = yc.clone();
    qr.q_tr_mul(&mut qty);
    let qty = qty.rows(0, d).into_owned();
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::RankDeficient("singular triangular factor".into()))?;

    let resid = &yc - &xc * &beta;
    let rss = resid.norm_squared();
    let tss = yc.norm_squared();
    let dof = n - d - 1;
    let r2 = if tss > 0.0 { 1.0 - rss / tss } else { 0.0 };
    let adj_r2 = 1.0 - (1.0 - r2) * (nf - 1.0) / dof as f64;
    let sigma2 = rss / dof as f64;

    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(d, d))
        .ok_or_else(|| Error::RankDeficient("singular triangular factor".into()))?;
    // diag(R⁻¹R⁻ᵀ)_j is the squared norm of row j of R⁻¹
    let mut std_errors = Vec::with_capacity(d);
    let mut p_values = Vec::with_capacity(d);
    for j in 0..d {
        let v = r_inv.row(j).norm_squared();
        let se = (sigma2 * v).sqrt();
        std_errors.push(se);
        p_values.push(p_value(beta[j], se, dof));
    }

    let xbar = DVector::from_column_slice(&x_mean);
    let intercept = y_mean - xbar.dot(&beta);
    let intercept_se = (sigma2 * (1.0 / nf + (r_inv.transpose() * &xbar).norm_squared())).sqrt();

    Ok(EncodingFit {
        direction: beta.iter().copied().collect(),
        intercept,
        p_values,
        std_errors,
        intercept_p_value: p_value(intercept, intercept_se, dof),
        r2,
        adj_r2,
        dof,
        n_obs: n,
        residual_variance: sigma2,
        floor: None,
    })
}

fn p_value(coef: f64, se: f64, dof: usize) -> f64 {
    if se > 0.0 {
        t_two_sided_p(coef / se, dof as f64)
    } else if coef == 0.0 {
        1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_design(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, d), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn exact_linear_targets_recover_slopes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_design(&mut rng, 40, 4);
        let truth = [1.5, -2.0, 0.25, 3.0];
        let y: Vec<f64> = x
            .rows()
            .into_iter()
            .map(|r| 0.7 + r.iter().zip(&truth).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let fit = ols_fit(&y, x.view()).unwrap();
        for (b, t) in fit.direction.iter().zip(&truth) {
            assert!((b - t).abs() < 1e-10);
        }
        assert!((fit.intercept - 0.7).abs() < 1e-10);
        assert!((fit.adj_r2 - 1.0).abs() < 1e-12);
        assert!(fit.p_values.iter().all(|p| *p < 1e-6));
    }

    #[test]
    fn constant_targets_give_zero_slopes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_design(&mut rng, 30, 3);
        let fit = ols_fit(&[4.2; 30], x.view()).unwrap();
        assert!(fit.direction.iter().all(|b| b.abs() < 1e-8));
        assert!(fit.adj_r2 <= 0.0);
        assert!(fit.p_values.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn rejects_small_or_singular_designs() {
        let x = Array2::from_shape_fn((4, 3), |(i, j)| (i * 3 + j) as f64);
        assert!(matches!(
            ols_fit(&[1.0; 4], x.view()),
            Err(Error::RankDeficient(_))
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut x = random_design(&mut rng, 20, 3);
        let c0 = x.column(0).to_owned();
        x.column_mut(2).assign(&(&c0 * 2.0));
        let y: Vec<f64> = (0..20).map(|i| i as f64).collect();
        assert!(matches!(ols_fit(&y, x.view()), Err(Error::RankDeficient(_))));
        let mut x = random_design(&mut rng, 20, 2);
        x.column_mut(1).fill(3.0);
        assert!(matches!(ols_fit(&y, x.view()), Err(Error::RankDeficient(_))));
    }
}
