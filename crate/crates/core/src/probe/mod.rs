// SPDX-License-Identifier: MIT OR Apache-2.0

//! Averaged output probabilities, the log-linear encoding fit against the
//! output embedding, and the sparsity analyses built on top of it.
//!
//! The encoding model is `-log α_w ≈ A · E_w + B`, where `α` is the averaged
//! next-token distribution over a detect dataset and `E_w` is the output
//! embedding row of token `w`. [`fit_encoding`] estimates `A` (the
//! *direction*) and `B` by least squares and attaches per-coefficient
//! significance.

mod ols;
mod pca;
pub mod stats;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use ols::{ols_fit, RANK_TOL};
pub use pca::{pca, Pca};
pub use stats::{approx_error_bound, spearman};

use crate::error::{Error, Result};
use crate::store::{EmbeddingMatrix, ProbStats};

/// Probability floor applied before taking `-log α`.
pub const DEFAULT_FLOOR: f64 = 1e-12;

/// Least-squares fit of the log-linear encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodingFit {
    /// Slope per embedding dimension (the encoding direction).
    pub direction: Vec<f64>,
    pub intercept: f64,
    /// Two-sided t-test p-value per slope.
    pub p_values: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub intercept_p_value: f64,
    pub r2: f64,
    pub adj_r2: f64,
    /// Residual degrees of freedom, `n - d - 1`.
    pub dof: usize,
    pub n_obs: usize,
    /// Unbiased residual variance `RSS / dof`.
    pub residual_variance: f64,
    /// Probability floor used to build the targets, when fitted from `α`.
    #[serde(default)]
    pub floor: Option<f64>,
}

impl EncodingFit {
    pub fn dims(&self) -> usize {
        self.direction.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.direction.len();
        if d == 0 || self.p_values.len() != d || self.std_errors.len() != d {
            return Err(Error::Invariant("fit vectors have inconsistent lengths".into()));
        }
        if self.dof < 1 {
            return Err(Error::Invariant("fit needs at least one residual dof".into()));
        }
        if self
            .p_values
            .iter()
            .chain([&self.intercept_p_value])
            .any(|p| !(0.0..=1.0).contains(p))
        {
            return Err(Error::Invariant("p-value outside [0, 1]".into()));
        }
        if !(self.adj_r2 <= 1.0) {
            return Err(Error::Invariant(format!("adj_r2 {} > 1", self.adj_r2)));
        }
        let finite = self
            .direction
            .iter()
            .chain(&self.std_errors)
            .chain([&self.intercept, &self.r2, &self.adj_r2, &self.residual_variance])
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Invariant("non-finite value in fit".into()));
        }
        Ok(())
    }
}

/// Correlation structure between the embedding and `-log α`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    /// |Spearman| of each principal-component score vector against `-log α`.
    pub pc_spearman: Vec<f64>,
    pub pc_variance_ratio: Vec<f64>,
    /// |slope| of each original dimension in the encoding fit.
    pub dim_slopes: Vec<f64>,
    /// |Spearman| of each original embedding column against `-log α`.
    pub dim_spearman: Vec<f64>,
    /// PCA was run on mean-centered columns.
    pub pca_centered: bool,
    pub floor: f64,
}

/// `sum / positions`: the flat mean over every accumulated position.
pub fn finalize_avg_prob(stats: &ProbStats) -> Result<Vec<f64>> {
    stats.validate()?;
    let n = stats.positions as f64;
    Ok(stats.sum.iter().map(|s| s / n).collect())
}

/// `-log(max(α, floor))` elementwise.
pub fn neg_log_targets(alpha: &[f64], floor: f64) -> Vec<f64> {
    alpha.iter().map(|a| -a.max(floor).ln()).collect()
}

pub fn fit_encoding(alpha: &[f64], emb: &EmbeddingMatrix, floor: f64) -> Result<EncodingFit> {
    check_alpha(alpha, emb, floor)?;
    let mut fit = ols_fit(&neg_log_targets(alpha, floor), emb.view())?;
    fit.floor = Some(floor);
    Ok(fit)
}

fn check_alpha(alpha: &[f64], emb: &EmbeddingMatrix, floor: f64) -> Result<()> {
    if alpha.len() != emb.rows() {
        return Err(Error::Shape(format!(
            "alpha has {} entries, embedding has {} rows",
            alpha.len(),
            emb.rows()
        )));
    }
    if !(floor > 0.0) {
        return Err(Error::Invariant(format!("floor must be positive, got {floor}")));
    }
    Ok(())
}

fn abs_spearman_or_zero(x: &[f64], y: &[f64]) -> Result<f64> {
    match spearman(x, y) {
        Ok(r) => Ok(r.abs()),
        // a constant column carries no rank information
        Err(Error::Degenerate(_)) => Ok(0.0),
        Err(e) => Err(e),
    }
}

pub fn sparsity_report(
    alpha: &[f64],
    emb: &EmbeddingMatrix,
    floor: f64,
) -> Result<SparsityReport> {
    check_alpha(alpha, emb, floor)?;
    let targets = neg_log_targets(alpha, floor);
    let fit = fit_encoding(alpha, emb, floor)?;
    let k = emb.rows().min(emb.cols());
    let p = pca(emb, k)?;

    let pc_spearman = p
        .scores
        .columns()
        .into_iter()
        .map(|c| abs_spearman_or_zero(&c.to_vec(), &targets))
        .collect::<Result<Vec<_>>>()?;
    let dim_spearman = emb
        .data()
        .columns()
        .into_iter()
        .map(|c| abs_spearman_or_zero(&c.to_vec(), &targets))
        .collect::<Result<Vec<_>>>()?;
    Ok(SparsityReport {
        pc_spearman,
        pc_variance_ratio: p.variance_ratio,
        dim_slopes: fit.direction.iter().map(|v| v.abs()).collect(),
        dim_spearman,
        pca_centered: true,
        floor,
    })
}

/// Mean adjusted R² of `draws` seeded standard-normal target vectors
/// (normalized to unit length) regressed on the embedding: the chance level
/// of the encoding fit.
pub fn random_target_adj_r2(emb: &EmbeddingMatrix, draws: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..draws {
        let mut y: Vec<f64> = (0..emb.rows())
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        y.iter_mut().for_each(|v| *v /= norm);
        total += ols_fit(&y, emb.view())?.adj_r2;
    }
    Ok(total / draws as f64)
}

/// Two-component projection rows `(token, pc1, pc2, percentile of α)`, where
/// the percentile is the fraction of tokens with strictly smaller α plus half
/// the ties, in [0, 1].
pub fn pca_projection_2d(alpha: &[f64], emb: &EmbeddingMatrix) -> Result<Vec<(usize, f64, f64, f64)>> {
    if alpha.len() != emb.rows() {
        return Err(Error::Shape("alpha length differs from embedding rows".into()));
    }
    let k = 2.min(emb.rows().min(emb.cols()));
    let p = pca(emb, k)?;
    let ranks = stats::average_ranks(alpha);
    let n = alpha.len() as f64;
    Ok((0..emb.rows())
        .map(|i| {
            let pc2 = if k > 1 { p.scores[[i, 1]] } else { 0.0 };
            let pct = if n > 1.0 { (ranks[i] - 1.0) / (n - 1.0) } else { 0.5 };
            (i, p.scores[[i, 0]], pc2, pct)
        })
        .collect())
}

#[cfg(test)]
fn matrix_from_fn(rows: usize, cols: usize, f: impl FnMut((usize, usize)) -> f64) -> Result<EmbeddingMatrix> {
    EmbeddingMatrix::new(ndarray::Array2::from_shape_fn((rows, cols), f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn finalize_examples() {
        let s = ProbStats {
            sum: vec![0.2, 0.8],
            positions: 1,
        };
        assert_eq!(finalize_avg_prob(&s).unwrap(), vec![0.2, 0.8]);
        let mut s = ProbStats::new(2);
        s.add(&[1.0, 0.0]);
        s.add(&[0.0, 1.0]);
        assert_eq!(finalize_avg_prob(&s).unwrap(), vec![0.5, 0.5]);
        assert!(finalize_avg_prob(&ProbStats::new(2)).is_err());
    }

    #[test]
    fn finalize_matches_flattened_mean_over_ragged_sequences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let v = 5;
        let mut flat: Vec<Vec<f64>> = Vec::new();
        let mut stats = ProbStats::new(v);
        for len in [2usize, 3, 5] {
            let mut seq_stats = ProbStats::new(v);
            for _ in 0..len {
                let raw: Vec<f64> = (0..v).map(|_| rng.random::<f64>()).collect();
                let z: f64 = raw.iter().sum();
                let dist: Vec<f64> = raw.iter().map(|x| x / z).collect();
                seq_stats.add(&dist);
                flat.push(dist);
            }
            stats.merge(&seq_stats).unwrap();
        }
        let alpha = finalize_avg_prob(&stats).unwrap();
        assert_eq!(stats.positions, 10);
        for w in 0..v {
            let oracle = flat.iter().map(|d| d[w]).sum::<f64>() / flat.len() as f64;
            assert!((alpha[w] - oracle).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_alpha_gives_flat_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let emb = matrix_from_fn(40, 3, |_| rng.random::<f64>()).unwrap();
        let fit = fit_encoding(&[1.0 / 40.0; 40], &emb, DEFAULT_FLOOR).unwrap();
        assert!(fit.direction.iter().all(|b| b.abs() < 1e-8));
        assert_eq!(fit.floor, Some(DEFAULT_FLOOR));
    }

    #[test]
    fn fit_rejects_bad_inputs() {
        let emb = matrix_from_fn(10, 2, |(i, j)| (i * j) as f64 + i as f64).unwrap();
        assert!(fit_encoding(&[0.1; 9], &emb, 1e-12).is_err());
        assert!(fit_encoding(&[0.1; 10], &emb, 0.0).is_err());
    }

    #[test]
    fn planted_column_dominates_dim_spearman() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v = 200;
        let raw: Vec<f64> = (0..v).map(|_| rng.random::<f64>() + 0.01).collect();
        let z: f64 = raw.iter().sum();
        let alpha: Vec<f64> = raw.iter().map(|r| r / z).collect();
        let targets = neg_log_targets(&alpha, DEFAULT_FLOOR);
        let emb = matrix_from_fn(v, 4, |(i, j)| {
            if j == 0 {
                targets[i]
            } else {
                rng.random::<f64>() - 0.5
            }
        })
        .unwrap();
        let rep = sparsity_report(&alpha, &emb, DEFAULT_FLOOR).unwrap();
        assert!((rep.dim_spearman[0] - 1.0).abs() < 1e-12);
        assert!(rep.dim_spearman[1..].iter().all(|r| *r < 0.5));
        assert!((rep.pc_variance_ratio.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(rep.pc_spearman.iter().all(|r| (0.0..=1.0).contains(r)));
        assert!(rep.dim_slopes[0] > 0.99);
    }

    #[test]
    fn single_direction_embedding_has_pc_spearman_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let v = 60;
        let raw: Vec<f64> = (0..v).map(|_| rng.random::<f64>() + 0.01).collect();
        let z: f64 = raw.iter().sum();
        let alpha: Vec<f64> = raw.iter().map(|r| r / z).collect();
        let targets = neg_log_targets(&alpha, DEFAULT_FLOOR);
        let emb = matrix_from_fn(v, 1, |(i, _)| targets[i]).unwrap();
        let rep = sparsity_report(&alpha, &emb, DEFAULT_FLOOR).unwrap();
        assert!((rep.pc_spearman[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn projection_percentiles_span_unit_interval() {
        let alpha = [0.1, 0.4, 0.2, 0.3];
        let emb = matrix_from_fn(4, 3, |(i, j)| ((i + 1) * (j + 2)) as f64 + (i * i) as f64).unwrap();
        let rows = pca_projection_2d(&alpha, &emb).unwrap();
        assert_eq!(rows[0].3, 0.0);
        assert_eq!(rows[1].3, 1.0);
    }
}
