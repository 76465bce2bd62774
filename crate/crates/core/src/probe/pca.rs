// SPDX-License-Identifier: MIT OR Apache-2.0

//! Principal components of an embedding matrix (columns mean-centered).

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::store::EmbeddingMatrix;

#[derive(Debug, Clone)]
pub struct Pca {
    /// k×d, one orthonormal component per row, ordered by explained variance.
    pub components: Array2<f64>,
    /// Share of total variance carried by each returned component.
    pub variance_ratio: Vec<f64>,
    /// |V|×k projections of the centered rows onto the components.
    pub scores: Array2<f64>,
    /// Column means subtracted before decomposition.
    pub mean: Vec<f64>,
}

pub fn pca(emb: &EmbeddingMatrix, k: usize) -> Result<Pca> {
    let (n, d) = (emb.rows(), emb.cols());
    if k == 0 || k > n.min(d) {
        return Err(Error::OutOfRange {
            index: k,
            len: n.min(d) + 1,
        });
    }
    let mean = emb
        .data()
        .mean_axis(Axis(0))
        .expect("matrix has at least one row");
    let centered = emb.data() - &mean;
    let cov = centered.t().dot(&centered);
    let cov = DMatrix::from_fn(d, d, |i, j| 0.5 * (cov[[i, j]] + cov[[j, i]]));
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    if total <= 0.0 {
        return Err(Error::Degenerate("embedding has zero variance".into()));
    }

    let mut components = Array2::zeros((k, d));
    let mut variance_ratio = Vec::with_capacity(k);
    for (row, &idx) in order.iter().take(k).enumerate() {
        let v = eig.eigenvectors.column(idx);
        // sign: largest-magnitude entry positive, earliest index on ties
        let pivot = (0..d).fold(0, |best, j| if v[j].abs() > v[best].abs() { j } else { best });
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..d {
            components[[row, j]] = sign * v[j];
        }
        variance_ratio.push(eig.eigenvalues[idx].max(0.0) / total);
    }
    let scores = centered.dot(&components.t());
    Ok(Pca {
        components,
        variance_ratio,
        scores,
        mean: mean.to_vec(),
    })
}
