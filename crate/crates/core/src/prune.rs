// SPDX-License-Identifier: MIT OR Apache-2.0

//! Removal of output-embedding dimensions ranked by the magnitude of their
//! encoding slope, and the degradation curves of such removals.
//!
//! Dimensions are zeroed in place rather than dropped. For a model with a
//! biased head the bias column is ranked like any other dimension.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe::stats::{js_divergence_bits, kl_divergence};
use crate::probe::{EncodingFit, DEFAULT_FLOOR};
use crate::store::EmbeddingMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneOrder {
    /// Least salient first.
    Ascending,
    /// Most salient first.
    Descending,
    /// A seeded uniform permutation.
    Random,
}

impl fmt::Display for PruneOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ascending => "ascending",
            Self::Descending => "descending",
            Self::Random => "random",
        })
    }
}

impl FromStr for PruneOrder {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ascending" | "asc" => Ok(Self::Ascending),
            "descending" | "desc" => Ok(Self::Descending),
            "random" => Ok(Self::Random),
            _ => Err(Error::Config(format!("unknown prune order {s:?}"))),
        }
    }
}

/// Dimension indices sorted by `|direction[j]|` ascending, lower index first
/// on ties.
pub fn rank_dimensions(fit: &EncodingFit) -> Result<Vec<usize>> {
    fit.validate()?;
    Ok(rank_by_magnitude(&fit.direction))
}

fn rank_by_magnitude(direction: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..direction.len()).collect();
    order.sort_by(|&a, &b| direction[a].abs().total_cmp(&direction[b].abs()).then(a.cmp(&b)));
    order
}

/// Full removal order for a sweep.
pub fn removal_order(fit: &EncodingFit, order: PruneOrder, seed: u64) -> Result<Vec<usize>> {
    let mut ranked = rank_dimensions(fit)?;
    match order {
        PruneOrder::Ascending => {}
        PruneOrder::Descending => ranked.reverse(),
        PruneOrder::Random => {
            ranked.sort_unstable();
            ranked.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
    }
    Ok(ranked)
}

/// Copy of `emb` with the listed columns set to zero.
pub fn zero_dimensions(emb: &EmbeddingMatrix, dims: &[usize]) -> Result<EmbeddingMatrix> {
    let d = emb.cols();
    if let Some(&j) = dims.iter().find(|&&j| j >= d) {
        return Err(Error::OutOfRange { index: j, len: d });
    }
    let mut out = emb.clone();
    for &j in dims {
        out.data_mut().column_mut(j).fill(0.0);
    }
    Ok(out)
}

/// Number of dimensions removed at ratio `rho`: `floor(rho * d)`.
pub fn removal_count(rho: f64, d: usize) -> usize {
    // guard against 0.3 * 10 = 2.9999999999999996
    ((rho * d as f64) + 1e-9).floor() as usize
}

/// Normalized bigram (k = 2) distribution over a set of token sequences,
/// flattened row-major over `vocab × vocab`.
pub fn bigram_distribution(seqs: &[Vec<u32>], vocab: usize) -> Vec<f64> {
    let mut counts = vec![0.0; vocab * vocab];
    let mut total = 0.0;
    for s in seqs {
        for w in s.windows(2) {
            counts[w[0] as usize * vocab + w[1] as usize] += 1.0;
            total += 1.0;
        }
    }
    if total > 0.0 {
        counts.iter_mut().for_each(|c| *c /= total);
    }
    counts
}

/// `1 - JS(p, q)` with the divergence in bits, so 1 means identical and 0
/// means disjoint support.
pub fn generation_similarity(a: &[Vec<u32>], b: &[Vec<u32>], vocab: usize) -> f64 {
    1.0 - js_divergence_bits(&bigram_distribution(a, vocab), &bigram_distribution(b, vocab))
}

/// Model-side evaluation of a candidate output embedding.
pub trait PruneEvaluator {
    /// Averaged next-token distribution on the evaluation set.
    fn averaged(&mut self, emb: &EmbeddingMatrix) -> Result<Vec<f64>>;
    /// Generation similarity against the unpruned model, or `None` when
    /// the evaluator cannot generate.
    fn similarity(&mut self, emb: &EmbeddingMatrix) -> Result<Option<f64>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunePoint {
    pub ratio: f64,
    pub removed: usize,
    /// `KL(pruned || original)` of the averaged distributions.
    pub kl_divergence: f64,
    pub gen_similarity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSweep {
    pub order: PruneOrder,
    pub seed: u64,
    pub ratios: Vec<f64>,
    /// `|slope|` per dimension.
    pub saliency: Vec<f64>,
    pub removal_order: Vec<usize>,
    pub results: Vec<PrunePoint>,
}

impl PruneSweep {
    pub fn point(&self, ratio: f64) -> Option<&PrunePoint> {
        self.results.iter().find(|p| (p.ratio - ratio).abs() < 1e-12)
    }

    pub fn mean_kl(&self) -> f64 {
        self.results.iter().map(|p| p.kl_divergence).sum::<f64>() / self.results.len().max(1) as f64
    }
}

/// Writes `ratio,order,kl,gen_similarity` rows for every sweep; a missing
/// similarity is an empty field.
pub fn write_sweeps_csv<W: Write>(sweeps: &[PruneSweep], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let map = |e: csv::Error| Error::Invariant(format!("csv: {e}"));
    w.write_record(["ratio", "order", "kl", "gen_similarity"]).map_err(map)?;
    for s in sweeps {
        for p in &s.results {
            let sim = p.gen_similarity.map(|v| format!("{v:?}")).unwrap_or_default();
            w.write_record([format!("{:?}", p.ratio), s.order.to_string(), format!("{:?}", p.kl_divergence), sim])
                .map_err(map)?;
        }
    }
    w.flush().map_err(|e| Error::Invariant(format!("csv: {e}")))?;
    Ok(())
}

pub fn prune_sweep(
    emb: &EmbeddingMatrix,
    fit: &EncodingFit,
    ratios: &[f64],
    order: PruneOrder,
    seed: u64,
    eval: &mut dyn PruneEvaluator,
) -> Result<PruneSweep> {
    if fit.dims() != emb.cols() {
        return Err(Error::Shape(format!(
            "fit has {} slopes, embedding has {} columns",
            fit.dims(),
            emb.cols()
        )));
    }
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(Error::Config("removal ratios must lie in [0, 1]".into()));
    }
    if ratios.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("removal ratios must be sorted ascending".into()));
    }
    let removal = removal_order(fit, order, seed)?;
    let base = eval.averaged(emb)?;
    let d = emb.cols();
    let mut results = Vec::with_capacity(ratios.len());
    for &rho in ratios {
        let k = removal_count(rho, d);
        let pruned = zero_dimensions(emb, &removal[..k])?;
        let alpha = eval.averaged(&pruned)?;
        results.push(PrunePoint {
            ratio: rho,
            removed: k,
            kl_divergence: kl_divergence(&alpha, &base, DEFAULT_FLOOR),
            gen_similarity: eval.similarity(&pruned)?,
        });
    }
    Ok(PruneSweep {
        order,
        seed,
        ratios: ratios.to_vec(),
        saliency: fit.direction.iter().map(|v| v.abs()).collect(),
        removal_order: removal,
        results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::microlm::model::softmax_in_place;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::Rng;

    fn fit_with(direction: Vec<f64>) -> EncodingFit {
        let d = direction.len();
        EncodingFit {
            direction,
            intercept: 0.0,
            p_values: vec![0.5; d],
            std_errors: vec![1.0; d],
            intercept_p_value: 0.5,
            r2: 0.5,
            adj_r2: 0.4,
            dof: 10,
            n_obs: d + 11,
            residual_variance: 1.0,
            floor: None,
        }
    }

    #[test]
    fn rank_examples() {
        assert_eq!(rank_dimensions(&fit_with(vec![3.0, -1.0, 2.0])).unwrap(), vec![1, 2, 0]);
        assert_eq!(rank_dimensions(&fit_with(vec![-2.0, 2.0, 2.0, -2.0])).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn rank_matches_reference_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let dir: Vec<f64> = (0..100).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let ours = rank_dimensions(&fit_with(dir.clone())).unwrap();
        // selection sort on magnitudes as an independent reference
        let mut remaining: Vec<usize> = (0..100).collect();
        let mut reference = Vec::new();
        while !remaining.is_empty() {
            let mut best = 0;
            for i in 1..remaining.len() {
                if dir[remaining[i]].abs() < dir[remaining[best]].abs() {
                    best = i;
                }
            }
            reference.push(remaining.remove(best));
        }
        assert_eq!(ours, reference);
    }

    #[test]
    fn zero_examples() {
        let m = EmbeddingMatrix::new(Array2::from_shape_fn((3, 3), |(i, j)| if i == j { 1.0 } else { 0.5 })).unwrap();
        assert_eq!(zero_dimensions(&m, &[]).unwrap(), m);
        let z = zero_dimensions(&m, &[2]).unwrap();
        assert!(z.data().column(2).iter().all(|v| *v == 0.0));
        assert_eq!(z.data().column(0), m.data().column(0));
        assert_eq!(z.data().column(1), m.data().column(1));
        assert!(matches!(zero_dimensions(&m, &[3]), Err(Error::OutOfRange { .. })));
        let all = zero_dimensions(&m, &[0, 1, 2]).unwrap();
        assert!(all.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn removal_count_is_floor() {
        assert_eq!(removal_count(0.3, 10), 3);
        assert_eq!(removal_count(0.3, 64), 19);
        assert_eq!(removal_count(1.0, 64), 64);
        assert_eq!(removal_count(0.0, 64), 0);
    }

    #[test]
    fn random_order_is_seeded_permutation() {
        let fit = fit_with((0..20).map(|i| i as f64).collect());
        let a = removal_order(&fit, PruneOrder::Random, 4).unwrap();
        assert_eq!(a, removal_order(&fit, PruneOrder::Random, 4).unwrap());
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
        assert_eq!(removal_order(&fit, PruneOrder::Descending, 0).unwrap()[0], 19);
    }

    #[test]
    fn similarity_bounds() {
        let a = vec![vec![0, 1, 2, 3]];
        assert_eq!(generation_similarity(&a, &a, 4), 1.0);
        let b = vec![vec![3, 3, 3, 3]];
        assert_eq!(generation_similarity(&a, &b, 4), 0.0);
    }

    /// Static hidden states feeding the head directly.
    struct Fixed {
        hidden: Array2<f64>,
    }

    impl PruneEvaluator for Fixed {
        fn averaged(&mut self, emb: &EmbeddingMatrix) -> Result<Vec<f64>> {
            let logits = self.hidden.dot(&emb.view().t());
            let mut alpha = vec![0.0; emb.rows()];
            for row in logits.rows() {
                let mut r = row.to_vec();
                softmax_in_place(&mut r);
                alpha.iter_mut().zip(&r).for_each(|(a, p)| *a += p / logits.nrows() as f64);
            }
            Ok(alpha)
        }
        fn similarity(&mut self, _: &EmbeddingMatrix) -> Result<Option<f64>> {
            Ok(None)
        }
    }

    #[test]
    fn sweep_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let emb = EmbeddingMatrix::new(Array2::from_shape_fn((12, 5), |_| rng.random::<f64>() * 4.0 - 2.0)).unwrap();
        let mut eval = Fixed {
            hidden: Array2::from_shape_fn((30, 5), |_| rng.random::<f64>() * 2.0 - 1.0),
        };
        let fit = fit_with(vec![0.1, -3.0, 0.5, 2.0, -0.2]);
        let ratios: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let sweep = prune_sweep(&emb, &fit, &ratios, PruneOrder::Ascending, 0, &mut eval).unwrap();
        assert_eq!(sweep.results[0].kl_divergence, 0.0);
        let base = eval.averaged(&emb).unwrap();
        let uniform = vec![1.0 / 12.0; 12];
        let end = kl_divergence(&uniform, &base, DEFAULT_FLOOR);
        assert!((sweep.results[10].kl_divergence - end).abs() < 1e-12);
        assert_eq!(sweep.results[10].removed, 5);
        assert!(prune_sweep(&emb, &fit, &[0.5, 0.2], PruneOrder::Ascending, 0, &mut eval).is_err());
        assert!(prune_sweep(&emb, &fit, &[1.5], PruneOrder::Ascending, 0, &mut eval).is_err());
    }

    #[test]
    fn csv_layout() {
        let sweep = PruneSweep {
            order: PruneOrder::Descending,
            seed: 0,
            ratios: vec![0.0],
            saliency: vec![1.0],
            removal_order: vec![0],
            results: vec![PrunePoint {
                ratio: 0.0,
                removed: 0,
                kl_divergence: 0.0,
                gen_similarity: Some(1.0),
            }],
        };
        let mut buf = Vec::new();
        write_sweeps_csv(&[sweep], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "ratio,order,kl,gen_similarity\n0.0,descending,0.0,1.0\n");
    }

    proptest! {
        #[test]
        fn zeroing_is_idempotent(seed in 0u64..1000, k in 0usize..6, sub in 0usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = EmbeddingMatrix::new(Array2::from_shape_fn((7, 6), |_| rng.random::<f64>())).unwrap();
            let mut dims: Vec<usize> = (0..6).collect();
            dims.shuffle(&mut rng);
            let set = &dims[..k];
            let once = zero_dimensions(&m, set).unwrap();
            let twice = zero_dimensions(&once, &set[..sub.min(k)]).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn ranking_ignores_positive_rescaling(seed in 0u64..1000, scale in 0.001f64..1000.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dir: Vec<f64> = (0..16).map(|_| rng.random::<f64>() - 0.5).collect();
            let scaled: Vec<f64> = dir.iter().map(|v| v * scale).collect();
            prop_assert_eq!(
                rank_dimensions(&fit_with(dir)).unwrap(),
                rank_dimensions(&fit_with(scaled)).unwrap()
            );
        }
    }
}
