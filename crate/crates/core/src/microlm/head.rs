// SPDX-License-Identifier: MIT OR Apache-2.0

//! Averaged next-token distributions over a dataset, and a cache of final
//! hidden states that re-evaluates them under an edited output embedding
//! without rerunning the transformer body.

use ndarray::{s, Array2, Axis};

use super::model::{forward_batch, softmax_rows, Weights};
use super::MicroCheckpoint;
use crate::error::{Error, Result};
use crate::store::{EmbeddingMatrix, ProbStats};

/// Rows per batched forward pass when sweeping a dataset.
const CHUNK_ROWS: usize = 4096;

fn chunks(dataset: &[Vec<u32>]) -> Vec<&[Vec<u32>]> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut rows = 0;
    for (i, seq) in dataset.iter().enumerate() {
        if rows > 0 && rows + seq.len() > CHUNK_ROWS {
            out.push(&dataset[start..i]);
            start = i;
            rows = 0;
        }
        rows += seq.len();
    }
    if start < dataset.len() {
        out.push(&dataset[start..]);
    }
    out
}

/// Runs the body over every sequence and hands each chunk's final hidden
/// states and distributions to `visit`, with the rows to keep.
fn sweep(
    ck: &MicroCheckpoint,
    dataset: &[Vec<u32>],
    exclude_last: bool,
    mut visit: impl FnMut(&Array2<f64>, &Array2<f64>, &[usize]),
) -> Result<()> {
    ck.validate()?;
    if dataset.is_empty() {
        return Err(Error::Shape("empty dataset".into()));
    }
    let w = Weights::new(&ck.config, &ck.params);
    for group in chunks(dataset) {
        let mut tokens = Vec::new();
        let mut segs = Vec::with_capacity(group.len());
        let mut keep = Vec::new();
        for seq in group {
            if seq.is_empty() {
                return Err(Error::Shape("empty sequence in dataset".into()));
            }
            let o = tokens.len();
            segs.push((o, seq.len()));
            let n = if exclude_last { seq.len() - 1 } else { seq.len() };
            keep.extend(o..o + n);
            tokens.extend_from_slice(seq);
        }
        let fwd = forward_batch(&w, &tokens, &segs)?;
        visit(&fwd.hidden, &fwd.probs, &keep);
    }
    Ok(())
}

/// One distribution per input position, including the last, summed over
/// every sequence.
pub fn accumulate_probs(ck: &MicroCheckpoint, dataset: &[Vec<u32>]) -> Result<ProbStats> {
    accumulate_probs_with(ck, dataset, false)
}

/// As [`accumulate_probs`]; `exclude_last` drops each sequence's final
/// position, whose target lies beyond the sequence.
pub fn accumulate_probs_with(ck: &MicroCheckpoint, dataset: &[Vec<u32>], exclude_last: bool) -> Result<ProbStats> {
    let mut stats = ProbStats::new(ck.config.vocab_size);
    sweep(ck, dataset, exclude_last, |_, probs, keep| {
        for &r in keep {
            stats.add(probs.row(r).as_slice().expect("standard layout"));
        }
    })?;
    Ok(stats)
}

/// Every kept position's distribution as one row.
pub fn position_probs(ck: &MicroCheckpoint, dataset: &[Vec<u32>], exclude_last: bool) -> Result<Array2<f64>> {
    let v = ck.config.vocab_size;
    let mut rows = Vec::new();
    sweep(ck, dataset, exclude_last, |_, probs, keep| {
        for &r in keep {
            rows.extend(probs.row(r).iter());
        }
    })?;
    let n = rows.len() / v;
    Ok(Array2::from_shape_vec((n, v), rows).expect("row widths match"))
}

/// Final hidden states and base distributions of an untied model over a
/// fixed dataset. Hidden states include the constant trailing 1 when the
/// head has a bias, so logits are `hidden · embᵀ` for the probe's view of
/// the output embedding.
#[derive(Debug, Clone)]
pub struct HeadCache {
    hidden: Array2<f64>,
    probs: Array2<f64>,
    base: EmbeddingMatrix,
}

impl HeadCache {
    pub fn build(ck: &MicroCheckpoint, dataset: &[Vec<u32>], exclude_last: bool) -> Result<Self> {
        if ck.config.tied {
            return Err(Error::Config(
                "a tied output embedding also feeds the body; evaluate edits with a full forward pass".into(),
            ));
        }
        let width = ck.config.output_dims();
        let d = ck.config.d_model;
        let mut hidden_rows: Vec<f64> = Vec::new();
        let mut prob_rows: Vec<f64> = Vec::new();
        let mut n = 0;
        sweep(ck, dataset, exclude_last, |hidden, probs, keep| {
            for &r in keep {
                hidden_rows.extend(hidden.row(r).iter());
                if width > d {
                    hidden_rows.push(1.0);
                }
                prob_rows.extend(probs.row(r).iter());
                n += 1;
            }
        })?;
        let v = ck.config.vocab_size;
        Ok(Self {
            hidden: Array2::from_shape_vec((n, width), hidden_rows).expect("row widths match"),
            probs: Array2::from_shape_vec((n, v), prob_rows).expect("row widths match"),
            base: ck.output_embedding()?,
        })
    }

    pub fn positions(&self) -> usize {
        self.hidden.nrows()
    }

    pub fn base_embedding(&self) -> &EmbeddingMatrix {
        &self.base
    }

    pub fn base_stats(&self) -> ProbStats {
        let mut stats = ProbStats::new(self.probs.ncols());
        for row in self.probs.rows() {
            stats.add(row.as_slice().expect("standard layout"));
        }
        stats
    }

    /// Averaged statistics with the whole output embedding replaced.
    pub fn stats_with_embedding(&self, emb: &EmbeddingMatrix) -> Result<ProbStats> {
        if emb.rows() != self.base.rows() || emb.cols() != self.base.cols() {
            return Err(Error::Shape(format!(
                "embedding must be {}x{}, got {}x{}",
                self.base.rows(),
                self.base.cols(),
                emb.rows(),
                emb.cols()
            )));
        }
        let mut stats = ProbStats::new(emb.rows());
        let n = self.positions();
        let mut start = 0;
        while start < n {
            let end = (start + CHUNK_ROWS).min(n);
            let mut p = self.hidden.slice(s![start..end, ..]).dot(&emb.view().t());
            softmax_rows(&mut p);
            for row in p.rows() {
                stats.add(row.as_slice().expect("standard layout"));
            }
            start = end;
        }
        Ok(stats)
    }

    /// Averaged statistics with a single row of the output embedding
    /// replaced. Only logit `token` moves, by `δ_x = h_x · (new - old)`, so
    /// each cached distribution is rescaled exactly:
    /// `p'_v = p_v / (1 - p_w + p_w e^δ)` and `p'_w = p_w e^δ / (…)`.
    pub fn stats_with_row(&self, token: usize, new_row: &[f64]) -> Result<ProbStats> {
        let v = self.probs.ncols();
        if token >= v {
            return Err(Error::OutOfRange { index: token, len: v });
        }
        if new_row.len() != self.base.cols() {
            return Err(Error::Shape("replacement row has the wrong width".into()));
        }
        let old = self.base.row(token);
        let diff: Vec<f64> = new_row.iter().zip(old).map(|(a, b)| a - b).collect();
        let delta = self.hidden.dot(&ndarray::ArrayView1::from(&diff[..]));
        let mut sum = vec![0.0; v];
        for (row, &dx) in self.probs.rows().into_iter().zip(&delta) {
            let pw = row[token];
            let scaled = pw * dx.exp();
            let inv = 1.0 / (1.0 - pw + scaled);
            for (s, p) in sum.iter_mut().zip(row.iter()) {
                *s += p * inv;
            }
            sum[token] += scaled * inv - pw * inv;
        }
        Ok(ProbStats {
            sum,
            positions: self.positions() as u64,
        })
    }

    /// Hidden-state matrix (one row per cached position).
    pub fn hidden(&self) -> ndarray::ArrayView2<'_, f64> {
        self.hidden.view()
    }

    /// Base distributions, one row per cached position.
    pub fn probs(&self) -> ndarray::ArrayView2<'_, f64> {
        self.probs.view()
    }

    /// Mean over positions of every base distribution: `α` of the dataset.
    pub fn base_alpha(&self) -> Vec<f64> {
        self.probs
            .mean_axis(Axis(0))
            .expect("cache has at least one row")
            .to_vec()
    }
}
