// SPDX-License-Identifier: MIT OR Apache-2.0

//! Training-dynamics probes over a sequence of checkpoints: how well the
//! output embedding encodes `-log` corpus frequency at each step, and how far
//! each parameter group has travelled towards its final value.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::microlm::MicroCheckpoint;
use crate::probe::{ols_fit, EncodingFit};
use crate::store::{CorpusFreq, EmbeddingMatrix};

/// Encoding fit of `-log(max(freq / total, floor))` against `emb`.
pub fn freq_encoding_fit(emb: &EmbeddingMatrix, freq: &CorpusFreq, floor: f64) -> Result<EncodingFit> {
    freq.validate()?;
    if freq.vocab_size() != emb.rows() {
        return Err(Error::Shape(format!(
            "frequency table covers {} tokens, embedding has {} rows",
            freq.vocab_size(),
            emb.rows()
        )));
    }
    if !(floor > 0.0) {
        return Err(Error::Invariant(format!("floor must be positive, got {floor}")));
    }
    let targets: Vec<f64> = freq.frequencies().iter().map(|f| -f.max(floor).ln()).collect();
    let mut fit = ols_fit(&targets, emb.view())?;
    fit.floor = Some(floor);
    Ok(fit)
}

/// Adjusted R² of the frequency encoding in a checkpoint's output embedding.
pub fn freq_encoding_r2(ck: &MicroCheckpoint, freq: &CorpusFreq, floor: f64) -> Result<f64> {
    Ok(freq_encoding_fit(&ck.output_embedding()?, freq, floor)?.adj_r2)
}

/// `1 - ‖θ* - θ_t‖ / ‖θ* - θ_0‖` (Frobenius norms).
pub fn convergence_rate(theta_0: &[f64], theta_t: &[f64], theta_star: &[f64]) -> Result<f64> {
    if theta_0.len() != theta_t.len() || theta_0.len() != theta_star.len() {
        return Err(Error::Shape("parameter tensors differ in size".into()));
    }
    let dist = |a: &[f64]| {
        a.iter()
            .zip(theta_star)
            .map(|(x, y)| (y - x) * (y - x))
            .sum::<f64>()
            .sqrt()
    };
    let total = dist(theta_0);
    if total == 0.0 {
        return Err(Error::Degenerate("final parameters equal the initial ones".into()));
    }
    Ok(1.0 - dist(theta_t) / total)
}

/// A named set of tensors whose concatenation is treated as one parameter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub tensors: Vec<String>,
}

impl ParamGroup {
    pub fn new(name: impl Into<String>, tensors: &[&str]) -> Self {
        Self {
            name: name.into(),
            tensors: tensors.iter().map(|s| (*s).to_owned()).collect(),
        }
    }

    fn gather(&self, ck: &MicroCheckpoint) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for t in &self.tensors {
            let s = ck
                .params
                .slice(t)
                .ok_or_else(|| Error::Config(format!("checkpoint has no tensor {t:?}")))?;
            out.extend_from_slice(s);
        }
        Ok(out)
    }
}

/// Input and output embeddings, then each layer's query, key and value maps.
pub fn default_groups(ck: &MicroCheckpoint) -> Vec<ParamGroup> {
    let cfg = &ck.config;
    let mut groups = vec![ParamGroup::new("input_embedding", &["tok_emb"])];
    let mut out = vec![if cfg.tied { "tok_emb" } else { "out_emb" }];
    if cfg.head_bias {
        out.push("head_bias");
    }
    groups.push(ParamGroup::new("output_embedding", &out));
    for l in 0..cfg.n_layers {
        for m in ["query", "key", "value"] {
            let t = format!("layers.{l}.attn.{m}");
            groups.push(ParamGroup::new(t.clone(), &[t.as_str()]));
        }
    }
    groups
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsTrace {
    pub steps: Vec<usize>,
    pub freq_adj_r2: Vec<f64>,
    pub groups: Vec<String>,
    /// `conv_rate[g][i]` for group `g` at `steps[i]`.
    pub conv_rate: Vec<Vec<f64>>,
}

impl DynamicsTrace {
    pub fn group(&self, name: &str) -> Option<&[f64]> {
        self.groups
            .iter()
            .position(|g| g == name)
            .map(|i| self.conv_rate[i].as_slice())
    }

    /// First recorded step whose value exceeds `threshold`.
    pub fn first_step_above(&self, values: &[f64], threshold: f64) -> Option<usize> {
        self.steps
            .iter()
            .zip(values)
            .find(|(_, v)| **v > threshold)
            .map(|(s, _)| *s)
    }

    /// Rows `step,group,conv_rate,freq_adj_r2`, step-major.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let map = |e: csv::Error| Error::Invariant(format!("csv: {e}"));
        w.write_record(["step", "group", "conv_rate", "freq_adj_r2"]).map_err(map)?;
        for (i, step) in self.steps.iter().enumerate() {
            for (g, name) in self.groups.iter().enumerate() {
                w.write_record([
                    step.to_string(),
                    name.clone(),
                    format!("{:?}", self.conv_rate[g][i]),
                    format!("{:?}", self.freq_adj_r2[i]),
                ])
                .map_err(map)?;
            }
        }
        w.flush().map_err(|e| Error::Invariant(format!("csv: {e}")))?;
        Ok(())
    }
}

/// Evaluates every group and the frequency encoding at every checkpoint.
/// Checkpoints must be in strictly increasing step order, the first at
/// step 0; the last is taken as the final state.
pub fn trace(checkpoints: &[MicroCheckpoint], freq: &CorpusFreq, groups: &[ParamGroup], floor: f64) -> Result<DynamicsTrace> {
    if checkpoints.len() < 2 {
        return Err(Error::Config("a trace needs at least two checkpoints".into()));
    }
    if checkpoints[0].step != 0 {
        return Err(Error::Config(format!(
            "first checkpoint must be step 0, found step {}",
            checkpoints[0].step
        )));
    }
    if checkpoints.windows(2).any(|w| w[0].step >= w[1].step) {
        return Err(Error::Config("checkpoint steps must be strictly increasing".into()));
    }
    if checkpoints.iter().any(|c| c.config != checkpoints[0].config) {
        return Err(Error::Config("checkpoints come from different model configs".into()));
    }
    let first = &checkpoints[0];
    let last = checkpoints.last().expect("length checked");
    let mut conv_rate = Vec::with_capacity(groups.len());
    for g in groups {
        let theta_0 = g.gather(first)?;
        let theta_star = g.gather(last)?;
        let curve = checkpoints
            .iter()
            .map(|c| convergence_rate(&theta_0, &g.gather(c)?, &theta_star))
            .collect::<Result<Vec<_>>>()?;
        conv_rate.push(curve);
    }
    let freq_adj_r2 = checkpoints
        .iter()
        .map(|c| freq_encoding_r2(c, freq, floor))
        .collect::<Result<Vec<_>>>()?;
    Ok(DynamicsTrace {
        steps: checkpoints.iter().map(|c| c.step).collect(),
        freq_adj_r2,
        groups: groups.iter().map(|g| g.name.clone()).collect(),
        conv_rate,
    })
}
