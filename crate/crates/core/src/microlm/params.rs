// SPDX-License-Identifier: MIT OR Apache-2.0

//! Named parameter tensors stored in one flat buffer.

use ndarray::{ArrayView2, ArrayViewMut2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::MicroConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

/// A collection of named row-major matrices backed by one contiguous buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    entries: Vec<Entry>,
    flat: Vec<f64>,
}

impl ParamSet {
    pub fn from_parts(shapes: Vec<(String, usize, usize)>, flat: Vec<f64>) -> Result<Self> {
        let mut entries = Vec::with_capacity(shapes.len());
        let mut offset = 0;
        for (name, rows, cols) in shapes {
            if entries.iter().any(|e: &Entry| e.name == name) {
                return Err(Error::Invariant(format!("duplicate tensor name {name}")));
            }
            entries.push(Entry {
                name,
                rows,
                cols,
                offset,
            });
            offset += rows * cols;
        }
        if offset != flat.len() {
            return Err(Error::Invariant(format!(
                "tensor shapes need {offset} values, buffer has {}",
                flat.len()
            )));
        }
        Ok(Self { entries, flat })
    }

    pub fn zeros(shapes: Vec<(String, usize, usize)>) -> Self {
        let n = shapes.iter().map(|(_, r, c)| r * c).sum();
        Self::from_parts(shapes, vec![0.0; n]).expect("consistent by construction")
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self.entries.clone(),
            flat: vec![0.0; self.flat.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.flat.len()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn shapes(&self) -> impl Iterator<Item = (&str, usize, usize)> {
        self.entries
            .iter()
            .map(|e| (e.name.as_str(), e.rows, e.cols))
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn slice(&self, name: &str) -> Option<&[f64]> {
        self.index_of(name).map(|i| {
            let e = &self.entries[i];
            &self.flat[e.offset..e.offset + e.rows * e.cols]
        })
    }

    pub fn get(&self, name: &str) -> Option<ArrayView2<'_, f64>> {
        self.index_of(name).map(|i| self.view(i))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<ArrayViewMut2<'_, f64>> {
        let i = self.index_of(name)?;
        let e = &self.entries[i];
        let (r, c, o) = (e.rows, e.cols, e.offset);
        Some(ArrayViewMut2::from_shape((r, c), &mut self.flat[o..o + r * c]).expect("shape"))
    }

    pub fn view(&self, i: usize) -> ArrayView2<'_, f64> {
        let e = &self.entries[i];
        ArrayView2::from_shape((e.rows, e.cols), &self.flat[e.offset..e.offset + e.rows * e.cols])
            .expect("entry shape matches buffer")
    }

    /// Mutable views of every tensor, in layout order.
    pub fn views_mut(&mut self) -> Vec<ArrayViewMut2<'_, f64>> {
        let mut rest: &mut [f64] = &mut self.flat;
        let mut out = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let (head, tail) = rest.split_at_mut(e.rows * e.cols);
            out.push(ArrayViewMut2::from_shape((e.rows, e.cols), head).expect("shape"));
            rest = tail;
        }
        out
    }
}

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;
pub const PER_LAYER: usize = 12;

/// Position of each tensor in the layout for a given config.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Layout {
    n_layers: usize,
    tied: bool,
    head_bias: bool,
}

impl Layout {
    pub fn new(cfg: &MicroConfig) -> Self {
        Self {
            n_layers: cfg.n_layers,
            tied: cfg.tied,
            head_bias: cfg.head_bias,
        }
    }
    pub fn tok_emb(self) -> usize {
        0
    }
    pub fn pos_emb(self) -> usize {
        1
    }
    /// `k` follows the per-layer order of [`param_shapes`].
    pub fn layer(self, l: usize, k: usize) -> usize {
        2 + l * PER_LAYER + k
    }
    pub fn lnf_gain(self) -> usize {
        2 + self.n_layers * PER_LAYER
    }
    pub fn lnf_bias(self) -> usize {
        self.lnf_gain() + 1
    }
    pub fn out_emb(self) -> usize {
        if self.tied {
            self.tok_emb()
        } else {
            self.lnf_bias() + 1
        }
    }
    pub fn head_bias(self) -> Option<usize> {
        self.head_bias
            .then(|| self.lnf_bias() + 1 + usize::from(!self.tied))
    }
}

pub mod layer_slot {
    pub const LN1_GAIN: usize = 0;
    pub const LN1_BIAS: usize = 1;
    pub const QUERY: usize = 2;
    pub const KEY: usize = 3;
    pub const VALUE: usize = 4;
    pub const OUTPUT: usize = 5;
    pub const LN2_GAIN: usize = 6;
    pub const LN2_BIAS: usize = 7;
    pub const UP: usize = 8;
    pub const UP_BIAS: usize = 9;
    pub const DOWN: usize = 10;
    pub const DOWN_BIAS: usize = 11;
}

/// Names and shapes of every parameter tensor, in storage order.
pub fn param_shapes(cfg: &MicroConfig) -> Vec<(String, usize, usize)> {
    let (v, d, f) = (cfg.vocab_size, cfg.d_model, cfg.d_ff);
    let mut out = vec![
        ("tok_emb".to_owned(), v, d),
        ("pos_emb".to_owned(), cfg.context, d),
    ];
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        out.extend([
            (p("ln1.gain"), 1, d),
            (p("ln1.bias"), 1, d),
            (p("attn.query"), d, d),
            (p("attn.key"), d, d),
            (p("attn.value"), d, d),
            (p("attn.output"), d, d),
            (p("ln2.gain"), 1, d),
            (p("ln2.bias"), 1, d),
            (p("ff.up"), d, f),
            (p("ff.up_bias"), 1, f),
            (p("ff.down"), f, d),
            (p("ff.down_bias"), 1, d),
        ]);
    }
    out.push(("ln_f.gain".to_owned(), 1, d));
    out.push(("ln_f.bias".to_owned(), 1, d));
    if !cfg.tied {
        out.push(("out_emb".to_owned(), v, d));
    }
    if cfg.head_bias {
        out.push(("head_bias".to_owned(), 1, v));
    }
    out
}

/// Seeded initialization: N(0, 0.02) weights, residual projections scaled by
/// `1/sqrt(2L)`, unit gains, zero biases.
pub fn init_params(cfg: &MicroConfig) -> ParamSet {
    let mut params = ParamSet::zeros(param_shapes(cfg));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let resid_std = INIT_STD / (2.0 * cfg.n_layers.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let resid = Normal::new(0.0, resid_std).expect("valid std");
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    let mut views = params.views_mut();
    for (name, view) in names.iter().zip(views.iter_mut()) {
        if name.ends_with(".gain") {
            view.fill(1.0);
        } else if name.ends_with("bias") {
            view.fill(0.0);
        } else if name.ends_with("attn.output") || name.ends_with("ff.down") {
            view.iter_mut().for_each(|x| *x = resid.sample(&mut rng));
        } else {
            view.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
        }
    }
    params
}
