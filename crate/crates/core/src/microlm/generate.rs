// SPDX-License-Identifier: MIT OR Apache-2.0

//! Autoregressive sampling with a per-layer key/value cache.
//!
//! Sequences in a batch advance in lockstep. Once a sequence outgrows the
//! context, the window slides by one token and is re-encoded from position
//! zero, since positional embeddings are absolute.

use ndarray::{s, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{gelu, head_logits, layer_norm, softmax_in_place, Weights};
use super::MicroCheckpoint;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerateOptions {
    pub n_tokens: usize,
    /// Softmax temperature; must be positive unless `greedy` is set.
    pub temperature: f64,
    /// Take the most likely token (lowest id on ties); no randomness.
    pub greedy: bool,
    /// Sequence `i` of a batch samples from stream `i` of this seed, so two
    /// models driven with the same seed see the same uniforms.
    pub seed: u64,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            n_tokens: 64,
            temperature: 1.0,
            greedy: false,
            seed: 0,
        }
    }
}

pub(crate) struct Decoder<'a> {
    w: Weights<'a>,
    keys: Vec<Array3<f64>>,
    values: Vec<Array3<f64>>,
    len: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(ck: &'a MicroCheckpoint, batch: usize) -> Self {
        let w = Weights::new(&ck.config, &ck.params);
        let shape = (batch, ck.config.context, ck.config.d_model);
        let layers = ck.config.n_layers;
        Self {
            w,
            keys: vec![Array3::zeros(shape); layers],
            values: vec![Array3::zeros(shape); layers],
            len: 0,
        }
    }

    pub fn reset(&mut self) {
        self.len = 0;
    }

    pub fn is_full(&self) -> bool {
        self.len == self.w.context
    }

    /// Appends one token per sequence and returns the next-token logits.
    pub fn step(&mut self, tokens: &[u32]) -> Array2<f64> {
        let w = &self.w;
        let p = self.len;
        assert!(p < w.context, "decoder window is full");
        let d = w.d_model();
        let dh = d / w.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x = Array2::from_shape_fn((tokens.len(), d), |(b, j)| {
            w.tok[[tokens[b] as usize, j]] + w.pos[[p, j]]
        });
        for (l, lw) in w.layers.iter().enumerate() {
            let (a, _) = layer_norm(x.view(), lw.ln1_g, lw.ln1_b);
            let q = a.dot(&lw.wq);
            self.keys[l].slice_mut(s![.., p, ..]).assign(&a.dot(&lw.wk));
            self.values[l].slice_mut(s![.., p, ..]).assign(&a.dot(&lw.wv));
            let mut ctx = Array2::zeros(x.raw_dim());
            for b in 0..tokens.len() {
                for h in 0..w.n_heads {
                    let cols = h * dh..(h + 1) * dh;
                    let keys = self.keys[l].slice(s![b, 0..=p, cols.clone()]);
                    let mut scores = keys.dot(&q.slice(s![b, cols.clone()])) * scale;
                    softmax_in_place(scores.as_slice_mut().expect("owned vector"));
                    let vals = self.values[l].slice(s![b, 0..=p, cols.clone()]);
                    ctx.slice_mut(s![b, cols]).assign(&vals.t().dot(&scores));
                }
            }
            x += &ctx.dot(&lw.wo);
            let (bn, _) = layer_norm(x.view(), lw.ln2_g, lw.ln2_b);
            let mut u = bn.dot(&lw.up);
            u += &lw.up_b;
            u.mapv_inplace(gelu);
            x += &u.dot(&lw.down);
            x += &lw.down_b;
        }
        let (hidden, _) = layer_norm(x.view(), w.lnf_g, w.lnf_b);
        self.len += 1;
        head_logits(w, hidden.view())
    }
}

fn sample(logits: &mut [f64], opts: &GenerateOptions, rng: &mut ChaCha8Rng) -> u32 {
    if opts.greedy {
        let best = logits
            .iter()
            .enumerate()
            .fold(0, |best, (i, v)| if *v > logits[best] { i } else { best });
        return best as u32;
    }
    logits.iter_mut().for_each(|v| *v /= opts.temperature);
    softmax_in_place(logits);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, p) in logits.iter().enumerate() {
        if *p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc {
            return i as u32;
        }
    }
    last_positive as u32
}

/// Prefix followed by `n_tokens` sampled tokens.
pub fn generate(ck: &MicroCheckpoint, prefix: &[u32], opts: GenerateOptions) -> Result<Vec<u32>> {
    Ok(generate_batch(ck, &[prefix.to_vec()], opts)?.remove(0))
}

/// Extends every prefix by `n_tokens`. All prefixes must share one length.
pub fn generate_batch(ck: &MicroCheckpoint, prefixes: &[Vec<u32>], opts: GenerateOptions) -> Result<Vec<Vec<u32>>> {
    ck.validate()?;
    if !opts.greedy && !(opts.temperature > 0.0 && opts.temperature.is_finite()) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {}",
            opts.temperature
        )));
    }
    let Some(first) = prefixes.first() else {
        return Ok(Vec::new());
    };
    let plen = first.len();
    if plen == 0 || prefixes.iter().any(|p| p.len() != plen) {
        return Err(Error::Shape("prefixes must be non-empty and of equal length".into()));
    }
    let vocab = ck.config.vocab_size;
    if let Some(&t) = prefixes.iter().flatten().find(|&&t| t as usize >= vocab) {
        return Err(Error::OutOfRange {
            index: t as usize,
            len: vocab,
        });
    }

    let ctx = ck.config.context;
    let batch = prefixes.len();
    let mut seqs: Vec<Vec<u32>> = prefixes
        .iter()
        .map(|p| {
            let mut s = Vec::with_capacity(plen + opts.n_tokens);
            s.extend_from_slice(p);
            s
        })
        .collect();
    let mut rngs: Vec<ChaCha8Rng> = (0..batch)
        .map(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(opts.seed);
            r.set_stream(i as u64);
            r
        })
        .collect();
    let mut dec = Decoder::new(ck, batch);

    let encode_window = |dec: &mut Decoder<'_>, seqs: &[Vec<u32>]| {
        dec.reset();
        let len = seqs[0].len();
        let start = len.saturating_sub(ctx);
        let mut logits = None;
        for p in start..len {
            let col: Vec<u32> = seqs.iter().map(|s| s[p]).collect();
            logits = Some(dec.step(&col));
        }
        logits.expect("window is non-empty")
    };

    let mut logits = encode_window(&mut dec, &seqs);
    for i in 0..opts.n_tokens {
        let next: Vec<u32> = logits
            .rows_mut()
            .into_iter()
            .zip(rngs.iter_mut())
            .map(|(mut row, rng)| sample(row.as_slice_mut().expect("standard layout"), &opts, rng))
            .collect();
        for (s, t) in seqs.iter_mut().zip(&next) {
            s.push(*t);
        }
        if i + 1 == opts.n_tokens {
            break;
        }
        logits = if dec.is_full() {
            encode_window(&mut dec, &seqs)
        } else {
            dec.step(&next)
        };
    }
    Ok(seqs)
}
