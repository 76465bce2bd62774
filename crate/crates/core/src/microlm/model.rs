// SPDX-License-Identifier: MIT OR Apache-2.0

//! Batched forward pass and hand-written backward pass.
//!
//! A batch is a set of sequences concatenated row-wise into one `N×d`
//! activation matrix; `segs` lists `(offset, len)` of each sequence.
//! Attention is evaluated per sequence and head on slices of that matrix.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};

use super::params::{layer_slot as ls, Layout, LN_EPS};
use super::{MicroCheckpoint, MicroConfig, ParamSet};
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub(crate) fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_K * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_K * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * u * u)
}

pub(crate) struct LayerWeights<'a> {
    pub ln1_g: ArrayView1<'a, f64>,
    pub ln1_b: ArrayView1<'a, f64>,
    pub wq: ArrayView2<'a, f64>,
    pub wk: ArrayView2<'a, f64>,
    pub wv: ArrayView2<'a, f64>,
    pub wo: ArrayView2<'a, f64>,
    pub ln2_g: ArrayView1<'a, f64>,
    pub ln2_b: ArrayView1<'a, f64>,
    pub up: ArrayView2<'a, f64>,
    pub up_b: ArrayView1<'a, f64>,
    pub down: ArrayView2<'a, f64>,
    pub down_b: ArrayView1<'a, f64>,
}

pub(crate) struct Weights<'a> {
    pub layout: Layout,
    pub n_heads: usize,
    pub vocab: usize,
    pub context: usize,
    pub tok: ArrayView2<'a, f64>,
    pub pos: ArrayView2<'a, f64>,
    pub layers: Vec<LayerWeights<'a>>,
    pub lnf_g: ArrayView1<'a, f64>,
    pub lnf_b: ArrayView1<'a, f64>,
    pub out: ArrayView2<'a, f64>,
    pub bias: Option<ArrayView1<'a, f64>>,
}

fn vector(params: &ParamSet, i: usize) -> ArrayView1<'_, f64> {
    params.view(i).index_axis_move(Axis(0), 0)
}

impl<'a> Weights<'a> {
    pub fn new(cfg: &MicroConfig, params: &'a ParamSet) -> Self {
        let lay = Layout::new(cfg);
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let m = |k| params.view(lay.layer(l, k));
                let v = |k| vector(params, lay.layer(l, k));
                LayerWeights {
                    ln1_g: v(ls::LN1_GAIN),
                    ln1_b: v(ls::LN1_BIAS),
                    wq: m(ls::QUERY),
                    wk: m(ls::KEY),
                    wv: m(ls::VALUE),
                    wo: m(ls::OUTPUT),
                    ln2_g: v(ls::LN2_GAIN),
                    ln2_b: v(ls::LN2_BIAS),
                    up: m(ls::UP),
                    up_b: v(ls::UP_BIAS),
                    down: m(ls::DOWN),
                    down_b: v(ls::DOWN_BIAS),
                }
            })
            .collect();
        Self {
            layout: lay,
            n_heads: cfg.n_heads,
            vocab: cfg.vocab_size,
            context: cfg.context,
            tok: params.view(lay.tok_emb()),
            pos: params.view(lay.pos_emb()),
            layers,
            lnf_g: vector(params, lay.lnf_gain()),
            lnf_b: vector(params, lay.lnf_bias()),
            out: params.view(lay.out_emb()),
            bias: lay.head_bias().map(|i| vector(params, i)),
        }
    }

    pub fn d_model(&self) -> usize {
        self.tok.ncols()
    }
}

pub(crate) struct Norm {
    pub xhat: Array2<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) fn layer_norm(x: ArrayView2<'_, f64>, g: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> (Array2<f64>, Norm) {
    let d = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut rstd = Vec::with_capacity(x.nrows());
    for mut row in xhat.rows_mut() {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        let r = 1.0 / (var + LN_EPS).sqrt();
        row *= r;
        rstd.push(r);
    }
    let y = &xhat * &g + &b;
    (y, Norm { xhat, rstd })
}

/// Returns `dx`; accumulates gain and bias gradients into `dg`, `db`.
fn layer_norm_backward(dy: &Array2<f64>, norm: &Norm, g: ArrayView1<'_, f64>, dg: &mut Array1<f64>, db: &mut Array1<f64>) -> Array2<f64> {
    *dg += &(dy * &norm.xhat).sum_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0));
    let mut dx = dy * &g;
    let d = dx.ncols() as f64;
    for ((mut row, xh), r) in dx.rows_mut().into_iter().zip(norm.xhat.rows()).zip(&norm.rstd) {
        let m1 = row.sum() / d;
        let m2 = row.dot(&xh) / d;
        row.zip_mut_with(&xh, |v, &x| *v = r * (*v - m1 - x * m2));
    }
    dx
}

pub(crate) fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        softmax_in_place(row.as_slice_mut().expect("standard layout"));
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

pub(crate) struct LayerCache {
    ln1: Norm,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    att: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    ln2: Norm,
    b: Array2<f64>,
    u: Array2<f64>,
    g: Array2<f64>,
}

/// Activations of one batched forward pass.
pub(crate) struct Forward {
    /// Final normalized hidden states `h`, N×d.
    pub hidden: Array2<f64>,
    /// Next-token distributions, N×|V|.
    pub probs: Array2<f64>,
    layers: Vec<LayerCache>,
    lnf: Norm,
}

pub(crate) fn check_batch(w: &Weights<'_>, tokens: &[u32], segs: &[(usize, usize)]) -> Result<()> {
    let mut expected = 0;
    for &(o, len) in segs {
        if o != expected || len == 0 {
            return Err(Error::Shape("sequences must be non-empty and contiguous".into()));
        }
        if len > w.context {
            return Err(Error::Shape(format!(
                "sequence length {len} exceeds context {}",
                w.context
            )));
        }
        expected += len;
    }
    if expected != tokens.len() {
        return Err(Error::Shape("segments do not cover the token buffer".into()));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= w.vocab) {
        return Err(Error::OutOfRange {
            index: t as usize,
            len: w.vocab,
        });
    }
    Ok(())
}

fn attention_forward(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    segs: &[(usize, usize)],
    n_heads: usize,
) -> (Array2<f64>, Vec<Array2<f64>>) {
    let d = q.ncols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = Array2::zeros(q.raw_dim());
    let mut att = Vec::with_capacity(segs.len() * n_heads);
    for &(o, t) in segs {
        for h in 0..n_heads {
            let sl = s![o..o + t, h * dh..(h + 1) * dh];
            let mut p = q.slice(sl).dot(&k.slice(sl).t());
            for (i, mut row) in p.rows_mut().into_iter().enumerate() {
                let row = row.as_slice_mut().expect("standard layout");
                row.iter_mut().for_each(|x| *x *= scale);
                softmax_in_place(&mut row[..=i]);
                row[i + 1..].fill(0.0);
            }
            ctx.slice_mut(sl).assign(&p.dot(&v.slice(sl)));
            att.push(p);
        }
    }
    (ctx, att)
}

fn embed(w: &Weights<'_>, tokens: &[u32], segs: &[(usize, usize)]) -> Array2<f64> {
    let d = w.d_model();
    let mut x = Array2::zeros((tokens.len(), d));
    for &(o, len) in segs {
        for p in 0..len {
            let mut row = x.row_mut(o + p);
            row.assign(&w.tok.row(tokens[o + p] as usize));
            row += &w.pos.row(p);
        }
    }
    x
}

/// Logits `h · E_outᵀ (+ b)`.
pub(crate) fn head_logits(w: &Weights<'_>, hidden: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut logits = hidden.dot(&w.out.t());
    if let Some(b) = &w.bias {
        logits += b;
    }
    logits
}

pub(crate) fn forward_batch(w: &Weights<'_>, tokens: &[u32], segs: &[(usize, usize)]) -> Result<Forward> {
    check_batch(w, tokens, segs)?;
    let mut x = embed(w, tokens, segs);
    let mut layers = Vec::with_capacity(w.layers.len());
    for lw in &w.layers {
        let (a, ln1) = layer_norm(x.view(), lw.ln1_g, lw.ln1_b);
        let q = a.dot(&lw.wq);
        let k = a.dot(&lw.wk);
        let v = a.dot(&lw.wv);
        let (ctx, att) = attention_forward(&q, &k, &v, segs, w.n_heads);
        general_mat_mul(1.0, &ctx, &lw.wo, 1.0, &mut x);
        let (b, ln2) = layer_norm(x.view(), lw.ln2_g, lw.ln2_b);
        let mut u = b.dot(&lw.up);
        u += &lw.up_b;
        let g = u.mapv(gelu);
        general_mat_mul(1.0, &g, &lw.down, 1.0, &mut x);
        x += &lw.down_b;
        layers.push(LayerCache {
            ln1,
            a,
            q,
            k,
            v,
            att,
            ctx,
            ln2,
            b,
            u,
            g,
        });
    }
    let (hidden, lnf) = layer_norm(x.view(), w.lnf_g, w.lnf_b);
    let mut probs = head_logits(w, hidden.view());
    softmax_rows(&mut probs);
    Ok(Forward {
        hidden,
        probs,
        layers,
        lnf,
    })
}

fn add_vec(g: &mut ArrayViewMut2<'_, f64>, v: &Array1<f64>) {
    g.row_mut(0).scaled_add(1.0, v);
}

/// Backpropagates `dlogits` (N×|V|) and accumulates into `grads`.
pub(crate) fn backward(
    w: &Weights<'_>,
    tokens: &[u32],
    segs: &[(usize, usize)],
    fwd: &Forward,
    dlogits: &Array2<f64>,
    grads: &mut ParamSet,
) {
    let lay = w.layout;
    let d = w.d_model();
    let dh = d / w.n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut g = grads.views_mut();

    general_mat_mul(1.0, &dlogits.t(), &fwd.hidden, 1.0, &mut g[lay.out_emb()]);
    if let Some(i) = lay.head_bias() {
        add_vec(&mut g[i], &dlogits.sum_axis(Axis(0)));
    }
    let dh_final = dlogits.dot(&w.out);
    let mut dgain = Array1::zeros(d);
    let mut dbias = Array1::zeros(d);
    let mut dx = layer_norm_backward(&dh_final, &fwd.lnf, w.lnf_g, &mut dgain, &mut dbias);
    add_vec(&mut g[lay.lnf_gain()], &dgain);
    add_vec(&mut g[lay.lnf_bias()], &dbias);

    for (l, (lw, c)) in w.layers.iter().zip(&fwd.layers).enumerate().rev() {
        let idx = |k| lay.layer(l, k);
        // feed-forward block
        general_mat_mul(1.0, &c.g.t(), &dx, 1.0, &mut g[idx(ls::DOWN)]);
        add_vec(&mut g[idx(ls::DOWN_BIAS)], &dx.sum_axis(Axis(0)));
        let mut du = dx.dot(&lw.down.t());
        du.zip_mut_with(&c.u, |a, &u| *a *= gelu_grad(u));
        general_mat_mul(1.0, &c.b.t(), &du, 1.0, &mut g[idx(ls::UP)]);
        add_vec(&mut g[idx(ls::UP_BIAS)], &du.sum_axis(Axis(0)));
        let db_ln = du.dot(&lw.up.t());
        let mut dgain = Array1::zeros(d);
        let mut dbias = Array1::zeros(d);
        dx += &layer_norm_backward(&db_ln, &c.ln2, lw.ln2_g, &mut dgain, &mut dbias);
        add_vec(&mut g[idx(ls::LN2_GAIN)], &dgain);
        add_vec(&mut g[idx(ls::LN2_BIAS)], &dbias);

        // attention block
        general_mat_mul(1.0, &c.ctx.t(), &dx, 1.0, &mut g[idx(ls::OUTPUT)]);
        let dctx = dx.dot(&lw.wo.t());
        let mut dq = Array2::zeros(dctx.raw_dim());
        let mut dk = Array2::zeros(dctx.raw_dim());
        let mut dv = Array2::zeros(dctx.raw_dim());
        let mut att = c.att.iter();
        for &(o, t) in segs {
            for h in 0..w.n_heads {
                let sl = s![o..o + t, h * dh..(h + 1) * dh];
                let p = att.next().expect("one matrix per segment and head");
                let dctx_s = dctx.slice(sl);
                let mut ds = dctx_s.dot(&c.v.slice(sl).t());
                dv.slice_mut(sl).assign(&p.t().dot(&dctx_s));
                for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                    let dot = row.dot(&prow);
                    row.zip_mut_with(&prow, |x, &pv| *x = pv * (*x - dot) * scale);
                }
                dq.slice_mut(sl).assign(&ds.dot(&c.k.slice(sl)));
                dk.slice_mut(sl).assign(&ds.t().dot(&c.q.slice(sl)));
            }
        }
        general_mat_mul(1.0, &c.a.t(), &dq, 1.0, &mut g[idx(ls::QUERY)]);
        general_mat_mul(1.0, &c.a.t(), &dk, 1.0, &mut g[idx(ls::KEY)]);
        general_mat_mul(1.0, &c.a.t(), &dv, 1.0, &mut g[idx(ls::VALUE)]);
        let mut da = dq.dot(&lw.wq.t());
        general_mat_mul(1.0, &dk, &lw.wk.t(), 1.0, &mut da);
        general_mat_mul(1.0, &dv, &lw.wv.t(), 1.0, &mut da);
        let mut dgain = Array1::zeros(d);
        let mut dbias = Array1::zeros(d);
        dx += &layer_norm_backward(&da, &c.ln1, lw.ln1_g, &mut dgain, &mut dbias);
        add_vec(&mut g[idx(ls::LN1_GAIN)], &dgain);
        add_vec(&mut g[idx(ls::LN1_BIAS)], &dbias);
    }

    for &(o, len) in segs {
        for p in 0..len {
            let row = dx.row(o + p);
            g[lay.tok_emb()].row_mut(tokens[o + p] as usize).scaled_add(1.0, &row);
            g[lay.pos_emb()].row_mut(p).scaled_add(1.0, &row);
        }
    }
}

/// Mean next-token cross-entropy over all rows and its gradient.
pub fn loss_and_grad(
    cfg: &MicroConfig,
    params: &ParamSet,
    inputs: &[u32],
    targets: &[u32],
    segs: &[(usize, usize)],
) -> Result<(f64, ParamSet)> {
    if inputs.len() != targets.len() {
        return Err(Error::Shape("inputs and targets differ in length".into()));
    }
    let w = Weights::new(cfg, params);
    let fwd = forward_batch(&w, inputs, segs)?;
    if let Some(&t) = targets.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::OutOfRange {
            index: t as usize,
            len: cfg.vocab_size,
        });
    }
    let n = inputs.len() as f64;
    let mut dlogits = fwd.probs.clone();
    let mut loss = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        loss -= fwd.probs[[r, t as usize]].max(f64::MIN_POSITIVE).ln();
        dlogits[[r, t as usize]] -= 1.0;
    }
    dlogits /= n;
    let mut grads = params.zeros_like();
    backward(&w, inputs, segs, &fwd, &dlogits, &mut grads);
    Ok((loss / n, grads))
}

/// Next-token distributions for one sequence, one row per input position.
pub fn forward(ck: &MicroCheckpoint, tokens: &[u32]) -> Result<Array2<f64>> {
    if tokens.is_empty() {
        return Err(Error::Shape("empty token sequence".into()));
    }
    let w = Weights::new(&ck.config, &ck.params);
    Ok(forward_batch(&w, tokens, &[(0, tokens.len())])?.probs)
}
