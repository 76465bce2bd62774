// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic next-token training.
//!
//! Each step draws `batch_size` windows of `context + 1` tokens at uniformly
//! random offsets, takes the mean cross-entropy over every position and
//! applies a momentum-free RMS-normalized update with global-norm clipping.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::loss_and_grad;
use super::{rng_to_bytes, MicroCheckpoint, MicroConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    /// Sequences per step.
    pub batch_size: usize,
    /// Peak learning rate.
    pub lr: f64,
    pub warmup_steps: usize,
    /// Learning rate at the last step, as a fraction of the peak.
    pub final_lr_ratio: f64,
    /// Decay of the squared-gradient running average.
    pub beta: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    /// Steps at which to snapshot; 0 and `steps` are always added.
    pub checkpoint_steps: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 4,
            lr: 2e-3,
            warmup_steps: 200,
            final_lr_ratio: 0.1,
            beta: 0.99,
            eps: 1e-8,
            clip_norm: 1.0,
            checkpoint_steps: Vec::new(),
        }
    }
}

impl TrainConfig {
    /// Learning rate for the `t`-th update (1-based): linear warmup, then
    /// cosine decay to `final_lr_ratio * lr` at `steps`.
    pub fn lr_at(&self, t: usize) -> f64 {
        if t <= self.warmup_steps {
            return self.lr * t as f64 / self.warmup_steps.max(1) as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((t - self.warmup_steps) as f64 / span).min(1.0);
        let floor = self.final_lr_ratio;
        self.lr * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let checks = [
            ("lr", self.lr > 0.0 && self.lr.is_finite()),
            ("final_lr_ratio", (0.0..=1.0).contains(&self.final_lr_ratio)),
            ("beta", (0.0..1.0).contains(&self.beta)),
            ("eps", self.eps > 0.0),
            ("clip_norm", self.clip_norm > 0.0),
        ];
        if let Some((name, _)) = checks.iter().find(|(_, ok)| !ok) {
            return Err(Error::Config(format!("invalid optimizer setting {name}")));
        }
        if self.checkpoint_steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("checkpoint steps must be strictly increasing".into()));
        }
        if let Some(&s) = self.checkpoint_steps.last() {
            if s > self.steps {
                return Err(Error::Config(format!(
                    "checkpoint step {s} is beyond the last step {}",
                    self.steps
                )));
            }
        }
        Ok(())
    }

    fn schedule(&self) -> Vec<usize> {
        let mut s = self.checkpoint_steps.clone();
        s.push(0);
        s.push(self.steps);
        s.sort_unstable();
        s.dedup();
        s
    }

    fn meta(&self) -> Vec<(String, String)> {
        vec![
            (
                "optimizer".into(),
                "rms: v=beta*v+(1-beta)*g^2; theta-=lr_t*g/(sqrt(v/(1-beta^t))+eps); no momentum".into(),
            ),
            (
                "schedule".into(),
                "linear warmup to lr, cosine decay to lr*final_lr_ratio at steps".into(),
            ),
            ("lr".into(), format!("{:?}", self.lr)),
            ("warmup_steps".into(), self.warmup_steps.to_string()),
            ("final_lr_ratio".into(), format!("{:?}", self.final_lr_ratio)),
            ("beta".into(), format!("{:?}", self.beta)),
            ("eps".into(), format!("{:?}", self.eps)),
            ("clip_norm".into(), format!("{:?}", self.clip_norm)),
            ("batch_size".into(), self.batch_size.to_string()),
            ("steps".into(), self.steps.to_string()),
            ("init".into(), "normal(0, 0.02); residual projections / sqrt(2 * n_layers)".into()),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Snapshots in step order, starting at 0 and ending at the last step.
    pub checkpoints: Vec<MicroCheckpoint>,
    /// Mean batch cross-entropy of every step, before its update.
    pub losses: Vec<f64>,
}

impl TrainOutcome {
    pub fn final_checkpoint(&self) -> &MicroCheckpoint {
        self.checkpoints.last().expect("step 0 is always recorded")
    }
}

pub(crate) fn data_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Log-spaced schedule `0, round(last^(i/(count-2)))` for `i = 0..count-1`,
/// deduplicated.
pub fn log_spaced_steps(last: usize, count: usize) -> Vec<usize> {
    let mut out = vec![0];
    if last > 0 && count >= 2 {
        let k = count - 2;
        for i in 0..=k {
            let frac = if k == 0 { 1.0 } else { i as f64 / k as f64 };
            out.push(((last as f64).powf(frac).round() as usize).min(last));
        }
    }
    out.dedup();
    out
}

pub fn train(config: &MicroConfig, tokens: &[u32], tc: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    tc.validate()?;
    let window = config.context + 1;
    if tokens.len() < window {
        return Err(Error::Config(format!(
            "training corpus needs at least {window} tokens, has {}",
            tokens.len()
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(Error::OutOfRange {
            index: t as usize,
            len: config.vocab_size,
        });
    }

    let schedule = tc.schedule();
    let meta = tc.meta();
    let mut ck = MicroCheckpoint::init(config)?;
    ck.meta = meta.clone();
    let mut rng = data_rng(config.seed);
    let mut v = vec![0.0; ck.params.num_values()];
    let mut checkpoints = Vec::with_capacity(schedule.len());
    let mut losses = Vec::with_capacity(tc.steps);
    let mut next_snapshot = schedule.iter().peekable();

    let t_len = config.context;
    let segs: Vec<(usize, usize)> = (0..tc.batch_size).map(|b| (b * t_len, t_len)).collect();
    let mut inputs = Vec::with_capacity(tc.batch_size * t_len);
    let mut targets = Vec::with_capacity(tc.batch_size * t_len);
    let mut beta_pow = 1.0;

    for step in 0..=tc.steps {
        if next_snapshot.peek() == Some(&&step) {
            next_snapshot.next();
            let mut snap = ck.clone();
            snap.step = step;
            snap.rng_state = rng_to_bytes(&rng);
            checkpoints.push(snap);
        }
        if step == tc.steps {
            break;
        }
        inputs.clear();
        targets.clear();
        for _ in 0..tc.batch_size {
            let o = rng.random_range(0..=tokens.len() - window);
            inputs.extend_from_slice(&tokens[o..o + t_len]);
            targets.extend_from_slice(&tokens[o + 1..o + window]);
        }
        let (loss, grads) = loss_and_grad(config, &ck.params, &inputs, &targets, &segs)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        losses.push(loss);

        let g = grads.flat();
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Diverged { step, loss: norm });
        }
        let clip = if norm > tc.clip_norm { tc.clip_norm / norm } else { 1.0 };
        beta_pow *= tc.beta;
        let correction = 1.0 - beta_pow;
        let lr = tc.lr_at(step + 1);
        for ((p, vi), gi) in ck.params.flat_mut().iter_mut().zip(v.iter_mut()).zip(g) {
            let gi = gi * clip;
            *vi = tc.beta * *vi + (1.0 - tc.beta) * gi * gi;
            *p -= lr * gi / ((*vi / correction).sqrt() + tc.eps);
        }
    }
    Ok(TrainOutcome {
        checkpoints,
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::microlm::{make_corpus, CorpusGenerator};

    fn small() -> MicroConfig {
        MicroConfig {
            vocab_size: 32,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            context: 8,
            tied: false,
            head_bias: false,
            seed: 4,
        }
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let c = small();
        let corpus = make_corpus(&c, 200, CorpusGenerator::ZipfUnigram, 1.0, 1).unwrap();
        let tc = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        let out = train(&c, &corpus.tokens, &tc).unwrap();
        assert_eq!(out.checkpoints.len(), 1);
        let init = MicroCheckpoint::init(&c).unwrap();
        assert_eq!(out.checkpoints[0].params, init.params);
        assert_eq!(out.checkpoints[0].rng_state, init.rng_state);
        assert!(out.losses.is_empty());
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let c = small();
        let corpus = make_corpus(&c, 20_000, CorpusGenerator::markov_default(), 1.0, 1).unwrap();
        let tc = TrainConfig {
            steps: 300,
            batch_size: 4,
            lr: 1e-2,
            warmup_steps: 20,
            checkpoint_steps: vec![10, 100],
            ..TrainConfig::default()
        };
        let a = train(&c, &corpus.tokens, &tc).unwrap();
        let b = train(&c, &corpus.tokens, &tc).unwrap();
        let steps: Vec<usize> = a.checkpoints.iter().map(|k| k.step).collect();
        assert_eq!(steps, vec![0, 10, 100, 300]);
        assert_eq!(a.checkpoints, b.checkpoints);
        let head: f64 = a.losses[..20].iter().sum::<f64>() / 20.0;
        let tail: f64 = a.losses[280..].iter().sum::<f64>() / 20.0;
        assert!(tail < head, "{tail} !< {head}");
        assert!(a.final_checkpoint().meta_map().contains_key("optimizer"));
    }

    #[test]
    fn schedule_shape() {
        let tc = TrainConfig {
            steps: 1000,
            lr: 1.0,
            warmup_steps: 100,
            final_lr_ratio: 0.1,
            ..TrainConfig::default()
        };
        assert_eq!(tc.lr_at(50), 0.5);
        assert_eq!(tc.lr_at(100), 1.0);
        assert!((tc.lr_at(550) - 0.55).abs() < 1e-12);
        assert!((tc.lr_at(1000) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_checkpoint_lists() {
        let c = small();
        let corpus = make_corpus(&c, 200, CorpusGenerator::ZipfUnigram, 1.0, 1).unwrap();
        let unsorted = TrainConfig {
            steps: 10,
            checkpoint_steps: vec![5, 2],
            ..TrainConfig::default()
        };
        assert!(matches!(train(&c, &corpus.tokens, &unsorted), Err(Error::Config(_))));
        let beyond = TrainConfig {
            steps: 10,
            checkpoint_steps: vec![11],
            ..TrainConfig::default()
        };
        assert!(train(&c, &corpus.tokens, &beyond).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let c = small();
        let corpus = make_corpus(&c, 500, CorpusGenerator::ZipfUnigram, 1.0, 1).unwrap();
        let tc = TrainConfig {
            steps: 50,
            lr: 1e300,
            warmup_steps: 0,
            clip_norm: f64::MAX,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&c, &corpus.tokens, &tc), Err(Error::Diverged { .. })));
    }

    #[test]
    fn log_spaced_schedule() {
        assert_eq!(
            log_spaced_steps(20_000, 12),
            vec![0, 1, 3, 7, 20, 53, 141, 381, 1025, 2759, 7429, 20_000]
        );
        assert_eq!(log_spaced_steps(0, 12), vec![0]);
        assert_eq!(log_spaced_steps(4, 4), vec![0, 1, 2, 4]);
    }
}
