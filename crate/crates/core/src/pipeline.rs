// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end study on the reference model: train with log-spaced
//! checkpoints, fit the encoding on a detect set, steer, prune and trace the
//! training dynamics, writing every artifact to one directory.

use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{default_groups, trace, DynamicsTrace};
use crate::error::{Error, Result};
use crate::microlm::{
    accumulate_probs_with, generate_batch, position_probs, log_spaced_steps, make_corpus, split_sequences, train, CorpusGenerator,
    GenerateOptions, HeadCache, MicroCheckpoint, MicroConfig, SyntheticCorpus, TrainConfig, TrainOutcome,
};
use crate::probe::stats::approx_error_bound;
use crate::probe::{
    finalize_avg_prob, fit_encoding, pca_projection_2d, random_target_adj_r2, sparsity_report, EncodingFit,
    SparsityReport,
};
use crate::prune::{generation_similarity, prune_sweep, write_sweeps_csv, PruneEvaluator, PruneOrder, PruneSweep};
use crate::steer::{apply_plan, build_plan_with_direction, evaluate_alphas, SigTransform, Softness};
use crate::store::{write_atomic, write_record, CorpusFreq, EmbeddingMatrix, ProbStats, Record};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub model: MicroConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    /// Number of log-spaced checkpoints, step 0 and the last step included.
    pub n_checkpoints: usize,
    pub generator: CorpusGenerator,
    pub zipf_exponent: f64,
    pub train_tokens: usize,
    pub detect_tokens: usize,
    pub test_tokens: usize,
    pub ood_tokens: usize,
    pub train_seed: u64,
    pub detect_seed: u64,
    pub test_seed: u64,
    pub ood_seed: u64,
    pub floor: f64,
    pub exclude_last: bool,
    pub steer_tokens: usize,
    pub steer_seed: u64,
    /// Upward scales; each is also applied as its reciprocal.
    pub scales: Vec<f64>,
    pub softness: Softness,
    pub sig_transform: SigTransform,
    /// Detect-set sizes, in sequences, for the few-shot fits.
    pub few_shot_sizes: Vec<usize>,
    pub prune_ratios: Vec<f64>,
    pub prune_seed: u64,
    pub gen_samples: usize,
    pub gen_tokens: usize,
    pub gen_seed: u64,
    /// Held-out positions used for the α-versus-frequency distance curve.
    pub tv_positions: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            model: MicroConfig {
                seed: 1,
                ..MicroConfig::default()
            },
            steps: 20_000,
            batch_size: 4,
            lr: 2e-3,
            warmup_steps: 200,
            n_checkpoints: 12,
            generator: CorpusGenerator::markov_default(),
            zipf_exponent: 1.0,
            train_tokens: 1_000_000,
            detect_tokens: 100_000,
            test_tokens: 100_000,
            ood_tokens: 100_000,
            train_seed: 1,
            detect_seed: 2,
            test_seed: 3,
            ood_seed: 4,
            floor: crate::probe::DEFAULT_FLOOR,
            exclude_last: false,
            steer_tokens: 10,
            steer_seed: 7,
            scales: vec![1.1, 1.2, 1.5, 2.0, 5.0, 10.0, 20.0],
            softness: Softness::Finite(2.0),
            sig_transform: SigTransform::OneMinusP,
            few_shot_sizes: vec![2, 8, 32, 128],
            prune_ratios: (0..=10).map(|i| f64::from(i) / 10.0).collect(),
            prune_seed: 11,
            gen_samples: 512,
            gen_tokens: 64,
            gen_seed: 13,
            tv_positions: 10_240,
        }
    }
}

impl PipelineConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            warmup_steps: self.warmup_steps,
            checkpoint_steps: log_spaced_steps(self.steps, self.n_checkpoints),
            ..TrainConfig::default()
        }
    }

    /// Every expected scale of the sweep in increasing order: reciprocals of
    /// the upward scales, then the scales themselves.
    pub fn signed_scales(&self) -> Vec<f64> {
        let mut s: Vec<f64> = self.scales.iter().map(|r| 1.0 / r).chain(self.scales.iter().copied()).collect();
        s.sort_by(f64::total_cmp);
        s
    }
}

/// Corpora and the sequence splits cut from them.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub train: SyntheticCorpus,
    pub freq: CorpusFreq,
    pub detect: Vec<Vec<u32>>,
    pub test: Vec<Vec<u32>>,
    pub ood: Vec<Vec<u32>>,
}

pub fn make_datasets(cfg: &PipelineConfig) -> Result<Datasets> {
    let m = &cfg.model;
    let corpus = |len, seed, g| make_corpus(m, len, g, cfg.zipf_exponent, seed);
    let train = corpus(cfg.train_tokens, cfg.train_seed, cfg.generator)?;
    let freq = CorpusFreq::from_tokens(m.vocab_size, &train.tokens)?;
    let split = |c: SyntheticCorpus| split_sequences(&c.tokens, m.context);
    Ok(Datasets {
        detect: split(corpus(cfg.detect_tokens, cfg.detect_seed, cfg.generator)?),
        test: split(corpus(cfg.test_tokens, cfg.test_seed, cfg.generator)?),
        ood: split(corpus(cfg.ood_tokens, cfg.ood_seed, CorpusGenerator::ZipfUnigram)?),
        train,
        freq,
    })
}

/// Averaged statistics of one dataset under edited output embeddings.
pub enum Evaluator {
    /// Untied heads: cached final hidden states.
    Cached(HeadCache),
    /// Tied heads: every edit reruns the model.
    Full {
        ck: MicroCheckpoint,
        data: Vec<Vec<u32>>,
        exclude_last: bool,
    },
}

impl Evaluator {
    pub fn new(ck: &MicroCheckpoint, data: &[Vec<u32>], exclude_last: bool) -> Result<Self> {
        if ck.config.tied {
            Ok(Self::Full {
                ck: ck.clone(),
                data: data.to_vec(),
                exclude_last,
            })
        } else {
            Ok(Self::Cached(HeadCache::build(ck, data, exclude_last)?))
        }
    }

    pub fn base_stats(&self) -> Result<ProbStats> {
        match self {
            Self::Cached(c) => Ok(c.base_stats()),
            Self::Full { ck, data, exclude_last } => accumulate_probs_with(ck, data, *exclude_last),
        }
    }

    pub fn stats_with_embedding(&self, emb: &EmbeddingMatrix) -> Result<ProbStats> {
        match self {
            Self::Cached(c) => c.stats_with_embedding(emb),
            Self::Full { ck, data, exclude_last } => {
                accumulate_probs_with(&ck.with_output_embedding(emb)?, data, *exclude_last)
            }
        }
    }

    /// Statistics with `token`'s row of the base embedding moved by `delta`.
    pub fn stats_with_delta(&self, base: &EmbeddingMatrix, token: usize, delta: &[f64]) -> Result<ProbStats> {
        match self {
            Self::Cached(c) => {
                let row: Vec<f64> = base.row(token).iter().zip(delta).map(|(a, b)| a + b).collect();
                c.stats_with_row(token, &row)
            }
            Self::Full { .. } => {
                let plan_emb = add_row_delta(base, token, delta)?;
                self.stats_with_embedding(&plan_emb)
            }
        }
    }
}

fn add_row_delta(emb: &EmbeddingMatrix, token: usize, delta: &[f64]) -> Result<EmbeddingMatrix> {
    let plan = crate::steer::SteeringPlan {
        token,
        scale: 1.0,
        softness: Softness::NegInf,
        sig_transform: SigTransform::OneMinusP,
        weights: vec![0.0; delta.len()],
        delta: delta.to_vec(),
    };
    apply_plan(emb, &plan)
}

/// One steering edit evaluated on the detect, test and out-of-domain sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteerRecord {
    /// `fit`, `shuffled` (permuted slopes) or `random` (Gaussian slopes).
    pub variant: String,
    /// Detect sequences behind the fit; 0 means the full detect set.
    pub detect_sequences: usize,
    pub token: usize,
    pub scale: f64,
    pub e_local: f64,
    pub e_id: f64,
    pub e_ood: f64,
    /// Retained-token KL on the test set.
    pub kl_retained: f64,
    /// Measured scale on the test set.
    pub measured_scale: f64,
}

/// Base statistics of the three evaluation sets.
pub struct SteerContext<'a> {
    pub emb: &'a EmbeddingMatrix,
    pub sets: [&'a Evaluator; 3],
    pub alphas: [Vec<f64>; 3],
}

impl<'a> SteerContext<'a> {
    pub fn new(emb: &'a EmbeddingMatrix, local: &'a Evaluator, id: &'a Evaluator, ood: &'a Evaluator) -> Result<Self> {
        let alphas = [
            finalize_avg_prob(&local.base_stats()?)?,
            finalize_avg_prob(&id.base_stats()?)?,
            finalize_avg_prob(&ood.base_stats()?)?,
        ];
        Ok(Self {
            emb,
            sets: [local, id, ood],
            alphas,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn sweep(
        &self,
        variant: &str,
        detect_sequences: usize,
        direction: &[f64],
        p_values: &[f64],
        tokens: &[usize],
        scales: &[f64],
        softness: Softness,
        sig: SigTransform,
    ) -> Result<Vec<SteerRecord>> {
        let mut out = Vec::with_capacity(tokens.len() * scales.len());
        for &token in tokens {
            for &r in scales {
                let plan = build_plan_with_direction(direction, p_values, token, r, softness, sig)?;
                let mut evals = Vec::with_capacity(3);
                for (set, alpha) in self.sets.iter().zip(&self.alphas) {
                    let after = finalize_avg_prob(&set.stats_with_delta(self.emb, token, &plan.delta)?)?;
                    evals.push(evaluate_alphas(alpha, &after, token, r)?);
                }
                out.push(SteerRecord {
                    variant: variant.to_owned(),
                    detect_sequences,
                    token,
                    scale: r,
                    e_local: evals[0].scale_error,
                    e_id: evals[1].scale_error,
                    e_ood: evals[2].scale_error,
                    kl_retained: evals[1].kl_retained,
                    measured_scale: evals[1].measured_scale,
                });
            }
        }
        Ok(out)
    }
}

/// `count` distinct seeded tokens among those whose averaged probability
/// leaves room for the largest upward scale (`alpha * max_scale < 1`).
pub fn choose_steer_tokens(alpha: &[f64], count: usize, max_scale: f64, seed: u64) -> Result<Vec<usize>> {
    let eligible: Vec<usize> = (0..alpha.len()).filter(|&w| alpha[w] * max_scale < 1.0).collect();
    if eligible.len() < count {
        return Err(Error::Config(format!(
            "only {} tokens can be scaled by {max_scale}",
            eligible.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = eligible.choose_multiple(&mut rng, count).copied().collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Mean `|ln r|` over the given scales: the error of leaving the model
/// unedited.
pub fn unedited_error(scales: &[f64]) -> f64 {
    scales.iter().map(|r| r.ln().abs()).sum::<f64>() / scales.len() as f64
}

/// Pruning evaluation on the reference model: averaged statistics on a fixed
/// set plus generation similarity against the unpruned model under shared
/// random numbers.
pub struct MicroPruneEvaluator<'a> {
    pub ck: &'a MicroCheckpoint,
    pub eval: &'a Evaluator,
    pub prefixes: Vec<Vec<u32>>,
    pub opts: GenerateOptions,
    reference: Vec<Vec<u32>>,
}

impl<'a> MicroPruneEvaluator<'a> {
    pub fn new(ck: &'a MicroCheckpoint, eval: &'a Evaluator, prefixes: Vec<Vec<u32>>, opts: GenerateOptions) -> Result<Self> {
        let reference = generate_batch(ck, &prefixes, opts)?;
        Ok(Self {
            ck,
            eval,
            prefixes,
            opts,
            reference,
        })
    }
}

impl PruneEvaluator for MicroPruneEvaluator<'_> {
    fn averaged(&mut self, emb: &EmbeddingMatrix) -> Result<Vec<f64>> {
        finalize_avg_prob(&self.eval.stats_with_embedding(emb)?)
    }

    fn similarity(&mut self, emb: &EmbeddingMatrix) -> Result<Option<f64>> {
        if self.prefixes.is_empty() {
            return Ok(None);
        }
        let pruned = self.ck.with_output_embedding(emb)?;
        let gens = generate_batch(&pruned, &self.prefixes, self.opts)?;
        Ok(Some(generation_similarity(&self.reference, &gens, self.ck.config.vocab_size)))
    }
}

/// Mean next-token cross-entropy (nats) over in-sequence targets.
pub fn heldout_cross_entropy(ck: &MicroCheckpoint, seqs: &[Vec<u32>]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    let mut ce_of = |probs: ndarray::ArrayView2<'_, f64>, seq: &[u32]| {
        for (p, t) in seq.iter().skip(1).enumerate() {
            total -= probs[[p, *t as usize]].max(f64::MIN_POSITIVE).ln();
            n += 1;
        }
    };
    for seq in seqs.iter().filter(|s| s.len() > 1) {
        let probs = crate::microlm::forward(ck, seq)?;
        ce_of(probs.view(), seq);
    }
    if n == 0 {
        return Err(Error::Shape("no next-token targets in the held-out set".into()));
    }
    Ok(total / n as f64)
}

/// Entropy (nats) of the empirical unigram distribution.
pub fn unigram_entropy(freq: &CorpusFreq) -> f64 {
    freq.frequencies()
        .iter()
        .filter(|f| **f > 0.0)
        .map(|f| -f * f.ln())
        .sum()
}

/// Counts tokens whose actual log-mean/mean-log gap exceeds the bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproxCheck {
    pub tokens: usize,
    pub violations: usize,
    /// Largest `actual / bound` over tokens with a positive bound.
    pub max_ratio: f64,
}

/// Checks the bound on every column of a positions × vocabulary matrix.
pub fn approx_check(probs: ndarray::ArrayView2<'_, f64>) -> Result<ApproxCheck> {
    let mut violations = 0;
    let mut max_ratio: f64 = 0.0;
    for col in probs.columns() {
        let (actual, bound) = approx_error_bound(&col.to_vec())?;
        if actual > bound {
            violations += 1;
        }
        if bound > 0.0 {
            max_ratio = max_ratio.max(actual / bound);
        }
    }
    Ok(ApproxCheck {
        tokens: probs.ncols(),
        violations,
        max_ratio,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotFit {
    pub sequences: usize,
    pub positions: u64,
    pub adj_r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub config: PipelineConfig,
    pub checkpoint_steps: Vec<usize>,
    pub loss_first_100: f64,
    pub loss_last_100: f64,
    pub heldout_cross_entropy: f64,
    pub unigram_entropy: f64,
    pub fit: EncodingFit,
    pub random_target_adj_r2: f64,
    pub approx: ApproxCheck,
    pub sparsity: SparsityReport,
    pub steer_tokens: Vec<usize>,
    pub unedited_error: f64,
    pub steer: Vec<SteerRecord>,
    pub few_shot: Vec<FewShotFit>,
    pub prune: Vec<PruneSweep>,
    pub dynamics: DynamicsTrace,
    /// Total-variation distance between held-out α and corpus frequency at
    /// every checkpoint.
    pub alpha_freq_tv: Vec<f64>,
}

/// Everything produced by [`run`].
pub struct PipelineRun {
    pub report: PipelineReport,
    pub outcome: TrainOutcome,
    pub datasets: Datasets,
    pub output_embedding: EmbeddingMatrix,
    pub detect_stats: ProbStats,
    pub pca2d: Vec<(usize, f64, f64, f64)>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Builds the corpora, trains, and analyzes the result.
pub fn run(cfg: &PipelineConfig) -> Result<PipelineRun> {
    let data = make_datasets(cfg)?;
    let outcome = train(&cfg.model, &data.train.tokens, &cfg.train_config())?;
    analyze(cfg, data, outcome)
}

/// Every measurement on an already trained run. `outcome.losses` may be
/// empty when the checkpoints were loaded from disk.
pub fn analyze(cfg: &PipelineConfig, data: Datasets, outcome: TrainOutcome) -> Result<PipelineRun> {
    let ck = outcome.final_checkpoint().clone();
    let emb = ck.output_embedding()?;

    let detect = Evaluator::new(&ck, &data.detect, cfg.exclude_last)?;
    let test = Evaluator::new(&ck, &data.test, cfg.exclude_last)?;
    let ood = Evaluator::new(&ck, &data.ood, cfg.exclude_last)?;

    let detect_stats = detect.base_stats()?;
    let alpha = finalize_avg_prob(&detect_stats)?;
    let fit = fit_encoding(&alpha, &emb, cfg.floor)?;
    let sparsity = sparsity_report(&alpha, &emb, cfg.floor)?;
    let pca2d = pca_projection_2d(&alpha, &emb)?;
    let random_target = random_target_adj_r2(&emb, 10, cfg.steer_seed)?;
    let approx = match &detect {
        Evaluator::Cached(c) => approx_check(c.probs())?,
        Evaluator::Full { ck, data, exclude_last } => {
            approx_check(position_probs(ck, data, *exclude_last)?.view())?
        }
    };

    // steering
    let max_scale = cfg.scales.iter().copied().fold(1.0, f64::max);
    let tokens = choose_steer_tokens(&alpha, cfg.steer_tokens, max_scale, cfg.steer_seed)?;
    let scales = cfg.signed_scales();
    let ctx = SteerContext::new(&emb, &detect, &test, &ood)?;
    let (soft, sig) = (cfg.softness, cfg.sig_transform);
    let mut steer = ctx.sweep("fit", 0, &fit.direction, &fit.p_values, &tokens, &scales, soft, sig)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.steer_seed ^ 0x5eed);
    let mut shuffled = fit.direction.clone();
    shuffled.shuffle(&mut rng);
    steer.extend(ctx.sweep("shuffled", 0, &shuffled, &fit.p_values, &tokens, &scales, soft, sig)?);
    let random: Vec<f64> = (0..fit.dims()).map(|_| StandardNormal.sample(&mut rng)).collect();
    steer.extend(ctx.sweep("random", 0, &random, &fit.p_values, &tokens, &scales, soft, sig)?);

    let mut few_shot = Vec::new();
    for &k in &cfg.few_shot_sizes {
        let subset = &data.detect[..k.min(data.detect.len())];
        let stats = accumulate_probs_with(&ck, subset, cfg.exclude_last)?;
        let f = fit_encoding(&finalize_avg_prob(&stats)?, &emb, cfg.floor)?;
        few_shot.push(FewShotFit {
            sequences: subset.len(),
            positions: stats.positions,
            adj_r2: f.adj_r2,
        });
        steer.extend(ctx.sweep("fit", subset.len(), &f.direction, &f.p_values, &tokens, &scales, soft, sig)?);
    }

    // pruning on the out-of-domain set
    let prefixes: Vec<Vec<u32>> = data.ood.iter().take(cfg.gen_samples).map(|s| vec![s[0]]).collect();
    let opts = GenerateOptions {
        n_tokens: cfg.gen_tokens,
        temperature: 1.0,
        greedy: false,
        seed: cfg.gen_seed,
    };
    let mut pe = MicroPruneEvaluator::new(&ck, &ood, prefixes, opts)?;
    let prune = [PruneOrder::Ascending, PruneOrder::Descending, PruneOrder::Random]
        .into_iter()
        .map(|order| prune_sweep(&emb, &fit, &cfg.prune_ratios, order, cfg.prune_seed, &mut pe))
        .collect::<Result<Vec<_>>>()?;

    // dynamics
    let groups = default_groups(&ck);
    let dynamics = trace(&outcome.checkpoints, &data.freq, &groups, cfg.floor)?;
    let freq = data.freq.frequencies();
    let tv_seqs: Vec<Vec<u32>> = {
        let per = cfg.model.context.max(1);
        data.test.iter().take(cfg.tv_positions.div_ceil(per)).cloned().collect()
    };
    let alpha_freq_tv = outcome
        .checkpoints
        .iter()
        .map(|c| {
            let a = finalize_avg_prob(&accumulate_probs_with(c, &tv_seqs, cfg.exclude_last)?)?;
            Ok(0.5 * a.iter().zip(&freq).map(|(x, y)| (x - y).abs()).sum::<f64>())
        })
        .collect::<Result<Vec<_>>>()?;

    let losses = &outcome.losses;
    let head = &losses[..losses.len().min(100)];
    let tail = &losses[losses.len().saturating_sub(100)..];
    let report = PipelineReport {
        config: cfg.clone(),
        checkpoint_steps: outcome.checkpoints.iter().map(|c| c.step).collect(),
        loss_first_100: mean(head),
        loss_last_100: mean(tail),
        heldout_cross_entropy: heldout_cross_entropy(&ck, &data.test)?,
        unigram_entropy: unigram_entropy(&data.freq),
        fit,
        random_target_adj_r2: random_target,
        approx,
        sparsity,
        steer_tokens: tokens,
        unedited_error: unedited_error(&scales),
        steer,
        few_shot,
        prune,
        dynamics,
        alpha_freq_tv,
    };
    Ok(PipelineRun {
        report,
        outcome,
        datasets: data,
        output_embedding: emb,
        detect_stats,
        pca2d,
    })
}

fn csv_err(e: impl std::fmt::Display) -> Error {
    Error::Invariant(format!("csv: {e}"))
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    w.into_inner().map_err(csv_err)
}

fn num(v: f64) -> String {
    format!("{v:?}")
}

pub fn sparsity_csv(rep: &SparsityReport) -> Result<Vec<u8>> {
    let n = rep.dim_slopes.len().max(rep.pc_spearman.len());
    let cell = |v: Option<&f64>| v.map(|x| num(*x)).unwrap_or_default();
    csv_bytes(
        &["index", "pc_spearman", "pc_variance_ratio", "dim_slope", "dim_spearman"],
        (0..n).map(|i| {
            vec![
                i.to_string(),
                cell(rep.pc_spearman.get(i)),
                cell(rep.pc_variance_ratio.get(i)),
                cell(rep.dim_slopes.get(i)),
                cell(rep.dim_spearman.get(i)),
            ]
        }),
    )
}

pub fn pca2d_csv(rows: &[(usize, f64, f64, f64)]) -> Result<Vec<u8>> {
    csv_bytes(
        &["token", "pc1", "pc2", "percentile"],
        rows.iter().map(|(t, a, b, p)| vec![t.to_string(), num(*a), num(*b), num(*p)]),
    )
}

pub fn steer_csv(records: &[SteerRecord]) -> Result<Vec<u8>> {
    csv_bytes(
        &[
            "variant",
            "detect_sequences",
            "token",
            "scale",
            "e_local",
            "e_id",
            "e_ood",
            "kl_retained",
            "measured_scale",
        ],
        records.iter().map(|r| {
            vec![
                r.variant.clone(),
                r.detect_sequences.to_string(),
                r.token.to_string(),
                num(r.scale),
                num(r.e_local),
                num(r.e_id),
                num(r.e_ood),
                num(r.kl_retained),
                num(r.measured_scale),
            ]
        }),
    )
}

pub fn prune_csv(sweeps: &[PruneSweep]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_sweeps_csv(sweeps, &mut buf)?;
    Ok(buf)
}

pub fn dynamics_csv(t: &DynamicsTrace) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    t.write_csv(&mut buf)?;
    Ok(buf)
}

pub fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_vec_pretty(v).map_err(|e| Error::Invariant(format!("json: {e}")))?;
    s.push(b'\n');
    Ok(s)
}

/// File name of a checkpoint in a run directory.
pub fn checkpoint_file_name(step: usize) -> String {
    format!("step_{step:08}.bin")
}

/// Writes every artifact of a run under `dir` and returns the file list
/// relative to `dir`, in write order.
pub fn write_outputs(run: &PipelineRun, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let ckdir = dir.join("checkpoints");
    std::fs::create_dir_all(&ckdir).map_err(|e| Error::io(&ckdir, e))?;
    let mut put_record = |name: PathBuf, rec: Record| -> Result<()> {
        write_record(dir.join(&name), &rec)?;
        written.push(name);
        Ok(())
    };
    for ck in &run.outcome.checkpoints {
        put_record(
            Path::new("checkpoints").join(checkpoint_file_name(ck.step)),
            Record::Checkpoint(ck.clone()),
        )?;
    }
    put_record("corpus_train.bin".into(), Record::Corpus(run.datasets.train.clone()))?;
    put_record("corpus_freq.bin".into(), Record::CorpusFreq(run.datasets.freq.clone()))?;
    put_record("probstats_detect.bin".into(), Record::ProbStats(run.detect_stats.clone()))?;
    put_record("output_embedding.bin".into(), Record::Matrix(run.output_embedding.clone()))?;
    put_record("fit.bin".into(), Record::Fit(run.report.fit.clone()))?;

    let r = &run.report;
    let files: [(&str, Vec<u8>); 8] = [
        ("train_config.txt", r.config.model.to_kv().into_bytes()),
        ("fit.json", to_json(&r.fit)?),
        ("sparsity.csv", sparsity_csv(&r.sparsity)?),
        ("pca2d.csv", pca2d_csv(&run.pca2d)?),
        ("steer.csv", steer_csv(&r.steer)?),
        ("prune.csv", prune_csv(&r.prune)?),
        ("dynamics.csv", dynamics_csv(&r.dynamics)?),
        ("report.json", to_json(r)?),
    ];
    for (name, bytes) in files {
        write_atomic(&dir.join(name), &bytes)?;
        written.push(name.into());
    }
    Ok(written)
}
