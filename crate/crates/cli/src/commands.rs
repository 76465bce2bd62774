// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};

use emprobe::dynamics::{default_groups, trace};
use emprobe::microlm::{
    accumulate_probs_with, log_spaced_steps, make_corpus, split_sequences, train as train_model, CorpusGenerator,
    GenerateOptions, MicroCheckpoint, MicroConfig, SyntheticCorpus, TrainConfig,
};
use emprobe::pipeline::{
    self, checkpoint_file_name, heldout_cross_entropy, pca2d_csv, sparsity_csv, to_json, unigram_entropy, Evaluator,
    MicroPruneEvaluator, PipelineConfig,
};
use emprobe::probe::{finalize_avg_prob, pca_projection_2d, sparsity_report};
use emprobe::prune::{prune_sweep, write_sweeps_csv};
use emprobe::steer::{apply_plan, build_plan, evaluate_alphas, SteerEval};
use emprobe::store::write_atomic;
use emprobe::{fit_encoding, read_record, write_record, CorpusFreq, EmbeddingMatrix, EncodingFit, Error, Record, Result};
use serde::Serialize;

use crate::manifest::Recorder;
use crate::pattern;
use crate::{CorpusArgs, DynamicsArgs, EvalArgs, FitArgs, GeneratorKind, PipelineArgs, PruneArgs, SteerArgs, TrainArgs};

const SEED_VAR: &str = "EMPROBE_SEED";

/// `EMPROBE_SEED` when set, else `fallback`.
fn seed_override(fallback: Option<u64>) -> Result<Option<u64>> {
    match std::env::var(SEED_VAR) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_VAR}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(fallback),
    }
}

fn sibling_manifest(out: &Path, explicit: Option<&PathBuf>) -> PathBuf {
    explicit.cloned().unwrap_or_else(|| {
        let mut name = out.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        out.with_file_name(name)
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn load_checkpoint(path: &Path) -> Result<MicroCheckpoint> {
    read_record(path)?.into_checkpoint()
}

fn load_corpus(path: &Path) -> Result<SyntheticCorpus> {
    read_record(path)?.into_corpus()
}

fn load_sequences(path: &Path, len: usize, max: Option<usize>) -> Result<Vec<Vec<u32>>> {
    let mut seqs = split_sequences(&load_corpus(path)?.tokens, len);
    if let Some(m) = max {
        if m == 0 {
            return Err(Error::Config("sequence limit must be positive".into()));
        }
        seqs.truncate(m);
    }
    Ok(seqs)
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    write_atomic(path, &to_json(v)?)
}

pub fn corpus(a: &CorpusArgs) -> Result<()> {
    let mut rec = Recorder::new("corpus", a);
    let seed = seed_override(Some(a.seed))?.unwrap_or(a.seed);
    let generator = match a.generator {
        GeneratorKind::ZipfUnigram => CorpusGenerator::ZipfUnigram,
        GeneratorKind::MarkovBigram => CorpusGenerator::MarkovBigram {
            mixing: a.mixing,
            neighbours: a.neighbours,
            structure_seed: a.structure_seed,
        },
    };
    if a.tokens == 0 {
        return Err(Error::Config("corpus needs at least one token".into()));
    }
    let cfg = MicroConfig {
        vocab_size: a.vocab_size,
        context: 1,
        ..MicroConfig::default()
    };
    let c = make_corpus(&cfg, a.tokens, generator, a.zipf_exponent, seed)?;
    if let Some(freq) = &a.freq_out {
        write_record(freq, &Record::CorpusFreq(CorpusFreq::from_tokens(c.vocab_size, &c.tokens)?))?;
        rec.output(freq);
    }
    write_record(&a.out, &Record::Corpus(c))?;
    rec.output(&a.out);
    rec.finish(&sibling_manifest(&a.out, a.manifest.as_ref()))
}

fn model_config(a: &TrainArgs) -> Result<MicroConfig> {
    let mut cfg = match &a.config {
        Some(p) => MicroConfig::from_kv(&std::fs::read_to_string(p).map_err(|e| Error::Io {
            path: p.clone(),
            source: e,
        })?)?,
        None => MicroConfig::default(),
    };
    let set = |v: Option<usize>, slot: &mut usize| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    set(a.vocab_size, &mut cfg.vocab_size);
    set(a.d_model, &mut cfg.d_model);
    set(a.layers, &mut cfg.n_layers);
    set(a.heads, &mut cfg.n_heads);
    set(a.d_ff, &mut cfg.d_ff);
    set(a.context, &mut cfg.context);
    cfg.tied |= a.tied;
    cfg.head_bias |= a.head_bias;
    if let Some(s) = seed_override(a.seed)? {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut rec = Recorder::new("train", a);
    let cfg = model_config(a)?;
    let defaults = TrainConfig::default();
    let tc = TrainConfig {
        steps: a.steps,
        batch_size: a.batch_size.unwrap_or(defaults.batch_size),
        lr: a.lr.unwrap_or(defaults.lr),
        warmup_steps: a.warmup_steps.unwrap_or(defaults.warmup_steps),
        checkpoint_steps: if a.checkpoint_steps.is_empty() {
            log_spaced_steps(a.steps, a.checkpoints)
        } else {
            a.checkpoint_steps.clone()
        },
        ..defaults
    };
    tc.validate()?;
    create_dir(&a.out_dir)?;
    let tokens = match &a.corpus {
        Some(p) => {
            rec.input(p);
            let c = load_corpus(p)?;
            if c.vocab_size != cfg.vocab_size {
                return Err(Error::Config(format!(
                    "corpus vocabulary {} differs from model vocabulary {}",
                    c.vocab_size, cfg.vocab_size
                )));
            }
            c.tokens
        }
        None => {
            let c = make_corpus(&cfg, a.corpus_tokens, CorpusGenerator::markov_default(), 1.0, cfg.seed)?;
            let path = a.out_dir.join("corpus_train.bin");
            write_record(&path, &Record::Corpus(c.clone()))?;
            rec.output(&path);
            c.tokens
        }
    };
    let outcome = train_model(&cfg, &tokens, &tc)?;
    for ck in &outcome.checkpoints {
        let path = a.out_dir.join(checkpoint_file_name(ck.step));
        write_record(&path, &Record::Checkpoint(ck.clone()))?;
        rec.output(&path);
    }
    rec.finish(&a.out_dir.join("manifest.json"))
}

#[derive(Serialize)]
struct EvalReport {
    positions: u64,
    sequences: usize,
    cross_entropy: f64,
    data_unigram_entropy: f64,
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let mut rec = Recorder::new("eval", a);
    let ck = load_checkpoint(&a.checkpoint)?;
    rec.input(&a.checkpoint);
    let data = load_sequences(&a.data, a.seq_len.unwrap_or(ck.config.context), a.max_sequences)?;
    rec.input(&a.data);
    let stats = accumulate_probs_with(&ck, &data, a.exclude_last)?;
    if let Some(report) = &a.report {
        let tokens: Vec<u32> = data.concat();
        let r = EvalReport {
            positions: stats.positions,
            sequences: data.len(),
            cross_entropy: heldout_cross_entropy(&ck, &data)?,
            data_unigram_entropy: unigram_entropy(&CorpusFreq::from_tokens(ck.config.vocab_size, &tokens)?),
        };
        write_json(report, &r)?;
        rec.output(report);
    }
    write_record(&a.out, &Record::ProbStats(stats))?;
    rec.output(&a.out);
    rec.finish(&sibling_manifest(&a.out, a.manifest.as_ref()))
}

fn load_embedding(ck: Option<&PathBuf>, matrix: Option<&PathBuf>, rec: &mut Recorder) -> Result<EmbeddingMatrix> {
    match (ck, matrix) {
        (Some(p), _) => {
            rec.input(p);
            load_checkpoint(p)?.output_embedding()
        }
        (None, Some(p)) => {
            rec.input(p);
            read_record(p)?.into_matrix()
        }
        (None, None) => Err(Error::Config("either a checkpoint or a matrix is required".into())),
    }
}

pub fn fit(a: &FitArgs) -> Result<()> {
    let mut rec = Recorder::new("fit", a);
    let emb = load_embedding(a.checkpoint.as_ref(), a.matrix.as_ref(), &mut rec)?;
    let stats = read_record(&a.probstats)?.into_probstats()?;
    rec.input(&a.probstats);
    let alpha = finalize_avg_prob(&stats)?;
    let fit = fit_encoding(&alpha, &emb, a.floor)?;
    let sparsity = sparsity_report(&alpha, &emb, a.floor)?;
    let pca = pca_projection_2d(&alpha, &emb)?;
    create_dir(&a.out_dir)?;
    let d = &a.out_dir;
    write_json(&d.join("fit.json"), &fit)?;
    write_record(d.join("fit.bin"), &Record::Fit(fit))?;
    write_atomic(&d.join("sparsity.csv"), &sparsity_csv(&sparsity)?)?;
    write_atomic(&d.join("pca2d.csv"), &pca2d_csv(&pca)?)?;
    for n in ["fit.json", "fit.bin", "sparsity.csv", "pca2d.csv"] {
        rec.output(d.join(n));
    }
    rec.finish(&d.join("manifest.json"))
}

#[derive(Serialize)]
struct SteerReport {
    token: usize,
    scale: f64,
    b: emprobe::steer::Softness,
    sig_transform: emprobe::steer::SigTransform,
    detect_sequences: Option<usize>,
    e_local: Option<f64>,
    e_id: Option<f64>,
    e_ood: Option<f64>,
    kl_retained: Option<f64>,
    measured_scale: Option<f64>,
}

pub fn steer(a: &SteerArgs) -> Result<()> {
    let mut rec = Recorder::new("steer", a);
    if !(a.scale > 0.0) || !a.scale.is_finite() {
        return Err(Error::Config(format!("scale must be positive and finite, got {}", a.scale)));
    }
    let ck = match &a.checkpoint {
        Some(p) => {
            rec.input(p);
            Some(load_checkpoint(p)?)
        }
        None => None,
    };
    let emb = match (&ck, &a.matrix) {
        (Some(c), _) => c.output_embedding()?,
        (None, Some(p)) => {
            rec.input(p);
            read_record(p)?.into_matrix()?
        }
        (None, None) => return Err(Error::Config("either a checkpoint or a matrix is required".into())),
    };
    if a.token >= emb.rows() {
        return Err(Error::Config(format!("token {} is outside the vocabulary of {}", a.token, emb.rows())));
    }
    let seq_len = ck.as_ref().map(|c| c.config.context);
    let mut read_set = |p: &Option<PathBuf>, max: Option<usize>| -> Result<Option<Vec<Vec<u32>>>> {
        match (p, seq_len) {
            (Some(p), Some(len)) => {
                rec.input(p);
                Ok(Some(load_sequences(p, len, max)?))
            }
            (Some(_), None) => Err(Error::Config("evaluation sets need a checkpoint".into())),
            (None, _) => Ok(None),
        }
    };
    let detect = read_set(&a.detect, a.detect_size)?;
    let test = read_set(&a.test, None)?;
    let ood = read_set(&a.ood, None)?;

    let fit: EncodingFit = match (&a.fit, &detect, &ck) {
        (Some(p), _, _) => {
            rec.input(p);
            read_record(p)?.into_fit()?
        }
        (None, Some(d), Some(c)) => {
            fit_encoding(&finalize_avg_prob(&accumulate_probs_with(c, d, a.exclude_last)?)?, &emb, a.floor)?
        }
        _ => return Err(Error::Config("steering needs --fit or a checkpoint with --detect".into())),
    };
    let plan = build_plan(&fit, a.token, a.scale, a.b, a.sig_transform)?;
    let edited = apply_plan(&emb, &plan)?;
    create_dir(&a.out_dir)?;
    let d = &a.out_dir;
    write_json(&d.join("plan.json"), &plan)?;
    rec.output(d.join("plan.json"));

    let mut evals: [Option<SteerEval>; 3] = [None; 3];
    if let Some(c) = &ck {
        for (slot, set) in evals.iter_mut().zip([&detect, &test, &ood]) {
            if let Some(data) = set {
                let ev = Evaluator::new(c, data, a.exclude_last)?;
                let before = finalize_avg_prob(&ev.base_stats()?)?;
                let after = finalize_avg_prob(&ev.stats_with_delta(&emb, a.token, &plan.delta)?)?;
                *slot = Some(evaluate_alphas(&before, &after, a.token, a.scale)?);
            }
        }
        let path = d.join("steered.bin");
        write_record(&path, &Record::Checkpoint(c.with_output_embedding(&edited)?))?;
        rec.output(path);
    } else {
        let path = d.join("steered_matrix.bin");
        write_record(&path, &Record::Matrix(edited))?;
        rec.output(path);
    }
    // retained-token KL and r̂ come from the in-domain set when present
    let headline = evals[1].or(evals[0]).or(evals[2]);
    let report = SteerReport {
        token: a.token,
        scale: a.scale,
        b: a.b,
        sig_transform: a.sig_transform,
        detect_sequences: detect.as_ref().map(Vec::len),
        e_local: evals[0].map(|e| e.scale_error),
        e_id: evals[1].map(|e| e.scale_error),
        e_ood: evals[2].map(|e| e.scale_error),
        kl_retained: headline.map(|e| e.kl_retained),
        measured_scale: headline.map(|e| e.measured_scale),
    };
    write_json(&d.join("eval.json"), &report)?;
    rec.output(d.join("eval.json"));
    rec.finish(&d.join("manifest.json"))
}

pub fn prune(a: &PruneArgs) -> Result<()> {
    let mut rec = Recorder::new("prune", a);
    let ck = load_checkpoint(&a.checkpoint)?;
    rec.input(&a.checkpoint);
    let emb = ck.output_embedding()?;
    let fit = match (&a.fit, &a.probstats) {
        (Some(p), _) => {
            rec.input(p);
            read_record(p)?.into_fit()?
        }
        (None, Some(p)) => {
            rec.input(p);
            fit_encoding(&finalize_avg_prob(&read_record(p)?.into_probstats()?)?, &emb, a.floor)?
        }
        (None, None) => return Err(Error::Config("pruning needs --fit or --probstats".into())),
    };
    let data = load_sequences(&a.eval, ck.config.context, None)?;
    rec.input(&a.eval);
    let ev = Evaluator::new(&ck, &data, a.exclude_last)?;
    let prefixes: Vec<Vec<u32>> = data.iter().take(a.gen_samples).map(|s| vec![s[0]]).collect();
    let opts = GenerateOptions {
        n_tokens: a.gen_tokens,
        temperature: 1.0,
        greedy: false,
        seed: a.gen_seed,
    };
    let mut pe = MicroPruneEvaluator::new(&ck, &ev, prefixes, opts)?;
    let sweep = prune_sweep(&emb, &fit, &a.ratios, a.order, a.seed, &mut pe)?;
    let mut buf = Vec::new();
    write_sweeps_csv(std::slice::from_ref(&sweep), &mut buf)?;
    write_atomic(&a.out, &buf)?;
    rec.output(&a.out);
    rec.finish(&sibling_manifest(&a.out, a.manifest.as_ref()))
}

pub fn dynamics(a: &DynamicsArgs) -> Result<()> {
    let mut rec = Recorder::new("dynamics", a);
    let mut paths = Vec::new();
    for p in &a.checkpoints {
        paths.extend(pattern::expand(p)?);
    }
    paths.sort();
    paths.dedup();
    let mut cks = Vec::with_capacity(paths.len());
    for p in &paths {
        cks.push(load_checkpoint(p)?);
        rec.input(p);
    }
    cks.sort_by_key(|c| c.step);
    if cks.first().map(|c| c.step) != Some(0) {
        return Err(Error::Config("the step-0 checkpoint is required".into()));
    }
    let freq = match read_record(&a.corpus)? {
        Record::Corpus(c) => CorpusFreq::from_tokens(c.vocab_size, &c.tokens)?,
        Record::CorpusFreq(f) => f,
        other => {
            return Err(Error::WrongKind {
                expected: "corpus",
                found: other.kind().name(),
            })
        }
    };
    rec.input(&a.corpus);
    let t = trace(&cks, &freq, &default_groups(&cks[0]), a.floor)?;
    write_atomic(&a.out, &pipeline::dynamics_csv(&t)?)?;
    rec.output(&a.out);
    rec.finish(&sibling_manifest(&a.out, a.manifest.as_ref()))
}

pub fn pipeline(a: &PipelineArgs) -> Result<()> {
    let mut rec = Recorder::new("pipeline", a);
    let mut cfg = match &a.config {
        Some(p) => {
            rec.input(p);
            let bytes = std::fs::read(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            serde_json::from_slice::<PipelineConfig>(&bytes)
                .map_err(|e| Error::Config(format!("pipeline config: {e}")))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(s) = seed_override(a.seed)? {
        cfg.model.seed = s;
    }
    cfg.model.validate()?;
    let run = pipeline::run(&cfg)?;
    create_dir(&a.out_dir)?;
    for f in pipeline::write_outputs(&run, &a.out_dir)? {
        rec.output(a.out_dir.join(f));
    }
    rec.finish(&a.out_dir.join("manifest.json"))
}
