// SPDX-License-Identifier: MIT OR Apache-2.0

//! A small deterministic causal language model used to produce every piece of
//! desk-scale evidence: averaged probabilities, embedding matrices and
//! training checkpoints.
//!
//! The architecture is a pre-norm transformer decoder with learned positional
//! embeddings, tanh-approximated GELU feed-forward blocks and a softmax head
//! `softmax(E_out · h + b)`. Everything runs in `f64`.

mod corpus;
mod generate;
mod head;
pub(crate) mod model;
mod params;
mod train;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use corpus::{make_corpus, split_sequences, transition_matrix, zipf_weights, CorpusGenerator, SyntheticCorpus};
pub use generate::{generate, generate_batch, GenerateOptions};
pub use head::{accumulate_probs, accumulate_probs_with, position_probs, HeadCache};
pub use model::{forward, loss_and_grad};
pub use params::{init_params, param_shapes, ParamSet, INIT_STD, LN_EPS};
pub use train::{log_spaced_steps, train, TrainConfig, TrainOutcome};

use crate::error::{Error, Result};
use crate::store::EmbeddingMatrix;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MicroConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub context: usize,
    pub tied: bool,
    #[serde(default)]
    pub head_bias: bool,
    pub seed: u64,
}

impl Default for MicroConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            d_ff: 256,
            context: 64,
            tied: false,
            head_bias: false,
            seed: 0,
        }
    }
}

impl MicroConfig {
    /// Width of the output embedding as seen by the probe (one extra constant
    /// dimension when the head carries a bias).
    pub fn output_dims(&self) -> usize {
        self.d_model + usize::from(self.head_bias)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("context", self.context),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size <= self.output_dims() + 2 {
            return Err(Error::Config(format!(
                "vocab_size {} must exceed embedding width + 2 = {}",
                self.vocab_size,
                self.output_dims() + 2
            )));
        }
        if self.vocab_size > u32::MAX as usize {
            return Err(Error::Config("vocab_size does not fit a token id".into()));
        }
        Ok(())
    }

    /// Plain-text `key=value` lines in a fixed order.
    pub fn to_kv(&self) -> String {
        format!(
            "vocab_size={}\nd_model={}\nn_layers={}\nn_heads={}\nd_ff={}\ncontext={}\ntied={}\nhead_bias={}\nseed={}\n",
            self.vocab_size,
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.d_ff,
            self.context,
            self.tied,
            self.head_bias,
            self.seed
        )
    }

    /// Parses `key=value` lines over the defaults. Blank lines and lines
    /// starting with `#` are ignored. Unknown keys are errors.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
        }
        match key {
            "vocab_size" => self.vocab_size = parse(key, value)?,
            "d_model" => self.d_model = parse(key, value)?,
            "n_layers" => self.n_layers = parse(key, value)?,
            "n_heads" => self.n_heads = parse(key, value)?,
            "d_ff" => self.d_ff = parse(key, value)?,
            "context" => self.context = parse(key, value)?,
            "tied" => self.tied = parse(key, value)?,
            "head_bias" => self.head_bias = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }
}

impl fmt::Display for MicroConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_kv())
    }
}

/// Parameters at one training step plus the data-sampling RNG state.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroCheckpoint {
    pub config: MicroConfig,
    pub step: usize,
    pub params: ParamSet,
    pub rng_state: Vec<u8>,
    /// Free-form provenance (optimizer scheme, schedule), in insertion order.
    pub meta: Vec<(String, String)>,
}

impl MicroCheckpoint {
    /// Freshly initialized parameters at step 0.
    pub fn init(config: &MicroConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            step: 0,
            params: init_params(config),
            rng_state: rng_to_bytes(&train::data_rng(config.seed)),
            meta: Vec::new(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expected = param_shapes(&self.config);
        let actual: Vec<(String, usize, usize)> = self
            .params
            .shapes()
            .map(|(n, r, c)| (n.to_owned(), r, c))
            .collect();
        if expected != actual {
            return Err(Error::Invariant(
                "checkpoint tensors do not match the model config".into(),
            ));
        }
        if let Some(i) = self.params.flat().iter().position(|v| !v.is_finite()) {
            return Err(Error::Invariant(format!("non-finite parameter at offset {i}")));
        }
        Ok(())
    }

    /// The data-sampling generator as it stood at this step.
    pub fn data_rng(&self) -> Result<ChaCha8Rng> {
        rng_from_bytes(&self.rng_state)
    }

    pub fn meta_map(&self) -> BTreeMap<&str, &str> {
        self.meta
            .iter()
            .map(|(k, v)| (k.as_str(), v.as_str()))
            .collect()
    }

    fn tensor(&self, name: &str) -> Array2<f64> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("validated checkpoint lacks {name}"))
            .to_owned()
    }

    /// The input embedding `E_in` (|V|×d).
    pub fn input_embedding(&self) -> Result<EmbeddingMatrix> {
        Ok(EmbeddingMatrix::new(self.tensor("tok_emb"))?.with_tied(self.config.tied))
    }

    /// The output embedding `E_out` as the probe sees it. With a head bias
    /// the bias is appended as a final column, matching a hidden state with
    /// a constant trailing 1.
    pub fn output_embedding(&self) -> Result<EmbeddingMatrix> {
        let base = if self.config.tied {
            self.tensor("tok_emb")
        } else {
            self.tensor("out_emb")
        };
        let data = if self.config.head_bias {
            let bias = self.tensor("head_bias");
            let (v, d) = base.dim();
            Array2::from_shape_fn((v, d + 1), |(i, j)| if j < d { base[[i, j]] } else { bias[[0, i]] })
        } else {
            base
        };
        Ok(EmbeddingMatrix::new(data)?.with_tied(self.config.tied))
    }

    /// A copy with the output embedding replaced. For tied models this also
    /// replaces the input embedding, since both are one tensor.
    pub fn with_output_embedding(&self, emb: &EmbeddingMatrix) -> Result<Self> {
        let (v, d) = (self.config.vocab_size, self.config.d_model);
        if emb.rows() != v || emb.cols() != self.config.output_dims() {
            return Err(Error::Shape(format!(
                "output embedding must be {v}x{}, got {}x{}",
                self.config.output_dims(),
                emb.rows(),
                emb.cols()
            )));
        }
        let mut next = self.clone();
        let name = if self.config.tied { "tok_emb" } else { "out_emb" };
        let src = emb.data();
        next.params
            .get_mut(name)
            .expect("validated layout")
            .assign(&src.slice(ndarray::s![.., 0..d]));
        if self.config.head_bias {
            let col = src.column(d);
            next.params
                .get_mut("head_bias")
                .expect("validated layout")
                .row_mut(0)
                .assign(&col);
        }
        Ok(next)
    }
}

pub(crate) fn rng_to_bytes(rng: &ChaCha8Rng) -> Vec<u8> {
    let mut out = Vec::with_capacity(56);
    out.extend_from_slice(&rng.get_seed());
    out.extend_from_slice(&rng.get_stream().to_le_bytes());
    out.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    out
}

pub(crate) fn rng_from_bytes(bytes: &[u8]) -> Result<ChaCha8Rng> {
    use rand::SeedableRng;
    if bytes.len() != 56 {
        return Err(Error::Invariant(format!(
            "rng state must be 56 bytes, got {}",
            bytes.len()
        )));
    }
    let seed: [u8; 32] = bytes[..32].try_into().expect("length checked");
    let stream = u64::from_le_bytes(bytes[32..40].try_into().expect("length checked"));
    let pos = u128::from_le_bytes(bytes[40..56].try_into().expect("length checked"));
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(pos);
    Ok(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small() -> MicroConfig {
        MicroConfig {
            vocab_size: 16,
            d_model: 4,
            n_layers: 1,
            n_heads: 2,
            d_ff: 8,
            context: 6,
            tied: false,
            head_bias: false,
            seed: 3,
        }
    }

    #[test]
    fn default_config_matches_documented_values() {
        let c = MicroConfig::default();
        assert_eq!(
            (c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.d_ff, c.context, c.tied),
            (256, 64, 2, 2, 256, 64, false)
        );
        c.validate().unwrap();
    }

    #[test]
    fn config_validation() {
        let mut c = small();
        c.n_heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = small();
        c.vocab_size = 6;
        assert!(c.validate().is_err());
        let mut c = small();
        c.vocab_size = 7;
        c.validate().unwrap();
        c.head_bias = true;
        assert!(c.validate().is_err());
    }

    #[test]
    fn kv_round_trip() {
        let mut c = small();
        c.tied = true;
        c.seed = 99;
        assert_eq!(MicroConfig::from_kv(&c.to_kv()).unwrap(), c);
        let parsed = MicroConfig::from_kv("# comment\n\nseed = 5\n").unwrap();
        assert_eq!(parsed.seed, 5);
        assert_eq!(parsed.vocab_size, 256);
        assert!(MicroConfig::from_kv("colour=blue").is_err());
        assert!(MicroConfig::from_kv("seed").is_err());
        assert!(MicroConfig::from_kv("tied=maybe").is_err());
    }

    #[test]
    fn rng_state_round_trip() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        rng.set_stream(4);
        let _: u64 = rng.random();
        let _: u32 = rng.random();
        let mut restored = rng_from_bytes(&rng_to_bytes(&rng)).unwrap();
        for _ in 0..10 {
            assert_eq!(rng.random::<u64>(), restored.random::<u64>());
        }
        assert!(rng_from_bytes(&[0; 10]).is_err());
    }

    #[test]
    fn output_embedding_round_trip_with_bias() {
        let mut cfg = small();
        cfg.head_bias = true;
        let mut ck = MicroCheckpoint::init(&cfg).unwrap();
        ck.params
            .get_mut("head_bias")
            .unwrap()
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = i as f64 * 0.1);
        let emb = ck.output_embedding().unwrap();
        assert_eq!(emb.cols(), 5);
        assert_eq!(emb.row(3)[4], 0.30000000000000004);
        let back = ck.with_output_embedding(&emb).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn tied_output_edit_moves_input_embedding() {
        let mut cfg = small();
        cfg.tied = true;
        let ck = MicroCheckpoint::init(&cfg).unwrap();
        assert!(ck.params.get("out_emb").is_none());
        let zero = EmbeddingMatrix::new(Array2::zeros((16, 4))).unwrap();
        let edited = ck.with_output_embedding(&zero).unwrap();
        assert!(edited.input_embedding().unwrap().as_slice().iter().all(|v| *v == 0.0));
        assert!(edited.output_embedding().unwrap().tied());
    }

    #[test]
    fn validate_rejects_mismatched_layout() {
        let ck = MicroCheckpoint::init(&small()).unwrap();
        ck.validate().unwrap();
        let mut other = ck.clone();
        other.config.d_ff = 9;
        assert!(other.validate().is_err());
        let mut bad = ck;
        bad.params.flat_mut()[0] = f64::NAN;
        assert!(bad.validate().is_err());
    }
}
