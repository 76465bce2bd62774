// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded synthetic corpora with Zipf unigram statistics.
//!
//! Token ids are frequency ranks minus one, so token 0 is the most frequent.
//! `markov_bigram` adds sequential structure while keeping the stationary
//! distribution exactly Zipf: each step either redraws from the Zipf law or
//! takes a Metropolis move to one of a few fixed neighbours, and both kernels
//! leave the Zipf law invariant.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::MicroConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorpusGenerator {
    /// Independent draws from the Zipf law.
    ZipfUnigram,
    /// First-order chain: with probability `1 - mixing` a fresh Zipf draw,
    /// otherwise a Metropolis step on a circulant graph with `neighbours`
    /// links per token over a permutation fixed by `structure_seed`.
    MarkovBigram {
        mixing: f64,
        neighbours: usize,
        structure_seed: u64,
    },
}

impl CorpusGenerator {
    pub fn markov_default() -> Self {
        Self::MarkovBigram {
            mixing: 0.5,
            neighbours: 8,
            structure_seed: 0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::ZipfUnigram => "zipf_unigram",
            Self::MarkovBigram { .. } => "markov_bigram",
        }
    }

    fn validate(&self, vocab: usize) -> Result<()> {
        if let Self::MarkovBigram {
            mixing, neighbours, ..
        } = *self
        {
            if !(0.0..=1.0).contains(&mixing) {
                return Err(Error::Config(format!("mixing {mixing} outside [0, 1]")));
            }
            if neighbours == 0 || neighbours % 2 != 0 || neighbours >= vocab {
                return Err(Error::Config(format!(
                    "neighbours must be even, positive and below the vocabulary size, got {neighbours}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub vocab_size: usize,
    pub tokens: Vec<u32>,
    pub zipf_exponent: f64,
    pub seed: u64,
    pub generator: CorpusGenerator,
}

impl SyntheticCorpus {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(Error::Invariant("corpus vocabulary is empty".into()));
        }
        if !self.zipf_exponent.is_finite() {
            return Err(Error::Invariant("non-finite Zipf exponent".into()));
        }
        self.generator.validate(self.vocab_size)?;
        if let Some(&t) = self.tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(Error::OutOfRange {
                index: t as usize,
                len: self.vocab_size,
            });
        }
        Ok(())
    }
}

/// Normalized `k^-s` for ranks `k = 1..=vocab`.
pub fn zipf_weights(vocab: usize, exponent: f64) -> Vec<f64> {
    let raw: Vec<f64> = (1..=vocab).map(|k| (k as f64).powf(-exponent)).collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / z).collect()
}

/// Neighbour lists of the circulant graph: each token links to the
/// `neighbours / 2` tokens on either side of it in a seeded permutation.
fn neighbour_lists(vocab: usize, neighbours: usize, structure_seed: u64) -> Vec<Vec<u32>> {
    let mut order: Vec<u32> = (0..vocab as u32).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(structure_seed));
    let mut lists = vec![Vec::with_capacity(neighbours); vocab];
    for (pos, &tok) in order.iter().enumerate() {
        for off in 1..=neighbours / 2 {
            lists[tok as usize].push(order[(pos + off) % vocab]);
            lists[tok as usize].push(order[(pos + vocab - off) % vocab]);
        }
    }
    lists
}

/// Full transition matrix of a generator (rows sum to one).
pub fn transition_matrix(vocab: usize, exponent: f64, generator: CorpusGenerator) -> Result<Vec<Vec<f64>>> {
    generator.validate(vocab)?;
    let pi = zipf_weights(vocab, exponent);
    Ok(match generator {
        CorpusGenerator::ZipfUnigram => vec![pi; vocab],
        CorpusGenerator::MarkovBigram {
            mixing,
            neighbours,
            structure_seed,
        } => {
            let lists = neighbour_lists(vocab, neighbours, structure_seed);
            (0..vocab)
                .map(|i| {
                    let mut row: Vec<f64> = pi.iter().map(|p| (1.0 - mixing) * p).collect();
                    let mut stay = mixing;
                    for &j in &lists[i] {
                        let m = mixing / neighbours as f64 * (pi[j as usize] / pi[i]).min(1.0);
                        row[j as usize] += m;
                        stay -= m;
                    }
                    row[i] += stay;
                    row
                })
                .collect()
        }
    })
}

pub fn make_corpus(
    config: &MicroConfig,
    length: usize,
    generator: CorpusGenerator,
    zipf_exponent: f64,
    seed: u64,
) -> Result<SyntheticCorpus> {
    if length < config.context {
        return Err(Error::Config(format!(
            "corpus length {length} is shorter than the context {}",
            config.context
        )));
    }
    if !zipf_exponent.is_finite() || zipf_exponent < 0.0 {
        return Err(Error::Config(format!("invalid Zipf exponent {zipf_exponent}")));
    }
    let vocab = config.vocab_size;
    generator.validate(vocab)?;
    let pi = zipf_weights(vocab, zipf_exponent);
    let unigram = WeightedIndex::new(&pi).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens = match generator {
        CorpusGenerator::ZipfUnigram => (0..length).map(|_| unigram.sample(&mut rng) as u32).collect(),
        CorpusGenerator::MarkovBigram {
            mixing,
            neighbours,
            structure_seed,
        } => {
            let lists = neighbour_lists(vocab, neighbours, structure_seed);
            let mut cur = unigram.sample(&mut rng);
            let mut out = Vec::with_capacity(length);
            for _ in 0..length {
                out.push(cur as u32);
                cur = if rng.random::<f64>() >= mixing {
                    unigram.sample(&mut rng)
                } else {
                    let j = lists[cur][rng.random_range(0..neighbours)] as usize;
                    if rng.random::<f64>() < pi[j] / pi[cur] {
                        j
                    } else {
                        cur
                    }
                };
            }
            out
        }
    };
    Ok(SyntheticCorpus {
        vocab_size: vocab,
        tokens,
        zipf_exponent,
        seed,
        generator,
    })
}

/// Consecutive chunks of `len` tokens; a shorter final chunk is kept.
pub fn split_sequences(tokens: &[u32], len: usize) -> Vec<Vec<u32>> {
    if len == 0 {
        return Vec::new();
    }
    tokens.chunks(len).map(<[u32]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::CorpusFreq;

    fn cfg() -> MicroConfig {
        MicroConfig::default()
    }

    /// Least-squares slope of log count against log rank.
    fn rank_frequency_slope(counts: &[u64]) -> f64 {
        let mut sorted: Vec<u64> = counts.iter().copied().filter(|c| *c > 0).collect();
        sorted.sort_unstable_by(|a, b| b.cmp(a));
        let xs: Vec<f64> = (1..=sorted.len()).map(|k| (k as f64).ln()).collect();
        let ys: Vec<f64> = sorted.iter().map(|c| (*c as f64).ln()).collect();
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        sxy / sxx
    }

    #[test]
    fn same_seed_same_tokens() {
        for g in [CorpusGenerator::ZipfUnigram, CorpusGenerator::markov_default()] {
            let a = make_corpus(&cfg(), 5000, g, 1.0, 7).unwrap();
            let b = make_corpus(&cfg(), 5000, g, 1.0, 7).unwrap();
            assert_eq!(a, b);
            let c = make_corpus(&cfg(), 5000, g, 1.0, 8).unwrap();
            assert_ne!(a.tokens, c.tokens);
        }
    }

    #[test]
    fn counts_conserve_length() {
        let c = make_corpus(&cfg(), 12_345, CorpusGenerator::markov_default(), 1.0, 1).unwrap();
        let f = CorpusFreq::from_tokens(256, &c.tokens).unwrap();
        assert_eq!(f.total, 12_345);
        assert_eq!(f.counts.iter().sum::<u64>(), 12_345);
    }

    #[test]
    fn rank_frequency_slope_near_minus_one() {
        for g in [CorpusGenerator::ZipfUnigram, CorpusGenerator::markov_default()] {
            let c = make_corpus(&cfg(), 1_000_000, g, 1.0, 3).unwrap();
            let f = CorpusFreq::from_tokens(256, &c.tokens).unwrap();
            let slope = rank_frequency_slope(&f.counts);
            assert!((slope + 1.0).abs() <= 0.1, "{}: slope {slope}", g.name());
        }
    }

    #[test]
    fn bigram_chain_leaves_zipf_invariant() {
        let pi = zipf_weights(64, 1.2);
        let t = transition_matrix(64, 1.2, CorpusGenerator::markov_default()).unwrap();
        for row in &t {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|p| *p >= 0.0));
        }
        for j in 0..64 {
            let next: f64 = (0..64).map(|i| pi[i] * t[i][j]).sum();
            assert!((next - pi[j]).abs() < 1e-14);
        }
    }

    #[test]
    fn bigram_empirical_transitions_match_matrix() {
        let c = MicroConfig {
            vocab_size: 16,
            d_model: 4,
            ..MicroConfig::default()
        };
        let g = CorpusGenerator::MarkovBigram {
            mixing: 0.7,
            neighbours: 4,
            structure_seed: 5,
        };
        let corpus = make_corpus(&c, 400_000, g, 1.0, 9).unwrap();
        let t = transition_matrix(16, 1.0, g).unwrap();
        let mut counts = vec![vec![0u64; 16]; 16];
        for w in corpus.tokens.windows(2) {
            counts[w[0] as usize][w[1] as usize] += 1;
        }
        // most frequent token has plenty of outgoing transitions
        let total: u64 = counts[0].iter().sum();
        for j in 0..16 {
            let emp = counts[0][j] as f64 / total as f64;
            assert!((emp - t[0][j]).abs() < 0.01, "{j}: {emp} vs {}", t[0][j]);
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(make_corpus(&cfg(), 10, CorpusGenerator::ZipfUnigram, 1.0, 1).is_err());
        let bad = CorpusGenerator::MarkovBigram {
            mixing: 1.5,
            neighbours: 8,
            structure_seed: 0,
        };
        assert!(make_corpus(&cfg(), 100, bad, 1.0, 1).is_err());
        let odd = CorpusGenerator::MarkovBigram {
            mixing: 0.5,
            neighbours: 3,
            structure_seed: 0,
        };
        assert!(make_corpus(&cfg(), 100, odd, 1.0, 1).is_err());
        assert!(make_corpus(&cfg(), 100, CorpusGenerator::ZipfUnigram, f64::NAN, 1).is_err());
    }

    #[test]
    fn split_keeps_remainder() {
        let t: Vec<u32> = (0..10).collect();
        let s = split_sequences(&t, 4);
        assert_eq!(s, vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7], vec![8, 9]]);
    }
}
