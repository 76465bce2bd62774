// SPDX-License-Identifier: MIT OR Apache-2.0

use emprobe::microlm::{CorpusGenerator, MicroCheckpoint, MicroConfig, SyntheticCorpus};
use emprobe::store::{decode, encode};
use emprobe::{CorpusFreq, EmbeddingMatrix, EncodingFit, Error, ProbStats, Record};
use proptest::prelude::*;

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![
        -1e6..1e6f64,
        Just(0.0),
        Just(-0.0),
        Just(f64::MIN_POSITIVE),
        Just(f64::MAX),
        Just(5e-324),
    ]
}

fn matrix() -> impl Strategy<Value = Record> {
    (1usize..12, 1usize..6, any::<bool>(), any::<bool>()).prop_flat_map(|(r, c, tied, labelled)| {
        proptest::collection::vec(finite(), r * c).prop_map(move |v| {
            let mut m = EmbeddingMatrix::from_vec(r, c, v).unwrap().with_tied(tied);
            if labelled {
                m = m.with_labels((0..r).map(|i| format!("tok \"{i}\"\n")).collect()).unwrap();
            }
            Record::Matrix(m)
        })
    })
}

fn probstats() -> impl Strategy<Value = Record> {
    (proptest::collection::vec(0.0..1.0f64, 1..20), 1u64..1000).prop_map(|(w, n)| {
        let total: f64 = w.iter().sum::<f64>() + 1e-3;
        let mut sum: Vec<f64> = w.iter().map(|x| x / total * n as f64).collect();
        let rest = n as f64 - sum.iter().sum::<f64>();
        sum[0] += rest.max(0.0);
        Record::ProbStats(ProbStats { sum, positions: n })
    })
}

fn corpus_freq() -> impl Strategy<Value = Record> {
    proptest::collection::vec(0u64..1_000_000, 1..30)
        .prop_filter("nonempty", |c| c.iter().sum::<u64>() > 0)
        .prop_map(|counts| {
            let total = counts.iter().sum();
            Record::CorpusFreq(CorpusFreq { counts, total })
        })
}

fn fit() -> impl Strategy<Value = Record> {
    (1usize..6).prop_flat_map(|d| {
        (
            proptest::collection::vec(finite(), d),
            proptest::collection::vec(0.0..=1.0f64, d),
            proptest::collection::vec(0.0..10.0f64, d),
            finite(),
            0.0..=1.0f64,
            -2.0..=1.0f64,
            1usize..100,
            proptest::option::of(1e-300..1e-3f64),
        )
            .prop_map(move |(direction, p_values, std_errors, intercept, ip, adj, dof, floor)| {
                Record::Fit(EncodingFit {
                    direction,
                    intercept,
                    p_values,
                    std_errors,
                    intercept_p_value: ip,
                    r2: adj.max(0.0),
                    adj_r2: adj,
                    dof,
                    n_obs: dof + d + 1,
                    residual_variance: 0.5,
                    floor,
                })
            })
    })
}

fn corpus() -> impl Strategy<Value = Record> {
    (10usize..60, any::<bool>(), any::<u64>(), 0.5..2.0f64).prop_flat_map(|(v, markov, seed, s)| {
        proptest::collection::vec(0..v as u32, 0..200).prop_map(move |tokens| {
            let generator = if markov {
                CorpusGenerator::MarkovBigram {
                    mixing: 0.25,
                    neighbours: 4,
                    structure_seed: seed ^ 1,
                }
            } else {
                CorpusGenerator::ZipfUnigram
            };
            Record::Corpus(SyntheticCorpus {
                vocab_size: v,
                tokens,
                zipf_exponent: s,
                seed,
                generator,
            })
        })
    })
}

fn checkpoint() -> impl Strategy<Value = Record> {
    (any::<bool>(), any::<bool>(), 0u64..50, 0usize..100_000).prop_map(|(tied, head_bias, seed, step)| {
        let cfg = MicroConfig {
            vocab_size: 12,
            d_model: 4,
            n_layers: 1,
            n_heads: 2,
            d_ff: 6,
            context: 5,
            tied,
            head_bias,
            seed,
        };
        let mut ck = MicroCheckpoint::init(&cfg).unwrap();
        ck.step = step;
        ck.meta = vec![("optimizer".into(), "rmsprop".into()), ("note".into(), "a=b\tc".into())];
        Record::Checkpoint(ck)
    })
}

fn any_record() -> impl Strategy<Value = Record> {
    prop_oneof![matrix(), probstats(), corpus_freq(), fit(), corpus(), checkpoint()]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn encode_decode_is_identity(rec in any_record()) {
        let bytes = encode(&rec).unwrap();
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(&back, &rec);
        // bit-exact floats, not merely equal ones
        prop_assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn every_truncation_is_rejected(rec in any_record(), frac in 0.0..1.0f64) {
        let bytes = encode(&rec).unwrap();
        let cut = ((bytes.len() as f64) * frac) as usize;
        prop_assert!(decode(&bytes[..cut]).is_err());
    }

    #[test]
    fn damaged_magic_is_not_a_store_file(rec in any_record(), at in 0usize..8, flip in 1u8..=255) {
        let mut bytes = encode(&rec).unwrap();
        bytes[at] ^= flip;
        prop_assert!(matches!(decode(&bytes), Err(Error::NotAStoreFile)));
    }

    #[test]
    fn files_round_trip_through_disk(rec in any_record()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.bin");
        emprobe::write_record(&path, &rec).unwrap();
        prop_assert_eq!(emprobe::read_record(&path).unwrap(), rec);
        let names: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        prop_assert_eq!(names.len(), 1);
    }
}

#[test]
fn unknown_kind_and_version_are_reported() {
    let rec = Record::CorpusFreq(CorpusFreq {
        counts: vec![1, 2],
        total: 3,
    });
    let mut bytes = encode(&rec).unwrap();
    bytes[8] = 9;
    assert!(matches!(decode(&bytes), Err(Error::UnknownKind(9))));
    let mut bytes = encode(&rec).unwrap();
    bytes[9] = 2;
    assert!(matches!(decode(&bytes), Err(Error::VersionMismatch { found: 2, expected: 1 })));
}

#[test]
fn invalid_records_are_never_written() {
    let bad = Record::ProbStats(ProbStats {
        sum: vec![0.5, 0.1],
        positions: 1,
    });
    assert!(matches!(encode(&bad), Err(Error::Invariant(_))));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.bin");
    assert!(emprobe::write_record(&path, &bad).is_err());
    assert!(!path.exists());
}
