use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::corpus::Corpus;
use crate::error::{Error, Result};

pub const MIN_RETRIEVAL_QUERIES: usize = 10;

/// Query positions (indices into `Corpus::queries`) for each side of a split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

fn test_count(n: usize) -> usize {
    // nearest integer to n / 10
    (n + 5) / 10
}

/// Stratified 9:1 split. Each label stratum is ordered by query id, shuffled
/// with a seeded stream, and its first `round(n / 10)` entries become test.
pub fn split_train_test(corpus: &Corpus, seed: u64) -> Result<Split> {
    let found = corpus.retrieval_queries().count();
    if found < MIN_RETRIEVAL_QUERIES {
        return Err(Error::TooSmall { need: MIN_RETRIEVAL_QUERIES, found });
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (stream, label) in [(0u64, true), (1u64, false)] {
        let mut stratum: Vec<usize> = corpus
            .queries()
            .iter()
            .enumerate()
            .filter(|(_, q)| q.usage_label == label)
            .map(|(i, _)| i)
            .collect();
        stratum.sort_by(|&a, &b| corpus.queries()[a].query_id.cmp(&corpus.queries()[b].query_id));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        stratum.shuffle(&mut rng);
        let k = test_count(stratum.len());
        test.extend_from_slice(&stratum[..k]);
        train.extend_from_slice(&stratum[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::corpus::{QueryRecord, ToolRecord};
    use std::collections::BTreeSet;

    fn corpus(n_ret: usize, n_det: usize) -> Corpus {
        let tools = vec![ToolRecord { tool_id: "t".into(), description: "d".into() }];
        let mut qs = Vec::new();
        for i in 0..n_ret {
            qs.push(QueryRecord::new(format!("r{i}"), "x", &["t"]));
        }
        for i in 0..n_det {
            qs.push(QueryRecord::new(format!("d{i}"), "x", &[]));
        }
        Corpus::from_records(tools, qs).unwrap()
    }

    #[test]
    fn ninety_ten_per_stratum() {
        let c = corpus(100, 100);
        let s = split_train_test(&c, 7).unwrap();
        let count = |idx: &[usize], label| idx.iter().filter(|&&i| c.queries()[i].usage_label == label).count();
        assert_eq!((count(&s.train, true), count(&s.test, true)), (90, 10));
        assert_eq!((count(&s.train, false), count(&s.test, false)), (90, 10));
    }

    #[test]
    fn deterministic_and_partitioning() {
        let c = corpus(37, 12);
        let a = split_train_test(&c, 3).unwrap();
        assert_eq!(a, split_train_test(&c, 3).unwrap());
        assert_ne!(a, split_train_test(&c, 4).unwrap());
        let tr: BTreeSet<_> = a.train.iter().collect();
        let te: BTreeSet<_> = a.test.iter().collect();
        assert!(tr.is_disjoint(&te));
        assert_eq!(tr.len() + te.len(), c.queries().len());
    }

    #[test]
    fn too_small() {
        assert!(matches!(split_train_test(&corpus(9, 50), 0), Err(Error::TooSmall { found: 9, .. })));
    }
}
