//! Generated corpora with known intent structure, embedded with [`hash_embed`].

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::corpus::{Corpus, QueryRecord, ToolRecord};
use super::dataset::Dataset;
use super::embedding::EmbeddingMatrix;
use super::hash_embed::hash_embed;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub clusters: usize,
    pub tools_per_cluster: usize,
    pub retrieval_queries: usize,
    pub detection_queries: usize,
    /// Distinct golden sets per cluster; queries paraphrase one of them.
    pub intents_per_cluster: usize,
    /// Largest golden set; sizes are drawn uniformly from `1..=max_golden`.
    pub max_golden: usize,
    pub dim: usize,
    /// Words shared by all clusters mixed into every query.
    pub filler_words: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            clusters: 5,
            tools_per_cluster: 4,
            retrieval_queries: 50,
            detection_queries: 50,
            intents_per_cluster: 3,
            max_golden: 3,
            dim: 64,
            filler_words: 3,
            seed: 17,
        }
    }
}

const FILLER: &[&str] = &[
    "please", "can", "you", "help", "me", "with", "the", "a", "some", "now", "today", "quickly", "for", "my",
];
const CHAT: &[&str] = &[
    "tell", "joke", "poem", "story", "explain", "why", "love", "feel", "think", "opinion", "history", "meaning",
    "philosophy", "friend", "advice", "write",
];

fn topic_word(cluster: usize, j: usize) -> String {
    format!("topic{cluster}x{j}")
}

fn tool_word(cluster: usize, tool: usize, j: usize) -> String {
    format!("api{cluster}t{tool}w{j}")
}

pub fn tool_id(cluster: usize, tool: usize) -> String {
    format!("tool_{cluster}_{tool}")
}

/// Cluster `c` owns tools `tool_c_*` and a few intents, each a fixed golden
/// set within the cluster. Every retrieval query paraphrases one intent of its
/// cluster: topic words, one word naming each golden tool, and filler.
/// Detection queries use an unrelated vocabulary.
pub fn generate(cfg: &SyntheticConfig) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let topics_per_cluster = 4;
    let words_per_tool = 3;

    let mut tools = Vec::new();
    let mut tool_vecs = Vec::new();
    for c in 0..cfg.clusters {
        for t in 0..cfg.tools_per_cluster {
            let mut words: Vec<String> = (0..2).map(|j| topic_word(c, j)).collect();
            words.extend((0..words_per_tool).map(|j| tool_word(c, t, j)));
            let description = words.join(" ");
            tool_vecs.push((tool_id(c, t), hash_embed(&description, cfg.dim, cfg.seed)?));
            tools.push(ToolRecord { tool_id: tool_id(c, t), description });
        }
    }

    let intents: Vec<Vec<Vec<usize>>> = (0..cfg.clusters)
        .map(|_| {
            (0..cfg.intents_per_cluster.max(1))
                .map(|_| {
                    let k = rng.gen_range(1..=cfg.max_golden.min(cfg.tools_per_cluster));
                    let mut members: Vec<usize> = (0..cfg.tools_per_cluster).collect();
                    members.shuffle(&mut rng);
                    members.truncate(k);
                    members
                })
                .collect()
        })
        .collect();

    let mut queries = Vec::new();
    let mut query_vecs = Vec::new();
    let width = (cfg.retrieval_queries + cfg.detection_queries).to_string().len();
    for i in 0..cfg.retrieval_queries {
        let c = i % cfg.clusters;
        let members = intents[c].choose(&mut rng).expect("at least one intent");
        let golden: Vec<String> = members.iter().map(|&t| tool_id(c, t)).collect();
        let mut words: Vec<String> = (0..2).map(|_| topic_word(c, rng.gen_range(0..topics_per_cluster))).collect();
        for &t in members {
            words.push(tool_word(c, t, rng.gen_range(0..words_per_tool)));
        }
        words.extend((0..cfg.filler_words).map(|_| FILLER.choose(&mut rng).unwrap().to_string()));
        words.shuffle(&mut rng);
        let text = words.join(" ");
        let id = format!("q{i:0width$}");
        query_vecs.push((id.clone(), hash_embed(&text, cfg.dim, cfg.seed)?));
        let refs: Vec<&str> = golden.iter().map(String::as_str).collect();
        queries.push(QueryRecord::new(id, text, &refs));
    }
    for i in 0..cfg.detection_queries {
        let mut words: Vec<String> = (0..3).map(|_| CHAT.choose(&mut rng).unwrap().to_string()).collect();
        words.extend((0..cfg.filler_words).map(|_| FILLER.choose(&mut rng).unwrap().to_string()));
        words.shuffle(&mut rng);
        let text = words.join(" ");
        let id = format!("n{i:0width$}");
        query_vecs.push((id.clone(), hash_embed(&text, cfg.dim, cfg.seed)?));
        queries.push(QueryRecord::new(id, text, &[]));
    }

    let corpus = Corpus::from_records(tools, queries)?;
    Dataset::new(corpus, EmbeddingMatrix::from_rows(query_vecs)?, EmbeddingMatrix::from_rows(tool_vecs)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shape() {
        let d = generate(&SyntheticConfig::default()).unwrap();
        assert_eq!(d.corpus.tools().len(), 20);
        assert_eq!(d.corpus.retrieval_queries().count(), 50);
        assert_eq!(d.corpus.detection_queries().count(), 50);
        for q in d.corpus.retrieval_queries() {
            assert!((1..=3).contains(&q.golden_tools.len()));
            let cluster = &q.golden_tools[0][..6];
            assert!(q.golden_tools.iter().all(|t| t.starts_with(cluster)));
        }
    }

    #[test]
    fn seeded() {
        let cfg = SyntheticConfig::default();
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.corpus.queries(), b.corpus.queries());
        assert_eq!(a.query_emb, b.query_emb);
    }
}
