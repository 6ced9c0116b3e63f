//! Ranking metrics, detection metrics, and the evaluation report.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, QueryRecord};
use crate::error::{Error, Result};
use crate::model::MassTool;
use crate::scalar::Scalar;

/// Fraction of the golden set found in the first `k` entries.
pub fn recall_at_k<S: AsRef<str>, G: AsRef<str>>(ranked: &[S], golden: &[G], k: usize) -> Result<f64> {
    if golden.is_empty() {
        return Err(Error::EmptyGolden);
    }
    let gold: HashSet<&str> = golden.iter().map(AsRef::as_ref).collect();
    let hits = ranked.iter().take(k).filter(|r| gold.contains(r.as_ref())).count();
    Ok(hits as f64 / gold.len() as f64)
}

/// Binary-relevance NDCG with the ideal ranking over `min(k, |golden|)` slots.
pub fn ndcg_at_k<S: AsRef<str>, G: AsRef<str>>(ranked: &[S], golden: &[G], k: usize) -> Result<f64> {
    if golden.is_empty() {
        return Err(Error::EmptyGolden);
    }
    let gold: HashSet<&str> = golden.iter().map(AsRef::as_ref).collect();
    let gain = |i: usize| 1.0 / ((i + 2) as f64).log2();
    let dcg: f64 = ranked.iter().take(k).enumerate().filter(|(_, r)| gold.contains(r.as_ref())).map(|(i, _)| gain(i)).sum();
    let idcg: f64 = (0..k.min(gold.len())).map(gain).sum();
    if idcg == 0.0 {
        return Ok(0.0);
    }
    Ok(dcg / idcg)
}

/// Area under the ROC curve by pairwise comparison; ties count one half.
/// `None` if either class is missing.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

/// One JSON-lines record: `k` is 0 for metrics without a cutoff and
/// `stratum` is the golden-set size, or null for the aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub k: usize,
    pub stratum: Option<usize>,
    pub value: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub records: Vec<MetricRecord>,
    pub query_count: usize,
    pub config_hash: String,
}

impl MetricReport {
    pub fn value(&self, metric: &str, k: usize, stratum: Option<usize>) -> Option<f64> {
        self.record(metric, k, stratum).map(|r| r.value)
    }

    pub fn record(&self, metric: &str, k: usize, stratum: Option<usize>) -> Option<&MetricRecord> {
        self.records.iter().find(|r| r.metric == metric && r.k == k && r.stratum == stratum)
    }

    pub fn strata(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.records.iter().filter_map(|r| r.stratum).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn to_jsonl(&self) -> String {
        self.records.iter().map(|r| serde_json::to_string(r).expect("plain record") + "\n").collect()
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "config {}  queries {}", self.config_hash, self.query_count);
        let _ = writeln!(out, "{:<20} {:>3} {:>8} {:>8} {:>6}", "metric", "k", "stratum", "value", "n");
        for r in &self.records {
            let stratum = r.stratum.map_or("all".to_string(), |s| s.to_string());
            let _ = writeln!(out, "{:<20} {:>3} {:>8} {:>8.4} {:>6}", r.metric, r.k, stratum, r.value, r.n);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    /// Apply the detection gate before ranking; rejected queries retrieve nothing.
    pub gated: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { ks: vec![3, 5], gated: false }
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Scores `retrieval` queries (each must have a golden set) against the full
/// tool set, and reports detection accuracy and AUC over `detection` queries.
pub fn evaluate<T: Scalar>(
    model: &MassTool<T>,
    dataset: &Dataset,
    retrieval: &[&QueryRecord],
    detection: &[&QueryRecord],
    opts: &EvalOptions,
) -> Result<MetricReport> {
    let max_k = opts.ks.iter().copied().max().unwrap_or(0);
    if opts.ks.contains(&0) {
        return Err(Error::Config("cutoffs must be at least 1".into()));
    }
    let threshold = model.config().decision_threshold;

    // (stratum, [recall per k], [ndcg per k])
    let per_query = retrieval
        .par_iter()
        .map(|q| {
            let x: Vec<T> = dataset.query_emb.vector(&q.query_id)?;
            let ranked: Vec<String> = if opts.gated {
                model.retrieve(Some(&q.query_id), &x, max_k, threshold)?.ranked.into_iter().map(|(t, _)| t).collect()
            } else {
                model.rank(Some(&q.query_id), &x, max_k)?.into_iter().map(|(t, _)| t).collect()
            };
            let recall = opts.ks.iter().map(|&k| recall_at_k(&ranked, &q.golden_tools, k)).collect::<Result<Vec<_>>>()?;
            let ndcg = opts.ks.iter().map(|&k| ndcg_at_k(&ranked, &q.golden_tools, k)).collect::<Result<Vec<_>>>()?;
            Ok((q.golden_tools.len(), recall, ndcg))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut records = Vec::new();
    let mut strata: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, (s, _, _)) in per_query.iter().enumerate() {
        strata.entry(*s).or_default().push(i);
    }
    for (ki, &k) in opts.ks.iter().enumerate() {
        for (name, pick) in [("recall", 1usize), ("ndcg", 2)] {
            let val = |i: usize| if pick == 1 { per_query[i].1[ki] } else { per_query[i].2[ki] };
            if !per_query.is_empty() {
                let all: Vec<f64> = (0..per_query.len()).map(val).collect();
                records.push(MetricRecord { metric: name.into(), k, stratum: None, value: mean(&all), n: all.len() });
            }
            for (&s, members) in &strata {
                let vals: Vec<f64> = members.iter().map(|&i| val(i)).collect();
                records.push(MetricRecord { metric: name.into(), k, stratum: Some(s), value: mean(&vals), n: vals.len() });
            }
        }
    }

    if !detection.is_empty() {
        let probs = detection
            .par_iter()
            .map(|q| Ok(model.detect(&dataset.query_emb.vector::<T>(&q.query_id)?)?.to_f64_lossy()))
            .collect::<Result<Vec<f64>>>()?;
        let labels: Vec<bool> = detection.iter().map(|q| q.usage_label).collect();
        let correct = probs.iter().zip(&labels).filter(|(&p, &l)| (p >= threshold) == l).count();
        let n = labels.len();
        records.push(MetricRecord { metric: "detection_accuracy".into(), k: 0, stratum: None, value: correct as f64 / n as f64, n });
        if let Some(auc) = roc_auc(&probs, &labels) {
            records.push(MetricRecord { metric: "detection_auc".into(), k: 0, stratum: None, value: auc, n });
        }
    }

    Ok(MetricReport {
        records,
        query_count: retrieval.len(),
        config_hash: format!("{:016x}", model.config().hash()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recall_examples() {
        assert_eq!(recall_at_k(&["t1", "x", "t2", "y"], &["t1", "t2"], 3).unwrap(), 1.0);
        assert_eq!(recall_at_k(&["t1", "x", "y"], &["t1", "t2"], 3).unwrap(), 0.5);
        assert_eq!(recall_at_k(&["a", "b", "c"], &["t1"], 3).unwrap(), 0.0);
        assert!(matches!(recall_at_k::<&str, &str>(&["a"], &[], 3), Err(Error::EmptyGolden)));
    }

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg_at_k(&["g", "a", "b"], &["g"], 3).unwrap(), 1.0);
        let v = ndcg_at_k(&["a", "g", "b"], &["g"], 3).unwrap();
        assert!((v - 1.0 / 3f64.log2()).abs() < 1e-12);
        assert!((v - 0.6309).abs() < 1e-4);
        assert!(ndcg_at_k::<&str, &str>(&["a"], &[], 3).is_err());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.9, 0.8, 0.1], &[true, true, false]), Some(1.0));
        assert_eq!(roc_auc(&[0.5, 0.5], &[true, false]), Some(0.5));
        assert_eq!(roc_auc(&[0.5], &[true]), None);
    }
}
