//! Training configuration in a flat `key = value` text format.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::fnv1a64;
use crate::error::{Error, Result};
use crate::objectives::LossWeights;
use crate::towers::TransferKind;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub tools: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub query_embeddings: Option<PathBuf>,
    pub tool_embeddings: Option<PathBuf>,
    pub checkpoint: PathBuf,

    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda: f64,
    pub beta: f64,
    pub tau: f64,
    /// Slate size M.
    pub slate_size: usize,
    /// Neighbors K retrieved from the query pool.
    pub neighbors: usize,
    pub epsilon: f64,
    pub layers: usize,
    /// Detection projection width; 0 means the encoder dimension.
    pub hidden_dim: usize,
    pub transfer_fn: TransferKind,
    pub decision_threshold: f64,

    pub no_adakt: bool,
    pub no_suim: bool,
    pub no_dynamic_filter: bool,
    pub no_contrastive: bool,
    pub trainable_embeddings: bool,

    /// Early stopping on held-out Recall@5; 0 disables it.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tools: None,
            queries: None,
            query_embeddings: None,
            tool_embeddings: None,
            checkpoint: PathBuf::from("masstool.ckpt"),
            lr: 1e-3,
            batch_size: 2048,
            epochs: 20,
            lambda: 0.2,
            beta: 0.04,
            tau: 0.1,
            slate_size: 32,
            neighbors: 25,
            epsilon: 0.8,
            layers: 2,
            hidden_dim: 0,
            transfer_fn: TransferKind::Gating,
            decision_threshold: 0.5,
            no_adakt: false,
            no_suim: false,
            no_dynamic_filter: false,
            no_contrastive: false,
            trainable_embeddings: false,
            patience: 0,
            seed: 0,
        }
    }
}

const KEYS: &[&str] = &[
    "tools",
    "queries",
    "query_embeddings",
    "tool_embeddings",
    "checkpoint",
    "lr",
    "batch_size",
    "epochs",
    "lambda",
    "beta",
    "tau",
    "slate_size",
    "neighbors",
    "epsilon",
    "layers",
    "hidden_dim",
    "transfer_fn",
    "decision_threshold",
    "no_adakt",
    "no_suim",
    "no_dynamic_filter",
    "no_contrastive",
    "trainable_embeddings",
    "patience",
    "seed",
];

fn parse_value<V: FromStr>(key: &str, raw: &str) -> Result<V> {
    raw.parse().map_err(|_| Error::Config(format!("bad value for `{key}`: `{raw}`")))
}

fn parse_bool(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad value for `{key}`: `{raw}`"))),
    }
}

fn opt_path(raw: &str) -> Option<PathBuf> {
    (!raw.is_empty()).then(|| PathBuf::from(raw))
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        match key {
            "tools" => self.tools = opt_path(raw),
            "queries" => self.queries = opt_path(raw),
            "query_embeddings" => self.query_embeddings = opt_path(raw),
            "tool_embeddings" => self.tool_embeddings = opt_path(raw),
            "checkpoint" => self.checkpoint = PathBuf::from(raw),
            "lr" => self.lr = parse_value(key, raw)?,
            "batch_size" => self.batch_size = parse_value(key, raw)?,
            "epochs" => self.epochs = parse_value(key, raw)?,
            "lambda" => self.lambda = parse_value(key, raw)?,
            "beta" => self.beta = parse_value(key, raw)?,
            "tau" => self.tau = parse_value(key, raw)?,
            "slate_size" => self.slate_size = parse_value(key, raw)?,
            "neighbors" => self.neighbors = parse_value(key, raw)?,
            "epsilon" => self.epsilon = parse_value(key, raw)?,
            "layers" => self.layers = parse_value(key, raw)?,
            "hidden_dim" => self.hidden_dim = parse_value(key, raw)?,
            "transfer_fn" => self.transfer_fn = raw.parse()?,
            "decision_threshold" => self.decision_threshold = parse_value(key, raw)?,
            "no_adakt" => self.no_adakt = parse_bool(key, raw)?,
            "no_suim" => self.no_suim = parse_bool(key, raw)?,
            "no_dynamic_filter" => self.no_dynamic_filter = parse_bool(key, raw)?,
            "no_contrastive" => self.no_contrastive = parse_bool(key, raw)?,
            "trainable_embeddings" => self.trainable_embeddings = parse_bool(key, raw)?,
            "patience" => self.patience = parse_value(key, raw)?,
            "seed" => self.seed = parse_value(key, raw)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. Relative paths are
    /// kept as written.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(k.trim(), v.trim()).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", n + 1)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file, resolving relative data paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = Self::parse(&std::fs::read_to_string(path)?)?;
        if let Some(base) = path.parent() {
            for p in [&mut cfg.tools, &mut cfg.queries, &mut cfg.query_embeddings, &mut cfg.tool_embeddings]
                .into_iter()
                .flatten()
            {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
            if cfg.checkpoint.is_relative() {
                cfg.checkpoint = base.join(&cfg.checkpoint);
            }
        }
        Ok(cfg)
    }

    fn get(&self, key: &str) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        match key {
            "tools" => path(&self.tools),
            "queries" => path(&self.queries),
            "query_embeddings" => path(&self.query_embeddings),
            "tool_embeddings" => path(&self.tool_embeddings),
            "checkpoint" => self.checkpoint.display().to_string(),
            "lr" => self.lr.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "lambda" => self.lambda.to_string(),
            "beta" => self.beta.to_string(),
            "tau" => self.tau.to_string(),
            "slate_size" => self.slate_size.to_string(),
            "neighbors" => self.neighbors.to_string(),
            "epsilon" => self.epsilon.to_string(),
            "layers" => self.layers.to_string(),
            "hidden_dim" => self.hidden_dim.to_string(),
            "transfer_fn" => self.transfer_fn.to_string(),
            "decision_threshold" => self.decision_threshold.to_string(),
            "no_adakt" => self.no_adakt.to_string(),
            "no_suim" => self.no_suim.to_string(),
            "no_dynamic_filter" => self.no_dynamic_filter.to_string(),
            "no_contrastive" => self.no_contrastive.to_string(),
            "trainable_embeddings" => self.trainable_embeddings.to_string(),
            "patience" => self.patience.to_string(),
            "seed" => self.seed.to_string(),
            _ => unreachable!("unknown config key"),
        }
    }

    /// Canonical text form; `parse(to_text())` round-trips.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            let _ = writeln!(out, "{k} = {}", self.get(k));
        }
        out
    }

    pub fn hash(&self) -> u64 {
        fnv1a64(self.to_text().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if self.slate_size < 2 {
            return bad("slate_size must be at least 2");
        }
        if self.neighbors == 0 {
            return bad("neighbors must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad("epsilon must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.decision_threshold) {
            return bad("decision_threshold must lie in [0, 1]");
        }
        self.loss_weights().validate()
    }

    /// Effective loss weights; `no_contrastive` zeroes beta.
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { lambda: self.lambda, beta: if self.no_contrastive { 0.0 } else { self.beta }, tau: self.tau }
    }

    /// Effective filter threshold; `no_dynamic_filter` keeps all K neighbors.
    pub fn effective_epsilon(&self) -> f64 {
        if self.no_dynamic_filter {
            1.0
        } else {
            self.epsilon
        }
    }

    /// Settings that determine the parameter set and the inference path.
    pub fn architecture(&self) -> String {
        let keys = [
            "hidden_dim",
            "transfer_fn",
            "no_adakt",
            "no_suim",
            "no_dynamic_filter",
            "trainable_embeddings",
            "neighbors",
            "epsilon",
            "layers",
            "seed",
        ];
        keys.iter().map(|k| format!("{k}={}", self.get(k))).collect::<Vec<_>>().join(",")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::default();
        c.tools = Some("data/tools.jsonl".into());
        c.transfer_fn = TransferKind::Concatenation;
        c.epsilon = 0.65;
        c.no_suim = true;
        c.seed = 99;
        let back = TrainConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(matches!(TrainConfig::parse("learning_rate = 0.1"), Err(Error::Config(_))));
        assert!(TrainConfig::parse("lr 0.1").is_err());
        assert!(TrainConfig::parse("lr = fast").is_err());
        assert!(TrainConfig::parse("transfer_fn = mixture").is_err());
        assert!(TrainConfig::parse("tau = 0").is_err());
        assert!(TrainConfig::parse("epsilon = 1.5").is_err());
    }

    #[test]
    fn comments_and_blank_lines() {
        let c = TrainConfig::parse("# demo\n\nlr = 0.005  # faster\nno_contrastive = true\n").unwrap();
        assert_eq!(c.lr, 0.005);
        assert_eq!(c.loss_weights().beta, 0.0);
    }

    #[test]
    fn ablation_switches() {
        let c = TrainConfig { no_dynamic_filter: true, epsilon: 0.6, ..Default::default() };
        assert_eq!(c.effective_epsilon(), 1.0);
        let g = TrainConfig::default();
        let a = TrainConfig { transfer_fn: TransferKind::Addition, ..Default::default() };
        assert_ne!(g.architecture(), a.architecture());
        let other_lr = TrainConfig { lr: 0.5, ..Default::default() };
        assert_eq!(g.architecture(), other_lr.architecture());
    }
}
