//! Multi-task training loop, slate sampling, and the full-model gradient check.

use std::time::{Duration, Instant};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::TrainConfig;
use crate::data::{split_train_test, Corpus, Dataset, EmbeddingMatrix, QueryRecord, ToolRecord};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions};
use crate::model::{Batch, MassTool};
use crate::numeric::{grad_check, Adam, ParamSet, Tape, Tensor};
use crate::objectives::CandidateSlate;
use crate::scalar::Scalar;
use crate::towers::TransferKind;

pub const SLATE_STREAM: u64 = 3;
pub const SHUFFLE_STREAM: u64 = 4;

/// The golden tools of `query` plus `m - |golden|` distinct negatives drawn
/// uniformly without replacement from the remaining tools.
pub fn sample_slate<R: Rng>(query: &QueryRecord, tools: &[String], m: usize, rng: &mut R) -> Result<CandidateSlate> {
    let golden = &query.golden_tools;
    if m <= golden.len() {
        return Err(Error::SlateTooSmall { m, golden: golden.len() });
    }
    let negatives: Vec<&String> = tools.iter().filter(|t| golden.binary_search(t).is_err()).collect();
    let need = m - golden.len();
    if need > negatives.len() {
        return Err(Error::InsufficientNegatives { need, available: negatives.len() });
    }
    let mut ids = golden.clone();
    let mut mask = vec![true; golden.len()];
    for i in index::sample(rng, negatives.len(), need) {
        ids.push(negatives[i].clone());
        mask.push(false);
    }
    CandidateSlate::new(query.query_id.clone(), ids, mask)
}

/// Query records on each side of the seeded split.
#[derive(Debug, Clone)]
pub struct SplitQueries<'a> {
    pub train: Vec<&'a QueryRecord>,
    pub test: Vec<&'a QueryRecord>,
}

impl<'a> SplitQueries<'a> {
    pub fn new(corpus: &'a Corpus, seed: u64) -> Result<Self> {
        let split = split_train_test(corpus, seed)?;
        let pick = |idx: &[usize]| idx.iter().map(|&i| &corpus.queries()[i]).collect();
        Ok(Self { train: pick(&split.train), test: pick(&split.test) })
    }

    pub fn train_retrieval(&self) -> Vec<&'a QueryRecord> {
        self.train.iter().copied().filter(|q| q.usage_label).collect()
    }

    pub fn test_retrieval(&self) -> Vec<&'a QueryRecord> {
        self.test.iter().copied().filter(|q| q.usage_label).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub retrieval: f64,
    pub detection: f64,
    pub contrastive: Option<f64>,
    /// Held-out Recall@5, recorded when early stopping is enabled.
    pub heldout_recall5: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub steps: u64,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn to_jsonl(&self) -> String {
        self.epochs.iter().map(|e| serde_json::to_string(e).expect("plain struct") + "\n").collect()
    }
}

/// Splits `items` into chunks of `size`, folding a trailing singleton into the
/// previous chunk so in-batch negatives always exist.
fn chunks<X: Clone>(items: &[X], size: usize) -> Vec<Vec<X>> {
    let mut out: Vec<Vec<X>> = items.chunks(size.max(1)).map(<[X]>::to_vec).collect();
    if out.len() >= 2 && out.last().map(Vec::len) == Some(1) {
        let last = out.pop().expect("len checked");
        out.last_mut().expect("len checked").extend(last);
    }
    out
}

/// Trains on the training side of the seeded split and returns the model with
/// parameters rounded to 32-bit precision.
pub fn train<T: Scalar>(dataset: &Dataset, config: &TrainConfig) -> Result<(MassTool<T>, TrainHistory)> {
    config.validate()?;
    let split = SplitQueries::new(&dataset.corpus, config.seed)?;
    let train_ret = split.train_retrieval();
    let mut model = MassTool::<T>::new(config.clone(), dataset, &train_ret)?;
    let tools = model.tool_ids().to_vec();
    if config.slate_size > tools.len() {
        return Err(Error::InsufficientNegatives { need: config.slate_size, available: tools.len() });
    }

    let mut slate_rng = ChaCha8Rng::seed_from_u64(config.seed);
    slate_rng.set_stream(SLATE_STREAM);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(SHUFFLE_STREAM);

    let mut adam = Adam::new(T::of(config.lr));
    let mut params = model.params().clone();
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, ParamSet<T>)> = None;
    let mut since_best = 0;
    let test_ret = split.test_retrieval();

    for epoch in 0..config.epochs {
        let mut ret_order = train_ret.clone();
        ret_order.shuffle(&mut shuffle_rng);
        let mut all_order = split.train.clone();
        all_order.shuffle(&mut shuffle_rng);
        let ret_batches = chunks(&ret_order, config.batch_size);
        let det_size = all_order.len().div_ceil(ret_batches.len().max(1)).max(1);
        let det_batches: Vec<&[&QueryRecord]> = all_order.chunks(det_size).collect();

        let mut sums = [0.0f64; 4];
        let mut con_seen = false;
        for (step, ret) in ret_batches.iter().enumerate() {
            let slates = ret
                .iter()
                .map(|q| sample_slate(q, &tools, config.slate_size, &mut slate_rng))
                .collect::<Result<Vec<_>>>()?;
            let det = det_batches.get(step).copied().unwrap_or(&[]);
            let batch: Batch<T> = model.make_batch(dataset, ret, &slates, det)?;

            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let loss = model.loss_on_tape(&mut tape, &bound, &batch)?;
            let total = tape.scalar(loss.total).to_f64_lossy();
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    detail: format!(
                        "retrieval={} detection={} contrastive={:?}",
                        tape.scalar(loss.retrieval).to_f64_lossy(),
                        tape.scalar(loss.detection).to_f64_lossy(),
                        loss.contrastive.map(|c| tape.scalar(c).to_f64_lossy())
                    ),
                });
            }
            sums[0] += total;
            sums[1] += tape.scalar(loss.retrieval).to_f64_lossy();
            sums[2] += tape.scalar(loss.detection).to_f64_lossy();
            if let Some(c) = loss.contrastive {
                sums[3] += tape.scalar(c).to_f64_lossy();
                con_seen = true;
            }
            let grads = tape.backward(loss.total);
            params.absorb(&bound, &grads)?;
            adam.step(&mut params)?;
            if !params.all_finite() {
                return Err(Error::NonFiniteLoss { epoch, step, detail: "parameters became non-finite".into() });
            }
            model.add_steps(1);
        }

        let n = ret_batches.len().max(1) as f64;
        let mut stats = EpochStats {
            epoch,
            loss: sums[0] / n,
            retrieval: sums[1] / n,
            detection: sums[2] / n,
            contrastive: con_seen.then(|| sums[3] / n),
            heldout_recall5: None,
        };
        if config.patience > 0 && !test_ret.is_empty() {
            model.set_params(params.clone())?;
            let report = evaluate(&model, dataset, &test_ret, &[], &EvalOptions { ks: vec![5], gated: false })?;
            let r5 = report.value("recall", 5, None).unwrap_or(0.0);
            stats.heldout_recall5 = Some(r5);
            if best.as_ref().is_none_or(|(b, _)| r5 > *b) {
                best = Some((r5, params.clone()));
                since_best = 0;
            } else {
                since_best += 1;
            }
            history.epochs.push(stats);
            if since_best >= config.patience {
                history.stopped_early = true;
                break;
            }
            continue;
        }
        history.epochs.push(stats);
    }

    if let Some((_, p)) = best {
        params = p;
    }
    params.round_to_f32();
    params.zero_grads();
    model.set_params(params)?;
    history.steps = model.steps();
    Ok((model, history))
}

/// Per-tensor finite-difference comparison of the total-loss gradient.
#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub transfer: TransferKind,
    pub trainable_embeddings: bool,
    pub per_tensor: Vec<(String, f64)>,
    pub elapsed: Duration,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.per_tensor.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }
}

/// Five retrieval queries over four tools forming two scenes, plus two
/// tool-free queries, with seeded random encoder outputs of width 6.
pub fn gradcheck_instance(seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tools: Vec<ToolRecord> =
        (1..=4).map(|i| ToolRecord { tool_id: format!("t{i}"), description: format!("tool {i}") }).collect();
    let mut queries = vec![
        QueryRecord::new("q1", "a", &["t1", "t2"]),
        QueryRecord::new("q2", "b", &["t1", "t2"]),
        QueryRecord::new("q3", "c", &["t2", "t1"]),
        QueryRecord::new("q4", "d", &["t3", "t4"]),
        QueryRecord::new("q5", "e", &["t4", "t3"]),
    ];
    queries.push(QueryRecord::new("n1", "f", &[]));
    queries.push(QueryRecord::new("n2", "g", &[]));
    let dim = 6;
    let row = |rng: &mut ChaCha8Rng| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
    let q_emb = queries.iter().map(|q| (q.query_id.clone(), row(&mut rng))).collect();
    let t_emb = tools.iter().map(|t| (t.tool_id.clone(), row(&mut rng))).collect();
    Dataset::new(Corpus::from_records(tools, queries)?, EmbeddingMatrix::from_rows(q_emb)?, EmbeddingMatrix::from_rows(t_emb)?)
}

/// Checks every learnable tensor of a full model (all modules active) on
/// [`gradcheck_instance`].
pub fn full_model_gradcheck(transfer: TransferKind, trainable_embeddings: bool) -> Result<GradcheckReport> {
    let start = Instant::now();
    let dataset = gradcheck_instance(11)?;
    let config = TrainConfig {
        transfer_fn: transfer,
        trainable_embeddings,
        neighbors: 3,
        epsilon: 0.0,
        slate_size: 3,
        layers: 2,
        tau: 0.5,
        seed: 5,
        ..Default::default()
    };
    let retrieval: Vec<&QueryRecord> = dataset.corpus.retrieval_queries().collect();
    let detection: Vec<&QueryRecord> = dataset.corpus.queries().iter().collect();
    let mut model = MassTool::<f64>::new(config.clone(), &dataset, &retrieval)?;

    // move away from the symmetric initialization so every term is exercised
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut params = model.params().clone();
    for (_, t) in params.iter_mut() {
        for x in t.data_mut() {
            *x += rng.gen_range(-0.1..0.1);
        }
    }
    model.set_params(params.clone())?;

    let tools = model.tool_ids().to_vec();
    let slates = retrieval
        .iter()
        .map(|q| sample_slate(q, &tools, config.slate_size, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let batch = model.make_batch(&dataset, &retrieval, &slates, &detection)?;

    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut per_tensor = Vec::with_capacity(names.len());
    for name in &names {
        let f = |p: &[Tensor<f64>]| {
            let mut probe = params.clone();
            *probe.get_mut(name).expect("known name") = p[0].clone();
            let (loss, grads) = model.loss_and_gradients(&probe, &batch)?;
            Ok((loss, vec![grads[name].clone()]))
        };
        let err = grad_check(f, &[params.get(name).expect("known name").clone()])?;
        per_tensor.push((name.clone(), err));
    }
    Ok(GradcheckReport { transfer, trainable_embeddings, per_tensor, elapsed: start.elapsed() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn tool_ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("t{i:02}")).collect()
    }

    #[test]
    fn slate_contents() {
        let q = QueryRecord::new("q", "x", &["t03", "t07"]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_slate(&q, &tool_ids(10), 4, &mut rng).unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!(s.num_golden(), 2);
        assert!(s.tools.contains(&"t03".to_string()) && s.tools.contains(&"t07".to_string()));
        let mut uniq = s.tools.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), 4);
        let again = sample_slate(&q, &tool_ids(10), 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn slate_errors() {
        let q = QueryRecord::new("q", "x", &["t00", "t01"]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(sample_slate(&q, &tool_ids(10), 2, &mut rng), Err(Error::SlateTooSmall { .. })));
        assert!(matches!(sample_slate(&q, &tool_ids(3), 4, &mut rng), Err(Error::InsufficientNegatives { .. })));
    }

    #[test]
    fn negatives_are_uniform() {
        let q = QueryRecord::new("q", "x", &["t00", "t01"]);
        let tools = tool_ids(10);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let draws = 10_000;
        let mut counts: HashMap<String, usize> = HashMap::new();
        for _ in 0..draws {
            for t in sample_slate(&q, &tools, 4, &mut rng).unwrap().tools.into_iter().skip(2) {
                *counts.entry(t).or_default() += 1;
            }
        }
        assert_eq!(counts.len(), 8);
        // each of 8 negatives is picked with probability 2/8 per draw
        let p = 0.25;
        let mean = draws as f64 * p;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        let mut chi2 = 0.0;
        for c in counts.values() {
            assert!((*c as f64 - mean).abs() < 3.0 * sd, "{counts:?}");
            chi2 += (*c as f64 - mean).powi(2) / mean;
        }
        // chi-square with 7 degrees of freedom, 99.9th percentile
        assert!(chi2 < 24.32, "{chi2}");
    }

    #[test]
    fn chunking_folds_singletons() {
        let c = chunks(&[1, 2, 3, 4, 5], 2);
        assert_eq!(c, vec![vec![1, 2], vec![3, 4, 5]]);
        assert_eq!(chunks(&[1, 2, 3], 8), vec![vec![1, 2, 3]]);
    }

    #[test]
    fn gradcheck_gating_frozen() {
        let r = full_model_gradcheck(TransferKind::Gating, false).unwrap();
        assert!(r.max_error() < 1e-4, "{:?}", r.per_tensor);
        assert!(r.per_tensor.iter().any(|(n, _)| n == crate::model::SUIM_W));
    }
}
