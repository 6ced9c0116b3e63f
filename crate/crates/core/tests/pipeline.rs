use masstool::data::{generate, SyntheticConfig};
use masstool::*;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_dataset(n_tools: usize, n_queries: usize, dim: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let tools: Vec<ToolRecord> =
        (0..n_tools).map(|i| ToolRecord { tool_id: format!("t{i:03}"), description: format!("tool {i}") }).collect();
    let queries: Vec<QueryRecord> = (0..n_queries)
        .map(|i| {
            let g = rng.gen_range(1..=3);
            let golden: Vec<String> = sample(&mut rng, n_tools, g).into_iter().map(|j| format!("t{j:03}")).collect();
            let refs: Vec<&str> = golden.iter().map(String::as_str).collect();
            QueryRecord::new(format!("q{i:04}"), "text", &refs)
        })
        .collect();
    let mut row = || (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
    let q_emb = queries.iter().map(|q| (q.query_id.clone(), row())).collect();
    let t_emb = tools.iter().map(|t| (t.tool_id.clone(), row())).collect();
    Dataset::new(
        Corpus::from_records(tools, queries).unwrap(),
        EmbeddingMatrix::from_rows(q_emb).unwrap(),
        EmbeddingMatrix::from_rows(t_emb).unwrap(),
    )
    .unwrap()
}

#[test]
fn untrained_model_is_near_random_on_unseen_queries() {
    let n_tools = 464;
    let ds = random_dataset(n_tools, 1000, 16);
    let cfg = TrainConfig { neighbors: 10, ..Default::default() };
    let split = SplitQueries::new(&ds.corpus, 0).unwrap();
    let model = Model::new(cfg, &ds, &split.train_retrieval()).unwrap();
    let report = evaluate(&model, &ds, &split.test_retrieval(), &[], &EvalOptions::default()).unwrap();
    let r3 = report.value("recall", 3, None).unwrap();
    // each golden tool lands in the top 3 with probability 3 / n
    let expected = 3.0 / n_tools as f64;
    let n = report.record("recall", 3, None).unwrap().n as f64;
    assert!((r3 - expected).abs() < 5.0 * (expected / n).sqrt() + 1e-9, "recall@3 {r3} vs {expected}");
}

#[test]
fn evaluation_is_reproducible_and_decomposes_by_stratum() {
    let ds = generate(&SyntheticConfig::default()).unwrap();
    let cfg = TrainConfig { epochs: 10, lr: 0.05, batch_size: 16, slate_size: 16, ..Default::default() };
    let (model, _): (Model, _) = train(&ds, &cfg).unwrap();
    let split = SplitQueries::new(&ds.corpus, 0).unwrap();
    let ret = split.train_retrieval();
    let a = evaluate(&model, &ds, &ret, &split.train, &EvalOptions::default()).unwrap();
    let b = evaluate(&model, &ds, &ret, &split.train, &EvalOptions::default()).unwrap();
    assert_eq!(a.to_jsonl(), b.to_jsonl());
    assert_eq!(a.query_count, ret.len());

    for metric in ["recall", "ndcg"] {
        for k in [3, 5] {
            let all = a.record(metric, k, None).unwrap();
            let strata: Vec<_> = a.strata().into_iter().map(|s| a.record(metric, k, Some(s)).unwrap()).collect();
            assert_eq!(strata.iter().map(|r| r.n).sum::<usize>(), all.n);
            let weighted: f64 = strata.iter().map(|r| r.value * r.n as f64).sum::<f64>() / all.n as f64;
            assert!((weighted - all.value).abs() < 1e-12);
        }
    }
    assert_eq!(a.strata(), vec![1, 2, 3]);
}

#[test]
fn threshold_one_never_invokes() {
    let ds = generate(&SyntheticConfig::default()).unwrap();
    let cfg = TrainConfig { epochs: 10, lr: 0.05, batch_size: 16, slate_size: 16, ..Default::default() };
    let (model, _): (Model, _) = train(&ds, &cfg).unwrap();
    for q in ds.corpus.queries() {
        let x: Vec<f64> = ds.query_emb.vector(&q.query_id).unwrap();
        let r = model.retrieve(Some(&q.query_id), &x, 3, 1.0).unwrap();
        assert!(!r.invoked && r.ranked.is_empty());
    }
}

#[test]
fn f32_and_f64_models_agree() {
    let ds = generate(&SyntheticConfig::default()).unwrap();
    let cfg = TrainConfig { epochs: 5, lr: 0.05, batch_size: 16, slate_size: 16, ..Default::default() };
    let (m64, _): (Model, _) = train(&ds, &cfg).unwrap();
    let ckpt = masstool::Checkpoint::from_model(&m64);
    let m32: Model32 = ckpt.into_model(&ds, None).unwrap();
    for q in ds.corpus.retrieval_queries().take(20) {
        let x64: Vec<f64> = ds.query_emb.vector(&q.query_id).unwrap();
        let x32: Vec<f32> = ds.query_emb.vector(&q.query_id).unwrap();
        let s64 = m64.score_all(Some(&q.query_id), &x64).unwrap();
        let s32 = m32.score_all(Some(&q.query_id), &x32).unwrap();
        for (a, b) in s64.iter().zip(&s32) {
            assert!((a - *b as f64).abs() < 1e-4, "{a} vs {b}");
        }
    }
}
