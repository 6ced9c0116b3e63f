//! The assembled model: frozen graph and pool state plus learnable towers.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::TrainConfig;
use crate::data::{Dataset, QueryRecord};
use crate::error::{Error, Result};
use crate::graph::{build_graphs, propagate_on_tape, GraphReps, QcGraphs};
use crate::numeric::{Bound, CsrMatrix, ParamSet, Tape, Tensor, Var};
use crate::objectives::{
    contrastive_loss_on_tape, detection_loss_on_tape, ideal_distribution, listwise_loss_on_tape, CandidateSlate,
};
use crate::scalar::Scalar;
use crate::suim::{dynamic_filter, init_attention, intent_attention, knn_search, NeighborSet, QueryPool};
use crate::towers::{
    adakt_transfer, detect_on_tape, fuse_query, rank_tools, transfer_on_tape, DetectionTower, RetrievalResult,
    TransferFn,
};

pub const SUIM_W: &str = "suim.attention";
pub const EMB_QUERY: &str = "emb.query";
pub const EMB_TOOL: &str = "emb.tool";

/// RNG stream used for parameter initialization.
pub const INIT_STREAM: u64 = 2;
const ATTENTION_INIT_SCALE: f64 = 0.01;

/// State derived from the training queries and encoder outputs; never trained.
#[derive(Debug, Clone)]
struct Frozen<T> {
    graphs: QcGraphs<T>,
    qt_adj: Arc<CsrMatrix<T>>,
    qs_adj: Arc<CsrMatrix<T>>,
    scene_pool: Arc<CsrMatrix<T>>,
    reps: GraphReps<T>,
    pool: QueryPool<T>,
    /// Filtered neighbors of every graph query, itself excluded.
    neighbors: Vec<NeighborSet<T>>,
    query_scene: Vec<usize>,
    tool_unit: Tensor<T>,
}

/// Parameter views used by the slice-based inference path.
#[derive(Debug, Clone)]
struct Towers<T> {
    detection: DetectionTower<T>,
    attention: Option<Tensor<T>>,
    transfer: Option<TransferFn<T>>,
}

#[derive(Debug, Clone)]
pub struct MassTool<T: Scalar> {
    config: TrainConfig,
    encoder_dim: usize,
    params: ParamSet<T>,
    frozen: Frozen<T>,
    towers: Towers<T>,
    steps: u64,
}

/// Intermediate representations of one query.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryReps<T> {
    pub graph: Vec<T>,
    pub search: Vec<T>,
    pub joint: Option<Vec<T>>,
    pub hidden: Vec<T>,
    pub detection_prob: T,
    pub neighbors: NeighborSet<T>,
}

/// One optimization step's inputs, already resolved to row indices.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    /// Graph rows of the retrieval queries.
    pub retrieval: Vec<usize>,
    pub retrieval_x: Tensor<T>,
    /// Tool rows of every slate, `retrieval.len() * slate_size` entries.
    pub slate_tools: Vec<usize>,
    pub slate_size: usize,
    pub ideal: Tensor<T>,
    pub detection_x: Tensor<T>,
    pub detection_y: Vec<bool>,
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub retrieval: Var,
    pub detection: Var,
    pub contrastive: Option<Var>,
}

/// Propagated representations as tape nodes.
struct TapeReps {
    query_graph: Var,
    tool_graph: Var,
    query_qt: Var,
    query_qs: Var,
    scene_qs: Var,
    scene_qt: Var,
}

fn range(a: usize, b: usize) -> Vec<usize> {
    (a..b).collect()
}

impl<T: Scalar> Frozen<T> {
    fn build(config: &TrainConfig, dataset: &Dataset, train_queries: &[&QueryRecord]) -> Result<Self> {
        let graphs = build_graphs::<T>(train_queries, dataset)?;
        let reps = graphs.propagate(config.layers)?;
        let query_ids = graphs.query_tool.left_ids().to_vec();
        let sem: Tensor<T> = dataset.query_emb.tensor_for(&query_ids)?;
        let pool = QueryPool::new(query_ids.clone(), sem.clone(), reps.query_graph.clone())?;
        if pool.ids() != query_ids.as_slice() {
            return Err(Error::IdMismatch("pool and graph query orders differ".into()));
        }
        let eps = T::of(config.effective_epsilon());
        let neighbors = (0..query_ids.len())
            .into_par_iter()
            .map(|i| Ok(dynamic_filter(&knn_search(&pool, sem.row(i), config.neighbors, Some(&query_ids[i]))?, eps)))
            .collect::<Result<Vec<_>>>()?;
        let query_scene = query_ids
            .iter()
            .map(|q| graphs.scenes.scene_of(q).ok_or(Error::EmptyScene))
            .collect::<Result<Vec<_>>>()?;
        let scene_pool = graphs.scenes.pooling_matrix::<T>(&graphs.tool_index, graphs.num_tools())?;
        let tool_unit = unit_rows(&reps.tool_graph)?;
        Ok(Self {
            qt_adj: Arc::new(graphs.query_tool.normalized_adjacency()),
            qs_adj: Arc::new(graphs.query_scene.normalized_adjacency()),
            scene_pool: Arc::new(scene_pool),
            graphs,
            reps,
            pool,
            neighbors,
            query_scene,
            tool_unit,
        })
    }

    /// Re-propagates from new layer-0 embeddings.
    fn repropagate(&mut self, layers: usize, query_e0: &Tensor<T>, tool_e0: &Tensor<T>) -> Result<()> {
        let mut g = self.graphs.clone();
        let d = tool_e0.cols();
        g.scene_e0 = Tensor::matrix(g.scenes.len(), d, self.scene_pool.matmul_dense(tool_e0.data(), d))?;
        g.query_e0 = query_e0.clone();
        g.tool_e0 = tool_e0.clone();
        let reps = g.propagate(layers)?;
        self.pool = self.pool.clone().with_graph_reps(reps.query_graph.clone())?;
        self.tool_unit = unit_rows(&reps.tool_graph)?;
        self.reps = reps;
        Ok(())
    }
}

fn unit_rows<T: Scalar>(m: &Tensor<T>) -> Result<Tensor<T>> {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let u = crate::numeric::l2_normalize(m.row(i))?;
        out.row_mut(i).copy_from_slice(&u);
    }
    Ok(out)
}

impl<T: Scalar> MassTool<T> {
    /// Builds the frozen state over `train_queries` (retrieval queries only)
    /// and draws fresh parameters from the configured seed.
    pub fn new(config: TrainConfig, dataset: &Dataset, train_queries: &[&QueryRecord]) -> Result<Self> {
        config.validate()?;
        let frozen = Frozen::build(&config, dataset, train_queries)?;
        let params = init_params(&config, dataset.dim(), &frozen);
        Self::assemble(config, dataset.dim(), params, frozen, 0)
    }

    /// Rebuilds a model from saved parameters. The parameter names and shapes
    /// must be exactly those the configuration would create.
    pub fn from_params(
        config: TrainConfig,
        dataset: &Dataset,
        train_queries: &[&QueryRecord],
        params: ParamSet<T>,
        steps: u64,
    ) -> Result<Self> {
        config.validate()?;
        let frozen = Frozen::build(&config, dataset, train_queries)?;
        let template = init_params::<T>(&config, dataset.dim(), &frozen);
        let names: Vec<&str> = params.names().collect();
        let expected: Vec<&str> = template.names().collect();
        if names != expected {
            return Err(Error::Config(format!("parameters {names:?} do not match configuration {expected:?}")));
        }
        for (name, t) in template.iter() {
            let got = params.get(name).expect("names compared above");
            if got.shape() != t.shape() {
                return Err(Error::Config(format!("parameter `{name}` has shape {:?}, expected {:?}", got.shape(), t.shape())));
            }
        }
        let mut model = Self::assemble(config, dataset.dim(), params, frozen, steps)?;
        model.refresh()?;
        Ok(model)
    }

    fn assemble(config: TrainConfig, encoder_dim: usize, params: ParamSet<T>, frozen: Frozen<T>, steps: u64) -> Result<Self> {
        let towers = build_towers(&config, &params, encoder_dim)?;
        Ok(Self { config, encoder_dim, params, frozen, towers, steps })
    }

    /// Recomputes cached tower views (and propagated reps when embeddings
    /// are trainable) after parameters change.
    pub fn refresh(&mut self) -> Result<()> {
        self.towers = build_towers(&self.config, &self.params, self.encoder_dim)?;
        if self.config.trainable_embeddings {
            let q = self.params.get(EMB_QUERY).cloned().ok_or(Error::MissingEmbedding(EMB_QUERY.into()))?;
            let t = self.params.get(EMB_TOOL).cloned().ok_or(Error::MissingEmbedding(EMB_TOOL.into()))?;
            self.frozen.repropagate(self.config.layers, &q, &t)?;
        }
        Ok(())
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub(crate) fn set_params(&mut self, params: ParamSet<T>) -> Result<()> {
        self.params = params;
        self.refresh()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub(crate) fn add_steps(&mut self, n: u64) {
        self.steps += n;
    }

    pub fn encoder_dim(&self) -> usize {
        self.encoder_dim
    }

    pub fn tool_ids(&self) -> &[String] {
        self.frozen.graphs.query_tool.right_ids()
    }

    pub fn graph_query_ids(&self) -> &[String] {
        self.frozen.graphs.query_tool.left_ids()
    }

    pub fn graph_reps(&self) -> &GraphReps<T> {
        &self.frozen.reps
    }

    pub fn graphs(&self) -> &QcGraphs<T> {
        &self.frozen.graphs
    }

    pub fn pool(&self) -> &QueryPool<T> {
        &self.frozen.pool
    }

    pub fn tool_row(&self, id: &str) -> Option<usize> {
        self.frozen.graphs.tool_index.get(id).copied()
    }

    pub fn graph_row(&self, query_id: &str) -> Option<usize> {
        self.frozen.graphs.query_index.get(query_id).copied()
    }

    /// Usage probability for an encoder embedding.
    pub fn detect(&self, x: &[T]) -> Result<T> {
        Ok(self.towers.detection.detect(x)?.1)
    }

    /// All intermediate representations of a query. Queries that are nodes of
    /// the training graphs use their propagated rows and skip themselves in the
    /// neighbor search; anything else is an isolated node.
    pub fn encode_query(&self, query_id: Option<&str>, x: &[T]) -> Result<QueryReps<T>> {
        if x.len() != self.encoder_dim {
            return Err(Error::DimMismatch { expected: self.encoder_dim, got: x.len() });
        }
        let row = query_id.and_then(|id| self.graph_row(id));
        let (graph, neighbors) = match row {
            Some(r) => (self.frozen.reps.query_graph.row(r).to_vec(), self.frozen.neighbors[r].clone()),
            None => {
                let two = T::of(2.0);
                let nn = knn_search(&self.frozen.pool, x, self.config.neighbors, None)?;
                (x.iter().map(|&v| two * v).collect(), dynamic_filter(&nn, T::of(self.config.effective_epsilon())))
            }
        };
        let (hidden, detection_prob) = self.towers.detection.detect(x)?;
        let search = match &self.towers.attention {
            Some(w) => intent_attention(&graph, &neighbors, &self.frozen.pool, w)?,
            None => graph.clone(),
        };
        let joint = match &self.towers.transfer {
            Some(f) => Some(adakt_transfer(&hidden, &search, f)?),
            None => None,
        };
        Ok(QueryReps { graph, search, joint, hidden, detection_prob, neighbors })
    }

    /// Fused query vector: the sum of the normalized active representations.
    pub fn fused(&self, reps: &QueryReps<T>) -> Result<Vec<T>> {
        let mut parts: Vec<&[T]> = vec![&reps.graph];
        if !self.config.no_suim {
            parts.push(&reps.search);
        }
        if let Some(j) = &reps.joint {
            parts.push(j);
        }
        fuse_query(&parts)
    }

    /// Scores against every tool, in `tool_ids` order.
    pub fn score_all(&self, query_id: Option<&str>, x: &[T]) -> Result<Vec<T>> {
        let e = self.fused(&self.encode_query(query_id, x)?)?;
        let t = &self.frozen.tool_unit;
        Ok((0..t.rows()).map(|i| crate::scalar::dot(&e, t.row(i))).collect())
    }

    /// Top `k` tools with the detection gate bypassed.
    pub fn rank(&self, query_id: Option<&str>, x: &[T], k: usize) -> Result<Vec<(String, T)>> {
        let e = self.fused(&self.encode_query(query_id, x)?)?;
        Ok(self.ranked(&e, k))
    }

    fn ranked(&self, e: &[T], k: usize) -> Vec<(String, T)> {
        rank_tools(e, &self.frozen.tool_unit, self.tool_ids(), k)
            .into_iter()
            .map(|(i, s)| (self.tool_ids()[i].clone(), s))
            .collect()
    }

    /// Dual-step inference: detection first, retrieval only if the query
    /// needs a tool. A probability lies in the open interval (0, 1), so a
    /// threshold of 1 never invokes retrieval even if it rounds up to 1.
    pub fn retrieve(&self, query_id: Option<&str>, x: &[T], k: usize, threshold: f64) -> Result<RetrievalResult<T>> {
        if self.tool_ids().is_empty() {
            return Err(Error::EmptyToolSet);
        }
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        let reps = self.encode_query(query_id, x)?;
        let p = reps.detection_prob;
        let invoked = threshold < 1.0 && p >= T::of(threshold);
        let ranked = if invoked { self.ranked(&self.fused(&reps)?, k) } else { Vec::new() };
        Ok(RetrievalResult { detection_prob: p, invoked, ranked })
    }

    /// Resolves records and slates into row indices.
    pub fn make_batch(
        &self,
        dataset: &Dataset,
        retrieval: &[&QueryRecord],
        slates: &[CandidateSlate],
        detection: &[&QueryRecord],
    ) -> Result<Batch<T>> {
        if retrieval.len() != slates.len() {
            return Err(Error::DimMismatch { expected: retrieval.len(), got: slates.len() });
        }
        let m = slates.first().map(|s| s.len()).unwrap_or(0);
        let mut rows = Vec::with_capacity(retrieval.len());
        let mut slate_tools = Vec::with_capacity(retrieval.len() * m);
        let mut ideal = Vec::with_capacity(retrieval.len() * m);
        for (q, s) in retrieval.iter().zip(slates) {
            if s.len() != m {
                return Err(Error::DimMismatch { expected: m, got: s.len() });
            }
            rows.push(self.graph_row(&q.query_id).ok_or_else(|| Error::IdMismatch(format!("`{}` is not a training query", q.query_id)))?);
            for t in &s.tools {
                slate_tools.push(self.tool_row(t).ok_or_else(|| Error::DanglingTool { query: q.query_id.clone(), tool: t.clone() })?);
            }
            ideal.extend(ideal_distribution::<T>(s));
        }
        let ret_ids: Vec<&str> = retrieval.iter().map(|q| q.query_id.as_str()).collect();
        let det_ids: Vec<&str> = detection.iter().map(|q| q.query_id.as_str()).collect();
        Ok(Batch {
            retrieval: rows,
            retrieval_x: dataset.query_emb.tensor_for(&ret_ids)?,
            slate_tools,
            slate_size: m,
            ideal: Tensor::matrix(retrieval.len(), m, ideal)?,
            detection_x: dataset.query_emb.tensor_for(&det_ids)?,
            detection_y: detection.iter().map(|q| q.usage_label).collect(),
        })
    }

    fn reps_on_tape(&self, tape: &mut Tape<T>, bound: &Bound) -> TapeReps {
        let f = &self.frozen;
        if !self.config.trainable_embeddings {
            let c = |tape: &mut Tape<T>, t: &Tensor<T>| tape.constant(t.clone());
            return TapeReps {
                query_graph: c(tape, &f.reps.query_graph),
                tool_graph: c(tape, &f.reps.tool_graph),
                query_qt: c(tape, &f.reps.query_qt),
                query_qs: c(tape, &f.reps.query_qs),
                scene_qs: c(tape, &f.reps.scene_qs),
                scene_qt: c(tape, &f.reps.scene_qt),
            };
        }
        let (nq, nt, ns) = (f.graphs.num_queries(), f.graphs.num_tools(), f.graphs.scenes.len());
        let eq = bound.var(EMB_QUERY);
        let et = bound.var(EMB_TOOL);
        let stacked = tape.concat_rows(&[eq, et]);
        let qt = propagate_on_tape(tape, &f.qt_adj, stacked, self.config.layers);
        let query_qt = tape.gather_rows(qt, &range(0, nq));
        let tool_qt = tape.gather_rows(qt, &range(nq, nq + nt));
        let scene0 = tape.spmm(f.scene_pool.clone(), et);
        let stacked = tape.concat_rows(&[eq, scene0]);
        let qs = propagate_on_tape(tape, &f.qs_adj, stacked, self.config.layers);
        let query_qs = tape.gather_rows(qs, &range(0, nq));
        let scene_qs = tape.gather_rows(qs, &range(nq, nq + ns));
        let scene_qt = tape.spmm(f.scene_pool.clone(), tool_qt);
        let query_graph = tape.add(query_qt, query_qs);
        TapeReps { query_graph, tool_graph: tool_qt, query_qt, query_qs, scene_qs, scene_qt }
    }

    /// Records the total training loss for `batch` using the parameters bound
    /// in `bound`.
    pub fn loss_on_tape(&self, tape: &mut Tape<T>, bound: &Bound, batch: &Batch<T>) -> Result<LossVars> {
        let cfg = &self.config;
        let w = cfg.loss_weights();
        let reps = self.reps_on_tape(tape, bound);
        let g = tape.gather_rows(reps.query_graph, &batch.retrieval);

        let search = if cfg.no_suim {
            g
        } else {
            let gw = tape.matmul(g, bound.var(SUIM_W));
            let mut rows = Vec::with_capacity(batch.retrieval.len());
            for (b, &r) in batch.retrieval.iter().enumerate() {
                let nb = &self.frozen.neighbors[r];
                if nb.is_empty() {
                    rows.push(tape.gather_rows(g, &[b]));
                    continue;
                }
                let values = tape.gather_rows(reps.query_graph, &nb.indices());
                let target = tape.gather_rows(gw, &[b]);
                let logits = tape.matmul_t(target, values);
                let alpha = tape.softmax_rows(logits);
                rows.push(tape.matmul(alpha, values));
            }
            tape.concat_rows(&rows)
        };

        let mut fused = tape.normalize_rows(g)?;
        if !cfg.no_suim {
            let s = tape.normalize_rows(search)?;
            fused = tape.add(fused, s);
        }
        if !cfg.no_adakt {
            let x = tape.constant(batch.retrieval_x.clone());
            let (h, _) = detect_on_tape(tape, bound, x);
            let j = transfer_on_tape(tape, bound, cfg.transfer_fn, h, search);
            let j = tape.normalize_rows(j)?;
            fused = tape.add(fused, j);
        }
        let tools = tape.normalize_rows(reps.tool_graph)?;
        let scores = tape.slate_dot(fused, tools, batch.slate_tools.clone(), batch.slate_size);
        let retrieval = listwise_loss_on_tape(tape, scores, &batch.ideal);

        let xd = tape.constant(batch.detection_x.clone());
        let (_, z) = detect_on_tape(tape, bound, xd);
        let detection = detection_loss_on_tape(tape, z, &batch.detection_y);

        let weighted_det = tape.scale(detection, T::of(w.lambda));
        let mut total = tape.add(retrieval, weighted_det);
        let mut contrastive = None;
        if w.beta > 0.0 {
            let scenes: Vec<usize> = batch.retrieval.iter().map(|&r| self.frozen.query_scene[r]).collect();
            let q_qs = tape.gather_rows(reps.query_qs, &batch.retrieval);
            let q_qt = tape.gather_rows(reps.query_qt, &batch.retrieval);
            let s_qs = tape.gather_rows(reps.scene_qs, &scenes);
            let s_qt = tape.gather_rows(reps.scene_qt, &scenes);
            let con = contrastive_loss_on_tape(tape, q_qs, q_qt, s_qs, s_qt, T::of(w.tau))?;
            let weighted = tape.scale(con, T::of(w.beta));
            total = tape.add(total, weighted);
            contrastive = Some(con);
        }
        Ok(LossVars { total, retrieval, detection, contrastive })
    }

    /// Total loss and per-tensor gradients at `params` (which must have the
    /// model's parameter layout).
    pub fn loss_and_gradients(&self, params: &ParamSet<T>, batch: &Batch<T>) -> Result<(T, BTreeMap<String, Vec<T>>)> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let loss = self.loss_on_tape(&mut tape, &bound, batch)?;
        let grads = tape.backward(loss.total);
        let out = params
            .iter()
            .map(|(name, t)| {
                let g = grads.get(bound.var(name)).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); t.len()]);
                (name.clone(), g)
            })
            .collect();
        Ok((tape.scalar(loss.total), out))
    }
}

fn hidden_dim(config: &TrainConfig, encoder_dim: usize) -> usize {
    if config.hidden_dim == 0 {
        encoder_dim
    } else {
        config.hidden_dim
    }
}

fn init_params<T: Scalar>(config: &TrainConfig, encoder_dim: usize, frozen: &Frozen<T>) -> ParamSet<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(INIT_STREAM);
    let d = encoder_dim;
    let dh = hidden_dim(config, encoder_dim);
    let mut params = ParamSet::new();
    DetectionTower::init(&mut params, d, dh, &mut rng);
    if !config.no_suim {
        params.insert(SUIM_W, init_attention(d, ATTENTION_INIT_SCALE, &mut rng));
    }
    if !config.no_adakt {
        TransferFn::init(config.transfer_fn, &mut params, dh, d, &mut rng);
    }
    if config.trainable_embeddings {
        params.insert(EMB_QUERY, frozen.graphs.query_e0.clone());
        params.insert(EMB_TOOL, frozen.graphs.tool_e0.clone());
    }
    params
}

fn build_towers<T: Scalar>(config: &TrainConfig, params: &ParamSet<T>, encoder_dim: usize) -> Result<Towers<T>> {
    let attention = if config.no_suim {
        None
    } else {
        Some(params.get(SUIM_W).cloned().ok_or_else(|| Error::Config(format!("missing parameter `{SUIM_W}`")))?)
    };
    let transfer =
        if config.no_adakt { None } else { Some(TransferFn::from_params(config.transfer_fn, params, encoder_dim)?) };
    Ok(Towers { detection: DetectionTower::from_params(params)?, attention, transfer })
}
