//! Query-centric bipartite graphs and LightGCN propagation.
//!
//! Two graphs share the same query (left) nodes: the query-tool graph links a
//! query to each golden tool, and the query-scene graph links it to the node
//! standing for its whole golden set. Propagation is parameter-free:
//!
//! ```text
//! e_q^l = sum_{t in N(q)} e_t^{l-1} / sqrt(|N(q)| |N(t)|)    (and symmetrically)
//! e^final = e^0 + e^1 + ... + e^L
//! ```

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;

use crate::data::{Dataset, QueryRecord};
use crate::error::{Error, Result};
use crate::numeric::{CsrMatrix, Tape, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct BipartiteGraph {
    left_ids: Vec<String>,
    right_ids: Vec<String>,
    edges: Vec<(usize, usize)>,
    left_adj: Vec<Vec<usize>>,
    right_adj: Vec<Vec<usize>>,
}

impl BipartiteGraph {
    pub fn new(left_ids: Vec<String>, right_ids: Vec<String>, mut edges: Vec<(usize, usize)>) -> Result<Self> {
        let (nl, nr) = (left_ids.len(), right_ids.len());
        if let Some(&(l, r)) = edges.iter().find(|&&(l, r)| l >= nl || r >= nr) {
            return Err(Error::Shape(format!("edge ({l}, {r}) outside a {nl} x {nr} graph")));
        }
        edges.sort_unstable();
        if edges.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Shape("duplicate edge".into()));
        }
        let mut left_adj = vec![Vec::new(); nl];
        let mut right_adj = vec![Vec::new(); nr];
        for &(l, r) in &edges {
            left_adj[l].push(r);
            right_adj[r].push(l);
        }
        // edges are sorted by (l, r); right lists are filled in ascending l
        Ok(Self { left_ids, right_ids, edges, left_adj, right_adj })
    }

    pub fn left_ids(&self) -> &[String] {
        &self.left_ids
    }

    pub fn right_ids(&self) -> &[String] {
        &self.right_ids
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn left_degree(&self, l: usize) -> usize {
        self.left_adj[l].len()
    }

    pub fn right_degree(&self, r: usize) -> usize {
        self.right_adj[r].len()
    }

    pub fn left_neighbors(&self, l: usize) -> &[usize] {
        &self.left_adj[l]
    }

    pub fn right_neighbors(&self, r: usize) -> &[usize] {
        &self.right_adj[r]
    }

    fn weight<T: Scalar>(&self, l: usize, r: usize) -> T {
        T::one() / T::of((self.left_degree(l) * self.right_degree(r)) as f64).sqrt()
    }

    /// Symmetric normalized adjacency over the stacked `[left; right]` node set.
    pub fn normalized_adjacency<T: Scalar>(&self) -> CsrMatrix<T> {
        let nl = self.left_ids.len();
        let n = nl + self.right_ids.len();
        let mut trip = Vec::with_capacity(self.edges.len() * 2);
        for &(l, r) in &self.edges {
            let w = self.weight::<T>(l, r);
            trip.push((l, nl + r, w));
            trip.push((nl + r, l, w));
        }
        CsrMatrix::from_triplets(n, n, trip)
    }

    /// One JSON object per edge: `{"left": id, "right": id}`.
    pub fn dump_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for &(l, r) in &self.edges {
            let line = serde_json::json!({ "left": self.left_ids[l], "right": self.right_ids[r] });
            writeln!(f, "{line}")?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Canonical scenes: each distinct golden tool set becomes one node.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneTable {
    scene_tools: Vec<Vec<String>>,
    scene_ids: Vec<String>,
    query_scene: HashMap<String, usize>,
}

impl SceneTable {
    /// Scenes are numbered in lexicographic order of their tool tuples.
    pub fn build<'a>(queries: impl IntoIterator<Item = &'a QueryRecord>) -> Result<Self> {
        let mut by_tuple: BTreeMap<Vec<String>, Vec<String>> = BTreeMap::new();
        for q in queries {
            if q.golden_tools.is_empty() {
                return Err(Error::EmptyGoldenSet(q.query_id.clone()));
            }
            let mut tuple = q.golden_tools.clone();
            tuple.sort();
            tuple.dedup();
            by_tuple.entry(tuple).or_default().push(q.query_id.clone());
        }
        let mut scene_tools = Vec::with_capacity(by_tuple.len());
        let mut scene_ids = Vec::with_capacity(by_tuple.len());
        let mut query_scene = HashMap::new();
        for (i, (tuple, qs)) in by_tuple.into_iter().enumerate() {
            scene_ids.push(tuple.join("+"));
            scene_tools.push(tuple);
            for q in qs {
                query_scene.insert(q, i);
            }
        }
        Ok(Self { scene_tools, scene_ids, query_scene })
    }

    pub fn len(&self) -> usize {
        self.scene_tools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scene_tools.is_empty()
    }

    pub fn scene_ids(&self) -> &[String] {
        &self.scene_ids
    }

    pub fn tools(&self, scene: usize) -> &[String] {
        &self.scene_tools[scene]
    }

    pub fn scene_of(&self, query_id: &str) -> Option<usize> {
        self.query_scene.get(query_id).copied()
    }

    /// `scenes x tools` averaging operator, tools indexed by `tool_index`.
    pub fn pooling_matrix<T: Scalar>(&self, tool_index: &HashMap<String, usize>, n_tools: usize) -> Result<CsrMatrix<T>> {
        let mut trip = Vec::new();
        for (s, tools) in self.scene_tools.iter().enumerate() {
            let w = T::one() / T::of(tools.len() as f64);
            for t in tools {
                let &ti = tool_index.get(t).ok_or_else(|| Error::MissingEmbedding(t.clone()))?;
                trip.push((s, ti, w));
            }
        }
        Ok(CsrMatrix::from_triplets(self.len(), n_tools, trip))
    }
}

/// Both graphs over the training retrieval queries plus their layer-0 inputs.
///
/// Query rows are ordered by query id and tool rows by tool id.
#[derive(Debug, Clone)]
pub struct QcGraphs<T> {
    pub query_tool: BipartiteGraph,
    pub query_scene: BipartiteGraph,
    pub scenes: SceneTable,
    pub query_e0: Tensor<T>,
    pub tool_e0: Tensor<T>,
    pub scene_e0: Tensor<T>,
    pub tool_index: HashMap<String, usize>,
    pub query_index: HashMap<String, usize>,
}

/// Builds the query-tool and query-scene graphs for `queries`.
///
/// Every tool in the dataset is a node of the query-tool graph, linked or not.
pub fn build_graphs<T: Scalar>(queries: &[&QueryRecord], dataset: &Dataset) -> Result<QcGraphs<T>> {
    let mut qs: Vec<&QueryRecord> = queries.to_vec();
    qs.sort_by(|a, b| a.query_id.cmp(&b.query_id));
    if let Some(q) = qs.iter().find(|q| q.golden_tools.is_empty()) {
        return Err(Error::EmptyGoldenSet(q.query_id.clone()));
    }
    let query_ids: Vec<String> = qs.iter().map(|q| q.query_id.clone()).collect();
    let mut tool_ids: Vec<String> = dataset.corpus.tools().iter().map(|t| t.tool_id.clone()).collect();
    tool_ids.sort();
    let tool_index: HashMap<String, usize> = tool_ids.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    let query_index: HashMap<String, usize> = query_ids.iter().enumerate().map(|(i, q)| (q.clone(), i)).collect();

    let scenes = SceneTable::build(qs.iter().copied())?;
    let mut qt_edges = Vec::new();
    let mut qs_edges = Vec::new();
    for (qi, q) in qs.iter().enumerate() {
        for t in &q.golden_tools {
            let &ti = tool_index.get(t).ok_or_else(|| Error::DanglingTool { query: q.query_id.clone(), tool: t.clone() })?;
            qt_edges.push((qi, ti));
        }
        qs_edges.push((qi, scenes.scene_of(&q.query_id).expect("scene table covers every query")));
    }

    let query_e0: Tensor<T> = dataset.query_emb.tensor_for(&query_ids)?;
    let tool_e0: Tensor<T> = dataset.tool_emb.tensor_for(&tool_ids)?;
    let pool = scenes.pooling_matrix::<T>(&tool_index, tool_ids.len())?;
    let scene_e0 = Tensor::matrix(scenes.len(), tool_e0.cols(), pool.matmul_dense(tool_e0.data(), tool_e0.cols()))?;

    Ok(QcGraphs {
        query_tool: BipartiteGraph::new(query_ids.clone(), tool_ids, qt_edges)?,
        query_scene: BipartiteGraph::new(query_ids, scenes.scene_ids().to_vec(), qs_edges)?,
        scenes,
        query_e0,
        tool_e0,
        scene_e0,
        tool_index,
        query_index,
    })
}

fn layer<T: Scalar>(
    adj: &[Vec<usize>],
    own_deg: impl Fn(usize) -> usize + Sync,
    other_deg: impl Fn(usize) -> usize + Sync,
    src: &[T],
    d: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); adj.len() * d];
    out.par_chunks_mut(d).enumerate().for_each(|(i, dst)| {
        // neighbor lists are sorted, so the summation order is fixed
        for &j in &adj[i] {
            let w = T::one() / T::of((own_deg(i) * other_deg(j)) as f64).sqrt();
            for (o, &s) in dst.iter_mut().zip(&src[j * d..(j + 1) * d]) {
                *o = *o + w * s;
            }
        }
    });
    out
}

/// LightGCN propagation over the edge list; returns layer sums for both sides.
pub fn propagate<T: Scalar>(
    graph: &BipartiteGraph,
    left0: &Tensor<T>,
    right0: &Tensor<T>,
    layers: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if left0.rows() != graph.left_ids.len() || right0.rows() != graph.right_ids.len() {
        return Err(Error::Shape("initial embeddings do not cover every node".into()));
    }
    let d = left0.cols();
    if right0.cols() != d {
        return Err(Error::DimMismatch { expected: d, got: right0.cols() });
    }
    let mut left = left0.data().to_vec();
    let mut right = right0.data().to_vec();
    let mut left_sum = left.clone();
    let mut right_sum = right.clone();
    for _ in 0..layers {
        let nl = layer(&graph.left_adj, |i| graph.left_degree(i), |j| graph.right_degree(j), &right, d);
        let nr = layer(&graph.right_adj, |i| graph.right_degree(i), |j| graph.left_degree(j), &left, d);
        left = nl;
        right = nr;
        left_sum.iter_mut().zip(&left).for_each(|(a, &b)| *a = *a + b);
        right_sum.iter_mut().zip(&right).for_each(|(a, &b)| *a = *a + b);
    }
    Ok((
        Tensor::matrix(left0.rows(), d, left_sum)?,
        Tensor::matrix(right0.rows(), d, right_sum)?,
    ))
}

/// The same propagation recorded on a tape, over stacked `[left; right]` rows.
pub fn propagate_on_tape<T: Scalar>(tape: &mut Tape<T>, adjacency: &Arc<CsrMatrix<T>>, stacked0: Var, layers: usize) -> Var {
    let mut cur = stacked0;
    let mut sum = stacked0;
    for _ in 0..layers {
        cur = tape.spmm(adjacency.clone(), cur);
        sum = tape.add(sum, cur);
    }
    sum
}

/// Propagated representations for queries, tools and scenes.
///
/// `query_graph = query_qt + query_qs` and `tool_graph = tool_qt`.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphReps<T> {
    pub query_qt: Tensor<T>,
    pub tool_qt: Tensor<T>,
    pub query_qs: Tensor<T>,
    pub scene_qs: Tensor<T>,
    /// Scene representations pooled from `tool_qt`.
    pub scene_qt: Tensor<T>,
    pub query_graph: Tensor<T>,
    pub tool_graph: Tensor<T>,
}

/// Result of one propagation, with the ids of its two node sides.
#[derive(Debug, Clone)]
pub struct Propagated<'a, T> {
    pub left_ids: &'a [String],
    pub right_ids: &'a [String],
    pub left: Tensor<T>,
    pub right: Tensor<T>,
}

/// Fuses the two propagations into graph-enhanced representations.
pub fn graph_reps<T: Scalar>(
    qt: Propagated<'_, T>,
    qs: Propagated<'_, T>,
    scenes: &SceneTable,
    tool_index: &HashMap<String, usize>,
) -> Result<GraphReps<T>> {
    if qt.left_ids != qs.left_ids {
        return Err(Error::IdMismatch("query-tool and query-scene graphs cover different queries".into()));
    }
    if qs.right_ids != scenes.scene_ids() {
        return Err(Error::IdMismatch("scene nodes do not match the scene table".into()));
    }
    let mut query_graph = qt.left.clone();
    query_graph.data_mut().iter_mut().zip(qs.left.data()).for_each(|(a, &b)| *a = *a + b);
    let d = qt.right.cols();
    let mut scene_qt = Vec::with_capacity(scenes.len() * d);
    for s in 0..scenes.len() {
        let idx: Vec<usize> = scenes
            .tools(s)
            .iter()
            .map(|t| tool_index.get(t).copied().ok_or_else(|| Error::MissingEmbedding(t.clone())))
            .collect::<Result<_>>()?;
        scene_qt.extend(scene_rep_from_tools(&idx, &qt.right)?);
    }
    Ok(GraphReps {
        tool_graph: qt.right.clone(),
        query_qt: qt.left,
        tool_qt: qt.right,
        query_qs: qs.left,
        scene_qs: qs.right,
        scene_qt: Tensor::matrix(scenes.len(), d, scene_qt)?,
        query_graph,
    })
}

/// Mean of the listed tool rows.
pub fn scene_rep_from_tools<T: Scalar>(tools: &[usize], tool_qt: &Tensor<T>) -> Result<Vec<T>> {
    if tools.is_empty() {
        return Err(Error::EmptyScene);
    }
    let mut out = vec![T::zero(); tool_qt.cols()];
    for &t in tools {
        out.iter_mut().zip(tool_qt.row(t)).for_each(|(a, &b)| *a = *a + b);
    }
    let n = T::of(tools.len() as f64);
    out.iter_mut().for_each(|x| *x = *x / n);
    Ok(out)
}

impl<T: Scalar> QcGraphs<T> {
    /// Runs both propagations with a shared layer count.
    pub fn propagate(&self, layers: usize) -> Result<GraphReps<T>> {
        let (q_qt, t_qt) = propagate(&self.query_tool, &self.query_e0, &self.tool_e0, layers)?;
        let (q_qs, s_qs) = propagate(&self.query_scene, &self.query_e0, &self.scene_e0, layers)?;
        graph_reps(
            Propagated { left_ids: self.query_tool.left_ids(), right_ids: self.query_tool.right_ids(), left: q_qt, right: t_qt },
            Propagated { left_ids: self.query_scene.left_ids(), right_ids: self.query_scene.right_ids(), left: q_qs, right: s_qs },
            &self.scenes,
            &self.tool_index,
        )
    }

    pub fn num_queries(&self) -> usize {
        self.query_e0.rows()
    }

    pub fn num_tools(&self) -> usize {
        self.tool_e0.rows()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Corpus, EmbeddingMatrix, ToolRecord};

    fn ids(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    #[test]
    fn zero_layers_is_identity() {
        let g = BipartiteGraph::new(ids("q", 2), ids("t", 2), vec![(0, 0), (1, 0), (1, 1)]).unwrap();
        let l = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = Tensor::matrix(2, 2, vec![-1.0, 0.5, 0.0, 1.0]).unwrap();
        let (a, b) = propagate(&g, &l, &r, 0).unwrap();
        assert_eq!((a, b), (l, r));
    }

    #[test]
    fn single_edge_one_layer() {
        let g = BipartiteGraph::new(ids("q", 1), ids("t", 1), vec![(0, 0)]).unwrap();
        let l = Tensor::row_vector(vec![1.0, 2.0]);
        let r = Tensor::row_vector(vec![10.0, 20.0]);
        let (a, b) = propagate(&g, &l, &r, 1).unwrap();
        assert_eq!(a.data(), &[11.0, 22.0]);
        assert_eq!(b.data(), &[11.0, 22.0]);
    }

    #[test]
    fn isolated_nodes_keep_layer_zero() {
        let g = BipartiteGraph::new(ids("q", 2), ids("t", 3), vec![(0, 0)]).unwrap();
        let l = Tensor::matrix(2, 1, vec![1.0, 7.0]).unwrap();
        let r = Tensor::matrix(3, 1, vec![2.0, 3.0, 5.0]).unwrap();
        let (a, b) = propagate(&g, &l, &r, 3).unwrap();
        assert_eq!(a.data()[1], 7.0);
        assert_eq!(&b.data()[1..], &[3.0, 5.0]);
    }

    #[test]
    fn rejects_bad_edges() {
        assert!(BipartiteGraph::new(ids("q", 1), ids("t", 1), vec![(0, 1)]).is_err());
        assert!(BipartiteGraph::new(ids("q", 1), ids("t", 1), vec![(0, 0), (0, 0)]).is_err());
    }

    fn dataset(golden: &[&[&str]]) -> Dataset {
        let tools: Vec<ToolRecord> =
            ["t1", "t2", "t3"].iter().map(|t| ToolRecord { tool_id: t.to_string(), description: "d".into() }).collect();
        let queries: Vec<QueryRecord> =
            golden.iter().enumerate().map(|(i, g)| QueryRecord::new(format!("q{}", i + 1), "x", g)).collect();
        let qe = EmbeddingMatrix::from_rows(
            (0..golden.len()).map(|i| (format!("q{}", i + 1), vec![i as f64 + 1.0, 0.0])).collect(),
        )
        .unwrap();
        let te = EmbeddingMatrix::from_rows(vec![
            ("t1".to_string(), vec![1.0f64, 2.0]),
            ("t2".to_string(), vec![3.0, -4.0]),
            ("t3".to_string(), vec![0.5, 0.5]),
        ])
        .unwrap();
        Dataset::new(Corpus::from_records(tools, queries).unwrap(), qe, te).unwrap()
    }

    #[test]
    fn identical_golden_sets_share_a_scene() {
        let d = dataset(&[&["t1", "t2"], &["t2", "t1"]]);
        let qs: Vec<&QueryRecord> = d.corpus.retrieval_queries().collect();
        let g = build_graphs::<f64>(&qs, &d).unwrap();
        assert_eq!(g.scenes.len(), 1);
        assert_eq!(g.query_scene.right_degree(0), 2);
        assert_eq!(g.scene_e0.data(), &[2.0, -1.0]);
    }

    #[test]
    fn distinct_golden_sets_are_a_matching() {
        let d = dataset(&[&["t1"], &["t2"], &["t1", "t3"]]);
        let qs: Vec<&QueryRecord> = d.corpus.retrieval_queries().collect();
        let g = build_graphs::<f64>(&qs, &d).unwrap();
        assert_eq!(g.scenes.len(), 3);
        assert!((0..3).all(|s| g.query_scene.right_degree(s) == 1));
        assert!((0..3).all(|q| g.query_scene.left_degree(q) == 1));
        assert_eq!(g.query_tool.edges().len(), 4);
    }

    #[test]
    fn fused_reps_follow_the_sum_rule() {
        let d = dataset(&[&["t1"], &["t2"], &["t1", "t3"]]);
        let qs: Vec<&QueryRecord> = d.corpus.retrieval_queries().collect();
        let g = build_graphs::<f64>(&qs, &d).unwrap();
        let reps = g.propagate(2).unwrap();
        for (i, x) in reps.query_graph.data().iter().enumerate() {
            assert_eq!(*x, reps.query_qt.data()[i] + reps.query_qs.data()[i]);
        }
        assert_eq!(reps.tool_graph, reps.tool_qt);
        // scene {t1, t3} pools the two propagated tool rows
        let s = g.scenes.scene_ids().iter().position(|s| s == "t1+t3").unwrap();
        let expect = scene_rep_from_tools(&[0, 2], &reps.tool_qt).unwrap();
        assert_eq!(reps.scene_qt.row(s), expect.as_slice());
    }

    #[test]
    fn graph_reps_rejects_mismatched_queries() {
        let a = ids("q", 2);
        let b = ids("q", 3);
        let t = ids("t", 1);
        let scenes = SceneTable::build(std::iter::empty()).unwrap();
        let r = graph_reps::<f64>(
            Propagated { left_ids: &a, right_ids: &t, left: Tensor::zeros(vec![2, 1]), right: Tensor::zeros(vec![1, 1]) },
            Propagated { left_ids: &b, right_ids: &t, left: Tensor::zeros(vec![3, 1]), right: Tensor::zeros(vec![1, 1]) },
            &scenes,
            &HashMap::new(),
        );
        assert!(matches!(r, Err(Error::IdMismatch(_))));
    }

    #[test]
    fn scene_pooling_edge_cases() {
        let reps = Tensor::matrix(3, 2, vec![1.0, -2.0, -1.0, 2.0, 0.3, 0.6]).unwrap();
        assert_eq!(scene_rep_from_tools(&[2], &reps).unwrap(), vec![0.3, 0.6]);
        assert_eq!(scene_rep_from_tools(&[0, 1], &reps).unwrap(), vec![0.0, 0.0]);
        let three: Vec<f64> = scene_rep_from_tools(&[0, 1, 2], &reps).unwrap();
        assert!((three[0] - (1.0 - 1.0 + 0.3) / 3.0).abs() < 1e-15);
        assert!(matches!(scene_rep_from_tools::<f64>(&[], &reps), Err(Error::EmptyScene)));
    }

    #[test]
    fn empty_golden_set_rejected() {
        let q = QueryRecord::new("q", "x", &[]);
        assert!(matches!(SceneTable::build([&q]), Err(Error::EmptyGoldenSet(_))));
    }
}
