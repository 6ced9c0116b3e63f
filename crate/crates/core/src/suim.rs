//! Search-based intent modeling: neighbor queries from a global pool, filtered
//! by similarity and fused with a learnable bilinear attention.

use std::cmp::Ordering;
use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::{softmax, Tensor};
use crate::scalar::{dot, norm, Scalar};

/// Training retrieval queries available as neighbors.
///
/// Rows are kept in id order so that index tie-breaks never depend on the
/// order in which the pool was assembled.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryPool<T> {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    /// Unit-normalized search embeddings (zero rows stay zero).
    sem_unit: Tensor<T>,
    graph: Tensor<T>,
}

impl<T: Scalar> QueryPool<T> {
    pub fn new(ids: Vec<String>, sem: Tensor<T>, graph: Tensor<T>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::EmptyPool);
        }
        if sem.rows() != ids.len() || graph.rows() != ids.len() {
            return Err(Error::Shape("pool rows do not align with ids".into()));
        }
        let mut order: Vec<usize> = (0..ids.len()).collect();
        order.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
        let ids: Vec<String> = order.iter().map(|&i| ids[i].clone()).collect();
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        let mut sem_unit = sem.gather_rows(&order);
        for i in 0..sem_unit.rows() {
            let row = sem_unit.row_mut(i);
            let n = norm(row);
            if n > T::zero() {
                row.iter_mut().for_each(|x| *x = *x / n);
            }
        }
        Ok(Self { ids, index, sem_unit, graph: graph.gather_rows(&order) })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn graph_reps(&self) -> &Tensor<T> {
        &self.graph
    }

    pub fn graph_rep(&self, i: usize) -> &[T] {
        self.graph.row(i)
    }

    pub fn dim(&self) -> usize {
        self.graph.cols()
    }

    /// Replaces the attention values, e.g. after re-propagating trained embeddings.
    pub fn with_graph_reps(mut self, graph: Tensor<T>) -> Result<Self> {
        if graph.rows() != self.len() {
            return Err(Error::Shape("graph reps do not cover the pool".into()));
        }
        self.graph = graph;
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor<T> {
    /// Row in the pool.
    pub index: usize,
    pub score: T,
}

/// Neighbors sorted by descending cosine, ties by ascending pool index.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSet<T> {
    pub neighbors: Vec<Neighbor<T>>,
    pub k: usize,
    pub epsilon: Option<T>,
}

impl<T: Scalar> NeighborSet<T> {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.neighbors.iter().map(|n| n.index).collect()
    }
}

fn rank_order<T: Scalar>(a: &Neighbor<T>, b: &Neighbor<T>) -> Ordering {
    b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal).then(a.index.cmp(&b.index))
}

/// Exhaustive top-`k` cosine search over the pool.
pub fn knn_search<T: Scalar>(
    pool: &QueryPool<T>,
    target: &[T],
    k: usize,
    exclude_id: Option<&str>,
) -> Result<NeighborSet<T>> {
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    if target.len() != pool.sem_unit.cols() {
        return Err(Error::DimMismatch { expected: pool.sem_unit.cols(), got: target.len() });
    }
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let excluded = exclude_id.and_then(|id| pool.position(id));
    let tn = norm(target);
    let mut all: Vec<Neighbor<T>> = (0..pool.len())
        .filter(|&i| Some(i) != excluded)
        .map(|i| {
            let score = if tn > T::zero() { dot(pool.sem_unit.row(i), target) / tn } else { T::zero() };
            Neighbor { index: i, score }
        })
        .collect();
    if all.len() > k {
        all.select_nth_unstable_by(k - 1, rank_order);
        all.truncate(k);
    }
    all.sort_by(rank_order);
    Ok(NeighborSet { neighbors: all, k, epsilon: None })
}

/// Keeps neighbors with cosine strictly above `epsilon`; `epsilon >= 1`
/// disables filtering and keeps every neighbor.
pub fn dynamic_filter<T: Scalar>(set: &NeighborSet<T>, epsilon: T) -> NeighborSet<T> {
    let neighbors = if epsilon >= T::one() {
        set.neighbors.clone()
    } else {
        set.neighbors.iter().filter(|n| n.score > epsilon).cloned().collect()
    };
    NeighborSet { neighbors, k: set.k, epsilon: Some(epsilon) }
}

/// Attention weights `softmax_j(target W n_j)` over the filtered neighbors.
pub fn attention_weights<T: Scalar>(target_graph: &[T], neighbors: &NeighborSet<T>, pool: &QueryPool<T>, w: &Tensor<T>) -> Vec<T> {
    let d = target_graph.len();
    let mut tw = vec![T::zero(); d];
    for (i, &a) in target_graph.iter().enumerate() {
        for (o, &wv) in tw.iter_mut().zip(w.row(i)) {
            *o = *o + a * wv;
        }
    }
    let logits: Vec<T> = neighbors.neighbors.iter().map(|n| dot(&tw, pool.graph_rep(n.index))).collect();
    softmax(&logits)
}

/// Search-enhanced representation; falls back to the target's own graph
/// representation when no neighbor survives filtering.
pub fn intent_attention<T: Scalar>(
    target_graph: &[T],
    neighbors: &NeighborSet<T>,
    pool: &QueryPool<T>,
    w: &Tensor<T>,
) -> Result<Vec<T>> {
    let d = target_graph.len();
    if w.rows() != d || w.cols() != d || pool.dim() != d {
        return Err(Error::DimMismatch { expected: d, got: w.cols() });
    }
    if neighbors.is_empty() {
        return Ok(target_graph.to_vec());
    }
    let alpha = attention_weights(target_graph, neighbors, pool, w);
    let mut out = vec![T::zero(); d];
    for (n, &a) in neighbors.neighbors.iter().zip(&alpha) {
        for (o, &v) in out.iter_mut().zip(pool.graph_rep(n.index)) {
            *o = *o + a * v;
        }
    }
    Ok(out)
}

/// Identity plus uniform noise in `[-scale, scale]`.
pub fn init_attention<T: Scalar, R: Rng>(d: usize, scale: f64, rng: &mut R) -> Tensor<T> {
    let mut w = Tensor::identity(d);
    for x in w.data_mut() {
        *x = *x + T::of(rng.gen_range(-scale..=scale));
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pool(rows: &[Vec<f64>]) -> QueryPool<f64> {
        let ids = (0..rows.len()).map(|i| format!("p{i:03}")).collect();
        let t = Tensor::from_rows(rows).unwrap();
        QueryPool::new(ids, t.clone(), t).unwrap()
    }

    #[test]
    fn identical_vector_ranks_first() {
        let p = pool(&[vec![1.0, 0.0], vec![0.6, 0.8], vec![0.0, 1.0]]);
        let n = knn_search(&p, &[0.6, 0.8], 2, None).unwrap();
        assert_eq!(n.neighbors[0].index, 1);
        assert!((n.neighbors[0].score - 1.0).abs() < 1e-12);
        let n = knn_search(&p, &[0.6, 0.8], 3, Some("p001")).unwrap();
        assert!(n.neighbors.iter().all(|x| x.index != 1));
        assert_eq!(n.len(), 2);
    }

    #[test]
    fn orthogonal_target_scores_zero() {
        let p = pool(&[vec![1.0, 0.0, 0.0], vec![0.0, 2.0, 0.0]]);
        let n = knn_search(&p, &[0.0, 0.0, 5.0], 2, None).unwrap();
        assert!(n.neighbors.iter().all(|x| x.score == 0.0));
        // tie broken by pool index
        assert_eq!(n.indices(), vec![0, 1]);
    }

    #[test]
    fn pool_order_is_canonical() {
        let rows = [vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        let a = QueryPool::new(
            vec!["b".into(), "a".into(), "c".into()],
            Tensor::from_rows(&rows).unwrap(),
            Tensor::from_rows(&rows).unwrap(),
        )
        .unwrap();
        let n = knn_search(&a, &[1.0, 0.0], 1, None).unwrap();
        assert_eq!(a.ids()[n.neighbors[0].index], "a");
        assert!(matches!(QueryPool::<f64>::new(vec![], Tensor::zeros(vec![1, 1]), Tensor::zeros(vec![1, 1])), Err(Error::EmptyPool)));
    }

    #[test]
    fn filter_examples() {
        let set = NeighborSet {
            neighbors: vec![
                Neighbor { index: 0, score: 0.95 },
                Neighbor { index: 1, score: 0.82 },
                Neighbor { index: 2, score: 0.61 },
            ],
            k: 3,
            epsilon: None,
        };
        assert_eq!(dynamic_filter(&set, 0.7).indices(), vec![0, 1]);
        assert_eq!(dynamic_filter(&set, 1.0).len(), 3);
        assert_eq!(dynamic_filter(&set, 0.95).indices(), vec![0usize; 0]);
    }

    #[test]
    fn attention_examples() {
        let p = pool(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![-3.0, 0.5]]);
        let w = Tensor::identity(2);
        let one = NeighborSet { neighbors: vec![Neighbor { index: 2, score: 0.1 }], k: 1, epsilon: None };
        assert_eq!(intent_attention(&[0.3, 0.3], &one, &p, &w).unwrap(), vec![-3.0, 0.5]);
        let two = NeighborSet {
            neighbors: vec![Neighbor { index: 0, score: 0.5 }, Neighbor { index: 1, score: 0.5 }],
            k: 2,
            epsilon: None,
        };
        assert_eq!(attention_weights(&[0.7, -0.1], &two, &p, &w), vec![0.5, 0.5]);
        assert_eq!(intent_attention(&[0.7, -0.1], &two, &p, &w).unwrap(), vec![1.0, 2.0]);
        let empty = NeighborSet { neighbors: vec![], k: 2, epsilon: Some(0.9) };
        assert_eq!(intent_attention(&[0.7, -0.1], &empty, &p, &w).unwrap(), vec![0.7, -0.1]);
        assert!(intent_attention(&[0.7, -0.1], &two, &p, &Tensor::identity(3)).is_err());
    }

    #[test]
    fn attention_matches_explicit_formula() {
        let p = pool(&[vec![0.2, -1.0, 0.5], vec![1.5, 0.3, -0.2], vec![-0.4, 0.9, 1.1]]);
        let w = Tensor::matrix(3, 3, vec![0.9, 0.1, -0.3, 0.2, 1.1, 0.05, -0.15, 0.4, 0.8]).unwrap();
        let g = [0.5, -0.25, 1.0];
        let set = NeighborSet {
            neighbors: (0..3).map(|i| Neighbor { index: i, score: 0.9 }).collect(),
            k: 3,
            epsilon: None,
        };
        // exp(g^T W n_j) / sum, written out element by element
        let bil = |n: &[f64]| -> f64 {
            let mut s = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    s += g[i] * w.get(i, j) * n[j];
                }
            }
            s
        };
        let e: Vec<f64> = (0..3).map(|i| bil(p.graph_rep(i)).exp()).collect();
        let z: f64 = e.iter().sum();
        let mut expect = [0.0; 3];
        for i in 0..3 {
            for c in 0..3 {
                expect[c] += e[i] / z * p.graph_rep(i)[c];
            }
        }
        let got = intent_attention(&g, &set, &p, &w).unwrap();
        for c in 0..3 {
            assert!((got[c] - expect[c]).abs() < 1e-10);
        }
    }

    proptest! {
        #[test]
        fn filtering_is_monotone(scores in prop::collection::vec(0.0f64..1.0, 1..30), e1 in 0.0f64..0.99, e2 in 0.0f64..0.99) {
            let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
            let mut neighbors: Vec<Neighbor<f64>> = scores.iter().enumerate().map(|(i, &s)| Neighbor { index: i, score: s }).collect();
            neighbors.sort_by(rank_order);
            let set = NeighborSet { neighbors, k: scores.len(), epsilon: None };
            let a = dynamic_filter(&set, lo).indices();
            let b = dynamic_filter(&set, hi).indices();
            prop_assert!(b.iter().all(|i| a.contains(i)));
            prop_assert!(dynamic_filter(&set, hi).neighbors.iter().all(|n| n.score > hi));
        }

        #[test]
        fn attention_output_in_convex_hull(
            rows in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 4), 1..8),
            g in prop::collection::vec(-2.0f64..2.0, 4),
        ) {
            let p = pool(&rows);
            let w = Tensor::identity(4);
            let set = NeighborSet { neighbors: (0..rows.len()).map(|i| Neighbor { index: i, score: 0.5 }).collect(), k: rows.len(), epsilon: None };
            let alpha = attention_weights(&g, &set, &p, &w);
            prop_assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(alpha.iter().all(|&a| a >= 0.0 && a <= 1.0));
            let out = intent_attention(&g, &set, &p, &w).unwrap();
            for c in 0..4 {
                let lo = rows.iter().map(|r| r[c]).fold(f64::INFINITY, f64::min);
                let hi = rows.iter().map(|r| r[c]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(out[c] >= lo - 1e-9 && out[c] <= hi + 1e-9);
            }
        }
    }
}
