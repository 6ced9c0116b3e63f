//! Semantic filtering of tool-independent candidate queries.

use rayon::prelude::*;

use super::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::scalar::cosine;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityBand {
    pub lower: f64,
    pub upper: f64,
}

impl Default for SimilarityBand {
    fn default() -> Self {
        Self { lower: 0.4, upper: 0.6 }
    }
}

impl SimilarityBand {
    /// Both bounds inclusive.
    pub fn contains(&self, s: f64) -> bool {
        s >= self.lower && s <= self.upper
    }
}

/// Highest cosine between `row` and any reference row.
pub fn max_similarity(row: &[f32], reference: &EmbeddingMatrix) -> f64 {
    let a: Vec<f64> = row.iter().map(|&x| x as f64).collect();
    (0..reference.len())
        .map(|j| {
            let b: Vec<f64> = reference.row(j).iter().map(|&x| x as f64).collect();
            cosine(&a, &b)
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Ids of candidates whose best match among the tool-dependent reference
/// queries falls inside `band`. Sorted by id.
pub fn tooldet_filter(
    candidates: &EmbeddingMatrix,
    tool_dependent: &EmbeddingMatrix,
    band: SimilarityBand,
) -> Result<Vec<String>> {
    if candidates.dim() != tool_dependent.dim() {
        return Err(Error::DimMismatch { expected: tool_dependent.dim(), got: candidates.dim() });
    }
    let mut kept: Vec<String> = (0..candidates.len())
        .into_par_iter()
        .filter(|&i| band.contains(max_similarity(candidates.row(i), tool_dependent)))
        .map(|i| candidates.ids()[i].clone())
        .collect();
    kept.sort();
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(rows: &[(&str, Vec<f32>)]) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(rows.iter().map(|(id, v)| (id.to_string(), v.clone())).collect()).unwrap()
    }

    #[test]
    fn band_edges() {
        let reference = emb(&[("r", vec![1.0, 0.0])]);
        // cos = 0.5 (60 degrees), identical, and orthogonal
        let c = emb(&[
            ("mid", vec![0.5, 0.75f32.sqrt()]),
            ("same", vec![2.0, 0.0]),
            ("orth", vec![0.0, 1.0]),
        ]);
        let kept = tooldet_filter(&c, &reference, SimilarityBand::default()).unwrap();
        assert_eq!(kept, vec!["mid".to_string()]);
    }

    #[test]
    fn dims_must_match() {
        let a = emb(&[("a", vec![1.0, 0.0])]);
        let b = emb(&[("b", vec![1.0, 0.0, 0.0])]);
        assert!(matches!(tooldet_filter(&a, &b, SimilarityBand::default()), Err(Error::DimMismatch { .. })));
    }
}
