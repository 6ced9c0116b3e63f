use super::corpus::Corpus;
use super::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};

/// A corpus together with frozen encoder outputs for all of its queries and tools.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub corpus: Corpus,
    pub query_emb: EmbeddingMatrix,
    pub tool_emb: EmbeddingMatrix,
}

impl Dataset {
    /// Fails if any query or tool lacks an embedding or the dims differ.
    pub fn new(corpus: Corpus, query_emb: EmbeddingMatrix, tool_emb: EmbeddingMatrix) -> Result<Self> {
        if query_emb.dim() != tool_emb.dim() {
            return Err(Error::DimMismatch { expected: query_emb.dim(), got: tool_emb.dim() });
        }
        if let Some(q) = corpus.queries().iter().find(|q| query_emb.position(&q.query_id).is_none()) {
            return Err(Error::MissingEmbedding(q.query_id.clone()));
        }
        if let Some(t) = corpus.tools().iter().find(|t| tool_emb.position(&t.tool_id).is_none()) {
            return Err(Error::MissingEmbedding(t.tool_id.clone()));
        }
        Ok(Self { corpus, query_emb, tool_emb })
    }

    pub fn dim(&self) -> usize {
        self.query_emb.dim()
    }
}
