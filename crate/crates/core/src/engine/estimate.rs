//! Query-centroid importance estimation over the flattened centroid layout.

use crate::centroids::{BlockAssignment, CentroidStore};
use crate::config::CentroidMethod;
use crate::error::{check_dim, Result};
use crate::kernels::{dot, quest_score};
use crate::quantizer::QuantizedCentroidStore;

/// A centroid store that can score queries, full precision or quantized.
pub trait CentroidScorer {
    fn num_heads(&self) -> usize;
    fn head_dim(&self) -> usize;
    fn seq_len(&self) -> usize;
    fn offsets(&self) -> &[usize];
    fn assignment(&self) -> &BlockAssignment;

    /// Score of `query` (one head's d-vector) against centroid `index` of `head`.
    fn score(&self, query: &[f32], head: usize, index: usize) -> f32;

    /// Writes the scores of every centroid of `head` into `out`.
    fn score_segment(&self, query: &[f32], head: usize, out: &mut [f32]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.score(query, head, i);
        }
    }

    /// All scores of one head, computed the straightforward way.
    fn head_scores_naive(&self, query: &[f32], head: usize) -> Vec<f32> {
        let n = self.offsets()[head + 1] - self.offsets()[head];
        (0..n).map(|i| self.score(query, head, i)).collect()
    }
}

impl CentroidScorer for CentroidStore {
    fn num_heads(&self) -> usize {
        CentroidStore::num_heads(self)
    }

    fn head_dim(&self) -> usize {
        CentroidStore::head_dim(self)
    }

    fn seq_len(&self) -> usize {
        CentroidStore::seq_len(self)
    }

    fn offsets(&self) -> &[usize] {
        CentroidStore::offsets(self)
    }

    fn assignment(&self) -> &BlockAssignment {
        CentroidStore::assignment(self)
    }

    #[inline]
    fn score(&self, query: &[f32], head: usize, index: usize) -> f32 {
        match self.method() {
            CentroidMethod::Mean => dot(query, self.centroid(head, index)),
            CentroidMethod::MaxMin => quest_score(
                query,
                self.centroid(head, index),
                self.min_centroid(head, index)
                    .expect("max-min store has minima"),
            ),
        }
    }

    fn score_segment(&self, q: &[f32], head: usize, out: &mut [f32]) {
        let d = CentroidStore::head_dim(self);
        let seg =
            CentroidStore::offsets(self)[head] * d..CentroidStore::offsets(self)[head + 1] * d;
        let hi = &self.values()[seg.clone()];
        match self.method() {
            CentroidMethod::Mean => {
                for (o, c) in out.iter_mut().zip(hi.chunks_exact(d)) {
                    *o = dot(q, c);
                }
            }
            CentroidMethod::MaxMin => {
                let lo = &self.mins()[seg];
                for ((o, h), l) in out
                    .iter_mut()
                    .zip(hi.chunks_exact(d))
                    .zip(lo.chunks_exact(d))
                {
                    *o = quest_score(q, h, l);
                }
            }
        }
    }
}

impl CentroidScorer for QuantizedCentroidStore {
    fn num_heads(&self) -> usize {
        QuantizedCentroidStore::num_heads(self)
    }

    fn head_dim(&self) -> usize {
        QuantizedCentroidStore::head_dim(self)
    }

    fn seq_len(&self) -> usize {
        QuantizedCentroidStore::seq_len(self)
    }

    fn offsets(&self) -> &[usize] {
        QuantizedCentroidStore::offsets(self)
    }

    fn assignment(&self) -> &BlockAssignment {
        QuantizedCentroidStore::assignment(self)
    }

    #[inline]
    fn score(&self, query: &[f32], head: usize, index: usize) -> f32 {
        self.score_fused(query, head, index)
    }

    fn score_segment(&self, query: &[f32], head: usize, out: &mut [f32]) {
        self.score_segment_fused(query, head, out);
    }

    /// Dequantizes the whole head segment before scoring.
    fn head_scores_naive(&self, query: &[f32], head: usize) -> Vec<f32> {
        self.head_scores_materialized(query, head)
    }
}

/// Flat importance scores; `offsets` delimits each head's segment.
#[derive(Debug, Clone, PartialEq)]
pub struct Scores {
    pub values: Vec<f32>,
    pub offsets: Vec<usize>,
}

impl Scores {
    pub fn num_heads(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn head(&self, head: usize) -> &[f32] {
        &self.values[self.offsets[head]..self.offsets[head + 1]]
    }
}

fn check_queries<S: CentroidScorer + ?Sized>(queries: &[f32], store: &S) -> Result<()> {
    check_dim(
        "queries",
        store.num_heads() * store.head_dim(),
        queries.len(),
    )
}

/// Scores every centroid of every head straight into one flat buffer.
///
/// `queries` is head-major, `num_heads * head_dim` long. Each head's segment
/// of the offsets array is written in place; quantized stores score through
/// query-folded lookup tables.
pub fn estimate_scores<S: CentroidScorer + ?Sized>(queries: &[f32], store: &S) -> Result<Scores> {
    check_queries(queries, store)?;
    let d = store.head_dim();
    let offsets = store.offsets();
    let mut values = vec![0.0f32; offsets[store.num_heads()]];
    for head in 0..store.num_heads() {
        store.score_segment(
            &queries[head * d..(head + 1) * d],
            head,
            &mut values[offsets[head]..offsets[head + 1]],
        );
    }
    Ok(Scores {
        values,
        offsets: offsets.to_vec(),
    })
}

/// Per-head loop baseline: one pass and one buffer per head, concatenated.
pub fn estimate_scores_naive<S: CentroidScorer + ?Sized>(
    queries: &[f32],
    store: &S,
) -> Result<Scores> {
    check_queries(queries, store)?;
    let d = store.head_dim();
    let mut values = Vec::new();
    for head in 0..store.num_heads() {
        let per_head = store.head_scores_naive(&queries[head * d..(head + 1) * d], head);
        values.extend_from_slice(&per_head);
    }
    Ok(Scores {
        values,
        offsets: store.offsets().to_vec(),
    })
}
