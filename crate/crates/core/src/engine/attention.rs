//! Sparse attention over selected blocks and the exact full-attention oracle.

use crate::error::{check_dim, Error, Result};
use crate::kvstore::{KeyRows, KvRows, PagedKVCache};

use super::topk::SelectionResult;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    /// Head-major output vectors, `num_heads * head_dim` long.
    pub outputs: Vec<f32>,
    /// Per-head softmax weights over all tokens; only the oracle fills this.
    pub weights: Option<Vec<Vec<f64>>>,
    pub head_dim: usize,
}

impl AttentionOutput {
    pub fn head(&self, head: usize) -> &[f32] {
        &self.outputs[head * self.head_dim..(head + 1) * self.head_dim]
    }
}

#[inline]
fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

/// Softmax attention of `query` over the rows of `segments`.
///
/// Each segment is a `(keys, values, rows)` triple of row-major slices that
/// borrow directly from wherever the rows live. Logits, normalization and the
/// weighted sum are carried in f64 with max subtraction.
fn attend_segments(query: &[f32], segments: &[(&[f32], &[f32], usize)]) -> Vec<f32> {
    let d = query.len();
    let scale = 1.0 / (d as f64).sqrt();
    let total: usize = segments.iter().map(|s| s.2).sum();
    let mut logits = Vec::with_capacity(total);
    for &(keys, _, rows) in segments {
        for r in 0..rows {
            logits.push(dot_f64(query, &keys[r * d..(r + 1) * d]) * scale);
        }
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut norm = 0.0;
    for z in &mut logits {
        *z = (*z - max).exp();
        norm += *z;
    }
    let mut acc = vec![0.0f64; d];
    let mut weights = logits.iter();
    for &(_, values, rows) in segments {
        for r in 0..rows {
            let w = weights.next().expect("one weight per row") / norm;
            for (a, &v) in acc.iter_mut().zip(&values[r * d..(r + 1) * d]) {
                *a += w * f64::from(v);
            }
        }
    }
    acc.into_iter().map(|a| a as f32).collect()
}

fn check_selection(
    queries: &[f32],
    cache: &PagedKVCache,
    selection: &SelectionResult,
) -> Result<()> {
    check_dim(
        "queries",
        cache.num_heads() * cache.head_dim(),
        queries.len(),
    )?;
    check_dim("selection heads", cache.num_heads(), selection.heads.len())?;
    for sel in &selection.heads {
        if sel.blocks.is_empty() {
            return Err(Error::Empty("block selection"));
        }
    }
    Ok(())
}

/// Attention restricted to the selected blocks, read in place through their
/// page spans. No key or value row is copied.
pub fn sparse_attention(
    queries: &[f32],
    cache: &PagedKVCache,
    selection: &SelectionResult,
) -> Result<AttentionOutput> {
    check_selection(queries, cache, selection)?;
    let d = cache.head_dim();
    let p = cache.page_size();
    let mut outputs = Vec::with_capacity(queries.len());
    for (head, sel) in selection.heads.iter().enumerate() {
        if sel.spans.len() != sel.blocks.len() {
            return Err(Error::Config(format!(
                "head {head}: selection has unresolved page spans"
            )));
        }
        let mut segments = Vec::with_capacity(sel.spans.len() * (sel.block_size / p));
        for span in &sel.spans {
            for (page, rows) in span.pages(p) {
                segments.push((
                    cache.page_keys(head, page),
                    cache.page_values(head, page),
                    rows,
                ));
            }
        }
        outputs.extend(attend_segments(
            &queries[head * d..(head + 1) * d],
            &segments,
        ));
    }
    Ok(AttentionOutput {
        outputs,
        weights: None,
        head_dim: d,
    })
}

/// Naive baseline: gathers every selected block into contiguous buffers,
/// then attends densely over them.
pub fn sparse_attention_gather(
    queries: &[f32],
    cache: &PagedKVCache,
    selection: &SelectionResult,
) -> Result<AttentionOutput> {
    check_selection(queries, cache, selection)?;
    let d = cache.head_dim();
    let mut outputs = Vec::with_capacity(queries.len());
    for (head, sel) in selection.heads.iter().enumerate() {
        let gathered = sel
            .blocks
            .iter()
            .map(|&b| cache.gather_block_naive(head, b, sel.block_size))
            .collect::<Result<Vec<_>>>()?;
        let segments: Vec<_> = gathered
            .iter()
            .map(|g| (g.keys.as_slice(), g.values.as_slice(), g.rows))
            .collect();
        outputs.extend(attend_segments(
            &queries[head * d..(head + 1) * d],
            &segments,
        ));
    }
    Ok(AttentionOutput {
        outputs,
        weights: None,
        head_dim: d,
    })
}

/// Exact softmax weights of every head over all tokens, in f64.
pub fn attention_weights<K: KeyRows + ?Sized>(queries: &[f32], keys: &K) -> Result<Vec<Vec<f64>>> {
    let (h, d, n) = (keys.num_heads(), keys.head_dim(), keys.seq_len());
    check_dim("queries", h * d, queries.len())?;
    if n == 0 {
        return Err(Error::Empty("key rows"));
    }
    let scale = 1.0 / (d as f64).sqrt();
    Ok((0..h)
        .map(|head| {
            let q = &queries[head * d..(head + 1) * d];
            let logits: Vec<f64> = (0..n)
                .map(|t| {
                    let k = keys.key(head, t);
                    let mut z = 0.0f64;
                    for j in 0..d {
                        z += f64::from(q[j]) * f64::from(k[j]);
                    }
                    z * scale
                })
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / sum).collect()
        })
        .collect())
}

/// Exact attention over every cached token, returning the weights as well.
pub fn full_attention_oracle<C: KvRows + ?Sized>(
    queries: &[f32],
    cache: &C,
) -> Result<AttentionOutput> {
    let weights = attention_weights(queries, cache)?;
    let d = cache.head_dim();
    let mut outputs = Vec::with_capacity(queries.len());
    for (head, w) in weights.iter().enumerate() {
        let mut acc = vec![0.0f64; d];
        for (t, &a) in w.iter().enumerate() {
            for (o, &v) in acc.iter_mut().zip(cache.value(head, t)) {
                *o += a * f64::from(v);
            }
        }
        outputs.extend(acc.into_iter().map(|x| x as f32));
    }
    Ok(AttentionOutput {
        outputs,
        weights: Some(weights),
        head_dim: d,
    })
}
