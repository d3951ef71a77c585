//! Per-head Top-K block selection under a shared token budget.

use std::cmp::Ordering;

use crate::centroids::BlockAssignment;
use crate::error::{check_dim, Result};
use crate::kvstore::{PageSpan, PagedKVCache};

use super::estimate::Scores;

/// Blocks a head may select: `ceil(token_budget / block_size)`.
#[inline]
pub fn blocks_per_head(token_budget: usize, block_size: usize) -> usize {
    token_budget.div_ceil(block_size)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadSelection {
    pub block_size: usize,
    /// Budgeted block count `K_h`.
    pub k: usize,
    /// Selected block indices, highest score first.
    pub blocks: Vec<usize>,
    /// Physical pages of each selected block, filled by
    /// [`SelectionResult::map_pages`].
    pub spans: Vec<PageSpan>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionResult {
    pub heads: Vec<HeadSelection>,
}

impl SelectionResult {
    /// Resolves every selected block to its page span in `cache`.
    pub fn map_pages(&mut self, cache: &PagedKVCache) -> Result<()> {
        for (head, sel) in self.heads.iter_mut().enumerate() {
            sel.spans = sel
                .blocks
                .iter()
                .map(|&b| cache.block_span(head, b, sel.block_size))
                .collect::<Result<_>>()?;
        }
        Ok(())
    }

    /// Number of valid tokens covered per head, given the context length.
    pub fn covered_tokens(&self, seq_len: usize) -> Vec<usize> {
        self.heads
            .iter()
            .map(|sel| {
                sel.blocks
                    .iter()
                    .map(|&b| sel.block_size.min(seq_len - b * sel.block_size))
                    .sum()
            })
            .collect()
    }
}

#[inline]
fn by_score_desc(scores: &[f32]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |a, b| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b))
}

/// Top-`k` block indices of one head by partial selection.
///
/// With `pin_trailing` the last block always takes one of the `k` slots.
/// Ties go to the lower block index.
pub fn select_head(
    scores: &[f32],
    k: usize,
    pin_trailing: bool,
    scratch: &mut Vec<usize>,
) -> Vec<usize> {
    let n = scores.len();
    let cmp = by_score_desc(scores);
    scratch.clear();
    if n <= k {
        scratch.extend(0..n);
        scratch.sort_unstable_by(&cmp);
        return scratch.clone();
    }
    let pin = pin_trailing && k > 0;
    let (pool, take) = if pin { (n - 1, k - 1) } else { (n, k) };
    scratch.extend(0..pool);
    if take < pool {
        if take > 0 {
            scratch.select_nth_unstable_by(take - 1, &cmp);
        }
        scratch.truncate(take);
    }
    if pin {
        scratch.push(n - 1);
    }
    scratch.sort_unstable_by(&cmp);
    scratch.clone()
}

/// Selects `ceil(T / B_h)` blocks per head from `scores`.
pub fn select_topk(
    scores: &Scores,
    assignment: &BlockAssignment,
    token_budget: usize,
    pin_trailing: bool,
) -> Result<SelectionResult> {
    check_dim(
        "assignment heads",
        scores.num_heads(),
        assignment.num_heads(),
    )?;
    let mut scratch = Vec::new();
    let heads = (0..scores.num_heads())
        .map(|h| {
            let block_size = assignment.block_size(h);
            let k = blocks_per_head(token_budget, block_size);
            HeadSelection {
                block_size,
                k,
                blocks: select_head(scores.head(h), k, pin_trailing, &mut scratch),
                spans: Vec::new(),
            }
        })
        .collect();
    Ok(SelectionResult { heads })
}

/// Per-head full-sort baseline producing the same selection.
pub fn select_topk_naive(
    scores: &Scores,
    assignment: &BlockAssignment,
    token_budget: usize,
    pin_trailing: bool,
) -> Result<SelectionResult> {
    check_dim(
        "assignment heads",
        scores.num_heads(),
        assignment.num_heads(),
    )?;
    let mut heads = Vec::with_capacity(scores.num_heads());
    for h in 0..scores.num_heads() {
        let head_scores = scores.head(h).to_vec();
        let block_size = assignment.block_size(h);
        let k = blocks_per_head(token_budget, block_size);
        let n = head_scores.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(by_score_desc(&head_scores));
        let mut chosen: Vec<usize> = if pin_trailing && n > k && k > 0 {
            let mut c: Vec<usize> = order
                .into_iter()
                .filter(|&b| b != n - 1)
                .take(k - 1)
                .collect();
            c.push(n - 1);
            c
        } else {
            order.into_iter().take(k).collect()
        };
        chosen.sort_by(by_score_desc(&head_scores));
        heads.push(HeadSelection {
            block_size,
            k,
            blocks: chosen,
            spans: Vec::new(),
        });
    }
    Ok(SelectionResult { heads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scores_of(per_head: &[Vec<f32>]) -> Scores {
        let mut offsets = vec![0];
        let mut values = Vec::new();
        for s in per_head {
            values.extend_from_slice(s);
            offsets.push(values.len());
        }
        Scores { values, offsets }
    }

    #[test]
    fn budget_to_block_count() {
        assert_eq!(blocks_per_head(4096, 32), 128);
        assert_eq!(blocks_per_head(4096, 64), 64);
        assert_eq!(blocks_per_head(100, 32), 4);
    }

    #[test]
    fn small_example_with_trailing_pin() {
        let scores = scores_of(&[vec![1.0, 0.0, 2.0]]);
        let a = BlockAssignment::uniform(1, 16).unwrap();
        let sel = select_topk(&scores, &a, 32, true).unwrap();
        assert_eq!(sel.heads[0].k, 2);
        assert_eq!(sel.heads[0].blocks, vec![2, 0]);
        // Trailing block pinned even when it scores lowest.
        let scores = scores_of(&[vec![1.0, 2.0, -5.0]]);
        assert_eq!(
            select_topk(&scores, &a, 32, true).unwrap().heads[0].blocks,
            vec![1, 2]
        );
        assert_eq!(
            select_topk(&scores, &a, 32, false).unwrap().heads[0].blocks,
            vec![1, 0]
        );
    }

    #[test]
    fn all_blocks_when_few() {
        let scores = scores_of(&[vec![0.5, 3.0], vec![1.0]]);
        let a = BlockAssignment::new(vec![16, 32]).unwrap();
        let sel = select_topk(&scores, &a, 64, true).unwrap();
        assert_eq!(sel.heads[0].blocks, vec![1, 0]);
        assert_eq!(sel.heads[1].blocks, vec![0]);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let scores = scores_of(&[vec![1.0, 1.0, 1.0, 1.0, 0.0]]);
        let a = BlockAssignment::uniform(1, 16).unwrap();
        let sel = select_topk(&scores, &a, 32, false).unwrap();
        assert_eq!(sel.heads[0].blocks, vec![0, 1]);
    }

    proptest! {
        #[test]
        fn matches_full_sort_oracle(
            raw in prop::collection::vec(prop::collection::vec(-8i32..8, 1..200), 1..5),
            budget_blocks in 1usize..40,
            pin in any::<bool>(),
        ) {
            // Coarse integer scores force plenty of ties.
            let per_head: Vec<Vec<f32>> = raw.iter().map(|h| h.iter().map(|&x| x as f32 * 0.5).collect()).collect();
            let scores = scores_of(&per_head);
            let a = BlockAssignment::uniform(per_head.len(), 16).unwrap();
            let budget = budget_blocks * 16;
            let fast = select_topk(&scores, &a, budget, pin).unwrap();
            prop_assert_eq!(&fast, &select_topk_naive(&scores, &a, budget, pin).unwrap());
            for (h, s) in per_head.iter().enumerate() {
                // Oracle: rank by (score desc, index asc) via exhaustive pairwise count.
                let n = s.len();
                let rank = |i: usize| (0..n).filter(|&j| s[j] > s[i] || (s[j] == s[i] && j < i)).count();
                let k = budget_blocks;
                let mut expected: Vec<usize> = if pin && n > k {
                    let mut others: Vec<usize> = (0..n - 1).collect();
                    others.sort_by_key(|&i| rank(i));
                    others.truncate(k - 1);
                    others.push(n - 1);
                    others
                } else {
                    (0..n).filter(|&i| rank(i) < k).collect()
                };
                expected.sort_by_key(|&i| rank(i));
                prop_assert_eq!(&fast.heads[h].blocks, &expected);
                let uniq: std::collections::HashSet<_> = fast.heads[h].blocks.iter().collect();
                prop_assert_eq!(uniq.len(), fast.heads[h].blocks.len());
                prop_assert_eq!(fast.heads[h].blocks.len(), n.min(k));
            }
        }
    }
}
