//! Block centroids in a flattened, prefix-sum indexed layout.
//!
//! Heads with different block sizes hold different numbers of centroids.
//! All of them live in one flat array; `offsets[h]..offsets[h + 1]` delimits
//! the segment of head `h`, so estimation can run as one pass with no padding.

use crate::config::{CentroidMethod, EngineConfig};
use crate::error::{check_dim, check_index, Error, Result};
use crate::kvstore::KeyRows;

/// Per-head block sizes.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BlockAssignment {
    block_sizes: Vec<usize>,
}

impl BlockAssignment {
    pub fn new(block_sizes: Vec<usize>) -> Result<Self> {
        if block_sizes.is_empty() {
            return Err(Error::Empty("block assignment"));
        }
        if let Some(pos) = block_sizes.iter().position(|&b| b == 0) {
            return Err(Error::Config(format!("head {pos} has block size 0")));
        }
        Ok(Self { block_sizes })
    }

    pub fn uniform(num_heads: usize, block_size: usize) -> Result<Self> {
        Self::new(vec![block_size; num_heads])
    }

    /// Checks head count, candidate membership and page divisibility.
    pub fn validate(&self, config: &EngineConfig) -> Result<()> {
        check_dim("assignment heads", config.num_heads, self.block_sizes.len())?;
        for (head, &b) in self.block_sizes.iter().enumerate() {
            if !config.candidate_block_sizes.contains(&b) {
                return Err(Error::Config(format!(
                    "head {head}: block size {b} is not a candidate {:?}",
                    config.candidate_block_sizes
                )));
            }
            if b % config.page_size != 0 {
                return Err(Error::Config(format!(
                    "head {head}: block size {b} is not a multiple of the page size {}",
                    config.page_size
                )));
            }
        }
        Ok(())
    }

    pub fn num_heads(&self) -> usize {
        self.block_sizes.len()
    }

    #[inline]
    pub fn block_size(&self, head: usize) -> usize {
        self.block_sizes[head]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.block_sizes
    }

    pub fn average(&self) -> f64 {
        self.block_sizes.iter().sum::<usize>() as f64 / self.block_sizes.len() as f64
    }

    /// Number of blocks of head `head` covering `seq_len` tokens.
    #[inline]
    pub fn num_blocks(&self, head: usize, seq_len: usize) -> usize {
        seq_len.div_ceil(self.block_sizes[head])
    }
}

/// Prefix sums of per-head centroid counts: `offsets[h + 1] = offsets[h] + ceil(seq_len / B_h)`.
pub fn build_offsets(seq_len: usize, assignment: &BlockAssignment) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(assignment.num_heads() + 1);
    offsets.push(0);
    let mut acc = 0;
    for &b in assignment.as_slice() {
        acc += seq_len.div_ceil(b);
        offsets.push(acc);
    }
    offsets
}

/// Flattened per-head block centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidStore {
    method: CentroidMethod,
    head_dim: usize,
    seq_len: usize,
    /// Mean vectors, or per-channel maxima for [`CentroidMethod::MaxMin`].
    values: Vec<f32>,
    /// Per-channel minima; empty for [`CentroidMethod::Mean`].
    mins: Vec<f32>,
    offsets: Vec<usize>,
    assignment: BlockAssignment,
}

/// Summarizes `keys` of every head into block centroids.
pub fn compute_block_centroids<K: KeyRows + ?Sized>(
    keys: &K,
    assignment: &BlockAssignment,
    method: CentroidMethod,
) -> Result<CentroidStore> {
    CentroidStore::compute(keys, assignment, method)
}

impl CentroidStore {
    pub fn compute<K: KeyRows + ?Sized>(
        keys: &K,
        assignment: &BlockAssignment,
        method: CentroidMethod,
    ) -> Result<Self> {
        let seq_len = keys.seq_len();
        if seq_len == 0 {
            return Err(Error::Empty("key rows"));
        }
        check_dim("assignment heads", keys.num_heads(), assignment.num_heads())?;
        let d = keys.head_dim();
        let offsets = build_offsets(seq_len, assignment);
        let total = offsets[assignment.num_heads()];
        let mut store = Self {
            method,
            head_dim: d,
            seq_len,
            values: vec![0.0; total * d],
            mins: match method {
                CentroidMethod::Mean => Vec::new(),
                CentroidMethod::MaxMin => vec![0.0; total * d],
            },
            offsets,
            assignment: assignment.clone(),
        };
        for head in 0..assignment.num_heads() {
            let n = store.num_centroids(head);
            store.summarize(keys, head, 0..n);
        }
        Ok(store)
    }

    /// Assembles a store from precomputed parts.
    pub fn from_raw(
        method: CentroidMethod,
        head_dim: usize,
        seq_len: usize,
        values: Vec<f32>,
        mins: Vec<f32>,
        assignment: BlockAssignment,
    ) -> Result<Self> {
        let offsets = build_offsets(seq_len, &assignment);
        let total = offsets[assignment.num_heads()];
        check_dim("centroid values", total * head_dim, values.len())?;
        let expected_mins = match method {
            CentroidMethod::Mean => 0,
            CentroidMethod::MaxMin => total * head_dim,
        };
        check_dim("centroid minima", expected_mins, mins.len())?;
        Ok(Self {
            method,
            head_dim,
            seq_len,
            values,
            mins,
            offsets,
            assignment,
        })
    }

    pub fn method(&self) -> CentroidMethod {
        self.method
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn num_heads(&self) -> usize {
        self.assignment.num_heads()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn assignment(&self) -> &BlockAssignment {
        &self.assignment
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn mins(&self) -> &[f32] {
        &self.mins
    }

    pub fn total_centroids(&self) -> usize {
        *self.offsets.last().expect("offsets never empty")
    }

    #[inline]
    pub fn num_centroids(&self, head: usize) -> usize {
        self.offsets[head + 1] - self.offsets[head]
    }

    /// Mean vector, or per-channel maxima for max-min stores.
    #[inline]
    pub fn centroid(&self, head: usize, index: usize) -> &[f32] {
        let at = (self.offsets[head] + index) * self.head_dim;
        &self.values[at..at + self.head_dim]
    }

    /// Per-channel minima of a max-min centroid.
    #[inline]
    pub fn min_centroid(&self, head: usize, index: usize) -> Option<&[f32]> {
        if self.mins.is_empty() {
            return None;
        }
        let at = (self.offsets[head] + index) * self.head_dim;
        Some(&self.mins[at..at + self.head_dim])
    }

    /// Recomputes the trailing centroid(s) of `head` after tokens were appended.
    ///
    /// `keys` must be the cache the store was built from, already extended.
    /// When new blocks started, their entries are inserted into the flat
    /// layout and the offsets of all later heads shift.
    pub fn refresh_tail_centroid<K: KeyRows + ?Sized>(
        &mut self,
        head: usize,
        keys: &K,
    ) -> Result<()> {
        check_index("head", head, self.num_heads())?;
        check_dim("key head_dim", self.head_dim, keys.head_dim())?;
        let seq_len = keys.seq_len();
        if seq_len < self.seq_len {
            return Err(Error::Config(format!(
                "key rows shrank from {} to {seq_len} tokens",
                self.seq_len
            )));
        }
        let old = self.num_centroids(head);
        let new = self.assignment.num_blocks(head, seq_len);
        if new > old {
            let grow = new - old;
            let at = self.offsets[head + 1] * self.head_dim;
            let fill = std::iter::repeat_n(0.0, grow * self.head_dim);
            self.values.splice(at..at, fill.clone());
            if !self.mins.is_empty() {
                self.mins.splice(at..at, fill);
            }
            for off in &mut self.offsets[head + 1..] {
                *off += grow;
            }
        }
        self.seq_len = seq_len;
        self.summarize(keys, head, old.saturating_sub(1)..new);
        Ok(())
    }

    /// Refreshes the tail of every head.
    pub fn refresh_all<K: KeyRows + ?Sized>(&mut self, keys: &K) -> Result<()> {
        for head in 0..self.num_heads() {
            self.refresh_tail_centroid(head, keys)?;
        }
        Ok(())
    }

    /// Recomputes centroids `blocks` of `head` from `keys`.
    fn summarize<K: KeyRows + ?Sized>(
        &mut self,
        keys: &K,
        head: usize,
        blocks: std::ops::Range<usize>,
    ) {
        let d = self.head_dim;
        let b = self.assignment.block_size(head);
        let mut acc = vec![0.0f64; d];
        for block in blocks {
            let start = block * b;
            let end = (start + b).min(self.seq_len);
            let at = (self.offsets[head] + block) * d;
            match self.method {
                CentroidMethod::Mean => {
                    acc.fill(0.0);
                    for t in start..end {
                        for (a, &k) in acc.iter_mut().zip(keys.key(head, t)) {
                            *a += f64::from(k);
                        }
                    }
                    let rows = (end - start) as f64;
                    for (out, a) in self.values[at..at + d].iter_mut().zip(&acc) {
                        *out = (a / rows) as f32;
                    }
                }
                CentroidMethod::MaxMin => {
                    let (maxs, mins) = (&mut self.values[at..at + d], &mut self.mins[at..at + d]);
                    maxs.copy_from_slice(keys.key(head, start));
                    mins.copy_from_slice(keys.key(head, start));
                    for t in start + 1..end {
                        for ((hi, lo), &k) in
                            maxs.iter_mut().zip(mins.iter_mut()).zip(keys.key(head, t))
                        {
                            *hi = hi.max(k);
                            *lo = lo.min(k);
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kvstore::{DenseKeys, PagedKVCache};
    use proptest::prelude::*;

    #[test]
    fn mean_and_maxmin_of_two_rows() {
        let keys = DenseKeys::new(1, 2, vec![1., 3., 3., 1.]).unwrap();
        let one_block = BlockAssignment::uniform(1, 2).unwrap();
        let mean = compute_block_centroids(&keys, &one_block, CentroidMethod::Mean).unwrap();
        assert_eq!(mean.centroid(0, 0), &[2., 2.]);
        let mm = compute_block_centroids(&keys, &one_block, CentroidMethod::MaxMin).unwrap();
        assert_eq!(mm.centroid(0, 0), &[3., 3.]);
        assert_eq!(mm.min_centroid(0, 0).unwrap(), &[1., 1.]);
    }

    #[test]
    fn unit_blocks_reproduce_keys() {
        let data: Vec<f32> = (0..24).map(|i| i as f32 * 0.37 - 2.0).collect();
        let keys = DenseKeys::new(2, 3, data.clone()).unwrap();
        let store = compute_block_centroids(
            &keys,
            &BlockAssignment::uniform(2, 1).unwrap(),
            CentroidMethod::Mean,
        )
        .unwrap();
        assert_eq!(store.values(), data.as_slice());
    }

    #[test]
    fn empty_keys_rejected() {
        let cache = PagedKVCache::new(1, 2, 16, 16).unwrap();
        let res = compute_block_centroids(
            &cache,
            &BlockAssignment::uniform(1, 16).unwrap(),
            CentroidMethod::Mean,
        );
        assert!(matches!(res, Err(Error::Empty(_))));
    }

    #[test]
    fn offsets_examples() {
        let a = BlockAssignment::new(vec![32, 64, 16]).unwrap();
        assert_eq!(build_offsets(128, &a), vec![0, 4, 6, 14]);
        assert_eq!(build_offsets(0, &a), vec![0, 0, 0, 0]);
        assert_eq!(
            build_offsets(100, &BlockAssignment::new(vec![32]).unwrap()),
            vec![0, 4]
        );
    }

    #[test]
    fn running_mean_tail_refresh() {
        let mut cache = PagedKVCache::new(1, 2, 1, 8).unwrap();
        cache.append_kv(&[2., 2.], &[0., 0.]).unwrap();
        let assignment = BlockAssignment::uniform(1, 4).unwrap();
        let mut store = CentroidStore::compute(&cache, &assignment, CentroidMethod::Mean).unwrap();
        assert_eq!(store.centroid(0, 0), &[2., 2.]);
        cache.append_kv(&[4., 4.], &[0., 0.]).unwrap();
        store.refresh_tail_centroid(0, &cache).unwrap();
        assert_eq!(store.centroid(0, 0), &[3., 3.]);
    }

    #[test]
    fn refresh_crossing_block_boundary() {
        let mut cache = PagedKVCache::new(2, 1, 16, 64).unwrap();
        for t in 0..32 {
            cache.append_kv(&[t as f32, 1.0], &[0., 0.]).unwrap();
        }
        let assignment = BlockAssignment::new(vec![32, 16]).unwrap();
        let mut store = CentroidStore::compute(&cache, &assignment, CentroidMethod::Mean).unwrap();
        assert_eq!(store.offsets(), &[0, 1, 3]);
        cache.append_kv(&[100.0, 1.0], &[0., 0.]).unwrap();
        store.refresh_all(&cache).unwrap();
        assert_eq!(store.offsets(), &[0, 2, 5]);
        assert_eq!(store.centroid(0, 1), &[100.0]);
        assert_eq!(
            store,
            CentroidStore::compute(&cache, &assignment, CentroidMethod::Mean).unwrap()
        );
    }

    #[test]
    fn refresh_rejects_bad_head() {
        let mut cache = PagedKVCache::new(1, 1, 16, 16).unwrap();
        cache.append_kv(&[1.0], &[1.0]).unwrap();
        let mut store = CentroidStore::compute(
            &cache,
            &BlockAssignment::uniform(1, 16).unwrap(),
            CentroidMethod::Mean,
        )
        .unwrap();
        assert!(store.refresh_tail_centroid(3, &cache).is_err());
    }

    fn arb_case() -> impl Strategy<Value = (usize, usize, Vec<usize>, Vec<f32>, bool)> {
        (1usize..4, 1usize..5, 1usize..150).prop_flat_map(|(heads, d, n)| {
            (
                Just(heads),
                Just(d),
                prop::collection::vec(prop::sample::select(vec![16usize, 32, 64]), heads),
                prop::collection::vec(-50.0f32..50.0, heads * d * n),
                any::<bool>(),
            )
        })
    }

    proptest! {
        #[test]
        fn incremental_equals_rebuild((heads, d, sizes, data, maxmin) in arb_case()) {
            let n = data.len() / (heads * d);
            let method = if maxmin { CentroidMethod::MaxMin } else { CentroidMethod::Mean };
            let assignment = BlockAssignment::new(sizes).unwrap();
            let mut cache = PagedKVCache::new(heads, d, 16, n).unwrap();
            let row = |t: usize| -> Vec<f32> {
                (0..heads).flat_map(|h| data[(h * n + t) * d..(h * n + t + 1) * d].to_vec()).collect()
            };
            cache.append_kv(&row(0), &row(0)).unwrap();
            let mut store = CentroidStore::compute(&cache, &assignment, method).unwrap();
            for t in 1..n {
                cache.append_kv(&row(t), &row(t)).unwrap();
                store.refresh_all(&cache).unwrap();
            }
            let rebuilt = CentroidStore::compute(&cache, &assignment, method).unwrap();
            prop_assert_eq!(&store, &rebuilt);
            let dense = DenseKeys::new(heads, d, data.clone()).unwrap();
            prop_assert_eq!(&CentroidStore::compute(&dense, &assignment, method).unwrap(), &rebuilt);
        }

        #[test]
        fn centroids_stay_within_block_envelope((heads, d, sizes, data, _m) in arb_case()) {
            let keys = DenseKeys::new(heads, d, data).unwrap();
            let assignment = BlockAssignment::new(sizes).unwrap();
            let mean = CentroidStore::compute(&keys, &assignment, CentroidMethod::Mean).unwrap();
            let mm = CentroidStore::compute(&keys, &assignment, CentroidMethod::MaxMin).unwrap();
            let offsets = build_offsets(keys.seq_len(), &assignment);
            prop_assert_eq!(offsets.last().copied().unwrap(),
                (0..heads).map(|h| keys.seq_len().div_ceil(assignment.block_size(h))).sum::<usize>());
            prop_assert_eq!(mean.offsets(), offsets.as_slice());
            for h in 0..heads {
                for i in 0..mean.num_centroids(h) {
                    let hi = mm.centroid(h, i);
                    let lo = mm.min_centroid(h, i).unwrap();
                    for c in 0..d {
                        prop_assert!(hi[c] >= lo[c]);
                        let m = mean.centroid(h, i)[c];
                        prop_assert!(lo[c] <= m && m <= hi[c]);
                    }
                }
            }
        }
    }
}
