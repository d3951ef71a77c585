//! Paged KV cache with uniform physical pages.
//!
//! Each head owns a pool of fixed-size pages and a page table mapping logical
//! page slots to physical pages. A logical block of `B` tokens covers
//! `B / P` consecutive page-table entries, so heads with different block sizes
//! share one physical page size and no block ever needs to be gathered.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::EngineConfig;
use crate::error::{check_dim, check_index, Error, Result};

pub type PageId = u32;

/// Read access to per-head key rows.
pub trait KeyRows {
    fn num_heads(&self) -> usize;
    fn head_dim(&self) -> usize;
    fn seq_len(&self) -> usize;
    fn key(&self, head: usize, token: usize) -> &[f32];
}

/// Read access to per-head key and value rows.
pub trait KvRows: KeyRows {
    fn value(&self, head: usize, token: usize) -> &[f32];
}

/// The physical pages backing one logical block of one head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PageSpan {
    pub head: usize,
    pub page_ids: Vec<PageId>,
    /// Tokens of the block that hold data; less than the block size only for
    /// the trailing partial block.
    pub valid_tokens: usize,
    /// Logical position of the first token in the block.
    pub start_token: usize,
}

impl PageSpan {
    /// Iterates `(page_id, rows_used)` pairs in logical order.
    pub fn pages(&self, page_size: usize) -> impl Iterator<Item = (PageId, usize)> + '_ {
        let valid = self.valid_tokens;
        self.page_ids
            .iter()
            .enumerate()
            .filter_map(move |(i, &id)| {
                let used = valid.saturating_sub(i * page_size).min(page_size);
                (used > 0).then_some((id, used))
            })
    }

    pub fn token_range(&self) -> std::ops::Range<usize> {
        self.start_token..self.start_token + self.valid_tokens
    }
}

/// Maps a logical block onto its contiguous run of page-table entries.
///
/// `stride = block_size / page_size` entries starting at
/// `block_index * stride`, truncated at the end of the table for the trailing
/// partial block.
pub fn block_to_pages(
    head: usize,
    block_index: usize,
    block_size: usize,
    page_size: usize,
    page_table: &[PageId],
    seq_len: usize,
) -> Result<PageSpan> {
    if page_size == 0 || block_size == 0 || block_size % page_size != 0 {
        return Err(Error::Config(format!(
            "block size {block_size} is not a multiple of the page size {page_size}"
        )));
    }
    let num_blocks = seq_len.div_ceil(block_size);
    check_index("block", block_index, num_blocks)?;
    let stride = block_size / page_size;
    let first = block_index * stride;
    let last = (first + stride).min(page_table.len());
    if first >= last {
        return Err(Error::IndexOutOfRange {
            what: "page table entry",
            index: first,
            len: page_table.len(),
        });
    }
    let start_token = block_index * block_size;
    Ok(PageSpan {
        head,
        page_ids: page_table[first..last].to_vec(),
        valid_tokens: block_size.min(seq_len - start_token),
        start_token,
    })
}

/// Contiguous copy of one block's valid rows.
#[derive(Debug, Clone, PartialEq)]
pub struct GatheredBlock {
    pub keys: Vec<f32>,
    pub values: Vec<f32>,
    pub rows: usize,
}

/// Per-head paged storage of key and value rows.
#[derive(Debug)]
pub struct PagedKVCache {
    page_size: usize,
    head_dim: usize,
    num_heads: usize,
    capacity: usize,
    seq_len: usize,
    key_pages: Vec<Vec<f32>>,
    value_pages: Vec<Vec<f32>>,
    page_tables: Vec<Vec<PageId>>,
    // Next pages to hand out, popped from the back.
    free_pages: Vec<Vec<PageId>>,
    kv_copies: AtomicUsize,
}

impl Clone for PagedKVCache {
    fn clone(&self) -> Self {
        Self {
            page_size: self.page_size,
            head_dim: self.head_dim,
            num_heads: self.num_heads,
            capacity: self.capacity,
            seq_len: self.seq_len,
            key_pages: self.key_pages.clone(),
            value_pages: self.value_pages.clone(),
            page_tables: self.page_tables.clone(),
            free_pages: self.free_pages.clone(),
            kv_copies: AtomicUsize::new(self.kv_copies.load(Ordering::Relaxed)),
        }
    }
}

/// Creates an empty cache sized for `capacity` tokens under `config`.
pub fn init_cache(config: &EngineConfig, capacity: usize) -> Result<PagedKVCache> {
    crate::config::validate_candidates(&config.candidate_block_sizes, config.page_size.max(1))?;
    PagedKVCache::new(
        config.num_heads,
        config.head_dim,
        config.page_size,
        capacity,
    )
}

impl PagedKVCache {
    pub fn new(
        num_heads: usize,
        head_dim: usize,
        page_size: usize,
        capacity: usize,
    ) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("cache capacity must be positive".into()));
        }
        if page_size == 0 || num_heads == 0 || head_dim == 0 {
            return Err(Error::Config(
                "page_size, num_heads and head_dim must be positive".into(),
            ));
        }
        let pages = capacity.div_ceil(page_size);
        let pool_len = pages * page_size * head_dim;
        let free: Vec<PageId> = (0..pages as PageId).rev().collect();
        Ok(Self {
            page_size,
            head_dim,
            num_heads,
            capacity,
            seq_len: 0,
            key_pages: vec![vec![0.0; pool_len]; num_heads],
            value_pages: vec![vec![0.0; pool_len]; num_heads],
            page_tables: vec![Vec::with_capacity(pages); num_heads],
            free_pages: vec![free; num_heads],
            kv_copies: AtomicUsize::new(0),
        })
    }

    /// Builds a cache holding `seq_len` tokens read from `source`.
    pub fn from_rows<S: KvRows + ?Sized>(
        source: &S,
        seq_len: usize,
        page_size: usize,
        capacity: usize,
    ) -> Result<Self> {
        let mut cache = Self::new(source.num_heads(), source.head_dim(), page_size, capacity)?;
        let h = source.num_heads();
        let d = source.head_dim();
        let mut keys = vec![0.0; h * d];
        let mut values = vec![0.0; h * d];
        for t in 0..seq_len {
            for head in 0..h {
                keys[head * d..(head + 1) * d].copy_from_slice(source.key(head, t));
                values[head * d..(head + 1) * d].copy_from_slice(source.value(head, t));
            }
            cache.append_kv(&keys, &values)?;
        }
        Ok(cache)
    }

    /// Randomly permutes the not-yet-allocated physical pages of every head.
    ///
    /// The logical view is unchanged; only the page tables stop being the
    /// identity mapping.
    pub fn scramble_free_pages(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for free in &mut self.free_pages {
            free.shuffle(&mut rng);
        }
    }

    pub fn page_size(&self) -> usize {
        self.page_size
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn page_table(&self, head: usize) -> &[PageId] {
        &self.page_tables[head]
    }

    /// Appends one token's key and value rows for every head.
    ///
    /// `keys` and `values` are head-major, `num_heads * head_dim` long.
    pub fn append_kv(&mut self, keys: &[f32], values: &[f32]) -> Result<usize> {
        let width = self.num_heads * self.head_dim;
        check_dim("appended keys", width, keys.len())?;
        check_dim("appended values", width, values.len())?;
        if self.seq_len >= self.capacity {
            return Err(Error::CapacityExceeded {
                capacity: self.capacity,
            });
        }
        let token = self.seq_len;
        let row = token % self.page_size;
        let d = self.head_dim;
        for head in 0..self.num_heads {
            if row == 0 {
                let page = self.free_pages[head].pop().ok_or(Error::CapacityExceeded {
                    capacity: self.capacity,
                })?;
                self.page_tables[head].push(page);
            }
            let page = *self.page_tables[head].last().expect("page allocated") as usize;
            let at = (page * self.page_size + row) * d;
            self.key_pages[head][at..at + d].copy_from_slice(&keys[head * d..(head + 1) * d]);
            self.value_pages[head][at..at + d].copy_from_slice(&values[head * d..(head + 1) * d]);
        }
        self.seq_len += 1;
        Ok(token)
    }

    /// Page span of one block of `head` under `block_size`.
    pub fn block_span(
        &self,
        head: usize,
        block_index: usize,
        block_size: usize,
    ) -> Result<PageSpan> {
        check_index("head", head, self.num_heads)?;
        block_to_pages(
            head,
            block_index,
            block_size,
            self.page_size,
            &self.page_tables[head],
            self.seq_len,
        )
    }

    /// All `page_size` key rows of a physical page, including unwritten rows.
    #[inline]
    pub fn page_keys(&self, head: usize, page: PageId) -> &[f32] {
        let len = self.page_size * self.head_dim;
        let at = page as usize * len;
        &self.key_pages[head][at..at + len]
    }

    #[inline]
    pub fn page_values(&self, head: usize, page: PageId) -> &[f32] {
        let len = self.page_size * self.head_dim;
        let at = page as usize * len;
        &self.value_pages[head][at..at + len]
    }

    /// Copies a block's valid rows into contiguous buffers.
    ///
    /// Reads token by token through the page table. This is the reference
    /// path for the strided span reads and the baseline for the naive kernel;
    /// every copied row is counted.
    pub fn gather_block_naive(
        &self,
        head: usize,
        block_index: usize,
        block_size: usize,
    ) -> Result<GatheredBlock> {
        check_index("head", head, self.num_heads)?;
        if block_size == 0 || block_size % self.page_size != 0 {
            return Err(Error::Config(format!(
                "block size {block_size} is not a multiple of the page size {}",
                self.page_size
            )));
        }
        check_index("block", block_index, self.seq_len.div_ceil(block_size))?;
        let start = block_index * block_size;
        let end = (start + block_size).min(self.seq_len);
        let rows = end - start;
        let mut keys = Vec::with_capacity(rows * self.head_dim);
        let mut values = Vec::with_capacity(rows * self.head_dim);
        for t in start..end {
            keys.extend_from_slice(self.key(head, t));
            values.extend_from_slice(self.value(head, t));
        }
        self.kv_copies.fetch_add(rows, Ordering::Relaxed);
        Ok(GatheredBlock { keys, values, rows })
    }

    /// Number of KV rows copied out of the cache so far.
    pub fn kv_copy_count(&self) -> usize {
        self.kv_copies.load(Ordering::Relaxed)
    }

    pub fn reset_kv_copy_count(&self) {
        self.kv_copies.store(0, Ordering::Relaxed);
    }

    #[inline]
    fn row_offset(&self, head: usize, token: usize) -> usize {
        let page = self.page_tables[head][token / self.page_size] as usize;
        (page * self.page_size + token % self.page_size) * self.head_dim
    }
}

impl KeyRows for PagedKVCache {
    fn num_heads(&self) -> usize {
        self.num_heads
    }

    fn head_dim(&self) -> usize {
        self.head_dim
    }

    fn seq_len(&self) -> usize {
        self.seq_len
    }

    #[inline]
    fn key(&self, head: usize, token: usize) -> &[f32] {
        debug_assert!(token < self.seq_len);
        let at = self.row_offset(head, token);
        &self.key_pages[head][at..at + self.head_dim]
    }
}

impl KvRows for PagedKVCache {
    #[inline]
    fn value(&self, head: usize, token: usize) -> &[f32] {
        debug_assert!(token < self.seq_len);
        let at = self.row_offset(head, token);
        &self.value_pages[head][at..at + self.head_dim]
    }
}

/// Dense head-major key rows, mainly for building stores from literals.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseKeys {
    num_heads: usize,
    head_dim: usize,
    seq_len: usize,
    data: Vec<f32>,
}

impl DenseKeys {
    /// `data` is laid out `[head][token][channel]`.
    pub fn new(num_heads: usize, head_dim: usize, data: Vec<f32>) -> Result<Self> {
        if num_heads == 0 || head_dim == 0 {
            return Err(Error::Config(
                "num_heads and head_dim must be positive".into(),
            ));
        }
        if data.len() % (num_heads * head_dim) != 0 {
            return Err(Error::DimensionMismatch {
                what: "dense keys",
                expected: num_heads * head_dim,
                found: data.len(),
            });
        }
        let seq_len = data.len() / (num_heads * head_dim);
        Ok(Self {
            num_heads,
            head_dim,
            seq_len,
            data,
        })
    }
}

impl KeyRows for DenseKeys {
    fn num_heads(&self) -> usize {
        self.num_heads
    }

    fn head_dim(&self) -> usize {
        self.head_dim
    }

    fn seq_len(&self) -> usize {
        self.seq_len
    }

    fn key(&self, head: usize, token: usize) -> &[f32] {
        let at = (head * self.seq_len + token) * self.head_dim;
        &self.data[at..at + self.head_dim]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cache_with(seq_len: usize, heads: usize, d: usize, page: usize) -> PagedKVCache {
        let mut cache = PagedKVCache::new(heads, d, page, seq_len.max(1)).unwrap();
        for t in 0..seq_len {
            let keys: Vec<f32> = (0..heads * d).map(|i| (t * 1000 + i) as f32).collect();
            let values: Vec<f32> = keys.iter().map(|k| -k).collect();
            cache.append_kv(&keys, &values).unwrap();
        }
        cache
    }

    #[test]
    fn init_preallocates_pages() {
        let cfg = EngineConfig {
            num_heads: 2,
            head_dim: 4,
            ..EngineConfig::default()
        };
        let cache = init_cache(&cfg, 64).unwrap();
        assert_eq!(cache.seq_len(), 0);
        assert_eq!(cache.free_pages[0].len(), 4);
        assert_eq!(cache.key_pages[1].len(), 4 * 16 * 4);
    }

    #[test]
    fn init_rejects_indivisible_candidates() {
        let cfg = EngineConfig {
            candidate_block_sizes: vec![16, 24],
            ..EngineConfig::default()
        };
        assert!(matches!(init_cache(&cfg, 64), Err(Error::Config(_))));
    }

    #[test]
    fn append_allocates_pages_on_boundaries() {
        let mut cache = PagedKVCache::new(2, 4, 16, 64).unwrap();
        let row = vec![1.0; 8];
        assert_eq!(cache.append_kv(&row, &row).unwrap(), 0);
        assert_eq!(cache.page_table(0).len(), 1);
        for _ in 1..16 {
            cache.append_kv(&row, &row).unwrap();
        }
        assert_eq!(cache.page_table(1).len(), 1);
        assert_eq!(cache.append_kv(&row, &row).unwrap(), 16);
        assert_eq!(cache.page_table(0).len(), 2);
    }

    #[test]
    fn append_at_capacity_fails() {
        let mut cache = PagedKVCache::new(1, 2, 16, 3).unwrap();
        let row = [0.5, 0.5];
        for _ in 0..3 {
            cache.append_kv(&row, &row).unwrap();
        }
        assert!(matches!(
            cache.append_kv(&row, &row),
            Err(Error::CapacityExceeded { capacity: 3 })
        ));
    }

    #[test]
    fn block_to_pages_stride() {
        let table: Vec<PageId> = (0..16).collect();
        let span = block_to_pages(0, 5, 32, 16, &table, 256).unwrap();
        assert_eq!(span.page_ids, vec![10, 11]);
        assert_eq!(span.valid_tokens, 32);
        let span = block_to_pages(0, 0, 16, 16, &table, 256).unwrap();
        assert_eq!(span.page_ids, vec![0]);
    }

    #[test]
    fn trailing_partial_block() {
        let cache = cache_with(100, 1, 3, 16);
        let span = cache.block_span(0, 3, 32).unwrap();
        assert_eq!(span.page_ids, vec![6]);
        assert_eq!(span.valid_tokens, 4);
        let gathered = cache.gather_block_naive(0, 3, 32).unwrap();
        assert_eq!(gathered.rows, 4);
        let mut strided = Vec::new();
        for (page, rows) in span.pages(16) {
            strided.extend_from_slice(&cache.page_keys(0, page)[..rows * 3]);
        }
        assert_eq!(strided, gathered.keys);
    }

    #[test]
    fn out_of_range_block_is_an_error() {
        let cache = cache_with(100, 1, 2, 16);
        assert!(matches!(
            cache.block_span(0, 4, 32),
            Err(Error::IndexOutOfRange { what: "block", .. })
        ));
        assert!(cache.gather_block_naive(0, 7, 16).is_err());
    }

    #[test]
    fn gather_counts_copies() {
        let cache = cache_with(40, 2, 2, 16);
        let full = cache.gather_block_naive(1, 0, 32).unwrap();
        assert_eq!(full.rows, 32);
        assert_eq!(cache.kv_copy_count(), 32);
        cache.gather_block_naive(1, 1, 32).unwrap();
        assert_eq!(cache.kv_copy_count(), 40);
    }

    #[test]
    fn identical_rows_block() {
        let mut cache = PagedKVCache::new(1, 2, 16, 32).unwrap();
        for _ in 0..32 {
            cache.append_kv(&[3.0, 4.0], &[1.0, 2.0]).unwrap();
        }
        let g = cache.gather_block_naive(0, 0, 32).unwrap();
        assert_eq!(g.rows, 32);
        assert!(g.values.chunks(2).all(|r| r == [1.0, 2.0]));
    }

    #[test]
    fn scrambled_pages_preserve_logical_view() {
        let mut cache = PagedKVCache::new(2, 3, 16, 200).unwrap();
        cache.scramble_free_pages(7);
        let mut expected = Vec::new();
        for t in 0..150 {
            let keys: Vec<f32> = (0..6).map(|i| (t * 10 + i) as f32).collect();
            cache.append_kv(&keys, &keys).unwrap();
            expected.push(keys);
        }
        assert_ne!(cache.page_table(0), (0..10).collect::<Vec<_>>().as_slice());
        for (t, keys) in expected.iter().enumerate() {
            assert_eq!(cache.key(1, t), &keys[3..6]);
        }
    }

    #[test]
    fn dense_keys_layout() {
        let keys = DenseKeys::new(2, 2, vec![1., 2., 3., 4., 5., 6., 7., 8.]).unwrap();
        assert_eq!(keys.seq_len(), 2);
        assert_eq!(keys.key(1, 0), &[5., 6.]);
        assert!(DenseKeys::new(2, 2, vec![0.0; 6]).is_err());
    }
}
