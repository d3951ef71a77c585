//! Synthetic fixtures shared by the kernel benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use varblock_core::engine::{estimate_scores, select_topk, SelectionResult};
use varblock_core::{BlockAssignment, CentroidMethod, CentroidStore, PagedKVCache};

pub const HEAD_DIM: usize = 64;
pub const PAGE_SIZE: usize = 16;
pub const TOKEN_BUDGET: usize = 512;
pub const BLOCK_SIZES: [usize; 3] = [16, 32, 64];

pub fn gaussian(rng: &mut ChaCha8Rng, len: usize) -> Vec<f32> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

/// Heads cycle through [`BLOCK_SIZES`].
pub fn mixed_assignment(heads: usize) -> BlockAssignment {
    BlockAssignment::new(
        (0..heads)
            .map(|h| BLOCK_SIZES[h % BLOCK_SIZES.len()])
            .collect(),
    )
    .unwrap()
}

/// Random centroid store plus a matching query batch.
pub fn centroid_fixture(heads: usize, seq_len: usize, seed: u64) -> (CentroidStore, Vec<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let assignment = mixed_assignment(heads);
    let total: usize = (0..heads).map(|h| assignment.num_blocks(h, seq_len)).sum();
    let values = gaussian(&mut rng, total * HEAD_DIM);
    let store = CentroidStore::from_raw(
        CentroidMethod::Mean,
        HEAD_DIM,
        seq_len,
        values,
        Vec::new(),
        assignment,
    )
    .unwrap();
    let q = gaussian(&mut rng, heads * HEAD_DIM);
    (store, q)
}

pub struct AttentionFixture {
    pub cache: PagedKVCache,
    pub queries: Vec<f32>,
    pub selection: SelectionResult,
}

/// Filled cache with scrambled pages and a mapped selection.
pub fn attention_fixture(heads: usize, seq_len: usize, seed: u64) -> AttentionFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cache = PagedKVCache::new(heads, HEAD_DIM, PAGE_SIZE, seq_len).unwrap();
    cache.scramble_free_pages(rng.random());
    for _ in 0..seq_len {
        let k = gaussian(&mut rng, heads * HEAD_DIM);
        let v = gaussian(&mut rng, heads * HEAD_DIM);
        cache.append_kv(&k, &v).unwrap();
    }
    let assignment = mixed_assignment(heads);
    let store = CentroidStore::compute(&cache, &assignment, CentroidMethod::Mean).unwrap();
    let queries = gaussian(&mut rng, heads * HEAD_DIM);
    let scores = estimate_scores(&queries, &store).unwrap();
    let mut selection = select_topk(&scores, &assignment, TOKEN_BUDGET, true).unwrap();
    selection.map_pages(&cache).unwrap();
    AttentionFixture {
        cache,
        queries,
        selection,
    }
}
