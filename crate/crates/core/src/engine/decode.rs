//! Decode-time orchestration: append, refresh centroids, estimate, select,
//! attend.

use crate::centroids::{BlockAssignment, CentroidStore};
use crate::config::EngineConfig;
use crate::error::{check_dim, Error, Result};
use crate::kvstore::{KeyRows, KvRows, PagedKVCache};
use crate::quantizer::QuantizedCentroidStore;

use super::attention::{full_attention_oracle, sparse_attention, AttentionOutput};
use super::estimate::{estimate_scores, Scores};
use super::topk::{select_topk, SelectionResult};

/// One new token: head-major query, key and value rows.
#[derive(Debug, Clone, Copy)]
pub struct TokenQkv<'a> {
    pub query: &'a [f32],
    pub key: &'a [f32],
    pub value: &'a [f32],
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeStep {
    pub output: AttentionOutput,
    /// `None` when the context still fits in the budget and full attention ran.
    pub selection: Option<SelectionResult>,
    /// Position of the token this step appended.
    pub position: usize,
}

/// KV cache plus the centroid stores derived from it.
#[derive(Debug, Clone)]
pub struct DecodeEngine {
    config: EngineConfig,
    assignment: BlockAssignment,
    cache: PagedKVCache,
    store: CentroidStore,
    quantized: Option<QuantizedCentroidStore>,
}

impl DecodeEngine {
    /// Builds centroids over an already prefilled cache.
    pub fn from_cache(
        config: EngineConfig,
        assignment: BlockAssignment,
        cache: PagedKVCache,
    ) -> Result<Self> {
        config.validate()?;
        assignment.validate(&config)?;
        check_dim("cache heads", config.num_heads, cache.num_heads())?;
        check_dim("cache head_dim", config.head_dim, cache.head_dim())?;
        check_dim("cache page size", config.page_size, cache.page_size())?;
        if cache.seq_len() == 0 {
            return Err(Error::Empty("prefilled cache"));
        }
        let store = CentroidStore::compute(&cache, &assignment, config.centroid_method)?;
        let quantized = config
            .quant
            .map(|spec| QuantizedCentroidStore::quantize(&store, spec))
            .transpose()?;
        Ok(Self {
            config,
            assignment,
            cache,
            store,
            quantized,
        })
    }

    /// Prefills the first `prefill_len` tokens of `source` into a cache with
    /// room for `capacity` tokens.
    pub fn prefill<S: KvRows + ?Sized>(
        config: EngineConfig,
        assignment: BlockAssignment,
        source: &S,
        prefill_len: usize,
        capacity: usize,
    ) -> Result<Self> {
        if prefill_len > source.seq_len() {
            return Err(Error::IndexOutOfRange {
                what: "prefill length",
                index: prefill_len,
                len: source.seq_len() + 1,
            });
        }
        let cache = PagedKVCache::from_rows(source, prefill_len, config.page_size, capacity)?;
        Self::from_cache(config, assignment, cache)
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn assignment(&self) -> &BlockAssignment {
        &self.assignment
    }

    pub fn cache(&self) -> &PagedKVCache {
        &self.cache
    }

    pub fn store(&self) -> &CentroidStore {
        &self.store
    }

    pub fn quantized(&self) -> Option<&QuantizedCentroidStore> {
        self.quantized.as_ref()
    }

    /// Appends one token, keeps the centroid stores current and attends with
    /// the token's query.
    pub fn decode_step(&mut self, token: TokenQkv<'_>) -> Result<DecodeStep> {
        let position = self.cache.append_kv(token.key, token.value)?;
        self.store.refresh_all(&self.cache)?;
        if let Some(q) = &mut self.quantized {
            q.refresh_from(&self.store)?;
        }
        let (output, selection) = self.attend(token.query)?;
        Ok(DecodeStep {
            output,
            selection,
            position,
        })
    }

    /// Importance scores for `queries` from the store used for selection.
    pub fn estimate(&self, queries: &[f32]) -> Result<Scores> {
        match &self.quantized {
            Some(q) => estimate_scores(queries, q),
            None => estimate_scores(queries, &self.store),
        }
    }

    /// Runs estimate, select and sparse attention on the current cache, or
    /// full attention while the context fits in the token budget.
    pub fn attend(&self, queries: &[f32]) -> Result<(AttentionOutput, Option<SelectionResult>)> {
        if self.cache.seq_len() <= self.config.token_budget {
            return Ok((full_attention_oracle(queries, &self.cache)?, None));
        }
        let scores = self.estimate(queries)?;
        let mut selection = select_topk(
            &scores,
            &self.assignment,
            self.config.token_budget,
            self.config.pin_trailing_block,
        )?;
        selection.map_pages(&self.cache)?;
        let output = sparse_attention(queries, &self.cache, &selection)?;
        Ok((output, Some(selection)))
    }
}
