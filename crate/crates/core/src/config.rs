//! Engine-wide configuration shared by every pipeline stage.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::quantizer::QuantSpec;

/// How a block of keys is summarized for importance estimation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum CentroidMethod {
    /// Arithmetic mean of the block's key rows.
    #[default]
    Mean,
    /// Per-channel maximum and minimum vectors, scored Quest-style.
    MaxMin,
}

impl CentroidMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            CentroidMethod::Mean => "mean",
            CentroidMethod::MaxMin => "maxmin",
        }
    }
}

impl fmt::Display for CentroidMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CentroidMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mean" => Ok(CentroidMethod::Mean),
            "maxmin" | "max-min" | "max_min" => Ok(CentroidMethod::MaxMin),
            other => Err(Error::Parse(format!("unknown centroid method `{other}`"))),
        }
    }
}

/// Parameters of the decode engine.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub num_heads: usize,
    pub head_dim: usize,
    /// Tokens per physical KV page. Every candidate block size must be a
    /// multiple of it.
    pub page_size: usize,
    /// Candidate block sizes in strictly ascending order.
    pub candidate_block_sizes: Vec<usize>,
    /// Tokens each head may attend to during sparse decoding.
    pub token_budget: usize,
    /// Recall retention threshold used when assigning block sizes.
    pub recall_threshold: f64,
    pub centroid_method: CentroidMethod,
    /// Centroid quantization used for estimation; `None` keeps full precision.
    pub quant: Option<QuantSpec>,
    /// Always keep the most recent (trailing) block in the selection.
    pub pin_trailing_block: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            num_heads: 8,
            head_dim: 64,
            page_size: 16,
            candidate_block_sizes: vec![16, 32, 64],
            token_budget: 4096,
            recall_threshold: 0.98,
            centroid_method: CentroidMethod::Mean,
            quant: Some(QuantSpec::INT4_ASYM),
            pin_trailing_block: true,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 {
            return Err(Error::Config("num_heads must be at least 1".into()));
        }
        if self.head_dim == 0 {
            return Err(Error::Config("head_dim must be at least 1".into()));
        }
        if self.page_size == 0 {
            return Err(Error::Config("page_size must be at least 1".into()));
        }
        validate_candidates(&self.candidate_block_sizes, self.page_size)?;
        let max_block = *self.candidate_block_sizes.last().expect("non-empty");
        if self.token_budget < max_block {
            return Err(Error::Config(format!(
                "token_budget {} is smaller than the largest candidate block size {max_block}",
                self.token_budget
            )));
        }
        // Thresholds above 1 are accepted: they force every strictly
        // degrading head onto the finest block size.
        if !(self.recall_threshold.is_finite() && self.recall_threshold > 0.0) {
            return Err(Error::Config(format!(
                "recall_threshold must be positive, got {}",
                self.recall_threshold
            )));
        }
        Ok(())
    }

    pub fn min_block_size(&self) -> usize {
        self.candidate_block_sizes[0]
    }

    pub fn max_block_size(&self) -> usize {
        *self.candidate_block_sizes.last().expect("validated config")
    }
}

pub(crate) fn validate_candidates(candidates: &[usize], page_size: usize) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::Config("no candidate block sizes".into()));
    }
    if candidates.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!(
            "candidate block sizes must be strictly ascending: {candidates:?}"
        )));
    }
    for &b in candidates {
        if b == 0 || b % page_size != 0 {
            return Err(Error::Config(format!(
                "block size {b} is not a multiple of the page size {page_size}"
            )));
        }
    }
    Ok(())
}
