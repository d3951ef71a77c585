//! TOML run configuration. Every key is optional; command-line flags
//! override the file.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Deserialize;
use varblock_core::workload::{parse_profiles, WorkloadSpec};
use varblock_core::{CentroidMethod, EngineConfig, QuantSpec};

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub seed: u64,
    pub num_heads: usize,
    pub head_dim: usize,
    pub page_size: usize,
    pub candidate_block_sizes: Vec<usize>,
    pub token_budget: usize,
    pub recall_threshold: f64,
    pub centroid_method: String,
    pub quant: String,
    pub pin_trailing_block: bool,
    pub seq_len: usize,
    pub head_profiles: String,
    pub signal_strength: f32,
    pub channel_bias: f32,
    pub calibration_samples: usize,
    pub decode_steps: usize,
    pub ablation_samples: usize,
    pub bench_contexts: Vec<usize>,
    pub bench_heads: usize,
    pub bench_runs: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            seed: 0,
            num_heads: 16,
            head_dim: 64,
            page_size: 16,
            candidate_block_sizes: vec![16, 32, 64],
            token_budget: 512,
            recall_threshold: 0.98,
            centroid_method: "mean".into(),
            quant: "int4-asym".into(),
            pin_trailing_block: true,
            seq_len: 8192,
            head_profiles: "8*clustered:2x64,8*scattered:128".into(),
            signal_strength: 8.0,
            channel_bias: 1.0,
            calibration_samples: 50,
            decode_steps: 64,
            ablation_samples: 5,
            bench_contexts: vec![65_536],
            bench_heads: 32,
            bench_runs: 5,
        }
    }
}

/// `none` or a quantization spec such as `int4-asym` or `int4xasym`.
pub fn parse_quant(s: &str) -> Result<Option<QuantSpec>> {
    if s.trim().eq_ignore_ascii_case("none") {
        return Ok(None);
    }
    Ok(Some(s.parse()?))
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn engine_config(&self) -> Result<EngineConfig> {
        let config = EngineConfig {
            num_heads: self.num_heads,
            head_dim: self.head_dim,
            page_size: self.page_size,
            candidate_block_sizes: self.candidate_block_sizes.clone(),
            token_budget: self.token_budget,
            recall_threshold: self.recall_threshold,
            centroid_method: self.centroid_method.parse::<CentroidMethod>()?,
            quant: parse_quant(&self.quant)?,
            pin_trailing_block: self.pin_trailing_block,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn workload(&self) -> Result<WorkloadSpec> {
        let head_profiles = parse_profiles(&self.head_profiles)?;
        if head_profiles.len() != self.num_heads {
            bail!(
                "head_profiles describes {} heads but num_heads is {}",
                head_profiles.len(),
                self.num_heads
            );
        }
        let spec = WorkloadSpec {
            seq_len: self.seq_len,
            num_heads: self.num_heads,
            head_dim: self.head_dim,
            head_profiles,
            signal_strength: self.signal_strength,
            channel_bias: self.channel_bias,
            max_block_size: *self
                .candidate_block_sizes
                .iter()
                .max()
                .context("no candidate block sizes")?,
            seed: self.seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_consistent() {
        let s = Settings::default();
        s.engine_config().unwrap();
        assert_eq!(s.workload().unwrap().num_heads, 16);
    }

    #[test]
    fn partial_file_and_unknown_keys() {
        let s: Settings = toml::from_str("seed = 9\nquant = \"none\"").unwrap();
        assert_eq!(s.seed, 9);
        assert_eq!(s.engine_config().unwrap().quant, None);
        assert!(toml::from_str::<Settings>("colour = 1").is_err());
    }

    #[test]
    fn quant_flag_forms() {
        assert_eq!(
            parse_quant("int4xasym").unwrap(),
            Some(QuantSpec::INT4_ASYM)
        );
        assert_eq!(parse_quant("NONE").unwrap(), None);
        assert!(parse_quant("int5-asym").is_err());
    }
}
