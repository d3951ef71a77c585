//! Offline calibration of per-head block sizes from measured attention recall.
//!
//! Recall of a head is the attention mass (from exact softmax weights) that
//! falls on tokens inside its selected blocks. The profiler measures it for
//! every candidate block size under the same token budget, then each head
//! receives the coarsest size that keeps `tau` times its finest-size recall.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::centroids::{BlockAssignment, CentroidStore};
use crate::config::EngineConfig;
use crate::engine::{attention_weights, estimate_scores, select_topk, Scores, SelectionResult};
use crate::error::{check_dim, Error, Result};
use crate::kvstore::KeyRows;
use crate::quantizer::{QuantSpec, QuantizedCentroidStore};
use crate::workload::CalibrationSample;

/// Default number of calibration samples.
pub const DEFAULT_SAMPLE_COUNT: usize = 50;
/// Heads whose mean total-variation distance from uniform attention falls
/// below this are treated as near-uniform.
pub const NEAR_UNIFORM_TV: f64 = 0.1;

/// Per-head attention recall of a selection against exact weights.
///
/// Selected blocks must be distinct. A selection covering every token has
/// recall exactly 1.
pub fn attention_recall(weights: &[Vec<f64>], selection: &SelectionResult) -> Result<Vec<f64>> {
    check_dim("selection heads", weights.len(), selection.heads.len())?;
    selection
        .heads
        .iter()
        .zip(weights)
        .map(|(sel, w)| {
            let n = w.len();
            let b = sel.block_size;
            let (mut sum, mut covered) = (0.0, 0);
            for &block in &sel.blocks {
                let start = block * b;
                if start >= n {
                    return Err(Error::IndexOutOfRange {
                        what: "selected block",
                        index: block,
                        len: n.div_ceil(b),
                    });
                }
                let end = (start + b).min(n);
                sum += w[start..end].iter().sum::<f64>();
                covered += end - start;
            }
            if covered >= n {
                return Ok(1.0);
            }
            Ok(sum.clamp(0.0, 1.0))
        })
        .collect()
}

/// Total-variation distance of each head's weights from the uniform distribution.
fn uniform_distance(weights: &[Vec<f64>]) -> Vec<f64> {
    weights
        .iter()
        .map(|w| {
            let u = 1.0 / w.len() as f64;
            0.5 * w.iter().map(|a| (a - u).abs()).sum::<f64>()
        })
        .collect()
}

/// Exact weights of one sample, or `None` when the context fits in the budget.
fn sample_weights<K: KeyRows>(
    sample: &CalibrationSample<K>,
    config: &EngineConfig,
) -> Result<Option<Vec<Vec<f64>>>> {
    check_dim("sample heads", config.num_heads, sample.keys.num_heads())?;
    check_dim("sample head_dim", config.head_dim, sample.keys.head_dim())?;
    if sample.keys.seq_len() <= config.token_budget {
        return Ok(None);
    }
    attention_weights(&sample.query, &sample.keys).map(Some)
}

fn recall_with<K: KeyRows>(
    sample: &CalibrationSample<K>,
    weights: &[Vec<f64>],
    assignment: &BlockAssignment,
    config: &EngineConfig,
) -> Result<Vec<f64>> {
    let store = CentroidStore::compute(&sample.keys, assignment, config.centroid_method)?;
    let scores = estimate_scores(&sample.query, &store)?;
    let selection = select_topk(
        &scores,
        assignment,
        config.token_budget,
        config.pin_trailing_block,
    )?;
    attention_recall(weights, &selection)
}

/// Mean recall per (head, candidate block size) over a calibration set.
#[derive(Debug, Clone, PartialEq)]
pub struct RecallTable {
    pub candidates: Vec<usize>,
    /// `recalls[head][candidate]`.
    pub recalls: Vec<Vec<f64>>,
    pub sample_count: usize,
    /// Samples dropped because their context fit within the budget.
    pub skipped: usize,
    /// Heads whose attention is numerically close to uniform.
    pub near_uniform: Vec<bool>,
    pub layer_tag: String,
}

impl RecallTable {
    pub fn new(
        candidates: Vec<usize>,
        recalls: Vec<Vec<f64>>,
        sample_count: usize,
    ) -> Result<Self> {
        crate::config::validate_candidates(&candidates, 1)?;
        if sample_count == 0 {
            return Err(Error::Empty("recall table samples"));
        }
        for row in &recalls {
            check_dim("recall row", candidates.len(), row.len())?;
            if let Some(r) = row.iter().find(|r| !(0.0..=1.0).contains(*r)) {
                return Err(Error::Config(format!("recall {r} outside [0, 1]")));
            }
        }
        Ok(Self {
            near_uniform: vec![false; recalls.len()],
            candidates,
            recalls,
            sample_count,
            skipped: 0,
            layer_tag: "0".into(),
        })
    }

    pub fn num_heads(&self) -> usize {
        self.recalls.len()
    }

    /// Recall of `head` at candidate block size `block_size`.
    pub fn recall(&self, head: usize, block_size: usize) -> Option<f64> {
        let c = self.candidates.iter().position(|&b| b == block_size)?;
        Some(self.recalls[head][c])
    }
}

/// Measures recall of every uniform candidate block size on each sample.
pub fn profile_sensitivity<K, I>(samples: I, config: &EngineConfig) -> Result<RecallTable>
where
    K: KeyRows,
    I: IntoIterator<Item = Result<CalibrationSample<K>>>,
{
    config.validate()?;
    let h = config.num_heads;
    let uniform: Vec<BlockAssignment> = config
        .candidate_block_sizes
        .iter()
        .map(|&b| BlockAssignment::uniform(h, b))
        .collect::<Result<_>>()?;
    let c = uniform.len();
    let mut sums = vec![vec![0.0; c]; h];
    let mut tv = vec![0.0; h];
    let (mut used, mut skipped) = (0, 0);
    for sample in samples {
        let sample = sample?;
        let Some(weights) = sample_weights(&sample, config)? else {
            skipped += 1;
            continue;
        };
        for (ci, assignment) in uniform.iter().enumerate() {
            for (head, r) in recall_with(&sample, &weights, assignment, config)?
                .into_iter()
                .enumerate()
            {
                sums[head][ci] += r;
            }
        }
        for (acc, d) in tv.iter_mut().zip(uniform_distance(&weights)) {
            *acc += d;
        }
        used += 1;
    }
    if used == 0 {
        return Err(Error::Empty(
            "calibration samples longer than the token budget",
        ));
    }
    let n = used as f64;
    let recalls = sums
        .into_iter()
        .map(|row| row.into_iter().map(|s| (s / n).clamp(0.0, 1.0)).collect())
        .collect();
    let mut table = RecallTable::new(config.candidate_block_sizes.clone(), recalls, used)?;
    table.skipped = skipped;
    table.near_uniform = tv.into_iter().map(|d| d / n < NEAR_UNIFORM_TV).collect();
    Ok(table)
}

/// Largest candidate whose recall stays at or above `tau` times the recall
/// at the finest candidate, for a single head.
fn retained_block_size(candidates: &[usize], row: &[f64], tau: f64) -> usize {
    let floor = tau * row[0];
    candidates
        .iter()
        .zip(row)
        .filter(|(_, &r)| r >= floor)
        .map(|(&b, _)| b)
        .max()
        .unwrap_or(candidates[0])
}

/// Per-head block sizes from a recall table.
///
/// Near-uniform heads take the coarsest candidate. If no candidate meets the
/// threshold (only possible for `tau > 1`) the finest one is used.
pub fn assign_block_sizes(table: &RecallTable, tau: f64) -> Result<BlockAssignment> {
    let coarsest = *table.candidates.last().ok_or(Error::Empty("candidates"))?;
    let sizes = table
        .recalls
        .iter()
        .zip(&table.near_uniform)
        .map(|(row, &flat)| {
            if flat {
                coarsest
            } else {
                retained_block_size(&table.candidates, row, tau)
            }
        })
        .collect();
    BlockAssignment::new(sizes)
}

/// Each row divided by its finest-candidate entry.
pub fn normalized_recall(table: &RecallTable) -> Result<Vec<Vec<f64>>> {
    table
        .recalls
        .iter()
        .enumerate()
        .map(|(head, row)| {
            let base = row[0];
            if base <= 0.0 {
                return Err(Error::ZeroBaseRecall { head });
            }
            Ok(row.iter().map(|r| r / base).collect())
        })
        .collect()
}

/// Per-head largest block size retaining `tau` of the finest-size recall,
/// without the near-uniform override.
pub fn min_block_sizes(table: &RecallTable, tau: f64) -> Vec<usize> {
    table
        .recalls
        .iter()
        .map(|row| retained_block_size(&table.candidates, row, tau))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub assignment: BlockAssignment,
    pub normalized_recalls: Vec<Vec<f64>>,
    pub min_block_sizes: Vec<usize>,
    pub avg_block_size: f64,
    pub table: RecallTable,
}

impl CalibrationReport {
    /// Mean over heads of each head's table recall at its assigned size.
    pub fn in_sample_recall(&self) -> f64 {
        let sum: f64 = (0..self.table.num_heads())
            .map(|h| {
                self.table
                    .recall(h, self.assignment.block_size(h))
                    .expect("assigned sizes come from the table")
            })
            .sum();
        sum / self.table.num_heads() as f64
    }
}

/// Profiles `samples` and derives the assignment with `config.recall_threshold`.
pub fn calibrate<K, I>(samples: I, config: &EngineConfig) -> Result<CalibrationReport>
where
    K: KeyRows,
    I: IntoIterator<Item = Result<CalibrationSample<K>>>,
{
    let table = profile_sensitivity(samples, config)?;
    report_from_table(table, config.recall_threshold)
}

pub fn report_from_table(table: RecallTable, tau: f64) -> Result<CalibrationReport> {
    let assignment = assign_block_sizes(&table, tau)?;
    Ok(CalibrationReport {
        normalized_recalls: normalized_recall(&table)?,
        min_block_sizes: min_block_sizes(&table, tau),
        avg_block_size: assignment.average(),
        assignment,
        table,
    })
}

/// Mean recall per head of each assignment over `samples`, sharing the exact
/// weights between assignments. Samples within the budget are skipped.
pub fn evaluate_assignments<K, I>(
    samples: I,
    assignments: &[BlockAssignment],
    config: &EngineConfig,
) -> Result<Vec<Vec<f64>>>
where
    K: KeyRows,
    I: IntoIterator<Item = Result<CalibrationSample<K>>>,
{
    for a in assignments {
        check_dim("assignment heads", config.num_heads, a.num_heads())?;
    }
    let mut sums = vec![vec![0.0; config.num_heads]; assignments.len()];
    let mut used = 0usize;
    for sample in samples {
        let sample = sample?;
        let Some(weights) = sample_weights(&sample, config)? else {
            continue;
        };
        for (acc, a) in sums.iter_mut().zip(assignments) {
            for (s, r) in acc
                .iter_mut()
                .zip(recall_with(&sample, &weights, a, config)?)
            {
                *s += r;
            }
        }
        used += 1;
    }
    if used == 0 {
        return Err(Error::Empty(
            "evaluation samples longer than the token budget",
        ));
    }
    Ok(sums
        .into_iter()
        .map(|row| row.into_iter().map(|s| s / used as f64).collect())
        .collect())
}

pub fn mean_recall(per_head: &[f64]) -> f64 {
    per_head.iter().sum::<f64>() / per_head.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferReport {
    pub adaptive: f64,
    pub adaptive_per_head: Vec<f64>,
    /// Mean recall of each uniform candidate.
    pub uniform: Vec<(usize, f64)>,
    /// Candidate closest to the adaptive average block size (ties go to the
    /// smaller one).
    pub matched_block_size: usize,
    /// `adaptive` minus the matched uniform recall.
    pub delta: f64,
}

/// Recall of `assignment` and of every uniform candidate on held-out samples.
pub fn transfer_check<K, I>(
    assignment: &BlockAssignment,
    holdout: I,
    config: &EngineConfig,
) -> Result<TransferReport>
where
    K: KeyRows,
    I: IntoIterator<Item = Result<CalibrationSample<K>>>,
{
    config.validate()?;
    assignment.validate(config)?;
    let mut all = vec![assignment.clone()];
    for &b in &config.candidate_block_sizes {
        all.push(BlockAssignment::uniform(config.num_heads, b)?);
    }
    let mut results = evaluate_assignments(holdout, &all, config)?.into_iter();
    let adaptive_per_head = results.next().expect("adaptive row");
    let adaptive = mean_recall(&adaptive_per_head);
    let uniform: Vec<(usize, f64)> = config
        .candidate_block_sizes
        .iter()
        .zip(results)
        .map(|(&b, r)| (b, mean_recall(&r)))
        .collect();
    let avg = assignment.average();
    let (matched_block_size, matched) = uniform
        .iter()
        .copied()
        .min_by(|a, b| {
            (a.0 as f64 - avg)
                .abs()
                .total_cmp(&(b.0 as f64 - avg).abs())
        })
        .expect("non-empty candidates");
    Ok(TransferReport {
        adaptive,
        adaptive_per_head,
        uniform,
        matched_block_size,
        delta: adaptive - matched,
    })
}

/// Logical page indices covered by one head's selected blocks.
fn selected_pages(
    block_size: usize,
    blocks: &[usize],
    seq_len: usize,
    page_size: usize,
) -> Vec<usize> {
    let stride = block_size / page_size;
    let total = seq_len.div_ceil(page_size);
    let mut pages: Vec<usize> = blocks
        .iter()
        .flat_map(|&b| b * stride..((b + 1) * stride).min(total))
        .collect();
    pages.sort_unstable();
    pages.dedup();
    pages
}

/// Per-head fraction of `reference`'s selected pages that `candidate` also
/// selects.
///
/// Page tables map logical pages one-to-one onto physical pages, so the
/// overlap is counted on logical page indices.
pub fn page_recall(
    reference: &SelectionResult,
    candidate: &SelectionResult,
    seq_len: usize,
    page_size: usize,
) -> Result<Vec<f64>> {
    check_dim(
        "selection heads",
        reference.heads.len(),
        candidate.heads.len(),
    )?;
    reference
        .heads
        .iter()
        .zip(&candidate.heads)
        .map(|(r, c)| {
            if r.block_size % page_size != 0 || c.block_size % page_size != 0 {
                return Err(Error::Config(format!(
                    "block sizes {} and {} must be multiples of the page size {page_size}",
                    r.block_size, c.block_size
                )));
            }
            let want = selected_pages(r.block_size, &r.blocks, seq_len, page_size);
            if want.is_empty() {
                return Err(Error::Empty("reference selection"));
            }
            let got = selected_pages(c.block_size, &c.blocks, seq_len, page_size);
            let hits = want.iter().filter(|p| got.binary_search(p).is_ok()).count();
            Ok(hits as f64 / want.len() as f64)
        })
        .collect()
}

/// Top-K page recall of selection under `quant` against full-precision
/// selection, per head, for one sample. `None` compares full precision with
/// itself.
pub fn quantized_page_recall<K: KeyRows>(
    sample: &CalibrationSample<K>,
    assignment: &BlockAssignment,
    config: &EngineConfig,
    quant: Option<QuantSpec>,
) -> Result<Vec<f64>> {
    let store = CentroidStore::compute(&sample.keys, assignment, config.centroid_method)?;
    let select = |scores: &Scores| {
        select_topk(
            scores,
            assignment,
            config.token_budget,
            config.pin_trailing_block,
        )
    };
    let reference = select(&estimate_scores(&sample.query, &store)?)?;
    let candidate = match quant {
        None => select(&estimate_scores(&sample.query, &store)?)?,
        Some(spec) => select(&estimate_scores(
            &sample.query,
            &QuantizedCentroidStore::quantize(&store, spec)?,
        )?)?,
    };
    page_recall(
        &reference,
        &candidate,
        sample.keys.seq_len(),
        config.page_size,
    )
}

/// Assignment file text: one `head_index block_size` line per head.
pub fn format_assignment(assignment: &BlockAssignment) -> String {
    let mut out = String::new();
    for (h, b) in assignment.as_slice().iter().enumerate() {
        writeln!(out, "{h} {b}").expect("write to string");
    }
    out
}

/// Parses the assignment file format. Blank lines and `#` comments are
/// ignored; every head from 0 to H-1 must appear exactly once.
pub fn parse_assignment(text: &str) -> Result<BlockAssignment> {
    let mut sizes = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = || {
            Error::Parse(format!(
                "line {}: expected `head_index block_size`, got `{raw}`",
                lineno + 1
            ))
        };
        let mut fields = line.split_whitespace();
        let head: usize = fields.next().and_then(|x| x.parse().ok()).ok_or_else(bad)?;
        let size: usize = fields.next().and_then(|x| x.parse().ok()).ok_or_else(bad)?;
        if fields.next().is_some() {
            return Err(bad());
        }
        if sizes.insert(head, size).is_some() {
            return Err(Error::Parse(format!(
                "line {}: head {head} listed twice",
                lineno + 1
            )));
        }
    }
    if sizes.is_empty() {
        return Err(Error::Empty("assignment file"));
    }
    if let Some((i, _)) = sizes.keys().enumerate().find(|(i, h)| i != *h) {
        return Err(Error::Parse(format!(
            "head {i} missing from assignment file"
        )));
    }
    BlockAssignment::new(sizes.into_values().collect())
}
