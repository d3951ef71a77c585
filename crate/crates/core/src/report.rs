//! CSV reports.
//!
//! Every file opens with a `# schema: varblock/<name>/v1` comment line
//! followed by a header row. Floats use Rust's shortest round-trip
//! formatting, so identical inputs give byte-identical files.

use std::io::Write;

use crate::calibrator::{CalibrationReport, RecallTable};
use crate::error::Result;

fn writer<W: Write>(mut out: W, schema: &str, header: &[&str]) -> Result<csv::Writer<W>> {
    writeln!(out, "# schema: varblock/{schema}/v1")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    Ok(w)
}

fn finish<W: Write>(w: csv::Writer<W>) -> Result<()> {
    w.into_inner().map_err(|e| e.into_error())?.flush()?;
    Ok(())
}

pub fn write_recall_table<W: Write>(out: W, table: &RecallTable) -> Result<()> {
    let mut w = writer(
        out,
        "recall_table",
        &["head", "layer_tag", "block_size", "recall"],
    )?;
    for (h, row) in table.recalls.iter().enumerate() {
        for (b, r) in table.candidates.iter().zip(row) {
            w.write_record([
                h.to_string(),
                table.layer_tag.clone(),
                b.to_string(),
                r.to_string(),
            ])?;
        }
    }
    finish(w)
}

pub fn write_normalized_recall<W: Write>(out: W, report: &CalibrationReport) -> Result<()> {
    let t = &report.table;
    let mut w = writer(
        out,
        "normalized_recall",
        &["head", "layer_tag", "block_size", "normalized_recall"],
    )?;
    for (h, row) in report.normalized_recalls.iter().enumerate() {
        for (b, r) in t.candidates.iter().zip(row) {
            w.write_record([
                h.to_string(),
                t.layer_tag.clone(),
                b.to_string(),
                r.to_string(),
            ])?;
        }
    }
    finish(w)
}

pub fn write_min_block_sizes<W: Write>(out: W, report: &CalibrationReport) -> Result<()> {
    let t = &report.table;
    let mut w = writer(
        out,
        "min_block_size",
        &[
            "head",
            "layer_tag",
            "min_block_size",
            "assigned_block_size",
            "near_uniform",
        ],
    )?;
    for (h, b) in report.min_block_sizes.iter().enumerate() {
        w.write_record([
            h.to_string(),
            t.layer_tag.clone(),
            b.to_string(),
            report.assignment.block_size(h).to_string(),
            t.near_uniform[h].to_string(),
        ])?;
    }
    finish(w)
}

/// One head at one decode step.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeRow {
    pub label: String,
    pub step: usize,
    pub position: usize,
    pub head: usize,
    pub block_size: usize,
    pub selected_tokens: usize,
    pub recall: f64,
    /// Largest absolute difference between the head output and exact attention.
    pub max_abs_err: f64,
}

pub fn write_decode_rows<W: Write>(out: W, rows: &[DecodeRow]) -> Result<()> {
    let mut w = writer(
        out,
        "decode",
        &[
            "label",
            "step",
            "position",
            "head",
            "block_size",
            "selected_tokens",
            "recall",
            "max_abs_err",
        ],
    )?;
    for r in rows {
        w.write_record([
            r.label.clone(),
            r.step.to_string(),
            r.position.to_string(),
            r.head.to_string(),
            r.block_size.to_string(),
            r.selected_tokens.to_string(),
            r.recall.to_string(),
            r.max_abs_err.to_string(),
        ])?;
    }
    finish(w)
}

/// Page recall of one quantization spec; `bits` and `mode` are empty for
/// the full-precision passthrough row.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub spec: String,
    pub bits: Option<u8>,
    pub mode: Option<String>,
    pub page_recall: f64,
}

pub fn write_ablation_rows<W: Write>(out: W, rows: &[AblationRow]) -> Result<()> {
    let mut w = writer(
        out,
        "ablate_quant",
        &["spec", "bits", "mode", "page_recall"],
    )?;
    for r in rows {
        w.write_record([
            r.spec.clone(),
            r.bits.map(|b| b.to_string()).unwrap_or_default(),
            r.mode.clone().unwrap_or_default(),
            r.page_recall.to_string(),
        ])?;
    }
    finish(w)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub stage: String,
    pub size: usize,
    pub heads: usize,
    pub implementation: String,
    pub median_ns: u128,
    pub runs: usize,
}

pub fn write_bench_rows<W: Write>(out: W, rows: &[BenchRow]) -> Result<()> {
    let mut w = writer(
        out,
        "bench",
        &["stage", "size", "heads", "impl", "median_ns", "runs"],
    )?;
    for r in rows {
        w.write_record([
            r.stage.clone(),
            r.size.to_string(),
            r.heads.to_string(),
            r.implementation.clone(),
            r.median_ns.to_string(),
            r.runs.to_string(),
        ])?;
    }
    finish(w)
}
