use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{ensure, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use varblock_core::calibrator::{self, attention_recall, quantized_page_recall};
use varblock_core::engine::{
    estimate_scores, estimate_scores_naive, full_attention_oracle, select_topk, select_topk_naive,
    sparse_attention, sparse_attention_gather, DecodeEngine, SelectionResult, TokenQkv,
};
use varblock_core::report::{self, AblationRow, BenchRow, DecodeRow};
use varblock_core::timing::median_time_pair;
use varblock_core::workload::{self, CalibrationSample};
use varblock_core::{
    BlockAssignment, CentroidStore, EngineConfig, KeyRows, PagedKVCache, QuantSpec,
    QuantizedCentroidStore,
};

use crate::settings::{parse_quant, Settings};
use crate::Common;

/// A batched kernel disagreed with its baseline.
#[derive(Debug)]
pub struct GateFailure(pub String);

impl std::fmt::Display for GateFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "correctness gate failed: {}", self.0)
    }
}

impl std::error::Error for GateFailure {}

pub fn apply_overrides(mut s: Settings, flags: &Common) -> Result<Settings> {
    if let Some(seed) = flags.seed {
        s.seed = seed;
    }
    if let Some(tau) = flags.tau {
        s.recall_threshold = tau;
    }
    if let Some(budget) = flags.budget {
        s.token_budget = budget;
    }
    if let Some(q) = &flags.quant {
        parse_quant(q)?;
        s.quant = q.clone();
    }
    Ok(s)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

/// `uniform:B` or a path to an assignment file.
fn load_assignment(arg: &str, config: &EngineConfig) -> Result<BlockAssignment> {
    let assignment = match arg.strip_prefix("uniform:") {
        Some(b) => {
            let b: usize = b
                .parse()
                .with_context(|| format!("invalid block size in `{arg}`"))?;
            BlockAssignment::uniform(config.num_heads, b)?
        }
        None => {
            let text =
                fs::read_to_string(arg).with_context(|| format!("reading assignment {arg}"))?;
            calibrator::parse_assignment(&text)
                .with_context(|| format!("parsing assignment {arg}"))?
        }
    };
    assignment
        .validate(config)
        .with_context(|| format!("assignment `{arg}`"))?;
    Ok(assignment)
}

pub fn calibrate(settings: &Settings, out: &Path) -> Result<()> {
    let config = settings.engine_config()?;
    let spec = settings.workload()?;
    let report = calibrator::calibrate(
        workload::calibration_samples(&spec, settings.calibration_samples),
        &config,
    )?;
    if report.table.skipped > 0 {
        eprintln!(
            "warning: skipped {} samples whose context fits within the budget",
            report.table.skipped
        );
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut w = create(&out.join("assignment.txt"))?;
    w.write_all(calibrator::format_assignment(&report.assignment).as_bytes())?;
    w.flush()?;
    report::write_recall_table(create(&out.join("recall_table.csv"))?, &report.table)?;
    report::write_normalized_recall(create(&out.join("normalized_recall.csv"))?, &report)?;
    report::write_min_block_sizes(create(&out.join("min_block_size.csv"))?, &report)?;
    println!(
        "calibrated {} heads on {} samples: average block size {}, in-sample recall {:.4}",
        report.assignment.num_heads(),
        report.table.sample_count,
        report.avg_block_size,
        report.in_sample_recall()
    );
    println!("assignment: {:?}", report.assignment.as_slice());
    Ok(())
}

fn load_or_generate(settings: &Settings, trace: Option<&Path>) -> Result<workload::Trace> {
    match trace {
        Some(path) => {
            workload::load_trace(path).with_context(|| format!("loading trace {}", path.display()))
        }
        None => Ok(workload::generate_synthetic(&settings.workload()?)?),
    }
}

/// Engine configuration with the trace's dimensions.
fn config_for(settings: &Settings, heads: usize, head_dim: usize) -> Result<EngineConfig> {
    let config = EngineConfig {
        num_heads: heads,
        head_dim,
        ..settings.engine_config()?
    };
    config.validate()?;
    Ok(config)
}

pub fn decode(
    settings: &Settings,
    assignments: &[String],
    trace: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let trace = load_or_generate(settings, trace)?;
    let config = config_for(settings, trace.num_heads, trace.head_dim)?;
    let n = trace.seq_len;
    let steps = settings.decode_steps;
    ensure!(
        steps >= 1 && steps < n,
        "decode_steps must be in 1..{n}, got {steps}"
    );
    let prefill = n - steps;
    let mut rows = Vec::new();
    for label in assignments {
        let assignment = load_assignment(label, &config)?;
        let mut engine =
            DecodeEngine::prefill(config.clone(), assignment.clone(), &trace, prefill, n)?;
        let mut recall_sum = 0.0;
        for step in 0..steps {
            let pos = prefill + step;
            let (q, k, v) = (
                trace.query_row(pos),
                trace.key_row(pos),
                trace.value_row(pos),
            );
            let out = engine.decode_step(TokenQkv {
                query: &q,
                key: &k,
                value: &v,
            })?;
            let oracle = full_attention_oracle(&q, engine.cache())?;
            let weights = oracle.weights.as_ref().expect("oracle returns weights");
            let context = engine.cache().seq_len();
            let (recalls, covered) = match &out.selection {
                Some(sel) => (attention_recall(weights, sel)?, sel.covered_tokens(context)),
                None => (vec![1.0; config.num_heads], vec![context; config.num_heads]),
            };
            for head in 0..config.num_heads {
                let err = out
                    .output
                    .head(head)
                    .iter()
                    .zip(oracle.head(head))
                    .map(|(a, b)| f64::from((a - b).abs()))
                    .fold(0.0, f64::max);
                recall_sum += recalls[head];
                rows.push(DecodeRow {
                    label: label.clone(),
                    step,
                    position: out.position,
                    head,
                    block_size: assignment.block_size(head),
                    selected_tokens: covered[head],
                    recall: recalls[head],
                    max_abs_err: err,
                });
            }
        }
        println!(
            "{label}: average block size {}, mean recall {:.4} over {steps} steps",
            assignment.average(),
            recall_sum / (steps * config.num_heads) as f64
        );
    }
    report::write_decode_rows(create(out)?, &rows)?;
    Ok(())
}

/// Page recall without quantization and under each spec in `only`, or every
/// supported spec when `only` is `None`.
pub fn ablate_quant(
    settings: &Settings,
    only: Option<&str>,
    assignment: Option<&str>,
    trace: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let samples: Vec<CalibrationSample<_>> = match trace {
        Some(path) => vec![CalibrationSample::from_trace(
            &workload::load_trace(path)
                .with_context(|| format!("loading trace {}", path.display()))?,
        )?],
        None => workload::calibration_samples(&settings.workload()?, settings.ablation_samples)
            .collect::<varblock_core::Result<_>>()?,
    };
    ensure!(!samples.is_empty(), "no ablation samples");
    let keys = &samples[0].keys;
    let config = config_for(settings, keys.num_heads(), keys.head_dim())?;
    let assignment = match assignment {
        Some(arg) => load_assignment(arg, &config)?,
        None => BlockAssignment::uniform(config.num_heads, config.min_block_size())?,
    };
    let specs: Vec<Option<QuantSpec>> = match only.map(parse_quant).transpose()?.flatten() {
        Some(spec) => vec![None, Some(spec)],
        None => std::iter::once(None)
            .chain(QuantSpec::ALL.into_iter().map(Some))
            .collect(),
    };
    let mut rows = Vec::new();
    for spec in specs {
        let mut sum = 0.0;
        for sample in &samples {
            let r = quantized_page_recall(sample, &assignment, &config, spec)?;
            sum += r.iter().sum::<f64>() / r.len() as f64;
        }
        let page_recall = sum / samples.len() as f64;
        let row = match spec {
            None => AblationRow {
                spec: "none".into(),
                bits: None,
                mode: None,
                page_recall,
            },
            Some(s) => AblationRow {
                spec: s.to_string(),
                bits: Some(s.bits()),
                mode: Some(s.mode().as_str().into()),
                page_recall,
            },
        };
        println!("{:<10} page recall {:.4}", row.spec, row.page_recall);
        rows.push(row);
    }
    report::write_ablation_rows(create(out)?, &rows)?;
    Ok(())
}

fn gaussian(rng: &mut ChaCha8Rng, len: usize) -> Vec<f32> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

fn gate(ok: bool, what: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(GateFailure(what()).into())
    }
}

fn same_selection(a: &SelectionResult, b: &SelectionResult) -> bool {
    a.heads.len() == b.heads.len()
        && a.heads.iter().zip(&b.heads).all(|(x, y)| {
            x.blocks.iter().collect::<BTreeSet<_>>() == y.blocks.iter().collect::<BTreeSet<_>>()
        })
}

/// Heads kept in the attention stage so the KV cache stays within memory.
const ATTENTION_HEADS: usize = 8;

pub fn bench(settings: &Settings, out: &Path) -> Result<()> {
    let base = settings.engine_config()?;
    let quant = base.quant.unwrap_or(QuantSpec::INT4_ASYM);
    let (h, d, runs) = (settings.bench_heads, settings.head_dim, settings.bench_runs);
    ensure!(
        h > 0 && runs > 0,
        "bench_heads and bench_runs must be positive"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let candidates = &base.candidate_block_sizes;
    let mut rows = Vec::new();
    let mut row = |stage: &str,
                   n: usize,
                   heads: usize,
                   batched: std::time::Duration,
                   naive: std::time::Duration| {
        for (implementation, t) in [("batched", batched), ("naive", naive)] {
            rows.push(BenchRow {
                stage: stage.into(),
                size: n,
                heads,
                implementation: implementation.into(),
                median_ns: t.as_nanos(),
                runs,
            });
        }
        println!(
            "{stage:<18} n={n:<7} heads={heads:<3} batched {:>9.3}ms  naive {:>9.3}ms",
            batched.as_secs_f64() * 1e3,
            naive.as_secs_f64() * 1e3
        );
    };
    for &n in &settings.bench_contexts {
        ensure!(
            n > base.max_block_size(),
            "bench context {n} is not longer than the largest block"
        );
        let assignment =
            BlockAssignment::new((0..h).map(|i| candidates[i % candidates.len()]).collect())?;
        let total: usize = (0..h).map(|i| assignment.num_blocks(i, n)).sum();
        let store = CentroidStore::from_raw(
            base.centroid_method,
            d,
            n,
            gaussian(&mut rng, total * d),
            match base.centroid_method {
                varblock_core::CentroidMethod::Mean => Vec::new(),
                varblock_core::CentroidMethod::MaxMin => gaussian(&mut rng, total * d),
            },
            assignment.clone(),
        )?;
        let qstore = QuantizedCentroidStore::quantize(&store, quant)?;
        let q = gaussian(&mut rng, h * d);
        let budget = base.token_budget.min(n);

        let fp = (
            estimate_scores(&q, &store)?,
            estimate_scores_naive(&q, &store)?,
        );
        let qs = (
            estimate_scores(&q, &qstore)?,
            estimate_scores_naive(&q, &qstore)?,
        );
        for (label, (a, b)) in [("fp32", &fp), (quant.to_string().as_str(), &qs)] {
            let same = a
                .values
                .iter()
                .zip(&b.values)
                .all(|(x, y)| x.to_bits() == y.to_bits());
            gate(same, || {
                format!("{label} batched estimation differs from the per-head loop at n={n}")
            })?;
        }
        let sel = select_topk(&qs.0, &assignment, budget, base.pin_trailing_block)?;
        let sel_naive = select_topk_naive(&qs.0, &assignment, budget, base.pin_trailing_block)?;
        gate(same_selection(&sel, &sel_naive), || {
            format!("batched top-k differs from the per-head sort at n={n}")
        })?;

        let (a, b) = median_time_pair(
            runs,
            || estimate_scores(&q, &store),
            || estimate_scores_naive(&q, &store),
        );
        row("estimate-fp32", n, h, a, b);
        let (a, b) = median_time_pair(
            runs,
            || estimate_scores(&q, &qstore),
            || estimate_scores_naive(&q, &qstore),
        );
        row(&format!("estimate-{quant}"), n, h, a, b);
        let (a, b) = median_time_pair(
            runs,
            || select_topk(&qs.0, &assignment, budget, base.pin_trailing_block),
            || select_topk_naive(&qs.0, &assignment, budget, base.pin_trailing_block),
        );
        row("topk", n, h, a, b);

        let ah = h.min(ATTENTION_HEADS);
        let mut cache = PagedKVCache::new(ah, d, base.page_size, n)?;
        cache.scramble_free_pages(rng.random());
        for _ in 0..n {
            cache.append_kv(&gaussian(&mut rng, ah * d), &gaussian(&mut rng, ah * d))?;
        }
        let att_assignment = BlockAssignment::new(assignment.as_slice()[..ah].to_vec())?;
        let att_store = CentroidStore::compute(&cache, &att_assignment, base.centroid_method)?;
        let aq = gaussian(&mut rng, ah * d);
        let mut att_sel = select_topk(
            &estimate_scores(&aq, &att_store)?,
            &att_assignment,
            budget,
            true,
        )?;
        att_sel.map_pages(&cache)?;
        cache.reset_kv_copy_count();
        let strided = sparse_attention(&aq, &cache, &att_sel)?;
        let strided_copies = cache.kv_copy_count();
        let gathered = sparse_attention_gather(&aq, &cache, &att_sel)?;
        let gather_copies = cache.kv_copy_count() - strided_copies;
        let diff = strided
            .outputs
            .iter()
            .zip(&gathered.outputs)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        gate(diff <= 1e-6, || {
            format!("strided attention differs from gather by {diff:e} at n={n}")
        })?;
        gate(strided_copies == 0, || {
            format!("strided attention copied {strided_copies} KV rows")
        })?;
        println!("zero-copy check at n={n}: strided path copied {strided_copies} KV rows, gather copied {gather_copies}");
        let (a, b) = median_time_pair(
            runs,
            || sparse_attention(&aq, &cache, &att_sel),
            || sparse_attention_gather(&aq, &cache, &att_sel),
        );
        row("attention", n, ah, a, b);
    }
    report::write_bench_rows(create(out)?, &rows)?;
    Ok(())
}

pub fn generate(settings: &Settings, out: &Path) -> Result<()> {
    let spec = settings.workload()?;
    let trace = workload::generate_synthetic(&spec)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    workload::save_trace(&trace, out)?;
    println!(
        "wrote {} tokens x {} heads x {} channels to {}",
        trace.seq_len,
        trace.num_heads,
        trace.head_dim,
        out.display()
    );
    if trace.seq_len <= settings.token_budget {
        eprintln!(
            "warning: trace length {} does not exceed the token budget",
            trace.seq_len
        );
    }
    Ok(())
}
