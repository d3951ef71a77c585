//! Synthetic attention workloads and the binary trace format.
//!
//! Every head gets a hidden unit direction `u`. Its queries point along `u`
//! with norm `sqrt(d)`, so a key `s * u` scores a logit of about `s` while
//! isotropic standard-normal keys score about `N(0, 1)`. Heads differ in
//! where their hot keys sit:
//!
//! * clustered: contiguous runs starting on multiples of `max_block_size`,
//!   so coarse blocks capture them whole;
//! * scattered: isolated tokens at least `max_block_size` apart, so no block
//!   of any candidate size holds two of them;
//! * uniform: no hot keys and a weak query, giving near-uniform attention.
//!
//! A per-channel offset shared by all keys of a head shifts every logit of a
//! query by the same amount, leaving attention untouched, but skews the
//! per-channel value ranges the way real key caches are skewed.
//!
//! Trace files hold a fixed 32-byte little-endian header (`ABSP` magic,
//! u32 version, u32 heads, u32 head_dim, u64 tokens, u64 seed) followed by
//! the key, value and query tensors as little-endian f32 in
//! `[head][token][channel]` order.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::kvstore::{DenseKeys, KeyRows, KvRows};

pub const TRACE_MAGIC: [u8; 4] = *b"ABSP";
pub const TRACE_VERSION: u32 = 1;
const HEADER_LEN: usize = 32;

/// Standard deviation of the noise added to hot keys.
pub const HOT_KEY_NOISE: f32 = 0.1;
/// Standard deviation of the noise added to the unit query direction.
pub const QUERY_NOISE: f32 = 0.1;
/// Query gain of uniform heads; their logits have a standard deviation of
/// about this value.
pub const UNIFORM_QUERY_GAIN: f32 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeadProfile {
    Clustered { clusters: usize, width: usize },
    Scattered { hot_tokens: usize },
    Uniform,
}

impl fmt::Display for HeadProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HeadProfile::Clustered { clusters, width } => write!(f, "clustered:{clusters}x{width}"),
            HeadProfile::Scattered { hot_tokens } => write!(f, "scattered:{hot_tokens}"),
            HeadProfile::Uniform => f.write_str("uniform"),
        }
    }
}

impl FromStr for HeadProfile {
    type Err = Error;

    /// `clustered:<count>x<width>`, `scattered:<count>` or `uniform`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Parse(format!("invalid head profile `{s}`"));
        let num = |x: &str| x.trim().parse::<usize>().map_err(|_| bad());
        match s.split_once(':') {
            None if s == "uniform" => Ok(HeadProfile::Uniform),
            Some(("clustered", rest)) => {
                let (c, w) = rest.split_once('x').ok_or_else(bad)?;
                Ok(HeadProfile::Clustered {
                    clusters: num(c)?,
                    width: num(w)?,
                })
            }
            Some(("scattered", n)) => Ok(HeadProfile::Scattered {
                hot_tokens: num(n)?,
            }),
            _ => Err(bad()),
        }
    }
}

/// Parses a comma-separated profile list; `N*profile` repeats an entry.
pub fn parse_profiles(s: &str) -> Result<Vec<HeadProfile>> {
    let mut out = Vec::new();
    for item in s.split(',').map(str::trim).filter(|x| !x.is_empty()) {
        match item.split_once('*') {
            Some((n, p)) => {
                let n: usize = n
                    .trim()
                    .parse()
                    .map_err(|_| Error::Parse(format!("invalid repeat count in `{item}`")))?;
                let p: HeadProfile = p.parse()?;
                out.extend(std::iter::repeat_n(p, n));
            }
            None => out.push(item.parse()?),
        }
    }
    Ok(out)
}

/// Formats profiles compactly, folding runs into `N*profile`.
pub fn format_profiles(profiles: &[HeadProfile]) -> String {
    let mut parts = Vec::new();
    let mut i = 0;
    while i < profiles.len() {
        let run = profiles[i..]
            .iter()
            .take_while(|p| **p == profiles[i])
            .count();
        parts.push(if run == 1 {
            profiles[i].to_string()
        } else {
            format!("{run}*{}", profiles[i])
        });
        i += run;
    }
    parts.join(",")
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadSpec {
    pub seq_len: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub head_profiles: Vec<HeadProfile>,
    /// Approximate logit gap between hot and cold tokens.
    pub signal_strength: f32,
    /// Standard deviation of the per-(head, channel) key offset.
    pub channel_bias: f32,
    /// The largest candidate block size: clusters start on its multiples and
    /// scattered hot tokens are at least this far apart.
    pub max_block_size: usize,
    pub seed: u64,
}

impl WorkloadSpec {
    /// `clustered` heads with two 64-token clusters followed by `scattered`
    /// heads with 128 isolated hot tokens.
    pub fn heterogeneous(
        seq_len: usize,
        clustered: usize,
        scattered: usize,
        head_dim: usize,
        seed: u64,
    ) -> Self {
        let mut head_profiles = vec![
            HeadProfile::Clustered {
                clusters: 2,
                width: 64
            };
            clustered
        ];
        head_profiles.extend(std::iter::repeat_n(
            HeadProfile::Scattered { hot_tokens: 128 },
            scattered,
        ));
        Self {
            seq_len,
            num_heads: clustered + scattered,
            head_dim,
            head_profiles,
            signal_strength: 8.0,
            channel_bias: 1.0,
            max_block_size: 64,
            seed,
        }
    }

    /// Every head uniform.
    pub fn uniform(seq_len: usize, num_heads: usize, head_dim: usize, seed: u64) -> Self {
        Self {
            num_heads,
            head_profiles: vec![HeadProfile::Uniform; num_heads],
            ..Self::heterogeneous(seq_len, 0, 0, head_dim, seed)
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.num_heads == 0 || self.head_dim == 0 {
            return Err(Error::Config(
                "seq_len, num_heads and head_dim must be positive".into(),
            ));
        }
        if self.head_profiles.len() != self.num_heads {
            return Err(Error::DimensionMismatch {
                what: "head profiles",
                expected: self.num_heads,
                found: self.head_profiles.len(),
            });
        }
        if !(self.signal_strength.is_finite() && self.signal_strength > 0.0) {
            return Err(Error::Config("signal_strength must be positive".into()));
        }
        if !(self.channel_bias.is_finite() && self.channel_bias >= 0.0) {
            return Err(Error::Config("channel_bias must be non-negative".into()));
        }
        if self.max_block_size == 0 {
            return Err(Error::Config("max_block_size must be positive".into()));
        }
        for (head, profile) in self.head_profiles.iter().enumerate() {
            match *profile {
                HeadProfile::Clustered { clusters, width } => {
                    if clusters == 0 || width == 0 {
                        return Err(Error::Config(format!(
                            "head {head}: cluster count and width must be at least 1"
                        )));
                    }
                    if clusters * width.div_ceil(self.max_block_size)
                        > self.seq_len / self.max_block_size
                    {
                        return Err(Error::Config(format!(
                            "head {head}: {clusters} clusters of width {width}, aligned to {} tokens, exceed {} tokens",
                            self.max_block_size, self.seq_len
                        )));
                    }
                }
                HeadProfile::Scattered { hot_tokens } => {
                    if hot_tokens == 0 {
                        return Err(Error::Config(format!(
                            "head {head}: hot_tokens must be at least 1"
                        )));
                    }
                    if (hot_tokens - 1) * self.max_block_size + 1 > self.seq_len {
                        return Err(Error::Config(format!(
                            "head {head}: {hot_tokens} hot tokens spaced {} apart exceed {} tokens",
                            self.max_block_size, self.seq_len
                        )));
                    }
                }
                HeadProfile::Uniform => {}
            }
        }
        Ok(())
    }

    /// Seed of the `index`-th sample of the family rooted at this spec's seed.
    pub fn sample_seed(&self, index: u64) -> u64 {
        splitmix64(self.seed ^ splitmix64(index.wrapping_add(0x5851_f42d_4c95_7f2d)))
    }
}

pub(crate) fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Sorted positions of `count` items of `width` tokens each, consecutive
/// starts at least `spacing` apart, all inside `seq_len`.
fn spaced_starts(
    rng: &mut impl Rng,
    seq_len: usize,
    count: usize,
    width: usize,
    spacing: usize,
) -> Vec<usize> {
    let span = (count - 1) * spacing + width;
    let slack = seq_len - span;
    // Sorted draws with replacement from [0, slack] keep every gap >= spacing.
    let mut offsets: Vec<usize> = (0..count).map(|_| rng.random_range(0..=slack)).collect();
    offsets.sort_unstable();
    offsets
        .iter()
        .enumerate()
        .map(|(i, &o)| o + i * spacing)
        .collect()
}

/// Hot-token mask of one head.
fn hot_mask(spec: &WorkloadSpec, profile: HeadProfile, rng: &mut impl Rng) -> Vec<bool> {
    let mut hot = vec![false; spec.seq_len];
    match profile {
        HeadProfile::Clustered { clusters, width } => {
            let a = spec.max_block_size;
            let slots = width.div_ceil(a);
            for slot in spaced_starts(rng, spec.seq_len / a, clusters, slots, slots) {
                hot[slot * a..slot * a + width].fill(true);
            }
        }
        HeadProfile::Scattered { hot_tokens } => {
            for p in spaced_starts(rng, spec.seq_len, hot_tokens, 1, spec.max_block_size) {
                hot[p] = true;
            }
        }
        HeadProfile::Uniform => {}
    }
    hot
}

fn normal(rng: &mut impl Rng) -> f32 {
    StandardNormal.sample(rng)
}

fn unit_vector(rng: &mut impl Rng, d: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..d).map(|_| normal(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

enum Queries {
    PerToken,
    FinalOnly,
}

struct HeadData {
    keys: Vec<f32>,
    values: Vec<f32>,
    queries: Vec<f32>,
}

fn head_rng(seed: u64, head: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(head as u64 * 4 + purpose);
    rng
}

fn generate_head(
    spec: &WorkloadSpec,
    head: usize,
    with_values: bool,
    queries: Queries,
) -> HeadData {
    let (n, d) = (spec.seq_len, spec.head_dim);
    let profile = spec.head_profiles[head];
    let mut rng = head_rng(spec.seed, head, 0);
    let direction = unit_vector(&mut rng, d);
    let bias: Vec<f32> = (0..d)
        .map(|_| spec.channel_bias * normal(&mut rng))
        .collect();
    let hot = hot_mask(spec, profile, &mut rng);

    let mut keys = Vec::with_capacity(n * d);
    for &is_hot in &hot {
        if is_hot {
            keys.extend((0..d).map(|j| {
                bias[j] + spec.signal_strength * direction[j] + HOT_KEY_NOISE * normal(&mut rng)
            }));
        } else {
            keys.extend((0..d).map(|j| bias[j] + normal(&mut rng)));
        }
    }

    let values = if with_values {
        let mut rng = head_rng(spec.seed, head, 1);
        (0..n * d).map(|_| normal(&mut rng)).collect()
    } else {
        Vec::new()
    };

    let gain = match profile {
        HeadProfile::Uniform => UNIFORM_QUERY_GAIN,
        _ => 1.0,
    };
    let root_d = (d as f32).sqrt();
    let count = match queries {
        Queries::PerToken => n,
        Queries::FinalOnly => 1,
    };
    let mut rng = head_rng(spec.seed, head, 2);
    let queries = (0..count * d)
        .map(|i| gain * (root_d * direction[i % d] + QUERY_NOISE * normal(&mut rng)))
        .collect();
    HeadData {
        keys,
        values,
        queries,
    }
}

/// Generated or loaded tensors plus the header fields that describe them.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub version: u32,
    pub seed: u64,
    pub num_heads: usize,
    pub head_dim: usize,
    pub seq_len: usize,
    /// `[head][token][channel]`.
    pub keys: Vec<f32>,
    pub values: Vec<f32>,
    /// One query per token position, `[head][token][channel]`.
    pub queries: Vec<f32>,
}

impl Trace {
    #[inline]
    fn at(&self, head: usize, token: usize) -> usize {
        (head * self.seq_len + token) * self.head_dim
    }

    fn row(&self, tensor: &[f32], token: usize) -> Vec<f32> {
        (0..self.num_heads)
            .flat_map(|h| {
                tensor[self.at(h, token)..self.at(h, token) + self.head_dim]
                    .iter()
                    .copied()
            })
            .collect()
    }

    /// Head-major query of position `token`.
    pub fn query_row(&self, token: usize) -> Vec<f32> {
        self.row(&self.queries, token)
    }

    pub fn key_row(&self, token: usize) -> Vec<f32> {
        self.row(&self.keys, token)
    }

    pub fn value_row(&self, token: usize) -> Vec<f32> {
        self.row(&self.values, token)
    }
}

impl KeyRows for Trace {
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
        let at = self.at(head, token);
        &self.keys[at..at + self.head_dim]
    }
}

impl KvRows for Trace {
    fn value(&self, head: usize, token: usize) -> &[f32] {
        let at = self.at(head, token);
        &self.values[at..at + self.head_dim]
    }
}

/// Generates the full trace described by `spec`.
pub fn generate_synthetic(spec: &WorkloadSpec) -> Result<Trace> {
    spec.validate()?;
    let mut trace = Trace {
        version: TRACE_VERSION,
        seed: spec.seed,
        num_heads: spec.num_heads,
        head_dim: spec.head_dim,
        seq_len: spec.seq_len,
        keys: Vec::with_capacity(spec.num_heads * spec.seq_len * spec.head_dim),
        values: Vec::with_capacity(spec.num_heads * spec.seq_len * spec.head_dim),
        queries: Vec::with_capacity(spec.num_heads * spec.seq_len * spec.head_dim),
    };
    for head in 0..spec.num_heads {
        let data = generate_head(spec, head, true, Queries::PerToken);
        trace.keys.extend(data.keys);
        trace.values.extend(data.values);
        trace.queries.extend(data.queries);
    }
    Ok(trace)
}

/// Key rows and a single decode query at the final position.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSample<K> {
    pub keys: K,
    /// Head-major, `num_heads * head_dim` long.
    pub query: Vec<f32>,
}

impl CalibrationSample<DenseKeys> {
    /// Final-position sample of a trace.
    pub fn from_trace(trace: &Trace) -> Result<Self> {
        Ok(Self {
            keys: DenseKeys::new(trace.num_heads, trace.head_dim, trace.keys.clone())?,
            query: trace.query_row(trace.seq_len - 1),
        })
    }
}

/// Generates keys and one final-position query, skipping values.
pub fn generate_calibration_sample(spec: &WorkloadSpec) -> Result<CalibrationSample<DenseKeys>> {
    spec.validate()?;
    let d = spec.head_dim;
    let mut keys = Vec::with_capacity(spec.num_heads * spec.seq_len * d);
    let mut query = Vec::with_capacity(spec.num_heads * d);
    for head in 0..spec.num_heads {
        let data = generate_head(spec, head, false, Queries::FinalOnly);
        keys.extend(data.keys);
        query.extend(data.queries);
    }
    Ok(CalibrationSample {
        keys: DenseKeys::new(spec.num_heads, d, keys)?,
        query,
    })
}

/// Lazily generates `count` samples of the family rooted at `spec.seed`.
pub fn calibration_samples(
    spec: &WorkloadSpec,
    count: usize,
) -> impl Iterator<Item = Result<CalibrationSample<DenseKeys>>> {
    let spec = spec.clone();
    (0..count as u64)
        .map(move |i| generate_calibration_sample(&spec.with_seed(spec.sample_seed(i))))
}

pub fn encode_trace(trace: &Trace) -> Vec<u8> {
    let mut out = Vec::with_capacity(
        HEADER_LEN + 4 * (trace.keys.len() + trace.values.len() + trace.queries.len()),
    );
    out.extend_from_slice(&TRACE_MAGIC);
    out.extend_from_slice(&trace.version.to_le_bytes());
    out.extend_from_slice(&(trace.num_heads as u32).to_le_bytes());
    out.extend_from_slice(&(trace.head_dim as u32).to_le_bytes());
    out.extend_from_slice(&(trace.seq_len as u64).to_le_bytes());
    out.extend_from_slice(&trace.seed.to_le_bytes());
    for tensor in [&trace.keys, &trace.values, &trace.queries] {
        for x in tensor.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn decode_trace(bytes: &[u8]) -> Result<Trace> {
    if bytes.len() < TRACE_MAGIC.len() || bytes[..4] != TRACE_MAGIC {
        return Err(Error::Format("bad magic bytes, not a trace file".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated { section: "header" });
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let u64_at = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().expect("8 bytes"));
    let version = u32_at(4);
    if version != TRACE_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: TRACE_VERSION,
        });
    }
    let num_heads = u32_at(8) as usize;
    let head_dim = u32_at(12) as usize;
    let seq_len =
        usize::try_from(u64_at(16)).map_err(|_| Error::Format("token count overflows".into()))?;
    let seed = u64_at(24);
    if num_heads == 0 || head_dim == 0 || seq_len == 0 {
        return Err(Error::Format(format!(
            "inconsistent dimensions: heads {num_heads}, head_dim {head_dim}, tokens {seq_len}"
        )));
    }
    let elems = num_heads
        .checked_mul(head_dim)
        .and_then(|x| x.checked_mul(seq_len))
        .filter(|x| x.checked_mul(12).is_some())
        .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
    let mut pos = HEADER_LEN;
    let mut tensor = |section: &'static str| -> Result<Vec<f32>> {
        let end = pos + elems * 4;
        let chunk = bytes.get(pos..end).ok_or(Error::Truncated { section })?;
        pos = end;
        Ok(chunk
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect())
    };
    let keys = tensor("keys")?;
    let values = tensor("values")?;
    let queries = tensor("queries")?;
    if pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the queries section",
            bytes.len() - pos
        )));
    }
    Ok(Trace {
        version,
        seed,
        num_heads,
        head_dim,
        seq_len,
        keys,
        values,
        queries,
    })
}

pub fn save_trace(trace: &Trace, path: impl AsRef<Path>) -> Result<()> {
    let expected = trace.num_heads * trace.head_dim * trace.seq_len;
    for (what, t) in [
        ("keys", &trace.keys),
        ("values", &trace.values),
        ("queries", &trace.queries),
    ] {
        if t.len() != expected {
            return Err(Error::DimensionMismatch {
                what,
                expected,
                found: t.len(),
            });
        }
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&encode_trace(trace))?;
    w.flush()?;
    Ok(())
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<Trace> {
    decode_trace(&fs::read(path)?)
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn encode_decode_is_lossless(h in 1usize..3, d in 1usize..5, n in 1usize..20, seed in any::<u64>(),
                                     bits in prop::collection::vec(any::<u32>(), 3 * 2 * 4 * 19)) {
            let len = h * d * n;
            let f = |o: usize| -> Vec<f32> { bits[o..o + len].iter().map(|&b| f32::from_bits(b)).collect() };
            let trace = Trace { version: TRACE_VERSION, seed, num_heads: h, head_dim: d, seq_len: n,
                                keys: f(0), values: f(len), queries: f(2 * len) };
            let bytes = encode_trace(&trace);
            let back = decode_trace(&bytes).unwrap();
            prop_assert_eq!(encode_trace(&back), bytes);
        }
    }
}
