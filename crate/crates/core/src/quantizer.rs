//! Per-channel integer quantization of centroid stores.
//!
//! Statistics are pooled per `(head, channel)` over all of that head's
//! centroids. Codes are kept one per byte; scoring dequantizes inline.

use std::fmt;
use std::str::FromStr;

use crate::centroids::{BlockAssignment, CentroidStore};
use crate::config::CentroidMethod;
use crate::error::{check_dim, check_index, Error, Result};
use crate::kernels::{dot, lane_sum};

/// Lower bound on a channel scale; keeps constant channels well defined.
pub const SCALE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QuantMode {
    /// Zero-centred range, zero point fixed at 0.
    Symmetric,
    /// `[min, max]` range with a zero-point offset.
    Asymmetric,
}

impl QuantMode {
    pub fn as_str(self) -> &'static str {
        match self {
            QuantMode::Symmetric => "sym",
            QuantMode::Asymmetric => "asym",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QuantSpec {
    bits: u8,
    mode: QuantMode,
}

impl QuantSpec {
    pub const INT2_SYM: Self = Self {
        bits: 2,
        mode: QuantMode::Symmetric,
    };
    pub const INT2_ASYM: Self = Self {
        bits: 2,
        mode: QuantMode::Asymmetric,
    };
    pub const INT4_SYM: Self = Self {
        bits: 4,
        mode: QuantMode::Symmetric,
    };
    pub const INT4_ASYM: Self = Self {
        bits: 4,
        mode: QuantMode::Asymmetric,
    };
    pub const INT8_SYM: Self = Self {
        bits: 8,
        mode: QuantMode::Symmetric,
    };
    pub const INT8_ASYM: Self = Self {
        bits: 8,
        mode: QuantMode::Asymmetric,
    };

    /// The ablation grid, ordered by bit width then mode.
    pub const ALL: [Self; 6] = [
        Self::INT2_SYM,
        Self::INT2_ASYM,
        Self::INT4_SYM,
        Self::INT4_ASYM,
        Self::INT8_SYM,
        Self::INT8_ASYM,
    ];

    pub fn new(bits: u8, mode: QuantMode) -> Result<Self> {
        match bits {
            2 | 4 | 8 => Ok(Self { bits, mode }),
            _ => Err(Error::Config(format!(
                "unsupported bit width {bits}; expected 2, 4 or 8"
            ))),
        }
    }

    pub fn bits(self) -> u8 {
        self.bits
    }

    pub fn mode(self) -> QuantMode {
        self.mode
    }

    /// Stored offset of the symmetric code range; 0 for asymmetric specs.
    pub fn mid(self) -> u8 {
        match self.mode {
            QuantMode::Symmetric => (1u8 << (self.bits - 1)) - 1,
            QuantMode::Asymmetric => 0,
        }
    }

    /// Largest valid stored code.
    pub fn max_code(self) -> u8 {
        match self.mode {
            QuantMode::Asymmetric => ((1u16 << self.bits) - 1) as u8,
            QuantMode::Symmetric => 2 * self.mid(),
        }
    }

    /// Number of quantization steps spanning the channel range.
    fn steps(self) -> f64 {
        match self.mode {
            QuantMode::Asymmetric => f64::from(self.max_code()),
            QuantMode::Symmetric => f64::from(self.mid()),
        }
    }
}

impl fmt::Display for QuantSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "int{}-{}", self.bits, self.mode.as_str())
    }
}

impl FromStr for QuantSpec {
    type Err = Error;

    /// Parses `int4-asym`, `int8:sym`, `INT2_asym` and similar.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let bad = || {
            Error::Parse(format!(
                "invalid quantization spec `{s}`; expected e.g. int4-asym"
            ))
        };
        let rest = lower.strip_prefix("int").ok_or_else(bad)?;
        let (bits, mode) = rest.split_once(['-', ':', '_', 'x']).ok_or_else(bad)?;
        let bits: u8 = bits.parse().map_err(|_| bad())?;
        let mode = match mode {
            "sym" | "symmetric" => QuantMode::Symmetric,
            "asym" | "asymmetric" => QuantMode::Asymmetric,
            _ => return Err(bad()),
        };
        QuantSpec::new(bits, mode)
    }
}

/// Dequantizes one code.
///
/// Asymmetric: `zero_point + code * scale`; symmetric: `(code - mid) * scale`.
pub fn dequantize_value(code: u8, scale: f32, zero_point: f32, spec: QuantSpec) -> Result<f32> {
    if code > spec.max_code() {
        return Err(Error::CodeOutOfRange {
            code,
            bits: spec.bits,
            mode: spec.mode.as_str(),
        });
    }
    Ok(dequant(spec, code, scale, zero_point))
}

#[inline(always)]
fn dequant(spec: QuantSpec, code: u8, scale: f32, zero_point: f32) -> f32 {
    match spec.mode {
        QuantMode::Asymmetric => zero_point + f32::from(code) * scale,
        QuantMode::Symmetric => (i32::from(code) - i32::from(spec.mid())) as f32 * scale,
    }
}

/// Per-channel parameters of one head, derived from the channel statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
struct ChannelParams {
    // Raw statistics: (lo, hi) for asymmetric, (0, max |x|) for symmetric.
    lo: f32,
    hi: f32,
    scale: f64,
}

impl ChannelParams {
    fn from_stats(spec: QuantSpec, lo: f32, hi: f32) -> Self {
        let range = match spec.mode {
            QuantMode::Asymmetric => f64::from(hi) - f64::from(lo),
            QuantMode::Symmetric => f64::from(hi),
        };
        Self {
            lo,
            hi,
            scale: range.max(SCALE_FLOOR) / spec.steps(),
        }
    }

    fn zero_point(&self, spec: QuantSpec) -> f32 {
        match spec.mode {
            QuantMode::Asymmetric => self.lo,
            QuantMode::Symmetric => 0.0,
        }
    }

    #[inline]
    fn encode(&self, spec: QuantSpec, x: f32) -> u8 {
        // f64::round rounds half away from zero.
        match spec.mode {
            QuantMode::Asymmetric => {
                let q = ((f64::from(x) - f64::from(self.lo)) / self.scale).round();
                q.clamp(0.0, f64::from(spec.max_code())) as u8
            }
            QuantMode::Symmetric => {
                let mid = f64::from(spec.mid());
                let q = (f64::from(x) / self.scale).round().clamp(-mid, mid);
                (q + mid) as u8
            }
        }
    }
}

/// Codes and parameters for one flattened centroid array.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedArray {
    codes: Vec<u8>,
    /// Per `(head, channel)`, strictly positive.
    scales: Vec<f32>,
    /// Per `(head, channel)`; all zero for symmetric specs.
    zero_points: Vec<f32>,
    params: Vec<ChannelParams>,
}

impl QuantizedArray {
    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn zero_points(&self) -> &[f32] {
        &self.zero_points
    }

    fn head_params(spec: QuantSpec, segment: &[f32], d: usize) -> Vec<ChannelParams> {
        let mut lo = vec![f32::INFINITY; d];
        let mut hi = vec![f32::NEG_INFINITY; d];
        for row in segment.chunks_exact(d) {
            for c in 0..d {
                match spec.mode {
                    QuantMode::Asymmetric => {
                        lo[c] = lo[c].min(row[c]);
                        hi[c] = hi[c].max(row[c]);
                    }
                    QuantMode::Symmetric => {
                        lo[c] = 0.0;
                        hi[c] = hi[c].max(row[c].abs());
                    }
                }
            }
        }
        lo.iter()
            .zip(&hi)
            .map(|(&l, &h)| {
                if h == f32::NEG_INFINITY {
                    // Head without centroids.
                    ChannelParams::from_stats(spec, 0.0, 0.0)
                } else {
                    ChannelParams::from_stats(spec, l, h)
                }
            })
            .collect()
    }

    fn encode_rows(spec: QuantSpec, params: &[ChannelParams], src: &[f32], dst: &mut [u8]) {
        let d = params.len();
        for (row, out) in src.chunks_exact(d).zip(dst.chunks_exact_mut(d)) {
            for c in 0..d {
                out[c] = params[c].encode(spec, row[c]);
            }
        }
    }

    fn quantize(spec: QuantSpec, values: &[f32], offsets: &[usize], d: usize) -> Self {
        let heads = offsets.len() - 1;
        let mut codes = vec![0u8; values.len()];
        let mut params = Vec::with_capacity(heads * d);
        for h in 0..heads {
            let seg = offsets[h] * d..offsets[h + 1] * d;
            let hp = Self::head_params(spec, &values[seg.clone()], d);
            Self::encode_rows(spec, &hp, &values[seg.clone()], &mut codes[seg]);
            params.extend(hp);
        }
        let mut array = Self {
            codes,
            scales: Vec::new(),
            zero_points: Vec::new(),
            params,
        };
        array.sync_public_params(spec);
        array
    }

    fn sync_public_params(&mut self, spec: QuantSpec) {
        self.scales = self.params.iter().map(|p| p.scale as f32).collect();
        self.zero_points = self.params.iter().map(|p| p.zero_point(spec)).collect();
    }

    /// Brings head `head` in line with `values` after its segment grew from
    /// `old_count` to the size given by `offsets`.
    fn refresh_head(
        &mut self,
        spec: QuantSpec,
        values: &[f32],
        offsets: &[usize],
        d: usize,
        head: usize,
        old_count: usize,
    ) {
        let new_count = offsets[head + 1] - offsets[head];
        if new_count > old_count {
            let at = (offsets[head] + old_count) * d;
            self.codes.splice(
                at..at,
                std::iter::repeat_n(0u8, (new_count - old_count) * d),
            );
        }
        let seg = offsets[head] * d..offsets[head + 1] * d;
        let hp = Self::head_params(spec, &values[seg.clone()], d);
        let pslice = head * d..(head + 1) * d;
        let first_dirty = if self.params[pslice.clone()] == hp[..] {
            old_count.saturating_sub(1)
        } else {
            0
        };
        let dirty = (offsets[head] + first_dirty) * d..seg.end;
        Self::encode_rows(spec, &hp, &values[dirty.clone()], &mut self.codes[dirty]);
        for (c, p) in hp.into_iter().enumerate() {
            self.params[head * d + c] = p;
            self.scales[head * d + c] = p.scale as f32;
            self.zero_points[head * d + c] = p.zero_point(spec);
        }
    }

    #[inline]
    fn dequant_row(&self, spec: QuantSpec, head: usize, row: usize, d: usize, out: &mut [f32]) {
        let codes = &self.codes[row * d..(row + 1) * d];
        let scales = &self.scales[head * d..(head + 1) * d];
        let zps = &self.zero_points[head * d..(head + 1) * d];
        for c in 0..d {
            out[c] = dequant(spec, codes[c], scales[c], zps[c]);
        }
    }
}

/// Quantized counterpart of a [`CentroidStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedCentroidStore {
    spec: QuantSpec,
    method: CentroidMethod,
    head_dim: usize,
    seq_len: usize,
    offsets: Vec<usize>,
    assignment: BlockAssignment,
    /// Mean vectors, or maxima of max-min centroids.
    primary: QuantizedArray,
    /// Minima of max-min centroids, with their own parameters.
    minima: Option<QuantizedArray>,
}

/// Quantizes every centroid of `store` under `spec`.
pub fn quantize_store(store: &CentroidStore, spec: QuantSpec) -> Result<QuantizedCentroidStore> {
    QuantizedCentroidStore::quantize(store, spec)
}

impl QuantizedCentroidStore {
    pub fn quantize(store: &CentroidStore, spec: QuantSpec) -> Result<Self> {
        if store.total_centroids() == 0 {
            return Err(Error::Empty("centroid store"));
        }
        let d = store.head_dim();
        let offsets = store.offsets().to_vec();
        let primary = QuantizedArray::quantize(spec, store.values(), &offsets, d);
        let minima = match store.method() {
            CentroidMethod::Mean => None,
            CentroidMethod::MaxMin => {
                Some(QuantizedArray::quantize(spec, store.mins(), &offsets, d))
            }
        };
        Ok(Self {
            spec,
            method: store.method(),
            head_dim: d,
            seq_len: store.seq_len(),
            offsets,
            assignment: store.assignment().clone(),
            primary,
            minima,
        })
    }

    /// Re-synchronizes with `store` after its tail centroids were refreshed.
    ///
    /// Heads whose channel statistics changed are re-encoded completely;
    /// otherwise only the trailing centroids are. The result is identical to
    /// quantizing `store` from scratch.
    pub fn refresh_from(&mut self, store: &CentroidStore) -> Result<()> {
        if store.method() != self.method || store.assignment() != &self.assignment {
            return Err(Error::Config(
                "centroid store layout differs from the quantized store".into(),
            ));
        }
        check_dim("centroid head_dim", self.head_dim, store.head_dim())?;
        let d = self.head_dim;
        let new_offsets = store.offsets();
        for head in 0..self.assignment.num_heads() {
            let old_count = self.offsets[head + 1] - self.offsets[head];
            if new_offsets[head + 1] - new_offsets[head] < old_count {
                return Err(Error::Config("centroid store shrank".into()));
            }
            // Earlier heads are already in their new positions, later ones
            // have not moved yet, so the splice point follows `new_offsets`.
            self.primary
                .refresh_head(self.spec, store.values(), new_offsets, d, head, old_count);
            if let Some(minima) = &mut self.minima {
                minima.refresh_head(self.spec, store.mins(), new_offsets, d, head, old_count);
            }
        }
        self.offsets = new_offsets.to_vec();
        self.seq_len = store.seq_len();
        Ok(())
    }

    pub fn spec(&self) -> QuantSpec {
        self.spec
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

    pub fn primary(&self) -> &QuantizedArray {
        &self.primary
    }

    pub fn minima(&self) -> Option<&QuantizedArray> {
        self.minima.as_ref()
    }

    #[inline]
    pub fn num_centroids(&self, head: usize) -> usize {
        self.offsets[head + 1] - self.offsets[head]
    }

    /// Materializes one dequantized centroid (maxima for max-min stores).
    pub fn dequantized_centroid(&self, head: usize, index: usize) -> Vec<f32> {
        let mut out = vec![0.0; self.head_dim];
        self.primary.dequant_row(
            self.spec,
            head,
            self.offsets[head] + index,
            self.head_dim,
            &mut out,
        );
        out
    }

    /// Materializes the full dequantized store.
    pub fn dequantize(&self) -> CentroidStore {
        let d = self.head_dim;
        let expand = |array: &QuantizedArray| {
            let mut out = vec![0.0; array.codes.len()];
            for h in 0..self.num_heads() {
                for row in self.offsets[h]..self.offsets[h + 1] {
                    array.dequant_row(self.spec, h, row, d, &mut out[row * d..(row + 1) * d]);
                }
            }
            out
        };
        let values = expand(&self.primary);
        let mins = self.minima.as_ref().map(expand).unwrap_or_default();
        CentroidStore::from_raw(
            self.method,
            d,
            self.seq_len,
            values,
            mins,
            self.assignment.clone(),
        )
        .expect("layout mirrors a valid store")
    }

    /// Score of `query` against one centroid with dequantization inlined.
    #[inline]
    pub(crate) fn score_fused(&self, query: &[f32], head: usize, index: usize) -> f32 {
        let d = self.head_dim;
        let row = self.offsets[head] + index;
        let spec = self.spec;
        let hi_codes = &self.primary.codes[row * d..(row + 1) * d];
        let hi_s = &self.primary.scales[head * d..(head + 1) * d];
        let hi_z = &self.primary.zero_points[head * d..(head + 1) * d];
        match &self.minima {
            None => lane_sum(d, |j| {
                query[j] * dequant(spec, hi_codes[j], hi_s[j], hi_z[j])
            }),
            Some(minima) => {
                let lo_codes = &minima.codes[row * d..(row + 1) * d];
                let lo_s = &minima.scales[head * d..(head + 1) * d];
                let lo_z = &minima.zero_points[head * d..(head + 1) * d];
                lane_sum(d, |j| {
                    let hi = dequant(spec, hi_codes[j], hi_s[j], hi_z[j]);
                    let lo = dequant(spec, lo_codes[j], lo_s[j], lo_z[j]);
                    (query[j] * hi).max(query[j] * lo)
                })
            }
        }
    }

    /// Fused scores of every centroid of `head`: each row is dequantized
    /// into a reused row buffer and scored immediately, so nothing larger
    /// than one centroid is ever materialized.
    pub(crate) fn score_segment_fused(&self, q: &[f32], head: usize, out: &mut [f32]) {
        let d = self.head_dim;
        let base = self.offsets[head];
        let mut hi = vec![0.0f32; d];
        match &self.minima {
            None => {
                for (i, o) in out.iter_mut().enumerate() {
                    self.primary
                        .dequant_row(self.spec, head, base + i, d, &mut hi);
                    *o = dot(q, &hi);
                }
            }
            Some(minima) => {
                let mut lo = vec![0.0f32; d];
                for (i, o) in out.iter_mut().enumerate() {
                    self.primary
                        .dequant_row(self.spec, head, base + i, d, &mut hi);
                    minima.dequant_row(self.spec, head, base + i, d, &mut lo);
                    *o = crate::kernels::quest_score(q, &hi, &lo);
                }
            }
        }
    }

    /// Scores of every centroid of `head`, dequantizing the head's segment
    /// into a temporary buffer first. Naive baseline for the fused path.
    pub(crate) fn head_scores_materialized(&self, query: &[f32], head: usize) -> Vec<f32> {
        let d = self.head_dim;
        let n = self.num_centroids(head);
        let mut hi = vec![0.0; n * d];
        for i in 0..n {
            self.primary.dequant_row(
                self.spec,
                head,
                self.offsets[head] + i,
                d,
                &mut hi[i * d..(i + 1) * d],
            );
        }
        match &self.minima {
            None => hi.chunks_exact(d).map(|c| dot(query, c)).collect(),
            Some(minima) => {
                let mut lo = vec![0.0; n * d];
                for i in 0..n {
                    minima.dequant_row(
                        self.spec,
                        head,
                        self.offsets[head] + i,
                        d,
                        &mut lo[i * d..(i + 1) * d],
                    );
                }
                hi.chunks_exact(d)
                    .zip(lo.chunks_exact(d))
                    .map(|(h, l)| crate::kernels::quest_score(query, h, l))
                    .collect()
            }
        }
    }

    /// Bytes needed with codes bit-packed at `bits` per element plus one f32
    /// scale and zero point per `(head, channel)` and array.
    pub fn logical_bytes(&self) -> usize {
        let arrays = 1 + usize::from(self.minima.is_some());
        let code_bits = self.primary.codes.len() * usize::from(self.spec.bits);
        arrays * (code_bits.div_ceil(8) + self.primary.scales.len() * 8)
    }
}

/// Fused query-centroid score, checked.
pub fn quantized_score(
    query: &[f32],
    store: &QuantizedCentroidStore,
    head: usize,
    centroid_index: usize,
) -> Result<f32> {
    check_dim("query", store.head_dim(), query.len())?;
    check_index("head", head, store.num_heads())?;
    check_index("centroid", centroid_index, store.num_centroids(head))?;
    Ok(store.score_fused(query, head, centroid_index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kvstore::DenseKeys;
    use proptest::prelude::*;

    fn single_head_store(values: &[f32], d: usize) -> CentroidStore {
        let keys = DenseKeys::new(1, d, values.to_vec()).unwrap();
        CentroidStore::compute(
            &keys,
            &BlockAssignment::uniform(1, 1).unwrap(),
            CentroidMethod::Mean,
        )
        .unwrap()
    }

    #[test]
    fn spec_parsing_and_display() {
        assert_eq!(
            "int4-asym".parse::<QuantSpec>().unwrap(),
            QuantSpec::INT4_ASYM
        );
        assert_eq!(
            "INT8:sym".parse::<QuantSpec>().unwrap(),
            QuantSpec::INT8_SYM
        );
        assert_eq!(
            "int2xasym".parse::<QuantSpec>().unwrap(),
            QuantSpec::INT2_ASYM
        );
        assert!("int3-asym".parse::<QuantSpec>().is_err());
        assert!("fp8".parse::<QuantSpec>().is_err());
        assert_eq!(QuantSpec::INT4_SYM.to_string(), "int4-sym");
        assert!(QuantSpec::new(16, QuantMode::Asymmetric).is_err());
    }

    #[test]
    fn int4_asym_worked_example() {
        let store = single_head_store(&[-1.0, 2.0, 0.5], 1);
        let q = quantize_store(&store, QuantSpec::INT4_ASYM).unwrap();
        assert!((q.primary().scales()[0] - 0.2).abs() < 1e-7);
        assert_eq!(q.primary().zero_points()[0], -1.0);
        assert_eq!(q.primary().codes(), &[0, 15, 8]);
        let deq = q.dequantize();
        assert!((deq.values()[2] - 0.6).abs() < 1e-6);
        assert!((deq.values()[2] - 0.5).abs() <= 0.1 + 1e-6);
    }

    #[test]
    fn constant_channel_is_exact() {
        for spec in QuantSpec::ALL {
            for value in [0.0f32, 1.75, -3.5] {
                let store = single_head_store(&[value; 5], 1);
                let q = quantize_store(&store, spec).unwrap();
                assert!(q.primary().scales()[0] > 0.0);
                assert_eq!(q.dequantize().values(), &[value; 5], "{spec} {value}");
            }
        }
    }

    #[test]
    fn dequantize_value_examples() {
        let spec = QuantSpec::INT4_ASYM;
        assert_eq!(dequantize_value(0, 0.2, -1.0, spec).unwrap(), -1.0);
        assert!((dequantize_value(15, 0.2, -1.0, spec).unwrap() - 2.0).abs() < 1e-6);
        assert!(matches!(
            dequantize_value(16, 0.2, -1.0, spec),
            Err(Error::CodeOutOfRange { .. })
        ));
        assert!(dequantize_value(15, 0.5, 0.0, QuantSpec::INT4_SYM).is_err());
        assert_eq!(
            dequantize_value(14, 0.5, 0.0, QuantSpec::INT4_SYM).unwrap(),
            3.5
        );
        assert_eq!(
            dequantize_value(0, 0.5, 0.0, QuantSpec::INT4_SYM).unwrap(),
            -3.5
        );
    }

    #[test]
    fn int4_lattice_enumeration() {
        // Oracle: the lattice point of code c is lo + c * (hi - lo) / 15.
        let spec = QuantSpec::INT4_ASYM;
        let (lo, hi) = (-1.0f64, 2.0f64);
        let scale = ((hi - lo) / 15.0) as f32;
        for code in 0u8..16 {
            let expected = lo + f64::from(code) * (hi - lo) / 15.0;
            let got = dequantize_value(code, scale, lo as f32, spec).unwrap();
            assert!((f64::from(got) - expected).abs() < 1e-6, "code {code}");
        }
        // Quantizing the lattice itself reproduces every code.
        let lattice: Vec<f32> = (0..16)
            .map(|c| (lo + f64::from(c) * (hi - lo) / 15.0) as f32)
            .collect();
        let q = quantize_store(&single_head_store(&lattice, 1), spec).unwrap();
        assert_eq!(
            q.primary().codes(),
            (0u8..16).collect::<Vec<_>>().as_slice()
        );
    }

    #[test]
    fn symmetric_has_zero_points() {
        let store = single_head_store(&[0.3, -2.0, 1.1, 0.7, -0.4, 1.9], 2);
        for spec in [
            QuantSpec::INT2_SYM,
            QuantSpec::INT4_SYM,
            QuantSpec::INT8_SYM,
        ] {
            let q = quantize_store(&store, spec).unwrap();
            assert!(q.primary().zero_points().iter().all(|&z| z == 0.0));
            assert!(q.primary().codes().iter().all(|&c| c <= spec.max_code()));
        }
    }

    #[test]
    fn zero_query_scores_zero() {
        let store = single_head_store(&[0.3, -2.0, 1.1, 0.7], 2);
        let q = quantize_store(&store, QuantSpec::INT4_ASYM).unwrap();
        assert_eq!(quantized_score(&[0.0, 0.0], &q, 0, 1).unwrap(), 0.0);
        assert!(quantized_score(&[0.0, 0.0], &q, 0, 2).is_err());
        assert!(quantized_score(&[0.0], &q, 0, 0).is_err());
    }

    #[test]
    fn unit_query_selects_channel() {
        // Two channels; second channel constant 5.0 keeps it exact.
        let store = single_head_store(&[-1.0, 5.0, 2.0, 5.0, 0.5, 5.0], 2);
        let q = quantize_store(&store, QuantSpec::INT4_ASYM).unwrap();
        let deq = q.dequantized_centroid(0, 2);
        assert_eq!(deq[1], 5.0);
        let score = quantized_score(&[1.0, 0.0], &q, 0, 2).unwrap();
        assert!((score - 0.6).abs() < 1e-6, "{score}");
    }

    #[test]
    fn logical_bytes_shrink_with_bits() {
        let store = single_head_store(&(0..256).map(|i| i as f32).collect::<Vec<_>>(), 64);
        let b4 = quantize_store(&store, QuantSpec::INT4_ASYM)
            .unwrap()
            .logical_bytes();
        let b8 = quantize_store(&store, QuantSpec::INT8_ASYM)
            .unwrap()
            .logical_bytes();
        assert_eq!(b4, 4 * 64 / 2 + 64 * 8);
        assert!(b4 < b8);
    }

    fn arb_store() -> impl Strategy<Value = (CentroidStore, QuantSpec)> {
        (1usize..4, 1usize..6, 1usize..40, any::<bool>(), 0usize..6).prop_flat_map(
            |(h, d, n, mm, s)| {
                prop::collection::vec(-20.0f32..20.0, h * d * n).prop_map(move |data| {
                    let keys = DenseKeys::new(h, d, data).unwrap();
                    let method = if mm {
                        CentroidMethod::MaxMin
                    } else {
                        CentroidMethod::Mean
                    };
                    let sizes = (0..h).map(|i| [1usize, 2, 4][i % 3]).collect();
                    let store = CentroidStore::compute(
                        &keys,
                        &BlockAssignment::new(sizes).unwrap(),
                        method,
                    )
                    .unwrap();
                    (store, QuantSpec::ALL[s])
                })
            },
        )
    }

    proptest! {
        #[test]
        fn reconstruction_within_half_step((store, spec) in arb_store()) {
            let q = quantize_store(&store, spec).unwrap();
            let deq = q.dequantize();
            let d = store.head_dim();
            let arrays: Vec<(&[f32], &[f32], &QuantizedArray)> = match q.minima() {
                None => vec![(store.values(), deq.values(), q.primary())],
                Some(m) => vec![(store.values(), deq.values(), q.primary()), (store.mins(), deq.mins(), m)],
            };
            for (orig, back, array) in arrays {
                prop_assert!(array.codes().iter().all(|&c| c <= spec.max_code()));
                for h in 0..store.num_heads() {
                    for row in store.offsets()[h]..store.offsets()[h + 1] {
                        for c in 0..d {
                            let i = row * d + c;
                            let scale = array.scales()[h * d + c];
                            prop_assert!(scale > 0.0);
                            let err = (orig[i] - back[i]).abs();
                            prop_assert!(err <= scale / 2.0 + 1e-6, "err {} scale {}", err, scale);
                        }
                    }
                }
            }
            prop_assert_eq!(quantize_store(&store, spec).unwrap(), q);
        }

        #[test]
        fn fused_score_matches_materialized((store, spec) in arb_store(), seed in any::<u64>()) {
            let q = quantize_store(&store, spec).unwrap();
            let deq = q.dequantize();
            let d = store.head_dim();
            let query: Vec<f32> = (0..d).map(|j| ((seed >> (j % 60)) & 7) as f32 - 3.5).collect();
            for h in 0..store.num_heads() {
                let materialized = q.head_scores_materialized(&query, h);
                for (i, &m) in materialized.iter().enumerate() {
                    let fused = quantized_score(&query, &q, h, i).unwrap();
                    let reference = match deq.min_centroid(h, i) {
                        None => dot(&query, deq.centroid(h, i)),
                        Some(lo) => crate::kernels::quest_score(&query, deq.centroid(h, i), lo),
                    };
                    prop_assert!((fused - reference).abs() <= 1e-6);
                    prop_assert_eq!(fused, m);
                }
            }
        }
    }
}
