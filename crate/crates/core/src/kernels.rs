//! Scalar inner loops shared by every estimation and attention path.
//!
//! All reductions go through [`lane_sum`] so that fused, materialized, naive
//! and batched callers produce bitwise-identical results for the same terms.

const LANES: usize = 8;

/// Sums `term(0) + ... + term(n - 1)` with eight interleaved accumulators.
#[inline(always)]
pub fn lane_sum(n: usize, mut term: impl FnMut(usize) -> f32) -> f32 {
    let mut acc = [0.0f32; LANES];
    let full = n - n % LANES;
    let mut j = 0;
    while j < full {
        for (l, a) in acc.iter_mut().enumerate() {
            *a += term(j + l);
        }
        j += LANES;
    }
    let mut tail = 0.0f32;
    for j in full..n {
        tail += term(j);
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    lane_sum(a.len(), |j| a[j] * b[j])
}

/// Upper bound of `q . k` over keys inside the per-channel box `[lo, hi]`.
#[inline]
pub fn quest_score(q: &[f32], hi: &[f32], lo: &[f32]) -> f32 {
    assert!(q.len() == hi.len() && q.len() == lo.len());
    lane_sum(q.len(), |j| (q[j] * hi[j]).max(q[j] * lo[j]))
}
