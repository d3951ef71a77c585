//! Wall-clock medians for coarse performance comparisons.

use std::time::{Duration, Instant};

/// Median duration of `runs` calls to `f`, after one untimed warm-up call.
pub fn median_time<T>(runs: usize, mut f: impl FnMut() -> T) -> Duration {
    assert!(runs > 0, "at least one timed run");
    std::hint::black_box(f());
    let mut times: Vec<Duration> = (0..runs)
        .map(|_| {
            let start = Instant::now();
            std::hint::black_box(f());
            start.elapsed()
        })
        .collect();
    times.sort_unstable();
    times[runs / 2]
}

/// Medians of `runs` calls each to `a` and `b`, alternating between them so
/// that drift in machine load affects both equally.
pub fn median_time_pair<A, B>(
    runs: usize,
    mut a: impl FnMut() -> A,
    mut b: impl FnMut() -> B,
) -> (Duration, Duration) {
    assert!(runs > 0, "at least one timed run");
    std::hint::black_box(a());
    std::hint::black_box(b());
    let mut ta = Vec::with_capacity(runs);
    let mut tb = Vec::with_capacity(runs);
    for _ in 0..runs {
        let start = Instant::now();
        std::hint::black_box(a());
        ta.push(start.elapsed());
        let start = Instant::now();
        std::hint::black_box(b());
        tb.push(start.elapsed());
    }
    ta.sort_unstable();
    tb.sort_unstable();
    (ta[runs / 2], tb[runs / 2])
}
