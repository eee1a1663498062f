use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Ratio between consecutive bucket boundaries.
pub const GROWTH: f64 = 1.1;
/// Values below this share bucket 0.
pub const MIN_TRACKED: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
struct Bucket {
    count: u64,
    sum: f64,
}

/// Log-bucketed latency histogram.
///
/// Bucket `i ≥ 1` holds `[MIN·1.1^(i-1), MIN·1.1^i)`. Each bucket keeps its
/// count and the sum of its samples, and a quantile estimate is the mean of
/// the bucket holding the nearest-rank sample. The estimate therefore lies
/// in the same bucket as the exact answer, under 10% relative error, and is
/// exact whenever that bucket holds a single distinct value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyHistogram {
    buckets: BTreeMap<u32, Bucket>,
    total: u64,
}

pub fn bucket_index(v: f64) -> u32 {
    if v < MIN_TRACKED {
        0
    } else {
        1 + ((v / MIN_TRACKED).ln() / GROWTH.ln()).floor() as u32
    }
}

/// `[lo, hi)` of bucket `i`.
pub fn bucket_bounds(i: u32) -> (f64, f64) {
    if i == 0 {
        (0.0, MIN_TRACKED)
    } else {
        (
            MIN_TRACKED * GROWTH.powi(i as i32 - 1),
            MIN_TRACKED * GROWTH.powi(i as i32),
        )
    }
}

/// Nearest rank of quantile `q` among `n` samples, 1-based.
pub fn nearest_rank(q: f64, n: u64) -> u64 {
    ((q * n as f64).ceil() as u64).clamp(1, n)
}

impl LatencyHistogram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, v: f64) {
        debug_assert!(v >= 0.0);
        let b = self.buckets.entry(bucket_index(v)).or_default();
        b.count += 1;
        b.sum += v;
        self.total += 1;
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn bucket_counts(&self) -> impl Iterator<Item = (u32, u64)> + '_ {
        self.buckets.iter().map(|(&i, b)| (i, b.count))
    }

    /// Estimate of the nearest-rank `q` quantile, `q ∈ (0, 1]`.
    pub fn quantile(&self, q: f64) -> Option<f64> {
        if self.total == 0 {
            return None;
        }
        let rank = nearest_rank(q, self.total);
        let mut seen = 0;
        for b in self.buckets.values() {
            seen += b.count;
            if seen >= rank {
                return Some(b.sum / b.count as f64);
            }
        }
        unreachable!("rank {rank} within total {}", self.total)
    }

    pub fn merge(&mut self, other: &LatencyHistogram) {
        for (&i, b) in &other.buckets {
            let mine = self.buckets.entry(i).or_default();
            mine.count += b.count;
            mine.sum += b.sum;
        }
        self.total += other.total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exact nearest-rank quantile by sorting.
    fn exact(samples: &[f64], q: f64) -> f64 {
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        s[nearest_rank(q, s.len() as u64) as usize - 1]
    }

    fn hist(samples: &[f64]) -> LatencyHistogram {
        let mut h = LatencyHistogram::new();
        samples.iter().for_each(|&v| h.record(v));
        h
    }

    #[test]
    fn bounds_bracket_their_index() {
        for v in [1e-12, 1e-9, 0.5, 1.0, 9.99, 10.0, 1234.5, 1e9] {
            let (lo, hi) = bucket_bounds(bucket_index(v));
            assert!(
                lo <= v * (1.0 + 1e-12) && v < hi * (1.0 + 1e-12),
                "{v}: [{lo}, {hi})"
            );
        }
    }

    #[test]
    fn single_sample_is_exact() {
        for s in [0.0, 0.25, 7.0, 12345.678] {
            let h = hist(&[s]);
            for q in [0.01, 0.5, 0.99, 1.0] {
                assert_eq!(h.quantile(q), Some(s));
            }
        }
    }

    #[test]
    fn one_to_hundred_p99() {
        let samples: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(exact(&samples, 0.99), 99.0);
        let est = hist(&samples).quantile(0.99).unwrap();
        assert!(bucket_index(est).abs_diff(bucket_index(99.0)) <= 1, "{est}");
        assert!((est - 99.0).abs() / 99.0 < 0.1);
    }

    proptest! {
        #[test]
        fn estimate_shares_bucket_with_exact(
            samples in proptest::collection::vec(0.0f64..1e6, 1..300),
            q in 0.001f64..=1.0,
        ) {
            let e = exact(&samples, q);
            let est = hist(&samples).quantile(q).unwrap();
            prop_assert!(bucket_index(est).abs_diff(bucket_index(e)) <= 1);
            if e > 0.0 {
                prop_assert!((est - e).abs() / e < 0.1);
            }
        }

        #[test]
        fn merge_is_bucket_exact(
            a in proptest::collection::vec(0.0f64..1e4, 0..100),
            b in proptest::collection::vec(0.0f64..1e4, 0..100),
        ) {
            let mut merged = hist(&a);
            merged.merge(&hist(&b));
            let concat: Vec<f64> = a.iter().chain(&b).copied().collect();
            let direct = hist(&concat);
            prop_assert_eq!(merged.total(), direct.total());
            prop_assert_eq!(
                merged.bucket_counts().collect::<Vec<_>>(),
                direct.bucket_counts().collect::<Vec<_>>()
            );
        }
    }
}
