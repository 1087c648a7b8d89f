//! Sample statistics: nearest-rank percentiles and ECDFs.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StatsError {
    #[error("no samples")]
    EmptySamples,
}

/// Nearest-rank percentile: with the samples sorted ascending, `Pp` is the
/// element at 1-based index `ceil(p/100 * n)`. For p=50 on an even n this
/// is the lower median; exact and reproducible, matching ECDF semantics.
pub fn percentiles(samples: &[u64], ps: &[f64]) -> Result<Vec<u64>, StatsError> {
    if samples.is_empty() {
        return Err(StatsError::EmptySamples);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    Ok(ps
        .iter()
        .map(|p| {
            let rank = ((p / 100.0) * n as f64).ceil() as usize;
            sorted[rank.clamp(1, n) - 1]
        })
        .collect())
}

pub fn p50_p90_p99(samples: &[u64]) -> Result<(u64, u64, u64), StatsError> {
    let v = percentiles(samples, &[50.0, 90.0, 99.0])?;
    Ok((v[0], v[1], v[2]))
}

/// Empirical CDF: sorted unique values with the fraction of samples at or
/// below each. Monotone nondecreasing; the last fraction is exactly 1.
pub fn ecdf(samples: &[u64]) -> Result<Vec<(u64, f64)>, StatsError> {
    if samples.is_empty() {
        return Err(StatsError::EmptySamples);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_unstable();
    let n = sorted.len() as f64;
    let mut out: Vec<(u64, f64)> = Vec::new();
    let mut below = 0usize;
    let mut i = 0usize;
    while i < sorted.len() {
        let v = sorted[i];
        let mut j = i;
        while j < sorted.len() && sorted[j] == v {
            j += 1;
        }
        below = j;
        out.push((v, below as f64 / n));
        i = j;
    }
    debug_assert_eq!(below, sorted.len());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    /// Brute-force oracle: count directly from the definition, no shared
    /// code with the implementation above.
    fn oracle_percentile(samples: &[u64], p: f64) -> u64 {
        let mut sorted = samples.to_vec();
        sorted.sort();
        let n = sorted.len() as f64;
        let mut rank = (p / 100.0 * n).ceil() as i64;
        if rank < 1 {
            rank = 1;
        }
        sorted[(rank as usize).min(sorted.len()) - 1]
    }

    #[test]
    fn decile_list_matches_frozen_values() {
        let samples: Vec<u64> = (1..=10).map(|i| i * 10).collect();
        let v = percentiles(&samples, &[50.0, 90.0, 99.0]).unwrap();
        // ceil(0.5*10)=5th -> 50; ceil(0.9*10)=9th -> 90; ceil(9.9)=10th -> 100.
        assert_eq!(v, vec![50, 90, 100]);
    }

    #[test]
    fn single_sample_answers_everything() {
        let v = percentiles(&[7], &[50.0, 90.0, 99.0]).unwrap();
        assert_eq!(v, vec![7, 7, 7]);
    }

    #[test]
    fn empty_samples_are_an_error() {
        assert_eq!(percentiles(&[], &[50.0]), Err(StatsError::EmptySamples));
        assert_eq!(ecdf(&[]).unwrap_err(), StatsError::EmptySamples);
    }

    #[test]
    fn ecdf_counts_duplicates() {
        let e = ecdf(&[1, 1, 2]).unwrap();
        assert_eq!(e, vec![(1, 2.0 / 3.0), (2, 1.0)]);
    }

    #[test]
    fn ecdf_ends_at_one_and_is_monotone() {
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..100 {
            let n = rng.gen_range(1..200);
            let samples: Vec<u64> = (0..n).map(|_| rng.gen_range(0..50)).collect();
            let e = ecdf(&samples).unwrap();
            assert_eq!(e.last().unwrap().1, 1.0);
            assert!(e.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 < w[1].1));
        }
    }

    #[test]
    fn matches_brute_force_oracle_on_random_inputs() {
        let mut rng = StdRng::seed_from_u64(99);
        for _ in 0..10_000 {
            let n = rng.gen_range(1..64);
            let samples: Vec<u64> = (0..n).map(|_| rng.gen_range(0..1_000_000)).collect();
            let p = rng.gen_range(0.5..100.0);
            let got = percentiles(&samples, &[p]).unwrap()[0];
            assert_eq!(got, oracle_percentile(&samples, p), "p={p} samples={samples:?}");
        }
    }

    #[test]
    fn ecdf_at_percentile_covers_its_fraction() {
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..500 {
            let n = rng.gen_range(1..128);
            let samples: Vec<u64> = (0..n).map(|_| rng.gen_range(0..1000)).collect();
            let e = ecdf(&samples).unwrap();
            for p in [50.0, 90.0, 99.0] {
                let pv = percentiles(&samples, &[p]).unwrap()[0];
                let frac = e
                    .iter()
                    .take_while(|(v, _)| *v <= pv)
                    .last()
                    .map(|(_, f)| *f)
                    .unwrap();
                assert!(
                    frac >= p / 100.0 - 1e-9,
                    "ECDF({pv}) = {frac} < {p}% for {samples:?}"
                );
            }
        }
    }
}
