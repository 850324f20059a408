//! SVD cost measurement.

use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{randomized_svd, svd_thin_with_stats, RandomizedSvd};
use crate::rng::{gaussian_matrix, trial_rng};

pub const MAX_BENCH_SIZE: usize = 4096;

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub size: usize,
    pub timings_ms: Vec<f64>,
    pub t_median_ms: f64,
    pub t_p90_ms: f64,
    /// Peak bytes of the decomposition's work buffers.
    pub mem_bytes: usize,
    /// Median of the randomized path at the requested rank.
    pub randomized_median_ms: Option<f64>,
}

impl BenchRow {
    /// Exact over randomized median time.
    pub fn speedup(&self) -> Option<f64> {
        self.randomized_median_ms.map(|r| self.t_median_ms / r)
    }
}

/// Nearest-rank quantile of an unsorted sample.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let idx = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1;
    v[idx]
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times the exact SVD of square Gaussian matrices, `repeats` times each,
/// on the calling thread. `randomized_rank` adds the sketch-based path.
pub fn bench_svd(sizes: &[usize], repeats: usize, seed: u64, randomized_rank: Option<usize>) -> Result<Vec<BenchRow>> {
    if repeats == 0 {
        return Err(Error::Precondition("repeats must be at least 1".into()));
    }
    if let Some(&s) = sizes.iter().find(|&&s| s > MAX_BENCH_SIZE) {
        return Err(Error::Precondition(format!("size {s} exceeds the cap of {MAX_BENCH_SIZE}")));
    }
    sizes
        .iter()
        .enumerate()
        .map(|(i, &size)| {
            let w = gaussian_matrix(&mut trial_rng(seed, i as u64), size, size, 1.0);
            let mut timings_ms = Vec::with_capacity(repeats);
            let mut mem_bytes = 0;
            for _ in 0..repeats {
                let t = Instant::now();
                let (_, stats) = svd_thin_with_stats(&w)?;
                timings_ms.push(t.elapsed().as_secs_f64() * 1e3);
                mem_bytes = stats.peak_bytes;
            }
            let randomized_median_ms = match randomized_rank {
                Some(rank) => {
                    let mut ts = Vec::with_capacity(repeats);
                    for _ in 0..repeats {
                        let t = Instant::now();
                        randomized_svd(&w, RandomizedSvd::new(rank, seed))?;
                        ts.push(t.elapsed().as_secs_f64() * 1e3);
                    }
                    Some(median(&ts))
                }
                None => None,
            };
            Ok(BenchRow {
                size,
                t_median_ms: median(&timings_ms),
                t_p90_ms: quantile(&timings_ms, 0.9),
                timings_ms,
                mem_bytes,
                randomized_median_ms,
            })
        })
        .collect()
}

/// `size,t_median_ms,t_p90_ms,mem_bytes`, plus the randomized columns when
/// any row has them.
pub fn bench_csv(rows: &[BenchRow]) -> String {
    let randomized = rows.iter().any(|r| r.randomized_median_ms.is_some());
    let mut out = String::from("size,t_median_ms,t_p90_ms,mem_bytes");
    if randomized {
        out.push_str(",randomized_median_ms,speedup");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{},{},{},{}", r.size, r.t_median_ms, r.t_p90_ms, r.mem_bytes);
        if randomized {
            let show = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
            let _ = write!(out, ",{},{}", show(r.randomized_median_ms), show(r.speedup()));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles() {
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.5), 2.0);
        assert_eq!(quantile(&[5.0, 1.0, 4.0, 2.0, 3.0], 0.9), 5.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn records_every_repeat() {
        let rows = bench_svd(&[64], 5, 0, None).unwrap();
        assert_eq!(rows[0].timings_ms.len(), 5);
        assert_eq!(rows[0].t_median_ms, median(&rows[0].timings_ms));
        assert!(rows[0].t_p90_ms >= rows[0].t_median_ms);
        assert!(rows[0].mem_bytes >= 3 * 64 * 64 * 8);
        let csv = bench_csv(&rows);
        assert!(csv.starts_with("size,t_median_ms,t_p90_ms,mem_bytes\n64,"));
        assert!(bench_svd(&[MAX_BENCH_SIZE + 1], 1, 0, None).is_err());
        assert!(bench_svd(&[8], 0, 0, None).is_err());
    }

    #[test]
    fn median_time_grows_with_size() {
        let rows = bench_svd(&[128, 256, 512, 1024], 3, 1, None).unwrap();
        for w in rows.windows(2) {
            assert!(w[1].t_median_ms * 2.0 >= w[0].t_median_ms, "{} then {}", w[0].t_median_ms, w[1].t_median_ms);
        }
    }

    #[test]
    fn randomized_column_is_reported() {
        let rows = bench_svd(&[96], 2, 2, Some(8)).unwrap();
        assert!(rows[0].speedup().unwrap() > 0.0);
        assert!(bench_csv(&rows).lines().next().unwrap().ends_with(",randomized_median_ms,speedup"));
    }
}
