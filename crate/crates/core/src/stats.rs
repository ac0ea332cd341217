use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StatsError {
    #[error("need at least {needed} samples, have {available}")]
    NotEnoughSamples { needed: usize, available: usize },
    #[error("segment count must be positive")]
    ZeroSegments,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SegmentStats {
    pub mean: f64,
    pub std: f64,
    pub segments: usize,
}

/// Batch-means summary: the last `k * floor(len / k)` samples are cut into
/// `k` equal blocks; returns the mean of the block means and their sample
/// standard deviation (zero when `k == 1`).
pub fn segment_stats(samples: &[f64], k: usize) -> Result<SegmentStats, StatsError> {
    if k == 0 {
        return Err(StatsError::ZeroSegments);
    }
    if samples.len() < k {
        return Err(StatsError::NotEnoughSamples {
            needed: k,
            available: samples.len(),
        });
    }
    let block = samples.len() / k;
    let tail = &samples[samples.len() - block * k..];
    let means: Vec<f64> = tail
        .chunks_exact(block)
        .map(|c| c.iter().sum::<f64>() / block as f64)
        .collect();
    let (mean, std) = mean_and_std(&means);
    Ok(SegmentStats {
        mean,
        std,
        segments: k,
    })
}

/// Mean and sample standard deviation (`n - 1` denominator; zero for one value).
pub fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn constant_sequence() {
        let s = segment_stats(&[0.25; 40], 10).unwrap();
        assert_eq!(s.mean, 0.25);
        assert_eq!(s.std, 0.0);
        let zeros = segment_stats(&[0.0; 17], 3).unwrap();
        assert_eq!((zeros.mean, zeros.std), (0.0, 0.0));
    }

    #[test]
    fn two_blocks() {
        let s = segment_stats(&[1.0, 1.0, 0.0, 0.0], 2).unwrap();
        assert_eq!(s.mean, 0.5);
        assert_relative_eq!(s.std, std::f64::consts::FRAC_1_SQRT_2, max_relative = 1e-15);
    }

    #[test]
    fn alternating_million() {
        let samples: Vec<f64> = (0..1_000_000).map(|i| (i % 2) as f64).collect();
        let s = segment_stats(&samples, 10).unwrap();
        assert_eq!(s.mean, 0.5);
        assert_eq!(s.std, 0.0);
    }

    #[test]
    fn remainder_is_dropped_from_the_front() {
        // 7 samples, 3 blocks of 2: the leading 9.0 is ignored
        let s = segment_stats(&[9.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0], 3).unwrap();
        assert_relative_eq!(s.mean, 2.0 / 3.0);
    }

    #[test]
    fn errors() {
        assert_eq!(
            segment_stats(&[1.0], 2),
            Err(StatsError::NotEnoughSamples { needed: 2, available: 1 })
        );
        assert_eq!(segment_stats(&[1.0], 0), Err(StatsError::ZeroSegments));
    }
}
