use ndarray::ArrayView2;
use num_bigint::BigUint;

use super::GeometryError;

/// Default histogram resolution for breast-contour initialization.
pub const DEFAULT_OTSU_BINS: usize = 256;

/// Histogram of integer intensities quantized over `[min, max]`.
#[derive(Debug, Clone)]
pub struct QuantizedHistogram {
    pub min: i64,
    /// `max - min + 1`
    pub range: i64,
    pub counts: Vec<u64>,
}

impl QuantizedHistogram {
    pub fn build<T: Copy + Into<i64>>(pixels: ArrayView2<'_, T>, bins: usize) -> Result<Self, GeometryError> {
        if bins < 2 {
            return Err(GeometryError::InvalidBins(bins));
        }
        let mut iter = pixels.iter().map(|&v| v.into());
        let first = iter.next().ok_or(GeometryError::DegenerateImage)?;
        let (min, max) = iter.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v)));
        if min == max {
            return Err(GeometryError::DegenerateImage);
        }
        let range = max - min + 1;
        let mut counts = vec![0u64; bins];
        for &v in pixels.iter() {
            counts[Self::bin_index(v.into(), min, range, bins)] += 1;
        }
        Ok(Self { min, range, counts })
    }

    fn bin_index(v: i64, min: i64, range: i64, bins: usize) -> usize {
        (((v - min) as i128 * bins as i128) / range as i128) as usize
    }

    pub fn bin_of(&self, v: i64) -> usize {
        Self::bin_index(v, self.min, self.range, self.counts.len())
    }

    /// Real threshold `T` such that `v > T` exactly when `bin_of(v) > split`.
    pub fn threshold_after(&self, split: usize) -> f64 {
        let bins = self.counts.len() as i128;
        let edge = ((split as i128 + 1) * self.range as i128 + bins - 1) / bins;
        self.min as f64 + edge as f64 - 0.5
    }
}

/// Index `t` maximizing the between-class variance of the split
/// `{bins <= t} | {bins > t}`; the first maximizer wins ties.
///
/// Variance is compared exactly: for class-0 count `n0` and bin-index sum
/// `s0`, the between-class variance is proportional to
/// `(N*s0 - n0*S)^2 / (n0 * (N - n0))`.
pub fn otsu_split(counts: &[u64]) -> Option<usize> {
    let total: u128 = counts.iter().map(|&c| c as u128).sum();
    let weighted: u128 = counts
        .iter()
        .enumerate()
        .map(|(b, &c)| b as u128 * c as u128)
        .sum();
    let mut best: Option<(usize, BigUint, u128)> = None;
    let (mut n0, mut s0) = (0u128, 0u128);
    for (t, &c) in counts.iter().enumerate() {
        n0 += c as u128;
        s0 += t as u128 * c as u128;
        if n0 == 0 || n0 == total {
            continue;
        }
        let a = total as i128 * s0 as i128;
        let b = n0 as i128 * weighted as i128;
        let diff = BigUint::from(a.abs_diff(b));
        let num = &diff * &diff;
        let den = n0 * (total - n0);
        let better = match &best {
            None => true,
            Some((_, best_num, best_den)) => &num * BigUint::from(*best_den) > best_num * BigUint::from(den),
        };
        if better {
            best = Some((t, num, den));
        }
    }
    best.map(|(t, _, _)| t)
}

/// Otsu threshold over a `bins`-bin histogram; foreground is `value > threshold`.
pub fn otsu_threshold<T: Copy + Into<i64>>(pixels: ArrayView2<'_, T>, bins: usize) -> Result<f64, GeometryError> {
    let hist = QuantizedHistogram::build(pixels, bins)?;
    let split = otsu_split(&hist.counts).ok_or(GeometryError::DegenerateImage)?;
    Ok(hist.threshold_after(split))
}
