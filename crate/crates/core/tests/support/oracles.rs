//! Brute-force reference implementations, written independently of the
//! library code they check.

#![allow(dead_code)]

/// Pixel-count IoU; an empty union counts as perfect agreement.
pub fn iou_counts(pred: &[bool], gt: &[bool]) -> f64 {
    assert_eq!(pred.len(), gt.len());
    let mut inter = 0usize;
    let mut union = 0usize;
    for i in 0..pred.len() {
        if pred[i] && gt[i] {
            inter += 1;
        }
        if pred[i] || gt[i] {
            union += 1;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Between-class variance `w0 * w1 * (mu0 - mu1)^2` for every split of a
/// histogram, returning the first index that maximizes it.
pub fn otsu_split_exhaustive(counts: &[u64]) -> Option<usize> {
    let total: f64 = counts.iter().map(|&c| c as f64).sum();
    let mut best: Option<(usize, f64)> = None;
    for t in 0..counts.len() {
        let (mut n0, mut s0, mut n1, mut s1) = (0.0, 0.0, 0.0, 0.0);
        for (b, &c) in counts.iter().enumerate() {
            if b <= t {
                n0 += c as f64;
                s0 += (b as f64) * c as f64;
            } else {
                n1 += c as f64;
                s1 += (b as f64) * c as f64;
            }
        }
        if n0 == 0.0 || n1 == 0.0 {
            continue;
        }
        let (w0, w1) = (n0 / total, n1 / total);
        let var = w0 * w1 * (s0 / n0 - s1 / n1).powi(2);
        if best.is_none_or(|(_, v)| var > v) {
            best = Some((t, var));
        }
    }
    best.map(|(t, _)| t)
}

/// Integer threshold `t` (class 0 is `v <= t`) maximizing the between-class
/// variance of the raw values, searched over every integer in `[min, max)`.
pub fn otsu_threshold_exhaustive(values: &[i64]) -> Option<i64> {
    let lo = *values.iter().min()?;
    let hi = *values.iter().max()?;
    let mut best: Option<(i64, f64)> = None;
    let n = values.len() as f64;
    for t in lo..hi {
        let c0: Vec<f64> = values.iter().filter(|&&v| v <= t).map(|&v| v as f64).collect();
        let c1: Vec<f64> = values.iter().filter(|&&v| v > t).map(|&v| v as f64).collect();
        if c0.is_empty() || c1.is_empty() {
            continue;
        }
        let m0 = c0.iter().sum::<f64>() / c0.len() as f64;
        let m1 = c1.iter().sum::<f64>() / c1.len() as f64;
        let var = (c0.len() as f64 / n) * (c1.len() as f64 / n) * (m0 - m1).powi(2);
        if best.is_none_or(|(_, v)| var > v) {
            best = Some((t, var));
        }
    }
    best.map(|(t, _)| t)
}

/// Percentile by linear interpolation between order statistics at rank
/// `p / 100 * (n - 1)`.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn percentile_normalize(values: &[f64], p_low: f64, p_high: f64) -> Vec<f64> {
    let lo = percentile(values, p_low);
    let hi = percentile(values, p_high);
    if hi == lo {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).collect()
}

/// Even-odd crossing test of the point `(x, y)` against a closed vertex ring.
pub fn point_in_polygon(x: f64, y: f64, ring: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let n = ring.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = ring[i];
        let (xj, yj) = ring[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Label codes, row-major: later rings in `layers` overwrite earlier ones at
/// pixel centers.
pub fn rasterize(layers: &[(u8, Vec<(f64, f64)>)], width: usize, height: usize) -> Vec<u8> {
    let mut out = vec![0u8; width * height];
    for (code, ring) in layers {
        for r in 0..height {
            for c in 0..width {
                if point_in_polygon(c as f64 + 0.5, r as f64 + 0.5, ring) {
                    out[r * width + c] = *code;
                }
            }
        }
    }
    out
}

/// Global histogram equalization: each pixel maps to
/// `(#{pixels with bin <= own bin} - cdf_min) / (N - cdf_min)`.
pub fn global_equalization(img: &[f64], bins: usize) -> Vec<f64> {
    let bin = |v: f64| ((v * bins as f64) as usize).min(bins - 1);
    let n = img.len();
    let cdf = |b: usize| img.iter().filter(|&&v| bin(v) <= b).count();
    let cdf_min = cdf(img.iter().map(|&v| bin(v)).min().unwrap());
    img.iter()
        .map(|&v| {
            if n == cdf_min {
                0.0
            } else {
                (cdf(bin(v)) - cdf_min) as f64 / (n - cdf_min) as f64
            }
        })
        .collect()
}
