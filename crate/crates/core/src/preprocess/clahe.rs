use ndarray::{Array2, ArrayView2};

use super::{PreprocConfig, PreprocessError};

/// Contrast-limited adaptive histogram equalization on a `[0, 1]` image.
///
/// Tiles are `ceil(H * f) x ceil(W * f)` for kernel fraction `f`; the image is
/// mirror-padded at the bottom/right so every tile is full. Each tile
/// histogram is clipped at `clip_limit * tile_pixels` (at least one count),
/// the excess is spread evenly over all bins, and the tile mapping is
/// `(cdf(b) - cdf_min) / (N - cdf_min)`. Pixels blend the mappings of the
/// four nearest tile centers bilinearly.
pub fn clahe(img: ArrayView2<'_, f64>, config: &PreprocConfig) -> Result<Array2<f64>, PreprocessError> {
    config.validate()?;
    let (h, w) = img.dim();
    if h == 0 || w == 0 {
        return Err(PreprocessError::EmptyImage);
    }
    if let Some(&bad) = img.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(PreprocessError::OutOfUnitRange(bad));
    }
    let bins = config.clahe_bins;
    let frac = config.clahe_kernel_fraction;
    let kh = ((h as f64 * frac).ceil() as usize).clamp(1, h);
    let kw = ((w as f64 * frac).ceil() as usize).clamp(1, w);
    let ny = h.div_ceil(kh);
    let nx = w.div_ceil(kw);

    let bin_of = |v: f64| ((v * bins as f64) as usize).min(bins - 1);
    let mirror = |i: usize, n: usize| if i < n { i } else { 2 * n - 1 - i };

    let tile_pixels = (kh * kw) as f64;
    let clip = (config.clahe_clip_limit * tile_pixels).max(1.0);
    let mut maps = vec![vec![0.0f64; bins]; ny * nx];
    let mut hist = vec![0.0f64; bins];
    for ty in 0..ny {
        for tx in 0..nx {
            hist.iter_mut().for_each(|c| *c = 0.0);
            for y in ty * kh..(ty + 1) * kh {
                let sy = mirror(y, h);
                for x in tx * kw..(tx + 1) * kw {
                    hist[bin_of(img[[sy, mirror(x, w)]])] += 1.0;
                }
            }
            clip_histogram(&mut hist, clip);
            tile_mapping(&hist, &mut maps[ty * nx + tx]);
        }
    }

    // Fractional tile coordinate of a pixel center, with the neighbouring
    // tile indices and the weight of the second one.
    let axis = |p: usize, k: usize, n: usize| -> (usize, usize, f64) {
        let t = (p as f64 + 0.5) / k as f64 - 0.5;
        if t <= 0.0 {
            return (0, 0, 0.0);
        }
        let i0 = (t.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, if i0 == i1 { 0.0 } else { t - i0 as f64 })
    };
    let cols: Vec<(usize, usize, f64)> = (0..w).map(|x| axis(x, kw, nx)).collect();
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        let (r0, r1, wy) = axis(y, kh, ny);
        for x in 0..w {
            let (c0, c1, wx) = cols[x];
            let b = bin_of(img[[y, x]]);
            let top = maps[r0 * nx + c0][b] * (1.0 - wx) + maps[r0 * nx + c1][b] * wx;
            let bottom = maps[r1 * nx + c0][b] * (1.0 - wx) + maps[r1 * nx + c1][b] * wx;
            out[[y, x]] = (top * (1.0 - wy) + bottom * wy).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

fn clip_histogram(hist: &mut [f64], clip: f64) {
    let mut excess = 0.0;
    for c in hist.iter_mut() {
        if *c > clip {
            excess += *c - clip;
            *c = clip;
        }
    }
    if excess > 0.0 {
        let share = excess / hist.len() as f64;
        hist.iter_mut().for_each(|c| *c += share);
    }
}

fn tile_mapping(hist: &[f64], map: &mut [f64]) {
    let total: f64 = hist.iter().sum();
    let cdf_min = hist.iter().copied().find(|&c| c > 0.0).unwrap_or(0.0);
    let denom = total - cdf_min;
    let mut cdf = 0.0;
    for (m, &c) in map.iter_mut().zip(hist) {
        cdf += c;
        *m = if denom > 0.0 {
            ((cdf - cdf_min) / denom).clamp(0.0, 1.0)
        } else {
            0.0
        };
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(fraction: f64, clip: f64) -> PreprocConfig {
        PreprocConfig {
            clahe_kernel_fraction: fraction,
            clahe_clip_limit: clip,
            ..Default::default()
        }
    }

    /// Whole-image cumulative-histogram remap.
    fn global_equalization(img: &Array2<f64>, bins: usize) -> Array2<f64> {
        let mut counts = vec![0usize; bins];
        let bin = |v: f64| ((v * bins as f64) as usize).min(bins - 1);
        for &v in img {
            counts[bin(v)] += 1;
        }
        let n = img.len() as f64;
        let first = counts.iter().copied().find(|&c| c > 0).unwrap() as f64;
        img.mapv(|v| {
            let cdf: usize = counts[..=bin(v)].iter().sum();
            if n > first {
                (cdf as f64 - first) / (n - first)
            } else {
                0.0
            }
        })
    }

    #[test]
    fn constant_image_stays_spatially_constant() {
        for value in [0.0, 0.3, 1.0] {
            let img = Array2::from_elem((37, 23), value);
            let out = clahe(img.view(), &PreprocConfig::default()).unwrap();
            let first = out[[0, 0]];
            assert!(out.iter().all(|&v| v == first), "value {value}");
        }
        let zeros = Array2::zeros((16, 16));
        let out = clahe(zeros.view(), &PreprocConfig::default()).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_unclipped_tile_is_global_equalization() {
        let img = Array2::from_shape_fn((16, 16), |(r, c)| if (r + c) % 3 == 0 { 0.25 } else { 0.75 });
        let out = clahe(img.view(), &cfg(1.0, 1.0)).unwrap();
        let expected = global_equalization(&img, 256);
        for (a, b) in out.iter().zip(expected.iter()) {
            assert!((a - b).abs() <= 1.0 / 256.0, "{a} vs {b}");
        }
    }

    #[test]
    fn output_stays_in_unit_range_and_shape() {
        let img = Array2::from_shape_fn((50, 41), |(r, c)| ((r * 7 + c * 13) % 100) as f64 / 99.0);
        let out = clahe(img.view(), &PreprocConfig::default()).unwrap();
        assert_eq!(out.dim(), img.dim());
        assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn rejects_values_outside_unit_range() {
        let img = Array2::from_elem((4, 4), 1.5);
        assert!(matches!(
            clahe(img.view(), &PreprocConfig::default()),
            Err(PreprocessError::OutOfUnitRange(_))
        ));
    }

    #[test]
    fn clipping_limits_contrast_gain() {
        // A narrow-range tile is stretched to full range without clipping and
        // much less with a tight clip limit.
        let img = Array2::from_shape_fn((32, 32), |(r, _)| if r < 16 { 0.50 } else { 0.52 });
        let free = clahe(img.view(), &cfg(1.0, 1.0)).unwrap();
        let tight = clahe(img.view(), &cfg(1.0, 0.01)).unwrap();
        let spread = |a: &Array2<f64>| a[[31, 0]] - a[[0, 0]];
        assert!(spread(&free) > 0.99);
        assert!(spread(&tight) < 0.2);
    }
}
