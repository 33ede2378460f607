//! Image preparation: percentile normalization, CLAHE, byte rescaling,
//! laterality canonicalization and the model-facing resize.

mod clahe;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{
    AnnotationSet, ImageRecord, LabelMap, Laterality, Polygon, Structures,
};

pub use clahe::clahe;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PreprocessError {
    #[error("EmptyImage: image has no pixels")]
    EmptyImage,
    #[error("InvalidConfig: {0}")]
    InvalidConfig(String),
    #[error("OutOfUnitRange: value {0} outside [0, 1]")]
    OutOfUnitRange(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocConfig {
    pub p_low: f64,
    pub p_high: f64,
    /// Tile size as a fraction of image height and width.
    pub clahe_kernel_fraction: f64,
    /// Clip limit relative to the tile pixel count; `>= 1` disables clipping.
    pub clahe_clip_limit: f64,
    pub clahe_bins: usize,
    pub model_size: usize,
}

impl Default for PreprocConfig {
    fn default() -> Self {
        Self {
            p_low: 2.0,
            p_high: 98.0,
            clahe_kernel_fraction: 1.0 / 8.0,
            clahe_clip_limit: 0.01,
            clahe_bins: 256,
            model_size: 384,
        }
    }
}

impl PreprocConfig {
    pub fn validate(&self) -> Result<(), PreprocessError> {
        let bad = |m: &str| Err(PreprocessError::InvalidConfig(m.to_string()));
        if !(0.0 <= self.p_low && self.p_low < self.p_high && self.p_high <= 100.0) {
            return bad("require 0 <= p_low < p_high <= 100");
        }
        if !(self.clahe_kernel_fraction > 0.0 && self.clahe_kernel_fraction <= 1.0) {
            return bad("clahe_kernel_fraction must be in (0, 1]");
        }
        if !(self.clahe_clip_limit > 0.0) {
            return bad("clahe_clip_limit must be > 0");
        }
        if self.clahe_bins < 2 {
            return bad("clahe_bins must be >= 2");
        }
        if self.model_size == 0 {
            return bad("model_size must be > 0");
        }
        Ok(())
    }
}

/// Linear-interpolation order statistic `P = a + frac * (b - a)` kept in
/// integer parts so differences between percentiles stay exact.
#[derive(Debug, Clone, Copy)]
struct Percentile {
    base: i64,
    frac: f64,
    step: i64,
}

impl Percentile {
    fn offset_from(&self, v: i64) -> f64 {
        (v - self.base) as f64 - self.frac * self.step as f64
    }
}

fn percentile_of(values: &mut [i64], q: f64) -> Percentile {
    let n = values.len();
    let pos = q / 100.0 * (n - 1) as f64;
    let i = (pos.floor() as usize).min(n - 1);
    let frac = pos - i as f64;
    let (_, &mut a, right) = values.select_nth_unstable(i);
    let step = if frac > 0.0 {
        right.iter().copied().min().unwrap_or(a) - a
    } else {
        0
    };
    Percentile { base: a, frac, step }
}

/// Maps intensities so the `p_low` / `p_high` percentiles land on 0 and 1,
/// clipping outside. A degenerate range yields all zeros.
pub fn percentile_normalize<T>(
    pixels: ArrayView2<'_, T>,
    p_low: f64,
    p_high: f64,
) -> Result<Array2<f64>, PreprocessError>
where
    T: Copy + Into<i64>,
{
    if pixels.is_empty() {
        return Err(PreprocessError::EmptyImage);
    }
    if !(0.0 <= p_low && p_low < p_high && p_high <= 100.0) {
        return Err(PreprocessError::InvalidConfig(
            "require 0 <= p_low < p_high <= 100".into(),
        ));
    }
    let mut values: Vec<i64> = pixels.iter().map(|&v| v.into()).collect();
    let lo = percentile_of(&mut values, p_low);
    let hi = percentile_of(&mut values, p_high);
    let span = (hi.base - lo.base) as f64 + hi.frac * hi.step as f64 - lo.frac * lo.step as f64;
    if !(span > 0.0) {
        return Ok(Array2::zeros(pixels.dim()));
    }
    Ok(pixels.mapv(|v| (lo.offset_from(v.into()) / span).clamp(0.0, 1.0)))
}

/// `round(v * 255)` with halves rounded away from zero.
pub fn rescale_to_bytes(img: ArrayView2<'_, f64>) -> Array2<u8> {
    img.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
}

/// Reverses columns for left breasts so every image looks like a right breast.
pub fn standardize_orientation<T: Clone>(img: ArrayView2<'_, T>, laterality: Laterality) -> Array2<T> {
    match laterality {
        Laterality::R => img.to_owned(),
        Laterality::L => flip_columns(img),
    }
}

pub fn flip_columns<T: Clone>(img: ArrayView2<'_, T>) -> Array2<T> {
    let mut out = img.to_owned();
    out.invert_axis(ndarray::Axis(1));
    out.as_standard_layout().into_owned()
}

pub fn standardize_labels(labels: &LabelMap, laterality: Laterality) -> LabelMap {
    match laterality {
        Laterality::R => labels.clone(),
        Laterality::L => LabelMap::new(flip_columns(labels.codes().view()))
            .expect("flipping preserves codes"),
    }
}

/// Polygon counterpart of the raster flip: `x -> width - x`.
pub fn standardize_polygon(poly: &Polygon, width: usize, laterality: Laterality) -> Polygon {
    match laterality {
        Laterality::R => poly.clone(),
        Laterality::L => poly.flip_horizontal(width as f64),
    }
}

/// Maps a polygon traced on the model-resolution canonical grid back to
/// source image coordinates: scale by `width / model_size`, `height /
/// model_size`, then undo the left-breast flip.
pub fn polygon_to_image(
    poly: &Polygon,
    model_size: usize,
    width: usize,
    height: usize,
    laterality: Laterality,
) -> Polygon {
    let scaled = poly.scale(width as f64 / model_size as f64, height as f64 / model_size as f64);
    standardize_polygon(&scaled, width, laterality)
}

pub fn standardize_annotations(
    ann: &AnnotationSet,
    width: usize,
    laterality: Laterality,
) -> AnnotationSet {
    let structures: Structures = ann
        .structures
        .map(|p| standardize_polygon(p, width, laterality));
    AnnotationSet {
        image_id: ann.image_id.clone(),
        version: ann.version,
        structures,
    }
}

/// Bilinear resize with half-pixel centers (no corner alignment).
pub fn resize_bilinear<T>(img: ArrayView2<'_, T>, out_h: usize, out_w: usize) -> Array2<f32>
where
    T: Copy + Into<f64>,
{
    let (in_h, in_w) = img.dim();
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|d| {
                let src = ((d as f64 + 0.5) * inp as f64 / out as f64 - 0.5)
                    .clamp(0.0, (inp - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let rows = taps(out_h, in_h);
    let cols = taps(out_w, in_w);
    Array2::from_shape_fn((out_h, out_w), |(r, c)| {
        let (r0, r1, wr) = rows[r];
        let (c0, c1, wc) = cols[c];
        let at = |y: usize, x: usize| -> f64 { img[[y, x]].into() };
        let top = at(r0, c0) * (1.0 - wc) + at(r0, c1) * wc;
        let bottom = at(r1, c0) * (1.0 - wc) + at(r1, c1) * wc;
        (top * (1.0 - wr) + bottom * wr) as f32
    })
}

/// Nearest-neighbour resize; introduces no values absent from the input.
pub fn resize_nearest<T: Copy>(img: ArrayView2<'_, T>, out_h: usize, out_w: usize) -> Array2<T> {
    let (in_h, in_w) = img.dim();
    let src = |d: usize, out: usize, inp: usize| (((2 * d + 1) * inp) / (2 * out)).min(inp - 1);
    let rows: Vec<usize> = (0..out_h).map(|r| src(r, out_h, in_h)).collect();
    let cols: Vec<usize> = (0..out_w).map(|c| src(c, out_w, in_w)).collect();
    Array2::from_shape_fn((out_h, out_w), |(r, c)| img[[rows[r], cols[c]]])
}

/// Square model input in `[0, 1]`, plain resize (aspect ratio not kept).
pub fn resize_image_for_model<T>(img: ArrayView2<'_, T>, model_size: usize) -> Array2<f32>
where
    T: Copy + Into<f64>,
{
    resize_bilinear(img, model_size, model_size).mapv(|v| v.clamp(0.0, 1.0))
}

pub fn resize_labels_for_model(labels: &LabelMap, model_size: usize) -> LabelMap {
    LabelMap::new(resize_nearest(labels.codes().view(), model_size, model_size))
        .expect("nearest resize preserves codes")
}

/// Output of the full preparation chain.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    /// `model_size x model_size`, canonical orientation, values in `[0, 1]`.
    pub model_input: Array2<f32>,
    /// Original geometry and orientation, 8-bit.
    pub display: Array2<u8>,
}

/// The 8-bit display image: normalize, equalize, rescale.
pub fn display_image(record: &ImageRecord, config: &PreprocConfig) -> Result<Array2<u8>, PreprocessError> {
    config.validate()?;
    let normalized = percentile_normalize(record.pixels.view(), config.p_low, config.p_high)?;
    let equalized = clahe(normalized.view(), config)?;
    Ok(rescale_to_bytes(equalized.view()))
}

/// Full chain: display image, then `/255`, flip for left breasts and resize.
pub fn preprocess_pipeline(
    record: &ImageRecord,
    config: &PreprocConfig,
) -> Result<Preprocessed, PreprocessError> {
    let display = display_image(record, config)?;
    let canonical = standardize_orientation(display.view(), record.laterality);
    let unit = canonical.mapv(|v| v as f64 / 255.0);
    let model_input = resize_image_for_model(unit.view(), config.model_size);
    Ok(Preprocessed {
        model_input,
        display,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::View;
    use ndarray::array;
    use proptest::prelude::*;

    fn oracle_percentile(values: &[i64], q: f64) -> f64 {
        let mut s = values.to_vec();
        s.sort();
        let pos = q / 100.0 * (s.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        s[lo] as f64 + (pos - lo as f64) * (s[hi] - s[lo]) as f64
    }

    #[test]
    fn constant_image_normalizes_to_zero() {
        let img = Array2::from_elem((4, 5), 1000u16);
        let out = percentile_normalize(img.view(), 2.0, 98.0).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn endpoints_map_to_unit_range() {
        let img = array![[0u16, 4095]];
        let out = percentile_normalize(img.view(), 0.0, 100.0).unwrap();
        assert_eq!(out, array![[0.0, 1.0]]);
    }

    #[test]
    fn ramp_matches_sort_and_interpolate_oracle() {
        let img = Array2::from_shape_fn((10, 10), |(r, c)| (r * 10 + c) as u16);
        let values: Vec<i64> = img.iter().map(|&v| v as i64).collect();
        // Oracle percentiles for 0..99: P2 = 1.98, P98 = 97.02.
        let lo = oracle_percentile(&values, 2.0);
        let hi = oracle_percentile(&values, 98.0);
        assert!((lo - 1.98).abs() < 1e-12 && (hi - 97.02).abs() < 1e-12);
        let out = percentile_normalize(img.view(), 2.0, 98.0).unwrap();
        for (&v, &o) in img.iter().zip(out.iter()) {
            let expected = ((v as f64 - lo) / (hi - lo)).clamp(0.0, 1.0);
            assert!((o - expected).abs() <= 1e-12, "{v}: {o} vs {expected}");
        }
    }

    #[test]
    fn empty_image_errors() {
        let img = Array2::<u16>::zeros((0, 3));
        assert_eq!(
            percentile_normalize(img.view(), 2.0, 98.0),
            Err(PreprocessError::EmptyImage)
        );
    }

    #[test]
    fn byte_rescale_rounding() {
        let out = rescale_to_bytes(array![[0.0, 1.0, 0.5, 0.499]].view());
        assert_eq!(out, array![[0u8, 255, 128, 127]]);
    }

    #[test]
    fn horizontal_flip() {
        let img = array![[1, 2, 3], [4, 5, 6]];
        assert_eq!(standardize_orientation(img.view(), Laterality::R), img);
        let flipped = standardize_orientation(img.view(), Laterality::L);
        assert_eq!(flipped, array![[3, 2, 1], [6, 5, 4]]);
        assert_eq!(standardize_orientation(flipped.view(), Laterality::L), img);
    }

    #[test]
    fn model_polygon_back_to_image() {
        use crate::types::Point;
        let poly = Polygon::new(vec![Point::new(0.0, 0.0), Point::new(16.0, 0.0), Point::new(16.0, 32.0)]).unwrap();
        let r = polygon_to_image(&poly, 64, 208, 256, Laterality::R);
        assert_eq!(r.vertices()[2], Point::new(52.0, 128.0));
        let l = polygon_to_image(&poly, 64, 208, 256, Laterality::L);
        assert_eq!(l.vertices()[0], Point::new(208.0, 0.0));
        assert_eq!(l.vertices()[1], Point::new(156.0, 0.0));
    }

    #[test]
    fn same_size_resize_is_identity() {
        let img = Array2::from_shape_fn((8, 8), |(r, c)| ((r * 8 + c) as f64) / 63.0);
        let out = resize_image_for_model(img.view(), 8);
        for (a, b) in img.iter().zip(out.iter()) {
            assert!((*a as f32 - b).abs() < 1e-6);
        }
    }

    #[test]
    fn nearest_resize_keeps_value_set() {
        let labels = LabelMap::new(array![[0u8, 4], [1, 2]]).unwrap();
        let up = resize_labels_for_model(&labels, 4);
        assert_eq!(
            up.codes(),
            &array![[0u8, 0, 4, 4], [0, 0, 4, 4], [1, 1, 2, 2], [1, 1, 2, 2]]
        );
        let constant = LabelMap::filled(7, 3, crate::types::StructureClass::Pectoral);
        let r = resize_labels_for_model(&constant, 5);
        assert!(r.codes().iter().all(|&c| c == 3));
    }

    #[test]
    fn constant_record_gives_zero_model_input() {
        let rec = ImageRecord::new(
            "a",
            "e",
            View::Cc,
            Laterality::L,
            0.1,
            Array2::from_elem((40, 30), 1234u16),
        );
        let cfg = PreprocConfig {
            model_size: 32,
            ..Default::default()
        };
        let out = preprocess_pipeline(&rec, &cfg).unwrap();
        assert_eq!(out.model_input.dim(), (32, 32));
        assert!(out.model_input.iter().all(|&v| v == 0.0));
        assert_eq!(out.display.dim(), (40, 30));
    }

    #[test]
    fn config_validation() {
        assert!(PreprocConfig::default().validate().is_ok());
        let bad = PreprocConfig {
            p_low: 50.0,
            p_high: 50.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = PreprocConfig {
            clahe_kernel_fraction: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn normalization_in_unit_range_and_shift_invariant(
            values in proptest::collection::vec(0u16..4096, 1..200),
            k in 0u16..4000,
        ) {
            let n = values.len();
            let img = Array2::from_shape_vec((1, n), values).unwrap();
            let shifted = img.mapv(|v| v + k);
            let a = percentile_normalize(img.view(), 2.0, 98.0).unwrap();
            let b = percentile_normalize(shifted.view(), 2.0, 98.0).unwrap();
            prop_assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert_eq!(a, b);
        }

        #[test]
        fn byte_rescale_is_monotone(mut v in proptest::collection::vec(0.0f64..=1.0, 2..100)) {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = v.len();
            let out = rescale_to_bytes(Array2::from_shape_vec((1, n), v).unwrap().view());
            prop_assert!(out.iter().zip(out.iter().skip(1)).all(|(a, b)| a <= b));
        }

        #[test]
        fn flip_is_involution_preserving_multiset(
            rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()
        ) {
            let img = Array2::from_shape_fn((rows, cols), |(r, c)| {
                (seed.wrapping_mul(31).wrapping_add((r * cols + c) as u64) % 17) as u16
            });
            let f = standardize_orientation(img.view(), Laterality::L);
            let mut a: Vec<u16> = img.iter().copied().collect();
            let mut b: Vec<u16> = f.iter().copied().collect();
            a.sort();
            b.sort();
            prop_assert_eq!(a, b);
            prop_assert_eq!(standardize_orientation(f.view(), Laterality::L), img);
        }
    }
}
