//! IoU metrics, per-structure report tables and prediction overlays.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use image::{ImageBuffer, Rgb, RgbImage};
use ndarray::{ArrayView2, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::argmax_labels;
use crate::sample::Sample;
use crate::types::{LabelMap, ProbabilityMaps, StructureClass, View, NUM_CLASSES};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("ShapeMismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("Model: {0}")]
    Model(String),
    #[error("EmptyTestSet: nothing to evaluate")]
    EmptyTestSet,
}

/// `|P & G| / |P | G|`; two empty masks score 1.
pub fn iou(pred: ArrayView2<'_, bool>, gt: ArrayView2<'_, bool>) -> Result<f64, EvalError> {
    if pred.dim() != gt.dim() {
        return Err(EvalError::ShapeMismatch(pred.dim(), gt.dim()));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    Zip::from(pred).and(gt).for_each(|&p, &g| {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    });
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Per-class IoU between two label maps, indexed by class code.
pub fn class_ious(pred: &LabelMap, gt: &LabelMap) -> Result<[f64; NUM_CLASSES], EvalError> {
    let (p, g) = (pred.codes(), gt.codes());
    if p.dim() != g.dim() {
        return Err(EvalError::ShapeMismatch(p.dim(), g.dim()));
    }
    let mut inter = [0usize; NUM_CLASSES];
    let mut union = [0usize; NUM_CLASSES];
    Zip::from(p).and(g).for_each(|&a, &b| {
        if a == b {
            inter[a as usize] += 1;
            union[a as usize] += 1;
        } else {
            union[a as usize] += 1;
            union[b as usize] += 1;
        }
    });
    Ok(std::array::from_fn(|c| {
        if union[c] == 0 {
            1.0
        } else {
            inter[c] as f64 / union[c] as f64
        }
    }))
}

/// A model as seen by evaluation and the service: a model-resolution input
/// in canonical orientation in, class probabilities out.
pub trait Segmenter: Send + Sync {
    fn predict(&self, request: SegmentRequest<'_>) -> Result<ProbabilityMaps, String>;

    fn predict_labels(&self, request: SegmentRequest<'_>) -> Result<LabelMap, String> {
        self.predict(request).map(|p| argmax_labels(&p))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SegmentRequest<'a> {
    pub image_id: &'a str,
    pub view: View,
    pub input: ArrayView2<'a, f32>,
}

impl<'a> SegmentRequest<'a> {
    pub fn for_sample(sample: &'a Sample) -> Self {
        Self {
            image_id: &sample.image_id,
            view: sample.view,
            input: sample.input.view(),
        }
    }
}

/// IoU of one image; `None` for structures absent from the ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub image_id: String,
    pub view: View,
    /// Indexed by class code; background is always present.
    pub iou: [Option<f64>; NUM_CLASSES],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Row label, typically the architecture name.
    pub label: String,
    /// Mean IoU per class code over the images where the class is present;
    /// `None` when no test image contains it.
    pub class_means: [Option<f64>; NUM_CLASSES],
    /// Mean of the available class means, background included.
    pub mean_all: f64,
    /// Mean over the four structures only, background excluded.
    pub mean_structures: f64,
    pub images: Vec<ImageScores>,
    /// Model and preprocessing settings that produced the numbers.
    pub fingerprint: BTreeMap<String, serde_json::Value>,
}

impl EvalReport {
    pub fn structure_mean(&self, class: StructureClass) -> Option<f64> {
        self.class_means[class.code() as usize]
    }

    /// Aggregates per-image scores computed from `(ground truth, prediction)` pairs.
    pub fn from_predictions<'a>(
        label: impl Into<String>,
        pairs: impl IntoIterator<Item = (&'a str, View, &'a LabelMap, &'a LabelMap)>,
        fingerprint: BTreeMap<String, serde_json::Value>,
    ) -> Result<Self, EvalError> {
        let mut images = Vec::new();
        for (image_id, view, gt, pred) in pairs {
            let ious = class_ious(pred, gt)?;
            let iou = std::array::from_fn(|c| {
                let present = c == 0 || gt.count(StructureClass::from_code(c as u8).expect("valid code")) > 0;
                present.then_some(ious[c])
            });
            images.push(ImageScores {
                image_id: image_id.to_string(),
                view,
                iou,
            });
        }
        if images.is_empty() {
            return Err(EvalError::EmptyTestSet);
        }
        let class_means: [Option<f64>; NUM_CLASSES] = std::array::from_fn(|c| {
            let vals: Vec<f64> = images.iter().filter_map(|s| s.iou[c]).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        });
        let mean_of = |codes: &[usize]| {
            let vals: Vec<f64> = codes.iter().filter_map(|&c| class_means[c]).collect();
            if vals.is_empty() {
                0.0
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        };
        Ok(Self {
            label: label.into(),
            class_means,
            mean_all: mean_of(&[0, 1, 2, 3, 4]),
            mean_structures: mean_of(&[1, 2, 3, 4]),
            images,
            fingerprint,
        })
    }
}

/// Runs the model on every sample and scores argmax predictions against the
/// sample labels.
pub fn evaluate<S: Segmenter + ?Sized>(
    model: &S,
    samples: &[Sample],
    label: impl Into<String>,
    fingerprint: BTreeMap<String, serde_json::Value>,
) -> Result<EvalReport, EvalError> {
    let preds = samples
        .iter()
        .map(|s| model.predict_labels(SegmentRequest::for_sample(s)).map_err(EvalError::Model))
        .collect::<Result<Vec<_>, _>>()?;
    EvalReport::from_predictions(
        label,
        samples
            .iter()
            .zip(&preds)
            .map(|(s, p)| (s.image_id.as_str(), s.view, &s.labels, p)),
        fingerprint,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Markdown,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            "csv" => Ok(ReportFormat::Csv),
            _ => Err(format!("unknown report format {s:?}")),
        }
    }
}

pub const REPORT_COLUMNS: [&str; 5] = ["Nipple", "Pectoral muscle", "Fibro tissue", "Fatty tissue", "Mean"];

fn report_cells(report: &EvalReport) -> [String; 5] {
    let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"));
    let [nipple, pectoral, fibro, fatty] = StructureClass::REPORTED.map(|c| cell(report.structure_mean(c)));
    [nipple, pectoral, fibro, fatty, cell(Some(report.mean_all))]
}

/// One row per report, with the structure columns in table order.
pub fn render_report(reports: &[EvalReport], format: ReportFormat) -> String {
    let mut out = String::new();
    match format {
        ReportFormat::Markdown => {
            writeln!(out, "| Architecture | {} |", REPORT_COLUMNS.join(" | ")).unwrap();
            writeln!(out, "|---|{}", "---:|".repeat(REPORT_COLUMNS.len())).unwrap();
            for r in reports {
                writeln!(out, "| {} | {} |", r.label, report_cells(r).join(" | ")).unwrap();
            }
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let mut header = vec!["Architecture"];
            header.extend(REPORT_COLUMNS);
            w.write_record(&header).unwrap();
            for r in reports {
                let mut row = vec![r.label.clone()];
                row.extend(report_cells(r));
                w.write_record(&row).unwrap();
            }
            out = String::from_utf8(w.into_inner().unwrap()).expect("csv is utf-8");
        }
    }
    out
}

/// Overlay colours by class code.
pub const PALETTE: [[u8; 3]; NUM_CLASSES] = [
    [0, 0, 0],
    [240, 200, 80],
    [220, 60, 60],
    [60, 120, 230],
    [70, 200, 90],
];

/// Display image, ground truth and prediction side by side.
pub fn render_overlay(display: ArrayView2<'_, u8>, gt: &LabelMap, pred: &LabelMap) -> Result<RgbImage, EvalError> {
    let (h, w) = display.dim();
    for m in [gt, pred] {
        if m.codes().dim() != (h, w) {
            return Err(EvalError::ShapeMismatch((h, w), m.codes().dim()));
        }
    }
    let mut img: RgbImage = ImageBuffer::new(3 * w as u32, h as u32);
    for ((r, c), &v) in display.indexed_iter() {
        img.put_pixel(c as u32, r as u32, Rgb([v, v, v]));
        img.put_pixel((w + c) as u32, r as u32, Rgb(PALETTE[gt.codes()[[r, c]] as usize]));
        img.put_pixel((2 * w + c) as u32, r as u32, Rgb(PALETTE[pred.codes()[[r, c]] as usize]));
    }
    Ok(img)
}

pub fn encode_png(img: &RgbImage) -> Vec<u8> {
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .expect("in-memory PNG encoding");
    bytes
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn labels(a: Array2<u8>) -> LabelMap {
        LabelMap::new(a).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = array![[true, true], [false, false]];
        assert_eq!(iou(a.view(), a.view()).unwrap(), 1.0);
        let b = array![[false, false], [true, true]];
        assert_eq!(iou(a.view(), b.view()).unwrap(), 0.0);
        let p = array![[true, true], [false, false]];
        let g = array![[false, true], [false, true]];
        assert!((iou(p.view(), g.view()).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let empty = Array2::from_elem((2, 2), false);
        assert_eq!(iou(empty.view(), empty.view()).unwrap(), 1.0);
        assert!(iou(empty.view(), Array2::from_elem((2, 3), false).view()).is_err());
    }

    #[test]
    fn class_ious_match_mask_iou() {
        let gt = labels(array![[0, 1, 1], [2, 4, 1]]);
        let pred = labels(array![[0, 1, 2], [2, 0, 1]]);
        let per = class_ious(&pred, &gt).unwrap();
        for c in StructureClass::ALL {
            let expected = iou(pred.mask(c).view(), gt.mask(c).view()).unwrap();
            assert_eq!(per[c.code() as usize], expected);
        }
    }

    #[test]
    fn absent_structures_are_skipped() {
        let gt_with = labels(array![[0, 1, 3], [2, 4, 1]]);
        let gt_without = labels(array![[0, 1, 1], [2, 4, 1]]);
        let pred_with = gt_with.clone();
        let pred_without = gt_without.clone();
        let one = EvalReport::from_predictions("m", [("a", View::Cc, &gt_with, &pred_with)], BTreeMap::new()).unwrap();
        let two = EvalReport::from_predictions(
            "m",
            [
                ("a", View::Cc, &gt_with, &pred_with),
                ("b", View::Cc, &gt_without, &pred_without),
            ],
            BTreeMap::new(),
        )
        .unwrap();
        assert_eq!(one.structure_mean(StructureClass::Pectoral), two.structure_mean(StructureClass::Pectoral));
        assert_eq!(two.images[1].iou[3], None);
        assert_eq!(two.mean_all, 1.0);
    }

    #[test]
    fn all_background_prediction() {
        let gt = labels(array![[0, 1, 1, 2], [0, 0, 4, 1]]);
        let pred = LabelMap::filled(2, 4, StructureClass::Background);
        let r = EvalReport::from_predictions("bg", [("a", View::Cc, &gt, &pred)], BTreeMap::new()).unwrap();
        assert_eq!(r.structure_mean(StructureClass::Fatty), Some(0.0));
        assert_eq!(r.structure_mean(StructureClass::Fibroglandular), Some(0.0));
        assert_eq!(r.structure_mean(StructureClass::Nipple), Some(0.0));
        assert_eq!(r.structure_mean(StructureClass::Pectoral), None);
        assert_eq!(r.class_means[0], Some(3.0 / 8.0));
    }

    #[test]
    fn report_has_table_columns() {
        let gt = labels(array![[0, 1, 3], [2, 4, 1]]);
        let r = EvalReport::from_predictions("UNet", [("a", View::Mlo, &gt, &gt)], BTreeMap::new()).unwrap();
        let md = render_report(std::slice::from_ref(&r), ReportFormat::Markdown);
        let lines: Vec<&str> = md.lines().collect();
        assert_eq!(lines[0], "| Architecture | Nipple | Pectoral muscle | Fibro tissue | Fatty tissue | Mean |");
        assert_eq!(lines[2], "| UNet | 1.00 | 1.00 | 1.00 | 1.00 | 1.00 |");
        let csv = render_report(&[r], ReportFormat::Csv);
        assert_eq!(
            csv,
            "Architecture,Nipple,Pectoral muscle,Fibro tissue,Fatty tissue,Mean\nUNet,1.00,1.00,1.00,1.00,1.00\n"
        );
    }

    #[test]
    fn overlay_panels() {
        let display = Array2::from_shape_fn((3, 4), |(r, c)| (r * 40 + c * 10) as u8);
        let gt = labels(array![[0, 1, 1, 2], [0, 3, 4, 1], [1, 1, 1, 1]]);
        let img = render_overlay(display.view(), &gt, &gt).unwrap();
        assert_eq!(img.dimensions(), (12, 3));
        for r in 0..3 {
            for c in 0..4 {
                assert_eq!(img.get_pixel(4 + c, r), img.get_pixel(8 + c, r));
            }
        }
        let empty = LabelMap::filled(3, 4, StructureClass::Background);
        let img = render_overlay(display.view(), &gt, &empty).unwrap();
        for r in 0..3 {
            for c in 8..12 {
                assert_eq!(img.get_pixel(c, r).0, PALETTE[0]);
            }
        }
    }
}
