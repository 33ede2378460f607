//! Contour initializations offered to annotators.

use mammoseg_core::evaluation::{SegmentRequest, Segmenter};
use mammoseg_core::geometry::{breast_contour_init, largest_contour, GeometryError};
use mammoseg_core::preprocess::{polygon_to_image, preprocess_pipeline, PreprocConfig, PreprocessError};
use mammoseg_core::{ImageRecord, LabelMap, Laterality, Polygon, StructureClass};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PROVENANCE_OTSU: &str = "otsu";
pub const PROVENANCE_MODEL: &str = "model";

#[derive(Debug, Error)]
pub enum InitError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error("Model: {0}")]
    Model(String),
}

/// Structures of a model initialization; classes without pixels are absent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PartialStructures {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fatty: Option<Polygon>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fibroglandular: Option<Polygon>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pectoral: Option<Polygon>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nipple: Option<Polygon>,
}

impl PartialStructures {
    pub fn get(&self, class: StructureClass) -> Option<&Polygon> {
        match class {
            StructureClass::Background => None,
            StructureClass::Fatty => self.fatty.as_ref(),
            StructureClass::Fibroglandular => self.fibroglandular.as_ref(),
            StructureClass::Pectoral => self.pectoral.as_ref(),
            StructureClass::Nipple => self.nipple.as_ref(),
        }
    }

    fn slot(&mut self, class: StructureClass) -> Option<&mut Option<Polygon>> {
        match class {
            StructureClass::Background => None,
            StructureClass::Fatty => Some(&mut self.fatty),
            StructureClass::Fibroglandular => Some(&mut self.fibroglandular),
            StructureClass::Pectoral => Some(&mut self.pectoral),
            StructureClass::Nipple => Some(&mut self.nipple),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreastContourInit {
    pub image_id: String,
    pub structure: StructureClass,
    pub provenance: String,
    pub polygon: Polygon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInit {
    pub image_id: String,
    pub run_id: String,
    pub provenance: String,
    pub structures: PartialStructures,
}

pub fn breast_init(record: &ImageRecord) -> Result<BreastContourInit, InitError> {
    Ok(BreastContourInit {
        image_id: record.image_id.clone(),
        structure: StructureClass::Fatty,
        provenance: PROVENANCE_OTSU.into(),
        polygon: breast_contour_init(record)?,
    })
}

/// Largest-component contour of every class in a canonical square label
/// map, mapped back to source image coordinates. `tolerance` is the
/// simplification tolerance in model pixels.
pub fn structures_from_labels(
    labels: &LabelMap,
    width: usize,
    height: usize,
    laterality: Laterality,
    tolerance: f64,
) -> PartialStructures {
    let size = labels.width();
    let mut out = PartialStructures::default();
    for class in StructureClass::ALL.into_iter().skip(1) {
        let poly = largest_contour(labels.mask(class).view(), tolerance)
            .map(|p| polygon_to_image(&p, size, width, height, laterality))
            .and_then(|p| p.clamped(width as f64, height as f64).ok());
        if let Some(slot) = out.slot(class) {
            *slot = poly;
        }
    }
    out
}

/// Preprocess, segment and contour one image. Also returns the model-space
/// argmax the contours were traced from.
pub fn predict_structures(
    record: &ImageRecord,
    model: &dyn Segmenter,
    config: &PreprocConfig,
    tolerance: f64,
) -> Result<(LabelMap, PartialStructures), InitError> {
    let pre = preprocess_pipeline(record, config)?;
    let labels = model
        .predict_labels(SegmentRequest {
            image_id: &record.image_id,
            view: record.view,
            input: pre.model_input.view(),
        })
        .map_err(InitError::Model)?;
    let structures = structures_from_labels(&labels, record.width, record.height, record.laterality, tolerance);
    Ok((labels, structures))
}
