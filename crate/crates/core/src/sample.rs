//! Model-resolution training/evaluation samples built from records and annotations.

use ndarray::Array2;
use thiserror::Error;

use crate::geometry::{rasterize_annotations, GeometryError};
use crate::preprocess::{preprocess_pipeline, resize_labels_for_model, standardize_labels, PreprocConfig, PreprocessError};
use crate::types::{AnnotationSet, ImageRecord, LabelMap, Laterality, View};

#[derive(Debug, Error)]
pub enum SampleError {
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// One image in canonical orientation at model resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image_id: String,
    pub exam_id: String,
    pub view: View,
    pub laterality: Laterality,
    /// Width and height of the source image.
    pub original_size: (usize, usize),
    pub input: Array2<f32>,
    pub labels: LabelMap,
}

/// Ground truth at model resolution: rasterize at full size, flip left
/// breasts, nearest-resize.
pub fn model_labels(record_width: usize, record_height: usize, laterality: Laterality, ann: &AnnotationSet, model_size: usize) -> Result<LabelMap, GeometryError> {
    let full = rasterize_annotations(ann, record_width, record_height)?;
    Ok(resize_labels_for_model(&standardize_labels(&full, laterality), model_size))
}

pub fn prepare_sample(record: &ImageRecord, ann: &AnnotationSet, config: &PreprocConfig) -> Result<Sample, SampleError> {
    let pre = preprocess_pipeline(record, config)?;
    let labels = model_labels(record.width, record.height, record.laterality, ann, config.model_size)?;
    Ok(Sample {
        image_id: record.image_id.clone(),
        exam_id: record.exam_id.clone(),
        view: record.view,
        laterality: record.laterality,
        original_size: (record.width, record.height),
        input: pre.model_input,
        labels,
    })
}
