//! Rasterization, one-hot encoding, Otsu thresholding and contour extraction.

pub mod contour;
pub mod otsu;
pub mod raster;

use thiserror::Error;

use crate::types::StructureClass;

pub use contour::{
    breast_contour_init, extract_contours, largest_contour, simplify_closed, Components,
    DEFAULT_SIMPLIFY_TOLERANCE_PX, MIN_COMPONENT_AREA_PX,
};
pub use otsu::{otsu_split, otsu_threshold, QuantizedHistogram, DEFAULT_OTSU_BINS};
pub use raster::{
    argmax_labels, fill_polygon, one_hot, rasterize_annotations, rasterize_annotations_with_margin,
    rasterize_polygon, DEFAULT_MARGIN_PX,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("PolygonOutOfBounds: {structure} vertex {index} at ({x}, {y})")]
    PolygonOutOfBounds {
        structure: StructureClass,
        index: usize,
        x: f64,
        y: f64,
    },
    #[error("CodeOutOfRange: label {code} not below {num_classes}")]
    CodeOutOfRange { code: u8, num_classes: usize },
    #[error("ClassCount: expected 5 classes, got {0}")]
    ClassCount(usize),
    #[error("DegenerateImage: fewer than two distinct intensities")]
    DegenerateImage,
    #[error("NoForeground: no foreground component above threshold")]
    NoForeground,
    #[error("InvalidBins: need at least 2 histogram bins, got {0}")]
    InvalidBins(usize),
}
