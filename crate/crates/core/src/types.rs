//! Shared domain types: image records, structure classes, polygons,
//! annotation sets, label maps and probability maps.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest raw intensity a 12-bit mammogram may carry.
pub const MAX_RAW_VALUE: u16 = 4095;

/// Number of segmentation classes, background included.
pub const NUM_CLASSES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum View {
    #[serde(rename = "MLO")]
    Mlo,
    #[serde(rename = "CC")]
    Cc,
}

impl View {
    pub const ALL: [View; 2] = [View::Mlo, View::Cc];

    pub fn as_str(self) -> &'static str {
        match self {
            View::Mlo => "MLO",
            View::Cc => "CC",
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for View {
    type Err = ParseEnumError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "MLO" => Ok(View::Mlo),
            "CC" => Ok(View::Cc),
            _ => Err(ParseEnumError::new("view", s)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Laterality {
    L,
    R,
}

impl fmt::Display for Laterality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Laterality::L => "L",
            Laterality::R => "R",
        })
    }
}

impl FromStr for Laterality {
    type Err = ParseEnumError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "L" | "LEFT" => Ok(Laterality::L),
            "R" | "RIGHT" => Ok(Laterality::R),
            _ => Err(ParseEnumError::new("laterality", s)),
        }
    }
}

/// Breast density category. `ND` marks exams without a density assessment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DensityClass {
    A,
    B,
    C,
    D,
    #[serde(rename = "ND", alias = "N/D")]
    Nd,
}

impl DensityClass {
    pub const ALL: [DensityClass; 5] = [
        DensityClass::A,
        DensityClass::B,
        DensityClass::C,
        DensityClass::D,
        DensityClass::Nd,
    ];
    pub const KNOWN: [DensityClass; 4] = [
        DensityClass::A,
        DensityClass::B,
        DensityClass::C,
        DensityClass::D,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DensityClass::A => "A",
            DensityClass::B => "B",
            DensityClass::C => "C",
            DensityClass::D => "D",
            DensityClass::Nd => "ND",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_known(self) -> bool {
        self != DensityClass::Nd
    }
}

impl fmt::Display for DensityClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DensityClass {
    type Err = ParseEnumError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(DensityClass::A),
            "B" => Ok(DensityClass::B),
            "C" => Ok(DensityClass::C),
            "D" => Ok(DensityClass::D),
            "ND" | "N/D" | "" => Ok(DensityClass::Nd),
            _ => Err(ParseEnumError::new("density", s)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid {kind} value {value:?}")]
pub struct ParseEnumError {
    pub kind: &'static str,
    pub value: String,
}

impl ParseEnumError {
    fn new(kind: &'static str, value: &str) -> Self {
        Self {
            kind,
            value: value.to_string(),
        }
    }
}

/// Segmentation classes with their persisted integer codes.
///
/// The code doubles as the label-map value, the one-hot plane index and the
/// model output channel. Ascending code is also the rasterization priority.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum StructureClass {
    Background = 0,
    Fatty = 1,
    Fibroglandular = 2,
    Pectoral = 3,
    Nipple = 4,
}

impl StructureClass {
    pub const ALL: [StructureClass; NUM_CLASSES] = [
        StructureClass::Background,
        StructureClass::Fatty,
        StructureClass::Fibroglandular,
        StructureClass::Pectoral,
        StructureClass::Nipple,
    ];

    /// The four annotated structures, in report column order.
    pub const REPORTED: [StructureClass; 4] = [
        StructureClass::Nipple,
        StructureClass::Pectoral,
        StructureClass::Fibroglandular,
        StructureClass::Fatty,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            StructureClass::Background => "background",
            StructureClass::Fatty => "fatty",
            StructureClass::Fibroglandular => "fibroglandular",
            StructureClass::Pectoral => "pectoral",
            StructureClass::Nipple => "nipple",
        }
    }
}

impl fmt::Display for StructureClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A single invariant failure reported by validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl Violation {
    pub fn new(field: impl Into<String>, rule: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            rule: rule.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

/// Metadata of one mammography image, without its pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub image_id: String,
    pub exam_id: String,
    pub view: View,
    pub laterality: Laterality,
    pub pixel_spacing_mm: f64,
    pub width: usize,
    pub height: usize,
}

/// One mammography image with raw 12-bit intensities, indexed `[row, col]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub exam_id: String,
    pub view: View,
    pub laterality: Laterality,
    pub pixel_spacing_mm: f64,
    pub width: usize,
    pub height: usize,
    pub pixels: Array2<u16>,
}

impl ImageRecord {
    /// Builds a record whose width/height are taken from the pixel array.
    pub fn new(
        image_id: impl Into<String>,
        exam_id: impl Into<String>,
        view: View,
        laterality: Laterality,
        pixel_spacing_mm: f64,
        pixels: Array2<u16>,
    ) -> Self {
        let (height, width) = pixels.dim();
        Self {
            image_id: image_id.into(),
            exam_id: exam_id.into(),
            view,
            laterality,
            pixel_spacing_mm,
            width,
            height,
            pixels,
        }
    }

    pub fn meta(&self) -> ImageMeta {
        ImageMeta {
            image_id: self.image_id.clone(),
            exam_id: self.exam_id.clone(),
            view: self.view,
            laterality: self.laterality,
            pixel_spacing_mm: self.pixel_spacing_mm,
            width: self.width,
            height: self.height,
        }
    }
}

/// Checks every `ImageRecord` invariant; an empty list means the record is valid.
pub fn validate_record(record: &ImageRecord) -> Vec<Violation> {
    let mut out = Vec::new();
    if record.width == 0 {
        out.push(Violation::new("width", "must be > 0"));
    }
    if record.height == 0 {
        out.push(Violation::new("height", "must be > 0"));
    }
    let (rows, cols) = record.pixels.dim();
    if rows != record.height || cols != record.width {
        out.push(Violation::new(
            "pixels",
            format!(
                "shape {rows}x{cols} does not match height x width {}x{}",
                record.height, record.width
            ),
        ));
    }
    if !(record.pixel_spacing_mm > 0.0 && record.pixel_spacing_mm.is_finite()) {
        out.push(Violation::new("pixel_spacing_mm", "must be > 0"));
    }
    let out_of_range = record.pixels.iter().filter(|&&v| v > MAX_RAW_VALUE).count();
    if out_of_range > 0 {
        out.push(Violation::new(
            "pixels",
            format!("{out_of_range} value(s) outside range [0, {MAX_RAW_VALUE}]"),
        ));
    }
    if record.image_id.is_empty() {
        out.push(Violation::new("image_id", "must not be empty"));
    }
    out
}

/// A point in image-pixel coordinates; pixel `(c, r)` covers `[c, c+1) x [r, r+1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

impl From<[f64; 2]> for Point {
    fn from([x, y]: [f64; 2]) -> Self {
        Self { x, y }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolygonError {
    #[error("polygon needs at least 3 vertices, got {0}")]
    TooFewVertices(usize),
    #[error("vertices {0} and {1} are identical")]
    DuplicateVertex(usize, usize),
    #[error("vertex {0} is not finite")]
    NonFinite(usize),
}

/// Closed polygon stored open-ended: the last vertex connects back to the first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Point>", into = "Vec<Point>")]
pub struct Polygon {
    vertices: Vec<Point>,
}

impl TryFrom<Vec<Point>> for Polygon {
    type Error = PolygonError;

    fn try_from(vertices: Vec<Point>) -> Result<Self, Self::Error> {
        Polygon::new(vertices)
    }
}

impl From<Polygon> for Vec<Point> {
    fn from(p: Polygon) -> Self {
        p.vertices
    }
}

impl Polygon {
    pub fn new(vertices: Vec<Point>) -> Result<Self, PolygonError> {
        if vertices.len() < 3 {
            return Err(PolygonError::TooFewVertices(vertices.len()));
        }
        let n = vertices.len();
        for (i, v) in vertices.iter().enumerate() {
            if !(v.x.is_finite() && v.y.is_finite()) {
                return Err(PolygonError::NonFinite(i));
            }
        }
        for i in 0..n {
            let j = (i + 1) % n;
            if vertices[i] == vertices[j] {
                return Err(PolygonError::DuplicateVertex(i, j));
            }
        }
        Ok(Self { vertices })
    }

    /// Builds a polygon after dropping consecutive duplicates, including a
    /// trailing vertex that repeats the first one.
    pub fn from_points_dedup(points: impl IntoIterator<Item = Point>) -> Result<Self, PolygonError> {
        let mut vertices: Vec<Point> = Vec::new();
        for p in points {
            if vertices.last() != Some(&p) {
                vertices.push(p);
            }
        }
        while vertices.len() > 1 && vertices.first() == vertices.last() {
            vertices.pop();
        }
        Self::new(vertices)
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// Edges as (start, end) pairs including the closing edge.
    pub fn edges(&self) -> impl Iterator<Item = (Point, Point)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    /// Unsigned shoelace area.
    pub fn area(&self) -> f64 {
        let twice: f64 = self.edges().map(|(a, b)| a.x * b.y - b.x * a.y).sum();
        twice.abs() / 2.0
    }

    pub fn bounds(&self) -> (Point, Point) {
        let mut lo = Point::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for v in &self.vertices {
            lo.x = lo.x.min(v.x);
            lo.y = lo.y.min(v.y);
            hi.x = hi.x.max(v.x);
            hi.y = hi.y.max(v.y);
        }
        (lo, hi)
    }

    /// Mirrors across the vertical image axis: `x -> width - x`.
    pub fn flip_horizontal(&self, width: f64) -> Polygon {
        Polygon {
            vertices: self
                .vertices
                .iter()
                .map(|p| Point::new(width - p.x, p.y))
                .collect(),
        }
    }

    pub fn scale(&self, sx: f64, sy: f64) -> Polygon {
        Polygon {
            vertices: self
                .vertices
                .iter()
                .map(|p| Point::new(p.x * sx, p.y * sy))
                .collect(),
        }
    }

    /// Clamps every vertex into `[0, width] x [0, height]`, then drops any
    /// consecutive duplicates that clamping created.
    pub fn clamped(&self, width: f64, height: f64) -> Result<Polygon, PolygonError> {
        Polygon::from_points_dedup(
            self.vertices
                .iter()
                .map(|p| Point::new(p.x.clamp(0.0, width), p.y.clamp(0.0, height))),
        )
    }

    /// True when two non-adjacent edges properly cross.
    pub fn self_intersects(&self) -> bool {
        let n = self.vertices.len();
        let edges: Vec<(Point, Point)> = self.edges().collect();
        for i in 0..n {
            for j in (i + 2)..n {
                if i == 0 && j == n - 1 {
                    continue;
                }
                if segments_cross(edges[i].0, edges[i].1, edges[j].0, edges[j].1) {
                    return true;
                }
            }
        }
        false
    }
}

fn orient(a: Point, b: Point, c: Point) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

fn segments_cross(p1: Point, p2: Point, q1: Point, q2: Point) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
}

/// The per-structure polygons of one image. Pectoral may be missing on CC views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Structures {
    pub fatty: Polygon,
    pub fibroglandular: Polygon,
    pub pectoral: Option<Polygon>,
    pub nipple: Polygon,
}

impl Structures {
    /// Polygons in rasterization order (lowest priority first).
    pub fn in_paint_order(&self) -> Vec<(StructureClass, &Polygon)> {
        let mut out = vec![
            (StructureClass::Fatty, &self.fatty),
            (StructureClass::Fibroglandular, &self.fibroglandular),
        ];
        if let Some(p) = &self.pectoral {
            out.push((StructureClass::Pectoral, p));
        }
        out.push((StructureClass::Nipple, &self.nipple));
        out
    }

    pub fn get(&self, class: StructureClass) -> Option<&Polygon> {
        match class {
            StructureClass::Background => None,
            StructureClass::Fatty => Some(&self.fatty),
            StructureClass::Fibroglandular => Some(&self.fibroglandular),
            StructureClass::Pectoral => self.pectoral.as_ref(),
            StructureClass::Nipple => Some(&self.nipple),
        }
    }

    pub fn map(&self, f: impl Fn(&Polygon) -> Polygon) -> Structures {
        Structures {
            fatty: f(&self.fatty),
            fibroglandular: f(&self.fibroglandular),
            pectoral: self.pectoral.as_ref().map(&f),
            nipple: f(&self.nipple),
        }
    }
}

/// Annotation polygons of one image plus the edit version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub image_id: String,
    pub version: u64,
    pub structures: Structures,
}

impl AnnotationSet {
    /// Checks the view-dependent invariants. Self-intersecting polygons are
    /// reported with a `warning:` rule prefix; they do not make the set invalid.
    pub fn validate(&self, view: View, width: usize, height: usize) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.structures.pectoral.is_none() && view == View::Mlo {
            out.push(Violation::new(
                "structures.pectoral",
                "may only be absent on CC views",
            ));
        }
        for (class, poly) in self.structures.in_paint_order() {
            let (lo, hi) = poly.bounds();
            if lo.x < 0.0 || lo.y < 0.0 || hi.x > width as f64 || hi.y > height as f64 {
                out.push(Violation::new(
                    format!("structures.{class}"),
                    format!("vertices must lie within [0, {width}] x [0, {height}]"),
                ));
            }
            if poly.self_intersects() {
                out.push(Violation::new(
                    format!("structures.{class}"),
                    "warning: polygon self-intersects",
                ));
            }
        }
        out
    }

    pub fn is_valid(&self, view: View, width: usize, height: usize) -> bool {
        self.validate(view, width, height)
            .iter()
            .all(|v| v.rule.starts_with("warning:"))
    }
}

/// The canonical per-image annotation file exchanged by the CLI, the
/// service and the browser client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationDocument {
    pub image_id: String,
    pub exam_id: String,
    pub view: View,
    pub laterality: Laterality,
    pub pixel_spacing_mm: f64,
    pub density: DensityClass,
    pub version: u64,
    pub structures: Structures,
}

impl AnnotationDocument {
    pub fn annotation_set(&self) -> AnnotationSet {
        AnnotationSet {
            image_id: self.image_id.clone(),
            version: self.version,
            structures: self.structures.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MapError {
    #[error("label code {code} at ({row}, {col}) is not a structure class")]
    CodeOutOfRange { code: u8, row: usize, col: usize },
    #[error("probability maps must have {NUM_CLASSES} planes, got {0}")]
    PlaneCount(usize),
    #[error("probabilities at ({row}, {col}) sum to {sum}")]
    NotNormalized { row: usize, col: usize, sum: f32 },
}

/// Per-pixel class codes, indexed `[row, col]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Array2<u8>", into = "Array2<u8>")]
pub struct LabelMap(Array2<u8>);

impl TryFrom<Array2<u8>> for LabelMap {
    type Error = MapError;

    fn try_from(a: Array2<u8>) -> Result<Self, Self::Error> {
        LabelMap::new(a)
    }
}

impl From<LabelMap> for Array2<u8> {
    fn from(l: LabelMap) -> Self {
        l.0
    }
}

impl LabelMap {
    pub fn new(codes: Array2<u8>) -> Result<Self, MapError> {
        if let Some(((row, col), &code)) = codes
            .indexed_iter()
            .find(|(_, &c)| c as usize >= NUM_CLASSES)
        {
            return Err(MapError::CodeOutOfRange { code, row, col });
        }
        Ok(Self(codes))
    }

    pub fn filled(height: usize, width: usize, class: StructureClass) -> Self {
        Self(Array2::from_elem((height, width), class.code()))
    }

    pub fn codes(&self) -> &Array2<u8> {
        &self.0
    }

    pub fn into_codes(self) -> Array2<u8> {
        self.0
    }

    pub fn width(&self) -> usize {
        self.0.ncols()
    }

    pub fn height(&self) -> usize {
        self.0.nrows()
    }

    pub fn get(&self, row: usize, col: usize) -> StructureClass {
        StructureClass::ALL[self.0[[row, col]] as usize]
    }

    /// Binary mask of one class.
    pub fn mask(&self, class: StructureClass) -> Array2<bool> {
        self.0.mapv(|c| c == class.code())
    }

    pub fn count(&self, class: StructureClass) -> usize {
        self.0.iter().filter(|&&c| c == class.code()).count()
    }

    /// Mutable access for painters inside the crate; codes stay in range
    /// because only `StructureClass` codes are written.
    pub(crate) fn codes_mut(&mut self) -> &mut Array2<u8> {
        &mut self.0
    }
}

/// `NUM_CLASSES` probability planes, indexed `[class, row, col]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityMaps(Array3<f32>);

impl ProbabilityMaps {
    /// Sum tolerance accepted at each pixel.
    pub const SUM_TOLERANCE: f32 = 1e-5;

    pub fn new(planes: Array3<f32>) -> Result<Self, MapError> {
        if planes.len_of(Axis(0)) != NUM_CLASSES {
            return Err(MapError::PlaneCount(planes.len_of(Axis(0))));
        }
        let sums = planes.sum_axis(Axis(0));
        if let Some(((row, col), &sum)) = sums
            .indexed_iter()
            .find(|(_, &s)| !((s - 1.0).abs() <= Self::SUM_TOLERANCE))
        {
            return Err(MapError::NotNormalized { row, col, sum });
        }
        Ok(Self(planes))
    }

    pub fn planes(&self) -> &Array3<f32> {
        &self.0
    }

    pub fn into_planes(self) -> Array3<f32> {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.len_of(Axis(1))
    }

    pub fn width(&self) -> usize {
        self.0.len_of(Axis(2))
    }
}
