//! Loading image records from DICOM or from 16-bit PNG files with JSON
//! sidecars, and scanning dataset directories.
//!
//! Dataset layout:
//!
//! ```text
//! root/images/<image_id>.png + <image_id>.json   (or <image_id>.dcm)
//! root/annotations/<image_id>.json
//! root/density.csv                               (image_id,density)
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use dicom_dictionary_std::tags;
use dicom_object::{DefaultDicomObject, OpenFileOptions};
use image::{DynamicImage, ImageBuffer, ImageReader, Luma};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsutil::write_atomic;
use crate::types::{
    AnnotationDocument, AnnotationSet, DensityClass, ImageMeta, ImageRecord, Laterality, View, MAX_RAW_VALUE,
};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("Io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("MissingMetadata: {0}")]
    MissingMetadata(String),
    #[error("InvalidMetadata: {field}: {reason}")]
    InvalidMetadata { field: String, reason: String },
    #[error("CorruptPixelData: {0}")]
    CorruptPixelData(String),
    #[error("ValueRangeError: pixel ({row}, {col}) = {value} outside [0, 4095]")]
    ValueRangeError { row: usize, col: usize, value: i64 },
    #[error("UnknownFormat: {0}")]
    UnknownFormat(PathBuf),
    #[error("DuplicateImageId: {0}")]
    DuplicateImageId(String),
    #[error("InvalidAnnotation: {path}: {reason}")]
    InvalidAnnotation { path: PathBuf, reason: String },
    #[error("InvalidDensity: {0}")]
    InvalidDensity(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceFormat {
    Dicom,
    Png16,
}

impl std::str::FromStr for SourceFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "dicom" | "dcm" => Ok(SourceFormat::Dicom),
            "png" | "png16" => Ok(SourceFormat::Png16),
            _ => Err(format!("unknown format {s:?} (expected dicom or png16)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StudySource {
    pub path: PathBuf,
    pub format: SourceFormat,
}

const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";

impl StudySource {
    /// Detects the format from the extension, falling back to magic bytes
    /// (`DICM` at offset 128, or the PNG signature).
    pub fn detect(path: impl Into<PathBuf>) -> Result<Self, IngestError> {
        let path = path.into();
        let ext = path
            .extension()
            .map(|e| e.to_string_lossy().to_ascii_lowercase())
            .unwrap_or_default();
        let format = match ext.as_str() {
            "dcm" | "dicom" => SourceFormat::Dicom,
            "png" => SourceFormat::Png16,
            _ => {
                let mut head = [0u8; 132];
                let mut f = fs::File::open(&path).map_err(io_err(&path))?;
                let n = f.read(&mut head).map_err(io_err(&path))?;
                if n >= 132 && &head[128..132] == b"DICM" {
                    SourceFormat::Dicom
                } else if head[..n].starts_with(PNG_MAGIC) {
                    SourceFormat::Png16
                } else {
                    return Err(IngestError::UnknownFormat(path));
                }
            }
        };
        Ok(Self { path, format })
    }

    pub fn with_format(path: impl Into<PathBuf>, format: SourceFormat) -> Self {
        Self {
            path: path.into(),
            format,
        }
    }

    pub fn image_id(&self) -> String {
        self.path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

/// Metadata stored next to a PNG image as `<image_id>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub exam_id: String,
    pub view: View,
    pub laterality: Laterality,
    pub pixel_spacing_mm: f64,
}

impl Sidecar {
    pub fn path_for(image_path: &Path) -> PathBuf {
        image_path.with_extension("json")
    }

    pub fn read(path: &Path) -> Result<Self, IngestError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| IngestError::InvalidMetadata {
            field: "sidecar".into(),
            reason: e.to_string(),
        })?;
        let field = |name: &str| -> Result<&serde_json::Value, IngestError> {
            value
                .get(name)
                .filter(|v| !v.is_null())
                .ok_or_else(|| IngestError::MissingMetadata(name.to_string()))
        };
        let string = |name: &str| -> Result<String, IngestError> {
            field(name)?
                .as_str()
                .map(str::to_owned)
                .ok_or_else(|| IngestError::InvalidMetadata {
                    field: name.into(),
                    reason: "expected a string".into(),
                })
        };
        let invalid = |name: &str, reason: String| IngestError::InvalidMetadata {
            field: name.into(),
            reason,
        };
        let exam_id = string("exam_id")?;
        let view = string("view")?.parse().map_err(|e: crate::types::ParseEnumError| invalid("view", e.to_string()))?;
        let laterality = string("laterality")?
            .parse()
            .map_err(|e: crate::types::ParseEnumError| invalid("laterality", e.to_string()))?;
        let pixel_spacing_mm = field("pixel_spacing_mm")?
            .as_f64()
            .ok_or_else(|| invalid("pixel_spacing_mm", "expected a number".into()))?;
        Ok(Self {
            exam_id,
            view,
            laterality,
            pixel_spacing_mm,
        })
    }
}

fn check_range(pixels: &Array2<i64>) -> Result<Array2<u16>, IngestError> {
    for ((row, col), &value) in pixels.indexed_iter() {
        if !(0..=MAX_RAW_VALUE as i64).contains(&value) {
            return Err(IngestError::ValueRangeError { row, col, value });
        }
    }
    Ok(pixels.mapv(|v| v as u16))
}

fn decode_png(path: &Path) -> Result<Array2<i64>, IngestError> {
    let img = ImageReader::open(path)
        .map_err(io_err(path))?
        .with_guessed_format()
        .map_err(io_err(path))?
        .decode()
        .map_err(|e| IngestError::CorruptPixelData(format!("{}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<i64> = match img {
        DynamicImage::ImageLuma16(buf) => buf.into_raw().into_iter().map(i64::from).collect(),
        DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(i64::from).collect(),
        other => {
            return Err(IngestError::CorruptPixelData(format!(
                "{}: expected single-channel grayscale, got {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    Array2::from_shape_vec((h, w), data).map_err(|e| IngestError::CorruptPixelData(e.to_string()))
}

fn load_png16(source: &StudySource) -> Result<ImageRecord, IngestError> {
    let sidecar = Sidecar::read(&Sidecar::path_for(&source.path))?;
    let pixels = check_range(&decode_png(&source.path)?)?;
    Ok(ImageRecord::new(
        source.image_id(),
        sidecar.exam_id,
        sidecar.view,
        sidecar.laterality,
        sidecar.pixel_spacing_mm,
        pixels,
    ))
}

fn dicom_str(obj: &DefaultDicomObject, tag: dicom_core::Tag) -> Option<String> {
    let elem = obj.element_opt(tag).ok().flatten()?;
    let s = elem.to_str().ok()?.trim().trim_end_matches('\0').trim().to_string();
    (!s.is_empty()).then_some(s)
}

fn dicom_uint(obj: &DefaultDicomObject, tag: dicom_core::Tag, name: &str) -> Result<u32, IngestError> {
    obj.element_opt(tag)
        .ok()
        .flatten()
        .ok_or_else(|| IngestError::MissingMetadata(name.into()))?
        .to_int::<u32>()
        .map_err(|e| IngestError::InvalidMetadata {
            field: name.into(),
            reason: e.to_string(),
        })
}

fn parse_dicom_view(s: &str) -> Result<View, IngestError> {
    match s.to_ascii_uppercase().as_str() {
        "MLO" | "ML" => Ok(View::Mlo),
        "CC" | "XCC" | "XCCL" | "XCCM" => Ok(View::Cc),
        other => Err(IngestError::InvalidMetadata {
            field: "view".into(),
            reason: format!("unsupported ViewPosition {other:?}"),
        }),
    }
}

/// Reads a native (uncompressed) single-frame grayscale DICOM image.
///
/// Tag mapping: view from ViewPosition (0018,5101); laterality from
/// ImageLaterality (0020,0062), else Laterality (0020,0060); spacing from the
/// first value of PixelSpacing (0028,0030), else ImagerPixelSpacing
/// (0018,1164); exam_id from StudyInstanceUID (0020,000D); image_id from the
/// file stem.
fn load_dicom(source: &StudySource) -> Result<ImageRecord, IngestError> {
    let obj = OpenFileOptions::new()
        .open_file(&source.path)
        .map_err(|e| IngestError::CorruptPixelData(format!("{}: {e}", source.path.display())))?;
    let view = parse_dicom_view(&dicom_str(&obj, tags::VIEW_POSITION).ok_or_else(|| IngestError::MissingMetadata("view".into()))?)?;
    let laterality_str = dicom_str(&obj, tags::IMAGE_LATERALITY)
        .or_else(|| dicom_str(&obj, tags::LATERALITY))
        .ok_or_else(|| IngestError::MissingMetadata("laterality".into()))?;
    let laterality: Laterality = laterality_str.parse().map_err(|e: crate::types::ParseEnumError| {
        IngestError::InvalidMetadata {
            field: "laterality".into(),
            reason: e.to_string(),
        }
    })?;
    let spacing = [tags::PIXEL_SPACING, tags::IMAGER_PIXEL_SPACING]
        .into_iter()
        .find_map(|tag| obj.element_opt(tag).ok().flatten()?.to_multi_float64().ok()?.first().copied())
        .ok_or_else(|| IngestError::MissingMetadata("pixel_spacing_mm".into()))?;
    let exam_id = dicom_str(&obj, tags::STUDY_INSTANCE_UID).ok_or_else(|| IngestError::MissingMetadata("exam_id".into()))?;

    let rows = dicom_uint(&obj, tags::ROWS, "rows")? as usize;
    let cols = dicom_uint(&obj, tags::COLUMNS, "columns")? as usize;
    let bits_allocated = dicom_uint(&obj, tags::BITS_ALLOCATED, "bits_allocated")?;
    let bits_stored = dicom_uint(&obj, tags::BITS_STORED, "bits_stored").unwrap_or(bits_allocated);
    let signed = dicom_uint(&obj, tags::PIXEL_REPRESENTATION, "pixel_representation").unwrap_or(0) == 1;
    let photometric = dicom_str(&obj, tags::PHOTOMETRIC_INTERPRETATION).unwrap_or_else(|| "MONOCHROME2".into());
    if !photometric.starts_with("MONOCHROME") {
        return Err(IngestError::CorruptPixelData(format!("unsupported photometric interpretation {photometric}")));
    }
    let bytes = obj
        .element(tags::PIXEL_DATA)
        .map_err(|_| IngestError::CorruptPixelData("no pixel data".into()))?
        .to_bytes()
        .map_err(|e| IngestError::CorruptPixelData(format!("encapsulated or unreadable pixel data: {e}")))?;
    let n = rows * cols;
    let values: Vec<i64> = match bits_allocated {
        8 if bytes.len() >= n => bytes[..n]
            .iter()
            .map(|&b| if signed { b as i8 as i64 } else { b as i64 })
            .collect(),
        16 if bytes.len() >= 2 * n => bytes[..2 * n]
            .chunks_exact(2)
            .map(|c| {
                let raw = u16::from_le_bytes([c[0], c[1]]);
                if signed {
                    raw as i16 as i64
                } else {
                    raw as i64
                }
            })
            .collect(),
        8 | 16 => {
            return Err(IngestError::CorruptPixelData(format!(
                "pixel data has {} bytes, expected {rows}x{cols} at {bits_allocated} bits",
                bytes.len()
            )))
        }
        other => return Err(IngestError::CorruptPixelData(format!("unsupported BitsAllocated {other}"))),
    };
    let mut pixels = Array2::from_shape_vec((rows, cols), values).map_err(|e| IngestError::CorruptPixelData(e.to_string()))?;
    if photometric == "MONOCHROME1" {
        let max = (1i64 << bits_stored.min(16)) - 1;
        pixels.mapv_inplace(|v| max - v);
    }
    Ok(ImageRecord::new(
        source.image_id(),
        exam_id,
        view,
        laterality,
        spacing,
        check_range(&pixels)?,
    ))
}

pub fn load_record(source: &StudySource) -> Result<ImageRecord, IngestError> {
    let record = match source.format {
        SourceFormat::Dicom => load_dicom(source)?,
        SourceFormat::Png16 => load_png16(source)?,
    };
    if let Some(v) = crate::types::validate_record(&record).into_iter().next() {
        return Err(IngestError::InvalidMetadata {
            field: v.field,
            reason: v.rule,
        });
    }
    Ok(record)
}

pub fn load_path(path: impl Into<PathBuf>) -> Result<ImageRecord, IngestError> {
    load_record(&StudySource::detect(path)?)
}

/// Writes `record` as `<dir>/<image_id>.png` (16-bit grayscale) plus its sidecar.
pub fn save_png16(record: &ImageRecord, dir: &Path) -> Result<PathBuf, IngestError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(format!("{}.png", record.image_id));
    let data: Vec<u16> = record.pixels.iter().copied().collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(record.width as u32, record.height as u32, data)
            .ok_or_else(|| IngestError::CorruptPixelData("pixel buffer does not match shape".into()))?;
    let mut png = Vec::new();
    buf.write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)
        .map_err(|e| IngestError::CorruptPixelData(e.to_string()))?;
    write_atomic(&path, &png).map_err(io_err(&path))?;
    let sidecar = Sidecar {
        exam_id: record.exam_id.clone(),
        view: record.view,
        laterality: record.laterality,
        pixel_spacing_mm: record.pixel_spacing_mm,
    };
    let sidecar_path = Sidecar::path_for(&path);
    let json = serde_json::to_vec_pretty(&sidecar).expect("sidecar serializes");
    write_atomic(&sidecar_path, &json).map_err(io_err(&sidecar_path))?;
    Ok(path)
}

/// Image dimensions and metadata without decoding pixels where possible.
fn read_meta(source: &StudySource) -> Result<ImageMeta, IngestError> {
    match source.format {
        SourceFormat::Png16 => {
            let sidecar = Sidecar::read(&Sidecar::path_for(&source.path))?;
            let (w, h) = image::image_dimensions(&source.path)
                .map_err(|e| IngestError::CorruptPixelData(format!("{}: {e}", source.path.display())))?;
            Ok(ImageMeta {
                image_id: source.image_id(),
                exam_id: sidecar.exam_id,
                view: sidecar.view,
                laterality: sidecar.laterality,
                pixel_spacing_mm: sidecar.pixel_spacing_mm,
                width: w as usize,
                height: h as usize,
            })
        }
        SourceFormat::Dicom => load_dicom(source).map(|r| r.meta()),
    }
}

pub fn read_annotation(path: &Path) -> Result<AnnotationDocument, IngestError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| IngestError::InvalidAnnotation {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn write_annotation(path: &Path, doc: &AnnotationDocument) -> Result<(), IngestError> {
    let json = serde_json::to_vec_pretty(doc).expect("annotation serializes");
    write_atomic(path, &json).map_err(io_err(path))
}

#[derive(Debug, Deserialize, Serialize)]
struct DensityRow {
    image_id: String,
    density: String,
}

pub fn read_density_csv(path: &Path) -> Result<HashMap<String, DensityClass>, IngestError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| IngestError::InvalidDensity(e.to_string()))?;
    let mut out = HashMap::new();
    for row in reader.deserialize::<DensityRow>() {
        let row = row.map_err(|e| IngestError::InvalidDensity(e.to_string()))?;
        let density = row
            .density
            .parse()
            .map_err(|e: crate::types::ParseEnumError| IngestError::InvalidDensity(e.to_string()))?;
        out.insert(row.image_id, density);
    }
    Ok(out)
}

pub fn write_density_csv(path: &Path, rows: &[(String, DensityClass)]) -> Result<(), IngestError> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for (image_id, density) in rows {
        writer
            .serialize(DensityRow {
                image_id: image_id.clone(),
                density: density.to_string(),
            })
            .map_err(|e| IngestError::InvalidDensity(e.to_string()))?;
    }
    let bytes = writer.into_inner().map_err(|e| IngestError::InvalidDensity(e.to_string()))?;
    write_atomic(path, &bytes).map_err(io_err(path))
}

/// One image found by [`scan_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    pub meta: ImageMeta,
    pub source: StudySource,
    pub annotation: Option<AnnotationSet>,
    pub density: DensityClass,
}

impl DatasetEntry {
    pub fn is_annotated(&self) -> bool {
        self.annotation.is_some()
    }
}

/// Lists every image under `root/images`, sorted by `(exam_id, image_id)`.
///
/// Density comes from `density.csv` when listed there, else from the
/// annotation file, else `ND`. A missing root or `images/` directory is an
/// empty dataset.
pub fn scan_dataset(root: &Path) -> Result<Vec<DatasetEntry>, IngestError> {
    scan_dataset_with_format(root, None)
}

pub fn scan_dataset_with_format(root: &Path, format: Option<SourceFormat>) -> Result<Vec<DatasetEntry>, IngestError> {
    let images_dir = root.join("images");
    if !images_dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(&images_dir)
        .map_err(io_err(&images_dir))?
        .map(|e| e.map(|e| e.path()).map_err(io_err(&images_dir)))
        .collect::<Result<_, _>>()?;
    paths.sort();

    let mut sources: BTreeMap<String, StudySource> = BTreeMap::new();
    for path in paths {
        if !path.is_file() {
            continue;
        }
        let ext = path
            .extension()
            .map(|e| e.to_string_lossy().to_ascii_lowercase())
            .unwrap_or_default();
        if ext == "json" || path.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.')) {
            continue;
        }
        let source = match format {
            Some(f) => StudySource::with_format(path, f),
            None => match StudySource::detect(path) {
                Ok(s) => s,
                Err(IngestError::UnknownFormat(_)) => continue,
                Err(e) => return Err(e),
            },
        };
        let id = source.image_id();
        if sources.insert(id.clone(), source).is_some() {
            return Err(IngestError::DuplicateImageId(id));
        }
    }

    let density_path = root.join("density.csv");
    let densities = if density_path.is_file() {
        read_density_csv(&density_path)?
    } else {
        HashMap::new()
    };

    let mut entries = Vec::with_capacity(sources.len());
    for (id, source) in sources {
        let meta = read_meta(&source)?;
        let ann_path = root.join("annotations").join(format!("{id}.json"));
        let doc = if ann_path.is_file() {
            Some(read_annotation(&ann_path)?)
        } else {
            None
        };
        let density = densities
            .get(&id)
            .copied()
            .or(doc.as_ref().map(|d| d.density))
            .unwrap_or(DensityClass::Nd);
        entries.push(DatasetEntry {
            meta,
            source,
            annotation: doc.map(|d| d.annotation_set()),
            density,
        });
    }
    entries.sort_by(|a, b| (&a.meta.exam_id, &a.meta.image_id).cmp(&(&b.meta.exam_id, &b.meta.image_id)));
    Ok(entries)
}
