//! REST service for the annotation client: image delivery, versioned
//! annotation storage, Otsu breast-contour initialization and model
//! initialization.
//!
//! | method | path | |
//! |---|---|---|
//! | GET | `/images` | metadata of every image |
//! | GET | `/images/{id}?variant=raw\|display` | 16-bit raw or 8-bit display PNG |
//! | GET | `/annotations/{id}` | latest annotation document |
//! | PUT | `/annotations/{id}` | store an edit based on the current version |
//! | POST | `/init/breast-contour` | `{image_id}` |
//! | POST | `/init/predict` | `{image_id, run_id}` |
//! | GET | `/runs` | known runs |

pub mod init;
pub mod registry;
pub mod store;

use std::collections::BTreeMap;
use std::io::Cursor;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderName, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use image::{DynamicImage, ImageBuffer, ImageFormat, Luma};
use mammoseg_core::geometry::GeometryError;
use mammoseg_core::ingest::{load_record, scan_dataset, DatasetEntry, IngestError};
use mammoseg_core::preprocess::{display_image, PreprocConfig};
use mammoseg_core::{AnnotationDocument, ImageMeta, ImageRecord};
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

pub use init::{BreastContourInit, ModelInit, PartialStructures};
pub use registry::{RegisteredRun, RegistryError, RunRegistry};
pub use store::{AnnotationStore, StoreError};

pub const EDIT_LOG_FILE: &str = "annotation_edits.jsonl";
pub const DEFAULT_CONTOUR_TOLERANCE_PX: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub data_root: PathBuf,
    pub runs_root: Option<PathBuf>,
    pub max_concurrent_inferences: usize,
    /// Settings of the 8-bit display variant.
    pub display: PreprocConfig,
    /// Simplification tolerance of model contours, in model pixels.
    pub contour_tolerance_px: f64,
}

impl ServiceConfig {
    pub fn new(data_root: impl Into<PathBuf>) -> Self {
        Self {
            data_root: data_root.into(),
            runs_root: None,
            max_concurrent_inferences: 2,
            display: PreprocConfig::default(),
            contour_tolerance_px: DEFAULT_CONTOUR_TOLERANCE_PX,
        }
    }
}

/// JSON error body `{error, message}` with the matching status.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn unknown_image(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "UnknownImage", format!("no image {id}"))
    }

    fn invalid(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "InvalidAnnotation", message)
    }

    fn internal(message: impl ToString) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", message.to_string())
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: &'a str,
    message: &'a str,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.code,
            message: &self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::VersionConflict { .. } => Self::new(StatusCode::CONFLICT, "VersionConflict", e.to_string()),
            other => Self::internal(other),
        }
    }
}

impl From<IngestError> for ApiError {
    fn from(e: IngestError) -> Self {
        Self::internal(e)
    }
}

impl From<RegistryError> for ApiError {
    fn from(e: RegistryError) -> Self {
        match e {
            RegistryError::UnknownRun(_) => Self::new(StatusCode::NOT_FOUND, "UnknownRun", e.to_string()),
            other => Self::internal(other),
        }
    }
}

impl From<init::InitError> for ApiError {
    fn from(e: init::InitError) -> Self {
        match e {
            init::InitError::Geometry(GeometryError::DegenerateImage) => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "DegenerateImage", e.to_string())
            }
            init::InitError::Geometry(GeometryError::NoForeground) => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "NoForeground", e.to_string())
            }
            other => Self::internal(other),
        }
    }
}

pub struct AppState {
    images: BTreeMap<String, DatasetEntry>,
    pub store: AnnotationStore,
    pub runs: RunRegistry,
    inference: Semaphore,
    display: PreprocConfig,
    contour_tolerance_px: f64,
}

impl AppState {
    /// Scans `data_root` and opens the annotation store under
    /// `data_root/annotations`.
    pub fn open(config: &ServiceConfig) -> Result<Self, StoreError> {
        let images = scan_dataset(&config.data_root)?
            .into_iter()
            .map(|e| (e.meta.image_id.clone(), e))
            .collect();
        let store = AnnotationStore::open(
            &config.data_root.join("annotations"),
            &config.data_root.join(EDIT_LOG_FILE),
        )?;
        Ok(Self {
            images,
            store,
            runs: RunRegistry::new(config.runs_root.clone()),
            inference: Semaphore::new(config.max_concurrent_inferences.max(1)),
            display: config.display.clone(),
            contour_tolerance_px: config.contour_tolerance_px,
        })
    }

    pub fn meta(&self, image_id: &str) -> Option<&ImageMeta> {
        self.images.get(image_id).map(|e| &e.meta)
    }

    fn entry(&self, image_id: &str) -> Result<&DatasetEntry, ApiError> {
        self.images.get(image_id).ok_or_else(|| ApiError::unknown_image(image_id))
    }
}

type Shared = Arc<AppState>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)?
}

async fn load(state: &Shared, image_id: &str) -> Result<ImageRecord, ApiError> {
    let source = state.entry(image_id)?.source.clone();
    blocking(move || Ok(load_record(&source)?)).await
}

#[derive(Serialize)]
struct ImageListing<'a> {
    #[serde(flatten)]
    meta: &'a ImageMeta,
    annotation_version: u64,
}

async fn list_images(State(state): State<Shared>) -> Json<Vec<serde_json::Value>> {
    let out = state
        .images
        .values()
        .map(|e| {
            serde_json::to_value(ImageListing {
                meta: &e.meta,
                annotation_version: state.store.version(&e.meta.image_id),
            })
            .expect("listing serializes")
        })
        .collect();
    Json(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Raw,
    #[default]
    Display,
}

#[derive(Deserialize)]
struct ImageQuery {
    #[serde(default)]
    variant: Variant,
}

fn png_bytes(img: DynamicImage) -> Result<Vec<u8>, ApiError> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).map_err(ApiError::internal)?;
    Ok(out.into_inner())
}

async fn get_image(
    State(state): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<ImageQuery>,
) -> Result<Response, ApiError> {
    let record = load(&state, &id).await?;
    let display = state.display.clone();
    let (meta, bytes) = blocking(move || {
        let (w, h) = (record.width as u32, record.height as u32);
        let img = match q.variant {
            Variant::Raw => DynamicImage::ImageLuma16(
                ImageBuffer::<Luma<u16>, _>::from_raw(w, h, record.pixels.iter().copied().collect())
                    .expect("pixel count matches"),
            ),
            Variant::Display => {
                let d = display_image(&record, &display).map_err(ApiError::internal)?;
                DynamicImage::ImageLuma8(
                    ImageBuffer::<Luma<u8>, _>::from_raw(w, h, d.iter().copied().collect()).expect("pixel count matches"),
                )
            }
        };
        Ok((record.meta(), png_bytes(img)?))
    })
    .await?;
    let headers = [
        (header::CONTENT_TYPE, "image/png".to_string()),
        (HeaderName::from_static("x-image-id"), meta.image_id),
        (HeaderName::from_static("x-view"), meta.view.to_string()),
        (HeaderName::from_static("x-laterality"), meta.laterality.to_string()),
        (HeaderName::from_static("x-width"), meta.width.to_string()),
        (HeaderName::from_static("x-height"), meta.height.to_string()),
        (HeaderName::from_static("x-pixel-spacing-mm"), meta.pixel_spacing_mm.to_string()),
    ];
    let mut response = bytes.into_response();
    for (name, value) in headers {
        let value = HeaderValue::from_str(&value).map_err(ApiError::internal)?;
        response.headers_mut().insert(name, value);
    }
    Ok(response)
}

async fn get_annotation(State(state): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Json<AnnotationDocument>, ApiError> {
    state.entry(&id)?;
    state
        .store
        .get(&id)
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "NoAnnotation", format!("{id} has no annotation yet")))
}

/// Schema, identity and polygon checks; polygons are clamped to the image.
fn check_edit(meta: &ImageMeta, body: &[u8]) -> Result<AnnotationDocument, ApiError> {
    let mut doc: AnnotationDocument = serde_json::from_slice(body).map_err(|e| ApiError::invalid(e.to_string()))?;
    if doc.image_id != meta.image_id {
        return Err(ApiError::invalid(format!("body image_id {} does not match {}", doc.image_id, meta.image_id)));
    }
    if doc.exam_id != meta.exam_id || doc.view != meta.view || doc.laterality != meta.laterality {
        return Err(ApiError::invalid("exam_id, view and laterality must match the image"));
    }
    let (w, h) = (meta.width as f64, meta.height as f64);
    let clamp = |p: &mammoseg_core::Polygon| {
        p.clamped(w, h)
            .map_err(|e| ApiError::invalid(format!("after clamping to the image: {e}")))
    };
    let s = &doc.structures;
    doc.structures = mammoseg_core::Structures {
        fatty: clamp(&s.fatty)?,
        fibroglandular: clamp(&s.fibroglandular)?,
        pectoral: s.pectoral.as_ref().map(clamp).transpose()?,
        nipple: clamp(&s.nipple)?,
    };
    let errors: Vec<String> = doc
        .annotation_set()
        .validate(meta.view, meta.width, meta.height)
        .into_iter()
        .filter(|v| !v.rule.starts_with("warning:"))
        .map(|v| v.to_string())
        .collect();
    if !errors.is_empty() {
        return Err(ApiError::invalid(errors.join("; ")));
    }
    Ok(doc)
}

async fn put_annotation(
    State(state): State<Shared>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<AnnotationDocument>, ApiError> {
    let meta = state.entry(&id)?.meta.clone();
    let doc = check_edit(&meta, &body)?;
    let st = state.clone();
    let stored = blocking(move || Ok(st.store.put(doc)?)).await?;
    tracing::info!(image_id = %stored.image_id, version = stored.version, "annotation stored");
    Ok(Json(stored))
}

fn parse_json<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "InvalidRequest", e.to_string()))
}

#[derive(Deserialize)]
struct BreastRequest {
    image_id: String,
}

async fn init_breast(State(state): State<Shared>, body: Bytes) -> Result<Json<BreastContourInit>, ApiError> {
    let req: BreastRequest = parse_json(&body)?;
    let record = load(&state, &req.image_id).await?;
    Ok(Json(blocking(move || Ok(init::breast_init(&record)?)).await?))
}

#[derive(Deserialize)]
struct PredictRequest {
    image_id: String,
    run_id: String,
}

async fn init_predict(State(state): State<Shared>, body: Bytes) -> Result<Json<ModelInit>, ApiError> {
    let req: PredictRequest = parse_json(&body)?;
    let meta = state.entry(&req.image_id)?.meta.clone();
    let st = state.clone();
    let run_id = req.run_id.clone();
    let run = blocking(move || Ok(st.runs.get(&run_id)?)).await?;
    if run.view != meta.view {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "ViewMismatch",
            format!("run {} was trained on {} images, {} is {}", run.id, run.view, meta.image_id, meta.view),
        ));
    }
    let record = load(&state, &req.image_id).await?;
    let _permit = state.inference.acquire().await.map_err(ApiError::internal)?;
    let tolerance = state.contour_tolerance_px;
    let structures = blocking(move || {
        let (_, s) = init::predict_structures(&record, run.model.as_ref(), &run.preprocess, tolerance)?;
        Ok(s)
    })
    .await?;
    Ok(Json(ModelInit {
        image_id: req.image_id,
        run_id: req.run_id,
        provenance: init::PROVENANCE_MODEL.into(),
        structures,
    }))
}

async fn list_runs(State(state): State<Shared>) -> Json<Vec<registry::RunInfo>> {
    Json(state.runs.list())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/images", get(list_images))
        .route("/images/{id}", get(get_image))
        .route("/annotations/{id}", get(get_annotation).put(put_annotation))
        .route("/init/breast-contour", post(init_breast))
        .route("/init/predict", post(init_predict))
        .route("/runs", get(list_runs))
        .with_state(state)
}

/// Serves until Ctrl-C.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
