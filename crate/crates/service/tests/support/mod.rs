//! Dataset fixture, an identity segmenter and request helpers for the
//! service tests.
#![allow(dead_code)]

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use mammoseg_core::evaluation::{SegmentRequest, Segmenter};
use mammoseg_core::geometry::one_hot;
use mammoseg_core::ingest::{save_png16, write_annotation};
use mammoseg_core::sample::model_labels;
use mammoseg_core::testkit::{generate_phantom, PectoralShape, Phantom, PhantomParams};
use mammoseg_core::{AnnotationDocument, DensityClass, ImageRecord, LabelMap, Laterality, ProbabilityMaps, View};
use mammoseg_service::{router, AppState, RegisteredRun, ServiceConfig};
use ndarray::Array2;
use tower::ServiceExt;

pub const MODEL_SIZE: usize = 128;

/// Four phantoms (MLO/CC x L/R, CC without pectoral) plus a constant image
/// `flat` without annotation.
pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub phantoms: HashMap<String, Phantom>,
}

pub fn phantom_params(id: &str, view: View, laterality: Laterality, seed: u64) -> PhantomParams {
    PhantomParams {
        seed,
        image_id: id.into(),
        exam_id: format!("exam_{id}"),
        view,
        laterality,
        pectoral: match view {
            View::Mlo => PhantomParams::default().pectoral,
            View::Cc => PectoralShape::None,
        },
        ..PhantomParams::default()
    }
}

pub fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut phantoms = HashMap::new();
    let specs = [
        ("mlo_r", View::Mlo, Laterality::R),
        ("mlo_l", View::Mlo, Laterality::L),
        ("cc_r", View::Cc, Laterality::R),
        ("cc_l", View::Cc, Laterality::L),
    ];
    for (i, (id, view, lat)) in specs.into_iter().enumerate() {
        let p = generate_phantom(&phantom_params(id, view, lat, 100 + i as u64)).unwrap();
        save_png16(&p.record, &root.join("images")).unwrap();
        let doc = AnnotationDocument {
            image_id: id.into(),
            exam_id: p.record.exam_id.clone(),
            view,
            laterality: lat,
            pixel_spacing_mm: p.record.pixel_spacing_mm,
            density: DensityClass::B,
            version: 1,
            structures: p.annotation.structures.clone(),
        };
        write_annotation(&root.join("annotations").join(format!("{id}.json")), &doc).unwrap();
        phantoms.insert(id.to_string(), p);
    }
    let flat = ImageRecord::new("flat", "exam_flat", View::Cc, Laterality::R, 0.1, Array2::from_elem((64, 48), 900));
    save_png16(&flat, &root.join("images")).unwrap();
    Fixture { dir, phantoms }
}

impl Fixture {
    pub fn root(&self) -> &Path {
        self.dir.path()
    }

    pub fn state(&self) -> Arc<AppState> {
        let mut config = ServiceConfig::new(self.root());
        config.runs_root = Some(self.root().join("runs"));
        Arc::new(AppState::open(&config).unwrap())
    }

    /// Model-resolution canonical ground truth of every phantom.
    pub fn model_truth(&self, size: usize) -> HashMap<String, LabelMap> {
        self.phantoms
            .iter()
            .map(|(id, p)| {
                let r = &p.record;
                (id.clone(), model_labels(r.width, r.height, r.laterality, &p.annotation, size).unwrap())
            })
            .collect()
    }
}

/// Returns the one-hot encoding of a stored label map for each image id.
pub struct IdentitySegmenter {
    pub labels: HashMap<String, LabelMap>,
}

impl Segmenter for IdentitySegmenter {
    fn predict(&self, request: SegmentRequest<'_>) -> Result<ProbabilityMaps, String> {
        let labels = self.labels.get(request.image_id).ok_or("unknown image")?;
        if labels.codes().dim() != request.input.dim() {
            return Err(format!("input {:?} vs labels {:?}", request.input.dim(), labels.codes().dim()));
        }
        one_hot(labels, mammoseg_core::NUM_CLASSES).map_err(|e| e.to_string())
    }
}

pub fn identity_run(id: &str, view: View, labels: HashMap<String, LabelMap>) -> RegisteredRun {
    RegisteredRun {
        id: id.into(),
        view,
        preprocess: mammoseg_core::preprocess::PreprocConfig {
            model_size: MODEL_SIZE,
            ..Default::default()
        },
        model: Arc::new(IdentitySegmenter { labels }),
    }
}

pub struct Reply {
    pub status: StatusCode,
    pub headers: axum::http::HeaderMap,
    pub body: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> serde_json::Value {
        serde_json::from_slice(&self.body).unwrap_or(serde_json::Value::Null)
    }
}

pub async fn send(app: &Router, method: &str, uri: &str, body: Option<serde_json::Value>) -> Reply {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(serde_json::to_vec(&v).unwrap())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply { status, headers, body }
}

pub fn app(state: Arc<AppState>) -> Router {
    router(state)
}
