mod support;

use mammoseg_core::evaluation::{class_ious, iou};
use mammoseg_core::geometry::{fill_polygon, rasterize_polygon};
use mammoseg_core::preprocess::{resize_labels_for_model, standardize_labels};
use mammoseg_core::{AnnotationDocument, LabelMap, StructureClass, View};
use mammoseg_service::PartialStructures;
use ndarray::Array2;
use serde_json::json;
use support::*;

fn decode_png(bytes: &[u8]) -> image::DynamicImage {
    image::load_from_memory_with_format(bytes, image::ImageFormat::Png).unwrap()
}

/// Paints polygons in class order, as annotation rasterization does.
fn paint(s: &PartialStructures, width: usize, height: usize) -> LabelMap {
    let mut codes = Array2::<u8>::zeros((height, width));
    for class in StructureClass::ALL.into_iter().skip(1) {
        if let Some(p) = s.get(class) {
            fill_polygon(&mut codes, p, class.code());
        }
    }
    LabelMap::new(codes).unwrap()
}

#[tokio::test]
async fn images_are_served_raw_and_for_display() {
    let fx = fixture();
    let app = app(fx.state());

    let raw = send(&app, "GET", "/images/mlo_l?variant=raw", None).await;
    assert_eq!(raw.status, 200);
    assert_eq!(raw.headers["x-view"], "MLO");
    assert_eq!(raw.headers["x-laterality"], "L");
    assert_eq!(raw.headers["x-width"], "208");
    assert_eq!(raw.headers["x-height"], "256");
    let img = decode_png(&raw.body).to_luma16();
    assert!(img.pixels().all(|p| p.0[0] <= 4095));
    let record = &fx.phantoms["mlo_l"].record;
    assert_eq!(img.as_raw(), &record.pixels.iter().copied().collect::<Vec<_>>());

    let display = send(&app, "GET", "/images/mlo_l", None).await;
    assert_eq!(display.status, 200);
    let img = decode_png(&display.body);
    assert_eq!(img.color(), image::ColorType::L8);
    let img = img.to_luma8();
    assert_eq!(img.dimensions(), (208, 256));
    let (lo, hi) = img.pixels().fold((255, 0), |(lo, hi), p| (lo.min(p.0[0]), hi.max(p.0[0])));
    assert!(lo < 20 && hi > 200, "display range {lo}..{hi}");

    assert_eq!(send(&app, "GET", "/images/nope", None).await.status, 404);
    assert_eq!(send(&app, "GET", "/images/mlo_l?variant=jpeg", None).await.status, 400);

    let list = send(&app, "GET", "/images", None).await.json();
    let ids: Vec<&str> = list.as_array().unwrap().iter().map(|v| v["image_id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["cc_l", "cc_r", "flat", "mlo_l", "mlo_r"]);
    assert_eq!(list[2]["annotation_version"], 0);
}

#[tokio::test]
async fn annotation_edits_are_versioned() {
    let fx = fixture();
    let app = app(fx.state());
    let current = send(&app, "GET", "/annotations/cc_r", None).await;
    assert_eq!(current.status, 200);
    let mut doc: AnnotationDocument = serde_json::from_slice(&current.body).unwrap();
    assert_eq!(doc.version, 1);

    let stored = send(&app, "PUT", "/annotations/cc_r", Some(json!(doc))).await;
    assert_eq!(stored.status, 200);
    assert_eq!(stored.json()["version"], 2);
    let again = send(&app, "PUT", "/annotations/cc_r", Some(json!(doc))).await;
    assert_eq!(again.status, 409);
    assert_eq!(again.json()["error"], "VersionConflict");
    assert_eq!(send(&app, "GET", "/annotations/cc_r", None).await.json()["version"], 2);

    doc.version = 2;
    let mut body = json!(doc);
    body["structures"]["nipple"] = json!([[1.0, 1.0], [5.0, 1.0]]);
    assert_eq!(send(&app, "PUT", "/annotations/cc_r", Some(body)).await.status, 422);

    let mut body = json!(doc);
    body["image_id"] = json!("cc_l");
    assert_eq!(send(&app, "PUT", "/annotations/cc_r", Some(body)).await.status, 422);

    // Vertices outside the image are clamped, not rejected.
    let mut body = json!(doc);
    body["structures"]["nipple"] = json!([[-5.0, 10.0], [300.0, 10.0], [300.0, 20.0]]);
    let clamped = send(&app, "PUT", "/annotations/cc_r", Some(body)).await;
    assert_eq!(clamped.status, 200);
    assert_eq!(clamped.json()["structures"]["nipple"], json!([[0.0, 10.0], [208.0, 10.0], [208.0, 20.0]]));

    let mut mlo: AnnotationDocument = serde_json::from_slice(&send(&app, "GET", "/annotations/mlo_r", None).await.body).unwrap();
    mlo.structures.pectoral = None;
    let missing = send(&app, "PUT", "/annotations/mlo_r", Some(json!(mlo))).await;
    assert_eq!(missing.status, 422);
    assert!(missing.json()["message"].as_str().unwrap().contains("pectoral"));

    assert_eq!(send(&app, "GET", "/annotations/nope", None).await.status, 404);
    assert_eq!(send(&app, "PUT", "/annotations/nope", Some(json!(doc))).await.status, 404);
    assert_eq!(send(&app, "GET", "/annotations/flat", None).await.status, 404);

    // Reopening the service sees the latest version.
    drop(app);
    let reopened = support::app(fx.state());
    assert_eq!(send(&reopened, "GET", "/annotations/cc_r", None).await.json()["version"], 3);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrent_puts_on_one_version_conflict_once() {
    let fx = fixture();
    let app = app(fx.state());
    for round in 0..10u64 {
        let mut doc: AnnotationDocument =
            serde_json::from_slice(&send(&app, "GET", "/annotations/mlo_l", None).await.body).unwrap();
        assert_eq!(doc.version, 1 + round);
        let a = json!(doc.clone());
        doc.density = mammoseg_core::DensityClass::D;
        let b = json!(doc);
        let (ra, rb) = tokio::join!(
            tokio::spawn({
                let app = app.clone();
                async move { send(&app, "PUT", "/annotations/mlo_l", Some(a)).await.status }
            }),
            tokio::spawn({
                let app = app.clone();
                async move { send(&app, "PUT", "/annotations/mlo_l", Some(b)).await.status }
            }),
        );
        let mut statuses = [ra.unwrap().as_u16(), rb.unwrap().as_u16()];
        statuses.sort();
        assert_eq!(statuses, [200, 409], "round {round}");
    }
}

#[tokio::test]
async fn breast_contour_init_matches_the_phantom_breast() {
    let fx = fixture();
    let app = app(fx.state());
    for id in ["mlo_r", "mlo_l", "cc_r", "cc_l"] {
        let reply = send(&app, "POST", "/init/breast-contour", Some(json!({"image_id": id}))).await;
        assert_eq!(reply.status, 200);
        let v = reply.json();
        assert_eq!(v["provenance"], "otsu");
        assert_eq!(v["structure"], "fatty");
        let poly = serde_json::from_value(v["polygon"].clone()).unwrap();
        let labels = &fx.phantoms[id].labels;
        let truth = labels.codes().mapv(|c| c != 0);
        let mask = rasterize_polygon(&poly, labels.width(), labels.height());
        let score = iou(mask.view(), truth.view()).unwrap();
        assert!(score >= 0.98, "{id}: {score}");
    }
    let flat = send(&app, "POST", "/init/breast-contour", Some(json!({"image_id": "flat"}))).await;
    assert_eq!(flat.status, 422);
    assert_eq!(flat.json()["error"], "DegenerateImage");
    assert_eq!(send(&app, "POST", "/init/breast-contour", Some(json!({"image_id": "x"}))).await.status, 404);
    assert_eq!(send(&app, "POST", "/init/breast-contour", Some(json!({"id": "x"}))).await.status, 422);
}

#[tokio::test]
async fn model_init_round_trips_through_the_preprocessing_transform() {
    let fx = fixture();
    let state = fx.state();
    let truth = fx.model_truth(MODEL_SIZE);
    state.runs.insert(identity_run("mlo-id", View::Mlo, truth.clone()));
    state.runs.insert(identity_run("cc-id", View::Cc, truth.clone()));
    let app = app(state);

    for (id, run) in [("mlo_r", "mlo-id"), ("mlo_l", "mlo-id"), ("cc_r", "cc-id"), ("cc_l", "cc-id")] {
        let reply = send(&app, "POST", "/init/predict", Some(json!({"image_id": id, "run_id": run}))).await;
        assert_eq!(reply.status, 200, "{}", String::from_utf8_lossy(&reply.body));
        let v = reply.json();
        assert_eq!(v["provenance"], "model");
        let s: PartialStructures = serde_json::from_value(v["structures"].clone()).unwrap();
        let record = &fx.phantoms[id].record;
        assert_eq!(s.pectoral.is_some(), record.view == View::Mlo, "{id}");
        if record.view == View::Cc {
            assert!(v["structures"].get("pectoral").is_none());
        }
        // Image space -> canonical model grid, compared with the argmax.
        let painted = paint(&s, record.width, record.height);
        let back = resize_labels_for_model(&standardize_labels(&painted, record.laterality), MODEL_SIZE);
        let ious = class_ious(&back, &truth[id]).unwrap();
        for class in StructureClass::ALL {
            if truth[id].count(class) > 0 {
                assert!(ious[class.code() as usize] >= 0.95, "{id} {class}: {ious:?}");
            }
        }
    }

    let mismatch = send(&app, "POST", "/init/predict", Some(json!({"image_id": "mlo_r", "run_id": "cc-id"}))).await;
    assert_eq!(mismatch.status, 409);
    assert_eq!(mismatch.json()["error"], "ViewMismatch");
    let unknown = send(&app, "POST", "/init/predict", Some(json!({"image_id": "mlo_r", "run_id": "nope"}))).await;
    assert_eq!(unknown.status, 404);
    assert_eq!(unknown.json()["error"], "UnknownRun");
}

#[tokio::test]
async fn model_init_loads_trained_runs_from_disk() {
    use mammoseg_nn::run::{write_run, RunConfig};
    use mammoseg_nn::{build_model, Architecture, EncoderKind, ModelSpec};
    use mammoseg_nn::train::{TrainConfig, TrainHistory};

    let fx = fixture();
    let spec = ModelSpec::new(Architecture::UNet, EncoderKind::Small, 64);
    let config = RunConfig {
        view: View::Cc,
        model: spec.clone(),
        preprocess: mammoseg_core::preprocess::PreprocConfig {
            model_size: 64,
            ..Default::default()
        },
        train: TrainConfig::default(),
        data_root: None,
        split: None,
    };
    let history = TrainHistory {
        epochs: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
        optimizer: "none".into(),
    };
    write_run(&fx.root().join("runs/cc-small"), &config, &build_model(&spec).unwrap(), &history).unwrap();
    let app = app(fx.state());
    let runs = send(&app, "GET", "/runs", None).await.json();
    assert_eq!(runs, json!([{"id": "cc-small", "view": "CC", "loaded": false}]));
    let reply = send(&app, "POST", "/init/predict", Some(json!({"image_id": "cc_l", "run_id": "cc-small"}))).await;
    assert_eq!(reply.status, 200, "{}", String::from_utf8_lossy(&reply.body));
    assert_eq!(reply.json()["run_id"], "cc-small");
    let mismatch = send(&app, "POST", "/init/predict", Some(json!({"image_id": "mlo_l", "run_id": "cc-small"}))).await;
    assert_eq!(mismatch.status, 409);
}
