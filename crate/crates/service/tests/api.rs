use std::io::Cursor;

use anemia_core::augment::EvalTransform;
use anemia_core::data::CLASS_NAMES;
use anemia_core::model::{build_model, BackboneInit, CheckpointMeta, HeadConfig, InferenceModel, Variant};
use anemia_service::api::{router, AppState, HistoryResponse, PredictResponse, MAX_UPLOAD_BYTES};
use anemia_service::clinical::DISCLAIMER;
use anemia_service::persistence::{self, BackendConfig, Label};
use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use tower::ServiceExt;

const BOUNDARY: &str = "XtestBoundary42";

fn small_model() -> InferenceModel {
    tch::manual_seed(3);
    let bundle = build_model(Variant::B0, &HeadConfig::for_variant(Variant::B0), &BackboneInit::Random).unwrap();
    let meta = CheckpointMeta {
        variant: Variant::B0,
        head_config: HeadConfig::for_variant(Variant::B0),
        val_acc: 0.5,
        epoch: 1,
        config_hash: "0123456789abcdef".into(),
        eval_transform: EvalTransform { resize_px: 72, crop_px: 64 },
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
    };
    InferenceModel::from_bundle(bundle, meta)
}

struct Fixture {
    _dir: tempfile::TempDir,
    state: AppState,
    app: Router,
}

fn fixture(with_model: bool) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let backend = BackendConfig::Sqlite { path: dir.path().join("anemia.db") };
    persistence::migrate(&backend, std::time::Duration::from_secs(1)).unwrap();
    let state = AppState::new(backend, dir.path().to_path_buf());
    if with_model {
        state.model().set(small_model());
    }
    let app = router(state.clone());
    Fixture { _dir: dir, state, app }
}

fn png_bytes(seed: u8) -> Vec<u8> {
    let img =
        image::RgbImage::from_fn(80, 60, |x, y| image::Rgb([200u8.wrapping_add(seed), (x * 3) as u8, (y * 2) as u8]));
    let mut out = Vec::new();
    img.write_to(&mut Cursor::new(&mut out), image::ImageFormat::Png).unwrap();
    out
}

fn multipart(image: Option<(&[u8], &str)>, name: Option<&str>, sex: Option<&str>) -> Vec<u8> {
    let mut body = Vec::new();
    let mut text = |field: &str, value: &str| {
        body.extend_from_slice(
            format!("--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"{field}\"\r\n\r\n{value}\r\n").as_bytes(),
        );
    };
    if let Some(n) = name {
        text("patient_name", n);
    }
    if let Some(s) = sex {
        text("sex", s);
    }
    if let Some((bytes, ct)) = image {
        body.extend_from_slice(
            format!(
                "--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"image\"; filename=\"eye\"\r\nContent-Type: {ct}\r\n\r\n"
            )
            .as_bytes(),
        );
        body.extend_from_slice(bytes);
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    body
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

fn predict_request(body: Vec<u8>) -> Request<Body> {
    Request::post("/api/predict")
        .header("content-type", format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(Body::from(body))
        .unwrap()
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Vec<u8>) {
    send(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

#[tokio::test]
async fn predict_returns_all_fields_and_persists_before_responding() {
    let f = fixture(true);
    let png = png_bytes(0);
    let (status, body) =
        send(&f.app, predict_request(multipart(Some((&png, "image/png")), Some("Ada Lovelace"), Some("female")))).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let json: serde_json::Value = serde_json::from_slice(&body).unwrap();
    for key in ["screening_id", "label", "confidence", "hgb_band", "model_version", "latency_ms", "disclaimer"] {
        assert!(json.get(key).is_some(), "missing {key}");
    }
    let p: PredictResponse = serde_json::from_value(json).unwrap();
    assert!((0.5..=1.0).contains(&p.confidence));
    assert!(p.latency_ms > 0.0);
    assert_eq!(p.disclaimer, DISCLAIMER);
    assert_eq!(p.model_version, "b0-0123456789ab-e1");

    let stored = f.state.store().get_screening(p.screening_id).unwrap().unwrap();
    assert_eq!(stored.predicted_label, p.label);
    assert_eq!(stored.confidence, p.confidence);
    assert!(f.state.data_dir().join(&stored.image_ref).exists());

    let (status, body) = get(&f.app, "/api/history").await;
    assert_eq!(status, StatusCode::OK);
    let h: HistoryResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(h.total, 1);
    assert_eq!(h.items[0].id, p.screening_id);
    assert_eq!(h.items[0].patient_name, "Ada Lovelace");
}

#[tokio::test]
async fn same_image_twice_gives_identical_result() {
    let f = fixture(true);
    let png = png_bytes(7);
    let mut seen = Vec::new();
    for _ in 0..2 {
        let (status, body) =
            send(&f.app, predict_request(multipart(Some((&png, "image/png")), Some("Bo"), Some("m")))).await;
        assert_eq!(status, StatusCode::OK);
        let p: PredictResponse = serde_json::from_slice(&body).unwrap();
        seen.push((p.label, p.confidence, p.hgb_band));
    }
    assert_eq!(seen[0], seen[1]);
    let (patients, screenings) = f.state.store().count_rows().unwrap();
    assert_eq!((patients, screenings), (1, 2));
}

#[tokio::test]
async fn oversized_upload_is_rejected() {
    let f = fixture(true);
    let big = vec![0u8; 11 * 1024 * 1024];
    let (status, _) = send(&f.app, predict_request(multipart(Some((&big, "image/jpeg")), Some("X"), None))).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
    assert_eq!(f.state.store().count_rows().unwrap().1, 0);
    const { assert!(MAX_UPLOAD_BYTES == 10 * 1024 * 1024) };
}

#[tokio::test]
async fn bad_inputs_map_to_client_errors() {
    let f = fixture(true);
    let (status, _) =
        send(&f.app, predict_request(multipart(Some((b"not an image at all", "image/png")), Some("X"), None))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) =
        send(&f.app, predict_request(multipart(Some((b"GIF89a....", "image/gif")), Some("X"), None))).await;
    assert_eq!(status, StatusCode::UNSUPPORTED_MEDIA_TYPE);
    let png = png_bytes(1);
    let (status, _) = send(&f.app, predict_request(multipart(Some((&png, "image/png")), None, None))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = send(&f.app, predict_request(multipart(None, Some("X"), None))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) =
        send(&f.app, predict_request(multipart(Some((&png, "image/png")), Some("X"), Some("robot")))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(f.state.store().count_rows().unwrap(), (0, 0));
}

#[tokio::test]
async fn untyped_upload_is_sniffed() {
    let f = fixture(true);
    let png = png_bytes(2);
    let (status, _) =
        send(&f.app, predict_request(multipart(Some((&png, "application/octet-stream")), Some("Y"), None))).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn predict_without_model_is_unavailable() {
    let f = fixture(false);
    let png = png_bytes(0);
    let (status, _) = send(&f.app, predict_request(multipart(Some((&png, "image/png")), Some("X"), None))).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn health_reports_backend_and_model() {
    let f = fixture(false);
    let (status, body) = get(&f.app, "/healthz").await;
    assert_eq!(status, StatusCode::OK);
    let h: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(h["backend_kind"], "embedded_file");
    assert_eq!(h["backend_reachable"], true);
    assert_eq!(h["model_loaded"], false);
    assert_eq!(h["status"], "starting");

    f.state.model().set(small_model());
    let (_, body) = get(&f.app, "/healthz").await;
    let h: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(h["status"], "ok");
    assert_eq!(h["model_loaded"], true);
    assert_eq!(h["model_version"], "b0-0123456789ab-e1");
}

#[tokio::test]
async fn health_degrades_when_database_is_unreachable() {
    let dir = tempfile::tempdir().unwrap();
    let backend = BackendConfig::Sqlite { path: dir.path().join("missing/dir/anemia.db") };
    let state = AppState::new(backend, dir.path().to_path_buf());
    state.model().set(small_model());
    let (status, body) = get(&router(state), "/healthz").await;
    assert_eq!(status, StatusCode::OK);
    let h: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(h["status"], "degraded");
    assert_eq!(h["backend_reachable"], false);
}

#[tokio::test]
async fn history_filters_and_pages_newest_first() {
    let f = fixture(true);
    for (i, name) in ["Alice Smith", "Bob Jones", "alice cooper", "Carol"].iter().enumerate() {
        let png = png_bytes(i as u8 * 20);
        let (status, _) = send(&f.app, predict_request(multipart(Some((&png, "image/png")), Some(name), None))).await;
        assert_eq!(status, StatusCode::OK);
    }
    let (_, body) = get(&f.app, "/api/history?patient=ALICE").await;
    let h: HistoryResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(h.total, 2);
    assert_eq!(h.items[0].patient_name, "alice cooper");
    assert_eq!(h.items[1].patient_name, "Alice Smith");

    let (_, body) = get(&f.app, "/api/history?page=2&page_size=3").await;
    let h: HistoryResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!((h.total, h.page, h.page_size, h.items.len()), (4, 2, 3, 1));
    assert_eq!(h.items[0].patient_name, "Alice Smith");

    let (_, body) = get(&f.app, "/api/history?patient=nobody").await;
    let h: HistoryResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!((h.total, h.items.len()), (0, 0));
}

#[tokio::test]
async fn report_pdf_carries_record_fields_and_disclaimer() {
    let f = fixture(true);
    let png = png_bytes(5);
    let (_, body) =
        send(&f.app, predict_request(multipart(Some((&png, "image/png")), Some("Grace Hopper"), Some("female")))).await;
    let p: PredictResponse = serde_json::from_slice(&body).unwrap();

    let res = f
        .app
        .clone()
        .oneshot(Request::get(format!("/api/reports/{}.pdf", p.screening_id)).body(Body::empty()).unwrap())
        .await
        .unwrap();
    assert_eq!(res.status(), StatusCode::OK);
    assert_eq!(res.headers()["content-type"], "application/pdf");
    let pdf = res.into_body().collect().await.unwrap().to_bytes().to_vec();
    assert!(pdf.starts_with(b"%PDF-"));
    let text = pdf_extract::extract_text_from_mem(&pdf).unwrap();
    assert!(text.contains("Grace Hopper"), "{text}");
    let diagnosis = match p.label {
        Label::Anemic => "Anemic",
        Label::NonAnemic => "Non-Anemic",
    };
    assert!(text.contains(diagnosis), "{text}");
    assert!(text.contains(DISCLAIMER), "{text}");
    assert!(text.contains(&format!("{:.1}%", p.confidence * 100.0)), "{text}");
}

#[tokio::test]
async fn unknown_report_is_not_found() {
    let f = fixture(true);
    assert_eq!(get(&f.app, "/api/reports/999.pdf").await.0, StatusCode::NOT_FOUND);
    assert_eq!(get(&f.app, "/api/reports/abc.pdf").await.0, StatusCode::NOT_FOUND);
}
