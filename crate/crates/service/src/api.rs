//! HTTP/JSON surface: prediction upload, history, PDF reports and health.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Duration, Instant};

use anemia_core::model::InferenceModel;
use axum::body::Body;
use axum::extract::{DefaultBodyLimit, Multipart, Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clinical::{hgb_band, DISCLAIMER};
use crate::error::ServiceError;
use crate::persistence::{
    self, BackendConfig, BackendKind, HistoryFilter, HistoryItem, Label, NewScreening, Sex, Store, DEFAULT_PAGE_SIZE,
};
use crate::report::{load_thumbnail, render_report, ReportPayload};

/// Largest accepted image.
pub const MAX_UPLOAD_BYTES: usize = 10 * 1024 * 1024;
/// Room for multipart framing and the text fields on top of the image.
const BODY_SLACK: usize = 64 * 1024;
pub const IMAGES_DIR: &str = "images";

/// The inference model, filled in once background loading finishes.
#[derive(Default)]
pub struct ModelSlot {
    model: OnceLock<Mutex<InferenceModel>>,
    error: Mutex<Option<String>>,
}

impl ModelSlot {
    pub fn set(&self, model: InferenceModel) {
        let _ = self.model.set(Mutex::new(model));
    }

    pub fn fail(&self, message: String) {
        *self.error.lock().unwrap_or_else(|e| e.into_inner()) = Some(message);
    }

    pub fn get(&self) -> Option<&Mutex<InferenceModel>> {
        self.model.get()
    }

    pub fn version(&self) -> Option<String> {
        self.get().map(|m| m.lock().unwrap_or_else(|e| e.into_inner()).version().to_string())
    }

    pub fn error(&self) -> Option<String> {
        self.error.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

struct Inner {
    store: Box<dyn Store>,
    backend: BackendConfig,
    data_dir: PathBuf,
    model: ModelSlot,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(backend: BackendConfig, data_dir: PathBuf) -> Self {
        AppState(Arc::new(Inner { store: backend.open(), backend, data_dir, model: ModelSlot::default() }))
    }

    pub fn model(&self) -> &ModelSlot {
        &self.0.model
    }

    pub fn store(&self) -> &dyn Store {
        self.0.store.as_ref()
    }

    pub fn data_dir(&self) -> &Path {
        &self.0.data_dir
    }

    pub fn backend(&self) -> &BackendConfig {
        &self.0.backend
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError { status, message: message.into() }
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let status = match &e {
            ServiceError::Validation(_) => StatusCode::BAD_REQUEST,
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Referential(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Unreachable(_) => StatusCode::SERVICE_UNAVAILABLE,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status.is_server_error() {
            log::error!("{e}");
        }
        ApiError::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("worker failed: {e}")))?
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub screening_id: i64,
    pub patient_id: i64,
    pub label: Label,
    pub confidence: f64,
    pub hgb_band: String,
    pub model_version: String,
    pub latency_ms: f64,
    pub timestamp: String,
    pub disclaimer: String,
}

struct Upload {
    image: Vec<u8>,
    content_type: Option<String>,
    patient_name: String,
    sex: String,
}

async fn read_upload(mut multipart: Multipart) -> Result<Upload, ApiError> {
    let mut upload = Upload { image: Vec::new(), content_type: None, patient_name: String::new(), sex: String::new() };
    let mut has_image = false;
    let field_error = |e: axum::extract::multipart::MultipartError| ApiError::new(e.status(), e.body_text());
    while let Some(field) = multipart.next_field().await.map_err(field_error)? {
        match field.name().unwrap_or("") {
            "image" => {
                upload.content_type = field.content_type().map(|s| s.to_ascii_lowercase());
                upload.image = field.bytes().await.map_err(field_error)?.to_vec();
                has_image = true;
            }
            "patient_name" => upload.patient_name = field.text().await.map_err(field_error)?,
            "sex" => upload.sex = field.text().await.map_err(field_error)?,
            _ => {}
        }
    }
    if !has_image {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "multipart field `image` is required"));
    }
    Ok(upload)
}

/// Resolves the upload's format from its declared type, falling back to sniffing.
fn image_format(upload: &Upload) -> Result<image::ImageFormat, ApiError> {
    let unsupported = |what: &str| {
        ApiError::new(StatusCode::UNSUPPORTED_MEDIA_TYPE, format!("unsupported image type {what}; accepted: JPG, PNG"))
    };
    match upload.content_type.as_deref() {
        Some("image/jpeg" | "image/jpg" | "image/pjpeg") => Ok(image::ImageFormat::Jpeg),
        Some("image/png") => Ok(image::ImageFormat::Png),
        Some("application/octet-stream") | None => match image::guess_format(&upload.image) {
            Ok(f @ (image::ImageFormat::Jpeg | image::ImageFormat::Png)) => Ok(f),
            _ => Err(unsupported("(unrecognised bytes)")),
        },
        Some(other) => Err(unsupported(other)),
    }
}

fn store_image(data_dir: &Path, bytes: &[u8], format: image::ImageFormat) -> Result<String, ApiError> {
    let ext = if format == image::ImageFormat::Png { "png" } else { "jpg" };
    let name = format!("{IMAGES_DIR}/{}.{ext}", hex::encode(Sha256::digest(bytes)));
    let path = data_dir.join(&name);
    if !path.exists() {
        let io = |e: std::io::Error| ApiError::from(ServiceError::Io(format!("{}: {e}", path.display())));
        std::fs::create_dir_all(data_dir.join(IMAGES_DIR)).map_err(io)?;
        let tmp = path.with_extension("part");
        std::fs::write(&tmp, bytes).map_err(io)?;
        std::fs::rename(&tmp, &path).map_err(io)?;
    }
    Ok(name)
}

async fn predict(State(state): State<AppState>, multipart: Multipart) -> Result<Json<PredictResponse>, ApiError> {
    let upload = read_upload(multipart).await?;
    if upload.image.len() > MAX_UPLOAD_BYTES {
        return Err(ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, "image exceeds the 10 MB limit"));
    }
    let format = image_format(&upload)?;
    if upload.patient_name.trim().is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "patient_name is required"));
    }
    let sex = Sex::parse(&upload.sex).map_err(ApiError::from)?;
    if state.model().get().is_none() {
        return Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "model is not loaded yet"));
    }

    blocking(move || {
        let model = state.model().get().expect("checked above");
        let started = Instant::now();
        let decoded = image::load_from_memory_with_format(&upload.image, format)
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("image could not be decoded: {e}")))?;
        let (probs, version) = {
            let model = model.lock().unwrap_or_else(|e| e.into_inner());
            let x = model.eval_transform().apply_dynamic(&decoded);
            let probs = model.predict_tensor(&x).map_err(|e| ApiError::from(ServiceError::from(e)))?;
            (probs, model.version().to_string())
        };
        let latency_ms = started.elapsed().as_secs_f64() * 1000.0;
        let (class, confidence) =
            probs
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::MIN), |best, (i, p)| if p > best.1 { (i, p) } else { best });
        let label = Label::from_class(class);
        let band = hgb_band(label, confidence, sex);

        let image_ref = store_image(state.data_dir(), &upload.image, format)?;
        let patient = state.store().upsert_patient(&upload.patient_name, sex)?;
        let record = state.store().insert_screening(&NewScreening {
            patient_id: patient.id,
            timestamp: persistence::now(),
            image_ref,
            predicted_label: label,
            confidence,
            hgb_band: band,
            model_version: version,
        })?;
        Ok(Json(PredictResponse {
            screening_id: record.id,
            patient_id: patient.id,
            label,
            confidence,
            hgb_band: record.hgb_band,
            model_version: record.model_version,
            latency_ms,
            timestamp: record.timestamp.to_rfc3339(),
            disclaimer: DISCLAIMER.to_string(),
        }))
    })
    .await
}

#[derive(Debug, Default, Deserialize)]
pub struct HistoryQuery {
    pub patient: Option<String>,
    pub page: Option<u32>,
    pub page_size: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryView {
    pub id: i64,
    pub patient_id: i64,
    pub patient_name: String,
    pub sex: Sex,
    pub timestamp: String,
    pub label: Label,
    pub confidence: f64,
    pub hgb_band: String,
    pub model_version: String,
    pub image_ref: String,
    pub report_url: String,
}

impl From<HistoryItem> for HistoryView {
    fn from(item: HistoryItem) -> Self {
        let s = item.screening;
        HistoryView {
            id: s.id,
            patient_id: s.patient_id,
            patient_name: item.patient_name,
            sex: item.sex,
            timestamp: s.timestamp.to_rfc3339(),
            label: s.predicted_label,
            confidence: s.confidence,
            hgb_band: s.hgb_band,
            model_version: s.model_version,
            image_ref: s.image_ref,
            report_url: format!("/api/reports/{}.pdf", s.id),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryResponse {
    pub total: u64,
    pub page: u32,
    pub page_size: u32,
    pub items: Vec<HistoryView>,
}

async fn history(
    State(state): State<AppState>,
    Query(q): Query<HistoryQuery>,
) -> Result<Json<HistoryResponse>, ApiError> {
    blocking(move || {
        let filter = HistoryFilter { patient: q.patient.filter(|p| !p.trim().is_empty()) };
        let page =
            state.store().list_history(&filter, q.page.unwrap_or(1), q.page_size.unwrap_or(DEFAULT_PAGE_SIZE))?;
        Ok(Json(HistoryResponse {
            total: page.total,
            page: page.page,
            page_size: page.page_size,
            items: page.items.into_iter().map(HistoryView::from).collect(),
        }))
    })
    .await
}

/// Builds the report for a stored screening, straight from the persisted fields.
pub fn build_report(store: &dyn Store, data_dir: &Path, screening_id: i64) -> Result<Vec<u8>, ServiceError> {
    let screening = store
        .get_screening(screening_id)?
        .ok_or_else(|| ServiceError::NotFound(format!("screening {screening_id}")))?;
    let patient = store
        .get_patient(screening.patient_id)?
        .ok_or_else(|| ServiceError::NotFound(format!("patient {}", screening.patient_id)))?;
    let thumbnail = load_thumbnail(data_dir, &screening.image_ref);
    render_report(&ReportPayload { patient, screening, thumbnail })
}

async fn report(State(state): State<AppState>, UrlPath(file): UrlPath<String>) -> Result<Response, ApiError> {
    let id: i64 = file
        .strip_suffix(".pdf")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no report named {file}")))?;
    let bytes = blocking(move || Ok(build_report(state.store(), state.data_dir(), id)?)).await?;
    Ok((
        [
            (header::CONTENT_TYPE, "application/pdf".to_string()),
            (header::CONTENT_DISPOSITION, format!("inline; filename=\"screening-{id}.pdf\"")),
        ],
        Body::from(bytes),
    )
        .into_response())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub backend_kind: BackendKind,
    pub backend_reachable: bool,
    pub model_loaded: bool,
    pub model_version: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_error: Option<String>,
}

async fn healthz(State(state): State<AppState>) -> Result<Json<Health>, ApiError> {
    blocking(move || {
        let reachable = state.store().ping().is_ok();
        let version = state.model().version();
        let model_error = state.model().error();
        let status = match (reachable, version.is_some(), model_error.is_some()) {
            (false, _, _) | (_, false, true) => "degraded",
            (true, false, false) => "starting",
            (true, true, _) => "ok",
        };
        Ok(Json(Health {
            status: status.into(),
            backend_kind: state.backend().kind(),
            backend_reachable: reachable,
            model_loaded: version.is_some(),
            model_version: version,
            model_error,
        }))
    })
    .await
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/predict", post(predict))
        .route("/api/history", get(history))
        .route("/api/reports/{file}", get(report))
        .route("/healthz", get(healthz))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES + BODY_SLACK))
        .with_state(state)
}

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub addr: SocketAddr,
    pub backend: BackendConfig,
    pub data_dir: PathBuf,
    pub model_path: PathBuf,
    pub migrate_wait: Duration,
}

/// Migrates, binds, starts loading the model in the background and serves
/// until interrupted. Refuses to start when the database is unreachable.
pub async fn serve(config: ServeConfig) -> Result<(), ServiceError> {
    let backend = config.backend.clone();
    let wait = config.migrate_wait;
    let report = tokio::task::spawn_blocking(move || persistence::migrate(&backend, wait))
        .await
        .map_err(|e| ServiceError::Io(e.to_string()))??;
    log::info!(
        "database backend: {} ({}), migration applied: {}",
        report.location,
        report.backend_kind.as_str(),
        report.migration_applied
    );
    std::fs::create_dir_all(&config.data_dir)
        .map_err(|e| ServiceError::Io(format!("{}: {e}", config.data_dir.display())))?;

    let state = AppState::new(config.backend.clone(), config.data_dir.clone());
    let listener = tokio::net::TcpListener::bind(config.addr)
        .await
        .map_err(|e| ServiceError::Io(format!("bind {}: {e}", config.addr)))?;
    log::info!("listening on http://{}", listener.local_addr().map_err(|e| ServiceError::Io(e.to_string()))?);

    let loader = state.clone();
    let model_path = config.model_path.clone();
    tokio::task::spawn_blocking(move || match InferenceModel::load(&model_path) {
        Ok(model) => {
            log::info!("model {} loaded from {}", model.version(), model_path.display());
            loader.model().set(model);
        }
        Err(e) => {
            log::error!("model load from {} failed: {e}", model_path.display());
            loader.model().fail(e.to_string());
        }
    });

    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown_signal())
        .await
        .map_err(|e| ServiceError::Io(e.to_string()))
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        if let Ok(mut s) = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            s.recv().await;
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
    log::info!("shutting down");
}
