//! Patients and screening records, stored in Postgres when `DATABASE_URL` is
//! set and in a single SQLite file under the data directory otherwise.

mod pg;
mod sqlite;

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use chrono::{DateTime, SubsecRound, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};

pub use pg::PgStore;
pub use sqlite::SqliteStore;

pub const DEFAULT_DATA_DIR: &str = "/var/data";
pub const SQLITE_FILE: &str = "anemia.db";
pub const DEFAULT_PAGE_SIZE: u32 = 20;
pub const MAX_PAGE_SIZE: u32 = 100;

/// Every column the schema may contain. Anything else is a schema error.
pub const COLUMN_WHITELIST: &[(&str, &str)] = &[
    ("patients", "id"),
    ("patients", "name"),
    ("patients", "sex"),
    ("patients", "created_at"),
    ("screenings", "id"),
    ("screenings", "patient_id"),
    ("screenings", "created_at"),
    ("screenings", "image_ref"),
    ("screenings", "predicted_label"),
    ("screenings", "confidence"),
    ("screenings", "hgb_band"),
    ("screenings", "model_version"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Female,
    Male,
    Unspecified,
}

impl Sex {
    pub fn as_str(self) -> &'static str {
        match self {
            Sex::Female => "female",
            Sex::Male => "male",
            Sex::Unspecified => "unspecified",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "female" | "f" => Ok(Sex::Female),
            "male" | "m" => Ok(Sex::Male),
            "" | "unspecified" | "other" | "unknown" => Ok(Sex::Unspecified),
            other => Err(ServiceError::Validation(format!("unknown sex {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Anemic,
    NonAnemic,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Anemic => "anemic",
            Label::NonAnemic => "non_anemic",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "anemic" => Ok(Label::Anemic),
            "non_anemic" => Ok(Label::NonAnemic),
            other => Err(ServiceError::Db(format!("unknown label {other:?} in store"))),
        }
    }

    pub fn from_class(index: usize) -> Self {
        if index == anemia_core::data::ANEMIC {
            Label::Anemic
        } else {
            Label::NonAnemic
        }
    }

    pub fn display(self) -> &'static str {
        match self {
            Label::Anemic => "Anemic",
            Label::NonAnemic => "Non-Anemic",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: i64,
    pub name: String,
    pub sex: Sex,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewScreening {
    pub patient_id: i64,
    pub timestamp: DateTime<Utc>,
    pub image_ref: String,
    pub predicted_label: Label,
    pub confidence: f64,
    pub hgb_band: String,
    pub model_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningRecord {
    pub id: i64,
    pub patient_id: i64,
    pub timestamp: DateTime<Utc>,
    pub image_ref: String,
    pub predicted_label: Label,
    pub confidence: f64,
    pub hgb_band: String,
    pub model_version: String,
}

/// A screening joined with its patient, as listed in the history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryItem {
    pub screening: ScreeningRecord,
    pub patient_name: String,
    pub sex: Sex,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HistoryFilter {
    /// Case-insensitive substring of the patient name.
    pub patient: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryPage {
    pub total: u64,
    pub page: u32,
    pub page_size: u32,
    pub items: Vec<HistoryItem>,
}

/// Database timestamps keep microseconds; trimming up front makes round trips exact.
pub fn now() -> DateTime<Utc> {
    Utc::now().trunc_subsecs(6)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    ClientServer,
    EmbeddedFile,
}

impl BackendKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BackendKind::ClientServer => "client_server",
            BackendKind::EmbeddedFile => "embedded_file",
        }
    }

    pub fn product(self) -> &'static str {
        match self {
            BackendKind::ClientServer => "PostgreSQL",
            BackendKind::EmbeddedFile => "SQLite",
        }
    }
}

#[derive(Clone, PartialEq, Eq)]
pub enum BackendConfig {
    Postgres { url: String },
    Sqlite { path: PathBuf },
}

impl std::fmt::Debug for BackendConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "BackendConfig({})", self.describe())
    }
}

impl BackendConfig {
    pub fn kind(&self) -> BackendKind {
        match self {
            BackendConfig::Postgres { .. } => BackendKind::ClientServer,
            BackendConfig::Sqlite { .. } => BackendKind::EmbeddedFile,
        }
    }

    /// Location suitable for logs: credentials are never shown.
    pub fn describe(&self) -> String {
        match self {
            BackendConfig::Postgres { url } => format!("{} at {}", self.kind().product(), redact_url(url)),
            BackendConfig::Sqlite { path } => format!("{} at {}", self.kind().product(), path.display()),
        }
    }

    pub fn open(&self) -> Box<dyn Store> {
        match self {
            BackendConfig::Postgres { url } => Box::new(PgStore::new(url.clone())),
            BackendConfig::Sqlite { path } => Box::new(SqliteStore::new(path.clone())),
        }
    }
}

pub fn redact_url(raw: &str) -> String {
    match url::Url::parse(raw) {
        Ok(mut u) => {
            if u.password().is_some() {
                let _ = u.set_password(Some("***"));
            }
            u.to_string()
        }
        Err(_) => "<redacted>".into(),
    }
}

/// Picks the backend from `DATABASE_URL` and `ANEMIA_DATA_DIR`.
pub fn select_backend(env: impl Fn(&str) -> Option<String>) -> Result<BackendConfig> {
    if let Some(raw) = env("DATABASE_URL").filter(|v| !v.trim().is_empty()) {
        let parsed = url::Url::parse(raw.trim())
            .map_err(|_| ServiceError::Config("DATABASE_URL is malformed (value redacted)".into()))?;
        if !matches!(parsed.scheme(), "postgres" | "postgresql") {
            return Err(ServiceError::Config(format!(
                "DATABASE_URL has unsupported scheme {:?} (value redacted); expected postgres:// or postgresql://",
                parsed.scheme()
            )));
        }
        if !parsed.has_host() {
            return Err(ServiceError::Config("DATABASE_URL has no host (value redacted)".into()));
        }
        let rest = &raw.trim()[parsed.scheme().len()..];
        return Ok(BackendConfig::Postgres { url: format!("postgres{rest}") });
    }
    Ok(BackendConfig::Sqlite { path: data_dir(&env).join(SQLITE_FILE) })
}

pub fn data_dir(env: &impl Fn(&str) -> Option<String>) -> PathBuf {
    env("ANEMIA_DATA_DIR")
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR))
}

pub fn process_env(key: &str) -> Option<String> {
    std::env::var(key).ok()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendReport {
    pub backend_kind: BackendKind,
    pub reachable: bool,
    pub migration_applied: bool,
    pub location: String,
}

/// Storage operations. Each call uses its own connection and transaction.
pub trait Store: Send + Sync {
    fn kind(&self) -> BackendKind;
    fn ping(&self) -> Result<()>;
    /// Creates missing tables; returns whether anything was created.
    fn migrate(&self) -> Result<bool>;
    /// Sorted `(table, column)` pairs of the application tables.
    fn schema(&self) -> Result<Vec<(String, String)>>;
    fn upsert_patient(&self, name: &str, sex: Sex) -> Result<PatientRecord>;
    fn get_patient(&self, id: i64) -> Result<Option<PatientRecord>>;
    fn insert_screening(&self, record: &NewScreening) -> Result<ScreeningRecord>;
    fn get_screening(&self, id: i64) -> Result<Option<ScreeningRecord>>;
    fn list_history(&self, filter: &HistoryFilter, page: u32, page_size: u32) -> Result<HistoryPage>;
    fn count_rows(&self) -> Result<(u64, u64)>;
}

pub(crate) fn validate_patient_name(name: &str) -> Result<String> {
    let trimmed = name.trim();
    if trimmed.is_empty() {
        return Err(ServiceError::Validation("patient name must not be empty".into()));
    }
    if trimmed.chars().count() > 200 {
        return Err(ServiceError::Validation("patient name is longer than 200 characters".into()));
    }
    Ok(trimmed.to_string())
}

pub(crate) fn validate_screening(record: &NewScreening) -> Result<()> {
    if !(0.0..=1.0).contains(&record.confidence) {
        return Err(ServiceError::Validation(format!("confidence {} outside [0, 1]", record.confidence)));
    }
    Ok(())
}

pub(crate) fn page_bounds(page: u32, page_size: u32) -> (u32, u32, u64) {
    let page = page.max(1);
    let size = page_size.clamp(1, MAX_PAGE_SIZE);
    (page, size, u64::from(page - 1) * u64::from(size))
}

pub(crate) fn like_pattern(filter: &HistoryFilter) -> String {
    let needle = filter.patient.as_deref().unwrap_or("").trim().to_lowercase();
    let escaped: String = needle
        .chars()
        .flat_map(|c| match c {
            '%' | '_' | '\\' => vec!['\\', c],
            c => vec![c],
        })
        .collect();
    format!("%{escaped}%")
}

/// Connects with exponential backoff for up to `max_wait`, then creates any
/// missing tables.
pub fn migrate(config: &BackendConfig, max_wait: Duration) -> Result<BackendReport> {
    if let BackendConfig::Sqlite { path } = config {
        ensure_parent(path)?;
    }
    let store = config.open();
    let deadline = Instant::now() + max_wait;
    let mut delay = Duration::from_millis(100);
    loop {
        match store.ping() {
            Ok(()) => break,
            Err(e) if Instant::now() + delay < deadline => {
                log::info!("waiting for {}: {e}", config.describe());
                std::thread::sleep(delay);
                delay = (delay * 2).min(Duration::from_secs(2));
            }
            Err(e) => {
                return Err(ServiceError::Unreachable(format!(
                    "{} unreachable after {:.0?}: {e}",
                    config.describe(),
                    max_wait
                )))
            }
        }
    }
    let applied = store.migrate()?;
    Ok(BackendReport {
        backend_kind: config.kind(),
        reachable: true,
        migration_applied: applied,
        location: config.describe(),
    })
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| ServiceError::Io(format!("{}: {e}", dir.display())))?;
    }
    Ok(())
}
