use std::path::PathBuf;
use std::time::Duration;

use rusqlite::{params, Connection, OptionalExtension, Row};

use super::*;

const SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS patients (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    name TEXT NOT NULL CHECK (length(name) > 0),
    sex TEXT NOT NULL CHECK (sex IN ('female', 'male', 'unspecified')),
    created_at TEXT NOT NULL,
    UNIQUE (name, sex)
);
CREATE TABLE IF NOT EXISTS screenings (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    patient_id INTEGER NOT NULL REFERENCES patients (id),
    created_at TEXT NOT NULL,
    image_ref TEXT NOT NULL,
    predicted_label TEXT NOT NULL CHECK (predicted_label IN ('anemic', 'non_anemic')),
    confidence REAL NOT NULL CHECK (confidence >= 0 AND confidence <= 1),
    hgb_band TEXT NOT NULL,
    model_version TEXT NOT NULL
);
CREATE INDEX IF NOT EXISTS screenings_newest ON screenings (created_at DESC, id DESC);
";

const SCREENING_COLUMNS: &str =
    "s.id, s.patient_id, s.created_at, s.image_ref, s.predicted_label, s.confidence, s.hgb_band, s.model_version";

/// Single-file store; a fresh connection per operation.
#[derive(Debug, Clone)]
pub struct SqliteStore {
    path: PathBuf,
}

impl SqliteStore {
    pub fn new(path: PathBuf) -> Self {
        SqliteStore { path }
    }

    fn connect(&self) -> Result<Connection> {
        let conn = Connection::open(&self.path)
            .map_err(|e| ServiceError::Unreachable(format!("{}: {e}", self.path.display())))?;
        conn.busy_timeout(Duration::from_secs(10))?;
        conn.pragma_update(None, "foreign_keys", true)?;
        Ok(conn)
    }
}

fn screening_from_row(row: &Row<'_>) -> rusqlite::Result<(ScreeningRecord, String)> {
    let label: String = row.get(4)?;
    Ok((
        ScreeningRecord {
            id: row.get(0)?,
            patient_id: row.get(1)?,
            timestamp: row.get(2)?,
            image_ref: row.get(3)?,
            predicted_label: Label::NonAnemic,
            confidence: row.get(5)?,
            hgb_band: row.get(6)?,
            model_version: row.get(7)?,
        },
        label,
    ))
}

fn finish((mut record, label): (ScreeningRecord, String)) -> Result<ScreeningRecord> {
    record.predicted_label = Label::parse(&label)?;
    Ok(record)
}

fn patient_from_row(row: &Row<'_>) -> rusqlite::Result<(i64, String, String, DateTime<Utc>)> {
    Ok((row.get(0)?, row.get(1)?, row.get(2)?, row.get(3)?))
}

fn to_patient((id, name, sex, created_at): (i64, String, String, DateTime<Utc>)) -> Result<PatientRecord> {
    Ok(PatientRecord { id, name, sex: Sex::parse(&sex)?, created_at })
}

impl Store for SqliteStore {
    fn kind(&self) -> BackendKind {
        BackendKind::EmbeddedFile
    }

    fn ping(&self) -> Result<()> {
        let conn = self.connect()?;
        conn.query_row("SELECT 1", [], |_| Ok(()))
            .map_err(|e| ServiceError::Unreachable(format!("{}: {e}", self.path.display())))
    }

    fn migrate(&self) -> Result<bool> {
        let mut conn = self.connect()?;
        let tx = conn.transaction()?;
        let existing: i64 = tx.query_row(
            "SELECT count(*) FROM sqlite_master WHERE type = 'table' AND name IN ('patients', 'screenings')",
            [],
            |r| r.get(0),
        )?;
        tx.execute_batch(SCHEMA)?;
        tx.commit()?;
        Ok(existing < 2)
    }

    fn schema(&self) -> Result<Vec<(String, String)>> {
        let conn = self.connect()?;
        let mut out = Vec::new();
        for table in ["patients", "screenings"] {
            let mut stmt = conn.prepare(&format!("PRAGMA table_info({table})"))?;
            let cols = stmt.query_map([], |r| r.get::<_, String>(1))?;
            for c in cols {
                out.push((table.to_string(), c?));
            }
        }
        out.sort();
        Ok(out)
    }

    fn upsert_patient(&self, name: &str, sex: Sex) -> Result<PatientRecord> {
        let name = validate_patient_name(name)?;
        let mut conn = self.connect()?;
        let tx = conn.transaction()?;
        tx.execute(
            "INSERT INTO patients (name, sex, created_at) VALUES (?1, ?2, ?3) ON CONFLICT (name, sex) DO NOTHING",
            params![name, sex.as_str(), now()],
        )?;
        let row = tx.query_row(
            "SELECT id, name, sex, created_at FROM patients WHERE name = ?1 AND sex = ?2",
            params![name, sex.as_str()],
            patient_from_row,
        )?;
        tx.commit()?;
        to_patient(row)
    }

    fn get_patient(&self, id: i64) -> Result<Option<PatientRecord>> {
        let conn = self.connect()?;
        conn.query_row("SELECT id, name, sex, created_at FROM patients WHERE id = ?1", [id], patient_from_row)
            .optional()?
            .map(to_patient)
            .transpose()
    }

    fn insert_screening(&self, record: &NewScreening) -> Result<ScreeningRecord> {
        validate_screening(record)?;
        let mut conn = self.connect()?;
        let tx = conn.transaction()?;
        let exists: Option<i64> =
            tx.query_row("SELECT id FROM patients WHERE id = ?1", [record.patient_id], |r| r.get(0)).optional()?;
        if exists.is_none() {
            return Err(ServiceError::Referential(format!("patient {} does not exist", record.patient_id)));
        }
        tx.execute(
            "INSERT INTO screenings (patient_id, created_at, image_ref, predicted_label, confidence, hgb_band, model_version)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7)",
            params![
                record.patient_id,
                record.timestamp,
                record.image_ref,
                record.predicted_label.as_str(),
                record.confidence,
                record.hgb_band,
                record.model_version
            ],
        )?;
        let id = tx.last_insert_rowid();
        tx.commit()?;
        Ok(ScreeningRecord {
            id,
            patient_id: record.patient_id,
            timestamp: record.timestamp,
            image_ref: record.image_ref.clone(),
            predicted_label: record.predicted_label,
            confidence: record.confidence,
            hgb_band: record.hgb_band.clone(),
            model_version: record.model_version.clone(),
        })
    }

    fn get_screening(&self, id: i64) -> Result<Option<ScreeningRecord>> {
        let conn = self.connect()?;
        conn.query_row(
            &format!("SELECT {SCREENING_COLUMNS} FROM screenings s WHERE s.id = ?1"),
            [id],
            screening_from_row,
        )
        .optional()?
        .map(finish)
        .transpose()
    }

    fn list_history(&self, filter: &HistoryFilter, page: u32, page_size: u32) -> Result<HistoryPage> {
        let (page, size, offset) = page_bounds(page, page_size);
        let pattern = like_pattern(filter);
        let conn = self.connect()?;
        let total: i64 = conn.query_row(
            "SELECT count(*) FROM screenings s JOIN patients p ON p.id = s.patient_id
             WHERE lower(p.name) LIKE ?1 ESCAPE '\\'",
            [&pattern],
            |r| r.get(0),
        )?;
        let mut stmt = conn.prepare(&format!(
            "SELECT {SCREENING_COLUMNS}, p.name, p.sex FROM screenings s JOIN patients p ON p.id = s.patient_id
             WHERE lower(p.name) LIKE ?1 ESCAPE '\\'
             ORDER BY s.created_at DESC, s.id DESC LIMIT ?2 OFFSET ?3"
        ))?;
        let rows = stmt.query_map(params![pattern, i64::from(size), offset as i64], |r| {
            Ok((screening_from_row(r)?, r.get::<_, String>(8)?, r.get::<_, String>(9)?))
        })?;
        let mut items = Vec::new();
        for row in rows {
            let (s, name, sex) = row?;
            items.push(HistoryItem { screening: finish(s)?, patient_name: name, sex: Sex::parse(&sex)? });
        }
        Ok(HistoryPage { total: total as u64, page, page_size: size, items })
    }

    fn count_rows(&self) -> Result<(u64, u64)> {
        let conn = self.connect()?;
        let p: i64 = conn.query_row("SELECT count(*) FROM patients", [], |r| r.get(0))?;
        let s: i64 = conn.query_row("SELECT count(*) FROM screenings", [], |r| r.get(0))?;
        Ok((p as u64, s as u64))
    }
}
