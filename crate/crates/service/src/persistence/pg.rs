use std::time::Duration;

use postgres::{Client, NoTls, Row};

use super::*;

const SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS patients (
    id BIGSERIAL PRIMARY KEY,
    name TEXT NOT NULL CHECK (length(name) > 0),
    sex TEXT NOT NULL CHECK (sex IN ('female', 'male', 'unspecified')),
    created_at TIMESTAMPTZ NOT NULL,
    UNIQUE (name, sex)
);
CREATE TABLE IF NOT EXISTS screenings (
    id BIGSERIAL PRIMARY KEY,
    patient_id BIGINT NOT NULL REFERENCES patients (id),
    created_at TIMESTAMPTZ NOT NULL,
    image_ref TEXT NOT NULL,
    predicted_label TEXT NOT NULL CHECK (predicted_label IN ('anemic', 'non_anemic')),
    confidence DOUBLE PRECISION NOT NULL CHECK (confidence >= 0 AND confidence <= 1),
    hgb_band TEXT NOT NULL,
    model_version TEXT NOT NULL
);
CREATE INDEX IF NOT EXISTS screenings_newest ON screenings (created_at DESC, id DESC);
";

const SCREENING_COLUMNS: &str =
    "s.id, s.patient_id, s.created_at, s.image_ref, s.predicted_label, s.confidence, s.hgb_band, s.model_version";

/// Postgres store; a fresh connection per operation.
#[derive(Clone)]
pub struct PgStore {
    url: String,
}

impl std::fmt::Debug for PgStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "PgStore({})", redact_url(&self.url))
    }
}

impl PgStore {
    pub fn new(url: String) -> Self {
        PgStore { url }
    }

    fn connect(&self) -> Result<Client> {
        let mut config: postgres::Config =
            self.url.parse().map_err(|_| ServiceError::Config("DATABASE_URL is malformed (value redacted)".into()))?;
        config.connect_timeout(Duration::from_secs(5));
        config.connect(NoTls).map_err(|e| ServiceError::Unreachable(format!("{}: {e}", redact_url(&self.url))))
    }
}

fn screening(row: &Row) -> Result<ScreeningRecord> {
    Ok(ScreeningRecord {
        id: row.try_get(0)?,
        patient_id: row.try_get(1)?,
        timestamp: row.try_get(2)?,
        image_ref: row.try_get(3)?,
        predicted_label: Label::parse(row.try_get(4)?)?,
        confidence: row.try_get(5)?,
        hgb_band: row.try_get(6)?,
        model_version: row.try_get(7)?,
    })
}

fn patient(row: &Row) -> Result<PatientRecord> {
    Ok(PatientRecord {
        id: row.try_get(0)?,
        name: row.try_get(1)?,
        sex: Sex::parse(row.try_get(2)?)?,
        created_at: row.try_get(3)?,
    })
}

impl Store for PgStore {
    fn kind(&self) -> BackendKind {
        BackendKind::ClientServer
    }

    fn ping(&self) -> Result<()> {
        let mut client = self.connect()?;
        client.simple_query("SELECT 1").map_err(|e| ServiceError::Unreachable(e.to_string()))?;
        Ok(())
    }

    fn migrate(&self) -> Result<bool> {
        let mut client = self.connect()?;
        let mut tx = client.transaction()?;
        let existing: i64 = tx
            .query_one(
                "SELECT count(*) FROM information_schema.tables
                 WHERE table_schema = current_schema() AND table_name IN ('patients', 'screenings')",
                &[],
            )?
            .try_get(0)?;
        tx.batch_execute(SCHEMA)?;
        tx.commit()?;
        Ok(existing < 2)
    }

    fn schema(&self) -> Result<Vec<(String, String)>> {
        let mut client = self.connect()?;
        let rows = client.query(
            "SELECT table_name::text, column_name::text FROM information_schema.columns
             WHERE table_schema = current_schema() AND table_name IN ('patients', 'screenings')",
            &[],
        )?;
        let mut out =
            rows.iter().map(|r| Ok((r.try_get(0)?, r.try_get(1)?))).collect::<Result<Vec<(String, String)>>>()?;
        out.sort();
        Ok(out)
    }

    fn upsert_patient(&self, name: &str, sex: Sex) -> Result<PatientRecord> {
        let name = validate_patient_name(name)?;
        let mut client = self.connect()?;
        let mut tx = client.transaction()?;
        tx.execute(
            "INSERT INTO patients (name, sex, created_at) VALUES ($1, $2, $3) ON CONFLICT (name, sex) DO NOTHING",
            &[&name, &sex.as_str(), &now()],
        )?;
        let row = tx.query_one(
            "SELECT id, name, sex, created_at FROM patients WHERE name = $1 AND sex = $2",
            &[&name, &sex.as_str()],
        )?;
        tx.commit()?;
        patient(&row)
    }

    fn get_patient(&self, id: i64) -> Result<Option<PatientRecord>> {
        let mut client = self.connect()?;
        client
            .query_opt("SELECT id, name, sex, created_at FROM patients WHERE id = $1", &[&id])?
            .as_ref()
            .map(patient)
            .transpose()
    }

    fn insert_screening(&self, record: &NewScreening) -> Result<ScreeningRecord> {
        validate_screening(record)?;
        let mut client = self.connect()?;
        let mut tx = client.transaction()?;
        if tx.query_opt("SELECT id FROM patients WHERE id = $1", &[&record.patient_id])?.is_none() {
            return Err(ServiceError::Referential(format!("patient {} does not exist", record.patient_id)));
        }
        let row = tx.query_one(
            "INSERT INTO screenings (patient_id, created_at, image_ref, predicted_label, confidence, hgb_band, model_version)
             VALUES ($1, $2, $3, $4, $5, $6, $7) RETURNING id",
            &[
                &record.patient_id,
                &record.timestamp,
                &record.image_ref,
                &record.predicted_label.as_str(),
                &record.confidence,
                &record.hgb_band,
                &record.model_version,
            ],
        )?;
        tx.commit()?;
        Ok(ScreeningRecord {
            id: row.try_get(0)?,
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
        let mut client = self.connect()?;
        client
            .query_opt(&format!("SELECT {SCREENING_COLUMNS} FROM screenings s WHERE s.id = $1"), &[&id])?
            .as_ref()
            .map(screening)
            .transpose()
    }

    fn list_history(&self, filter: &HistoryFilter, page: u32, page_size: u32) -> Result<HistoryPage> {
        let (page, size, offset) = page_bounds(page, page_size);
        let pattern = like_pattern(filter);
        let mut client = self.connect()?;
        let total: i64 = client
            .query_one(
                "SELECT count(*) FROM screenings s JOIN patients p ON p.id = s.patient_id
                 WHERE lower(p.name) LIKE $1 ESCAPE '\\'",
                &[&pattern],
            )?
            .try_get(0)?;
        let rows = client.query(
            &format!(
                "SELECT {SCREENING_COLUMNS}, p.name, p.sex FROM screenings s JOIN patients p ON p.id = s.patient_id
                 WHERE lower(p.name) LIKE $1 ESCAPE '\\'
                 ORDER BY s.created_at DESC, s.id DESC LIMIT $2 OFFSET $3"
            ),
            &[&pattern, &i64::from(size), &(offset as i64)],
        )?;
        let items = rows
            .iter()
            .map(|r| {
                Ok(HistoryItem {
                    screening: screening(r)?,
                    patient_name: r.try_get(8)?,
                    sex: Sex::parse(r.try_get(9)?)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(HistoryPage { total: total as u64, page, page_size: size, items })
    }

    fn count_rows(&self) -> Result<(u64, u64)> {
        let mut client = self.connect()?;
        let p: i64 = client.query_one("SELECT count(*) FROM patients", &[])?.try_get(0)?;
        let s: i64 = client.query_one("SELECT count(*) FROM screenings", &[])?.try_get(0)?;
        Ok((p as u64, s as u64))
    }
}
