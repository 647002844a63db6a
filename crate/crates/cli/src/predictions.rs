//! Predictions CSV: `actual,predicted[,score]`, labels as class index or name.

use std::path::Path;

use anemia_core::data::CLASS_NAMES;
use serde::Deserialize;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionRow {
    pub actual: usize,
    pub predicted: usize,
    /// Probability of the anemic class.
    pub score: Option<f64>,
}

#[derive(Deserialize)]
struct RawRow {
    actual: String,
    predicted: String,
    score: Option<f64>,
}

fn parse_label(raw: &str) -> Result<usize, String> {
    let raw = raw.trim();
    if let Ok(i) = raw.parse::<usize>() {
        if i < CLASS_NAMES.len() {
            return Ok(i);
        }
    }
    let norm = raw.to_ascii_lowercase().replace(['-', ' '], "_");
    CLASS_NAMES.iter().position(|n| *n == norm).ok_or_else(|| format!("unknown label {raw:?}"))
}

pub fn parse(text: &str) -> Result<Vec<PredictionRow>, String> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (i, rec) in reader.deserialize::<RawRow>().enumerate() {
        let raw = rec.map_err(|e| format!("row {}: {e}", i + 1))?;
        rows.push(PredictionRow {
            actual: parse_label(&raw.actual).map_err(|e| format!("row {}: {e}", i + 1))?,
            predicted: parse_label(&raw.predicted).map_err(|e| format!("row {}: {e}", i + 1))?,
            score: raw.score,
        });
    }
    if rows.is_empty() {
        return Err("no prediction rows".into());
    }
    Ok(rows)
}

pub fn read(path: &Path) -> Result<Vec<PredictionRow>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    parse(&text).map_err(|e| format!("{}: {e}", path.display()))
}
