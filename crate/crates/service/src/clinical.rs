//! Qualitative haemoglobin band wording and the screening disclaimer.

use crate::persistence::{Label, Sex};

pub const DISCLAIMER: &str = "Screening tool only — not a substitute for laboratory diagnosis.";

/// WHO anaemia cut-offs in g/dL.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClinicalThresholds {
    pub female_gdl: f64,
    pub male_gdl: f64,
}

pub const WHO_THRESHOLDS: ClinicalThresholds = ClinicalThresholds { female_gdl: 12.0, male_gdl: 13.0 };

/// Confidence at or above which an anemic call is worded as "well below".
pub const STRONG_CONFIDENCE: f64 = 0.85;

impl ClinicalThresholds {
    /// Unspecified sex uses the lower, female cut-off.
    pub fn for_sex(&self, sex: Sex) -> f64 {
        match sex {
            Sex::Male => self.male_gdl,
            Sex::Female | Sex::Unspecified => self.female_gdl,
        }
    }
}

pub fn hgb_band(label: Label, confidence: f64, sex: Sex) -> String {
    let t = WHO_THRESHOLDS.for_sex(sex);
    match label {
        Label::NonAnemic => format!("likely ≥ {t} g/dL (normal range)"),
        Label::Anemic if confidence >= STRONG_CONFIDENCE => format!("likely well below {t} g/dL"),
        Label::Anemic => format!("possibly below {t} g/dL (borderline)"),
    }
}
