//! Single-page A4 screening report.

use std::io::Cursor;
use std::path::Path;

use image::RgbImage;
use lopdf::content::{Content, Operation};
use lopdf::{dictionary, Document, Object, Stream};

use crate::clinical::DISCLAIMER;
use crate::error::{Result, ServiceError};
use crate::persistence::{PatientRecord, ScreeningRecord};

pub const THUMBNAIL_MAX_SIDE: u32 = 300;
const PAGE_W: f64 = 595.0;
const PAGE_H: f64 = 842.0;
const MARGIN: f64 = 56.0;

#[derive(Debug, Clone)]
pub struct ReportPayload {
    pub patient: PatientRecord,
    pub screening: ScreeningRecord,
    pub thumbnail: Option<RgbImage>,
}

/// Loads the stored upload and scales it to fit the thumbnail box. A missing
/// or unreadable file yields `None` and a warning.
pub fn load_thumbnail(data_dir: &Path, image_ref: &str) -> Option<RgbImage> {
    let path = data_dir.join(image_ref);
    match image::open(&path) {
        Ok(img) => Some(img.thumbnail(THUMBNAIL_MAX_SIDE, THUMBNAIL_MAX_SIDE).to_rgb8()),
        Err(e) => {
            log::warn!("report image {} unavailable: {e}", path.display());
            None
        }
    }
}

/// Report lines as label/value pairs, in display order.
pub fn report_fields(payload: &ReportPayload) -> Vec<(&'static str, String)> {
    let s = &payload.screening;
    vec![
        ("Patient", payload.patient.name.clone()),
        ("Sex", payload.patient.sex.as_str().to_string()),
        ("Date", s.timestamp.format("%Y-%m-%dT%H:%M:%SZ").to_string()),
        ("Screening ID", s.id.to_string()),
        ("Diagnosis", s.predicted_label.display().to_string()),
        ("Confidence", format!("{:.1}%", s.confidence * 100.0)),
        ("Hgb band", s.hgb_band.clone()),
        ("Model version", s.model_version.clone()),
    ]
}

/// WinAnsi bytes; `≥` is remapped to the otherwise unused code 0x81.
fn encode(text: &str) -> Vec<u8> {
    text.chars()
        .map(|c| match c {
            '≥' => 0x81,
            '€' => 0x80,
            '…' => 0x85,
            '‘' => 0x91,
            '’' => 0x92,
            '“' => 0x93,
            '”' => 0x94,
            '•' => 0x95,
            '–' => 0x96,
            '—' => 0x97,
            c if (' '..='~').contains(&c) => c as u8,
            c if ('\u{a0}'..='\u{ff}').contains(&c) => c as u32 as u8,
            _ => b'?',
        })
        .collect()
}

const TO_UNICODE: &str = "/CIDInit /ProcSet findresource begin
12 dict begin
begincmap
/CIDSystemInfo << /Registry (Adobe) /Ordering (UCS) /Supplement 0 >> def
/CMapName /WinAnsiGe def
/CMapType 2 def
1 begincodespacerange
<00> <FF>
endcodespacerange
10 beginbfchar
<80> <20AC>
<81> <2265>
<85> <2026>
<91> <2018>
<92> <2019>
<93> <201C>
<94> <201D>
<95> <2022>
<96> <2013>
<97> <2014>
endbfchar
2 beginbfrange
<20> <7E> <0020>
<A0> <FF> <00A0>
endbfrange
endcmap
CMapName currentdict /CMap defineresource pop
end
end
";

fn text(ops: &mut Vec<Operation>, font: &str, size: f64, x: f64, y: f64, s: &str) {
    ops.push(Operation::new("BT", vec![]));
    ops.push(Operation::new("Tf", vec![font.into(), size.into()]));
    ops.push(Operation::new("Td", vec![x.into(), y.into()]));
    ops.push(Operation::new("Tj", vec![Object::string_literal(encode(s))]));
    ops.push(Operation::new("ET", vec![]));
}

pub fn render_report(payload: &ReportPayload) -> Result<Vec<u8>> {
    let mut doc = Document::with_version("1.5");
    let pages_id = doc.new_object_id();
    let encoding_id = doc.add_object(dictionary! {
        "Type" => "Encoding",
        "BaseEncoding" => "WinAnsiEncoding",
        "Differences" => vec![129.into(), Object::Name(b"greaterequal".to_vec())],
    });
    let cmap_id = doc.add_object(Stream::new(dictionary! {}, TO_UNICODE.as_bytes().to_vec()));
    let font = |base: &str| {
        dictionary! {
            "Type" => "Font",
            "Subtype" => "Type1",
            "BaseFont" => Object::Name(base.as_bytes().to_vec()),
            "Encoding" => encoding_id,
            "ToUnicode" => cmap_id,
        }
    };
    let regular = doc.add_object(font("Helvetica"));
    let bold = doc.add_object(font("Helvetica-Bold"));

    let mut ops = Vec::new();
    let mut xobjects = lopdf::Dictionary::new();
    let mut y = PAGE_H - MARGIN - 10.0;
    text(&mut ops, "F2", 20.0, MARGIN, y, "AnemiaVision Screening Report");
    y -= 36.0;

    let box_size = 180.0;
    let box_x = PAGE_W - MARGIN - box_size;
    let box_top = y + 12.0;
    for (label, value) in report_fields(payload) {
        text(&mut ops, "F2", 11.0, MARGIN, y, &format!("{label}:"));
        text(&mut ops, "F1", 11.0, MARGIN + 92.0, y, &value);
        y -= 20.0;
    }

    match &payload.thumbnail {
        Some(img) => {
            let mut jpeg = Vec::new();
            image::codecs::jpeg::JpegEncoder::new_with_quality(&mut Cursor::new(&mut jpeg), 85)
                .encode_image(img)
                .map_err(|e| ServiceError::Pdf(e.to_string()))?;
            let (w, h) = (img.width(), img.height());
            let mut stream = Stream::new(
                dictionary! {
                    "Type" => "XObject",
                    "Subtype" => "Image",
                    "Width" => w as i64,
                    "Height" => h as i64,
                    "ColorSpace" => "DeviceRGB",
                    "BitsPerComponent" => 8,
                    "Filter" => "DCTDecode",
                },
                jpeg,
            );
            stream.allows_compression = false;
            let image_id = doc.add_object(stream);
            xobjects.set("Im1", image_id);
            let scale = box_size / f64::from(w.max(h));
            let (dw, dh) = (f64::from(w) * scale, f64::from(h) * scale);
            ops.push(Operation::new("q", vec![]));
            ops.push(Operation::new(
                "cm",
                vec![
                    dw.into(),
                    0.into(),
                    0.into(),
                    dh.into(),
                    (box_x + (box_size - dw) / 2.0).into(),
                    (box_top - dh).into(),
                ],
            ));
            ops.push(Operation::new("Do", vec!["Im1".into()]));
            ops.push(Operation::new("Q", vec![]));
        }
        None => {
            ops.push(Operation::new("q", vec![]));
            ops.push(Operation::new("RG", vec![0.6.into(), 0.6.into(), 0.6.into()]));
            ops.push(Operation::new(
                "re",
                vec![box_x.into(), (box_top - box_size).into(), box_size.into(), box_size.into()],
            ));
            ops.push(Operation::new("S", vec![]));
            ops.push(Operation::new("Q", vec![]));
            text(&mut ops, "F1", 10.0, box_x + 45.0, box_top - box_size / 2.0, "Image unavailable");
        }
    }

    ops.push(Operation::new("RG", vec![0.7.into(), 0.7.into(), 0.7.into()]));
    ops.push(Operation::new("m", vec![MARGIN.into(), (MARGIN + 22.0).into()]));
    ops.push(Operation::new("l", vec![(PAGE_W - MARGIN).into(), (MARGIN + 22.0).into()]));
    ops.push(Operation::new("S", vec![]));
    text(&mut ops, "F2", 10.0, MARGIN, MARGIN, DISCLAIMER);

    let content = Content { operations: ops }.encode().map_err(|e| ServiceError::Pdf(e.to_string()))?;
    let content_id = doc.add_object(Stream::new(dictionary! {}, content));
    let resources_id = doc.add_object(dictionary! {
        "Font" => dictionary! { "F1" => regular, "F2" => bold },
        "XObject" => xobjects,
    });
    let page_id = doc.add_object(dictionary! {
        "Type" => "Page",
        "Parent" => pages_id,
        "Contents" => content_id,
        "Resources" => resources_id,
        "MediaBox" => vec![0.into(), 0.into(), PAGE_W.into(), PAGE_H.into()],
    });
    doc.objects.insert(
        pages_id,
        Object::Dictionary(dictionary! {
            "Type" => "Pages",
            "Kids" => vec![page_id.into()],
            "Count" => 1,
        }),
    );
    let catalog_id = doc.add_object(dictionary! { "Type" => "Catalog", "Pages" => pages_id });
    doc.trailer.set("Root", catalog_id);
    let info_id = doc.add_object(dictionary! {
        "Title" => Object::string_literal("AnemiaVision Screening Report"),
        "Producer" => Object::string_literal("anemia-service"),
    });
    doc.trailer.set("Info", info_id);

    let mut out = Vec::new();
    doc.save_to(&mut out).map_err(|e| ServiceError::Pdf(e.to_string()))?;
    Ok(out)
}
