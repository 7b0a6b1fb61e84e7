//! Browser bindings: interval overlap, scoring a prediction file against
//! annotations, and synthetic annotation generation. Everything goes in and
//! out as strings so the page needs no glue beyond `wasm-bindgen`.

use wasm_bindgen::prelude::*;

use videolights::data::{parse_dataset, write_dataset, LEVEL_MAX};
use videolights::metrics::{compute_report, giou_1d, iou_1d, read_predictions};
use videolights::train::{datagen, parse_manifest, DatagenOptions};

fn js(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// `[iou, giou]` of two `[start, end]` windows.
#[wasm_bindgen]
pub fn overlap(s1: f64, e1: f64, s2: f64, e2: f64) -> Result<Vec<f64>, JsError> {
    let (a, b) = ([s1, e1], [s2, e2]);
    Ok(vec![iou_1d(&a, &b).map_err(js)?, giou_1d(&a, &b).map_err(js)?])
}

/// Metric report JSON for prediction JSONL against annotation JSONL.
#[wasm_bindgen]
pub fn score(predictions: &str, annotations: &str) -> Result<String, JsError> {
    let preds = read_predictions(predictions.as_bytes()).map_err(js)?;
    let anns = parse_dataset(annotations).map_err(js)?;
    let report = compute_report(&preds, &anns, LEVEL_MAX).map_err(js)?;
    serde_json::to_string_pretty(&report).map_err(js)
}

/// Annotation JSONL for a manifest of `{"vid", "duration"}` lines.
#[wasm_bindgen]
pub fn synthesize(manifest: &str, clip_len: f64) -> Result<String, JsError> {
    let entries = parse_manifest(manifest).map_err(js)?;
    let opts = DatagenOptions { clip_len, ..Default::default() };
    let anns = datagen(&entries, &opts).map_err(js)?;
    let mut buf = Vec::new();
    write_dataset(&mut buf, &anns).map_err(js)?;
    String::from_utf8(buf).map_err(js)
}
