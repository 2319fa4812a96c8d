//! File formats: detections/ground truth as JSON lines, features and sweep
//! results as CSV with `#`-prefixed metadata lines, models and head weights
//! as JSON. Loaders validate invariants and name the offending line.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::{CalibrationErrors, ReliabilityRow};
use crate::conv::{DetectorHead, FeatureMap};
use crate::cv::CvReport;
use crate::detection::{BoundingBox, GroundTruthObject, ImageSample, Instance};
use crate::error::{Error, Result};
use crate::features::{FeatureRow, FeatureTable};
use crate::pipeline::SweepResult;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct JsonGt {
    bbox: [f64; 4],
    class_id: usize,
}

#[derive(Serialize, Deserialize)]
struct JsonInstance {
    bbox: [f64; 4],
    score: f64,
    class_id: usize,
    class_probs: Vec<f64>,
    anchor_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    raw_outputs: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct JsonImage {
    image_id: String,
    width: f64,
    height: f64,
    predictions: Vec<JsonInstance>,
    ground_truth: Vec<JsonGt>,
}

fn to_json_image(s: &ImageSample) -> JsonImage {
    JsonImage {
        image_id: s.image_id.clone(),
        width: s.image_width,
        height: s.image_height,
        predictions: s
            .predictions
            .iter()
            .map(|p| JsonInstance {
                bbox: [p.bbox.x_min, p.bbox.y_min, p.bbox.x_max, p.bbox.y_max],
                score: p.score,
                class_id: p.class_id,
                class_probs: p.class_probs.clone(),
                anchor_index: p.anchor_index,
                raw_outputs: p.raw_outputs.clone(),
            })
            .collect(),
        ground_truth: s
            .ground_truth
            .iter()
            .map(|g| JsonGt {
                bbox: [g.bbox.x_min, g.bbox.y_min, g.bbox.x_max, g.bbox.y_max],
                class_id: g.class_id,
            })
            .collect(),
    }
}

fn from_json_image(j: JsonImage) -> Result<ImageSample> {
    let mut sample = ImageSample {
        image_id: j.image_id,
        image_width: j.width,
        image_height: j.height,
        predictions: j
            .predictions
            .into_iter()
            .map(|p| {
                Ok(Instance {
                    bbox: BoundingBox::new(p.bbox[0], p.bbox[1], p.bbox[2], p.bbox[3])?,
                    score: p.score,
                    class_probs: p.class_probs,
                    class_id: p.class_id,
                    anchor_index: p.anchor_index,
                    raw_outputs: p.raw_outputs,
                })
            })
            .collect::<Result<Vec<_>>>()?,
        ground_truth: j
            .ground_truth
            .into_iter()
            .map(|g| {
                Ok(GroundTruthObject {
                    bbox: BoundingBox::new(g.bbox[0], g.bbox[1], g.bbox[2], g.bbox[3])?,
                    class_id: g.class_id,
                })
            })
            .collect::<Result<Vec<_>>>()?,
    };
    sample.validate_and_clip()?;
    Ok(sample)
}

pub fn save_detections(path: &Path, samples: &[ImageSample]) -> Result<()> {
    let mut out = fs::File::create(path)?;
    for s in samples {
        let line = serde_json::to_string(&to_json_image(s))
            .map_err(|e| Error::internal(format!("detections serialization failed: {e}")))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn load_detections(path: &Path) -> Result<Vec<ImageSample>> {
    let file = fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut samples = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let j: JsonImage = serde_json::from_str(&line).map_err(|e| {
            Error::validation(format!("{}:{}: malformed image record: {e}", path.display(), lineno + 1))
        })?;
        let sample = from_json_image(j).map_err(|e| {
            Error::validation(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        samples.push(sample);
    }
    if samples.is_empty() {
        return Err(Error::validation(format!("{}: no image records", path.display())));
    }
    Ok(samples)
}

#[derive(Serialize, Deserialize)]
struct JsonInput {
    image_id: String,
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

pub fn save_inputs(path: &Path, inputs: &[(String, FeatureMap)]) -> Result<()> {
    let mut out = fs::File::create(path)?;
    for (id, fm) in inputs {
        let rec = JsonInput {
            image_id: id.clone(),
            channels: fm.channels,
            height: fm.height,
            width: fm.width,
            values: fm.values.clone(),
        };
        let line = serde_json::to_string(&rec)
            .map_err(|e| Error::internal(format!("input serialization failed: {e}")))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn load_inputs(path: &Path) -> Result<Vec<(String, FeatureMap)>> {
    let file = fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut inputs = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let j: JsonInput = serde_json::from_str(&line).map_err(|e| {
            Error::validation(format!("{}:{}: malformed input record: {e}", path.display(), lineno + 1))
        })?;
        let fm = FeatureMap::from_values(j.channels, j.height, j.width, j.values)
            .map_err(|e| Error::validation(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        inputs.push((j.image_id, fm));
    }
    Ok(inputs)
}

pub fn save_head(path: &Path, det: &DetectorHead) -> Result<()> {
    let json = serde_json::to_string_pretty(det)
        .map_err(|e| Error::internal(format!("head serialization failed: {e}")))?;
    fs::write(path, json)?;
    Ok(())
}

pub fn load_head(path: &Path) -> Result<DetectorHead> {
    let text = fs::read_to_string(path)?;
    let det: DetectorHead = serde_json::from_str(&text)
        .map_err(|e| Error::validation(format!("{}: malformed head JSON: {e}", path.display())))?;
    det.validate()?;
    Ok(det)
}

pub fn save_model(path: &Path, model: &crate::gbt::GbtModel) -> Result<()> {
    fs::write(path, crate::gbt::to_json(model)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<crate::gbt::GbtModel> {
    let text = fs::read_to_string(path)?;
    crate::gbt::from_json(&text)
        .map_err(|e| Error::validation(format!("{}: {e}", path.display())))
}

/// Features CSV: one `#` metadata line carrying the format version and
/// schema id, a header row naming every column, then one row per box.
pub fn save_features(path: &Path, table: &FeatureTable) -> Result<()> {
    table.validate()?;
    if table.schema_id.contains('\n') {
        return Err(Error::validation("schema id must be single-line"));
    }
    let mut out = String::new();
    out.push_str(&format!("# detgrad-features v{FORMAT_VERSION} schema={}\n", table.schema_id));
    out.push_str("image_id,box_index,score,label_tpfp,target_iou");
    for c in &table.columns {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for r in &table.rows {
        if r.image_id.contains(',') {
            return Err(Error::validation(format!("image id '{}' contains a comma", r.image_id)));
        }
        out.push_str(&format!(
            "{},{},{},{},{}",
            r.image_id, r.box_index, r.score, r.label_tpfp, r.target_iou
        ));
        for v in &r.values {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_features(path: &Path) -> Result<FeatureTable> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, meta) = lines
        .next()
        .ok_or_else(|| Error::validation(format!("{}: empty features file", path.display())))?;
    let schema_id = parse_meta_line(path, meta, "detgrad-features")?;
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::validation(format!("{}: missing header row", path.display())))?;
    let cols: Vec<&str> = header.split(',').collect();
    let fixed = ["image_id", "box_index", "score", "label_tpfp", "target_iou"];
    if cols.len() < fixed.len() || cols[..fixed.len()] != fixed {
        return Err(Error::validation(format!(
            "{}: header must start with {}",
            path.display(),
            fixed.join(",")
        )));
    }
    let columns: Vec<String> = cols[fixed.len()..].iter().map(|s| s.to_string()).collect();
    let mut rows = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != fixed.len() + columns.len() {
            return Err(Error::validation(format!(
                "{}:{}: expected {} fields, found {}",
                path.display(),
                lineno + 1,
                fixed.len() + columns.len(),
                fields.len()
            )));
        }
        let parse_f = |s: &str, what: &str| -> Result<f64> {
            let v: f64 = s.parse().map_err(|_| {
                Error::validation(format!("{}:{}: bad {what} '{s}'", path.display(), lineno + 1))
            })?;
            if !v.is_finite() {
                return Err(Error::validation(format!(
                    "{}:{}: non-finite {what}",
                    path.display(),
                    lineno + 1
                )));
            }
            Ok(v)
        };
        let row = FeatureRow {
            image_id: fields[0].to_string(),
            box_index: fields[1].parse().map_err(|_| {
                Error::validation(format!("{}:{}: bad box_index", path.display(), lineno + 1))
            })?,
            score: parse_f(fields[2], "score")?,
            label_tpfp: match fields[3] {
                "0" => 0,
                "1" => 1,
                other => {
                    return Err(Error::validation(format!(
                        "{}:{}: label_tpfp must be 0 or 1, found '{other}'",
                        path.display(),
                        lineno + 1
                    )))
                }
            },
            target_iou: parse_f(fields[4], "target_iou")?,
            values: fields[fixed.len()..]
                .iter()
                .map(|s| parse_f(s, "feature value"))
                .collect::<Result<Vec<_>>>()?,
        };
        rows.push(row);
    }
    let table = FeatureTable { schema_id, columns, rows };
    table.validate()?;
    Ok(table)
}

fn parse_meta_line(path: &Path, line: &str, kind: &str) -> Result<String> {
    let prefix = format!("# {kind} v");
    let rest = line.strip_prefix(&prefix).ok_or_else(|| {
        Error::validation(format!(
            "{}: expected metadata line '{prefix}<version> ...'",
            path.display()
        ))
    })?;
    let (version, tail) = rest.split_once(' ').unwrap_or((rest, ""));
    let version: u32 = version.parse().map_err(|_| {
        Error::validation(format!("{}: bad format version '{version}'", path.display()))
    })?;
    if version != FORMAT_VERSION {
        return Err(Error::validation(format!(
            "{}: format version {version} unsupported (expected {FORMAT_VERSION})",
            path.display()
        )));
    }
    Ok(tail.strip_prefix("schema=").unwrap_or(tail).to_string())
}

/// Sweep CSV: metadata line, then `threshold,map` or `threshold,fp,fn` rows.
pub fn save_sweeps(path: &Path, kind: &str, sweeps: &[SweepResult]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("# detgrad-sweep v{FORMAT_VERSION} grid={kind}\n"));
    match kind {
        "map" => out.push_str("source,threshold,map\n"),
        "fpfn" => out.push_str("source,threshold,fp,fn\n"),
        other => return Err(Error::internal(format!("unknown sweep kind '{other}'"))),
    }
    for sweep in sweeps {
        for p in &sweep.points {
            match kind {
                "map" => out.push_str(&format!(
                    "{},{},{}\n",
                    sweep.source,
                    p.threshold,
                    p.map.unwrap_or(f64::NAN)
                )),
                _ => out.push_str(&format!(
                    "{},{},{},{}\n",
                    sweep.source,
                    p.threshold,
                    p.false_positives.unwrap_or(0),
                    p.false_negatives.unwrap_or(0)
                )),
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reliability CSV: per-model calibration errors as metadata lines plus the
/// full bin table.
pub fn save_reliability(
    path: &Path,
    entries: &[(String, Vec<ReliabilityRow>, CalibrationErrors)],
) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("# detgrad-reliability v{FORMAT_VERSION}\n"));
    for (model, _, e) in entries {
        out.push_str(&format!("# model={model} mce={} ace={} ece={}\n", e.mce, e.ace, e.ece));
    }
    out.push_str("model,bin_low,bin_high,count,acc,conf\n");
    for (model, rows, _) in entries {
        for r in rows {
            out.push_str(&format!(
                "{model},{},{},{},{},{}\n",
                r.bin_low, r.bin_high, r.count, r.acc, r.conf
            ));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Parse a reliability CSV back into per-model diagram rows and errors.
pub fn load_reliability(
    path: &Path,
) -> Result<Vec<(String, Vec<ReliabilityRow>, CalibrationErrors)>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, meta) = lines
        .next()
        .ok_or_else(|| Error::validation(format!("{}: empty reliability file", path.display())))?;
    parse_meta_line(path, meta, "detgrad-reliability")?;
    let mut entries: Vec<(String, Vec<ReliabilityRow>, CalibrationErrors)> = Vec::new();
    let mut header_seen = false;
    for (lineno, line) in lines {
        if let Some(rest) = line.strip_prefix("# model=") {
            let mut model = String::new();
            let mut errs = CalibrationErrors { mce: 0.0, ace: 0.0, ece: 0.0 };
            for (i, field) in rest.split(' ').enumerate() {
                let (key, value) = field.split_once('=').unwrap_or(("", field));
                let parse = |v: &str| -> Result<f64> {
                    v.parse().map_err(|_| {
                        Error::validation(format!(
                            "{}:{}: bad calibration value '{v}'",
                            path.display(),
                            lineno + 1
                        ))
                    })
                };
                match (i, key) {
                    (0, _) => model = field.to_string(),
                    (_, "mce") => errs.mce = parse(value)?,
                    (_, "ace") => errs.ace = parse(value)?,
                    (_, "ece") => errs.ece = parse(value)?,
                    _ => {}
                }
            }
            entries.push((model, Vec::new(), errs));
            continue;
        }
        if !header_seen {
            header_seen = true; // column header row
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::validation(format!(
                "{}:{}: expected 6 fields",
                path.display(),
                lineno + 1
            )));
        }
        let entry = entries
            .iter_mut()
            .find(|(m, _, _)| m == fields[0])
            .ok_or_else(|| {
                Error::validation(format!(
                    "{}:{}: unknown model '{}'",
                    path.display(),
                    lineno + 1,
                    fields[0]
                ))
            })?;
        let parse = |v: &str| -> Result<f64> {
            v.parse().map_err(|_| {
                Error::validation(format!("{}:{}: bad number '{v}'", path.display(), lineno + 1))
            })
        };
        entry.1.push(ReliabilityRow {
            bin_low: parse(fields[1])?,
            bin_high: parse(fields[2])?,
            count: fields[3].parse().map_err(|_| {
                Error::validation(format!("{}:{}: bad count", path.display(), lineno + 1))
            })?,
            acc: parse(fields[4])?,
            conf: parse(fields[5])?,
        });
    }
    Ok(entries)
}

/// Cross-validation metrics CSV: per-fold rows plus mean/std summary rows.
pub fn save_cv_reports(path: &Path, reports: &[CvReport]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("# detgrad-cv v{FORMAT_VERSION}\n"));
    out.push_str("source,task,fold,n_test,primary,secondary\n");
    for r in reports {
        let task = match r.task {
            crate::cv::MetaTask::Classify => "classify",
            crate::cv::MetaTask::Regress => "regress",
        };
        for f in &r.per_fold {
            out.push_str(&format!(
                "{},{task},{},{},{},{}\n",
                r.source,
                f.fold,
                f.n_test,
                f.primary,
                f.secondary.map(|s| s.to_string()).unwrap_or_default()
            ));
        }
        out.push_str(&format!(
            "{},{task},mean,,{},{}\n",
            r.source,
            r.mean_primary,
            r.mean_secondary.map(|s| s.to_string()).unwrap_or_default()
        ));
        out.push_str(&format!(
            "{},{task},std,,{},{}\n",
            r.source,
            r.std_primary,
            r.std_secondary.map(|s| s.to_string()).unwrap_or_default()
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Out-of-fold predictions CSV keyed by `(image_id, box_index)`.
pub fn save_predictions(
    path: &Path,
    source: &str,
    task: &str,
    preds: &[(String, usize, f64)],
) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("# detgrad-preds v{FORMAT_VERSION} source={source} task={task}\n"));
    out.push_str("image_id,box_index,prediction\n");
    for (id, idx, p) in preds {
        out.push_str(&format!("{id},{idx},{p}\n"));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Certification report CSV.
pub fn save_cert_rows(
    path: &Path,
    rows: &[(String, String, String, String, String)],
) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("# detgrad-flops v{FORMAT_VERSION}\n"));
    out.push_str("check,params,closed_form,measured,status\n");
    for (check, params, closed, measured, status) in rows {
        out.push_str(&format!("{check},{params},{closed},{measured},{status}\n"));
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_synthetic_corpus, SyntheticCorpusConfig};

    #[test]
    fn detections_round_trip_is_structurally_equal() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let cfg = SyntheticCorpusConfig { n_images: 4, seed: 2, ..Default::default() };
        let (samples, _) = generate_synthetic_corpus(&cfg).unwrap();
        save_detections(&path, &samples).unwrap();
        let back = load_detections(&path).unwrap();
        assert_eq!(samples.len(), back.len());
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.image_id, b.image_id);
            assert_eq!(a.predictions, b.predictions);
            assert_eq!(a.ground_truth, b.ground_truth);
        }
    }

    #[test]
    fn truncated_jsonl_line_errors_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let cfg = SyntheticCorpusConfig { n_images: 2, seed: 3, ..Default::default() };
        let (samples, _) = generate_synthetic_corpus(&cfg).unwrap();
        save_detections(&path, &samples).unwrap();
        let mut text = fs::read_to_string(&path).unwrap();
        let cut = text.len() - 40;
        text.truncate(cut);
        fs::write(&path, text).unwrap();
        let err = load_detections(&path).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
    }

    #[test]
    fn features_csv_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        let cfg = SyntheticCorpusConfig { n_images: 5, seed: 4, ..Default::default() };
        let (_, table) = generate_synthetic_corpus(&cfg).unwrap();
        save_features(&path, &table).unwrap();
        let back = load_features(&path).unwrap();
        assert_eq!(back.schema_id, table.schema_id);
        assert_eq!(back.columns, table.columns);
        assert_eq!(back.rows.len(), table.rows.len());
        for (a, b) in table.rows.iter().zip(&back.rows) {
            assert_eq!(a.image_id, b.image_id);
            assert_eq!(a.box_index, b.box_index);
            assert_eq!(a.score.to_bits(), b.score.to_bits());
            assert_eq!(a.target_iou.to_bits(), b.target_iou.to_bits());
            for (x, y) in a.values.iter().zip(&b.values) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn reliability_csv_round_trips_to_identical_bins() {
        use crate::calibration::{
            bin_reliability, calibration_errors, reliability_diagram_data,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rel.csv");
        let conf = vec![0.12, 0.55, 0.57, 0.93, 0.95, 0.99, 0.31];
        let labels = vec![false, true, false, true, true, true, false];
        let bins = bin_reliability(&conf, &labels, 10).unwrap();
        let errs = calibration_errors(&bins).unwrap();
        let rows = reliability_diagram_data(&bins);
        save_reliability(&path, &[("score".to_string(), rows.clone(), errs)]).unwrap();
        let back = load_reliability(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].0, "score");
        assert_eq!(back[0].1, rows);
        assert_eq!(back[0].2, errs);
        // the parsed rows reconstruct the original bins exactly
        for (r, i) in back[0].1.iter().zip(0..bins.n_bins) {
            assert_eq!(r.count, bins.counts[i]);
            assert_eq!(r.acc.to_bits(), bins.acc[i].to_bits());
            assert_eq!(r.conf.to_bits(), bins.conf[i].to_bits());
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        fs::write(&path, "# detgrad-features v9 schema=x\nimage_id,box_index,score,label_tpfp,target_iou\n").unwrap();
        let err = load_features(&path).unwrap_err();
        assert!(err.to_string().contains("version 9"), "{err}");
    }
}
