//! Confidence filtering, greedy NMS and the prediction file format.
//!
//! Suppression never touches orientation: a kept detection reports the angle
//! its own channel decoded.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::assignment::Geometry;
use crate::dataset::Letterbox;
use crate::embedding::{decode_all, RawPrediction, UnifiedEmbedding};
use crate::error::{Error, Result};
use crate::kinds::{iou, Box2D, Corners};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub image_id: u64,
    pub bbox: Box2D,
    pub score: f64,
    /// Degrees in `[0, 360)`.
    pub orientation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMode {
    /// `p`
    #[default]
    Objectness,
    /// `p * c`
    ObjectnessTimesClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostprocessParams {
    pub conf_thresh: f64,
    pub iou_thresh: f64,
    pub score: ScoreMode,
}

impl Default for PostprocessParams {
    fn default() -> Self {
        Self {
            conf_thresh: 0.25,
            iou_thresh: 0.45,
            score: ScoreMode::Objectness,
        }
    }
}

impl PostprocessParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.conf_thresh) {
            return Err(Error::Config(format!(
                "postprocess.conf_thresh must lie in [0, 1], got {}",
                self.conf_thresh
            )));
        }
        if !(self.iou_thresh > 0.0 && self.iou_thresh < 1.0) {
            return Err(Error::Config(format!(
                "postprocess.iou_thresh must lie in (0, 1), got {}",
                self.iou_thresh
            )));
        }
        Ok(())
    }
}

pub fn score_of(e: &UnifiedEmbedding, mode: ScoreMode) -> f64 {
    match mode {
        ScoreMode::Objectness => e.objectness,
        ScoreMode::ObjectnessTimesClass => e.objectness * e.class_score,
    }
}

/// Keeps channels scoring strictly above `conf_thresh`, in input order.
pub fn confidence_filter(
    image_id: u64,
    embeddings: &[UnifiedEmbedding],
    conf_thresh: f64,
    mode: ScoreMode,
) -> Vec<Detection> {
    embeddings
        .iter()
        .filter_map(|e| {
            let score = score_of(e, mode);
            (score > conf_thresh).then(|| Detection {
                image_id,
                bbox: e.bbox,
                score,
                orientation: e.orientation_degrees(),
            })
        })
        .collect()
}

/// Greedy NMS over one image's detections. Highest score first, ties broken
/// by input position; a detection is dropped when its IoU with an already
/// kept one exceeds `iou_thresh`.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    // stable: equal scores keep input order
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut keep: Vec<Detection> = Vec::new();
    for i in order {
        let d = &dets[i];
        if keep.iter().all(|k| iou(&k.bbox, &d.bbox) <= iou_thresh) {
            keep.push(*d);
        }
    }
    keep
}

/// [`nms`] applied within each image; images in ascending id order.
pub fn nms_per_image(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut by_image: BTreeMap<u64, Vec<Detection>> = BTreeMap::new();
    for d in dets {
        by_image.entry(d.image_id).or_default().push(*d);
    }
    by_image
        .values()
        .flat_map(|v| nms(v, iou_thresh))
        .collect()
}

/// Decode, filter, suppress, and map boxes back to original-image pixels.
pub fn detect(
    image_id: u64,
    raw: &RawPrediction,
    geom: &Geometry,
    letterbox: &Letterbox,
    params: &PostprocessParams,
) -> Result<Vec<Detection>> {
    let embs = decode_all(raw, &geom.grid, &geom.anchors)?;
    let kept = nms(
        &confidence_filter(image_id, &embs, params.conf_thresh, params.score),
        params.iou_thresh,
    );
    Ok(kept
        .into_iter()
        .map(|d| Detection {
            bbox: letterbox.invert(&d.bbox),
            ..d
        })
        .collect())
}

// ---------------------------------------------------------------------------
// prediction file: csv, one detection per row, six decimals

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    image_id: u64,
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
    score: f64,
    orientation_deg: f64,
}

fn six(v: f64) -> String {
    let s = format!("{v:.6}");
    if s == "-0.000000" {
        "0.000000".into()
    } else {
        s
    }
}

pub fn write_predictions<W: Write>(out: W, dets: &[Detection]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Data {
        path: Default::default(),
        message: e.to_string(),
    };
    w.write_record([
        "image_id",
        "x1",
        "y1",
        "x2",
        "y2",
        "score",
        "orientation_deg",
    ])
    .map_err(io)?;
    for d in dets {
        let c = d.bbox.to_corners();
        let mut ori = six(d.orientation);
        if ori == "360.000000" {
            ori = six(0.0);
        }
        w.write_record([
            d.image_id.to_string(),
            six(c.x1),
            six(c.y1),
            six(c.x2),
            six(c.y2),
            six(d.score),
            ori,
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io("<predictions>", e))?;
    Ok(())
}

pub fn predictions_to_string(dets: &[Detection]) -> String {
    let mut buf = Vec::new();
    write_predictions(&mut buf, dets).expect("writing to memory");
    String::from_utf8(buf).expect("csv output is utf-8")
}

/// Scores are accepted in `[0, 1]`: six-decimal rounding can take a tiny
/// positive score to zero.
pub fn read_predictions<R: Read>(input: R, path: &Path) -> Result<Vec<Detection>> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for (line, row) in r.deserialize::<Row>().enumerate() {
        let err = |message: String| Error::Data {
            path: path.to_path_buf(),
            message: format!("record {}: {message}", line + 1),
        };
        let row = row.map_err(|e| err(e.to_string()))?;
        let bbox = Box2D::from_corners(Corners {
            x1: row.x1,
            y1: row.y1,
            x2: row.x2,
            y2: row.y2,
        })
        .map_err(|e| err(e.to_string()))?;
        if !(0.0..=1.0).contains(&row.score) {
            return Err(err(format!("score {} outside [0, 1]", row.score)));
        }
        let orientation = crate::kinds::OrientationAngle::from_degrees(row.orientation_deg)
            .map_err(|e| err(e.to_string()))?
            .degrees();
        out.push(Detection {
            image_id: row.image_id,
            bbox,
            score: row.score,
            orientation,
        });
    }
    Ok(out)
}

pub fn load_predictions(path: &Path) -> Result<Vec<Detection>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_predictions(f, path)
}
