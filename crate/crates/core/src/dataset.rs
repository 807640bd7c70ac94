//! Annotation ingestion and dataset reconstruction.
//!
//! Person boxes come from a detection-benchmark annotation file. Orientation
//! labels are merged in from two flat label files: strong labels from the
//! orientation benchmark, and weak labels for the person instances the
//! benchmark left out on the images it does label. The merged result is
//! written back in the detection-benchmark layout with two extra
//! per-annotation fields, `orientation` and `weak`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::error::{Error, Result};
use crate::kinds::{Box2D, OrientationAngle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    OrientationBenchmark,
    Restored,
}

/// Ground-truth person.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnotatedInstance {
    pub image_id: u64,
    pub annotation_id: u64,
    pub bbox: Box2D,
    pub orientation: Option<OrientationAngle>,
    pub weak: bool,
    pub source: Source,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: u64,
    pub width: u32,
    pub height: u32,
}

// ---------------------------------------------------------------------------
// detection-benchmark layout

#[derive(Debug, Deserialize)]
struct CocoFile {
    #[serde(default)]
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    categories: Vec<CocoCategory>,
}

#[derive(Debug, Deserialize)]
struct CocoImage {
    id: u64,
    width: u32,
    height: u32,
    #[serde(default)]
    file_name: Option<String>,
}

#[derive(Debug, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    #[serde(default)]
    iscrowd: u8,
    #[serde(default)]
    orientation: Option<f64>,
    #[serde(default)]
    weak: Option<bool>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

/// Counts of annotations set aside while loading.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LoadCounts {
    pub non_person: usize,
    pub unknown_category: usize,
    pub crowd: usize,
    pub degenerate: usize,
    pub unknown_image: usize,
}

impl LoadCounts {
    /// Annotations skipped with a warning (as opposed to filtered by design).
    pub fn warnings(&self) -> usize {
        self.unknown_category + self.degenerate + self.unknown_image
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PersonAnnotations {
    pub images: BTreeMap<u64, ImageInfo>,
    /// Sorted by `(image_id, annotation_id)`.
    pub instances: Vec<AnnotatedInstance>,
    pub counts: LoadCounts,
    /// File names, kept for the merged output.
    file_names: BTreeMap<u64, String>,
}

impl PersonAnnotations {
    pub fn get(&self, annotation_id: u64) -> Option<&AnnotatedInstance> {
        self.instances.iter().find(|i| i.annotation_id == annotation_id)
    }

    pub fn on_image(&self, image_id: u64) -> impl Iterator<Item = &AnnotatedInstance> {
        self.instances.iter().filter(move |i| i.image_id == image_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[derive(Default)]
pub struct LoadOptions {
    pub include_crowd: bool,
}


fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut off = 0;
    for (i, l) in text.split_inclusive('\n').enumerate() {
        if i + 1 == line {
            return (off + column.saturating_sub(1)).min(text.len());
        }
        off += l.len();
    }
    text.len()
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        offset: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    })
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn load_person_annotations(path: &Path) -> Result<PersonAnnotations> {
    load_person_annotations_with(path, &LoadOptions::default())
}

pub fn load_person_annotations_with(path: &Path, opts: &LoadOptions) -> Result<PersonAnnotations> {
    let text = read(path)?;
    parse_person_annotations(path, &text, opts)
}

pub fn parse_person_annotations(
    path: &Path,
    text: &str,
    opts: &LoadOptions,
) -> Result<PersonAnnotations> {
    let file: CocoFile = parse_json(path, text)?;
    let categories: BTreeMap<u64, &str> = file
        .categories
        .iter()
        .map(|c| (c.id, c.name.as_str()))
        .collect();
    let person_ids: BTreeSet<u64> = if categories.is_empty() {
        // bare files without a category table use the benchmark's person id
        [1].into()
    } else {
        categories
            .iter()
            .filter(|(_, n)| n.eq_ignore_ascii_case("person"))
            .map(|(id, _)| *id)
            .collect()
    };

    let mut images = BTreeMap::new();
    let mut file_names = BTreeMap::new();
    for img in &file.images {
        if img.width == 0 || img.height == 0 {
            return Err(Error::Data {
                path: path.to_path_buf(),
                message: format!("image {} has zero size", img.id),
            });
        }
        let info = ImageInfo {
            id: img.id,
            width: img.width,
            height: img.height,
        };
        if images.insert(img.id, info).is_some() {
            return Err(Error::Data {
                path: path.to_path_buf(),
                message: format!("duplicate image id {}", img.id),
            });
        }
        if let Some(f) = &img.file_name {
            file_names.insert(img.id, f.clone());
        }
    }

    let mut counts = LoadCounts::default();
    let mut instances = Vec::new();
    let mut seen = BTreeSet::new();
    for ann in &file.annotations {
        if !person_ids.contains(&ann.category_id) {
            if categories.is_empty() || categories.contains_key(&ann.category_id) {
                counts.non_person += 1;
            } else {
                counts.unknown_category += 1;
            }
            continue;
        }
        if ann.iscrowd != 0 && !opts.include_crowd {
            counts.crowd += 1;
            continue;
        }
        let Some(img) = images.get(&ann.image_id) else {
            counts.unknown_image += 1;
            continue;
        };
        if !seen.insert(ann.id) {
            return Err(Error::Data {
                path: path.to_path_buf(),
                message: format!("duplicate annotation id {}", ann.id),
            });
        }
        let [x, y, w, h] = ann.bbox;
        // clip to the image frame; benchmark boxes overhang by sub-pixel amounts
        let x1 = x.max(0.0);
        let y1 = y.max(0.0);
        let x2 = (x + w).min(img.width as f64);
        let y2 = (y + h).min(img.height as f64);
        let Ok(bbox) = Box2D::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1) else {
            counts.degenerate += 1;
            continue;
        };
        let orientation = ann
            .orientation
            .map(OrientationAngle::from_degrees)
            .transpose()?;
        let weak = ann.weak.unwrap_or(false);
        instances.push(AnnotatedInstance {
            image_id: ann.image_id,
            annotation_id: ann.id,
            bbox,
            orientation,
            weak,
            source: if weak {
                Source::Restored
            } else {
                Source::OrientationBenchmark
            },
        });
    }
    instances.sort_by_key(|i| (i.image_id, i.annotation_id));
    Ok(PersonAnnotations {
        images,
        instances,
        counts,
        file_names,
    })
}

// ---------------------------------------------------------------------------
// orientation label files

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRecord {
    pub image_id: u64,
    pub annotation_id: u64,
    pub degrees: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelFile {
    labels: Vec<LabelRecord>,
}

/// Annotation id to `(image id, orientation)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OrientationLabels {
    map: BTreeMap<u64, (u64, OrientationAngle)>,
}

impl OrientationLabels {
    pub fn from_records(records: impl IntoIterator<Item = LabelRecord>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for r in records {
            let angle = OrientationAngle::from_degrees(r.degrees).map_err(|_| {
                Error::AngleOutOfRange(format!(
                    "annotation {}: {} degrees is outside [0, 360]",
                    r.annotation_id, r.degrees
                ))
            })?;
            if map.insert(r.annotation_id, (r.image_id, angle)).is_some() {
                return Err(Error::DuplicateLabel(r.annotation_id));
            }
        }
        Ok(Self { map })
    }

    pub fn get(&self, annotation_id: u64) -> Option<(u64, OrientationAngle)> {
        self.map.get(&annotation_id).copied()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = LabelRecord> + '_ {
        self.map.iter().map(|(&ann, &(img, a))| LabelRecord {
            image_id: img,
            annotation_id: ann,
            degrees: a.degrees(),
        })
    }

    pub fn image_ids(&self) -> BTreeSet<u64> {
        self.map.values().map(|(img, _)| *img).collect()
    }

    pub fn to_json(&self) -> String {
        let file = LabelFile {
            labels: self.records().collect(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("label file serializes");
        s.push('\n');
        s
    }
}

pub fn parse_orientation_labels(path: &Path, text: &str) -> Result<OrientationLabels> {
    let file: LabelFile = parse_json(path, text)?;
    OrientationLabels::from_records(file.labels)
}

pub fn load_orientation_labels(path: &Path) -> Result<OrientationLabels> {
    let text = read(path)?;
    parse_orientation_labels(path, &text)
}

/// Converts the orientation benchmark's native layout, a JSON object keyed by
/// `"<image_id>_<annotation_id>"` with degree values, into label records.
pub fn convert_native_labels(path: &Path, text: &str) -> Result<OrientationLabels> {
    let native: BTreeMap<String, f64> = parse_json(path, text)?;
    let mut records = Vec::with_capacity(native.len());
    for (key, degrees) in native {
        let parsed = key
            .split_once('_')
            .and_then(|(i, a)| Some((i.parse::<u64>().ok()?, a.parse::<u64>().ok()?)));
        let Some((image_id, annotation_id)) = parsed else {
            return Err(Error::Data {
                path: path.to_path_buf(),
                message: format!("key {key:?} is not <image_id>_<annotation_id>"),
            });
        };
        records.push(LabelRecord {
            image_id,
            annotation_id,
            degrees,
        });
    }
    OrientationLabels::from_records(records)
}

// ---------------------------------------------------------------------------
// reconstruction

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct DatasetStats {
    pub images: usize,
    pub instances: usize,
    pub strong: usize,
    pub weak: usize,
    /// Uncovered persons dropped under `permit_missing`.
    pub dropped_missing: usize,
    /// Strong labels naming no loaded person annotation.
    pub orphan_labels: usize,
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "instances={} weak={} strong={} images={} dropped={} orphan_labels={}",
            self.instances, self.weak, self.strong, self.images, self.dropped_missing, self.orphan_labels
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub images: BTreeMap<u64, ImageInfo>,
    pub instances: Vec<AnnotatedInstance>,
    pub stats: DatasetStats,
    file_names: BTreeMap<u64, String>,
}

fn check_image(ann: &AnnotatedInstance, label_image: u64) -> Result<()> {
    if ann.image_id != label_image {
        return Err(Error::ImageMismatch {
            annotation: ann.annotation_id,
            label_image,
            image: ann.image_id,
        });
    }
    Ok(())
}

/// Keeps the images that carry at least one strong label, labels their
/// persons from the strong map, and restores the rest of their persons with
/// weak labels. Strong labels take precedence.
pub fn reconstruct(
    persons: &PersonAnnotations,
    strong: &OrientationLabels,
    weak: Option<&OrientationLabels>,
    permit_missing: bool,
) -> Result<Reconstruction> {
    for (ann, (img, _)) in strong.map.iter().chain(weak.iter().flat_map(|w| w.map.iter())) {
        if let Some(p) = persons.get(*ann) {
            check_image(p, *img)?;
        }
    }
    let labeled_images: BTreeSet<u64> = strong
        .map
        .iter()
        .filter_map(|(ann, (img, _))| persons.get(*ann).map(|_| *img))
        .collect();
    let mut stats = DatasetStats {
        orphan_labels: strong
            .map
            .keys()
            .filter(|ann| persons.get(**ann).is_none())
            .count(),
        ..Default::default()
    };

    let mut instances = Vec::new();
    let mut uncovered = Vec::new();
    for p in &persons.instances {
        if !labeled_images.contains(&p.image_id) {
            continue;
        }
        if let Some((img, angle)) = strong.get(p.annotation_id) {
            check_image(p, img)?;
            instances.push(AnnotatedInstance {
                orientation: Some(angle),
                weak: false,
                source: Source::OrientationBenchmark,
                ..*p
            });
            stats.strong += 1;
        } else if let Some((img, angle)) = weak.and_then(|w| w.get(p.annotation_id)) {
            check_image(p, img)?;
            instances.push(AnnotatedInstance {
                orientation: Some(angle),
                weak: true,
                source: Source::Restored,
                ..*p
            });
            stats.weak += 1;
        } else {
            uncovered.push(p.annotation_id);
        }
    }
    if !uncovered.is_empty() {
        if !permit_missing {
            let ids = uncovered
                .iter()
                .map(u64::to_string)
                .collect::<Vec<_>>()
                .join(",");
            return Err(Error::Uncovered {
                count: uncovered.len(),
                ids,
            });
        }
        stats.dropped_missing = uncovered.len();
    }
    stats.images = labeled_images.len();
    stats.instances = instances.len();

    let images = persons
        .images
        .iter()
        .filter(|(id, _)| labeled_images.contains(id))
        .map(|(id, info)| (*id, *info))
        .collect();
    let file_names = persons
        .file_names
        .iter()
        .filter(|(id, _)| labeled_images.contains(id))
        .map(|(id, f)| (*id, f.clone()))
        .collect();
    Ok(Reconstruction {
        images,
        instances,
        stats,
        file_names,
    })
}

// ---------------------------------------------------------------------------
// merged output

#[derive(Serialize)]
struct OutImage<'a> {
    id: u64,
    width: u32,
    height: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    file_name: Option<&'a str>,
}

#[derive(Serialize)]
struct OutAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: [Box<RawValue>; 4],
    area: Box<RawValue>,
    iscrowd: u8,
    orientation: Box<RawValue>,
    weak: bool,
}

#[derive(Serialize)]
struct OutFile<'a> {
    images: Vec<OutImage<'a>>,
    annotations: Vec<OutAnnotation>,
    categories: Vec<CocoCategory>,
}

fn fixed(v: f64, decimals: usize) -> Box<RawValue> {
    // avoid "-0.0000"
    let v = if v == 0.0 { 0.0 } else { v };
    RawValue::from_string(format!("{v:.decimals$}")).expect("finite number is valid JSON")
}

impl Reconstruction {
    /// Detection-benchmark layout, with orientation at 4 decimals and boxes at
    /// 2 decimals.
    pub fn to_json(&self) -> String {
        let out = OutFile {
            images: self
                .images
                .values()
                .map(|i| OutImage {
                    id: i.id,
                    width: i.width,
                    height: i.height,
                    file_name: self.file_names.get(&i.id).map(String::as_str),
                })
                .collect(),
            annotations: self
                .instances
                .iter()
                .map(|i| {
                    let c = i.bbox.to_corners();
                    OutAnnotation {
                        id: i.annotation_id,
                        image_id: i.image_id,
                        category_id: 1,
                        bbox: [
                            fixed(c.x1, 2),
                            fixed(c.y1, 2),
                            fixed(i.bbox.w(), 2),
                            fixed(i.bbox.h(), 2),
                        ],
                        area: fixed(i.bbox.area(), 2),
                        iscrowd: 0,
                        orientation: fixed(
                            i.orientation.map(|o| o.degrees()).unwrap_or(0.0),
                            4,
                        ),
                        weak: i.weak,
                    }
                })
                .collect(),
            categories: vec![CocoCategory {
                id: 1,
                name: "person".into(),
            }],
        };
        let mut s = serde_json::to_string_pretty(&out).expect("merged file serializes");
        s.push('\n');
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_json().as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

// ---------------------------------------------------------------------------
// letterboxing

/// Aspect-preserving resize into a fixed canvas with symmetric padding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Letterbox {
    pub scale: f64,
    pub pad_x: f64,
    pub pad_y: f64,
    pub target: (u32, u32),
}

impl Letterbox {
    pub fn new(orig_w: u32, orig_h: u32, target_w: u32, target_h: u32) -> Result<Self> {
        if orig_w == 0 || orig_h == 0 || target_w == 0 || target_h == 0 {
            return Err(Error::InvalidGrid(format!(
                "letterbox from {orig_w}x{orig_h} to {target_w}x{target_h}"
            )));
        }
        let scale = (target_w as f64 / orig_w as f64).min(target_h as f64 / orig_h as f64);
        Ok(Self {
            scale,
            pad_x: (target_w as f64 - orig_w as f64 * scale) / 2.0,
            pad_y: (target_h as f64 - orig_h as f64 * scale) / 2.0,
            target: (target_w, target_h),
        })
    }

    pub fn identity(w: u32, h: u32) -> Self {
        Self {
            scale: 1.0,
            pad_x: 0.0,
            pad_y: 0.0,
            target: (w, h),
        }
    }

    pub fn apply(&self, b: &Box2D) -> Box2D {
        Box2D::new(
            b.cx() * self.scale + self.pad_x,
            b.cy() * self.scale + self.pad_y,
            b.w() * self.scale,
            b.h() * self.scale,
        )
        .expect("positive scale keeps boxes valid")
    }

    pub fn invert(&self, b: &Box2D) -> Box2D {
        Box2D::new(
            (b.cx() - self.pad_x) / self.scale,
            (b.cy() - self.pad_y) / self.scale,
            b.w() / self.scale,
            b.h() / self.scale,
        )
        .expect("positive scale keeps boxes valid")
    }

    pub fn apply_instances(&self, instances: &[AnnotatedInstance]) -> Vec<AnnotatedInstance> {
        instances
            .iter()
            .map(|i| AnnotatedInstance {
                bbox: self.apply(&i.bbox),
                ..*i
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    const FIXTURE: &str = r#"{
      "images": [
        {"id": 1, "width": 640, "height": 480, "file_name": "a.jpg"},
        {"id": 2, "width": 320, "height": 320, "file_name": "b.jpg"}
      ],
      "annotations": [
        {"id": 10, "image_id": 1, "category_id": 1, "bbox": [10, 20, 30, 40], "iscrowd": 0},
        {"id": 11, "image_id": 1, "category_id": 1, "bbox": [100, 100, 50, 120], "iscrowd": 0},
        {"id": 12, "image_id": 2, "category_id": 1, "bbox": [5, 5, 60, 60], "iscrowd": 0},
        {"id": 13, "image_id": 2, "category_id": 3, "bbox": [0, 0, 10, 10], "iscrowd": 0}
      ],
      "categories": [{"id": 1, "name": "person"}, {"id": 3, "name": "car"}]
    }"#;

    fn p() -> PathBuf {
        PathBuf::from("fixture.json")
    }

    #[test]
    fn person_filter_and_layout() {
        let pa = parse_person_annotations(&p(), FIXTURE, &LoadOptions::default()).unwrap();
        assert_eq!(pa.instances.len(), 3);
        assert_eq!(pa.counts.non_person, 1);
        let c = pa.get(10).unwrap().bbox.to_corners();
        assert_eq!((c.x1, c.y1, c.x2, c.y2), (10.0, 20.0, 40.0, 60.0));
    }

    #[test]
    fn empty_annotations() {
        let text = r#"{"images": [], "annotations": [], "categories": []}"#;
        let pa = parse_person_annotations(&p(), text, &LoadOptions::default()).unwrap();
        assert!(pa.instances.is_empty());
    }

    #[test]
    fn malformed_reports_offset() {
        let text = "{\"images\": [\n  {\"id\": 1, \"width\": }\n]}";
        match parse_person_annotations(&p(), text, &LoadOptions::default()) {
            Err(Error::Parse { offset, .. }) => {
                assert_eq!(&text[offset..offset + 1], "}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_category_and_crowd_counted() {
        let text = r#"{"images": [{"id": 1, "width": 10, "height": 10}],
          "annotations": [
            {"id": 1, "image_id": 1, "category_id": 99, "bbox": [0, 0, 2, 2]},
            {"id": 2, "image_id": 1, "category_id": 1, "bbox": [0, 0, 2, 2], "iscrowd": 1},
            {"id": 3, "image_id": 1, "category_id": 1, "bbox": [20, 20, 2, 2]}
          ],
          "categories": [{"id": 1, "name": "person"}]}"#;
        let pa = parse_person_annotations(&p(), text, &LoadOptions::default()).unwrap();
        assert!(pa.instances.is_empty());
        assert_eq!(pa.counts.unknown_category, 1);
        assert_eq!(pa.counts.crowd, 1);
        assert_eq!(pa.counts.degenerate, 1);
        let with_crowd =
            parse_person_annotations(&p(), text, &LoadOptions { include_crowd: true }).unwrap();
        assert_eq!(with_crowd.instances.len(), 1);
    }

    #[test]
    fn label_parsing_rules() {
        let l = parse_orientation_labels(
            &p(),
            r#"{"labels": [{"image_id": 1, "annotation_id": 7, "degrees": 270.0},
                           {"image_id": 1, "annotation_id": 8, "degrees": 360.0}]}"#,
        )
        .unwrap();
        assert_eq!(l.get(7).unwrap().1.degrees(), 270.0);
        assert_eq!(l.get(8).unwrap().1.degrees(), 0.0);
        let back = parse_orientation_labels(&p(), &l.to_json()).unwrap();
        assert_eq!(back, l);

        let dup = parse_orientation_labels(
            &p(),
            r#"{"labels": [{"image_id": 1, "annotation_id": 7, "degrees": 1.0},
                           {"image_id": 1, "annotation_id": 7, "degrees": 2.0}]}"#,
        );
        assert!(matches!(dup, Err(Error::DuplicateLabel(7))));
        let bad = parse_orientation_labels(
            &p(),
            r#"{"labels": [{"image_id": 1, "annotation_id": 7, "degrees": 361.0}]}"#,
        );
        assert!(matches!(bad, Err(Error::AngleOutOfRange(_))));
    }

    #[test]
    fn native_conversion() {
        let l = convert_native_labels(&p(), r#"{"1_10": 45, "2_12": 360}"#).unwrap();
        assert_eq!(l.get(10), Some((1, OrientationAngle::from_degrees(45.0).unwrap())));
        assert_eq!(l.get(12).unwrap().1.degrees(), 0.0);
        assert!(convert_native_labels(&p(), r#"{"oops": 1}"#).is_err());
    }

    fn labels(items: &[(u64, u64, f64)]) -> OrientationLabels {
        OrientationLabels::from_records(items.iter().map(|&(i, a, d)| LabelRecord {
            image_id: i,
            annotation_id: a,
            degrees: d,
        }))
        .unwrap()
    }

    #[test]
    fn strong_wins_over_weak() {
        let pa = parse_person_annotations(&p(), FIXTURE, &LoadOptions::default()).unwrap();
        let strong = labels(&[(1, 10, 10.0), (2, 12, 20.0)]);
        let weak = labels(&[(1, 10, 99.0), (1, 11, 30.0)]);
        let r = reconstruct(&pa, &strong, Some(&weak), false).unwrap();
        assert_eq!(r.stats.instances, 3);
        assert_eq!(r.stats.weak, 1);
        let i10 = r.instances.iter().find(|i| i.annotation_id == 10).unwrap();
        assert!(!i10.weak);
        assert_eq!(i10.orientation.unwrap().degrees(), 10.0);
        let i11 = r.instances.iter().find(|i| i.annotation_id == 11).unwrap();
        assert!(i11.weak);
        assert_eq!(i11.source, Source::Restored);
    }

    #[test]
    fn uncovered_needs_permit() {
        let pa = parse_person_annotations(&p(), FIXTURE, &LoadOptions::default()).unwrap();
        let strong = labels(&[(1, 10, 10.0), (2, 12, 20.0)]);
        match reconstruct(&pa, &strong, None, false) {
            Err(Error::Uncovered { count, ids }) => {
                assert_eq!(count, 1);
                assert_eq!(ids, "11");
            }
            other => panic!("{other:?}"),
        }
        let r = reconstruct(&pa, &strong, None, true).unwrap();
        assert_eq!(r.stats.dropped_missing, 1);
        assert_eq!(r.stats.instances, 2);
    }

    #[test]
    fn image_mismatch_rejected() {
        let pa = parse_person_annotations(&p(), FIXTURE, &LoadOptions::default()).unwrap();
        let strong = labels(&[(2, 10, 10.0)]);
        assert!(matches!(
            reconstruct(&pa, &strong, None, true),
            Err(Error::ImageMismatch { .. })
        ));
    }

    #[test]
    fn merged_file_round_trips() {
        let pa = parse_person_annotations(&p(), FIXTURE, &LoadOptions::default()).unwrap();
        let strong = labels(&[(1, 10, 10.123456), (2, 12, 20.0)]);
        let weak = labels(&[(1, 11, 30.0)]);
        let r = reconstruct(&pa, &strong, Some(&weak), false).unwrap();
        let json = r.to_json();
        assert!(json.contains("\"orientation\": 10.1235"));
        let back = parse_person_annotations(&p(), &json, &LoadOptions::default()).unwrap();
        assert_eq!(back.instances.len(), 3);
        assert!(back.get(11).unwrap().weak);
        assert_eq!(back.get(12).unwrap().orientation.unwrap().degrees(), 20.0);
        // stable bytes
        assert_eq!(json, reconstruct(&back, &strong, Some(&weak), false).unwrap().to_json());
    }

    #[test]
    fn letterbox_geometry() {
        let sq = Letterbox::new(512, 512, 1024, 1024).unwrap();
        assert_eq!((sq.scale, sq.pad_x, sq.pad_y), (2.0, 0.0, 0.0));
        let wide = Letterbox::new(2000, 1000, 1024, 1024).unwrap();
        assert_eq!(wide.scale, 1024.0 / 2000.0);
        assert_eq!(wide.pad_x, 0.0);
        assert!((wide.pad_y - 256.0).abs() < 1e-12);
        let b = Box2D::from_xywh(123.4, 567.8, 90.1, 234.5).unwrap();
        let rt = wide.invert(&wide.apply(&b));
        assert!((rt.cx() - b.cx()).abs() < 1e-6);
        assert!((rt.cy() - b.cy()).abs() < 1e-6);
        assert!((rt.w() - b.w()).abs() < 1e-6);
        assert!((rt.h() - b.h()).abs() < 1e-6);
    }
}
