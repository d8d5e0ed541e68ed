//! Dataset model, JSONL manifest I/O and large-image tiling.
//!
//! A [`DatasetIndex`] owns the declared category list and the images in
//! manifest order. It is immutable once built; which images are labeled is
//! tracked by [`crate::iteration::IterationState`].
//!
//! Manifests are line-delimited JSON, one image per line. Blank lines and
//! lines starting with `#` are skipped so that output files can carry a
//! provenance header.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::sha256_hex;

/// Zero-based index into the declared category list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CategoryId(pub usize);

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: unknown category `{name}`")]
    UnknownCategory { line: usize, name: String },
    #[error("line {line}: duplicate image_id `{id}`")]
    DuplicateImage { line: usize, id: String },
    #[error("line {line}: object {index}: field `{field}` must be positive, got {value}")]
    NonPositive {
        line: usize,
        index: usize,
        field: &'static str,
        value: f64,
    },
    #[error(
        "line {line}: object {index}: center ({cx}, {cy}) lies outside the {width}x{height} image"
    )]
    CenterOutside {
        line: usize,
        index: usize,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    },
    #[error("line {line}: unknown image_id `{id}`")]
    UnknownImage { line: usize, id: String },
    #[error("line {line}: detection {index}: score {score} outside [0, 1]")]
    ScoreOutOfRange {
        line: usize,
        index: usize,
        score: f64,
    },
    #[error("category list must not be empty")]
    NoCategories,
    #[error("category `{0}` declared twice")]
    DuplicateCategory(String),
    #[error("invalid tiling parameters: {0}")]
    InvalidTiling(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Axis-aligned box in center/size form, pixel units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxCxCyWh {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxCxCyWh {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            cx: (x1 + x2) / 2.0,
            cy: (y1 + y2) / 2.0,
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    /// `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn intersection(&self, other: &BoxCxCyWh) -> Option<BoxCxCyWh> {
        let (ax1, ay1, ax2, ay2) = self.corners();
        let (bx1, by1, bx2, by2) = other.corners();
        let x1 = ax1.max(bx1);
        let y1 = ay1.max(by1);
        let x2 = ax2.min(bx2);
        let y2 = ay2.min(by2);
        if x2 > x1 && y2 > y1 {
            Some(BoxCxCyWh::from_corners(x1, y1, x2, y2))
        } else {
            None
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthObject {
    pub category: CategoryId,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    /// Orientation in degrees. Carried through I/O, never used in math.
    pub angle: Option<f64>,
}

impl GroundTruthObject {
    pub fn bbox(&self) -> BoxCxCyWh {
        BoxCxCyWh::new(self.cx, self.cy, self.w, self.h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub objects: Vec<GroundTruthObject>,
}

/// One post-NMS predicted object.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub image_id: String,
    pub category: CategoryId,
    /// Confidence `P` in `[0, 1]`.
    pub score: f64,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Detection {
    pub fn bbox(&self) -> BoxCxCyWh {
        BoxCxCyWh::new(self.cx, self.cy, self.w, self.h)
    }
}

/// Detections grouped by image, each group sorted by descending score.
pub type DetectionMap = BTreeMap<String, Vec<Detection>>;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetIndex {
    categories: Vec<String>,
    category_lookup: HashMap<String, CategoryId>,
    images: IndexMap<String, ImageRecord>,
}

impl DatasetIndex {
    pub fn new(categories: Vec<String>) -> Result<Self, DatasetError> {
        if categories.is_empty() {
            return Err(DatasetError::NoCategories);
        }
        let mut category_lookup = HashMap::with_capacity(categories.len());
        for (i, name) in categories.iter().enumerate() {
            if category_lookup
                .insert(name.clone(), CategoryId(i))
                .is_some()
            {
                return Err(DatasetError::DuplicateCategory(name.clone()));
            }
        }
        Ok(Self {
            categories,
            category_lookup,
            images: IndexMap::new(),
        })
    }

    /// Adds an image after validating it. `line` is only used for error
    /// context; pass 0 for programmatic inserts.
    pub fn insert(&mut self, record: ImageRecord, line: usize) -> Result<(), DatasetError> {
        if self.images.contains_key(&record.image_id) {
            return Err(DatasetError::DuplicateImage {
                line,
                id: record.image_id,
            });
        }
        for (index, obj) in record.objects.iter().enumerate() {
            if obj.category.0 >= self.categories.len() {
                return Err(DatasetError::UnknownCategory {
                    line,
                    name: format!("#{}", obj.category.0),
                });
            }
            validate_object(obj, index, line, record.width, record.height)?;
        }
        self.images.insert(record.image_id.clone(), record);
        Ok(())
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn category_count(&self) -> usize {
        self.categories.len()
    }

    pub fn category_id(&self, name: &str) -> Option<CategoryId> {
        self.category_lookup.get(name).copied()
    }

    pub fn category_name(&self, id: CategoryId) -> &str {
        &self.categories[id.0]
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Option<&ImageRecord> {
        self.images.get(image_id)
    }

    pub fn contains(&self, image_id: &str) -> bool {
        self.images.contains_key(image_id)
    }

    /// Images in manifest order.
    pub fn images(&self) -> impl Iterator<Item = &ImageRecord> {
        self.images.values()
    }

    pub fn image_ids(&self) -> impl Iterator<Item = &str> {
        self.images.keys().map(String::as_str)
    }

    pub fn object_count(&self) -> usize {
        self.images.values().map(|r| r.objects.len()).sum()
    }

    /// Writes the index as a ground-truth manifest.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<(), DatasetError> {
        for record in self.images.values() {
            let line = ManifestLine {
                image_id: record.image_id.clone(),
                width: record.width,
                height: record.height,
                objects: record
                    .objects
                    .iter()
                    .map(|o| ManifestObject {
                        category: self.categories[o.category.0].clone(),
                        cx: o.cx,
                        cy: o.cy,
                        w: o.w,
                        h: o.h,
                        angle: o.angle,
                    })
                    .collect(),
            };
            serde_json::to_writer(&mut out, &line).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// SHA-256 over the canonical manifest serialization and category list.
    pub fn digest(&self) -> String {
        let mut buf = Vec::new();
        for c in &self.categories {
            buf.extend_from_slice(c.as_bytes());
            buf.push(b'\n');
        }
        self.write_jsonl(&mut buf)
            .expect("writing to a Vec cannot fail");
        sha256_hex(&buf)
    }
}

fn validate_object(
    obj: &GroundTruthObject,
    index: usize,
    line: usize,
    width: u32,
    height: u32,
) -> Result<(), DatasetError> {
    for (field, value) in [("w", obj.w), ("h", obj.h)] {
        if !(value > 0.0) || !value.is_finite() {
            return Err(DatasetError::NonPositive {
                line,
                index,
                field,
                value,
            });
        }
    }
    let inside =
        (0.0..=f64::from(width)).contains(&obj.cx) && (0.0..=f64::from(height)).contains(&obj.cy);
    if !inside {
        return Err(DatasetError::CenterOutside {
            line,
            index,
            cx: obj.cx,
            cy: obj.cy,
            width,
            height,
        });
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    image_id: String,
    width: u32,
    height: u32,
    objects: Vec<ManifestObject>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestObject {
    category: String,
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    angle: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionLine {
    image_id: String,
    detections: Vec<DetectionEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionEntry {
    category: String,
    score: f64,
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

/// Yields `(1-based line number, trimmed content)` for every non-blank,
/// non-comment line.
fn records<R: BufRead>(reader: R) -> impl Iterator<Item = Result<(usize, String), DatasetError>> {
    reader
        .lines()
        .enumerate()
        .filter_map(|(i, line)| match line {
            Err(e) => Some(Err(DatasetError::Io(e))),
            Ok(text) => {
                let trimmed = text.trim();
                if trimmed.is_empty() || trimmed.starts_with('#') {
                    None
                } else {
                    Some(Ok((i + 1, trimmed.to_string())))
                }
            }
        })
}

/// Parses a ground-truth manifest against a declared category list.
pub fn parse_ground_truth<R: BufRead>(
    reader: R,
    categories: &[String],
) -> Result<DatasetIndex, DatasetError> {
    let mut index = DatasetIndex::new(categories.to_vec())?;
    for rec in records(reader) {
        let (line, text) = rec?;
        let parsed: ManifestLine =
            serde_json::from_str(&text).map_err(|e| DatasetError::Malformed {
                line,
                message: e.to_string(),
            })?;
        let mut objects = Vec::with_capacity(parsed.objects.len());
        for o in parsed.objects {
            let category =
                index
                    .category_id(&o.category)
                    .ok_or_else(|| DatasetError::UnknownCategory {
                        line,
                        name: o.category.clone(),
                    })?;
            objects.push(GroundTruthObject {
                category,
                cx: o.cx,
                cy: o.cy,
                w: o.w,
                h: o.h,
                angle: o.angle,
            });
        }
        index.insert(
            ImageRecord {
                image_id: parsed.image_id,
                width: parsed.width,
                height: parsed.height,
                objects,
            },
            line,
        )?;
    }
    Ok(index)
}

/// Parses a detections file; groups are sorted by descending score with
/// ties kept in input order.
pub fn parse_detections<R: BufRead>(
    reader: R,
    index: &DatasetIndex,
) -> Result<DetectionMap, DatasetError> {
    let mut groups = DetectionMap::new();
    for rec in records(reader) {
        let (line, text) = rec?;
        let parsed: DetectionLine =
            serde_json::from_str(&text).map_err(|e| DatasetError::Malformed {
                line,
                message: e.to_string(),
            })?;
        if !index.contains(&parsed.image_id) {
            return Err(DatasetError::UnknownImage {
                line,
                id: parsed.image_id,
            });
        }
        let group = groups.entry(parsed.image_id.clone()).or_default();
        for (i, d) in parsed.detections.into_iter().enumerate() {
            if !(0.0..=1.0).contains(&d.score) {
                return Err(DatasetError::ScoreOutOfRange {
                    line,
                    index: i,
                    score: d.score,
                });
            }
            for (field, value) in [("w", d.w), ("h", d.h)] {
                if !(value > 0.0) || !value.is_finite() {
                    return Err(DatasetError::NonPositive {
                        line,
                        index: i,
                        field,
                        value,
                    });
                }
            }
            let category =
                index
                    .category_id(&d.category)
                    .ok_or_else(|| DatasetError::UnknownCategory {
                        line,
                        name: d.category.clone(),
                    })?;
            group.push(Detection {
                image_id: parsed.image_id.clone(),
                category,
                score: d.score,
                cx: d.cx,
                cy: d.cy,
                w: d.w,
                h: d.h,
            });
        }
    }
    for group in groups.values_mut() {
        sort_by_score(group);
    }
    Ok(groups)
}

/// Stable descending-score sort.
pub fn sort_by_score(dets: &mut [Detection]) {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
}

/// Writes detections in the JSONL detections format, one line per image
/// in map order.
pub fn write_detections<W: Write>(
    detections: &DetectionMap,
    index: &DatasetIndex,
    mut out: W,
) -> Result<(), DatasetError> {
    for (image_id, dets) in detections {
        let line = DetectionLine {
            image_id: image_id.clone(),
            detections: dets
                .iter()
                .map(|d| DetectionEntry {
                    category: index.category_name(d.category).to_string(),
                    score: d.score,
                    cx: d.cx,
                    cy: d.cy,
                    w: d.w,
                    h: d.h,
                })
                .collect(),
        };
        serde_json::to_writer(&mut out, &line).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// A square crop of a parent image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileWindow {
    pub parent_id: String,
    pub x0: u32,
    pub y0: u32,
    pub size: u32,
}

impl TileWindow {
    pub fn tile_id(&self) -> String {
        format!("{}@{}_{}", self.parent_id, self.x0, self.y0)
    }

    pub fn bbox(&self) -> BoxCxCyWh {
        BoxCxCyWh::from_corners(
            f64::from(self.x0),
            f64::from(self.y0),
            f64::from(self.x0 + self.size),
            f64::from(self.y0 + self.size),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TilePlan {
    pub windows: Vec<TileWindow>,
    /// Set when the window exceeds both image dimensions; the plan is then a
    /// single window at the origin sized to the larger image side.
    pub degenerate: bool,
}

/// Offsets along one axis: `0, stride, 2*stride, ...` while the window ends
/// strictly inside the extent, then one final window flush with the edge.
fn axis_offsets(extent: u32, window: u32, stride: u32) -> Vec<u32> {
    if window >= extent {
        return vec![0];
    }
    let mut offsets: Vec<u32> = (0..)
        .map(|j| j * stride)
        .take_while(|&o| o + window < extent)
        .collect();
    offsets.push(extent - window);
    offsets
}

/// Plans sliding-window crops in row-major order.
pub fn plan_tiles(
    parent_id: &str,
    width: u32,
    height: u32,
    window: u32,
    stride: u32,
) -> Result<TilePlan, DatasetError> {
    if width == 0 || height == 0 {
        return Err(DatasetError::InvalidTiling(format!(
            "image `{parent_id}` has zero extent {width}x{height}"
        )));
    }
    if stride == 0 || stride > window {
        return Err(DatasetError::InvalidTiling(format!(
            "need 0 < stride <= window, got stride {stride}, window {window}"
        )));
    }
    if window > width && window > height {
        return Ok(TilePlan {
            windows: vec![TileWindow {
                parent_id: parent_id.to_string(),
                x0: 0,
                y0: 0,
                size: width.max(height),
            }],
            degenerate: true,
        });
    }
    let xs = axis_offsets(width, window, stride);
    let ys = axis_offsets(height, window, stride);
    let windows = ys
        .iter()
        .flat_map(|&y0| {
            xs.iter().map(move |&x0| TileWindow {
                parent_id: parent_id.to_string(),
                x0,
                y0,
                size: window,
            })
        })
        .collect();
    Ok(TilePlan {
        windows,
        degenerate: false,
    })
}

/// Translates objects into window coordinates, intersecting each box with
/// the window and dropping those with less than `min_inside_fraction` of
/// their area inside.
pub fn clip_annotations(
    window: &TileWindow,
    objects: &[GroundTruthObject],
    min_inside_fraction: f64,
) -> Vec<GroundTruthObject> {
    let frame = window.bbox();
    let (dx, dy) = (f64::from(window.x0), f64::from(window.y0));
    objects
        .iter()
        .filter_map(|obj| {
            let original = obj.bbox();
            let inter = original.intersection(&frame)?;
            if inter.area() / original.area() < min_inside_fraction {
                return None;
            }
            Some(GroundTruthObject {
                category: obj.category,
                cx: inter.cx - dx,
                cy: inter.cy - dy,
                w: inter.w,
                h: inter.h,
                angle: obj.angle,
            })
        })
        .collect()
}

/// Tiles every image of `index`, returning the windows and a new index of
/// tiles with clipped annotations. Tile ids are `parent@x0_y0`.
pub fn tile_dataset(
    index: &DatasetIndex,
    window: u32,
    stride: u32,
    min_inside_fraction: f64,
) -> Result<(Vec<TileWindow>, DatasetIndex), DatasetError> {
    if !(min_inside_fraction > 0.0 && min_inside_fraction <= 1.0) {
        return Err(DatasetError::InvalidTiling(format!(
            "min_inside_fraction must be in (0, 1], got {min_inside_fraction}"
        )));
    }
    let mut tiles = DatasetIndex::new(index.categories().to_vec())?;
    let mut all_windows = Vec::new();
    for record in index.images() {
        let plan = plan_tiles(
            &record.image_id,
            record.width,
            record.height,
            window,
            stride,
        )?;
        for w in plan.windows {
            let objects = clip_annotations(&w, &record.objects, min_inside_fraction);
            tiles.insert(
                ImageRecord {
                    image_id: w.tile_id(),
                    width: w.size,
                    height: w.size,
                    objects,
                },
                0,
            )?;
            all_windows.push(w);
        }
    }
    Ok((all_windows, tiles))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cats() -> Vec<String> {
        ["plane", "ship", "car"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    #[test]
    fn parses_two_lines() {
        let text = r#"{"image_id":"a","width":100,"height":80,"objects":[{"category":"car","cx":10,"cy":10,"w":4,"h":2}]}
{"image_id":"b","width":100,"height":80,"objects":[{"category":"ship","cx":50,"cy":40,"w":20,"h":8,"angle":12.5},{"category":"car","cx":1,"cy":1,"w":2,"h":2}]}
"#;
        let idx = parse_ground_truth(text.as_bytes(), &cats()).unwrap();
        assert_eq!(idx.len(), 2);
        assert_eq!(idx.category_count(), 3);
        let ids: Vec<_> = idx.image_ids().collect();
        assert_eq!(ids, ["a", "b"]);
        assert_eq!(idx.get("b").unwrap().objects[0].angle, Some(12.5));
        assert_eq!(idx.get("b").unwrap().objects[1].category, CategoryId(2));
    }

    #[test]
    fn empty_stream_keeps_categories() {
        let idx = parse_ground_truth(&b""[..], &cats()).unwrap();
        assert!(idx.is_empty());
        assert_eq!(idx.category_count(), 3);
    }

    #[test]
    fn zero_width_names_line_and_field() {
        let text = "# header\n{\"image_id\":\"a\",\"width\":10,\"height\":10,\"objects\":[{\"category\":\"car\",\"cx\":1,\"cy\":1,\"w\":0,\"h\":2}]}\n";
        let err = parse_ground_truth(text.as_bytes(), &cats()).unwrap_err();
        match &err {
            DatasetError::NonPositive { line, field, .. } => {
                assert_eq!(*line, 2);
                assert_eq!(*field, "w");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err.to_string().contains("line 2"));
    }

    #[test]
    fn rejects_bad_records() {
        let bad_json = "{\"image_id\": 3}\n";
        assert!(matches!(
            parse_ground_truth(bad_json.as_bytes(), &cats()),
            Err(DatasetError::Malformed { line: 1, .. })
        ));
        let unknown = r#"{"image_id":"a","width":10,"height":10,"objects":[{"category":"tank","cx":1,"cy":1,"w":1,"h":2}]}"#;
        assert!(matches!(
            parse_ground_truth(unknown.as_bytes(), &cats()),
            Err(DatasetError::UnknownCategory { .. })
        ));
        let dup = "{\"image_id\":\"a\",\"width\":10,\"height\":10,\"objects\":[]}\n{\"image_id\":\"a\",\"width\":10,\"height\":10,\"objects\":[]}\n";
        assert!(matches!(
            parse_ground_truth(dup.as_bytes(), &cats()),
            Err(DatasetError::DuplicateImage { line: 2, .. })
        ));
        let outside = r#"{"image_id":"a","width":10,"height":10,"objects":[{"category":"car","cx":11,"cy":1,"w":1,"h":2}]}"#;
        assert!(matches!(
            parse_ground_truth(outside.as_bytes(), &cats()),
            Err(DatasetError::CenterOutside { .. })
        ));
        assert!(matches!(
            parse_ground_truth(&b""[..], &[]),
            Err(DatasetError::NoCategories)
        ));
    }

    fn two_image_index() -> DatasetIndex {
        let text = "{\"image_id\":\"a\",\"width\":10,\"height\":10,\"objects\":[]}\n{\"image_id\":\"b\",\"width\":10,\"height\":10,\"objects\":[]}\n";
        parse_ground_truth(text.as_bytes(), &cats()).unwrap()
    }

    #[test]
    fn detections_grouped_and_sorted() {
        let idx = two_image_index();
        let text = r#"{"image_id":"b","detections":[{"category":"car","score":0.2,"cx":1,"cy":1,"w":1,"h":1}]}
{"image_id":"a","detections":[{"category":"car","score":0.3,"cx":1,"cy":1,"w":1,"h":1},{"category":"ship","score":0.9,"cx":2,"cy":2,"w":1,"h":1}]}
"#;
        let groups = parse_detections(text.as_bytes(), &idx).unwrap();
        assert_eq!(groups.len(), 2);
        let a: Vec<f64> = groups["a"].iter().map(|d| d.score).collect();
        assert_eq!(a, [0.9, 0.3]);
        assert_eq!(groups["b"].len(), 1);
    }

    #[test]
    fn detection_ties_keep_input_order() {
        let idx = two_image_index();
        let text = r#"{"image_id":"a","detections":[{"category":"car","score":0.5,"cx":1,"cy":1,"w":1,"h":1},{"category":"ship","score":0.5,"cx":2,"cy":2,"w":1,"h":1}]}"#;
        let groups = parse_detections(text.as_bytes(), &idx).unwrap();
        assert_eq!(groups["a"][0].category, CategoryId(2));
        assert_eq!(groups["a"][1].category, CategoryId(1));
    }

    #[test]
    fn detection_errors() {
        let idx = two_image_index();
        let high = r#"{"image_id":"a","detections":[{"category":"car","score":1.2,"cx":1,"cy":1,"w":1,"h":1}]}"#;
        assert!(matches!(
            parse_detections(high.as_bytes(), &idx),
            Err(DatasetError::ScoreOutOfRange { score, .. }) if score == 1.2
        ));
        let unknown = r#"{"image_id":"zz","detections":[]}"#;
        assert!(matches!(
            parse_detections(unknown.as_bytes(), &idx),
            Err(DatasetError::UnknownImage { .. })
        ));
    }

    fn offsets(plan: &TilePlan) -> (Vec<u32>, Vec<u32>) {
        let mut xs: Vec<u32> = plan.windows.iter().map(|w| w.x0).collect();
        let mut ys: Vec<u32> = plan.windows.iter().map(|w| w.y0).collect();
        xs.sort_unstable();
        xs.dedup();
        ys.sort_unstable();
        ys.dedup();
        (xs, ys)
    }

    #[test]
    fn tile_plan_fixtures() {
        let one = plan_tiles("p", 1024, 1024, 1024, 824).unwrap();
        assert_eq!(one.windows.len(), 1);
        assert_eq!((one.windows[0].x0, one.windows[0].y0), (0, 0));

        let big = plan_tiles("p", 2048, 2048, 1024, 824).unwrap();
        assert_eq!(big.windows.len(), 9);
        assert_eq!(offsets(&big), (vec![0, 824, 1024], vec![0, 824, 1024]));
        // row-major
        assert_eq!((big.windows[1].x0, big.windows[1].y0), (824, 0));
        assert_eq!((big.windows[3].x0, big.windows[3].y0), (0, 824));

        let wide = plan_tiles("p", 1500, 1024, 1024, 824).unwrap();
        assert_eq!(wide.windows.len(), 2);
        assert_eq!(offsets(&wide), (vec![0, 476], vec![0]));
    }

    #[test]
    fn tile_plan_degenerate_and_invalid() {
        let small = plan_tiles("p", 300, 500, 1024, 824).unwrap();
        assert!(small.degenerate);
        assert_eq!(small.windows.len(), 1);
        assert_eq!(small.windows[0].size, 500);
        assert!(plan_tiles("p", 100, 100, 50, 60).is_err());
        assert!(plan_tiles("p", 100, 100, 50, 0).is_err());
    }

    fn obj(cx: f64, cy: f64, w: f64, h: f64) -> GroundTruthObject {
        GroundTruthObject {
            category: CategoryId(0),
            cx,
            cy,
            w,
            h,
            angle: None,
        }
    }

    #[test]
    fn clip_inside_outside_partial() {
        let win = TileWindow {
            parent_id: "p".into(),
            x0: 100,
            y0: 200,
            size: 100,
        };
        let inside = clip_annotations(&win, &[obj(150.0, 250.0, 10.0, 20.0)], 0.5);
        assert_eq!(inside, vec![obj(50.0, 50.0, 10.0, 20.0)]);

        assert!(clip_annotations(&win, &[obj(20.0, 20.0, 10.0, 10.0)], 0.5).is_empty());

        // straddles the left edge x=100: spans [90, 110], half inside
        let half = obj(100.0, 250.0, 20.0, 10.0);
        assert!(clip_annotations(&win, std::slice::from_ref(&half), 0.6).is_empty());
        let kept = clip_annotations(&win, &[half], 0.4);
        assert_eq!(kept, vec![obj(5.0, 50.0, 10.0, 10.0)]);
    }

    #[test]
    fn tiled_manifest_ids() {
        let text = r#"{"image_id":"big","width":2048,"height":1024,"objects":[{"category":"car","cx":1000,"cy":500,"w":40,"h":40}]}"#;
        let idx = parse_ground_truth(text.as_bytes(), &cats()).unwrap();
        let (windows, tiles) = tile_dataset(&idx, 1024, 824, 0.5).unwrap();
        assert_eq!(windows.len(), 3);
        assert_eq!(tiles.len(), 3);
        let ids: Vec<_> = tiles.image_ids().collect();
        assert_eq!(ids, ["big@0_0", "big@824_0", "big@1024_0"]);
        // car at x in [980, 1020]: whole in first two tiles, 0% in the third
        assert_eq!(tiles.get("big@0_0").unwrap().objects.len(), 1);
        assert_eq!(tiles.get("big@824_0").unwrap().objects[0].cx, 176.0);
        assert!(tiles.get("big@1024_0").unwrap().objects.is_empty());
    }
}
