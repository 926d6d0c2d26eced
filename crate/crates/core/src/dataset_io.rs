//! Annotation datasets: SKU110k-style CSV, YOLO text, the tracking list and
//! category remapping.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{clip_box, BBox, Category};

/// Boxes may overshoot the image by this many pixels before parsing fails.
pub const BOUNDS_TOLERANCE_PX: f64 = 2.0;

/// Known misspellings and their canonical tracking-list names.
pub const CANONICAL_SPELLINGS: &[(&str, &str)] = &[("avacado", "avocado"), ("tamatos", "tomatoes")];

const SKU110K_COLUMNS: usize = 8;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("line {line}: {message}")]
    Validation { line: u64, message: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("category `{0}` has no class index")]
    UnmappableCategory(String),
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
}

impl DatasetError {
    fn parse(line: u64, message: impl Into<String>) -> Self {
        Self::Parse {
            line,
            message: message.into(),
        }
    }

    fn validation(line: u64, message: impl Into<String>) -> Self {
        Self::Validation {
            line,
            message: message.into(),
        }
    }

    /// Line the error refers to, when it came from a line-oriented format.
    pub fn line(&self) -> Option<u64> {
        match self {
            Self::Parse { line, .. } | Self::Validation { line, .. } => Some(*line),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub bbox: BBox,
    pub category: Category,
}

/// All annotations of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageAnnotations {
    pub image_name: String,
    pub image_width: u32,
    pub image_height: u32,
    pub annotations: Vec<Annotation>,
}

impl ImageAnnotations {
    pub fn new(image_name: impl Into<String>, image_width: u32, image_height: u32) -> Self {
        Self {
            image_name: image_name.into(),
            image_width,
            image_height,
            annotations: Vec::new(),
        }
    }
}

/// Lowercase, trim, collapse inner whitespace, then apply [`CANONICAL_SPELLINGS`].
pub fn normalize_name(raw: &str) -> String {
    let collapsed = raw.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    CANONICAL_SPELLINGS
        .iter()
        .find(|(typo, _)| *typo == collapsed)
        .map(|(_, canonical)| canonical.to_string())
        .unwrap_or(collapsed)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackingItem {
    pub name: Category,
    pub desired_quantity: u32,
}

/// The ordered list of tracked groceries and their desired weekly quantities.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct TrackingList {
    items: Vec<TrackingItem>,
}

impl TrackingList {
    pub fn new(entries: impl IntoIterator<Item = (String, u32)>) -> Result<Self, DatasetError> {
        let mut seen = HashSet::new();
        let mut items = Vec::new();
        for (raw, desired_quantity) in entries {
            let name = normalize_name(&raw);
            if name.is_empty() {
                return Err(DatasetError::Config("tracking list entry with empty name".into()));
            }
            if desired_quantity < 1 {
                return Err(DatasetError::Config(format!(
                    "`{name}`: desired_quantity must be at least 1"
                )));
            }
            if !seen.insert(name.clone()) {
                return Err(DatasetError::Config(format!(
                    "duplicate tracking list entry `{raw}` (normalizes to `{name}`)"
                )));
            }
            items.push(TrackingItem {
                name: Category::new(name).expect("checked non-empty"),
                desired_quantity,
            });
        }
        if items.is_empty() {
            return Err(DatasetError::Config("tracking list is empty".into()));
        }
        Ok(Self { items })
    }

    pub fn items(&self) -> &[TrackingItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn contains(&self, category: &Category) -> bool {
        self.items.iter().any(|i| &i.name == category)
    }

    pub fn categories(&self) -> impl Iterator<Item = &Category> {
        self.items.iter().map(|i| &i.name)
    }

    pub fn desired(&self, category: &Category) -> Option<u32> {
        self.items
            .iter()
            .find(|i| &i.name == category)
            .map(|i| i.desired_quantity)
    }
}

/// Load a tracking list from JSON: `[{"name": "...", "desired_quantity": n}, ...]`.
pub fn load_tracking_list(bytes: &[u8]) -> Result<TrackingList, DatasetError> {
    #[derive(Deserialize)]
    struct Entry {
        name: String,
        desired_quantity: i64,
    }
    let entries: Vec<Entry> = serde_json::from_slice(bytes)?;
    let mut converted = Vec::with_capacity(entries.len());
    for e in entries {
        let q = u32::try_from(e.desired_quantity).map_err(|_| {
            DatasetError::Config(format!("`{}`: desired_quantity must be at least 1", e.name))
        })?;
        converted.push((e.name, q));
    }
    TrackingList::new(converted)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MapTarget {
    Keep(Category),
    Drop,
}

/// Source category name to tracked category (or explicit drop).
#[derive(Debug, Clone, Default)]
pub struct CategoryMap {
    entries: HashMap<String, MapTarget>,
}

impl CategoryMap {
    pub fn new(
        pairs: impl IntoIterator<Item = (String, String)>,
        tracking: &TrackingList,
    ) -> Result<Self, DatasetError> {
        let mut entries = HashMap::new();
        for (source, target) in pairs {
            let target = if target.trim().eq_ignore_ascii_case("drop") {
                MapTarget::Drop
            } else {
                let name = Category::new(normalize_name(&target))
                    .map_err(|_| DatasetError::Config(format!("`{source}` maps to an empty name")))?;
                if !tracking.contains(&name) {
                    return Err(DatasetError::Config(format!(
                        "`{source}` maps to `{name}`, which is not on the tracking list"
                    )));
                }
                MapTarget::Keep(name)
            };
            entries.insert(source, target);
        }
        Ok(Self { entries })
    }

    /// Identity over every tracked category.
    pub fn identity(tracking: &TrackingList) -> Self {
        let entries = tracking
            .categories()
            .map(|c| (c.as_str().to_string(), MapTarget::Keep(c.clone())))
            .collect();
        Self { entries }
    }

    /// JSON object `{"source": "target" | "drop"}`.
    pub fn from_json(bytes: &[u8], tracking: &TrackingList) -> Result<Self, DatasetError> {
        let raw: BTreeMap<String, String> = serde_json::from_slice(bytes)?;
        Self::new(raw, tracking)
    }

    pub fn get(&self, source: &str) -> Option<&MapTarget> {
        self.entries.get(source)
    }
}

/// Per-source-category counts of annotations removed by a remap.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RemapReport {
    pub dropped: BTreeMap<String, usize>,
}

impl RemapReport {
    pub fn total_dropped(&self) -> usize {
        self.dropped.values().sum()
    }
}

/// Rewrite categories through `map`; unmapped or `drop` sources are removed and tallied.
///
/// Images left without annotations stay in the dataset as negatives.
pub fn remap_categories(
    dataset: Vec<ImageAnnotations>,
    map: &CategoryMap,
) -> (Vec<ImageAnnotations>, RemapReport) {
    let mut report = RemapReport::default();
    let remapped = dataset
        .into_iter()
        .map(|mut image| {
            image.annotations = std::mem::take(&mut image.annotations)
                .into_iter()
                .filter_map(|ann| match map.get(ann.category.as_str()) {
                    Some(MapTarget::Keep(target)) => Some(Annotation {
                        bbox: ann.bbox,
                        category: target.clone(),
                    }),
                    _ => {
                        *report.dropped.entry(ann.category.as_str().to_string()).or_default() += 1;
                        None
                    }
                })
                .collect();
            image
        })
        .collect();
    (remapped, report)
}

fn parse_f64(field: &str, what: &str, line: u64) -> Result<f64, DatasetError> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| DatasetError::parse(line, format!("{what} `{field}` is not a number")))?;
    if !v.is_finite() {
        return Err(DatasetError::parse(line, format!("{what} `{field}` is not finite")));
    }
    Ok(v)
}

fn parse_dim(field: &str, what: &str, line: u64) -> Result<u32, DatasetError> {
    let v: u32 = field
        .trim()
        .parse()
        .map_err(|_| DatasetError::parse(line, format!("{what} `{field}` is not a positive integer")))?;
    if v == 0 {
        return Err(DatasetError::validation(line, format!("{what} must be positive")));
    }
    Ok(v)
}

/// Validate a raw pixel box against its image, clipping small overshoots.
fn checked_box(
    coords: [f64; 4],
    width: u32,
    height: u32,
    line: u64,
) -> Result<BBox, DatasetError> {
    let [x1, y1, x2, y2] = coords;
    if x2 <= x1 || y2 <= y1 {
        return Err(DatasetError::validation(
            line,
            format!("degenerate box ({x1}, {y1}, {x2}, {y2}): need x1 < x2 and y1 < y2"),
        ));
    }
    let (w, h) = (width as f64, height as f64);
    let tol = BOUNDS_TOLERANCE_PX;
    if x1 < -tol || y1 < -tol || x2 > w + tol || y2 > h + tol {
        return Err(DatasetError::validation(
            line,
            format!("box ({x1}, {y1}, {x2}, {y2}) lies outside the {width}x{height} image"),
        ));
    }
    let raw = BBox::new(x1, y1, x2, y2).map_err(|e| DatasetError::validation(line, e.to_string()))?;
    clip_box(&raw, w, h).ok_or_else(|| {
        DatasetError::validation(line, format!("box {raw} has no area inside the image"))
    })
}

/// Parse SKU110k CSV: `image_name,x1,y1,x2,y2,class,image_width,image_height`.
///
/// A first row whose `x1` field is not numeric is treated as a header. Rows are
/// grouped per image in first-seen order.
pub fn parse_sku110k(bytes: &[u8]) -> Result<Vec<ImageAnnotations>, DatasetError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(bytes);

    let mut images: Vec<ImageAnnotations> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut first = true;

    for result in reader.records() {
        let record = result.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            DatasetError::parse(line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() == 1 && record[0].trim().is_empty() {
            continue;
        }
        if first {
            first = false;
            if record.len() > 1 && record[1].trim().parse::<f64>().is_err() {
                continue;
            }
        }
        if record.len() != SKU110K_COLUMNS {
            return Err(DatasetError::parse(
                line,
                format!("expected {SKU110K_COLUMNS} columns, found {}", record.len()),
            ));
        }

        let image_name = record[0].trim();
        if image_name.is_empty() {
            return Err(DatasetError::validation(line, "empty image_name"));
        }
        let coords = [
            parse_f64(&record[1], "x1", line)?,
            parse_f64(&record[2], "y1", line)?,
            parse_f64(&record[3], "x2", line)?,
            parse_f64(&record[4], "y2", line)?,
        ];
        let class = record[5].trim();
        let category = Category::new(class)
            .map_err(|_| DatasetError::validation(line, "empty class"))?;
        let width = parse_dim(&record[6], "image_width", line)?;
        let height = parse_dim(&record[7], "image_height", line)?;

        let slot = match index.get(image_name) {
            Some(&i) => {
                let existing = &images[i];
                if (existing.image_width, existing.image_height) != (width, height) {
                    return Err(DatasetError::validation(
                        line,
                        format!(
                            "`{image_name}` declared as {width}x{height}, earlier rows say {}x{}",
                            existing.image_width, existing.image_height
                        ),
                    ));
                }
                i
            }
            None => {
                index.insert(image_name.to_string(), images.len());
                images.push(ImageAnnotations::new(image_name, width, height));
                images.len() - 1
            }
        };
        let bbox = checked_box(coords, width, height, line)?;
        images[slot].annotations.push(Annotation { bbox, category });
    }
    Ok(images)
}

/// Serialize to SKU110k CSV (no header).
///
/// Coordinates use the shortest representation that parses back to the same
/// `f64`. Images with no annotations produce no rows.
pub fn write_sku110k(dataset: &[ImageAnnotations]) -> String {
    let mut out = String::new();
    for image in dataset {
        for ann in &image.annotations {
            let b = &ann.bbox;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                image.image_name,
                b.x1(),
                b.y1(),
                b.x2(),
                b.y2(),
                ann.category,
                image.image_width,
                image.image_height
            ));
        }
    }
    out
}

/// Class-index table for YOLO files: position in the list is the class index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassIndex {
    names: Vec<Category>,
}

impl ClassIndex {
    pub fn new(names: Vec<Category>) -> Self {
        Self { names }
    }

    pub fn from_tracking_list(tracking: &TrackingList) -> Self {
        Self::new(tracking.categories().cloned().collect())
    }

    /// JSON array of class names, e.g. `["banana", "milk"]`.
    pub fn from_json(bytes: &[u8]) -> Result<Self, DatasetError> {
        let names: Vec<String> = serde_json::from_slice(bytes)?;
        let names = names
            .into_iter()
            .map(|n| Category::new(n).map_err(|e| DatasetError::Config(e.to_string())))
            .collect::<Result<_, _>>()?;
        Ok(Self::new(names))
    }

    pub fn category(&self, index: usize) -> Option<&Category> {
        self.names.get(index)
    }

    pub fn index_of(&self, category: &Category) -> Option<usize> {
        self.names.iter().position(|c| c == category)
    }
}

/// Parse one YOLO label file (`index cx cy w h`, normalized) for a known image size.
pub fn parse_yolo(
    image_name: &str,
    text: &str,
    image_width: u32,
    image_height: u32,
    classes: &ClassIndex,
) -> Result<ImageAnnotations, DatasetError> {
    let mut image = ImageAnnotations::new(image_name, image_width, image_height);
    let (w_px, h_px) = (image_width as f64, image_height as f64);

    for (i, raw_line) in text.lines().enumerate() {
        let line = i as u64 + 1;
        let fields: Vec<&str> = raw_line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 5 {
            return Err(DatasetError::parse(
                line,
                format!("expected `index cx cy w h`, found {} fields", fields.len()),
            ));
        }
        let class: usize = fields[0]
            .parse()
            .map_err(|_| DatasetError::parse(line, format!("class index `{}` is not an integer", fields[0])))?;
        let category = classes
            .category(class)
            .ok_or_else(|| DatasetError::validation(line, format!("unknown class index {class}")))?
            .clone();
        let mut vals = [0.0; 4];
        for (slot, (name, field)) in vals.iter_mut().zip(["cx", "cy", "w", "h"].iter().zip(&fields[1..])) {
            let v = parse_f64(field, name, line)?;
            if !(0.0..=1.0).contains(&v) {
                return Err(DatasetError::validation(
                    line,
                    format!("{name} = {v} is outside the normalized range [0, 1]"),
                ));
            }
            *slot = v;
        }
        let [cx, cy, w, h] = vals;
        if w == 0.0 || h == 0.0 {
            return Err(DatasetError::validation(line, "zero width or height"));
        }
        let raw = BBox::new(
            (cx - w / 2.0) * w_px,
            (cy - h / 2.0) * h_px,
            (cx + w / 2.0) * w_px,
            (cy + h / 2.0) * h_px,
        )
        .map_err(|e| DatasetError::validation(line, e.to_string()))?;
        let bbox = clip_box(&raw, w_px, h_px)
            .ok_or_else(|| DatasetError::validation(line, "box has no area inside the image"))?;
        image.annotations.push(Annotation { bbox, category });
    }
    Ok(image)
}

/// Serialize one image's annotations as YOLO text with 6-decimal fixed point.
pub fn write_yolo(image: &ImageAnnotations, classes: &ClassIndex) -> Result<String, DatasetError> {
    let (w_px, h_px) = (image.image_width as f64, image.image_height as f64);
    let mut out = String::new();
    for ann in &image.annotations {
        let index = classes
            .index_of(&ann.category)
            .ok_or_else(|| DatasetError::UnmappableCategory(ann.category.to_string()))?;
        let b = &ann.bbox;
        let (cx, cy) = b.center();
        out.push_str(&format!(
            "{} {:.6} {:.6} {:.6} {:.6}\n",
            index,
            cx / w_px,
            cy / h_px,
            b.width() / w_px,
            b.height() / h_px
        ));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnnotationFormat {
    Sku110k,
    Yolo,
}

/// A serialized annotation file, named relative to the output directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputFile {
    pub name: String,
    pub contents: Vec<u8>,
}

/// Label file name for an image: `fridge_01.jpg` becomes `fridge_01.txt`.
pub fn yolo_label_name(image_name: &str) -> String {
    let stem = Path::new(image_name)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| image_name.to_string());
    format!("{stem}.txt")
}

/// Serialize a dataset. SKU110k yields a single `annotations.csv`; YOLO yields
/// one label file per image plus nothing else (image sizes are not part of the
/// YOLO format).
pub fn write_annotations(
    dataset: &[ImageAnnotations],
    format: AnnotationFormat,
    classes: Option<&ClassIndex>,
) -> Result<Vec<OutputFile>, DatasetError> {
    match format {
        AnnotationFormat::Sku110k => {
            if dataset.is_empty() {
                return Ok(Vec::new());
            }
            Ok(vec![OutputFile {
                name: "annotations.csv".into(),
                contents: write_sku110k(dataset).into_bytes(),
            }])
        }
        AnnotationFormat::Yolo => {
            let classes =
                classes.ok_or_else(|| DatasetError::Config("YOLO output needs a class index".into()))?;
            dataset
                .iter()
                .map(|image| {
                    Ok(OutputFile {
                        name: yolo_label_name(&image.image_name),
                        contents: write_yolo(image, classes)?.into_bytes(),
                    })
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cat(s: &str) -> Category {
        Category::new(s).unwrap()
    }

    fn table1() -> TrackingList {
        load_tracking_list(include_bytes!("../config/tracking_list.json")).unwrap()
    }

    #[test]
    fn sku110k_single_row() {
        let parsed = parse_sku110k(b"img_1.jpg,0,0,10,10,banana,100,100\n").unwrap();
        assert_eq!(parsed.len(), 1);
        assert_eq!(parsed[0].image_name, "img_1.jpg");
        assert_eq!((parsed[0].image_width, parsed[0].image_height), (100, 100));
        assert_eq!(parsed[0].annotations.len(), 1);
        assert_eq!(parsed[0].annotations[0].bbox.to_array(), [0.0, 0.0, 10.0, 10.0]);
        assert_eq!(parsed[0].annotations[0].category, cat("banana"));
        assert_eq!(parse_sku110k(write_sku110k(&parsed).as_bytes()).unwrap(), parsed);
    }

    #[test]
    fn sku110k_empty_input() {
        assert!(parse_sku110k(b"").unwrap().is_empty());
    }

    #[test]
    fn sku110k_inverted_box_is_a_validation_error_on_its_line() {
        let err = parse_sku110k(b"img_1.jpg,10,0,5,10,banana,100,100").unwrap_err();
        assert!(matches!(err, DatasetError::Validation { line: 1, .. }), "{err}");
    }

    #[test]
    fn sku110k_header_and_grouping() {
        let csv = "image_name,x1,y1,x2,y2,class,image_width,image_height\n\
                   a.jpg,1,1,5,5,object,50,40\n\
                   b.jpg,2,2,6,6,object,60,60\n\
                   a.jpg,10,10,20,20,object,50,40\n";
        let parsed = parse_sku110k(csv.as_bytes()).unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[0].image_name, "a.jpg");
        assert_eq!(parsed[0].annotations.len(), 2);
        assert_eq!(parsed[1].image_name, "b.jpg");
        assert_eq!(parsed[0].annotations[0].category, cat("object"));
    }

    #[test]
    fn sku110k_errors_carry_line_numbers() {
        let header = "image_name,x1,y1,x2,y2,class,image_width,image_height\n";
        let cases = [
            ("a.jpg,1,1,5,5,object,50,40\na.jpg,1,1,5,object,50,40\n", 2),
            ("a.jpg,1,1,5,5,object,50,40\na.jpg,1,x,5,5,object,50,40\n", 2),
            ("a.jpg,1,1,5,5,object,50,40\na.jpg,1,1,5,5,object,50,41\n", 2),
            ("a.jpg,1,1,5,5,object,50,40\na.jpg,1,1,60,5,object,50,40\n", 2),
            ("a.jpg,1,1,5,5,object,0,40\n", 1),
        ];
        for (body, line) in cases {
            let err = parse_sku110k(body.as_bytes()).unwrap_err();
            assert_eq!(err.line(), Some(line), "{body:?}: {err}");
            let with_header = format!("{header}{body}");
            let err = parse_sku110k(with_header.as_bytes()).unwrap_err();
            assert_eq!(err.line(), Some(line + 1), "{body:?}: {err}");
        }
    }

    #[test]
    fn sku110k_small_overshoot_is_clipped() {
        let parsed = parse_sku110k(b"a.jpg,-1.5,0,101,50,object,100,100\n").unwrap();
        assert_eq!(parsed[0].annotations[0].bbox.to_array(), [0.0, 0.0, 100.0, 50.0]);
        assert!(parse_sku110k(b"a.jpg,-2.5,0,50,50,object,100,100\n").is_err());
    }

    #[test]
    fn yolo_examples() {
        let classes = ClassIndex::new(vec![cat("banana")]);
        let img = parse_yolo("a.jpg", "0 0.5 0.5 0.2 0.1", 640, 640, &classes).unwrap();
        let b = img.annotations[0].bbox.to_array();
        for (got, want) in b.iter().zip([256.0, 288.0, 384.0, 352.0]) {
            assert!((got - want).abs() < 1e-9, "{b:?}");
        }
        assert_eq!(img.annotations[0].category, cat("banana"));

        assert!(parse_yolo("a.jpg", "", 640, 640, &classes).unwrap().annotations.is_empty());

        let err = parse_yolo("a.jpg", "0 0.5 0.5 1.2 0.1", 640, 640, &classes).unwrap_err();
        assert!(matches!(err, DatasetError::Validation { line: 1, .. }), "{err}");
        let err = parse_yolo("a.jpg", "0 0.5 0.5 0.2 0.1\n3 0.5 0.5 0.2 0.1", 640, 640, &classes)
            .unwrap_err();
        assert_eq!(err.line(), Some(2));
        let err = parse_yolo("a.jpg", "0 0.5 0.5 0 0.1", 640, 640, &classes).unwrap_err();
        assert_eq!(err.line(), Some(1));
        let err = parse_yolo("a.jpg", "0 0.5 0.5 0.1", 640, 640, &classes).unwrap_err();
        assert!(matches!(err, DatasetError::Parse { line: 1, .. }));
    }

    #[test]
    fn yolo_box_past_edge_is_clipped() {
        let classes = ClassIndex::new(vec![cat("milk")]);
        let img = parse_yolo("a.jpg", "0 0.0 1.0 0.2 0.2", 100, 100, &classes).unwrap();
        assert_eq!(img.annotations[0].bbox.to_array(), [0.0, 90.0, 10.0, 100.0]);
    }

    #[test]
    fn yolo_write_matches_parse_example() {
        let classes = ClassIndex::new(vec![cat("banana")]);
        let mut img = ImageAnnotations::new("a.jpg", 640, 640);
        img.annotations.push(Annotation {
            bbox: BBox::new(256.0, 288.0, 384.0, 352.0).unwrap(),
            category: cat("banana"),
        });
        assert_eq!(write_yolo(&img, &classes).unwrap(), "0 0.500000 0.500000 0.200000 0.100000\n");

        img.annotations[0].category = cat("kiwi");
        let err = write_yolo(&img, &classes).unwrap_err();
        assert!(err.to_string().contains("kiwi"));
    }

    #[test]
    fn write_empty_dataset() {
        assert!(write_annotations(&[], AnnotationFormat::Sku110k, None).unwrap().is_empty());
        let classes = ClassIndex::new(vec![cat("banana")]);
        assert!(write_annotations(&[], AnnotationFormat::Yolo, Some(&classes)).unwrap().is_empty());
        assert_eq!(yolo_label_name("shelf/fridge_01.jpg"), "fridge_01.txt");
    }

    #[test]
    fn tracking_list_table1_normalizes_spellings() {
        let list = table1();
        assert_eq!(list.len(), 9);
        let names: Vec<&str> = list.categories().map(|c| c.as_str()).collect();
        assert_eq!(
            names,
            [
                "banana",
                "avocado",
                "milk",
                "strawberries",
                "blueberries",
                "tomatoes",
                "carrots",
                "salad mix",
                "egg white"
            ]
        );
    }

    #[test]
    fn tracking_list_errors() {
        let dup = br#"[{"name":"banana","desired_quantity":1},{"name":" Banana ","desired_quantity":2}]"#;
        assert!(matches!(load_tracking_list(dup), Err(DatasetError::Config(_))));
        assert!(matches!(load_tracking_list(b"[]"), Err(DatasetError::Config(_))));
        let zero = br#"[{"name":"milk","desired_quantity":0}]"#;
        assert!(matches!(load_tracking_list(zero), Err(DatasetError::Config(_))));
        let neg = br#"[{"name":"milk","desired_quantity":-3}]"#;
        assert!(matches!(load_tracking_list(neg), Err(DatasetError::Config(_))));
        assert!(matches!(load_tracking_list(b"{"), Err(DatasetError::Json(_))));
    }

    #[test]
    fn category_map_validates_targets() {
        let list = table1();
        assert!(CategoryMap::from_json(br#"{"Avocado ripe": "Avacado", "object": "drop"}"#, &list).is_ok());
        let err = CategoryMap::from_json(br#"{"Kiwi": "kiwi"}"#, &list).unwrap_err();
        assert!(err.to_string().contains("kiwi"));
    }

    fn dataset(cats: &[&str]) -> Vec<ImageAnnotations> {
        let mut img = ImageAnnotations::new("fridge.jpg", 100, 100);
        for (i, c) in cats.iter().enumerate() {
            let x = i as f64 * 5.0;
            img.annotations.push(Annotation {
                bbox: BBox::new(x, 0.0, x + 4.0, 4.0).unwrap(),
                category: cat(c),
            });
        }
        vec![img, ImageAnnotations::new("empty.jpg", 10, 10)]
    }

    #[test]
    fn remap_examples() {
        let list = table1();
        let map = CategoryMap::from_json(br#"{"Avocado ripe": "avocado", "Banana": "banana"}"#, &list)
            .unwrap();
        let (out, report) = remap_categories(dataset(&["Avocado ripe", "Banana", "Apricot"]), &map);
        let cats: Vec<&str> = out[0].annotations.iter().map(|a| a.category.as_str()).collect();
        assert_eq!(cats, ["avocado", "banana"]);
        assert_eq!(report.dropped.get("Apricot"), Some(&1));

        let identity = CategoryMap::identity(&list);
        let input = dataset(&["banana", "milk", "egg white"]);
        let (out, report) = remap_categories(input.clone(), &identity);
        assert_eq!(out, input);
        assert_eq!(report.total_dropped(), 0);

        let (out, report) = remap_categories(dataset(&["Apple", "Apple", "Kiwi"]), &map);
        assert_eq!(out.len(), 2, "negatives are kept");
        assert!(out.iter().all(|i| i.annotations.is_empty()));
        assert_eq!(report.total_dropped(), 3);
        assert_eq!(report.dropped.get("Apple"), Some(&2));
    }

    proptest! {
        #[test]
        fn remap_conserves_annotation_count(picks in proptest::collection::vec(0usize..6, 0..15)) {
            let pool = ["banana", "Avocado ripe", "milk", "Apple", "object", "Kiwi"];
            let cats: Vec<&str> = picks.iter().map(|&i| pool[i]).collect();
            let list = table1();
            let map = CategoryMap::from_json(
                br#"{"banana": "banana", "Avocado ripe": "avocado", "milk": "milk", "object": "drop"}"#,
                &list,
            ).unwrap();
            let input = dataset(&cats);
            let before: usize = input.iter().map(|i| i.annotations.len()).sum();
            let (out, report) = remap_categories(input, &map);
            let after: usize = out.iter().map(|i| i.annotations.len()).sum();
            prop_assert_eq!(before, after + report.total_dropped());
        }

        #[test]
        fn sku110k_round_trip(boxes in proptest::collection::vec(
            (0usize..3, 0.0f64..90.0, 0.0f64..90.0, 0.01f64..10.0, 0.01f64..10.0), 1..20)
        ) {
            let mut images: Vec<ImageAnnotations> = (0..3)
                .map(|i| ImageAnnotations::new(format!("img_{i}.jpg"), 100, 100))
                .collect();
            for (img, x, y, w, h) in boxes {
                images[img].annotations.push(Annotation {
                    bbox: BBox::new(x, y, x + w, y + h).unwrap(),
                    category: cat("object"),
                });
            }
            images.retain(|i| !i.annotations.is_empty());
            let parsed = parse_sku110k(write_sku110k(&images).as_bytes()).unwrap();
            prop_assert_eq!(parsed, images);
        }
    }
}
