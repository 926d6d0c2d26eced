//! Command-line entry point. `run` is the whole program minus process exit,
//! so tests can drive it in-process.
//!
//! Exit codes: 0 ok, 1 usage, 2 data or validation, 3 I/O, 4 detector protocol.

use std::collections::{BTreeMap, HashMap};
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use chrono::{DateTime, Utc};
use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{augment_dataset, AugmentConfig, AugmentError, Example, Image, VariantPlan};
use crate::dataset_io::{
    load_tracking_list, parse_sku110k, parse_yolo, write_annotations, AnnotationFormat, ClassIndex, DatasetError,
    ImageAnnotations, TrackingList,
};
use crate::detector::{
    fixture_detect, postprocess, remote_detect, DetectRequest, DetectionFixture, DetectorError, Endpoint, ImageSource,
    DEFAULT_MIN_CONFIDENCE, DEFAULT_NMS_THRESHOLD,
};
use crate::fusion::{fuse_snapshot, CameraFrame, FusionError, ZoneMap, DEFAULT_QUALITY_MIN};
use crate::geometry::{BBox, Category, Detection, GeometryError};
use crate::inventory::{read_jsonl, InventoryError, InventoryStore, JsonlWriter, SnapshotRecord};
use crate::metrics::{evaluate, parse_detections_csv, MetricsError};
use crate::ordering::{decide_order, Order, OrderPolicy, OrderingError};

/// The tracking list used when no `--needs`/`--taxonomy` file is given.
pub const DEFAULT_TRACKING_LIST: &[u8] = include_bytes!("../config/tracking_list.json");
pub const STORE_ENV: &str = "GROCERY_TRACKER_STORE";
pub const TAXONOMY_VERSION: &str = "tracking-list-v1";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Protocol(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
            Self::Io(_) => 3,
            Self::Protocol(_) => 4,
        }
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                Self::Data(e.to_string())
            }
        }
    )*};
}
data_error!(DatasetError, MetricsError, FusionError, OrderingError, GeometryError, serde_json::Error);

impl From<AugmentError> for CliError {
    fn from(e: AugmentError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<InventoryError> for CliError {
    fn from(e: InventoryError) -> Self {
        match e {
            InventoryError::Io { .. } => Self::Io(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<DetectorError> for CliError {
    fn from(e: DetectorError) -> Self {
        match e {
            DetectorError::Io(_) => Self::Io(format!("detector: {e}")),
            DetectorError::Fixture(_) => Self::Data(e.to_string()),
            DetectorError::Endpoint(_) | DetectorError::InvalidRequest(_) => Self::Usage(e.to_string()),
            _ => Self::Protocol(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "grocery-tracker", version, about = "Track refrigerator groceries from camera detections")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Sku110k,
    Yolo,
}

impl From<Format> for AnnotationFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Sku110k => AnnotationFormat::Sku110k,
            Format::Yolo => AnnotationFormat::Yolo,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Score detections against ground truth; prints a JSON report.
    Evaluate {
        /// Ground truth, SKU110k CSV.
        #[arg(long)]
        gt: PathBuf,
        /// Detections CSV: image_name,x1,y1,x2,y2,category,confidence.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou_threshold: f64,
        /// Tracking list JSON whose categories form the taxonomy.
        #[arg(long)]
        taxonomy: Option<PathBuf>,
    },
    /// Convert annotations between SKU110k CSV (a file) and YOLO labels (a directory).
    Convert {
        #[arg(long, value_enum)]
        from: Format,
        #[arg(long, value_enum)]
        to: Format,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON array of class names in index order; defaults to the tracking list.
        #[arg(long)]
        classes: Option<PathBuf>,
        /// WIDTHxHEIGHT of every image, required when reading YOLO labels.
        #[arg(long, value_parser = parse_size)]
        image_size: Option<(u32, u32)>,
        /// Image file extension assumed when reading YOLO labels.
        #[arg(long, default_value = "jpg")]
        image_ext: String,
    },
    /// Augment a directory of PNGs described by annotations.csv.
    Augment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
    },
    /// Detect items in one camera frame and queue the result for the next reconcile.
    Ingest {
        #[arg(long)]
        camera: String,
        #[arg(long)]
        image: PathBuf,
        /// Detections CSV to read results from instead of running a detector.
        #[arg(long, conflicts_with = "endpoint", required_unless_present = "endpoint")]
        fixture: Option<PathBuf>,
        /// tcp://HOST:PORT or cmd:PROGRAM [ARGS..]
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long, env = STORE_ENV)]
        store: PathBuf,
        #[arg(long)]
        zones: PathBuf,
        #[arg(long, default_value_t = 5000)]
        timeout_ms: u64,
        /// Defaults to CAMERA:IMAGE_FILE_NAME.
        #[arg(long)]
        request_id: Option<String>,
        #[arg(long, default_value_t = DEFAULT_MIN_CONFIDENCE)]
        min_confidence: f64,
        #[arg(long, default_value_t = DEFAULT_NMS_THRESHOLD)]
        nms_threshold: f64,
    },
    /// Fuse queued frames into a snapshot and append it to the store.
    Reconcile {
        #[arg(long, env = STORE_ENV)]
        store: PathBuf,
        #[arg(long)]
        zones: PathBuf,
        #[arg(long, default_value_t = DEFAULT_QUALITY_MIN)]
        quality_min: f64,
        /// Snapshot timestamp, RFC 3339.
        #[arg(long)]
        now: DateTime<Utc>,
        /// Tracking list used to zero-fill counts; defaults to the built-in list.
        #[arg(long)]
        needs: Option<PathBuf>,
    },
    /// Decide whether to order; appends any order to the order log.
    Order {
        #[arg(long, env = STORE_ENV)]
        store: PathBuf,
        #[arg(long)]
        needs: PathBuf,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        orders: PathBuf,
    },
    /// Replay a simulation script with fixture detections.
    Simulate {
        #[arg(long)]
        script: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_size(s: &str) -> Result<(u32, u32), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or("expected WIDTHxHEIGHT")?;
    let w: u32 = w.trim().parse().map_err(|_| format!("bad width `{w}`"))?;
    let h: u32 = h.trim().parse().map_err(|_| format!("bad height `{h}`"))?;
    if w == 0 || h == 0 {
        return Err("image size must be positive".into());
    }
    Ok((w, h))
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn in_file<E: Into<CliError>>(path: &Path) -> impl FnOnce(E) -> CliError + '_ {
    move |e| match e.into() {
        CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
        other => other,
    }
}

fn tracking_list(path: Option<&Path>) -> Result<TrackingList, CliError> {
    match path {
        Some(p) => load_tracking_list(&read(p)?).map_err(in_file(p)),
        None => Ok(load_tracking_list(DEFAULT_TRACKING_LIST)?),
    }
}

fn to_json_line<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

/// Frames waiting for the next reconcile live beside the store.
pub fn pending_path(store: &Path) -> PathBuf {
    store.with_extension("pending.jsonl")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FrameDetection {
    category: String,
    confidence: f64,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PendingFrame {
    camera_id: String,
    image_name: String,
    detections: Vec<FrameDetection>,
}

impl PendingFrame {
    fn new(camera_id: &str, image_name: &str, dets: &[Detection]) -> Self {
        Self {
            camera_id: camera_id.to_string(),
            image_name: image_name.to_string(),
            detections: dets
                .iter()
                .map(|d| FrameDetection {
                    category: d.category.as_str().to_string(),
                    confidence: d.confidence(),
                    bbox: d.bbox.to_array(),
                })
                .collect(),
        }
    }

    fn into_camera_frame(self) -> Result<CameraFrame, CliError> {
        let detections = self
            .detections
            .into_iter()
            .map(|d| {
                let [x1, y1, x2, y2] = d.bbox;
                Ok(Detection::new(BBox::new(x1, y1, x2, y2)?, Category::new(d.category)?, d.confidence)?
                    .with_camera(self.camera_id.clone()))
            })
            .collect::<Result<_, GeometryError>>()?;
        Ok(CameraFrame {
            camera_id: self.camera_id,
            image_name: self.image_name,
            detections,
        })
    }
}

/// Keep the most recent frame of each camera, in first-seen camera order.
fn latest_per_camera(frames: Vec<PendingFrame>) -> Result<Vec<CameraFrame>, CliError> {
    let mut order: Vec<String> = Vec::new();
    let mut latest: HashMap<String, PendingFrame> = HashMap::new();
    for f in frames {
        if let Some(prev) = latest.get(&f.camera_id) {
            warn!(
                "camera `{}`: frame `{}` superseded by `{}`",
                f.camera_id, prev.image_name, f.image_name
            );
        } else {
            order.push(f.camera_id.clone());
        }
        latest.insert(f.camera_id.clone(), f);
    }
    order
        .into_iter()
        .map(|cam| latest.remove(&cam).expect("recorded above").into_camera_frame())
        .collect()
}

pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let rendered = e.render().to_string();
            let _ = if code == 0 {
                stdout.write_all(rendered.as_bytes())
            } else {
                stderr.write_all(rendered.as_bytes())
            };
            return code;
        }
    };
    match dispatch(cli.command, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

fn emit(stdout: &mut dyn Write, text: &str) -> Result<(), CliError> {
    stdout
        .write_all(text.as_bytes())
        .map_err(|e| CliError::Io(format!("stdout: {e}")))
}

fn dispatch(command: Command, stdout: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::Evaluate {
            gt,
            pred,
            iou_threshold,
            taxonomy,
        } => {
            let truth = parse_sku110k(&read(&gt)?).map_err(in_file(&gt))?;
            let dets = parse_detections_csv(&read(&pred)?).map_err(in_file(&pred))?;
            let list = tracking_list(taxonomy.as_deref())?;
            let categories: Vec<Category> = list.categories().cloned().collect();
            let report = evaluate(&truth, &dets, iou_threshold, &categories)?;
            emit(stdout, &to_json_line(&report))
        }
        Command::Convert {
            from,
            to,
            input,
            out,
            classes,
            image_size,
            image_ext,
        } => {
            let classes = match classes {
                Some(p) => ClassIndex::from_json(&read(&p)?).map_err(in_file(&p))?,
                None => ClassIndex::from_tracking_list(&tracking_list(None)?),
            };
            let dataset = match from {
                Format::Sku110k => parse_sku110k(&read(&input)?).map_err(in_file(&input))?,
                Format::Yolo => {
                    let (w, h) = image_size
                        .ok_or_else(|| CliError::Usage("--image-size is required when reading YOLO labels".into()))?;
                    read_yolo_dir(&input, w, h, &image_ext, &classes)?
                }
            };
            let files = write_annotations(&dataset, to.into(), Some(&classes))?;
            match to {
                Format::Sku110k => {
                    let contents = files.into_iter().next().map(|f| f.contents).unwrap_or_default();
                    write(&out, &contents)?;
                }
                Format::Yolo => {
                    create_dir(&out)?;
                    for f in files {
                        write(&out.join(&f.name), &f.contents)?;
                    }
                }
            }
            info!("converted {} images", dataset.len());
            Ok(())
        }
        Command::Augment {
            config,
            input,
            out,
            seed,
        } => {
            let cfg = AugmentConfig::from_json(&read(&config)?).map_err(in_file(&config))?;
            let summary = augment_dir(&cfg, &input, &out, seed)?;
            emit(stdout, &to_json_line(&summary))
        }
        Command::Ingest {
            camera,
            image,
            fixture,
            endpoint,
            store,
            zones,
            timeout_ms,
            request_id,
            min_confidence,
            nms_threshold,
        } => {
            let zones = ZoneMap::from_json(&read(&zones)?).map_err(in_file(&zones))?;
            if zones.zone_of(&camera).is_none() {
                return Err(FusionError::UnknownCamera(camera).into());
            }
            let image_name = image
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .ok_or_else(|| CliError::Usage(format!("{} is not a file path", image.display())))?;
            let raw = match (fixture, endpoint) {
                (Some(fx), _) => {
                    let fixture = DetectionFixture::from_csv(&read(&fx)?).map_err(in_file(&fx))?;
                    fixture_detect(&fixture, &image_name)
                }
                (None, Some(ep)) => {
                    let endpoint: Endpoint = ep.parse()?;
                    let req = DetectRequest {
                        request_id: request_id.unwrap_or_else(|| format!("{camera}:{image_name}")),
                        camera_id: camera.clone(),
                        image: ImageSource::Bytes(read(&image)?),
                        taxonomy_version: TAXONOMY_VERSION.into(),
                    };
                    remote_detect(&endpoint, &req, Duration::from_millis(timeout_ms.max(1)))?.detections
                }
                (None, None) => unreachable!("clap requires one detector source"),
            };
            let dets = postprocess(&raw, min_confidence, nms_threshold);
            let frame = PendingFrame::new(&camera, &image_name, &dets);

            // holding the store lock serializes this append with reconcile
            let _store = InventoryStore::open(&store)?;
            let (mut pending, _) = JsonlWriter::open::<PendingFrame>(&pending_path(&store))?;
            pending.append(&frame)?;
            emit(
                stdout,
                &format!(
                    "{}\n",
                    serde_json::json!({"camera_id": camera, "image_name": image_name, "detections": dets.len()})
                ),
            )
        }
        Command::Reconcile {
            store,
            zones,
            quality_min,
            now,
            needs,
        } => {
            let zones = ZoneMap::from_json(&read(&zones)?).map_err(in_file(&zones))?;
            let needs = tracking_list(needs.as_deref())?;
            let mut store = InventoryStore::open(&store)?;
            let (mut pending, frames) = JsonlWriter::open::<PendingFrame>(&pending_path(store.path()))?;
            let frames = latest_per_camera(frames)?;
            let snapshot = fuse_snapshot(&frames, &zones, quality_min, now, Some(&needs))?;
            let record = store.append_snapshot(snapshot)?.clone();
            pending.clear()?;
            emit(stdout, &to_json_line(&record))
        }
        Command::Order {
            store,
            needs,
            policy,
            orders,
        } => {
            let needs = tracking_list(Some(&needs))?;
            let policy = OrderPolicy::from_json(&read(&policy)?).map_err(in_file(&policy))?;
            let store = InventoryStore::open(&store)?;
            let (mut log, past) = JsonlWriter::open::<Order>(&orders)?;
            if store.records().is_empty() {
                return emit(stdout, "no order\n");
            }
            match decide_order(store.history(policy.confirm_snapshots), &needs, &policy, &past)? {
                Some(order) => {
                    log.append(&order)?;
                    emit(stdout, &to_json_line(&order))
                }
                None => emit(stdout, "no order\n"),
            }
        }
        Command::Simulate { script, out } => {
            let summary = simulate(&script, &out)?;
            emit(stdout, &to_json_line(&summary))
        }
    }
}

fn read_yolo_dir(
    dir: &Path,
    width: u32,
    height: u32,
    image_ext: &str,
    classes: &ClassIndex,
) -> Result<Vec<ImageAnnotations>, CliError> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    let mut labels: Vec<PathBuf> = entries
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    labels.sort();
    labels
        .iter()
        .map(|p| {
            let stem = p.file_stem().expect("has extension").to_string_lossy();
            let text = String::from_utf8(read(p)?).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            parse_yolo(&format!("{stem}.{image_ext}"), &text, width, height, classes).map_err(in_file(p))
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct AugmentOutput {
    image_name: String,
    source_image: String,
    variant: usize,
    boxes: usize,
    plan: VariantPlan,
}

#[derive(Debug, Serialize)]
struct AugmentReport {
    seed: u64,
    config: AugmentConfig,
    notes: Vec<String>,
    outputs: Vec<AugmentOutput>,
}

#[derive(Debug, Serialize)]
struct AugmentSummary {
    inputs: usize,
    outputs: usize,
}

fn augment_dir(cfg: &AugmentConfig, input: &Path, out: &Path, seed: u64) -> Result<AugmentSummary, CliError> {
    let csv_path = input.join("annotations.csv");
    let dataset = parse_sku110k(&read(&csv_path)?).map_err(in_file(&csv_path))?;
    let mut examples = Vec::with_capacity(dataset.len());
    for img in &dataset {
        let path = input.join(&img.image_name);
        let image = Image::from_png(&read(&path)?).map_err(in_file(&path))?;
        if (image.width(), image.height()) != (img.image_width, img.image_height) {
            return Err(CliError::Data(format!(
                "{}: image is {}x{} but annotations.csv says {}x{}",
                path.display(),
                image.width(),
                image.height(),
                img.image_width,
                img.image_height
            )));
        }
        examples.push(Example::new(image, img.annotations.clone()));
    }

    let run = augment_dataset(&examples, cfg, seed)?;
    create_dir(out)?;
    let mut annotated = Vec::with_capacity(run.outputs.len());
    let mut report_outputs = Vec::with_capacity(run.outputs.len());
    for o in run.outputs {
        let source = &dataset[o.source_index].image_name;
        let stem = Path::new(source)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| source.clone());
        let name = format!("{stem}_aug{}.png", o.variant);
        write(&out.join(&name), &o.example.image.to_png()?)?;
        let mut ann = ImageAnnotations::new(name.clone(), o.example.image.width(), o.example.image.height());
        ann.annotations = o.example.annotations;
        report_outputs.push(AugmentOutput {
            image_name: name,
            source_image: source.clone(),
            variant: o.variant,
            boxes: ann.annotations.len(),
            plan: o.plan,
        });
        annotated.push(ann);
    }
    let files = write_annotations(&annotated, AnnotationFormat::Sku110k, None)?;
    let csv = files.into_iter().next().map(|f| f.contents).unwrap_or_default();
    write(&out.join("annotations.csv"), &csv)?;

    let report = AugmentReport {
        seed,
        config: cfg.clone(),
        notes: run.notes,
        outputs: report_outputs,
    };
    write(&out.join("augment_report.json"), to_json_line(&report).as_bytes())?;
    Ok(AugmentSummary {
        inputs: dataset.len(),
        outputs: annotated.len(),
    })
}

/// A replayable week of camera frames and reconcile points. Paths are
/// relative to the script file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationScript {
    pub needs: PathBuf,
    pub policy: PathBuf,
    pub zones: PathBuf,
    /// Default detections CSV for frames that do not name their own.
    pub fixture: PathBuf,
    #[serde(default = "default_quality_min")]
    pub quality_min: f64,
    #[serde(default = "default_min_confidence")]
    pub min_confidence: f64,
    #[serde(default = "default_nms_threshold")]
    pub nms_threshold: f64,
    pub events: Vec<SimEvent>,
}

fn default_quality_min() -> f64 {
    DEFAULT_QUALITY_MIN
}

fn default_min_confidence() -> f64 {
    DEFAULT_MIN_CONFIDENCE
}

fn default_nms_threshold() -> f64 {
    DEFAULT_NMS_THRESHOLD
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case", deny_unknown_fields)]
pub enum SimEvent {
    Frame {
        camera_id: String,
        image_name: String,
        timestamp: DateTime<Utc>,
        #[serde(default)]
        fixture: Option<PathBuf>,
    },
    /// Fuse the frames seen since the last reconcile, then decide on an order.
    Reconcile { timestamp: DateTime<Utc> },
}

impl SimEvent {
    fn timestamp(&self) -> DateTime<Utc> {
        match self {
            Self::Frame { timestamp, .. } | Self::Reconcile { timestamp } => *timestamp,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct SimulationSummary {
    pub frames: usize,
    pub snapshots: usize,
    pub degraded_camera_frames: usize,
    pub orders: usize,
    pub ordered_quantities: BTreeMap<String, u32>,
    pub final_counts: BTreeMap<String, u32>,
}

pub const SIM_INVENTORY_FILE: &str = "inventory.jsonl";
pub const SIM_ORDERS_FILE: &str = "orders.jsonl";
pub const SIM_SUMMARY_FILE: &str = "summary.json";

fn remove_if_exists(path: &Path) -> Result<(), CliError> {
    match std::fs::remove_file(path) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(CliError::Io(format!("{}: {e}", path.display()))),
    }
}

/// Replay `script` into `out`, replacing any previous run there.
pub fn simulate(script_path: &Path, out: &Path) -> Result<SimulationSummary, CliError> {
    let script: SimulationScript = serde_json::from_slice(&read(script_path)?).map_err(in_file(script_path))?;
    let base = script_path.parent().unwrap_or(Path::new("."));
    let needs = tracking_list(Some(&base.join(&script.needs)))?;
    let policy_path = base.join(&script.policy);
    let policy = OrderPolicy::from_json(&read(&policy_path)?).map_err(in_file(&policy_path))?;
    let zones_path = base.join(&script.zones);
    let zones = ZoneMap::from_json(&read(&zones_path)?).map_err(in_file(&zones_path))?;

    if let Some(w) = script.events.windows(2).find(|w| w[1].timestamp() < w[0].timestamp()) {
        return Err(CliError::Data(format!(
            "{}: event at {} comes after one at {}",
            script_path.display(),
            w[1].timestamp(),
            w[0].timestamp()
        )));
    }

    let mut fixtures: HashMap<PathBuf, DetectionFixture> = HashMap::new();
    let mut load_fixture = |rel: &Path| -> Result<DetectionFixture, CliError> {
        let path = base.join(rel);
        if let Some(fx) = fixtures.get(&path) {
            return Ok(fx.clone());
        }
        let fx = DetectionFixture::from_csv(&read(&path)?).map_err(in_file(&path))?;
        fixtures.insert(path, fx.clone());
        Ok(fx)
    };
    let default_fixture = load_fixture(&script.fixture)?;

    create_dir(out)?;
    let store_path = out.join(SIM_INVENTORY_FILE);
    let orders_path = out.join(SIM_ORDERS_FILE);
    remove_if_exists(&store_path)?;
    remove_if_exists(&orders_path)?;
    let mut store = InventoryStore::open(&store_path)?;
    let (mut order_log, mut orders) = JsonlWriter::open::<Order>(&orders_path)?;

    let mut pending: Vec<PendingFrame> = Vec::new();
    let mut frames = 0;
    let mut degraded_camera_frames = 0;
    for event in &script.events {
        match event {
            SimEvent::Frame {
                camera_id,
                image_name,
                fixture,
                ..
            } => {
                if zones.zone_of(camera_id).is_none() {
                    return Err(FusionError::UnknownCamera(camera_id.clone()).into());
                }
                let raw = match fixture {
                    Some(rel) => fixture_detect(&load_fixture(rel)?, image_name),
                    None => fixture_detect(&default_fixture, image_name),
                };
                let dets = postprocess(&raw, script.min_confidence, script.nms_threshold);
                pending.push(PendingFrame::new(camera_id, image_name, &dets));
                frames += 1;
            }
            SimEvent::Reconcile { timestamp } => {
                let batch = latest_per_camera(std::mem::take(&mut pending))?;
                let snapshot = fuse_snapshot(&batch, &zones, script.quality_min, *timestamp, Some(&needs))?;
                degraded_camera_frames += snapshot.degraded_cameras.len();
                store.append_snapshot(snapshot)?;
                let recent: &[SnapshotRecord] = store.history(policy.confirm_snapshots);
                if let Some(order) = decide_order(recent, &needs, &policy, &orders)? {
                    order_log.append(&order)?;
                    orders.push(order);
                }
            }
        }
    }
    if !pending.is_empty() {
        warn!("{} frames after the last reconcile were not fused", pending.len());
    }

    let mut ordered_quantities = BTreeMap::new();
    for line in orders.iter().flat_map(|o| &o.lines) {
        *ordered_quantities.entry(line.category.clone()).or_default() += line.quantity;
    }
    let summary = SimulationSummary {
        frames,
        snapshots: store.records().len(),
        degraded_camera_frames,
        orders: orders.len(),
        ordered_quantities,
        final_counts: store.current_counts(&needs).counts,
    };
    write(&out.join(SIM_SUMMARY_FILE), to_json_line(&summary).as_bytes())?;
    Ok(summary)
}

/// Orders recorded in an order log.
pub fn read_orders(path: &Path) -> Result<Vec<Order>, CliError> {
    Ok(read_jsonl(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run(std::iter::once("grocery-tracker").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn usage_errors_exit_1() {
        let (code, _, err) = run_args(&["frobnicate"]);
        assert_eq!(code, 1);
        assert!(err.contains("Usage"), "{err}");
        let (code, _, _) = run_args(&["evaluate", "--gt", "x.csv"]);
        assert_eq!(code, 1);
        let (code, out, _) = run_args(&["--help"]);
        assert_eq!(code, 0);
        assert!(out.contains("simulate"));
    }

    #[test]
    fn missing_file_exits_3() {
        let (code, _, err) = run_args(&["evaluate", "--gt", "/nonexistent/gt.csv", "--pred", "/nonexistent/p.csv"]);
        assert_eq!(code, 3, "{err}");
    }

    #[test]
    fn size_parsing() {
        assert_eq!(parse_size("640x480"), Ok((640, 480)));
        assert!(parse_size("640").is_err());
        assert!(parse_size("0x5").is_err());
    }

    #[test]
    fn latest_frame_per_camera_wins() {
        let frames = vec![
            PendingFrame::new("a", "a1.jpg", &[]),
            PendingFrame::new("b", "b1.jpg", &[]),
            PendingFrame::new("a", "a2.jpg", &[]),
        ];
        let got = latest_per_camera(frames).unwrap();
        let names: Vec<&str> = got.iter().map(|f| f.image_name.as_str()).collect();
        assert_eq!(names, vec!["a2.jpg", "b1.jpg"]);
    }
}
