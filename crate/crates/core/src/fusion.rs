//! Fuse per-camera detections into one inventory snapshot.
//!
//! Cameras sharing a zone look at the same physical items from different
//! angles, so a zone's count for a category is the maximum over its cameras.
//! Zones hold distinct items, so zone counts are summed. This counting rule is
//! the part of the system most likely to need replacing; it lives entirely in
//! [`fuse_snapshot`].

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset_io::TrackingList;
use crate::geometry::Detection;

pub const DEFAULT_QUALITY_MIN: f64 = 0.4;

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("no camera frames to fuse")]
    NoCameras,
    #[error("camera `{0}` has no zone in the zone map")]
    UnknownCamera(String),
    #[error("camera `{0}` appears more than once")]
    DuplicateCamera(String),
    #[error("camera `{camera}` reported `{category}`, which is not a tracked category")]
    UnknownCategory { camera: String, category: String },
    #[error("quality_min {0} is outside [0, 1]")]
    QualityMin(f64),
    #[error("zone map: {0}")]
    ZoneMap(String),
}

/// Camera id to zone id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ZoneMap(BTreeMap<String, String>);

impl ZoneMap {
    pub fn new(map: BTreeMap<String, String>) -> Result<Self, FusionError> {
        if map.is_empty() {
            return Err(FusionError::ZoneMap("at least one camera is required".into()));
        }
        if let Some((cam, _)) = map.iter().find(|(c, z)| c.trim().is_empty() || z.trim().is_empty()) {
            return Err(FusionError::ZoneMap(format!("blank camera or zone id near `{cam}`")));
        }
        Ok(Self(map))
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, FusionError> {
        let map: BTreeMap<String, String> =
            serde_json::from_slice(bytes).map_err(|e| FusionError::ZoneMap(e.to_string()))?;
        Self::new(map)
    }

    pub fn zone_of(&self, camera_id: &str) -> Option<&str> {
        self.0.get(camera_id).map(String::as_str)
    }

    pub fn cameras(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }
}

/// Postprocessed detections from one camera capture.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraFrame {
    pub camera_id: String,
    pub image_name: String,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceFrame {
    pub camera_id: String,
    pub image_name: String,
    pub detection_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InventorySnapshot {
    pub timestamp: DateTime<Utc>,
    pub counts: BTreeMap<String, u32>,
    pub degraded_cameras: BTreeSet<String>,
    pub source_frames: Vec<SourceFrame>,
}

fn mean_confidence(dets: &[Detection]) -> Option<f64> {
    if dets.is_empty() {
        return None;
    }
    Some(dets.iter().map(Detection::confidence).sum::<f64>() / dets.len() as f64)
}

/// A camera is degraded when it saw something but was unsure of it on
/// average. Condensation and blur show up this way; an empty shelf does not.
pub fn is_degraded(dets: &[Detection], quality_min: f64) -> bool {
    mean_confidence(dets).is_some_and(|m| m < quality_min)
}

/// Fold one frame per camera into a snapshot.
///
/// With a `taxonomy`, every tracked category appears in the counts (zero if
/// unseen) and detections of untracked categories are rejected. Without one,
/// counts carry only the categories observed.
pub fn fuse_snapshot(
    frames: &[CameraFrame],
    zones: &ZoneMap,
    quality_min: f64,
    timestamp: DateTime<Utc>,
    taxonomy: Option<&TrackingList>,
) -> Result<InventorySnapshot, FusionError> {
    if !(0.0..=1.0).contains(&quality_min) {
        return Err(FusionError::QualityMin(quality_min));
    }
    if frames.is_empty() {
        return Err(FusionError::NoCameras);
    }

    let mut seen = BTreeSet::new();
    for f in frames {
        if zones.zone_of(&f.camera_id).is_none() {
            return Err(FusionError::UnknownCamera(f.camera_id.clone()));
        }
        if !seen.insert(f.camera_id.as_str()) {
            return Err(FusionError::DuplicateCamera(f.camera_id.clone()));
        }
        if let Some(list) = taxonomy {
            if let Some(d) = f.detections.iter().find(|d| !list.contains(&d.category)) {
                return Err(FusionError::UnknownCategory {
                    camera: f.camera_id.clone(),
                    category: d.category.as_str().to_string(),
                });
            }
        }
    }

    let mut degraded = BTreeSet::new();
    // zone -> category -> max count over that zone's healthy cameras
    let mut per_zone: BTreeMap<&str, BTreeMap<&str, u32>> = BTreeMap::new();
    for f in frames {
        let zone = zones.zone_of(&f.camera_id).expect("checked above");
        let zone_counts = per_zone.entry(zone).or_default();
        if is_degraded(&f.detections, quality_min) {
            degraded.insert(f.camera_id.clone());
            continue;
        }
        let mut cam_counts: BTreeMap<&str, u32> = BTreeMap::new();
        for d in &f.detections {
            *cam_counts.entry(d.category.as_str()).or_default() += 1;
        }
        for (cat, n) in cam_counts {
            let slot = zone_counts.entry(cat).or_default();
            *slot = (*slot).max(n);
        }
    }

    let mut counts: BTreeMap<String, u32> = BTreeMap::new();
    if let Some(list) = taxonomy {
        for item in list.items() {
            counts.insert(item.name.as_str().to_string(), 0);
        }
    }
    for zone_counts in per_zone.values() {
        for (cat, n) in zone_counts {
            *counts.entry(cat.to_string()).or_default() += n;
        }
    }

    let mut source_frames: Vec<SourceFrame> = frames
        .iter()
        .map(|f| SourceFrame {
            camera_id: f.camera_id.clone(),
            image_name: f.image_name.clone(),
            detection_count: f.detections.len(),
        })
        .collect();
    source_frames.sort_by(|a, b| a.camera_id.cmp(&b.camera_id));

    Ok(InventorySnapshot {
        timestamp,
        counts,
        degraded_cameras: degraded,
        source_frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BBox, Category};
    use chrono::TimeZone;

    fn ts() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2024, 3, 4, 8, 0, 0).unwrap()
    }

    fn frame(cam: &str, items: &[(&str, f64)]) -> CameraFrame {
        let detections = items
            .iter()
            .enumerate()
            .map(|(i, (c, conf))| {
                let x = 20.0 * i as f64;
                Detection::new(BBox::new(x, 0.0, x + 10.0, 10.0).unwrap(), Category::new(*c).unwrap(), *conf).unwrap()
            })
            .collect();
        CameraFrame {
            camera_id: cam.into(),
            image_name: format!("{cam}.jpg"),
            detections,
        }
    }

    fn zones(pairs: &[(&str, &str)]) -> ZoneMap {
        ZoneMap::new(pairs.iter().map(|(c, z)| (c.to_string(), z.to_string())).collect()).unwrap()
    }

    #[test]
    fn max_within_zone() {
        let z = zones(&[("a", "z"), ("b", "z")]);
        let frames = [
            frame("a", &[("banana", 0.9), ("banana", 0.9)]),
            frame("b", &[("banana", 0.9), ("banana", 0.9), ("banana", 0.9)]),
        ];
        let snap = fuse_snapshot(&frames, &z, 0.4, ts(), None).unwrap();
        assert_eq!(snap.counts["banana"], 3);
    }

    #[test]
    fn sum_across_zones() {
        let z = zones(&[("a", "z1"), ("b", "z2")]);
        let frames = [frame("a", &[("milk", 0.8)]), frame("b", &[("milk", 0.7)])];
        let snap = fuse_snapshot(&frames, &z, 0.4, ts(), None).unwrap();
        assert_eq!(snap.counts["milk"], 2);
    }

    #[test]
    fn low_confidence_camera_is_excluded() {
        let z = zones(&[("a", "z"), ("b", "z")]);
        let frames = [
            frame("a", &[("banana", 0.2), ("banana", 0.2), ("banana", 0.2), ("banana", 0.2)]),
            frame("b", &[("banana", 0.9)]),
        ];
        let snap = fuse_snapshot(&frames, &z, 0.4, ts(), None).unwrap();
        assert_eq!(snap.counts["banana"], 1);
        assert_eq!(snap.degraded_cameras, BTreeSet::from(["a".to_string()]));
    }

    #[test]
    fn empty_camera_is_not_degraded() {
        let z = zones(&[("a", "z")]);
        let snap = fuse_snapshot(&[frame("a", &[])], &z, 0.4, ts(), None).unwrap();
        assert!(snap.degraded_cameras.is_empty());
        assert!(snap.counts.is_empty());
        assert_eq!(snap.source_frames[0].detection_count, 0);
    }

    #[test]
    fn taxonomy_zero_fills_and_rejects_strays() {
        let list = TrackingList::new(vec![("banana".to_string(), 6), ("milk".to_string(), 1)]).unwrap();
        let z = zones(&[("a", "z")]);
        let snap = fuse_snapshot(&[frame("a", &[("milk", 0.9)])], &z, 0.4, ts(), Some(&list)).unwrap();
        assert_eq!(snap.counts, BTreeMap::from([("banana".into(), 0), ("milk".into(), 1)]));
        assert!(matches!(
            fuse_snapshot(&[frame("a", &[("pizza", 0.9)])], &z, 0.4, ts(), Some(&list)),
            Err(FusionError::UnknownCategory { .. })
        ));
    }

    #[test]
    fn errors() {
        let z = zones(&[("a", "z")]);
        assert_eq!(fuse_snapshot(&[], &z, 0.4, ts(), None), Err(FusionError::NoCameras));
        assert_eq!(
            fuse_snapshot(&[frame("x", &[])], &z, 0.4, ts(), None),
            Err(FusionError::UnknownCamera("x".into()))
        );
        assert_eq!(
            fuse_snapshot(&[frame("a", &[]), frame("a", &[])], &z, 0.4, ts(), None),
            Err(FusionError::DuplicateCamera("a".into()))
        );
        assert!(ZoneMap::from_json(b"{}").is_err());
        assert!(ZoneMap::from_json(br#"{"cam":"upper"}"#).is_ok());
    }

    #[test]
    fn single_camera_counts_are_its_own() {
        let z = zones(&[("a", "z")]);
        let f = frame("a", &[("egg white", 0.6), ("milk", 0.7), ("egg white", 0.5)]);
        let snap = fuse_snapshot(&[f], &z, 0.4, ts(), None).unwrap();
        assert_eq!(snap.counts, BTreeMap::from([("egg white".into(), 2), ("milk".into(), 1)]));
    }
}
