//! Decide whether the observed inventory warrants a grocery order.
//!
//! A category is ordered only when it has been short in each of the last
//! `confirm_snapshots` snapshots (one noisy frame is not enough) and has not
//! been ordered within its cooldown (one shortage is not ordered daily).

use std::collections::BTreeMap;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset_io::TrackingList;
use crate::inventory::SnapshotRecord;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OrderingError {
    #[error("no snapshots to decide from")]
    NoSnapshots,
    #[error("snapshots are not in increasing time order")]
    Unsorted,
    #[error("order policy: {0}")]
    Policy(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrderPolicy {
    /// Consecutive snapshots a shortage must persist for (K).
    pub confirm_snapshots: usize,
    pub cooldown_hours: u32,
    /// Per-category cooldowns that replace `cooldown_hours`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub cooldown_overrides_hours: BTreeMap<String, u32>,
    pub min_order_quantity: u32,
}

impl Default for OrderPolicy {
    fn default() -> Self {
        Self {
            confirm_snapshots: 2,
            cooldown_hours: 24,
            cooldown_overrides_hours: BTreeMap::new(),
            min_order_quantity: 1,
        }
    }
}

impl OrderPolicy {
    pub fn from_json(bytes: &[u8]) -> Result<Self, OrderingError> {
        let policy: Self = serde_json::from_slice(bytes).map_err(|e| OrderingError::Policy(e.to_string()))?;
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<(), OrderingError> {
        if self.confirm_snapshots == 0 {
            return Err(OrderingError::Policy("confirm_snapshots must be at least 1".into()));
        }
        if self.min_order_quantity == 0 {
            return Err(OrderingError::Policy("min_order_quantity must be at least 1".into()));
        }
        Ok(())
    }

    pub fn cooldown(&self, category: &str) -> Duration {
        let hours = self
            .cooldown_overrides_hours
            .get(category)
            .copied()
            .unwrap_or(self.cooldown_hours);
        Duration::hours(hours.into())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderLine {
    pub category: String,
    pub quantity: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Order {
    /// Timestamp of the newest snapshot the decision was based on.
    pub created_at: DateTime<Utc>,
    pub lines: Vec<OrderLine>,
    /// `seq` of each snapshot in the confirmation window, oldest first.
    pub triggering_snapshots: Vec<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

fn last_ordered(order_log: &[Order], category: &str) -> Option<DateTime<Utc>> {
    order_log
        .iter()
        .filter(|o| o.lines.iter().any(|l| l.category == category))
        .map(|o| o.created_at)
        .max()
}

/// Diff the last `K` snapshots against the needs list.
///
/// Lines follow the needs-list order. A needed category absent from a
/// snapshot's counts is read as 0 and noted in the order's warnings.
pub fn decide_order(
    recent: &[SnapshotRecord],
    needs: &TrackingList,
    policy: &OrderPolicy,
    order_log: &[Order],
) -> Result<Option<Order>, OrderingError> {
    policy.validate()?;
    let latest = recent.last().ok_or(OrderingError::NoSnapshots)?;
    if recent.windows(2).any(|w| w[1].snapshot.timestamp <= w[0].snapshot.timestamp) {
        return Err(OrderingError::Unsorted);
    }
    let k = policy.confirm_snapshots;
    if recent.len() < k {
        return Ok(None);
    }
    let window = &recent[recent.len() - k..];
    let now = latest.snapshot.timestamp;

    let mut lines = Vec::new();
    let mut warnings = Vec::new();
    for item in needs.items() {
        let cat = item.name.as_str();
        let mut short_throughout = true;
        let mut latest_deficit = 0;
        for rec in window {
            let observed = match rec.snapshot.counts.get(cat) {
                Some(n) => *n,
                None => {
                    warnings.push(format!("no observations of `{cat}` in snapshot {}; counted as 0", rec.seq));
                    0
                }
            };
            latest_deficit = item.desired_quantity.saturating_sub(observed);
            short_throughout &= latest_deficit > 0;
        }
        if !short_throughout || latest_deficit < policy.min_order_quantity {
            continue;
        }
        if let Some(prev) = last_ordered(order_log, cat) {
            if now - prev < policy.cooldown(cat) {
                continue;
            }
        }
        lines.push(OrderLine {
            category: cat.to_string(),
            quantity: latest_deficit,
        });
    }

    if lines.is_empty() {
        return Ok(None);
    }
    Ok(Some(Order {
        created_at: now,
        lines,
        triggering_snapshots: window.iter().map(|r| r.seq).collect(),
        warnings,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::InventorySnapshot;
    use chrono::TimeZone;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn needs() -> TrackingList {
        TrackingList::new(vec![("banana".to_string(), 6), ("milk".to_string(), 1)]).unwrap()
    }

    fn at(hour: i64) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2024, 3, 4, 0, 0, 0).unwrap() + Duration::hours(hour)
    }

    fn snaps(bananas: &[u32]) -> Vec<SnapshotRecord> {
        bananas
            .iter()
            .enumerate()
            .map(|(i, b)| SnapshotRecord {
                seq: i as u64 + 1,
                snapshot: InventorySnapshot {
                    timestamp: at(i as i64 * 6),
                    counts: BTreeMap::from([("banana".into(), *b), ("milk".into(), 1)]),
                    degraded_cameras: BTreeSet::new(),
                    source_frames: Vec::new(),
                },
            })
            .collect()
    }

    fn banana_qty(order: &Option<Order>) -> Option<u32> {
        order
            .as_ref()
            .and_then(|o| o.lines.iter().find(|l| l.category == "banana"))
            .map(|l| l.quantity)
    }

    #[test]
    fn persistent_deficit_orders_latest_shortfall() {
        let order = decide_order(&snaps(&[2, 2]), &needs(), &OrderPolicy::default(), &[])
            .unwrap()
            .unwrap();
        assert_eq!(
            order.lines,
            vec![OrderLine {
                category: "banana".into(),
                quantity: 4
            }]
        );
        assert_eq!(order.triggering_snapshots, vec![1, 2]);
        assert_eq!(order.created_at, at(6));
        assert!(order.warnings.is_empty());
    }

    #[test]
    fn single_deficit_is_not_confirmed() {
        assert_eq!(decide_order(&snaps(&[6, 2]), &needs(), &OrderPolicy::default(), &[]), Ok(None));
        assert_eq!(decide_order(&snaps(&[2]), &needs(), &OrderPolicy::default(), &[]), Ok(None));
    }

    #[test]
    fn cooldown_blocks_reorder() {
        let recent = snaps(&[2, 2]);
        let prior = Order {
            created_at: at(5),
            lines: vec![OrderLine {
                category: "banana".into(),
                quantity: 4,
            }],
            triggering_snapshots: vec![],
            warnings: vec![],
        };
        assert_eq!(decide_order(&recent, &needs(), &OrderPolicy::default(), std::slice::from_ref(&prior)), Ok(None));

        let old = Order {
            created_at: at(6) - Duration::hours(24),
            ..prior
        };
        let again = decide_order(&recent, &needs(), &OrderPolicy::default(), &[old]).unwrap();
        assert_eq!(banana_qty(&again), Some(4));
    }

    #[test]
    fn missing_category_counts_as_zero_with_warning() {
        let mut recent = snaps(&[6, 6]);
        for r in &mut recent {
            r.snapshot.counts.remove("milk");
        }
        let order = decide_order(&recent, &needs(), &OrderPolicy::default(), &[]).unwrap().unwrap();
        assert_eq!(
            order.lines,
            vec![OrderLine {
                category: "milk".into(),
                quantity: 1
            }]
        );
        assert_eq!(order.warnings.len(), 2);
    }

    #[test]
    fn min_quantity_and_errors() {
        let policy = OrderPolicy {
            min_order_quantity: 5,
            ..OrderPolicy::default()
        };
        assert_eq!(decide_order(&snaps(&[2, 2]), &needs(), &policy, &[]), Ok(None));
        assert_eq!(
            decide_order(&[], &needs(), &OrderPolicy::default(), &[]),
            Err(OrderingError::NoSnapshots)
        );
        let mut backwards = snaps(&[2, 2]);
        backwards.reverse();
        assert_eq!(
            decide_order(&backwards, &needs(), &OrderPolicy::default(), &[]),
            Err(OrderingError::Unsorted)
        );
        assert!(OrderPolicy::from_json(br#"{"confirm_snapshots":0,"cooldown_hours":1,"min_order_quantity":1}"#).is_err());
        assert_eq!(
            OrderPolicy::from_json(br#"{"confirm_snapshots":2,"cooldown_hours":24,"min_order_quantity":1}"#).unwrap(),
            OrderPolicy::default()
        );
    }

    proptest! {
        #[test]
        fn order_properties(
            bananas in proptest::collection::vec(0u32..10, 1..6),
            k in 1usize..4,
            bump_idx in 0usize..6,
            bump in 1u32..5,
        ) {
            let policy = OrderPolicy { confirm_snapshots: k, ..OrderPolicy::default() };
            let recent = snaps(&bananas);
            let base = decide_order(&recent, &needs(), &policy, &[]).unwrap();
            prop_assert_eq!(&base, &decide_order(&recent, &needs(), &policy, &[]).unwrap());

            if let Some(q) = banana_qty(&base) {
                prop_assert_eq!(q, 6 - bananas[bananas.len() - 1]);
            }
            if recent.len() >= k && bananas[bananas.len() - k..].iter().any(|&b| b >= 6) {
                prop_assert_eq!(banana_qty(&base), None);
            }

            let mut more = bananas.clone();
            let i = bump_idx % more.len();
            more[i] += bump;
            let bumped = decide_order(&snaps(&more), &needs(), &policy, &[]).unwrap();
            prop_assert!(banana_qty(&bumped).unwrap_or(0) <= banana_qty(&base).unwrap_or(0));
        }
    }
}
