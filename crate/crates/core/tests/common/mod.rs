//! Independent reference implementations and fixture helpers shared by the
//! integration tests. Nothing here calls into the library's geometry or
//! metrics code; results are computed by brute force in exact arithmetic.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use num_rational::Ratio;
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

pub type Q = Ratio<i64>;

pub fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(rel)
}

pub fn config(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("config").join(rel)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform integer in `lo..=hi`.
pub fn between(rng: &mut ChaCha8Rng, lo: i64, hi: i64) -> i64 {
    lo + (rng.next_u64() % (hi - lo + 1) as u64) as i64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IBox {
    pub x1: i64,
    pub y1: i64,
    pub x2: i64,
    pub y2: i64,
}

impl IBox {
    pub fn random(rng: &mut ChaCha8Rng, extent: i64) -> Self {
        let x1 = between(rng, 0, extent - 1);
        let y1 = between(rng, 0, extent - 1);
        let x2 = between(rng, x1 + 1, extent);
        let y2 = between(rng, y1 + 1, extent);
        Self { x1, y1, x2, y2 }
    }

    fn covers(&self, x: i64, y: i64) -> bool {
        self.x1 <= x && x < self.x2 && self.y1 <= y && y < self.y2
    }

    fn hull(&self, o: &IBox) -> IBox {
        IBox {
            x1: self.x1.min(o.x1),
            y1: self.y1.min(o.y1),
            x2: self.x2.max(o.x2),
            y2: self.y2.max(o.y2),
        }
    }
}

/// Unit-cell counts for a pair: (|a ∩ b|, |a ∪ b|, |hull|), found by visiting
/// every cell of the hull.
pub fn grid_counts(a: &IBox, b: &IBox) -> (i64, i64, i64) {
    let hull = a.hull(b);
    let (mut inter, mut union, mut total) = (0, 0, 0);
    for y in hull.y1..hull.y2 {
        for x in hull.x1..hull.x2 {
            let (ia, ib) = (a.covers(x, y), b.covers(x, y));
            total += 1;
            inter += i64::from(ia && ib);
            union += i64::from(ia || ib);
        }
    }
    (inter, union, total)
}

pub fn grid_iou(a: &IBox, b: &IBox) -> Q {
    let (inter, union, _) = grid_counts(a, b);
    Q::new(inter, union)
}

pub fn grid_giou(a: &IBox, b: &IBox) -> Q {
    let (inter, union, hull) = grid_counts(a, b);
    Q::new(inter, union) - Q::new(hull - union, hull)
}

pub fn to_f64(q: Q) -> f64 {
    *q.numer() as f64 / *q.denom() as f64
}

#[derive(Debug, Clone)]
pub struct ODet {
    pub bbox: IBox,
    pub cat: usize,
    /// Confidence in thousandths.
    pub conf: i64,
}

#[derive(Debug, Clone, Default)]
pub struct OImage {
    pub gt: Vec<(IBox, usize)>,
    pub dets: Vec<ODet>,
}

#[derive(Debug, Clone)]
pub struct OInstance {
    pub categories: usize,
    pub images: Vec<OImage>,
}

pub fn cat_name(c: usize) -> String {
    format!("item{c}")
}

/// Small instances dense in overlaps and confidence ties, so matching order
/// decides outcomes often.
pub fn random_instance(rng: &mut ChaCha8Rng) -> OInstance {
    let categories = between(rng, 1, 3) as usize;
    let n_images = between(rng, 1, 2) as usize;
    let mut images = vec![OImage::default(); n_images];
    for c in 0..categories {
        for _ in 0..between(rng, 0, 4) {
            let img = between(rng, 0, n_images as i64 - 1) as usize;
            images[img].gt.push((IBox::random(rng, 10), c));
        }
    }
    let n_dets = between(rng, 0, 6);
    for _ in 0..n_dets {
        let img = between(rng, 0, n_images as i64 - 1) as usize;
        let cat = between(rng, 0, categories as i64 - 1) as usize;
        let near: Vec<IBox> = images[img].gt.iter().filter(|(_, c)| *c == cat).map(|(b, _)| *b).collect();
        let bbox = if !near.is_empty() && !rng.next_u64().is_multiple_of(4) {
            let b = near[(rng.next_u64() % near.len() as u64) as usize];
            let dx = between(rng, -1, 1);
            let dy = between(rng, -1, 1);
            IBox {
                x1: (b.x1 + dx).max(0),
                y1: (b.y1 + dy).max(0),
                x2: (b.x2 + dx).max(b.x1 + dx + 1).max(1),
                y2: (b.y2 + dy).max(b.y1 + dy + 1).max(1),
            }
        } else {
            IBox::random(rng, 10)
        };
        let conf = 100 * between(rng, 1, 3);
        images[img].dets.push(ODet { bbox, cat, conf });
    }
    OInstance { categories, images }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OReport {
    pub ap: BTreeMap<usize, Q>,
    pub map: Q,
    pub recall: Q,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub mean_giou: Option<Q>,
}

/// Greedy matching of the detections with confidence ≥ `cutoff`, done from
/// scratch. Returns, per detection index, the matched ground-truth index.
fn match_image(img: &OImage, cutoff: i64, thr: Q) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..img.dets.len()).filter(|&i| img.dets[i].conf >= cutoff).collect();
    order.sort_by_key(|&i| {
        let d = &img.dets[i];
        (-d.conf, d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2, cat_name(d.cat), i)
    });
    let mut taken = vec![false; img.gt.len()];
    let mut matched = vec![None; img.dets.len()];
    for i in order {
        let d = &img.dets[i];
        let mut best: Option<(usize, Q)> = None;
        for (g, (gb, gc)) in img.gt.iter().enumerate() {
            if taken[g] || *gc != d.cat {
                continue;
            }
            let o = grid_iou(gb, &d.bbox);
            if o >= thr && best.is_none_or(|(_, b)| o > b) {
                best = Some((g, o));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            matched[i] = Some(g);
        }
    }
    matched
}

/// Reference evaluation: sweep every distinct confidence as a cutoff,
/// re-match at each, and integrate the resulting precision/recall points.
pub fn oracle_evaluate(inst: &OInstance, thr: Q) -> OReport {
    let mut cutoffs: Vec<i64> = inst.images.iter().flat_map(|i| i.dets.iter().map(|d| d.conf)).collect();
    cutoffs.sort_unstable_by(|a, b| b.cmp(a));
    cutoffs.dedup();

    let gt_count = |c: usize| -> i64 { inst.images.iter().map(|i| i.gt.iter().filter(|g| g.1 == c).count() as i64).sum() };

    let mut ap = BTreeMap::new();
    for c in 0..inst.categories {
        let n_gt = gt_count(c);
        if n_gt == 0 {
            continue;
        }
        let mut points: Vec<(Q, Q)> = Vec::new();
        for &t in &cutoffs {
            let (mut tp, mut fp) = (0, 0);
            for img in &inst.images {
                let m = match_image(img, t, thr);
                for (i, d) in img.dets.iter().enumerate() {
                    if d.cat == c && d.conf >= t {
                        if m[i].is_some() {
                            tp += 1;
                        } else {
                            fp += 1;
                        }
                    }
                }
            }
            if tp + fp > 0 {
                points.push((Q::new(tp, n_gt), Q::new(tp, tp + fp)));
            }
        }
        let mut area = Q::from_integer(0);
        let mut prev = Q::from_integer(0);
        for i in 0..points.len() {
            let best = points[i..].iter().map(|p| p.1).max().expect("non-empty");
            area += (points[i].0 - prev) * best;
            prev = points[i].0;
        }
        ap.insert(c, area);
    }

    let (mut tp, mut fp, mut total_gt) = (0usize, 0usize, 0usize);
    let mut giou_sum = Q::from_integer(0);
    for img in &inst.images {
        let m = match_image(img, i64::MIN, thr);
        total_gt += img.gt.len();
        for (i, d) in img.dets.iter().enumerate() {
            match m[i] {
                Some(g) => {
                    tp += 1;
                    giou_sum += grid_giou(&img.gt[g].0, &d.bbox);
                }
                None => fp += 1,
            }
        }
    }
    let map = if ap.is_empty() {
        Q::from_integer(0)
    } else {
        ap.values().copied().sum::<Q>() / Q::from_integer(ap.len() as i64)
    };
    OReport {
        map,
        recall: if total_gt == 0 {
            Q::from_integer(0)
        } else {
            Q::new(tp as i64, total_gt as i64)
        },
        ap,
        tp,
        fp,
        fn_: total_gt - tp,
        mean_giou: (tp > 0).then(|| giou_sum / Q::from_integer(tp as i64)),
    }
}
