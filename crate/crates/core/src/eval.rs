//! Panoptic Quality.
//!
//! A predicted and a ground-truth segment match when they share kind and
//! category and their IoU exceeds 0.5, which makes matches unique. Predicted
//! pixels that fall on ground-truth void are left out of the union, and an
//! unmatched prediction lying mostly on void is not a false positive. There
//! is no crowd handling.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panoptic::{Kind, PanopticLabel};

/// `(kind, category)`; things and stuff have separate category spaces.
pub type CategoryKey = (Kind, usize);

/// `|a ∩ b| / |a ∪ b|`, 0 when both are empty.
pub fn iou(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("masks of length {} and {}", a.len(), b.len())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageMatches {
    /// `(category, gt id, pred id, iou)`.
    pub tp: Vec<(CategoryKey, u32, u32, f64)>,
    pub fp: Vec<(CategoryKey, u32)>,
    #[serde(rename = "fn")]
    pub fn_: Vec<(CategoryKey, u32)>,
}

impl ImageMatches {
    pub fn thing_false_negatives(&self) -> usize {
        self.fn_.iter().filter(|(k, _)| k.0 == Kind::Thing).count()
    }
}

/// Matches the segments of one image.
pub fn match_segments(pred: &PanopticLabel, gt: &PanopticLabel) -> Result<ImageMatches> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::Data(format!(
            "prediction is {}x{} but ground truth is {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    pred.validate()?;
    gt.validate()?;
    let mut inter: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    let mut on_void: BTreeMap<u32, usize> = BTreeMap::new();
    for (&p, &g) in pred.ids.iter().zip(&gt.ids) {
        if p == 0 {
            continue;
        }
        if g == 0 {
            *on_void.entry(p).or_default() += 1;
        } else {
            *inter.entry((g, p)).or_default() += 1;
        }
    }
    let key = |s: &crate::panoptic::Segment| (s.kind, s.category);
    let mut m = ImageMatches::default();
    let mut gt_hit = BTreeMap::new();
    let mut pred_hit = BTreeMap::new();
    for (&(g, p), &n) in &inter {
        let gs = gt.segment(g).expect("validated");
        let ps = pred.segment(p).expect("validated");
        if key(gs) != key(ps) {
            continue;
        }
        let union = gs.area + ps.area - n - on_void.get(&p).copied().unwrap_or(0);
        let v = n as f64 / union as f64;
        if v > 0.5 {
            if gt_hit.insert(g, ()).is_some() || pred_hit.insert(p, ()).is_some() {
                return Err(Error::Data(format!("segment matched twice (gt {g}, pred {p})")));
            }
            m.tp.push((key(gs), g, p, v));
        }
    }
    for s in &gt.segments {
        if !gt_hit.contains_key(&s.id) {
            m.fn_.push((key(s), s.id));
        }
    }
    for s in &pred.segments {
        if pred_hit.contains_key(&s.id) {
            continue;
        }
        if 2 * on_void.get(&s.id).copied().unwrap_or(0) > s.area {
            continue;
        }
        m.fp.push((key(s), s.id));
    }
    Ok(m)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub iou_sum: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl CategoryStats {
    fn denom(&self) -> f64 {
        self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64
    }

    pub fn pq(&self) -> f64 {
        if self.denom() == 0.0 { 0.0 } else { self.iou_sum / self.denom() }
    }

    pub fn sq(&self) -> f64 {
        if self.tp == 0 { 0.0 } else { self.iou_sum / self.tp as f64 }
    }

    pub fn rq(&self) -> f64 {
        if self.denom() == 0.0 { 0.0 } else { self.tp as f64 / self.denom() }
    }
}

/// Running per-category counts over an image set.
#[derive(Clone, Debug, Default)]
pub struct PqAccumulator {
    stats: BTreeMap<CategoryKey, CategoryStats>,
}

impl PqAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, m: &ImageMatches) {
        for &(k, _, _, v) in &m.tp {
            let s = self.stats.entry(k).or_default();
            s.iou_sum += v;
            s.tp += 1;
        }
        for &(k, _) in &m.fp {
            self.stats.entry(k).or_default().fp += 1;
        }
        for &(k, _) in &m.fn_ {
            self.stats.entry(k).or_default().fn_ += 1;
        }
    }

    pub fn add_image(&mut self, pred: &PanopticLabel, gt: &PanopticLabel) -> Result<ImageMatches> {
        let m = match_segments(pred, gt)?;
        self.add(&m);
        Ok(m)
    }

    pub fn result(&self) -> PqResult {
        let per_category: Vec<CategoryResult> = self
            .stats
            .iter()
            .filter(|(_, s)| s.tp + s.fp + s.fn_ > 0)
            .map(|(&(kind, category), s)| CategoryResult {
                kind,
                category,
                pq: s.pq(),
                sq: s.sq(),
                rq: s.rq(),
                stats: *s,
            })
            .collect();
        let mean = |kind: Option<Kind>| {
            let sel: Vec<&CategoryResult> = per_category.iter().filter(|c| kind.is_none_or(|k| c.kind == k)).collect();
            let n = sel.len();
            let avg = |f: fn(&CategoryResult) -> f64| if n == 0 { 0.0 } else { sel.iter().map(|c| f(c)).sum::<f64>() / n as f64 };
            Aggregate {
                pq: avg(|c| c.pq),
                sq: avg(|c| c.sq),
                rq: avg(|c| c.rq),
                n,
            }
        };
        PqResult {
            all: mean(None),
            things: mean(Some(Kind::Thing)),
            stuff: mean(Some(Kind::Stuff)),
            per_category,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    /// Categories averaged.
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryResult {
    pub kind: Kind,
    pub category: usize,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    #[serde(flatten)]
    pub stats: CategoryStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PqResult {
    pub all: Aggregate,
    pub things: Aggregate,
    pub stuff: Aggregate,
    pub per_category: Vec<CategoryResult>,
}

impl PqResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,category,pq,sq,rq,tp,fp,fn\n");
        for c in &self.per_category {
            let kind = match c.kind {
                Kind::Thing => "thing",
                Kind::Stuff => "stuff",
            };
            s.push_str(&format!(
                "{kind},{},{:.6},{:.6},{:.6},{},{},{}\n",
                c.category, c.pq, c.sq, c.rq, c.stats.tp, c.stats.fp, c.stats.fn_
            ));
        }
        for (name, a) in [("all", &self.all), ("things", &self.things), ("stuff", &self.stuff)] {
            s.push_str(&format!("{name},,{:.6},{:.6},{:.6},,,\n", a.pq, a.sq, a.rq));
        }
        s
    }
}

/// Evaluates aligned lists of predictions and ground truths.
pub fn evaluate(pairs: &[(PanopticLabel, PanopticLabel)]) -> Result<(PqResult, Vec<ImageMatches>)> {
    let mut acc = PqAccumulator::new();
    let mut per_image = Vec::with_capacity(pairs.len());
    for (p, g) in pairs {
        per_image.push(acc.add_image(p, g)?);
    }
    Ok((acc.result(), per_image))
}

/// Ground truth and prediction of a 10x10 scene with two instances of thing
/// class 0 on stuff class 0. The first instance is matched at IoU 0.6, the
/// second is hit at IoU 0.4, so class 0 scores PQ 0.6 / 2 = 0.3.
pub fn three_segment_fixture() -> (PanopticLabel, PanopticLabel) {
    use crate::panoptic::Segment;
    let (h, w) = (10, 10);
    let seg = |id, kind, area| Segment {
        id,
        kind,
        category: 0,
        area,
        score: 1.0,
    };
    // g1: row 0, columns 0..10; p1 is its first 6 pixels.
    // g2: row 5, columns 0..10; p2 is its first 4 pixels.
    let mut gt = PanopticLabel::empty(h, w);
    let mut pred = PanopticLabel::empty(h, w);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            gt.ids[i] = match y {
                0 => 1,
                5 => 2,
                _ => 3,
            };
            pred.ids[i] = match (y, x) {
                (0, x) if x < 6 => 1,
                (5, x) if x < 4 => 2,
                (0 | 5, _) => 0,
                _ => 3,
            };
        }
    }
    gt.segments = vec![seg(1, Kind::Thing, 10), seg(2, Kind::Thing, 10), seg(3, Kind::Stuff, 80)];
    pred.segments = vec![seg(1, Kind::Thing, 6), seg(2, Kind::Thing, 4), seg(3, Kind::Stuff, 80)];
    (pred, gt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_sample, DataConfig};
    use crate::panoptic::Segment;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn iou_limits_and_counting_oracle() {
        assert_eq!(iou(&[true, false], &[true, false]).unwrap(), 1.0);
        assert_eq!(iou(&[true, false], &[false, true]).unwrap(), 0.0);
        assert_eq!(iou(&[false; 3], &[false; 3]).unwrap(), 0.0);
        assert!(iou(&[true], &[true, true]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let n = rng.random_range(1..64);
            let a: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            let b: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            let i = (0..n).filter(|&k| a[k] && b[k]).count();
            let u = (0..n).filter(|&k| a[k] || b[k]).count();
            let want = if u == 0 { 0.0 } else { i as f64 / u as f64 };
            assert_eq!(iou(&a, &b).unwrap(), want);
        }
    }

    #[test]
    fn fixture_scores_three_tenths() {
        let (pred, gt) = three_segment_fixture();
        let m = match_segments(&pred, &gt).unwrap();
        let thing = (Kind::Thing, 0);
        assert_eq!(m.tp.iter().filter(|t| t.0 == thing).count(), 1);
        assert!((m.tp.iter().find(|t| t.0 == thing).unwrap().3 - 0.6).abs() < 1e-12);
        assert_eq!(m.fp, vec![(thing, 2)]);
        assert_eq!(m.fn_, vec![(thing, 2)]);
        let (r, _) = evaluate(&[(pred, gt)]).unwrap();
        let c = r.per_category.iter().find(|c| (c.kind, c.category) == thing).unwrap();
        assert!((c.pq - 0.3).abs() < 1e-12);
        assert!((c.sq - 0.6).abs() < 1e-12 && (c.rq - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ground_truth_against_itself_is_perfect() {
        let cfg = DataConfig::default();
        let pairs: Vec<_> = (0..20)
            .map(|s| {
                let l = PanopticLabel::from_sample(&generate_sample(s, &cfg).unwrap());
                (l.clone(), l)
            })
            .collect();
        let (r, per) = evaluate(&pairs).unwrap();
        assert_eq!((r.all.pq, r.all.sq, r.all.rq), (1.0, 1.0, 1.0));
        assert!(per.iter().all(|m| m.fp.is_empty() && m.fn_.is_empty()));
        let doubled: Vec<_> = pairs.iter().chain(&pairs).cloned().collect();
        assert_eq!(evaluate(&doubled).unwrap().0.all, r.all);
    }

    #[test]
    fn empty_prediction_is_all_false_negatives() {
        let (_, gt) = three_segment_fixture();
        let m = match_segments(&PanopticLabel::empty(10, 10), &gt).unwrap();
        assert!(m.tp.is_empty() && m.fp.is_empty());
        assert_eq!(m.fn_.len(), 3);
    }

    #[test]
    fn predictions_on_void_are_not_penalised() {
        let mut gt = PanopticLabel::empty(2, 4);
        gt.ids = vec![1, 1, 1, 0, 0, 0, 0, 0];
        gt.segments = vec![Segment {
            id: 1,
            kind: Kind::Thing,
            category: 0,
            area: 3,
            score: 1.0,
        }];
        let mut pred = PanopticLabel::empty(2, 4);
        // Segment 1 spills two pixels onto void; segment 2 lies on void only.
        pred.ids = vec![1, 1, 1, 1, 1, 2, 2, 0];
        pred.segments = vec![
            Segment { id: 1, kind: Kind::Thing, category: 0, area: 5, score: 1.0 },
            Segment { id: 2, kind: Kind::Thing, category: 0, area: 2, score: 1.0 },
        ];
        let m = match_segments(&pred, &gt).unwrap();
        assert_eq!(m.tp.len(), 1);
        assert_eq!(m.tp[0].3, 1.0);
        assert!(m.fp.is_empty());
    }

    #[test]
    fn pq_is_sq_times_rq() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let s = CategoryStats {
                tp: rng.random_range(1..10),
                fp: rng.random_range(0..10),
                fn_: rng.random_range(0..10),
                iou_sum: 0.0,
            };
            let s = CategoryStats { iou_sum: s.tp as f64 * rng.random_range(0.5..1.0), ..s };
            assert!((s.pq() - s.sq() * s.rq()).abs() < 1e-9);
            for v in [s.pq(), s.sq(), s.rq()] {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn csv_lists_every_category() {
        let (pred, gt) = three_segment_fixture();
        let (r, _) = evaluate(&[(pred, gt)]).unwrap();
        let csv = r.to_csv();
        assert!(csv.starts_with("kind,category"));
        assert_eq!(csv.lines().count(), 1 + r.per_category.len() + 3);
    }
}
