//! Assembly of soft masks into a non-overlapping panoptic label.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panoptic::{Kind, PanopticLabel, Segment};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeMode {
    Heuristic,
    Argmax,
}

impl std::str::FromStr for MergeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "heuristic" => Ok(MergeMode::Heuristic),
            "argmax" => Ok(MergeMode::Argmax),
            _ => Err(Error::Config(format!("unknown merge mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeConfig {
    pub mode: MergeMode,
    /// An instance is dropped when less than this fraction of its mask is
    /// still unclaimed.
    pub overlap_thresh: f64,
    /// Stuff segments smaller than this (in pixels) become void.
    pub stuff_min_area: usize,
    /// At most this many instances take part.
    pub keep_top: usize,
    /// Instances with a lower adjusted score are ignored.
    pub instance_score_thresh: f64,
}

impl Default for MergeConfig {
    fn default() -> Self {
        MergeConfig {
            mode: MergeMode::Heuristic,
            overlap_thresh: 0.5,
            stuff_min_area: 64,
            keep_top: 100,
            instance_score_thresh: 0.2,
        }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.overlap_thresh) {
            return Err(Error::Config("overlap_thresh must lie in [0, 1]".into()));
        }
        if !self.instance_score_thresh.is_finite() {
            return Err(Error::Config("instance_score_thresh must be finite".into()));
        }
        Ok(())
    }
}

/// A full-resolution soft mask with its (adjusted) score.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPrediction {
    pub kind: Kind,
    pub category: usize,
    pub score: f64,
    /// `(stage, (x, y))` of the source position, for tie breaking.
    pub origin: (usize, (usize, usize)),
    /// `height * width` probabilities.
    pub mask: Vec<f64>,
}

impl MaskPrediction {
    /// Descending score, then `(category, stage, y, x)`.
    pub fn rank_cmp(&self, other: &Self) -> Ordering {
        let key = |p: &Self| (p.category, p.origin.0, p.origin.1 .1, p.origin.1 .0);
        other.score.total_cmp(&self.score).then(key(self).cmp(&key(other)))
    }
}

/// Ranked things (filtered and cut to `keep_top`) and ranked stuff.
fn ranked<'a>(preds: &'a [MaskPrediction], cfg: &MergeConfig) -> (Vec<&'a MaskPrediction>, Vec<&'a MaskPrediction>) {
    let mut things: Vec<&MaskPrediction> = preds
        .iter()
        .filter(|p| p.kind == Kind::Thing && p.score >= cfg.instance_score_thresh)
        .collect();
    things.sort_by(|a, b| a.rank_cmp(b));
    things.truncate(cfg.keep_top);
    let mut stuff: Vec<&MaskPrediction> = preds.iter().filter(|p| p.kind == Kind::Stuff).collect();
    stuff.sort_by(|a, b| a.rank_cmp(b));
    (things, stuff)
}

/// Merges predictions into a label map of `height x width`.
///
/// Heuristic mode paints binarized instances in rank order, skipping any
/// whose unclaimed fraction is below `overlap_thresh`, then fills remaining
/// pixels with stuff in rank order, skipping pieces under `stuff_min_area`.
/// Argmax mode gives each pixel to the prediction with the highest mask
/// probability (instances before stuff, rank order on ties), voids pixels
/// below `bin_thresh`, and voids stuff segments under `stuff_min_area`.
/// Segment ids are assigned from 1 in painting order.
pub fn panoptic_merge(
    preds: &[MaskPrediction],
    height: usize,
    width: usize,
    bin_thresh: f64,
    cfg: &MergeConfig,
) -> Result<PanopticLabel> {
    cfg.validate()?;
    let n = height * width;
    if let Some(p) = preds.iter().find(|p| p.mask.len() != n) {
        return Err(Error::Shape(format!(
            "mask of length {} does not match {height}x{width}",
            p.mask.len()
        )));
    }
    let (things, stuff) = ranked(preds, cfg);
    let mut label = PanopticLabel::empty(height, width);
    match cfg.mode {
        MergeMode::Heuristic => {
            for p in things {
                let area = p.mask.iter().filter(|&&m| m >= bin_thresh).count();
                if area == 0 {
                    continue;
                }
                let free = p
                    .mask
                    .iter()
                    .zip(&label.ids)
                    .filter(|&(&m, &id)| m >= bin_thresh && id == 0)
                    .count();
                if free == 0 || (free as f64) < cfg.overlap_thresh * area as f64 {
                    continue;
                }
                paint(&mut label, p, free, |i| p.mask[i] >= bin_thresh);
            }
            for p in stuff {
                let free = p
                    .mask
                    .iter()
                    .zip(&label.ids)
                    .filter(|&(&m, &id)| m >= bin_thresh && id == 0)
                    .count();
                if free == 0 || free < cfg.stuff_min_area {
                    continue;
                }
                paint(&mut label, p, free, |i| p.mask[i] >= bin_thresh);
            }
        }
        MergeMode::Argmax => {
            let order: Vec<&MaskPrediction> = things.into_iter().chain(stuff).collect();
            let mut owner = vec![usize::MAX; n];
            let mut areas = vec![0usize; order.len()];
            for (i, o) in owner.iter_mut().enumerate() {
                let mut best = f64::NEG_INFINITY;
                for (k, p) in order.iter().enumerate() {
                    if p.mask[i] > best {
                        best = p.mask[i];
                        *o = k;
                    }
                }
                if best < bin_thresh {
                    *o = usize::MAX;
                } else {
                    areas[*o] += 1;
                }
            }
            for (k, p) in order.iter().enumerate() {
                let area = areas[k];
                if area == 0 || (p.kind == Kind::Stuff && area < cfg.stuff_min_area) {
                    continue;
                }
                let owner = &owner;
                paint(&mut label, p, area, |i| owner[i] == k);
            }
        }
    }
    Ok(label)
}

fn paint(label: &mut PanopticLabel, p: &MaskPrediction, area: usize, covers: impl Fn(usize) -> bool) {
    let id = label.segments.len() as u32 + 1;
    for (i, slot) in label.ids.iter_mut().enumerate() {
        if *slot == 0 && covers(i) {
            *slot = id;
        }
    }
    label.segments.push(Segment {
        id,
        kind: p.kind,
        category: p.category,
        area,
        score: p.score,
    });
}
