//! Kernel generation and panoptic assembly at test time.
//!
//! Peaks of the center maps and confident stuff cells become candidates,
//! candidates with similar kernels are averaged into one kernel, every kernel
//! is applied to the encoded feature, and the soft masks are merged into a
//! non-overlapping label map.

mod merge;

pub use merge::{panoptic_merge, MaskPrediction, MergeConfig, MergeMode};

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::data::targets::{dominant_channel, SampleTargets};
use crate::error::{Error, Result};
use crate::model::ModelOutput;
use crate::panoptic::{Kind, PanopticLabel};
use crate::tensor::{ops, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    /// Minimum center score of a thing peak.
    pub thing_thresh: f64,
    /// Max-pool window for peak detection.
    pub pool_k: usize,
    /// Minimum stuff score at an argmax cell.
    pub stuff_thresh: f64,
    /// Cosine similarity needed to join a thing cluster.
    pub fuse_thresh: f64,
    pub class_aware: bool,
    /// Soft masks are binarized at this value.
    pub bin_thresh: f64,
    pub merge: MergeConfig,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            thing_thresh: 0.05,
            pool_k: 3,
            stuff_thresh: 0.4,
            fuse_thresh: 0.9,
            class_aware: true,
            bin_thresh: 0.4,
            merge: MergeConfig::default(),
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pool_k % 2 == 0 {
            return Err(Error::Config(format!("pool_k must be odd, got {}", self.pool_k)));
        }
        if !(self.bin_thresh > 0.0 && self.bin_thresh < 1.0) {
            return Err(Error::Config("bin_thresh must lie in (0, 1)".into()));
        }
        // Values above 1 are allowed and disable fusion.
        if !(self.fuse_thresh >= -1.0) {
            return Err(Error::Config("fuse_thresh must be at least -1".into()));
        }
        self.merge.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub kind: Kind,
    pub category: usize,
    pub stage: usize,
    /// `(x, y)` in stage cells.
    pub position: (usize, usize),
    pub score: f64,
    pub kernel: Vec<f64>,
}

impl Candidate {
    /// Deterministic order: descending score, then `(category, stage, y, x)`.
    pub fn rank_cmp(&self, other: &Self) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then(self.tie_key().cmp(&other.tie_key()))
    }

    fn tie_key(&self) -> (usize, usize, usize, usize) {
        (self.category, self.stage, self.position.1, self.position.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedKernel {
    pub kind: Kind,
    pub category: usize,
    pub score: f64,
    pub kernel: Vec<f64>,
    pub members: usize,
    /// `(stage, (x, y))` of the founding member, used to break score ties.
    pub origin: (usize, (usize, usize)),
}

fn read_kernel(g: &Tensor<f64>, x: usize, y: usize) -> Vec<f64> {
    (0..g.shape()[0]).map(|c| g.at3(c, y, x)).collect()
}

/// Positions that equal their `pool_k` neighbourhood maximum and exceed
/// `thresh`, over every stage and class. Plateaus keep all of their cells.
pub fn extract_thing_candidates(out: &ModelOutput<f64>, pool_k: usize, thresh: f64) -> Result<Vec<Candidate>> {
    let mut cands = Vec::new();
    for (stage, so) in out.stages.iter().enumerate() {
        let pooled = ops::max_pool2d(&so.l_th, pool_k)?;
        let (n, h, w) = so.l_th.chw()?;
        for c in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let v = so.l_th.at3(c, y, x);
                    if v > thresh && v == pooled.at3(c, y, x) {
                        cands.push(Candidate {
                            kind: Kind::Thing,
                            category: c,
                            stage,
                            position: (x, y),
                            score: v,
                            kernel: read_kernel(&so.g, x, y),
                        });
                    }
                }
            }
        }
    }
    Ok(cands)
}

/// Cells whose argmax stuff channel (lowest index on ties) exceeds `thresh`.
pub fn extract_stuff_candidates(out: &ModelOutput<f64>, thresh: f64) -> Result<Vec<Candidate>> {
    let mut cands = Vec::new();
    for (stage, so) in out.stages.iter().enumerate() {
        let (n, h, w) = so.l_st.chw()?;
        if n == 0 {
            continue;
        }
        for y in 0..h {
            for x in 0..w {
                let c = dominant_channel(&so.l_st, x, y);
                let v = so.l_st.at3(c, y, x);
                if v > thresh {
                    cands.push(Candidate {
                        kind: Kind::Stuff,
                        category: c,
                        stage,
                        position: (x, y),
                        score: v,
                        kernel: read_kernel(&so.g, x, y),
                    });
                }
            }
        }
    }
    Ok(cands)
}

/// `a·b / (|a| |b|)`; 0 when either vector is zero.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

struct Cluster {
    founder: usize,
    sum: Vec<f64>,
    members: usize,
    score_sum: f64,
}

impl Cluster {
    fn mean(&self) -> Vec<f64> {
        self.sum.iter().map(|v| v / self.members as f64).collect()
    }
}

/// Average-clusters candidate kernels.
///
/// Things are visited by [`Candidate::rank_cmp`]; each joins the first
/// cluster whose mean kernel reaches `thresh` cosine similarity (and shares
/// its category when `class_aware`), otherwise it founds a new cluster that
/// keeps the founder's score. Stuff candidates of one category always form
/// one cluster scored by the mean member score. Things come first in the
/// output, then stuff by category.
pub fn fuse_kernels(cands: &[Candidate], thresh: f64, class_aware: bool) -> Vec<FusedKernel> {
    let mut things: Vec<&Candidate> = cands.iter().filter(|c| c.kind == Kind::Thing).collect();
    things.sort_by(|a, b| a.rank_cmp(b));
    let mut clusters: Vec<Cluster> = Vec::new();
    for (i, c) in things.iter().enumerate() {
        let hit = clusters.iter_mut().find(|cl| {
            let f = things[cl.founder];
            (!class_aware || f.category == c.category) && cosine_similarity(&cl.mean(), &c.kernel) >= thresh
        });
        match hit {
            Some(cl) => {
                cl.sum.iter_mut().zip(&c.kernel).for_each(|(s, k)| *s += k);
                cl.members += 1;
                cl.score_sum += c.score;
            }
            None => clusters.push(Cluster {
                founder: i,
                sum: c.kernel.clone(),
                members: 1,
                score_sum: c.score,
            }),
        }
    }
    let mut fused: Vec<FusedKernel> = clusters
        .iter()
        .map(|cl| {
            let f = things[cl.founder];
            FusedKernel {
                kind: Kind::Thing,
                category: f.category,
                score: f.score,
                kernel: cl.mean(),
                members: cl.members,
                origin: (f.stage, f.position),
            }
        })
        .collect();

    let mut stuff: Vec<&Candidate> = cands.iter().filter(|c| c.kind == Kind::Stuff).collect();
    stuff.sort_by_key(|c| c.tie_key());
    let mut i = 0;
    while i < stuff.len() {
        let cat = stuff[i].category;
        let j = i + stuff[i..].iter().take_while(|c| c.category == cat).count();
        let group = &stuff[i..j];
        let mut cl = Cluster {
            founder: i,
            sum: vec![0.0; group[0].kernel.len()],
            members: 0,
            score_sum: 0.0,
        };
        for c in group {
            cl.sum.iter_mut().zip(&c.kernel).for_each(|(s, k)| *s += k);
            cl.members += 1;
            cl.score_sum += c.score;
        }
        fused.push(FusedKernel {
            kind: Kind::Stuff,
            category: cat,
            score: cl.score_sum / cl.members as f64,
            kernel: cl.mean(),
            members: cl.members,
            origin: (group[0].stage, group[0].position),
        });
        i = j;
    }
    fused
}

/// `sigmoid(K f_e)` per kernel: `[n, H/4, W/4]`.
pub fn generate_masks(kernels: &[FusedKernel], f_e: &Tensor<f64>) -> Result<Tensor<f64>> {
    Ok(mask_logits(kernels, f_e)?.map(ops::sigmoid))
}

/// `K f_e` per kernel.
pub fn mask_logits(kernels: &[FusedKernel], f_e: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (c, h, w) = f_e.chw()?;
    if kernels.is_empty() {
        return Ok(Tensor::zeros(&[0, h, w]));
    }
    let mut k = Vec::with_capacity(kernels.len() * c);
    for f in kernels {
        if f.kernel.len() != c {
            return Err(Error::Shape(format!(
                "kernel length {} does not match {c} feature channels",
                f.kernel.len()
            )));
        }
        k.extend_from_slice(&f.kernel);
    }
    let k = Tensor::new(&[kernels.len(), c], k)?;
    ops::dynamic_conv1x1(&k, f_e)
}

/// Masks at `height x width`: the logits `K f_e` are upsampled bilinearly
/// before the sigmoid, matching how the masks are supervised.
pub fn generate_full_masks(kernels: &[FusedKernel], f_e: &Tensor<f64>, height: usize, width: usize) -> Result<Tensor<f64>> {
    if kernels.is_empty() {
        return Ok(Tensor::zeros(&[0, height, width]));
    }
    let logits = mask_logits(kernels, f_e)?;
    Ok(ops::bilinear_resize(&logits, height, width)?.map(ops::sigmoid))
}

/// `score * mean(mask[mask >= bin_thresh])`, 0 when no pixel passes.
pub fn rescore(score: f64, mask: &[f64], bin_thresh: f64) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for &m in mask {
        if m >= bin_thresh {
            sum += m;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        score * sum / n as f64
    }
}

/// Which parts of the position head are replaced by ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleFlags {
    pub gt_position: bool,
    pub gt_class: bool,
}

impl OracleFlags {
    pub fn any(&self) -> bool {
        self.gt_position || self.gt_class
    }
}

fn argmax_channel(t: &Tensor<f64>, x: usize, y: usize) -> usize {
    dominant_channel(t, x, y)
}

/// Candidates with ground-truth positions and/or classes substituted.
///
/// With `gt_position`, every assigned instance center and every cell of a
/// stuff region becomes a candidate; otherwise the detected candidates are
/// kept. With `gt_class`, a thing takes the class of the strongest target
/// heatmap at its cell (if any) and a stuff cell the dominant target class.
/// Scores are always re-read from the predicted maps at the resulting
/// `(category, x, y)`, and kernels from the predicted kernel map.
pub fn oracle_candidates(
    targets: &SampleTargets<f64>,
    out: &ModelOutput<f64>,
    flags: OracleFlags,
    cfg: &InferenceConfig,
) -> Result<Vec<Candidate>> {
    if targets.stages.len() != out.stages.len() {
        return Err(Error::Shape("targets and outputs disagree on stage count".into()));
    }
    let mut cands = Vec::new();
    if flags.gt_position {
        for (st, so) in targets.stages.iter().zip(&out.stages) {
            for a in &st.assigned_things {
                let (x, y) = a.center;
                let c = if flags.gt_class { a.category } else { argmax_channel(&so.l_th, x, y) };
                cands.push(Candidate {
                    kind: Kind::Thing,
                    category: c,
                    stage: st.stage,
                    position: (x, y),
                    score: so.l_th.at3(c, y, x),
                    kernel: read_kernel(&so.g, x, y),
                });
            }
            for (class, cells) in &st.stuff_positions {
                for &(x, y) in cells {
                    let c = if flags.gt_class { *class } else { argmax_channel(&so.l_st, x, y) };
                    cands.push(Candidate {
                        kind: Kind::Stuff,
                        category: c,
                        stage: st.stage,
                        position: (x, y),
                        score: so.l_st.at3(c, y, x),
                        kernel: read_kernel(&so.g, x, y),
                    });
                }
            }
        }
    } else {
        cands = extract_thing_candidates(out, cfg.pool_k, cfg.thing_thresh)?;
        cands.extend(extract_stuff_candidates(out, cfg.stuff_thresh)?);
    }
    if flags.gt_class && !flags.gt_position {
        for c in &mut cands {
            let (x, y) = c.position;
            let st = &targets.stages[c.stage];
            let so = &out.stages[c.stage];
            match c.kind {
                Kind::Thing => {
                    let g = argmax_channel(&st.y_th, x, y);
                    if st.y_th.at3(g, y, x) > 0.0 {
                        c.category = g;
                        c.score = so.l_th.at3(g, y, x);
                    }
                }
                Kind::Stuff => {
                    if st.y_st.shape()[0] > 0 {
                        let g = argmax_channel(&st.y_st, x, y);
                        c.category = g;
                        c.score = so.l_st.at3(g, y, x);
                    }
                }
            }
        }
    }
    Ok(cands)
}

/// Everything produced for one image.
#[derive(Clone, Debug)]
pub struct Inference {
    pub label: PanopticLabel,
    pub candidates: Vec<Candidate>,
    pub fused: Vec<FusedKernel>,
    /// Adjusted score per fused kernel.
    pub adjusted_scores: Vec<f64>,
}

pub fn output_to_f64<T: Scalar>(out: &ModelOutput<T>) -> ModelOutput<f64> {
    ModelOutput {
        stages: out
            .stages
            .iter()
            .map(|s| crate::model::StageOutput {
                l_th: s.l_th.cast(),
                l_st: s.l_st.cast(),
                g: s.g.cast(),
            })
            .collect(),
        f_e: out.f_e.cast(),
    }
}

/// Full test-time pipeline for an image of `height x width` pixels.
///
/// With ground-truth positions the instance score floor of the merge is
/// lifted: those positions are known to be real objects.
pub fn run_inference(
    out: &ModelOutput<f64>,
    height: usize,
    width: usize,
    cfg: &InferenceConfig,
    oracle: Option<(&SampleTargets<f64>, OracleFlags)>,
) -> Result<Inference> {
    cfg.validate()?;
    let candidates = match oracle {
        Some((t, flags)) if flags.any() => oracle_candidates(t, out, flags, cfg)?,
        _ => {
            let mut c = extract_thing_candidates(out, cfg.pool_k, cfg.thing_thresh)?;
            c.extend(extract_stuff_candidates(out, cfg.stuff_thresh)?);
            c
        }
    };
    let fused = fuse_kernels(&candidates, cfg.fuse_thresh, cfg.class_aware);
    let full = generate_full_masks(&fused, &out.f_e, height, width)?;
    let adjusted_scores: Vec<f64> = fused
        .iter()
        .enumerate()
        .map(|(i, f)| rescore(f.score, full.channel(i), cfg.bin_thresh))
        .collect();
    let preds: Vec<MaskPrediction> = fused
        .iter()
        .zip(&adjusted_scores)
        .enumerate()
        .map(|(i, (f, &s))| MaskPrediction {
            kind: f.kind,
            category: f.category,
            score: s,
            origin: f.origin,
            mask: full.channel(i).to_vec(),
        })
        .collect();
    let mut merge_cfg = cfg.merge.clone();
    if matches!(oracle, Some((_, f)) if f.gt_position) {
        merge_cfg.instance_score_thresh = 0.0;
    }
    let label = panoptic_merge(&preds, height, width, cfg.bin_thresh, &merge_cfg)?;
    Ok(Inference {
        label,
        candidates,
        fused,
        adjusted_scores,
    })
}
