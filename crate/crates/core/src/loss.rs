//! Training objective: focal position losses, weighted dice segmentation loss
//! over sampled kernels, and their weighted total.

use serde::{Deserialize, Serialize};

use crate::data::targets::{SampleTargets, StageTargets};
use crate::data::gaussian::owned_regions;
use crate::error::{Error, Result};
use crate::model::ForwardVars;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Targets at or above `1 - POSITIVE_TOL` count as positives in the focal loss.
pub const POSITIVE_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_pos: f64,
    pub lambda_seg: f64,
    /// Kernels sampled per thing instance.
    pub k_points: usize,
    pub focal_alpha: f64,
    pub focal_beta: f64,
    pub eps: f64,
    /// Resolution at which predicted masks meet their targets.
    pub mask_resolution: MaskResolution,
    /// Drop a cell from an instance's sampling region when another
    /// instance's Gaussian is larger there, so no kernel is trained toward
    /// two masks.
    pub exclusive_regions: bool,
}

/// `Feature` compares `sigmoid(K F_e)` with targets downsampled to the
/// encoder grid. `Input` upsamples the mask logits bilinearly to the input
/// size first and compares with full-resolution targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskResolution {
    Feature,
    Input,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_pos: 1.0,
            lambda_seg: 3.0,
            k_points: 7,
            focal_alpha: 2.0,
            focal_beta: 4.0,
            eps: 1e-6,
            mask_resolution: MaskResolution::Input,
            exclusive_regions: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.focal_alpha, self.focal_beta, self.eps];
        if self.lambda_pos < 0.0
            || self.lambda_seg < 0.0
            || positive.iter().any(|&v| !(v > 0.0))
            || self.k_points == 0
        {
            return Err(Error::Config(format!(
                "loss: weights must be >= 0, alpha/beta/eps > 0 and k_points >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

fn is_positive(y: f64) -> bool {
    y >= 1.0 - POSITIVE_TOL
}

/// Penalty-reduced focal loss summed over all pixels and divided by `normalizer`.
pub fn focal_heatmap_loss<T: Scalar>(
    l: &Tensor<T>,
    y: &Tensor<T>,
    alpha: f64,
    beta: f64,
    eps: f64,
    normalizer: f64,
) -> f64 {
    let mut total = 0.0;
    for (&lv, &yv) in l.data().iter().zip(y.data()) {
        let p = lv.as_f64().clamp(eps, 1.0 - eps);
        let yv = yv.as_f64();
        total += if is_positive(yv) {
            -(1.0 - p).powf(alpha) * p.ln()
        } else {
            -(1.0 - yv).powf(beta) * p.powf(alpha) * (1.0 - p).ln()
        };
    }
    total / normalizer
}

/// Gradient of [`focal_heatmap_loss`] with respect to `l`.
pub fn focal_heatmap_grad<T: Scalar>(
    l: &Tensor<T>,
    y: &Tensor<T>,
    alpha: f64,
    beta: f64,
    eps: f64,
    normalizer: f64,
) -> Tensor<T> {
    let data = l
        .data()
        .iter()
        .zip(y.data())
        .map(|(&lv, &yv)| {
            let raw = lv.as_f64();
            if raw < eps || raw > 1.0 - eps {
                return T::zero();
            }
            let p = raw;
            let yv = yv.as_f64();
            let d = if is_positive(yv) {
                alpha * (1.0 - p).powf(alpha - 1.0) * p.ln() - (1.0 - p).powf(alpha) / p
            } else {
                -(1.0 - yv).powf(beta)
                    * (alpha * p.powf(alpha - 1.0) * (1.0 - p).ln() - p.powf(alpha) / (1.0 - p))
            };
            T::of(d / normalizer)
        })
        .collect();
    Tensor::new(l.shape(), data).expect("same shape")
}

/// `1 - (2 sum(p y) + eps) / (sum(p^2) + sum(y^2) + eps)`.
pub fn dice_loss<T: Scalar>(p: &[T], y: &[T], eps: f64) -> f64 {
    let (num, den) = dice_terms(p, y, eps);
    1.0 - num / den
}

fn dice_terms<T: Scalar>(p: &[T], y: &[T], eps: f64) -> (f64, f64) {
    let (mut py, mut pp, mut yy) = (0.0, 0.0, 0.0);
    for (&a, &b) in p.iter().zip(y) {
        let (a, b) = (a.as_f64(), b.as_f64());
        py += a * b;
        pp += a * a;
        yy += b * b;
    }
    (2.0 * py + eps, pp + yy + eps)
}

fn dice_grad<T: Scalar>(p: &[T], y: &[T], eps: f64, scale: f64, out: &mut [T]) {
    let (num, den) = dice_terms(p, y, eps);
    for ((o, &a), &b) in out.iter_mut().zip(p).zip(y) {
        let (a, b) = (a.as_f64(), b.as_f64());
        *o = T::of(-scale * (2.0 * b * den - num * 2.0 * a) / (den * den));
    }
}

/// `sum_k w_k dice(p_k, y)` with `w_k = s_k / sum(s)`. All-zero scores fall
/// back to uniform weights; the flag reports it.
pub fn weighted_dice<T: Scalar>(preds: &[&[T]], scores: &[f64], y: &[T], eps: f64) -> (f64, bool) {
    let total: f64 = scores.iter().sum();
    let fallback = total == 0.0;
    let n = scores.len() as f64;
    let mut acc = 0.0;
    for (p, &s) in preds.iter().zip(scores) {
        let w = if fallback { 1.0 / n } else { s / total };
        acc += w * dice_loss(p, y, eps);
    }
    (acc, fallback)
}

/// One kernel sampled inside a thing during training.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledPositive<T> {
    pub instance_index: usize,
    pub stage: usize,
    pub position: (usize, usize),
    pub score: T,
    pub kernel: Tensor<T>,
}

/// The `k` highest-scoring positions of `l_th[category]` inside `region`.
/// Ties are broken by `(y, x)` so the choice is deterministic.
pub fn topk_in_region<T: Scalar>(
    l_th: &Tensor<T>,
    category: usize,
    region: &[(usize, usize)],
    k: usize,
) -> Vec<(usize, usize)> {
    let mut cells: Vec<(T, (usize, usize))> = region
        .iter()
        .map(|&(x, y)| (l_th.at3(category, y, x), (x, y)))
        .collect();
    cells.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then((a.1 .1, a.1 .0).cmp(&(b.1 .1, b.1 .0)))
    });
    cells.into_iter().take(k).map(|(_, p)| p).collect()
}

/// Sampling region of every instance assigned to `stage`.
pub fn stage_regions<T: Scalar>(stage: &StageTargets<T>, exclusive: bool) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = (stage.height(), stage.width());
    if exclusive {
        owned_regions(&stage.assigned_things, h, w)
    } else {
        stage.assigned_things.iter().map(|a| a.region(h, w)).collect()
    }
}

/// Samples up to `k` positives per instance assigned to this stage. The
/// second value counts instances with an empty region.
pub fn sample_topk_positives<T: Scalar>(
    l_th: &Tensor<T>,
    g: &Tensor<T>,
    stage: &StageTargets<T>,
    k: usize,
    exclusive: bool,
) -> (Vec<Vec<SampledPositive<T>>>, usize) {
    let c_e = g.shape()[0];
    let mut empty = 0;
    let mut out = Vec::with_capacity(stage.assigned_things.len());
    for (a, region) in stage.assigned_things.iter().zip(stage_regions(stage, exclusive)) {
        if region.is_empty() {
            empty += 1;
            out.push(Vec::new());
            continue;
        }
        let picks = topk_in_region(l_th, a.category, &region, k)
            .into_iter()
            .map(|(x, y)| SampledPositive {
                instance_index: a.instance,
                stage: stage.stage,
                position: (x, y),
                score: l_th.at3(a.category, y, x),
                kernel: Tensor::from_fn(&[c_e], |c| g.at3(c, y, x)),
            })
            .collect();
        out.push(picks);
    }
    (out, empty)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_pos_th: f64,
    pub l_pos_st: f64,
    pub l_seg: f64,
    pub total: f64,
    /// Thing predictions `(instance, stage)` entering the segmentation loss.
    pub m: usize,
    /// Stuff predictions `(class, stage)` entering the segmentation loss.
    pub n: usize,
    pub empty_regions: usize,
    pub zero_score_fallbacks: usize,
}

/// Records the focal loss of `l` against `y` on the tape.
pub fn focal_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    l: Var,
    y: &Tensor<T>,
    cfg: &LossConfig,
    normalizer: f64,
) -> Var {
    let lv = tape.value(l).clone();
    let (a, b, e) = (cfg.focal_alpha, cfg.focal_beta, cfg.eps);
    let value = focal_heatmap_loss(&lv, y, a, b, e, normalizer);
    let y = y.clone();
    tape.custom(&[l], Tensor::scalar(T::of(value)), move |g| {
        let mut d = focal_heatmap_grad(&lv, &y, a, b, e, normalizer);
        let g0 = g.data()[0];
        for v in d.data_mut() {
            *v *= g0;
        }
        vec![d]
    })
}

/// Dice loss of every row of `p: [n, H, W]` against its own target, as `[n]`.
pub fn dice_rows_on_tape<T: Scalar>(tape: &mut Tape<T>, p: Var, targets: Vec<Tensor<T>>, eps: f64) -> Result<Var> {
    let pv = tape.value(p).clone();
    let n = pv.shape()[0];
    let plane = pv.len() / n.max(1);
    if targets.len() != n || targets.iter().any(|t| t.len() != plane) {
        return Err(Error::Shape("dice targets do not match predictions".into()));
    }
    let values: Vec<T> = (0..n)
        .map(|r| T::of(dice_loss(&pv.data()[r * plane..(r + 1) * plane], targets[r].data(), eps)))
        .collect();
    Ok(tape.custom(&[p], Tensor::new(&[n], values)?, move |g| {
        let mut d = Tensor::zeros(pv.shape());
        for r in 0..n {
            let rows = r * plane..(r + 1) * plane;
            dice_grad(
                &pv.data()[rows.clone()],
                targets[r].data(),
                eps,
                g.data()[r].as_f64(),
                &mut d.data_mut()[rows],
            );
        }
        vec![d]
    }))
}

/// Full objective for one sample.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ForwardVars,
    targets: &SampleTargets<T>,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    if vars.stages.len() != targets.stages.len() {
        return Err(Error::Shape(format!(
            "{} stage outputs for {} stage targets",
            vars.stages.len(),
            targets.stages.len()
        )));
    }
    if targets.thing_seg.is_empty() && targets.stuff_seg.is_empty() {
        return Err(Error::Data("sample has neither things nor stuff".into()));
    }
    let mut bd = LossBreakdown::default();
    let zero = tape.constant(Tensor::scalar(T::zero()));
    let (mut pos_th, mut pos_st, mut seg) = (zero, zero, zero);
    let full = cfg.mask_resolution == MaskResolution::Input;
    let (thing_seg, stuff_seg) = if full {
        (&targets.thing_seg_full, &targets.stuff_seg_full)
    } else {
        (&targets.thing_seg, &targets.stuff_seg)
    };
    let (mh, mw) = match thing_seg.first().or(stuff_seg.first().map(|(_, m)| m)) {
        Some(m) => (m.shape()[0], m.shape()[1]),
        None => (0, 0),
    };

    for (sv, st) in vars.stages.iter().zip(&targets.stages) {
        let n_th = st.y_th.shape()[0] as f64;
        let fl_th = focal_on_tape(tape, sv.l_th, &st.y_th, cfg, n_th);
        pos_th = tape.add(pos_th, fl_th)?;
        let area = (st.height() * st.width()) as f64;
        let fl_st = focal_on_tape(tape, sv.l_st, &st.y_st, cfg, area);
        pos_st = tape.add(pos_st, fl_st)?;

        // Kernels of this stage: sampled thing positions, then stuff means.
        let l_th = tape.value(sv.l_th).clone();
        let (h, w) = (st.height(), st.width());
        let mut positions = Vec::new();
        let mut combos: Vec<Vec<(usize, T)>> = Vec::new();
        let mut seg_targets = Vec::new();
        let mut thing_groups = Vec::new();
        for (a, region) in st.assigned_things.iter().zip(stage_regions(st, cfg.exclusive_regions)) {
            if region.is_empty() {
                bd.empty_regions += 1;
                continue;
            }
            let picks = topk_in_region(&l_th, a.category, &region, cfg.k_points);
            let first = combos.len();
            let mut score_idx = Vec::with_capacity(picks.len());
            for &(x, y) in &picks {
                combos.push(vec![(positions.len(), T::one())]);
                positions.push((x, y));
                score_idx.push((a.category * h + y) * w + x);
                seg_targets.push(thing_seg[a.instance].clone());
            }
            thing_groups.push((first..combos.len(), score_idx));
        }
        let mut stuff_rows = Vec::new();
        for (c, cells) in &st.stuff_positions {
            let Some((_, mask)) = stuff_seg.iter().find(|(sc, _)| sc == c) else {
                continue;
            };
            let coef = T::one() / T::of(cells.len() as f64);
            let start = positions.len();
            positions.extend_from_slice(cells);
            combos.push((start..positions.len()).map(|i| (i, coef)).collect());
            stuff_rows.push(combos.len() - 1);
            seg_targets.push(mask.clone());
        }
        if combos.is_empty() {
            continue;
        }
        let gathered = tape.gather_pixels(sv.g, &positions)?;
        let kernels = tape.combine_rows(gathered, combos)?;
        let mut logits = tape.dynamic_conv1x1(kernels, vars.f_e)?;
        if full {
            logits = tape.resize(logits, mh, mw)?;
        }
        let masks = tape.sigmoid(logits);
        for t in &seg_targets {
            if t.len() != tape.value(masks).len() / tape.value(masks).shape()[0] {
                return Err(Error::Shape("segmentation target size mismatch".into()));
            }
        }
        let dice = dice_rows_on_tape(tape, masks, seg_targets, cfg.eps)?;

        for (rows, score_idx) in thing_groups {
            let scores = tape.gather_flat(sv.l_th, &score_idx)?;
            if tape.value(scores).sum() == T::zero() {
                bd.zero_score_fallbacks += 1;
            }
            let weights = tape.normalize_sum(scores);
            let rows: Vec<usize> = rows.collect();
            let d = tape.gather_flat(dice, &rows)?;
            let wd = tape.mul(d, weights)?;
            let wd = tape.sum(wd);
            seg = tape.add(seg, wd)?;
            bd.m += 1;
        }
        for r in stuff_rows {
            let d = tape.gather_flat(dice, &[r])?;
            let d = tape.sum(d);
            seg = tape.add(seg, d)?;
            bd.n += 1;
        }
    }

    let count = bd.m + bd.n;
    let l_seg = if count > 0 {
        tape.scale(seg, T::one() / T::of(count as f64))
    } else {
        seg
    };
    let l_pos = tape.add(pos_th, pos_st)?;
    let weighted_pos = tape.scale(l_pos, T::of(cfg.lambda_pos));
    let total = if cfg.lambda_seg == 0.0 {
        weighted_pos
    } else {
        let weighted_seg = tape.scale(l_seg, T::of(cfg.lambda_seg));
        tape.add(weighted_pos, weighted_seg)?
    };
    bd.l_pos_th = tape.value(pos_th).data()[0].as_f64();
    bd.l_pos_st = tape.value(pos_st).data()[0].as_f64();
    bd.l_seg = tape.value(l_seg).data()[0].as_f64();
    bd.total = tape.value(total).data()[0].as_f64();
    Ok((total, bd))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_sample, DataConfig, InstanceAnnotation, PanopticSample};
    use crate::data::targets::{build_targets, TargetSpec};
    use crate::data::{LabelMap, Mask};
    use crate::gradcheck::{check_params, rel_err_vec};
    use crate::model::{ModelConfig, PanopticFcn};
    use crate::tensor::ParamSet;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn focal_single_positive_closed_form() {
        let l = Tensor::new(&[1], vec![0.5f64]).unwrap();
        let y = Tensor::new(&[1], vec![1.0f64]).unwrap();
        let v = focal_heatmap_loss(&l, &y, 2.0, 4.0, 1e-6, 1.0);
        assert!((v - 0.25 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn focal_vanishes_for_perfect_prediction() {
        let y = Tensor::new(&[4], vec![1.0f64, 0.0, 0.0, 1.0]).unwrap();
        let l = y.map(|v| if v == 1.0 { 1.0 - 1e-9 } else { 1e-9 });
        assert!(focal_heatmap_loss(&l, &y, 2.0, 4.0, 1e-12, 1.0) < 1e-15);
    }

    #[test]
    fn focal_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let l = Tensor::from_fn(&[6], |_| rng.random_range(0.05..0.95));
            let y = Tensor::from_fn(&[6], |i| if i == 0 { 1.0 } else { rng.random_range(0.0..0.99) });
            let g = focal_heatmap_grad(&l, &y, 2.0, 4.0, 1e-6, 3.0);
            let h = 1e-6;
            let num: Vec<f64> = (0..6)
                .map(|i| {
                    let mut up = l.clone();
                    up.data_mut()[i] += h;
                    let mut down = l.clone();
                    down.data_mut()[i] -= h;
                    (focal_heatmap_loss(&up, &y, 2.0, 4.0, 1e-6, 3.0)
                        - focal_heatmap_loss(&down, &y, 2.0, 4.0, 1e-6, 3.0))
                        / (2.0 * h)
                })
                .collect();
            assert!(rel_err_vec(g.data(), &num, 1e-12) < 1e-5);
        }
    }

    /// Scalar-loop dice on explicit `f64` values.
    fn dice_oracle(p: &[f64], y: &[f64], eps: f64) -> f64 {
        let mut num = eps;
        let mut den = eps;
        for i in 0..p.len() {
            num += 2.0 * p[i] * y[i];
            den += p[i] * p[i] + y[i] * y[i];
        }
        1.0 - num / den
    }

    #[test]
    fn dice_limits_and_oracle() {
        let y: Vec<f64> = (0..36).map(|i| if i < 18 { 1.0 } else { 0.0 }).collect();
        assert!(dice_loss(&y, &y, 1e-6) < 1e-7);
        let inv: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
        assert!((dice_loss(&inv, &y, 1e-6) - 1.0).abs() < 1e-7);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let p: Vec<f64> = (0..36).map(|_| rng.random_range(0.0..1.0)).collect();
            let y: Vec<f64> = (0..36).map(|_| rng.random_range(0..2) as f64).collect();
            let d = dice_loss(&p, &y, 1e-6);
            assert!((d - dice_oracle(&p, &y, 1e-6)).abs() < 1e-10);
            assert!((0.0..=1.0).contains(&d));
        }
    }

    #[test]
    fn weighted_dice_reduces_to_dice_and_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y: Vec<f64> = (0..36).map(|_| rng.random_range(0..2) as f64).collect();
        let preds: Vec<Vec<f64>> = (0..4).map(|_| (0..36).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        let refs: Vec<&[f64]> = preds.iter().map(|p| p.as_slice()).collect();
        let single = weighted_dice(&refs[..1], &[0.37], &y, 1e-6).0;
        assert_eq!(single, dice_loss(&preds[0], &y, 1e-6));
        let equal = weighted_dice(&refs, &[0.2; 4], &y, 1e-6).0;
        let mean = refs.iter().map(|p| dice_loss(p, &y, 1e-6)).sum::<f64>() / 4.0;
        assert!((equal - mean).abs() < 1e-12);
        let (uniform, fell_back) = weighted_dice(&refs, &[0.0; 4], &y, 1e-6);
        assert!(fell_back && (uniform - mean).abs() < 1e-12);
        let s = [0.1, 0.5, 0.3, 0.9];
        let direct: f64 = (0..4).map(|i| s[i] / 1.8 * dice_oracle(&preds[i], &y, 1e-6)).sum();
        assert!((weighted_dice(&refs, &s, &y, 1e-6).0 - direct).abs() < 1e-10);
    }

    #[test]
    fn topk_matches_sort_then_filter() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let l = Tensor::from_fn(&[2, 6, 6], |_| (rng.random_range(0..20) as f64) / 20.0);
            let region: Vec<(usize, usize)> = (1..5).flat_map(|y| (0..4).map(move |x| (x, y))).collect();
            let k = rng.random_range(1..25);
            let got = topk_in_region(&l, 1, &region, k);
            let mut all: Vec<(f64, usize, usize)> = region.iter().map(|&(x, y)| (l.at3(1, y, x), y, x)).collect();
            all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then((a.1, a.2).cmp(&(b.1, b.2))));
            let expect: Vec<(usize, usize)> = all.iter().take(k).map(|&(_, y, x)| (x, y)).collect();
            assert_eq!(got, expect);
            assert_eq!(got.len(), k.min(16));
        }
        let l = Tensor::from_fn(&[1, 3, 3], |i| i as f64 / 10.0);
        let region: Vec<(usize, usize)> = vec![(0, 0), (2, 1), (1, 2)];
        assert_eq!(topk_in_region(&l, 0, &region, 1), vec![(1, 2)]);
    }

    fn small_spec() -> TargetSpec {
        TargetSpec {
            strides: vec![8, 16],
            scale_ranges: vec![(1.0, 16.0), (8.0, 64.0)],
            mask_stride: 4,
            exclude_thing_cells: true,
        }
    }

    fn toy_model() -> PanopticFcn {
        PanopticFcn::new(ModelConfig {
            c_mid: 8,
            c_e: 16,
            conv_num: 1,
            encoder_convs: 1,
            stage_strides: vec![8, 16],
            backbone_channels: 8,
            backbone_depth: 1,
            gn_groups: 2,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn block(x0: usize, y0: usize, w: usize, h: usize) -> Mask {
        let mut m = Mask::new(32, 32);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                m.set(x, y, true);
            }
        }
        m
    }

    fn two_instance_sample() -> PanopticSample {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let labels = (0..32 * 32).map(|i| if i / 32 < 14 { 0 } else { 1 }).collect();
        PanopticSample {
            image: Tensor::from_fn(&[3, 32, 32], |_| rng.random_range(0.0..1.0)),
            things: vec![
                InstanceAnnotation::from_mask(0, block(3, 4, 9, 8)).unwrap(),
                InstanceAnnotation::from_mask(2, block(17, 15, 12, 12)).unwrap(),
            ],
            stuff_map: LabelMap {
                height: 32,
                width: 32,
                labels,
            },
            n_things: 3,
            n_stuff: 2,
            seed: 9,
        }
    }

    fn loss_value(m: &PanopticFcn, p: &ParamSet<f64>, s: &PanopticSample, t: &SampleTargets<f64>, cfg: &LossConfig) -> (f64, LossBreakdown) {
        let mut tape = Tape::new();
        let vars = m.forward_tape(&mut tape, p, &s.image.cast()).unwrap();
        let (l, bd) = total_loss(&mut tape, &vars, t, cfg).unwrap();
        (tape.value(l).data()[0], bd)
    }

    #[test]
    fn zero_segmentation_weight_leaves_position_loss() {
        let m = toy_model();
        let p = m.init_params::<f64>(0);
        let s = two_instance_sample();
        let t = build_targets::<f64>(&s, &small_spec()).unwrap();
        let cfg = LossConfig {
            lambda_seg: 0.0,
            lambda_pos: 1.5,
            ..LossConfig::default()
        };
        let (v, bd) = loss_value(&m, &p, &s, &t, &cfg);
        assert_eq!(v, 1.5 * (bd.l_pos_th + bd.l_pos_st));
        assert!(bd.m >= 2 && bd.n >= 2);
    }

    #[test]
    fn duplicate_instance_counts_twice() {
        for res in [MaskResolution::Feature, MaskResolution::Input] {
            duplicate_instance_case(res);
        }
    }

    fn duplicate_instance_case(res: MaskResolution) {
        let m = toy_model();
        let p = m.init_params::<f64>(1);
        let s = two_instance_sample();
        let mut dup = s.clone();
        dup.things.push(s.things[0].clone());
        let cfg = LossConfig {
            mask_resolution: res,
            ..LossConfig::default()
        };
        let t1 = build_targets::<f64>(&s, &small_spec()).unwrap();
        let t2 = build_targets::<f64>(&dup, &small_spec()).unwrap();
        let (_, a) = loss_value(&m, &p, &s, &t1, &cfg);
        let (_, b) = loss_value(&m, &p, &dup, &t2, &cfg);
        // The copy contributes one more (instance, stage) pair with the same weighted dice.
        let stages_of_first = t1.stages.iter().filter(|st| st.assigned_things.iter().any(|a| a.instance == 0)).count();
        assert_eq!(b.m, a.m + stages_of_first);
        let sum_a = a.l_seg * (a.m + a.n) as f64;
        let sum_b = b.l_seg * (b.m + b.n) as f64;
        // Recompute the first instance's contribution directly.
        let mut tape = Tape::new();
        let vars = m.forward_tape(&mut tape, &p, &s.image.cast()).unwrap();
        let f_e = tape.value(vars.f_e).clone();
        let mut first = 0.0;
        for (sv, st) in vars.stages.iter().zip(&t1.stages) {
            let (l_th, g) = (tape.value(sv.l_th), tape.value(sv.g));
            let (samples, _) = sample_topk_positives(l_th, g, st, cfg.k_points, cfg.exclusive_regions);
            for (a, picks) in st.assigned_things.iter().zip(&samples) {
                if a.instance != 0 {
                    continue;
                }
                let masks: Vec<Vec<f64>> = picks
                    .iter()
                    .map(|sp| {
                        let k = sp.kernel.clone().reshape(&[1, 16]).unwrap();
                        let z = crate::tensor::ops::dynamic_conv1x1(&k, &f_e).unwrap();
                        let z = match res {
                            MaskResolution::Feature => z,
                            MaskResolution::Input => crate::tensor::ops::bilinear_resize(&z, s.height(), s.width()).unwrap(),
                        };
                        z.map(crate::tensor::ops::sigmoid).into_data()
                    })
                    .collect();
                let refs: Vec<&[f64]> = masks.iter().map(|v| v.as_slice()).collect();
                let scores: Vec<f64> = picks.iter().map(|sp| sp.score).collect();
                let target = match res {
                    MaskResolution::Feature => &t1.thing_seg[0],
                    MaskResolution::Input => &t1.thing_seg_full[0],
                };
                first += weighted_dice(&refs, &scores, target.data(), cfg.eps).0;
            }
        }
        assert!((sum_b - sum_a - first).abs() < 1e-9, "{res:?}: {sum_a} {sum_b} {first}");
    }

    #[test]
    fn loss_is_invariant_to_instance_order() {
        let m = toy_model();
        let p = m.init_params::<f64>(2);
        let s = two_instance_sample();
        let mut r = s.clone();
        r.things.reverse();
        let cfg = LossConfig::default();
        let a = loss_value(&m, &p, &s, &build_targets(&s, &small_spec()).unwrap(), &cfg).0;
        let b = loss_value(&m, &p, &r, &build_targets(&r, &small_spec()).unwrap(), &cfg).0;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn full_loss_gradient_matches_finite_differences() {
        let m = toy_model();
        let s = two_instance_sample();
        let t = build_targets::<f64>(&s, &small_spec()).unwrap();
        let cfg = LossConfig::default();
        let mut p = m.init_params::<f64>(3);
        let mut tape = Tape::new();
        let vars = m.forward_tape(&mut tape, &p, &s.image.cast()).unwrap();
        let (l, _) = total_loss(&mut tape, &vars, &t, &cfg).unwrap();
        tape.backward(l, &mut p).unwrap();
        let report = check_params(&p, 1e-5, 1e-6, 5, |q| Ok(loss_value(&m, q, &s, &t, &cfg).0)).unwrap();
        assert!(report.max_rel_err < 1e-5, "{report:?}");
    }

    #[test]
    fn generated_samples_give_finite_losses() {
        let m = PanopticFcn::new(ModelConfig::default()).unwrap();
        let p = m.init_params::<f32>(0);
        let spec = TargetSpec {
            strides: vec![8, 16, 32],
            scale_ranges: vec![(1.0, 32.0), (16.0, 64.0), (32.0, 128.0)],
            mask_stride: 4,
            exclude_thing_cells: true,
        };
        for seed in 0..5 {
            let s = generate_sample(seed, &DataConfig::default()).unwrap();
            let t = build_targets::<f32>(&s, &spec).unwrap();
            let mut tape = Tape::new();
            let vars = m.forward_tape(&mut tape, &p, &s.image).unwrap();
            let (_, bd) = total_loss(&mut tape, &vars, &t, &LossConfig::default()).unwrap();
            assert!(bd.total.is_finite() && bd.total > 0.0, "{bd:?}");
            assert!((0.0..=1.0).contains(&bd.l_seg));
        }
    }
}
