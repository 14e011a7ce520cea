//! Per-stage training targets: center heatmaps for things, soft one-hot maps
//! for stuff, and stride-4 segmentation masks for every prediction.

use super::gaussian::{gaussian_radius, render_center_heatmap, AssignedThing, MIN_OVERLAP};
use super::mask::Mask;
use super::synth::PanopticSample;
use crate::error::{Error, Result};
use crate::tensor::{ops, Scalar, Tensor};

/// Geometry of the stage pyramid as seen by the target encoders.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetSpec {
    pub strides: Vec<usize>,
    /// Inclusive instance-scale range per stage, in input pixels.
    pub scale_ranges: Vec<(f64, f64)>,
    /// Stride of the segmentation targets.
    pub mask_stride: usize,
    /// Pick stuff kernel positions from the stuff segments with things cut
    /// out, treating thing coverage as one more competing class, and skip
    /// thing centers. When off, positions follow the dominant channel of
    /// `y_st`.
    pub exclude_thing_cells: bool,
}

impl TargetSpec {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.strides.len() != self.scale_ranges.len() || self.strides.is_empty() {
            return Err(Error::Config(
                "one scale range is needed per stage".to_string(),
            ));
        }
        for &s in self.strides.iter().chain(std::iter::once(&self.mask_stride)) {
            if s == 0 || height % s != 0 || width % s != 0 {
                return Err(Error::Config(format!(
                    "image {height}x{width} is not divisible by stride {s}"
                )));
            }
        }
        Ok(())
    }
}

/// Stages whose scale range contains `scale` (inclusive on both ends). When
/// no range matches, the stage with the nearest range is returned and the
/// flag is set.
pub fn assign_stage(scale: f64, ranges: &[(f64, f64)]) -> (Vec<usize>, bool) {
    let hits: Vec<usize> = ranges
        .iter()
        .enumerate()
        .filter(|(_, &(lo, hi))| lo <= scale && scale <= hi)
        .map(|(i, _)| i)
        .collect();
    if !hits.is_empty() || ranges.is_empty() {
        return (hits, false);
    }
    let dist = |&(lo, hi): &(f64, f64)| if scale < lo { lo - scale } else { scale - hi };
    let nearest = ranges
        .iter()
        .enumerate()
        .min_by(|a, b| dist(a.1).total_cmp(&dist(b.1)))
        .map(|(i, _)| i)
        .expect("non-empty ranges");
    (vec![nearest], true)
}

/// One-hot encoding of `stuff_map` over `n_st` channels, bilinearly resized
/// to the stage grid.
pub fn render_stuff_target<T: Scalar>(
    stuff_map: &super::mask::LabelMap,
    n_st: usize,
    stage_h: usize,
    stage_w: usize,
) -> Result<Tensor<T>> {
    let (h, w) = (stuff_map.height, stuff_map.width);
    let mut onehot = Tensor::<T>::zeros(&[n_st, h, w]);
    for (i, &l) in stuff_map.labels.iter().enumerate() {
        let l = l as usize;
        if l >= n_st {
            return Err(Error::Data(format!("stuff label {l} >= {n_st}")));
        }
        onehot.data_mut()[l * h * w + i] = T::one();
    }
    ops::bilinear_resize(&onehot, stage_h, stage_w)
}

#[derive(Clone, Debug)]
pub struct StageTargets<T> {
    pub stage: usize,
    pub stride: usize,
    /// `[N_th, H_i, W_i]`.
    pub y_th: Tensor<T>,
    /// `[N_st, H_i, W_i]`.
    pub y_st: Tensor<T>,
    pub assigned_things: Vec<AssignedThing>,
    /// For each stuff class with a segmentation target, the stage positions
    /// `(x, y)` where that class is the dominant channel of `y_st`.
    pub stuff_positions: Vec<(usize, Vec<(usize, usize)>)>,
}

impl<T: Scalar> StageTargets<T> {
    pub fn height(&self) -> usize {
        self.y_th.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.y_th.shape()[2]
    }
}

#[derive(Clone, Debug)]
pub struct SampleTargets<T> {
    pub stages: Vec<StageTargets<T>>,
    /// Per thing instance, binary mask at `H/mask_stride x W/mask_stride`.
    pub thing_seg: Vec<Tensor<T>>,
    /// Per present stuff class, binary mask of its non-thing pixels.
    pub stuff_seg: Vec<(usize, Tensor<T>)>,
    /// `thing_seg` at input resolution.
    pub thing_seg_full: Vec<Tensor<T>>,
    /// `stuff_seg` at input resolution, same classes in the same order.
    pub stuff_seg_full: Vec<(usize, Tensor<T>)>,
    /// Instances whose scale matched no range and were sent to the nearest stage.
    pub fallback_assignments: usize,
    /// Centers dropped for falling outside a stage grid.
    pub skipped_centers: usize,
}

fn mask_tensor<T: Scalar>(m: &Mask) -> Tensor<T> {
    let data = m
        .bits
        .iter()
        .map(|&b| if b { T::one() } else { T::zero() })
        .collect();
    Tensor::new(&[m.height, m.width], data).expect("mask shape")
}

/// Encodes a sample into per-stage targets. Pure function of its inputs.
pub fn build_targets<T: Scalar>(
    sample: &PanopticSample,
    spec: &TargetSpec,
) -> Result<SampleTargets<T>> {
    let (h, w) = (sample.height(), sample.width());
    spec.validate(h, w)?;
    let thing_union = sample.thing_union();

    let thing_seg: Vec<Tensor<T>> = sample
        .things
        .iter()
        .map(|t| mask_tensor(&t.mask.downsample_nearest(spec.mask_stride)))
        .collect();
    let thing_seg_full = sample.things.iter().map(|t| mask_tensor(&t.mask)).collect();
    let mut stuff_seg = Vec::new();
    let mut stuff_seg_full = Vec::new();
    for c in 0..sample.n_stuff {
        let mut m = sample.stuff_map.mask_of(c as u16);
        for (b, &t) in m.bits.iter_mut().zip(&thing_union.bits) {
            *b &= !t;
        }
        let small = m.downsample_nearest(spec.mask_stride);
        if !small.is_empty() {
            stuff_seg.push((c, mask_tensor(&small)));
            stuff_seg_full.push((c, mask_tensor(&m)));
        }
    }

    let mut per_stage: Vec<Vec<AssignedThing>> = vec![Vec::new(); spec.strides.len()];
    let mut fallback_assignments = 0;
    for (idx, t) in sample.things.iter().enumerate() {
        let (stages, fell_back) = assign_stage(t.bbox.scale() as f64, &spec.scale_ranges);
        fallback_assignments += fell_back as usize;
        for s in stages {
            let stride = spec.strides[s] as f64;
            let cx = ((t.mass_center.0 + 0.5) / stride).floor() as usize;
            let cy = ((t.mass_center.1 + 0.5) / stride).floor() as usize;
            let radius = gaussian_radius(
                t.bbox.height() as f64 / stride,
                t.bbox.width() as f64 / stride,
                MIN_OVERLAP,
            );
            per_stage[s].push(AssignedThing {
                instance: idx,
                category: t.category,
                center: (cx, cy),
                radius,
            });
        }
    }

    // Thing pixels relabelled as an extra class `n_stuff`.
    let thing_cover_map = spec.exclude_thing_cells.then(|| {
        let mut m = sample.stuff_map.clone();
        for (l, &t) in m.labels.iter_mut().zip(&thing_union.bits) {
            if t {
                *l = sample.n_stuff as u16;
            }
        }
        m
    });

    let mut skipped_centers = 0;
    let mut stages = Vec::with_capacity(spec.strides.len());
    for (s, assigned) in per_stage.into_iter().enumerate() {
        let stride = spec.strides[s];
        let (sh, sw) = (h / stride, w / stride);
        let (y_th, skipped) = render_center_heatmap::<T>(&assigned, sh, sw, sample.n_things);
        skipped_centers += skipped;
        let assigned_things: Vec<AssignedThing> = assigned
            .into_iter()
            .filter(|a| a.center.0 < sw && a.center.1 < sh)
            .collect();
        let y_st = render_stuff_target::<T>(&sample.stuff_map, sample.n_stuff, sh, sw)?;
        let cover = match &thing_cover_map {
            Some(m) => render_stuff_target::<T>(m, sample.n_stuff + 1, sh, sw)?,
            None => y_st.clone(),
        };
        let mut stuff_positions = Vec::new();
        for (c, _) in &stuff_seg {
            let positions: Vec<(usize, usize)> = (0..sh)
                .flat_map(|y| (0..sw).map(move |x| (x, y)))
                .filter(|&(x, y)| dominant_channel(&cover, x, y) == *c)
                .filter(|&p| !spec.exclude_thing_cells || assigned_things.iter().all(|a| a.center != p))
                .collect();
            if !positions.is_empty() {
                stuff_positions.push((*c, positions));
            }
        }
        stages.push(StageTargets {
            stage: s,
            stride,
            y_th,
            y_st,
            assigned_things,
            stuff_positions,
        });
    }

    Ok(SampleTargets {
        stages,
        thing_seg,
        stuff_seg,
        thing_seg_full,
        stuff_seg_full,
        fallback_assignments,
        skipped_centers,
    })
}

/// Channel with the largest value at `(x, y)`; ties go to the lower index.
pub fn dominant_channel<T: Scalar>(t: &Tensor<T>, x: usize, y: usize) -> usize {
    let c = t.shape()[0];
    let mut best = 0;
    for ci in 1..c {
        if t.at3(ci, y, x) > t.at3(best, y, x) {
            best = ci;
        }
    }
    best
}
