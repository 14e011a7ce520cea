//! Object-center heatmaps with size-adaptive Gaussians.

use crate::tensor::{Scalar, Tensor};

/// Overlap used for every radius computed by the target encoders.
pub const MIN_OVERLAP: f64 = 0.7;

/// Largest corner displacement `r` such that a box perturbed by `r` keeps
/// IoU >= `min_overlap` with the original `box_h x box_w` box, taken over
/// the three configurations: shifted (one corner in, one out), shrunk (both
/// corners in) and grown (both corners out). Each case is a quadratic in `r`;
/// the result is the smallest admissible root, floored at zero.
pub fn gaussian_radius(box_h: f64, box_w: f64, min_overlap: f64) -> f64 {
    let (h, w, o) = (box_h, box_w, min_overlap);

    // shifted: (h-r)(w-r)(1+o) >= 2o hw  ->  r^2 - (h+w) r + hw(1-o)/(1+o) >= 0
    let b1 = h + w;
    let c1 = w * h * (1.0 - o) / (1.0 + o);
    let r1 = (b1 - (b1 * b1 - 4.0 * c1).max(0.0).sqrt()) / 2.0;

    // shrunk: (h-2r)(w-2r) >= o hw  ->  4r^2 - 2(h+w) r + (1-o) hw >= 0
    let a2 = 4.0;
    let b2 = 2.0 * (h + w);
    let c2 = (1.0 - o) * w * h;
    let r2 = (b2 - (b2 * b2 - 4.0 * a2 * c2).max(0.0).sqrt()) / (2.0 * a2);

    // grown: hw >= o (h+2r)(w+2r)  ->  4o r^2 + 2o(h+w) r + (o-1) hw <= 0
    let a3 = 4.0 * o;
    let b3 = 2.0 * o * (h + w);
    let c3 = (o - 1.0) * w * h;
    let r3 = (-b3 + (b3 * b3 - 4.0 * a3 * c3).max(0.0).sqrt()) / (2.0 * a3);

    r1.min(r2).min(r3).max(0.0)
}

/// Standard deviation used for a Gaussian of radius `r`.
pub fn sigma_for_radius(r: f64) -> f64 {
    (2.0 * r + 1.0) / 3.0
}

/// Half-width of the square window a Gaussian of radius `r` is drawn in.
/// Values outside it are zero, so the window is the support of the target.
pub fn window_radius(r: f64) -> usize {
    (r.ceil() as usize).max(1)
}

/// One thing placed on a stage grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignedThing {
    /// Index into the sample's thing list.
    pub instance: usize,
    pub category: usize,
    /// Quantized center `(x, y)` in stage cells.
    pub center: (usize, usize),
    /// Gaussian radius in stage cells.
    pub radius: f64,
}

impl AssignedThing {
    /// Stage positions where this instance's Gaussian is non-zero.
    pub fn region(&self, stage_h: usize, stage_w: usize) -> Vec<(usize, usize)> {
        let r = window_radius(self.radius) as isize;
        let (cx, cy) = (self.center.0 as isize, self.center.1 as isize);
        let mut out = Vec::new();
        for y in (cy - r).max(0)..=(cy + r).min(stage_h as isize - 1) {
            for x in (cx - r).max(0)..=(cx + r).min(stage_w as isize - 1) {
                out.push((x as usize, y as usize));
            }
        }
        out
    }

    /// Value of this instance's Gaussian at `(x, y)`: 1 at the center, zero
    /// outside the window.
    pub fn value_at(&self, x: usize, y: usize) -> f64 {
        let (cx, cy) = self.center;
        let r = window_radius(self.radius);
        if x.abs_diff(cx) > r || y.abs_diff(cy) > r {
            return 0.0;
        }
        if (x, y) == (cx, cy) {
            return 1.0;
        }
        let sigma = sigma_for_radius(self.radius);
        let dx = x as f64 - cx as f64;
        let dy = y as f64 - cy as f64;
        (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
    }
}

/// Regions of `things` with shared cells resolved: a cell stays in an
/// instance's region unless another instance's Gaussian is strictly larger
/// there. Equal values keep the cell in both.
pub fn owned_regions(things: &[AssignedThing], stage_h: usize, stage_w: usize) -> Vec<Vec<(usize, usize)>> {
    things
        .iter()
        .enumerate()
        .map(|(i, t)| {
            t.region(stage_h, stage_w)
                .into_iter()
                .filter(|&(x, y)| {
                    let own = t.value_at(x, y);
                    things.iter().enumerate().all(|(j, o)| j == i || o.value_at(x, y) <= own)
                })
                .collect()
        })
        .collect()
}

/// Renders `[N_th, H, W]` center heatmaps. Overlapping Gaussians combine by
/// element-wise max and every center is exactly 1. Instances whose center
/// falls outside the grid are skipped; the second value counts them.
pub fn render_center_heatmap<T: Scalar>(
    things: &[AssignedThing],
    stage_h: usize,
    stage_w: usize,
    n_th: usize,
) -> (Tensor<T>, usize) {
    let mut map = Tensor::<T>::zeros(&[n_th, stage_h, stage_w]);
    let mut skipped = 0;
    for t in things {
        let (cx, cy) = t.center;
        if cx >= stage_w || cy >= stage_h || t.category >= n_th {
            skipped += 1;
            continue;
        }
        let plane = stage_h * stage_w;
        let chan = &mut map.data_mut()[t.category * plane..(t.category + 1) * plane];
        for (x, y) in t.region(stage_h, stage_w) {
            let v = T::of(t.value_at(x, y));
            let cell = &mut chan[y * stage_w + x];
            if v > *cell {
                *cell = v;
            }
        }
        chan[cy * stage_w + cx] = T::one();
    }
    if skipped > 0 {
        log::warn!("{skipped} thing centers fell outside a {stage_h}x{stage_w} stage");
    }
    (map, skipped)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Largest r with `iou(r) >= o` for a decreasing `iou`, by bisection.
    fn search(iou: impl Fn(f64) -> f64, o: f64, hi: f64) -> f64 {
        let (mut lo, mut hi) = (0.0, hi);
        if iou(hi) >= o {
            return hi;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if iou(mid) >= o {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    /// Independent oracle: evaluates the three corner-displacement geometries directly.
    fn radius_by_search(h: f64, w: f64, o: f64) -> f64 {
        let lim = h.min(w);
        let shifted = |r: f64| {
            let inter = (h - r).max(0.0) * (w - r).max(0.0);
            inter / (2.0 * h * w - inter)
        };
        let shrunk = |r: f64| (h - 2.0 * r).max(0.0) * (w - 2.0 * r).max(0.0) / (h * w);
        let grown = |r: f64| h * w / ((h + 2.0 * r) * (w + 2.0 * r));
        search(shifted, o, lim)
            .min(search(shrunk, o, lim / 2.0))
            .min(search(grown, o, 10.0 * (h + w)))
    }

    #[test]
    fn ten_by_ten_matches_numeric_search() {
        let r = gaussian_radius(10.0, 10.0, 0.7);
        let oracle = radius_by_search(10.0, 10.0, 0.7);
        assert!((r - oracle).abs() < 1e-9, "{r} vs {oracle}");
        // Frozen from the oracle above.
        assert!((r - 0.816_699_867_329_622_5).abs() < 1e-9, "{r}");
    }

    #[test]
    fn closed_form_matches_search_on_a_grid() {
        for h in [1.0, 2.5, 7.0, 19.0, 64.0] {
            for w in [1.0, 3.0, 11.0, 40.0] {
                for o in [0.3, 0.5, 0.7, 0.9] {
                    let r = gaussian_radius(h, w, o);
                    let s = radius_by_search(h, w, o);
                    assert!((r - s).abs() < 1e-7 * (1.0 + s), "{h}x{w}@{o}: {r} vs {s}");
                }
            }
        }
    }

    #[test]
    fn radius_vanishes_as_overlap_approaches_one() {
        assert!(gaussian_radius(20.0, 30.0, 1.0 - 1e-9) < 1e-6);
        assert_eq!(gaussian_radius(20.0, 30.0, 1.0), 0.0);
    }

    #[test]
    fn radius_grows_with_box_size() {
        let mut prev = 0.0;
        for s in 1..300 {
            let r = gaussian_radius(s as f64 * 0.5, s as f64 * 0.5, 0.7);
            assert!(r >= prev);
            prev = r;
        }
    }

    fn thing(category: usize, center: (usize, usize), radius: f64) -> AssignedThing {
        AssignedThing {
            instance: 0,
            category,
            center,
            radius,
        }
    }

    #[test]
    fn single_instance_peaks_at_one() {
        let (m, skipped) = render_center_heatmap::<f64>(&[thing(1, (3, 4), 1.5)], 8, 8, 2);
        assert_eq!(skipped, 0);
        assert_eq!(m.at3(1, 4, 3), 1.0);
        let max = m.data().iter().cloned().fold(0.0, f64::max);
        assert_eq!(max, 1.0);
        assert!(m.channel(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn distant_instances_have_two_unit_peaks() {
        let (m, _) =
            render_center_heatmap::<f64>(&[thing(0, (1, 1), 0.8), thing(0, (6, 6), 0.8)], 8, 8, 1);
        let ones = m.data().iter().filter(|&&v| v == 1.0).count();
        assert_eq!(ones, 2);
    }

    #[test]
    fn overlapping_gaussians_take_pointwise_max() {
        let a = thing(0, (3, 3), 2.0);
        let b = thing(0, (5, 3), 3.0);
        let (m, _) = render_center_heatmap::<f64>(&[a.clone(), b.clone()], 8, 8, 1);
        let g = |t: &AssignedThing, x: usize, y: usize| -> f64 {
            let r = window_radius(t.radius) as i64;
            let (dx, dy) = (x as i64 - t.center.0 as i64, y as i64 - t.center.1 as i64);
            if dx.abs() > r || dy.abs() > r {
                return 0.0;
            }
            let s = (2.0 * t.radius + 1.0) / 3.0;
            (-((dx * dx + dy * dy) as f64) / (2.0 * s * s)).exp()
        };
        for y in 0..8 {
            for x in 0..8 {
                let expect = g(&a, x, y).max(g(&b, x, y));
                assert!((m.at3(0, y, x) - expect).abs() < 1e-12, "({x},{y})");
            }
        }
    }

    #[test]
    fn owned_regions_split_shared_cells() {
        let a = AssignedThing { instance: 0, ..thing(2, (1, 1), 0.05) };
        let b = AssignedThing { instance: 1, ..thing(2, (0, 1), 0.05) };
        let far = AssignedThing { instance: 2, ..thing(0, (5, 5), 0.5) };
        let things = [a.clone(), b.clone(), far.clone()];
        let owned = owned_regions(&things, 8, 8);
        assert!(a.region(8, 8).contains(&(0, 1)) && b.region(8, 8).contains(&(1, 1)));
        assert!(owned[0].contains(&(1, 1)) && !owned[0].contains(&(0, 1)));
        assert!(owned[1].contains(&(0, 1)) && !owned[1].contains(&(1, 1)));
        assert_eq!(owned[2], far.region(8, 8));
        // Cells equidistant from both centers stay with both.
        assert!(owned[0].contains(&(0, 0)) == owned[1].contains(&(0, 0)) || a.value_at(0, 0) != b.value_at(0, 0));
        for (t, region) in things.iter().zip(&owned) {
            assert!(region.contains(&t.center));
        }
    }

    #[test]
    fn value_at_matches_rendered_single_instance() {
        let t = thing(0, (3, 2), 1.3);
        let (m, _) = render_center_heatmap::<f64>(&[t.clone()], 7, 6, 1);
        for y in 0..7 {
            for x in 0..6 {
                assert_eq!(m.at3(0, y, x), t.value_at(x, y));
            }
        }
    }

    #[test]
    fn out_of_bounds_center_is_skipped() {
        let (m, skipped) = render_center_heatmap::<f32>(&[thing(0, (9, 0), 1.0)], 8, 8, 1);
        assert_eq!(skipped, 1);
        assert!(m.data().iter().all(|&v| v == 0.0));
    }
}
