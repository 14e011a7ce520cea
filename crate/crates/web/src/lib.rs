//! Browser demo for `kernelpan`.
//!
//! Three operations, all driven from ground truth so no trained weights
//! ship with the page:
//!
//! * [`Scene::new`] draws a synthetic scene and its panoptic labels.
//! * [`Scene::targets_rgba`] shows the per-stage position targets.
//! * [`Scene::explore`] builds noisy kernels at every training position,
//!   then runs fusion, mask generation and the chosen merge, reporting PQ.

use kernelpan::data::{build_targets, generate_sample, DataConfig, PanopticSample, SampleTargets};
use kernelpan::eval::evaluate;
use kernelpan::inference::{
    fuse_kernels, generate_full_masks, panoptic_merge, rescore, Candidate, InferenceConfig, MaskPrediction,
    MergeMode,
};
use kernelpan::panoptic::{Kind, PanopticLabel};
use kernelpan::tensor::Tensor;
use kernelpan::config::RunConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use wasm_bindgen::prelude::*;

const THING_TINT: [[u8; 3]; 4] = [[230, 60, 60], [250, 210, 40], [210, 80, 230], [60, 220, 220]];
const STUFF_TINT: [[u8; 3]; 3] = [[60, 90, 170], [70, 150, 70], [140, 100, 60]];

/// Logit magnitude of the synthetic mask features.
const FEATURE_GAIN: f64 = 4.0;

fn js_err(e: kernelpan::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn rgb_to_rgba(rgb: &[u8]) -> Vec<u8> {
    rgb.chunks_exact(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

#[wasm_bindgen]
pub struct Scene {
    cfg: RunConfig,
    sample: PanopticSample,
    targets: SampleTargets<f64>,
    label: PanopticLabel,
}

#[wasm_bindgen]
impl Scene {
    /// A 64x64 scene with up to `max_things` objects.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, max_things: usize) -> Result<Scene, JsError> {
        Scene::build(seed, max_things).map_err(js_err)
    }

    pub fn width(&self) -> usize {
        self.sample.width()
    }

    pub fn height(&self) -> usize {
        self.sample.height()
    }

    pub fn stage_count(&self) -> usize {
        self.targets.stages.len()
    }

    pub fn stage_width(&self, stage: usize) -> usize {
        self.targets.stages.get(stage).map_or(0, |s| s.width())
    }

    pub fn stage_height(&self, stage: usize) -> usize {
        self.targets.stages.get(stage).map_or(0, |s| s.height())
    }

    /// Input image as RGBA bytes.
    pub fn image_rgba(&self) -> Vec<u8> {
        let (h, w) = (self.height(), self.width());
        let px = self.sample.image.data();
        let mut out = Vec::with_capacity(h * w * 4);
        for i in 0..h * w {
            for c in 0..3 {
                out.push((px[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
            out.push(255);
        }
        out
    }

    /// Ground-truth panoptic labels, colorized, as RGBA bytes.
    pub fn label_rgba(&self) -> Vec<u8> {
        rgb_to_rgba(&self.label.colorize())
    }

    /// Stage targets at stage resolution: stuff classes tinted by their soft
    /// one-hot target, thing center heatmaps blended on top, assigned
    /// centers in white.
    pub fn targets_rgba(&self, stage: usize) -> Result<Vec<u8>, JsError> {
        self.render_targets(stage).map_err(js_err)
    }

    /// JSON summary of the scene and its stage assignment.
    pub fn summary(&self) -> String {
        let stages: Vec<_> = self
            .targets
            .stages
            .iter()
            .map(|s| {
                serde_json::json!({
                    "stride": s.stride,
                    "size": [s.width(), s.height()],
                    "things": s.assigned_things.iter().map(|a| serde_json::json!({
                        "instance": a.instance,
                        "category": a.category,
                        "center": [a.center.0, a.center.1],
                        "radius": a.radius,
                    })).collect::<Vec<_>>(),
                    "stuff_cells": s.stuff_positions.iter().map(|(c, cells)| (c.to_string(), serde_json::Value::from(cells.len()))).collect::<serde_json::Map<_, _>>(),
                })
            })
            .collect();
        serde_json::json!({
            "seed": self.sample.seed,
            "things": self.sample.things.len(),
            "segments": self.label.segments.len(),
            "stages": stages,
        })
        .to_string()
    }

    /// Runs fusion and merging on kernels drawn around the ground truth.
    ///
    /// `noise` is the std-dev of Gaussian noise added to every candidate
    /// kernel; `fuse_thresh` is the cosine threshold; `argmax` picks the
    /// per-pixel argmax merge instead of the score-ordered heuristic.
    pub fn explore(&self, noise: f64, fuse_thresh: f64, argmax: bool, noise_seed: u64) -> Result<Exploration, JsError> {
        self.run_explore(noise, fuse_thresh, argmax, noise_seed).map_err(js_err)
    }
}

impl Scene {
    pub fn build(seed: u64, max_things: usize) -> kernelpan::Result<Scene> {
        let mut cfg = RunConfig::default();
        cfg.data = DataConfig {
            max_things: max_things.max(cfg.data.min_things),
            ..cfg.data
        };
        cfg.validate()?;
        let sample = generate_sample(seed, &cfg.data)?;
        let targets = build_targets::<f64>(&sample, &cfg.target_spec())?;
        let label = PanopticLabel::from_sample(&sample);
        Ok(Scene {
            cfg,
            sample,
            targets,
            label,
        })
    }

    fn render_targets(&self, stage: usize) -> kernelpan::Result<Vec<u8>> {
        let st = self
            .targets
            .stages
            .get(stage)
            .ok_or_else(|| kernelpan::Error::Config(format!("no stage {stage}")))?;
        let (h, w) = (st.height(), st.width());
        let mut out = vec![0u8; h * w * 4];
        for y in 0..h {
            for x in 0..w {
                let mut rgb = [0.0f64; 3];
                for c in 0..st.y_st.shape()[0] {
                    let v = st.y_st.at3(c, y, x) * 0.45;
                    for (k, t) in STUFF_TINT[c % STUFF_TINT.len()].iter().enumerate() {
                        rgb[k] += v * *t as f64;
                    }
                }
                for c in 0..st.y_th.shape()[0] {
                    let v = st.y_th.at3(c, y, x);
                    for (k, t) in THING_TINT[c % THING_TINT.len()].iter().enumerate() {
                        rgb[k] = rgb[k] * (1.0 - v) + v * *t as f64;
                    }
                }
                let i = (y * w + x) * 4;
                for k in 0..3 {
                    out[i + k] = rgb[k].round().clamp(0.0, 255.0) as u8;
                }
                out[i + 3] = 255;
            }
        }
        for a in &st.assigned_things {
            let i = (a.center.1 * w + a.center.0) * 4;
            out[i..i + 3].copy_from_slice(&[255, 255, 255]);
        }
        Ok(out)
    }

    /// One feature channel per ground-truth segment, `+-FEATURE_GAIN` inside
    /// and outside it, so a one-hot kernel reproduces that segment exactly.
    fn segment_features(&self) -> kernelpan::Result<(Tensor<f64>, usize)> {
        let t = &self.targets;
        let masks: Vec<&Tensor<f64>> = t
            .thing_seg_full
            .iter()
            .chain(t.stuff_seg_full.iter().map(|(_, m)| m))
            .collect();
        let (h, w) = (self.height(), self.width());
        let mut data = Vec::with_capacity(masks.len() * h * w);
        for m in &masks {
            data.extend(m.data().iter().map(|&v| FEATURE_GAIN * (2.0 * v - 1.0)));
        }
        Ok((Tensor::new(&[masks.len(), h, w], data)?, masks.len()))
    }

    /// Candidates at every cell of each instance's Gaussian support and at
    /// every stuff position, scored by the target maps.
    fn candidates(&self, dim: usize, noise: f64, rng: &mut ChaCha8Rng) -> kernelpan::Result<Vec<Candidate>> {
        let normal = Normal::new(0.0, noise.max(0.0)).map_err(|e| kernelpan::Error::Config(e.to_string()))?;
        let n_things = self.sample.things.len();
        let mut kernel = |channel: usize| -> Vec<f64> {
            (0..dim)
                .map(|d| (d == channel) as u8 as f64 + if noise > 0.0 { normal.sample(rng) } else { 0.0 })
                .collect()
        };
        let mut out = Vec::new();
        for st in &self.targets.stages {
            let (h, w) = (st.height(), st.width());
            for a in &st.assigned_things {
                for (x, y) in a.region(h, w) {
                    out.push(Candidate {
                        kind: Kind::Thing,
                        category: a.category,
                        stage: st.stage,
                        position: (x, y),
                        score: a.value_at(x, y),
                        kernel: kernel(a.instance),
                    });
                }
            }
            for (class, cells) in &st.stuff_positions {
                let Some(slot) = self.targets.stuff_seg_full.iter().position(|(c, _)| c == class) else {
                    continue;
                };
                for &(x, y) in cells {
                    out.push(Candidate {
                        kind: Kind::Stuff,
                        category: *class,
                        stage: st.stage,
                        position: (x, y),
                        score: st.y_st.at3(*class, y, x),
                        kernel: kernel(n_things + slot),
                    });
                }
            }
        }
        Ok(out)
    }

    pub fn run_explore(&self, noise: f64, fuse_thresh: f64, argmax: bool, noise_seed: u64) -> kernelpan::Result<Exploration> {
        let mut inf: InferenceConfig = self.cfg.inference.clone();
        inf.fuse_thresh = fuse_thresh;
        inf.merge.mode = if argmax { MergeMode::Argmax } else { MergeMode::Heuristic };
        inf.validate()?;
        let (f_e, dim) = self.segment_features()?;
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let cands = self.candidates(dim, noise, &mut rng)?;
        let fused = fuse_kernels(&cands, inf.fuse_thresh, inf.class_aware);
        let (h, w) = (self.height(), self.width());
        let full = generate_full_masks(&fused, &f_e, h, w)?;
        let preds: Vec<MaskPrediction> = fused
            .iter()
            .enumerate()
            .map(|(i, f)| MaskPrediction {
                kind: f.kind,
                category: f.category,
                score: rescore(f.score, full.channel(i), inf.bin_thresh),
                origin: f.origin,
                mask: full.channel(i).to_vec(),
            })
            .collect();
        let label = panoptic_merge(&preds, h, w, inf.bin_thresh, &inf.merge)?;
        let (pq, _) = evaluate(&[(label.clone(), self.label.clone())])?;
        let things = |k: Kind| fused.iter().filter(|f| f.kind == k).count();
        let report = serde_json::json!({
            "candidates": cands.len(),
            "fused_things": things(Kind::Thing),
            "fused_stuff": things(Kind::Stuff),
            "gt_things": self.sample.things.len(),
            "segments": label.segments.len(),
            "pq": pq.all.pq,
            "pq_things": pq.things.pq,
            "pq_stuff": pq.stuff.pq,
        });
        Ok(Exploration {
            rgba: rgb_to_rgba(&label.colorize()),
            pq: pq.all.pq,
            fused_things: things(Kind::Thing),
            report: report.to_string(),
        })
    }
}

#[wasm_bindgen]
pub struct Exploration {
    rgba: Vec<u8>,
    pq: f64,
    fused_things: usize,
    report: String,
}

#[wasm_bindgen]
impl Exploration {
    /// Merged labels, colorized, as RGBA bytes.
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    pub fn pq(&self) -> f64 {
        self.pq
    }

    pub fn fused_things(&self) -> usize {
        self.fused_things
    }

    /// JSON with candidate, cluster and segment counts and PQ.
    pub fn report(&self) -> String {
        self.report.clone()
    }
}
