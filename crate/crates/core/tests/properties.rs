//! Property tests over the public API.

use std::fs;

use kernelpan::config::RunConfig;
use kernelpan::data::io::{load_sample, save_sample};
use kernelpan::data::{build_targets, generate_sample, DataConfig, TargetSpec};
use kernelpan::eval::{evaluate, match_segments};
use kernelpan::inference::{
    fuse_kernels, panoptic_merge, Candidate, MaskPrediction, MergeConfig, MergeMode,
};
use kernelpan::loss::{dice_loss, focal_heatmap_loss, weighted_dice};
use kernelpan::model::PanopticFcn;
use kernelpan::panoptic::{Kind, PanopticLabel, Segment};
use kernelpan::train::{zero_velocity, Checkpoint, CheckpointHeader, Precision, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
use kernelpan::Tensor;
use proptest::prelude::*;

fn spec() -> TargetSpec {
    RunConfig::default().target_spec()
}

fn toy_config() -> RunConfig {
    RunConfig::default()
        .with_overrides(&[
            "model.c_mid=8",
            "model.c_e=8",
            "model.conv_num=1",
            "model.encoder_convs=1",
            "model.stage_strides=[8,16]",
            "model.backbone_channels=8",
            "model.backbone_depth=1",
            "model.gn_groups=2",
            "targets.scale_ranges=[[1,20],[12,2048]]",
            "data.height=32",
            "data.width=32",
            "data.min_size=8",
            "data.max_size=14",
        ])
        .unwrap()
}

fn unit_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(0.0f64..=1.0, n)
}

// ------------------------------------------------------------------ targets

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn heatmaps_are_bounded_with_unit_peaks_and_stuff_sums_to_one(seed in 0u64..100_000) {
        let s = generate_sample(seed, &DataConfig::default()).unwrap();
        let t = build_targets::<f64>(&s, &spec()).unwrap();
        for st in &t.stages {
            prop_assert!(st.y_th.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            for a in &st.assigned_things {
                prop_assert_eq!(st.y_th.at3(a.category, a.center.1, a.center.0), 1.0);
            }
            let (c, h, w) = (st.y_st.shape()[0], st.height(), st.width());
            for y in 0..h {
                for x in 0..w {
                    let sum: f64 = (0..c).map(|k| st.y_st.at3(k, y, x)).sum();
                    prop_assert!((sum - 1.0).abs() <= 1e-4, "stuff sum {} at ({}, {})", sum, x, y);
                }
            }
        }
        let again = build_targets::<f64>(&s, &spec()).unwrap();
        for (a, b) in t.stages.iter().zip(&again.stages) {
            prop_assert_eq!(a.y_th.data(), b.y_th.data());
            prop_assert_eq!(a.y_st.data(), b.y_st.data());
        }
    }

    #[test]
    fn samples_round_trip_through_disk(seed in 0u64..100_000) {
        let s = generate_sample(seed, &DataConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_sample(dir.path(), "s", &s).unwrap();
        let back = load_sample(dir.path(), "s").unwrap();
        prop_assert_eq!(&back.things, &s.things);
        prop_assert_eq!(&back.stuff_map, &s.stuff_map);
        prop_assert!(back.image.data().iter().zip(s.image.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn ground_truth_scores_perfect_pq(seed in 0u64..100_000) {
        let s = generate_sample(seed, &DataConfig::default()).unwrap();
        let gt = PanopticLabel::from_sample(&s);
        let (r, _) = evaluate(&[(gt.clone(), gt)]).unwrap();
        prop_assert_eq!(r.all.pq, 1.0);
    }
}

// --------------------------------------------------------------------- loss

proptest! {
    #[test]
    fn dice_terms_are_bounded(p in unit_vec(36), y in unit_vec(36), q in unit_vec(36), s in (0.0f64..1.0, 0.0f64..1.0)) {
        let d = dice_loss(&p, &y, 1e-6);
        prop_assert!((0.0..=1.0).contains(&d));
        let (wd, _) = weighted_dice(&[&p[..], &q[..]], &[s.0, s.1], &y, 1e-6);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&wd));
        // A single prediction reduces to plain dice, bit for bit.
        let (one, _) = weighted_dice(&[&p[..]], &[s.0 + 0.1], &y, 1e-6);
        prop_assert_eq!(one.to_bits(), d.to_bits());
    }

    #[test]
    fn weighted_dice_is_a_convex_combination(
        preds in proptest::collection::vec(unit_vec(16), 1..6),
        scores in proptest::collection::vec(0.01f64..1.0, 6),
        y in unit_vec(16),
    ) {
        let k = preds.len();
        let refs: Vec<&[f64]> = preds.iter().map(|p| &p[..]).collect();
        let (wd, _) = weighted_dice(&refs, &scores[..k], &y, 1e-6);
        let total: f64 = scores[..k].iter().sum();
        let weights: Vec<f64> = scores[..k].iter().map(|s| s / total).collect();
        prop_assert!((weights.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        let direct: f64 = refs.iter().zip(&weights).map(|(p, w)| w * dice_loss(p, &y, 1e-6)).sum();
        prop_assert!((wd - direct).abs() <= 1e-12);
    }

    #[test]
    fn focal_loss_is_non_negative(l in unit_vec(25), y in unit_vec(25)) {
        let l = Tensor::new(&[1, 5, 5], l).unwrap();
        let y = Tensor::new(&[1, 5, 5], y).unwrap();
        prop_assert!(focal_heatmap_loss(&l, &y, 2.0, 4.0, 1e-6, 1.0) >= 0.0);
    }
}

// ---------------------------------------------------------------- inference

fn candidates() -> impl Strategy<Value = Vec<Candidate>> {
    proptest::collection::vec(
        (any::<bool>(), 0usize..3, 0usize..2, (0usize..4, 0usize..4), 0.0f64..1.0, proptest::collection::vec(-1.0f64..1.0, 4)),
        1..30,
    )
    .prop_map(|v| {
        v.into_iter()
            .map(|(thing, category, stage, position, score, kernel)| Candidate {
                kind: if thing { Kind::Thing } else { Kind::Stuff },
                category,
                stage,
                position,
                score,
                kernel,
            })
            .collect()
    })
}

fn mask_predictions() -> impl Strategy<Value = Vec<MaskPrediction>> {
    proptest::collection::vec((any::<bool>(), 0usize..3, 0.0f64..1.0, unit_vec(64)), 0..8).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (thing, category, score, mask))| MaskPrediction {
                kind: if thing { Kind::Thing } else { Kind::Stuff },
                category,
                score,
                origin: (0, (i, 0)),
                mask,
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn fusion_keeps_means_and_one_stuff_kernel_per_class(cands in candidates(), thresh in 0.0f64..1.0, class_aware in any::<bool>()) {
        let fused = fuse_kernels(&cands, thresh, class_aware);
        let members: usize = fused.iter().map(|f| f.members).sum();
        prop_assert_eq!(members, cands.len());
        prop_assert!(fused.len() <= cands.len());
        let mut stuff: Vec<usize> = fused.iter().filter(|f| f.kind == Kind::Stuff).map(|f| f.category).collect();
        let n = stuff.len();
        stuff.sort();
        stuff.dedup();
        prop_assert_eq!(stuff.len(), n);
        // A stuff kernel is the mean of every candidate of its class.
        for f in fused.iter().filter(|f| f.kind == Kind::Stuff) {
            let group: Vec<_> = cands.iter().filter(|c| c.kind == Kind::Stuff && c.category == f.category).collect();
            for d in 0..4 {
                let mean = group.iter().map(|c| c.kernel[d]).sum::<f64>() / group.len() as f64;
                prop_assert!((f.kernel[d] - mean).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn unattainable_threshold_keeps_every_thing(cands in candidates()) {
        let fused = fuse_kernels(&cands, 1.0 + 1e-9, true);
        let things = |k| cands.iter().filter(|c| c.kind == k).count();
        prop_assert_eq!(fused.iter().filter(|f| f.kind == Kind::Thing).count(), things(Kind::Thing));
    }

    #[test]
    fn merge_partitions_pixels_deterministically(preds in mask_predictions(), argmax in any::<bool>(), thresh in 0.1f64..0.9) {
        let cfg = MergeConfig {
            mode: if argmax { MergeMode::Argmax } else { MergeMode::Heuristic },
            stuff_min_area: 2,
            ..MergeConfig::default()
        };
        let a = panoptic_merge(&preds, 8, 8, thresh, &cfg).unwrap();
        prop_assert!(a.validate().is_ok());
        let covered = a.ids.iter().filter(|&&id| id != 0).count();
        prop_assert_eq!(covered, a.segments.iter().map(|s| s.area).sum::<usize>());
        let b = panoptic_merge(&preds, 8, 8, thresh, &cfg).unwrap();
        prop_assert_eq!(a, b);
    }
}

// --------------------------------------------------------------------- eval

fn labels() -> impl Strategy<Value = PanopticLabel> {
    proptest::collection::vec(0u32..5, 36).prop_map(|ids| {
        let mut segments = Vec::new();
        for id in 1..5u32 {
            let area = ids.iter().filter(|&&v| v == id).count();
            if area > 0 {
                segments.push(Segment {
                    id,
                    kind: if id % 2 == 0 { Kind::Stuff } else { Kind::Thing },
                    category: (id as usize / 2) % 2,
                    area,
                    score: 1.0,
                });
            }
        }
        PanopticLabel {
            height: 6,
            width: 6,
            ids,
            segments,
        }
    })
}

proptest! {
    #[test]
    fn matches_are_unique_and_pq_is_sq_times_rq(pairs in proptest::collection::vec((labels(), labels()), 1..4)) {
        for (p, g) in &pairs {
            let m = match_segments(p, g).unwrap();
            let mut gt_ids: Vec<u32> = m.tp.iter().map(|t| t.1).collect();
            let mut pred_ids: Vec<u32> = m.tp.iter().map(|t| t.2).collect();
            let n = gt_ids.len();
            gt_ids.sort();
            gt_ids.dedup();
            pred_ids.sort();
            pred_ids.dedup();
            prop_assert_eq!(gt_ids.len(), n);
            prop_assert_eq!(pred_ids.len(), n);
        }
        let (r, _) = evaluate(&pairs).unwrap();
        for c in &r.per_category {
            prop_assert!((0.0..=1.0).contains(&c.pq));
            if c.stats.tp > 0 {
                prop_assert!((c.pq - c.sq * c.rq).abs() <= 1e-9);
            }
        }
    }
}

// -------------------------------------------------------------------- model

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn outputs_are_finite_probabilities(seed in 0u64..1000, pixels in proptest::collection::vec(0.0f64..1.0, 3 * 32 * 32)) {
        let cfg = toy_config();
        let model = PanopticFcn::new(cfg.model.clone()).unwrap();
        let params = model.init_params::<f64>(seed);
        let image = Tensor::new(&[3, 32, 32], pixels).unwrap();
        let out = model.forward(&params, &image).unwrap();
        let again = model.forward(&params, &image).unwrap();
        for (s, t) in out.stages.iter().zip(&again.stages) {
            prop_assert!(s.l_th.data().iter().chain(s.l_st.data()).all(|v| (0.0..=1.0).contains(v)));
            prop_assert!(s.g.data().iter().all(|v| v.is_finite()));
            prop_assert_eq!(s.g.data(), t.g.data());
        }
        prop_assert!(out.f_e.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn checkpoints_round_trip_byte_identically(seed in 0u64..1000, double in any::<bool>()) {
        let cfg = toy_config();
        let model = PanopticFcn::new(cfg.model.clone()).unwrap();
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            precision: if double { Precision::F64 } else { Precision::F32 },
            step: seed as usize,
            best_pq: Some(0.5),
            config: cfg,
        };
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        if double {
            let params = model.init_params::<f64>(seed);
            Checkpoint { header, velocity: zero_velocity(&params), params }.save(&a).unwrap();
            Checkpoint::<f64>::load(&a).unwrap().save(&b).unwrap();
        } else {
            let params = model.init_params::<f32>(seed);
            Checkpoint { header, velocity: zero_velocity(&params), params }.save(&a).unwrap();
            Checkpoint::<f32>::load(&a).unwrap().save(&b).unwrap();
        }
        for entry in fs::read_dir(&a).unwrap() {
            let name = entry.unwrap().file_name();
            prop_assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap());
        }
    }
}
