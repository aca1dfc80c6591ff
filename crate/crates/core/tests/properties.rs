use std::collections::{BTreeMap, BTreeSet, HashMap};

use proptest::prelude::*;

use mammo_core::evaluate::{
    aggregate_per_breast, compute_metrics, roc_auc, roc_auc_pairwise_oracle, ConfusionCounts,
    ImagePrediction, PredictionSet,
};
use mammo_core::image::RawImage;
use mammo_core::manifest::{
    read_manifest, write_manifest, DatasetManifest, ImageRecord, Laterality, View,
};
use mammo_core::preprocess::{
    orient_breast_left, rescale_pad, rule_based_roi, scaled_dims, Plane, PreprocessConfig,
    WindowSpec,
};
use mammo_core::synthetic::synthetic_records;
use mammo_core::training::{
    bce_minimum, bce_soft_loss, build_epoch_plan, cosine_lr, make_folds, SamplerConfig,
};

fn record_strategy() -> impl Strategy<Value = ImageRecord> {
    (
        0u32..40,
        any::<bool>(),
        prop_oneof![Just(View::Cc), Just(View::Mlo), Just(View::Other)],
        proptest::option::of(18u32..=130),
        any::<bool>(),
        any::<bool>(),
    )
        .prop_map(|(p, left, view, age, cancer, biopsy)| ImageRecord {
            patient_id: format!("P{p}"),
            image_id: String::new(),
            laterality: if left { Laterality::L } else { Laterality::R },
            view,
            age,
            cancer,
            biopsy,
            source_path: format!("img/{p}.png").into(),
        })
}

fn manifest_strategy() -> impl Strategy<Value = DatasetManifest> {
    prop::collection::vec(record_strategy(), 1..60).prop_map(|mut recs| {
        for (i, r) in recs.iter_mut().enumerate() {
            r.image_id = format!("I{i}");
            r.source_path = format!("img/{i}.png").into();
        }
        // age is a patient attribute
        let mut ages: HashMap<String, Option<u32>> = HashMap::new();
        for r in &mut recs {
            r.age = *ages.entry(r.patient_id.clone()).or_insert(r.age);
        }
        DatasetManifest::from_records(recs).unwrap()
    })
}

fn scores_and_labels() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..80).prop_flat_map(|n| {
        (
            prop::collection::vec(
                prop_oneof![0.0f64..=1.0, (0u8..5).prop_map(|k| k as f64 / 4.0)],
                n,
            ),
            prop::collection::vec(0u8..=1, n),
        )
            .prop_map(|(s, mut l)| {
                l[0] = 0;
                l[1] = 1;
                (s, l)
            })
    })
}

/// Bounding boxes of every largest 4-connected component, by explicit-stack DFS.
fn largest_component_boxes(
    above: &[bool],
    h: usize,
    w: usize,
) -> Vec<(usize, usize, usize, usize)> {
    let mut seen = vec![false; above.len()];
    let mut comps: Vec<(usize, (usize, usize, usize, usize))> = Vec::new();
    for s in 0..above.len() {
        if !above[s] || seen[s] {
            continue;
        }
        let mut stack = vec![s];
        seen[s] = true;
        let (mut n, mut bbox) = (0, (usize::MAX, usize::MAX, 0, 0));
        while let Some(i) = stack.pop() {
            let (r, c) = (i / w, i % w);
            n += 1;
            bbox = (bbox.0.min(r), bbox.1.min(c), bbox.2.max(r), bbox.3.max(c));
            let nbrs = [
                (r > 0).then(|| i - w),
                (r + 1 < h).then(|| i + w),
                (c > 0).then(|| i - 1),
                (c + 1 < w).then(|| i + 1),
            ];
            for j in nbrs.into_iter().flatten() {
                if above[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        comps.push((n, bbox));
    }
    let max = comps.iter().map(|c| c.0).max().unwrap_or(0);
    comps
        .into_iter()
        .filter(|c| c.0 == max)
        .map(|c| c.1)
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn manifest_csv_round_trip(m in manifest_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_manifest(&path, &m).unwrap();
        let back = read_manifest(std::fs::File::open(&path).unwrap()).unwrap();
        prop_assert_eq!(back, m);
    }

    #[test]
    fn manifest_patient_index_partitions_records(m in manifest_strategy()) {
        let total: usize = m.patient_index().values().map(Vec::len).sum();
        prop_assert_eq!(total, m.len());
        for (pid, idx) in m.patient_index() {
            prop_assert!(idx.iter().all(|&i| &m.records()[i].patient_id == pid));
            let any_cancer = idx.iter().any(|&i| m.records()[i].cancer);
            prop_assert_eq!(m.patient_cancer(pid), any_cancer);
        }
    }

    #[test]
    fn windowing_is_monotone_and_bounded(
        c in -1000.0f64..5000.0, w in 1.0f64..8192.0, a in -3000.0f64..9000.0, d in 0.0f64..2000.0,
    ) {
        let win = WindowSpec::linear(c, w);
        let (ya, yb) = (win.map(a, 65535.0), win.map(a + d, 65535.0));
        prop_assert!(ya <= yb);
        prop_assert!((0.0..=65535.0).contains(&ya) && (0.0..=65535.0).contains(&yb));
    }

    #[test]
    fn rescale_keeps_target_shape_and_aspect(h in 1usize..400, w in 1usize..400, th in 4usize..128, tw in 4usize..128) {
        let cfg = PreprocessConfig { target_height: th, target_width: tw, ..Default::default() };
        let out = rescale_pad(&Plane::filled(h, w, 7.0), &cfg);
        prop_assert_eq!((out.height, out.width), (th, tw));
        let (sh, sw) = scaled_dims(h, w, th, tw);
        prop_assert!(sh <= th && sw <= tw && (sh == th || sw == tw));
        let s = (th as f64 / h as f64).min(tw as f64 / w as f64);
        prop_assert!((sh as f64 - h as f64 * s).abs() <= 1.0);
        prop_assert!((sw as f64 - w as f64 * s).abs() <= 1.0);
    }

    #[test]
    fn orientation_is_idempotent_and_mirror_consistent(
        (h, w, data) in (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
            (Just(h), Just(w), prop::collection::vec(0.0f64..100.0, h * w))
        })
    ) {
        let p = Plane::new(h, w, data);
        let (once, _) = orient_breast_left(&p);
        let (twice, flipped_again) = orient_breast_left(&once);
        prop_assert_eq!(&twice, &once);
        prop_assert!(!flipped_again);
        let (from_mirror, _) = orient_breast_left(&p.mirrored());
        let half = w / 2;
        let mass = |q: &Plane, left: bool| -> f64 {
            q.data.chunks_exact(w).map(|r| if left { r[..half].iter().sum::<f64>() } else { r[w - half..].iter().sum() }).sum()
        };
        prop_assert!(mass(&once, true) >= mass(&once, false) - 1e-9);
        prop_assert!(mass(&from_mirror, true) >= mass(&from_mirror, false) - 1e-9);
        if (mass(&p, true) - mass(&p, false)).abs() > 1e-6 {
            prop_assert_eq!(&from_mirror, &once);
        }
    }

    #[test]
    fn roi_matches_largest_component_oracle(
        (h, w, px) in (2usize..24, 2usize..24).prop_flat_map(|(h, w)| {
            (Just(h), Just(w), prop::collection::vec(prop_oneof![3 => 0u16..50, 2 => 200u16..4096], h * w))
        }),
        margin in 0.0f64..0.3,
    ) {
        let img = RawImage::new(h, w, px, 12);
        let max = *img.pixels.iter().max().unwrap();
        prop_assume!(max > 0);
        let cut = 0.05 * max as f64;
        let above: Vec<bool> = img.pixels.iter().map(|&p| p as f64 > cut).collect();
        let candidates = largest_component_boxes(&above, h, w);
        let tight = rule_based_roi(&img, 0.05, 0.0);
        let got = (tight.y, tight.x, tight.y + tight.h - 1, tight.x + tight.w - 1);
        prop_assert!(candidates.contains(&got), "box {:?} not among {:?}", got, candidates);
        let wide = rule_based_roi(&img, 0.05, margin);
        prop_assert!(wide.x <= tight.x && wide.y <= tight.y);
        prop_assert!(wide.x + wide.w >= tight.x + tight.w && wide.y + wide.h >= tight.y + tight.h);
        prop_assert!(wide.x + wide.w <= w && wide.y + wide.h <= h);
    }

    #[test]
    fn folds_are_patient_disjoint_and_stratified(n in 20usize..300, frac in 0.05f64..0.5, k in 2usize..6, seed in any::<u64>()) {
        let m = synthetic_records(n, frac, 11);
        let positives = m.patients().iter().filter(|p| m.patient_cancer(p)).count();
        prop_assume!(positives >= k);
        let split = make_folds(&m, k, seed).unwrap();
        let mut seen = BTreeSet::new();
        let mut pos = vec![0usize; k];
        let mut size = vec![0usize; k];
        for f in 0..k {
            for p in split.patients_in(f) {
                prop_assert!(seen.insert(p.to_string()));
                size[f] += 1;
                pos[f] += usize::from(m.patient_cancer(p));
            }
        }
        prop_assert_eq!(seen.len(), m.patients().len());
        for r in m.records() {
            prop_assert_eq!((0..k).filter(|&f| split.in_fold(r, f)).count(), 1);
        }
        prop_assert!(size.iter().max().unwrap() - size.iter().min().unwrap() <= 1);
        prop_assert!(pos.iter().max().unwrap() - pos.iter().min().unwrap() <= 1);
        prop_assert_eq!(make_folds(&m, k, seed).unwrap().assignments, split.assignments);
    }

    #[test]
    fn every_batch_holds_enough_positives(batch in 2usize..16, ppb in 1usize..4, seed in any::<u64>(), epoch in 0u64..5) {
        prop_assume!(ppb < batch);
        let m = synthetic_records(80, 0.1, 3);
        let recs: Vec<&ImageRecord> = m.records().iter().collect();
        let cfg = SamplerConfig { batch_size: batch, positives_per_batch: ppb, shuffle_seed: seed };
        let plan = build_epoch_plan(&recs, &cfg, epoch).unwrap();
        let label: HashMap<&str, bool> = recs.iter().map(|r| (r.image_id.as_str(), r.cancer)).collect();
        let negatives = recs.iter().filter(|r| !r.cancer).count();
        let mut neg_seen = BTreeSet::new();
        for b in &plan.batches {
            prop_assert!(b.len() <= batch);
            prop_assert!(b.iter().filter(|id| label[id.as_str()]).count() >= ppb);
            for id in b.iter().filter(|id| !label[id.as_str()]) {
                prop_assert!(neg_seen.insert(id.clone()), "negative drawn twice");
            }
        }
        prop_assert_eq!(neg_seen.len(), negatives);
        prop_assert_eq!(build_epoch_plan(&recs, &cfg, epoch).unwrap().batches, plan.batches);
    }

    #[test]
    fn soft_bce_is_minimised_at_the_soft_target(soft in 0.5f64..=1.0, z in -8.0f64..8.0) {
        let at_target = bce_soft_loss(&[(soft / (1.0 - soft).max(1e-300)).ln()], &[1], soft);
        let loss = bce_soft_loss(&[z], &[1], soft);
        prop_assert!(loss >= bce_minimum(soft) - 1e-9);
        if soft < 1.0 {
            prop_assert!((at_target - bce_minimum(soft)).abs() <= 1e-9);
        }
        let neg = bce_soft_loss(&[z], &[0], soft);
        prop_assert!(neg >= 0.0 && loss >= 0.0);
    }

    #[test]
    fn cosine_schedule_is_bounded_and_non_increasing(total in 1usize..500, hi in 1e-4f64..1.0, lo_frac in 0.0f64..1.0) {
        let lo = hi * lo_frac;
        let mut prev = f64::INFINITY;
        for t in 0..=total {
            let v = cosine_lr(t, total, hi, lo);
            prop_assert!(v <= prev + 1e-15);
            prop_assert!(v >= lo - 1e-15 && v <= hi + 1e-15);
            prev = v;
        }
    }

    #[test]
    fn auc_invariant_under_monotone_transforms((s, l) in scores_and_labels()) {
        let base = roc_auc(&PredictionSet::from_scores(&s, &l).unwrap()).unwrap();
        let squashed: Vec<f64> = s.iter().map(|v| v.powi(3)).collect();
        let auc2 = roc_auc(&PredictionSet::from_scores(&squashed, &l).unwrap()).unwrap();
        prop_assert!((base - auc2).abs() <= 1e-12);
        let oracle = roc_auc_pairwise_oracle(&PredictionSet::from_scores(&s, &l).unwrap()).unwrap();
        prop_assert!((base - oracle).abs() <= 1e-9);
        prop_assert!((0.0..=1.0).contains(&base));
    }

    #[test]
    fn auc_flips_with_labels((s, l) in scores_and_labels()) {
        let flipped: Vec<u8> = l.iter().map(|v| 1 - v).collect();
        let a = roc_auc(&PredictionSet::from_scores(&s, &l).unwrap()).unwrap();
        let b = roc_auc(&PredictionSet::from_scores(&s, &flipped).unwrap()).unwrap();
        prop_assert!((a + b - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn metrics_are_bounded_and_consistent(tp in 0u64..500, tn in 0u64..500, fp in 0u64..500, fn_ in 0u64..500) {
        let m = compute_metrics(&ConfusionCounts { tp, tn, fp, fn_ });
        for v in [m.precision, m.recall, m.accuracy, m.f1].iter().filter_map(|v| v.value()) {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert_eq!(m.precision.is_defined(), tp + fp > 0);
        prop_assert_eq!(m.recall.is_defined(), tp + fn_ > 0);
        if let (Some(p), Some(r), Some(f)) = (m.precision.value(), m.recall.value(), m.f1.value()) {
            prop_assert!((f - 2.0 * p * r / (p + r)).abs() <= 1e-12);
        }
    }

    #[test]
    fn per_breast_aggregation_counts_distinct_breasts(
        rows in prop::collection::vec((0u8..10, any::<bool>(), 0.0f64..=1.0, 0u8..=1), 1..60)
    ) {
        let images: Vec<ImagePrediction> = rows.iter().enumerate().map(|(i, &(p, left, prob, label))| ImagePrediction {
            image_id: i.to_string(),
            patient_id: format!("P{p}"),
            laterality: if left { Laterality::L } else { Laterality::R },
            fold: 0,
            probability: prob,
            label,
        }).collect();
        let agg = aggregate_per_breast(&images);
        let mut groups: BTreeMap<(u8, bool), (f64, usize, u8)> = BTreeMap::new();
        for &(p, left, prob, label) in &rows {
            let e = groups.entry((p, left)).or_default();
            e.0 += prob;
            e.1 += 1;
            e.2 |= label;
        }
        prop_assert_eq!(agg.len(), groups.len());
        let got: Vec<(f64, u8)> = {
            let mut v: Vec<(f64, u8)> = agg.rows().iter().map(|r| (r.probability, r.label)).collect();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v
        };
        let mut want: Vec<(f64, u8)> = groups.values().map(|&(s, n, l)| (s / n as f64, l)).collect();
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (g, w) in got.iter().zip(&want) {
            prop_assert!((g.0 - w.0).abs() <= 1e-12 && g.1 == w.1);
        }
    }
}
