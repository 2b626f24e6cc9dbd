use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ron_core::anchors::BBox;
use ron_core::data::{Dataset, Image, Object, Sample};
use ron_core::eval::{ap, coco_style_ap, recall_at, recall_curve, score_detections, ApMode, GtBox, ScoredBox};
use ron_core::inference::{Detection, Proposal};

/// Precision/recall of every score-ranked prefix, each matched from scratch.
fn reference_ap(dets: &[ScoredBox], gts: &[Vec<GtBox>], thresh: f32) -> f64 {
    let npos = gts.iter().map(Vec::len).sum::<usize>() as f64;
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
    let mut pr = Vec::new();
    for k in 1..=order.len() {
        let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let mut tp = 0;
        for &i in &order[..k] {
            let d = dets[i];
            let ious: Vec<f32> = gts[d.image].iter().map(|g| g.bbox.iou(&d.bbox)).collect();
            // best overlap, first index on ties
            let best = (0..ious.len()).fold(None, |acc: Option<usize>, j| match acc {
                Some(b) if ious[b] >= ious[j] => Some(b),
                _ => Some(j),
            });
            if let Some(j) = best {
                if ious[j] >= thresh && !used[d.image][j] {
                    used[d.image][j] = true;
                    tp += 1;
                }
            }
        }
        pr.push((tp as f64 / npos, tp as f64 / k as f64));
    }
    let mut sum = 0.0;
    for i in 0..=10 {
        let t = i as f64 / 10.0;
        sum += pr.iter().filter(|p| p.0 >= t).map(|p| p.1).fold(0.0, f64::max);
    }
    sum / 11.0
}

fn random_instance(seed: u64) -> (Vec<ScoredBox>, Vec<Vec<GtBox>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = 3;
    let mut gts = vec![Vec::new(); images];
    for _ in 0..5 {
        let l = rng.random_range(0.0..60.0f32);
        let t = rng.random_range(0.0..60.0f32);
        gts[rng.random_range(0..images)].push(GtBox {
            bbox: BBox::from_corners(l, t, l + rng.random_range(8.0..30.0f32), t + rng.random_range(8.0..30.0f32)),
            difficult: false,
        });
    }
    let all: Vec<(usize, GtBox)> = gts.iter().enumerate().flat_map(|(i, g)| g.iter().map(move |b| (i, *b))).collect();
    let dets = (0..20)
        .map(|_| {
            let (image, g) = all[rng.random_range(0..all.len())];
            let j = |r: &mut ChaCha8Rng| r.random_range(-6.0..6.0f32);
            let [l, t, r, b] = g.bbox.corners();
            ScoredBox {
                image,
                score: rng.random_range(0..50) as f32 / 50.0,
                bbox: BBox::from_corners(l + j(&mut rng), t + j(&mut rng), r + j(&mut rng), b + j(&mut rng)),
            }
        })
        .filter(|d| d.bbox.is_valid())
        .collect();
    (dets, gts)
}

#[test]
fn ap_matches_reference_scorer() {
    for seed in 0..300 {
        let (dets, gts) = random_instance(seed);
        let got = ap(&dets, &gts, 0.5, ApMode::ElevenPoint).unwrap().ap;
        let want = reference_ap(&dets, &gts, 0.5);
        assert!((got - want).abs() < 1e-12, "seed {seed}: {got} vs {want}");
    }
}

#[test]
fn pr_curve_recall_is_non_decreasing() {
    for seed in 0..50 {
        let (dets, gts) = random_instance(seed);
        for mode in [ApMode::ElevenPoint, ApMode::AllPoint] {
            let c = ap(&dets, &gts, 0.5, mode).unwrap();
            assert!(c.points.windows(2).all(|w| w[0].0 <= w[1].0));
            assert!((0.0..=1.0).contains(&c.ap));
        }
    }
}

#[test]
fn coco_style_of_perfect_detections_is_one_at_every_threshold() {
    let gts = vec![vec![
        GtBox { bbox: BBox::from_corners(1.0, 2.0, 30.0, 40.0), difficult: false },
        GtBox { bbox: BBox::from_corners(50.0, 50.0, 60.0, 70.0), difficult: false },
    ]];
    let dets: Vec<ScoredBox> = gts[0].iter().map(|g| ScoredBox { image: 0, score: 1.0, bbox: g.bbox }).collect();
    for t in ron_core::eval::coco_thresholds() {
        assert_eq!(ap(&dets, &gts, t, ApMode::ElevenPoint).unwrap().ap, 1.0);
    }
    assert_eq!(coco_style_ap(&dets, &gts, ApMode::AllPoint), Some(1.0));
}

proptest! {
    #[test]
    fn ap_depends_only_on_ranking(seed in 0u64..1000, scale in 0.1f32..10.0) {
        let (dets, gts) = random_instance(seed);
        // distinct scores; a monotone map then cannot create ties
        let dets: Vec<ScoredBox> = dets.iter().enumerate().map(|(i, d)| ScoredBox { score: d.score + i as f32 * 1e-4, ..*d }).collect();
        let mapped: Vec<ScoredBox> = dets.iter().map(|d| ScoredBox { score: (d.score * scale).exp(), ..*d }).collect();
        for mode in [ApMode::ElevenPoint, ApMode::AllPoint] {
            prop_assert_eq!(ap(&dets, &gts, 0.5, mode).unwrap().ap, ap(&mapped, &gts, 0.5, mode).unwrap().ap);
        }
    }

    #[test]
    fn trailing_false_positive_never_helps(seed in 0u64..1000) {
        let (mut dets, gts) = random_instance(seed);
        let before = ap(&dets, &gts, 0.5, ApMode::AllPoint).unwrap().ap;
        let before11 = ap(&dets, &gts, 0.5, ApMode::ElevenPoint).unwrap().ap;
        dets.push(ScoredBox { image: 0, score: -1.0, bbox: BBox::from_corners(500.0, 500.0, 510.0, 510.0) });
        prop_assert!(ap(&dets, &gts, 0.5, ApMode::AllPoint).unwrap().ap <= before);
        prop_assert!(ap(&dets, &gts, 0.5, ApMode::ElevenPoint).unwrap().ap <= before11);
    }

    #[test]
    fn recall_is_monotone(seed in 0u64..1000) {
        let (dets, gts) = random_instance(seed);
        let props: Vec<BBox<f32>> = dets.iter().filter(|d| d.image == 0).map(|d| d.bbox).collect();
        let g: Vec<BBox<f32>> = gts[0].iter().map(|g| g.bbox).collect();
        let mut prev = 0.0;
        for n in 0..=props.len() {
            let r = recall_at(&props, &g, n, 0.5);
            prop_assert!(r >= prev);
            prev = r;
            prop_assert!(recall_at(&props, &g, n, 0.3) >= r);
        }
    }
}

fn one_image_dataset(objects: Vec<Object>) -> Dataset {
    Dataset {
        classes: vec!["a".into(), "b".into()],
        samples: vec![Sample { image_id: "0".into(), image: Image::filled(64, 64, [0.0; 3]), objects }],
    }
}

#[test]
fn metrics_report_and_undefined_classes() {
    let obj = Object { class: 1, bbox: BBox::from_corners(10.0, 10.0, 30.0, 30.0), difficult: false };
    let ds = one_image_dataset(vec![obj]);
    let dets = vec![vec![
        Detection { class: 1, score: 0.9, bbox: obj.bbox },
        Detection { class: 2, score: 0.8, bbox: obj.bbox },
    ]];
    let m = score_detections(&dets, &ds, 0.5, ApMode::ElevenPoint, true).unwrap();
    assert_eq!(m.classes[0].ap, Some(1.0));
    assert_eq!(m.classes[1].ap, None);
    assert_eq!(m.map, Some(1.0));
    assert_eq!(m.coco_map, Some(1.0));
    let csv = m.to_csv();
    assert!(csv.starts_with("class,ap,num_gt,num_detections,coco_ap\n"));
    assert!(csv.contains("\nb,,0,1,\n"), "{csv}");
    let json: serde_json::Value = serde_json::from_str(&m.to_json()).unwrap();
    assert_eq!(json["map"], 1.0);
}

#[test]
fn recall_curve_pools_images() {
    let obj = Object { class: 1, bbox: BBox::from_corners(10.0, 10.0, 30.0, 30.0), difficult: false };
    let far = Object { bbox: BBox::from_corners(40.0, 40.0, 60.0, 60.0), ..obj };
    let ds = one_image_dataset(vec![obj, far]);
    let props = vec![vec![
        Proposal { objectness: 0.9, bbox: obj.bbox },
        Proposal { objectness: 0.5, bbox: BBox::from_corners(0.0, 0.0, 2.0, 2.0) },
        Proposal { objectness: 0.1, bbox: far.bbox },
    ]];
    let curve = recall_curve(&props, &ds, &[0, 1, 2, 3, 10], 0.5);
    assert_eq!(curve, vec![(0, 0.0), (1, 0.5), (2, 0.5), (3, 1.0), (10, 1.0)]);
}
