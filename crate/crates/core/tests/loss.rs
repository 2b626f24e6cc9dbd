use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ron_core::anchors::BBox;
use ron_core::assigner::{assign, gate, sample, GroundTruth};
use ron_core::inference::read_outputs;
use ron_core::loss::{gradcheck_total_loss, total_loss, weighted_total, LossWeights, Targets};
use ron_core::network::{Model, ModelConfig};
use ron_core::tensor::{cross_entropy, smooth_l1, Graph, Shape, Tensor};

#[test]
fn scalar_kernels() {
    assert_eq!(smooth_l1(0.5f64), 0.125);
    assert_eq!(smooth_l1(-2.0f64), 1.5);
    assert_eq!(smooth_l1(1.0f64), 0.5);
    assert!((cross_entropy(0.5f64) - std::f64::consts::LN_2).abs() < 1e-15);
    // clamped at 1e-12
    assert!((cross_entropy(0.0f64) - 12.0 * std::f64::consts::LN_10).abs() < 1e-9);
}

#[test]
fn weighted_total_examples() {
    let w = LossWeights::default();
    assert!((weighted_total([3.0; 3], [1; 3], w) - 3.0).abs() < 1e-12);
    assert!((weighted_total([1.0, 0.5, 2.0], [2, 1, 4], w) - 0.5).abs() < 1e-12);
    // permuting equal normalized components changes nothing
    let a = weighted_total([1.0, 2.0, 3.0], [1, 2, 3], w);
    let b = weighted_total([3.0, 1.0, 2.0], [3, 1, 2], w);
    assert!((a - b).abs() < 1e-12);
}

/// Recomputes the objective from the read-out head probabilities.
#[test]
fn total_loss_matches_scalar_recomputation() {
    let cfg = ModelConfig {
        input_size: 64,
        num_classes: 2,
        backbone_channels: [4, 6, 6, 6],
        rf_channels: 6,
        init_std: 0.3,
        ..ModelConfig::default()
    };
    let model = Model::<f64>::build(cfg.clone(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let images = Tensor::<f64>::uniform(Shape::new(2, 3, 64, 64), -0.5, 0.5, &mut rng);
    let anchors = cfg.anchors::<f64>(64).unwrap();
    let gts = [
        vec![GroundTruth { class: 1, bbox: BBox::from_corners(5.0, 5.0, 25.0, 30.0) }],
        vec![
            GroundTruth { class: 2, bbox: BBox::from_corners(30.0, 10.0, 60.0, 40.0) },
            GroundTruth { class: 1, bbox: BBox::from_corners(2.0, 40.0, 14.0, 52.0) },
        ],
    ];
    let assignments: Vec<_> = gts.iter().map(|g| assign(anchors.boxes(), g).unwrap()).collect();
    let targets = Targets { anchors: &anchors, assignments: &assignments };

    let mut g = Graph::new();
    let fwd = model.forward(&mut g, images).unwrap();
    let out = read_outputs(&g, &fwd, &anchors, 2);
    let p1 = out.objectness.clone().unwrap();
    let labels = targets.labels();
    let sel = sample(&labels, &gate(&p1, 0.03), &mut rng);
    let tl = total_loss(&mut g, &fwd, &targets, Some(&sel.objectness), &sel.detection, 2, LossWeights::default()).unwrap();

    let ln = |p: f64| -p.max(1e-12).ln();
    let l_obj: f64 = sel.objectness.positives.iter().map(|&u| ln(p1[u])).sum::<f64>()
        + sel.objectness.negatives.iter().map(|&u| ln(1.0 - p1[u])).sum::<f64>();
    let per = anchors.len();
    let class_of = |u: usize| assignments[u / per].classes[u % per];
    let l_cls: f64 = sel.detection.positives.iter().map(|&u| ln(out.class_row(u)[class_of(u)])).sum::<f64>()
        + sel.detection.negatives.iter().map(|&u| ln(out.class_row(u)[0])).sum::<f64>();
    let l_loc: f64 = sel
        .detection
        .positives
        .iter()
        .map(|&u| {
            let t = assignments[u / per].targets[u % per].unwrap();
            (0..4).map(|j| smooth_l1(out.offsets[u][j] - t[j])).sum::<f64>()
        })
        .sum();
    let r = tl.report;
    assert!((r.l_obj - l_obj).abs() < 1e-9 * l_obj.max(1.0));
    assert!((r.l_cls - l_cls).abs() < 1e-9 * l_cls.max(1.0));
    assert!((r.l_loc - l_loc).abs() < 1e-9 * l_loc.max(1.0));
    assert_eq!(r.n_obj, sel.objectness.len());
    assert_eq!(r.n_loc, sel.detection.positives.len());
    assert_eq!(r.n_cls, sel.detection.len());
    let want = weighted_total([l_obj, l_loc, l_cls], [r.n_obj, r.n_loc, r.n_cls], LossWeights::default());
    assert!((r.total - want).abs() < 1e-9);
    assert!((g.value(tl.total.unwrap()).item() - want).abs() < 1e-9);
}

#[test]
fn no_ground_truth_and_no_samples_drops_every_term() {
    let cfg = ModelConfig { input_size: 64, ..ModelConfig::default() };
    let model = Model::<f32>::build(cfg.clone(), 1).unwrap();
    let anchors = cfg.anchors::<f32>(64).unwrap();
    let assignments = vec![assign(anchors.boxes(), &[]).unwrap()];
    let targets = Targets { anchors: &anchors, assignments: &assignments };
    let mut g = Graph::new();
    let fwd = model.forward(&mut g, Tensor::zeros(Shape::new(1, 3, 64, 64))).unwrap();
    let sel = sample(&targets.labels(), &vec![true; anchors.len()], &mut ChaCha8Rng::seed_from_u64(0));
    let tl = total_loss(&mut g, &fwd, &targets, Some(&sel.objectness), &sel.detection, 3, LossWeights::default()).unwrap();
    assert!(tl.total.is_none());
    assert_eq!(tl.report.total, 0.0);
}

#[test]
fn full_objective_passes_finite_differences() {
    let r = gradcheck_total_loss(3, 120).unwrap();
    assert!(r.passed(1e-4), "{r:?}");
}
