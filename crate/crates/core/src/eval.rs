//! VOC-style average precision and proposal recall.

use std::fmt::Write as _;

use serde::Serialize;

use crate::anchors::BBox;
use crate::data::{Dataset, Object};
use crate::error::{Error, Result};
use crate::inference::{detections_from, proposals_from, run, DetectParams, Detection, Proposal};
use crate::network::Model;
use crate::scalar::Scalar;

/// Recall levels of the 11-point interpolation.
const ELEVEN_POINTS: usize = 11;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub enum ApMode {
    /// Mean of the interpolated precision at recall 0, 0.1, ..., 1.
    #[default]
    ElevenPoint,
    /// Area under the monotone precision envelope.
    AllPoint,
}

/// A scored detection of one class on image `image`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredBox {
    pub image: usize,
    pub score: f32,
    pub bbox: BBox<f32>,
}

/// A ground-truth box of one class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GtBox {
    pub bbox: BBox<f32>,
    pub difficult: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PrCurve {
    /// `(recall, precision)` after each counted detection, in score order.
    pub points: Vec<(f64, f64)>,
    pub ap: f64,
}

/// Per-detection outcome of the greedy matcher: `Some(true)` TP, `Some(false)` FP,
/// `None` for detections matched to a difficult box (ignored).
pub fn match_detections(dets: &[ScoredBox], gts: &[Vec<GtBox>], iou_thresh: f64) -> (Vec<usize>, Vec<Option<bool>>) {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut outcome = Vec::with_capacity(dets.len());
    for &i in &order {
        let d = &dets[i];
        let image_gts = gts.get(d.image).map_or(&[][..], Vec::as_slice);
        let mut best: Option<(usize, f32)> = None;
        for (j, g) in image_gts.iter().enumerate() {
            let iou = d.bbox.iou(&g.bbox);
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        outcome.push(match best {
            Some((j, iou)) if iou as f64 >= iou_thresh => {
                if image_gts[j].difficult {
                    None
                } else if taken[d.image][j] {
                    Some(false)
                } else {
                    taken[d.image][j] = true;
                    Some(true)
                }
            }
            _ => Some(false),
        });
    }
    (order, outcome)
}

/// Average precision of one class; `None` when the class has no non-difficult ground truth.
pub fn ap(dets: &[ScoredBox], gts: &[Vec<GtBox>], iou_thresh: f64, mode: ApMode) -> Option<PrCurve> {
    let npos = gts.iter().flatten().filter(|g| !g.difficult).count();
    if npos == 0 {
        return None;
    }
    let (_, outcome) = match_detections(dets, gts, iou_thresh);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut points = Vec::new();
    for o in outcome.into_iter().flatten() {
        if o {
            tp += 1;
        } else {
            fp += 1;
        }
        points.push((tp as f64 / npos as f64, tp as f64 / (tp + fp) as f64));
    }
    let ap = match mode {
        ApMode::ElevenPoint => {
            (0..ELEVEN_POINTS)
                .map(|i| {
                    let t = i as f64 / 10.0;
                    points.iter().filter(|p| p.0 >= t).map(|p| p.1).fold(0.0, f64::max)
                })
                .sum::<f64>()
                / ELEVEN_POINTS as f64
        }
        ApMode::AllPoint => {
            let mut envelope: Vec<f64> = points.iter().map(|p| p.1).collect();
            for i in (0..envelope.len().saturating_sub(1)).rev() {
                envelope[i] = envelope[i].max(envelope[i + 1]);
            }
            let mut prev = 0.0;
            let mut area = 0.0;
            for (p, e) in points.iter().zip(envelope) {
                area += (p.0 - prev) * e;
                prev = p.0;
            }
            area
        }
    };
    Some(PrCurve { points, ap })
}

/// Mean of the defined APs; `None` when there are none.
pub fn mean_ap(aps: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = aps.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// IoU thresholds 0.5, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Mean over the COCO-style IoU thresholds of one class's AP.
pub fn coco_style_ap(dets: &[ScoredBox], gts: &[Vec<GtBox>], mode: ApMode) -> Option<f64> {
    let aps: Vec<Option<f64>> = coco_thresholds()
        .into_iter()
        .map(|t| ap(dets, gts, t, mode).map(|c| c.ap))
        .collect();
    mean_ap(&aps)
}

/// Fraction of ground-truth boxes covered at `iou_thresh` by the first `n` of `proposals`.
pub fn recall_at(proposals: &[BBox<f32>], gts: &[BBox<f32>], n: usize, iou_thresh: f64) -> f64 {
    if gts.is_empty() {
        return 1.0;
    }
    let top = &proposals[..n.min(proposals.len())];
    covered(top, gts, iou_thresh) as f64 / gts.len() as f64
}

fn covered(proposals: &[BBox<f32>], gts: &[BBox<f32>], iou_thresh: f64) -> usize {
    gts.iter()
        .filter(|g| proposals.iter().any(|p| p.iou(g) as f64 >= iou_thresh))
        .count()
}

/// Detections of every image of a dataset, in sample order.
pub fn detect_dataset<T: Scalar>(model: &Model<T>, dataset: &Dataset, params: DetectParams) -> Result<Vec<Vec<Detection>>> {
    let size = model.config().input_size;
    let mut out = Vec::with_capacity(dataset.len());
    for s in &dataset.samples {
        let img = if s.image.width == size && s.image.height == size {
            s.image.clone()
        } else {
            s.image.resize(size, size)
        };
        let (outputs, anchors) = run(model, &[img])?;
        let dets = detections_from(&outputs, &anchors, 0, s.image.width, s.image.height, params);
        if dets.iter().any(|d| !d.score.is_finite()) {
            return Err(Error::Numeric("non-finite detection score".into()));
        }
        out.push(dets);
    }
    Ok(out)
}

/// Proposals (up to `n`) of every image of a dataset.
pub fn propose_dataset<T: Scalar>(model: &Model<T>, dataset: &Dataset, n: usize) -> Result<Vec<Vec<Proposal>>> {
    let size = model.config().input_size;
    dataset
        .samples
        .iter()
        .map(|s| {
            let img = crate::inference::prepare(size, &s.image);
            let (outputs, anchors) = run(model, &[img])?;
            proposals_from(&outputs, &anchors, 0, s.image.width, s.image.height, n)
        })
        .collect()
}

fn class_inputs(detections: &[Vec<Detection>], objects: &[&[Object]], class: usize) -> (Vec<ScoredBox>, Vec<Vec<GtBox>>) {
    let dets = detections
        .iter()
        .enumerate()
        .flat_map(|(i, ds)| {
            ds.iter().filter(|d| d.class == class).map(move |d| ScoredBox {
                image: i,
                score: d.score,
                bbox: d.bbox,
            })
        })
        .collect();
    let gts = objects
        .iter()
        .map(|objs| {
            objs.iter()
                .filter(|o| o.class == class)
                .map(|o| GtBox {
                    bbox: o.bbox,
                    difficult: o.difficult,
                })
                .collect()
        })
        .collect();
    (dets, gts)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub class: String,
    pub ap: Option<f64>,
    pub num_gt: usize,
    pub num_detections: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coco_ap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub iou_thresh: f64,
    pub mode: ApMode,
    pub num_images: usize,
    pub map: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coco_map: Option<f64>,
    pub classes: Vec<ClassMetrics>,
}

impl Metrics {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize") + "\n"
    }

    /// `class,ap,num_gt,num_detections[,coco_ap]`; undefined APs are left empty.
    pub fn to_csv(&self) -> String {
        let coco = self.coco_map.is_some();
        let mut s = String::from("class,ap,num_gt,num_detections");
        s.push_str(if coco { ",coco_ap\n" } else { "\n" });
        let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        for c in &self.classes {
            let _ = write!(s, "{},{},{},{}", c.class, fmt(c.ap), c.num_gt, c.num_detections);
            if coco {
                let _ = write!(s, ",{}", fmt(c.coco_ap));
            }
            s.push('\n');
        }
        s
    }
}

/// Scores detections against a dataset's annotations.
pub fn score_detections(
    detections: &[Vec<Detection>],
    dataset: &Dataset,
    iou_thresh: f64,
    mode: ApMode,
    coco_style: bool,
) -> Result<Metrics> {
    if detections.len() != dataset.len() {
        return Err(Error::Input(format!(
            "{} detection lists for {} images",
            detections.len(),
            dataset.len()
        )));
    }
    let objects: Vec<&[Object]> = dataset.samples.iter().map(|s| s.objects.as_slice()).collect();
    let mut classes = Vec::new();
    for (ci, name) in dataset.classes.iter().enumerate() {
        let (dets, gts) = class_inputs(detections, &objects, ci + 1);
        classes.push(ClassMetrics {
            class: name.clone(),
            ap: ap(&dets, &gts, iou_thresh, mode).map(|c| c.ap),
            num_gt: gts.iter().flatten().filter(|g| !g.difficult).count(),
            num_detections: dets.len(),
            coco_ap: coco_style.then(|| coco_style_ap(&dets, &gts, mode)).flatten(),
        });
    }
    let map = mean_ap(&classes.iter().map(|c| c.ap).collect::<Vec<_>>());
    let coco_map = coco_style
        .then(|| mean_ap(&classes.iter().map(|c| c.coco_ap).collect::<Vec<_>>()))
        .flatten();
    Ok(Metrics {
        iou_thresh,
        mode,
        num_images: dataset.len(),
        map,
        coco_map,
        classes,
    })
}

/// Detects on every image and scores the result.
pub fn evaluate<T: Scalar>(model: &Model<T>, dataset: &Dataset, mode: ApMode, coco_style: bool) -> Result<Metrics> {
    let dets = detect_dataset(model, dataset, DetectParams::default())?;
    score_detections(&dets, dataset, 0.5, mode, coco_style)
}

/// Dataset-level recall at each `n`, pooling ground truths over images (difficult excluded).
pub fn recall_curve(proposals: &[Vec<Proposal>], dataset: &Dataset, ns: &[usize], iou_thresh: f64) -> Vec<(usize, f64)> {
    let total: usize = dataset.samples.iter().map(|s| s.objects.iter().filter(|o| !o.difficult).count()).sum();
    ns.iter()
        .map(|&n| {
            if total == 0 {
                return (n, 1.0);
            }
            let hit: usize = proposals
                .iter()
                .zip(&dataset.samples)
                .map(|(ps, s)| {
                    let boxes: Vec<BBox<f32>> = ps.iter().take(n).map(|p| p.bbox).collect();
                    let gts: Vec<BBox<f32>> = s.objects.iter().filter(|o| !o.difficult).map(|o| o.bbox).collect();
                    covered(&boxes, &gts, iou_thresh)
                })
                .sum();
            (n, hit as f64 / total as f64)
        })
        .collect()
}

pub fn recall_csv(curve: &[(usize, f64)]) -> String {
    let mut s = String::from("n,recall\n");
    for (n, r) in curve {
        let _ = writeln!(s, "{n},{r:.6}");
    }
    s
}
