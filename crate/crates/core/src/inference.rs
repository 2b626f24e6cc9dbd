//! Scoring, box decoding, non-maximum suppression, detection and proposals.

use serde::Serialize;

use crate::anchors::{AnchorSet, BBox};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::network::{normalize_image, Forward, Model};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

pub const CONF_THRESH: f64 = 0.01;
pub const NMS_THRESH: f64 = 0.45;
pub const TOP_K: usize = 200;
pub const PROPOSAL_NMS_THRESH: f64 = 0.7;

/// Head outputs gathered into the anchor order of an [`AnchorSet`], image-major.
#[derive(Clone, Debug)]
pub struct AnchorOutputs<T> {
    pub num_images: usize,
    pub per_image: usize,
    pub num_classes: usize,
    /// `p1` per anchor; `None` without an objectness branch.
    pub objectness: Option<Vec<T>>,
    /// `K+1` class probabilities per anchor, background first.
    pub class_probs: Vec<T>,
    pub offsets: Vec<[T; 4]>,
}

impl<T: Scalar> AnchorOutputs<T> {
    pub fn class_row(&self, u: usize) -> &[T] {
        let k = self.num_classes + 1;
        &self.class_probs[u * k..(u + 1) * k]
    }
}

/// Objectness `p1` for every anchor of every image, in universe order.
pub fn anchor_objectness<T: Scalar>(g: &Graph<T>, fwd: &Forward, anchors: &AnchorSet<T>) -> Option<Vec<T>> {
    let per = anchors.len();
    let mut out: Option<Vec<T>> = None;
    for lo in &fwd.layers {
        let probs = g.value(lo.obj_probs?);
        let n_img = probs.shape().n;
        let buf = out.get_or_insert_with(|| vec![T::zero(); n_img * per]);
        let grid = anchors.grid(lo.layer).expect("anchor grid for every head");
        for n in 0..n_img {
            for y in 0..grid.h {
                for x in 0..grid.w {
                    for a in 0..crate::anchors::ANCHORS_PER_LOCATION {
                        buf[n * per + grid.flat_index(y, x, a)] = probs.at(n, 2 * a + 1, y, x);
                    }
                }
            }
        }
    }
    out
}

/// Reads every head output into anchor order.
pub fn read_outputs<T: Scalar>(
    g: &Graph<T>,
    fwd: &Forward,
    anchors: &AnchorSet<T>,
    num_classes: usize,
) -> AnchorOutputs<T> {
    let per = anchors.len();
    let k = num_classes + 1;
    let n_img = g.shape(fwd.layers[0].cls_probs).n;
    let mut class_probs = vec![T::zero(); n_img * per * k];
    let mut offsets = vec![[T::zero(); 4]; n_img * per];
    for lo in &fwd.layers {
        let cls = g.value(lo.cls_probs);
        let loc = g.value(lo.loc);
        let grid = anchors.grid(lo.layer).expect("anchor grid for every head");
        for n in 0..n_img {
            for y in 0..grid.h {
                for x in 0..grid.w {
                    for a in 0..crate::anchors::ANCHORS_PER_LOCATION {
                        let u = n * per + grid.flat_index(y, x, a);
                        for c in 0..k {
                            class_probs[u * k + c] = cls.at(n, a * k + c, y, x);
                        }
                        offsets[u] = std::array::from_fn(|j| loc.at(n, a * 4 + j, y, x));
                    }
                }
            }
        }
    }
    AnchorOutputs {
        num_images: n_img,
        per_image: per,
        num_classes,
        objectness: anchor_objectness(g, fwd, anchors),
        class_probs,
        offsets,
    }
}

/// Final per-class scores `p_obj · p_cls|obj` for classes `1..=K`; background dropped.
///
/// Without an objectness prior (`p_obj = None`) the class probabilities are returned as-is.
pub fn score<T: Scalar>(p_obj: Option<T>, cls_probs: &[T]) -> Vec<T> {
    let o = p_obj.unwrap_or_else(T::one);
    cls_probs[1..].iter().map(|&p| o * p).collect()
}

/// Greedy NMS: descending score, ties by lower index; a box is dropped when its
/// IoU with any kept box exceeds `iou_thresh`. Returns kept indices in score order.
pub fn nms<T: Scalar>(boxes: &[BBox<T>], scores: &[T], iou_thresh: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "nms: boxes and scores differ in length");
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let thresh = T::lit(iou_thresh);
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| boxes[k].iou(&boxes[i]) <= thresh) {
            keep.push(i);
        }
    }
    keep
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectParams {
    pub conf_thresh: f64,
    pub nms_thresh: f64,
    pub top_k: usize,
}

impl Default for DetectParams {
    fn default() -> Self {
        DetectParams {
            conf_thresh: CONF_THRESH,
            nms_thresh: NMS_THRESH,
            top_k: TOP_K,
        }
    }
}

/// One final detection in image pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    /// In `1..=K`.
    pub class: usize,
    pub score: f32,
    pub bbox: BBox<f32>,
}

/// A class-agnostic proposal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub objectness: f32,
    pub bbox: BBox<f32>,
}

/// Runs the network on images already resized to `input_size` (values in `[0, 1]`).
pub fn run<T: Scalar>(model: &Model<T>, batch: &[Image]) -> Result<(AnchorOutputs<T>, AnchorSet<T>)> {
    let size = model.config().input_size;
    let tensors = batch
        .iter()
        .map(|im| {
            if im.width != size || im.height != size {
                Err(Error::dim(format!(
                    "image is {}x{}, network input is {size}x{size}",
                    im.width, im.height
                )))
            } else {
                Ok(im.to_tensor::<T>())
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let images = normalize_image(&Tensor::stack(&tensors)?);
    let anchors = model.config().anchors::<T>(size)?;
    let mut g = Graph::new();
    let fwd = model.forward(&mut g, images)?;
    Ok((read_outputs(&g, &fwd, &anchors, model.config().num_classes), anchors))
}

fn decoded<T: Scalar>(anchors: &AnchorSet<T>, outputs: &AnchorOutputs<T>, u: usize, scale: (f64, f64)) -> Option<BBox<f32>> {
    let anchor = anchors.boxes()[u % outputs.per_image];
    let size = T::lit(anchors.input_size as f64);
    let b = anchor.decode(outputs.offsets[u]).clip(size, size)?;
    let [l, t, r, bt] = b.corners().map(|v| v.to_f64_lossy());
    let (sx, sy) = scale;
    Some(BBox::from_corners((l * sx) as f32, (t * sy) as f32, (r * sx) as f32, (bt * sy) as f32))
}

/// Detections of image `n` of a batch, mapped back to a `width × height` image.
pub fn detections_from<T: Scalar>(
    outputs: &AnchorOutputs<T>,
    anchors: &AnchorSet<T>,
    n: usize,
    width: usize,
    height: usize,
    params: DetectParams,
) -> Vec<Detection> {
    let per = outputs.per_image;
    let scale = (
        width as f64 / anchors.input_size as f64,
        height as f64 / anchors.input_size as f64,
    );
    let mut per_class: Vec<Vec<Detection>> = vec![Vec::new(); outputs.num_classes];
    for i in 0..per {
        let u = n * per + i;
        let p_obj = outputs.objectness.as_ref().map(|o| o[u]);
        let scores = score(p_obj, outputs.class_row(u));
        let mut bbox = None;
        for (c, s) in scores.into_iter().enumerate() {
            let s = s.to_f64_lossy();
            if s < params.conf_thresh {
                continue;
            }
            if bbox.is_none() {
                bbox = Some(decoded(anchors, outputs, u, scale));
            }
            if let Some(Some(b)) = bbox {
                per_class[c].push(Detection {
                    class: c + 1,
                    score: s as f32,
                    bbox: b,
                });
            }
        }
    }
    let mut all = Vec::new();
    for dets in per_class {
        let boxes: Vec<BBox<f32>> = dets.iter().map(|d| d.bbox).collect();
        let scores: Vec<f32> = dets.iter().map(|d| d.score).collect();
        all.extend(nms(&boxes, &scores, params.nms_thresh).into_iter().map(|i| dets[i]));
    }
    // stable: equal scores keep class order
    all.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
    all.truncate(params.top_k);
    all
}

/// Top-`n` class-agnostic proposals of image `idx`, ranked by objectness.
pub fn proposals_from<T: Scalar>(
    outputs: &AnchorOutputs<T>,
    anchors: &AnchorSet<T>,
    idx: usize,
    width: usize,
    height: usize,
    n: usize,
) -> Result<Vec<Proposal>> {
    let obj = outputs
        .objectness
        .as_ref()
        .ok_or_else(|| Error::Unsupported("proposals need the objectness branch".into()))?;
    if n == 0 {
        return Ok(Vec::new());
    }
    let per = outputs.per_image;
    let scale = (
        width as f64 / anchors.input_size as f64,
        height as f64 / anchors.input_size as f64,
    );
    let mut cands: Vec<Proposal> = Vec::new();
    for i in 0..per {
        let u = idx * per + i;
        if let Some(b) = decoded(anchors, outputs, u, scale) {
            cands.push(Proposal {
                objectness: obj[u].to_f64_lossy() as f32,
                bbox: b,
            });
        }
    }
    let boxes: Vec<BBox<f32>> = cands.iter().map(|p| p.bbox).collect();
    let scores: Vec<f32> = cands.iter().map(|p| p.objectness).collect();
    let keep = nms(&boxes, &scores, PROPOSAL_NMS_THRESH);
    Ok(keep.into_iter().take(n).map(|i| cands[i]).collect())
}

pub fn prepare(model_size: usize, image: &Image) -> Image {
    if image.width == model_size && image.height == model_size {
        image.clone()
    } else {
        image.resize(model_size, model_size)
    }
}

/// Full pipeline for one image of any size.
pub fn detect<T: Scalar>(model: &Model<T>, image: &Image, params: DetectParams) -> Result<Vec<Detection>> {
    let size = model.config().input_size;
    let (outputs, anchors) = run(model, &[prepare(size, image)])?;
    ensure_finite_outputs(&outputs)?;
    Ok(detections_from(&outputs, &anchors, 0, image.width, image.height, params))
}

/// Top-`n` proposals for one image of any size.
pub fn proposals<T: Scalar>(model: &Model<T>, image: &Image, n: usize) -> Result<Vec<Proposal>> {
    let size = model.config().input_size;
    let (outputs, anchors) = run(model, &[prepare(size, image)])?;
    ensure_finite_outputs(&outputs)?;
    proposals_from(&outputs, &anchors, 0, image.width, image.height, n)
}

fn ensure_finite_outputs<T: Scalar>(o: &AnchorOutputs<T>) -> Result<()> {
    let obj_ok = o.objectness.as_ref().is_none_or(|v| v.iter().all(|x| x.is_finite()));
    if !obj_ok || !o.class_probs.iter().all(|x| x.is_finite()) || !o.offsets.iter().flatten().all(|x| x.is_finite()) {
        return Err(Error::Numeric("network produced non-finite outputs; weights are corrupt".into()));
    }
    Ok(())
}

#[derive(Serialize)]
struct DetectionRecord<'a> {
    image_id: &'a str,
    class: usize,
    score: f32,
    #[serde(rename = "box")]
    bbox: [f32; 4],
}

/// One JSON object per line: `{image_id, class, score, box: [l, t, r, b]}`; `class` is the id in `1..=K`.
pub fn to_json_lines(image_id: &str, detections: &[Detection]) -> String {
    let mut out = String::new();
    for d in detections {
        let rec = DetectionRecord {
            image_id,
            class: d.class,
            score: d.score,
            bbox: d.bbox.corners(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("detection serializes"));
        out.push('\n');
    }
    out
}
