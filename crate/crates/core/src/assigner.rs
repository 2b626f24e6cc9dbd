//! Ground-truth matching, objectness gating and positive/negative sampling.

use rand::seq::index::sample as sample_indices;
use rand::Rng;

use crate::anchors::BBox;
use crate::error::Result;
use crate::scalar::Scalar;

/// Anchors above this overlap with some ground truth become positive.
pub const POSITIVE_IOU: f64 = 0.5;
/// Anchors whose best overlap is below this become negative.
pub const NEGATIVE_IOU: f64 = 0.3;
/// Sampled negatives per positive.
pub const NEGATIVES_PER_POSITIVE: usize = 3;

/// Annotated object: class id in `1..=K` and its box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth<T> {
    pub class: usize,
    pub bbox: BBox<T>,
}

/// Supervision label of one anchor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    /// Matched to the ground truth with this index.
    Positive(usize),
    Negative,
    Ignore,
}

impl Label {
    pub fn is_positive(&self) -> bool {
        matches!(self, Label::Positive(_))
    }
}

/// Result of matching one image's anchors against its ground truths.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment<T> {
    pub labels: Vec<Label>,
    /// Class id (`1..=K`) of every anchor; 0 for non-positives.
    pub classes: Vec<usize>,
    /// Regression targets of positive anchors, `None` elsewhere.
    pub targets: Vec<Option<[T; 4]>>,
}

impl<T: Scalar> Assignment<T> {
    pub fn num_positive(&self) -> usize {
        self.labels.iter().filter(|l| l.is_positive()).count()
    }

    pub fn num_negative(&self) -> usize {
        self.labels.iter().filter(|l| **l == Label::Negative).count()
    }

    pub fn num_ignore(&self) -> usize {
        self.labels.iter().filter(|l| **l == Label::Ignore).count()
    }
}

/// Best anchor for each ground truth under the step-(i) rules.
///
/// Every ground truth first claims its highest-overlap anchor (lowest index on
/// ties). An anchor claimed more than once goes to the claimant with the higher
/// overlap, then the lower ground-truth index. Losers, ordered by their best
/// overlap (descending) then index, take their best anchor among those not yet
/// claimed.
pub fn forced_matches<T: Scalar>(anchors: &[BBox<T>], gts: &[GroundTruth<T>]) -> Vec<Option<usize>> {
    let best_of = |g: &GroundTruth<T>, taken: &[bool]| -> Option<(usize, T)> {
        let mut best: Option<(usize, T)> = None;
        for (i, a) in anchors.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let v = a.iou(&g.bbox);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        best
    };
    let none_taken = vec![false; anchors.len()];
    let first: Vec<Option<(usize, T)>> = gts.iter().map(|g| best_of(g, &none_taken)).collect();
    let mut result = vec![None; gts.len()];
    let mut taken = vec![false; anchors.len()];
    let mut losers = Vec::new();
    for (j, claim) in first.iter().enumerate() {
        let Some((a, v)) = *claim else { continue };
        let beaten = first.iter().enumerate().any(|(k, other)| {
            k != j && matches!(*other, Some((b, w)) if b == a && (w > v || (w == v && k < j)))
        });
        if beaten {
            losers.push(j);
        } else {
            result[j] = Some(a);
            taken[a] = true;
        }
    }
    losers.sort_by(|&p, &q| {
        let vp = first[p].map(|c| c.1).unwrap_or_else(T::zero);
        let vq = first[q].map(|c| c.1).unwrap_or_else(T::zero);
        vq.partial_cmp(&vp).unwrap_or(std::cmp::Ordering::Equal).then(p.cmp(&q))
    });
    for j in losers {
        if let Some((a, _)) = best_of(&gts[j], &taken) {
            result[j] = Some(a);
            taken[a] = true;
        }
    }
    result
}

/// Two-step matching: forced best anchor per ground truth, then overlap > 0.5;
/// best overlap < 0.3 is negative and everything else is ignored.
pub fn assign<T: Scalar>(anchors: &[BBox<T>], gts: &[GroundTruth<T>]) -> Result<Assignment<T>> {
    let n = anchors.len();
    let mut labels = vec![Label::Negative; n];
    let mut classes = vec![0; n];
    let mut targets = vec![None; n];
    if gts.is_empty() {
        return Ok(Assignment {
            labels,
            classes,
            targets,
        });
    }
    let pos = T::lit(POSITIVE_IOU);
    let neg = T::lit(NEGATIVE_IOU);
    for (i, a) in anchors.iter().enumerate() {
        let mut best = (0usize, T::neg_infinity());
        for (j, g) in gts.iter().enumerate() {
            let v = a.iou(&g.bbox);
            if v > best.1 {
                best = (j, v);
            }
        }
        labels[i] = if best.1 > pos {
            Label::Positive(best.0)
        } else if best.1 < neg {
            Label::Negative
        } else {
            Label::Ignore
        };
    }
    for (j, m) in forced_matches(anchors, gts).into_iter().enumerate() {
        if let Some(a) = m {
            labels[a] = Label::Positive(j);
        }
    }
    for (i, label) in labels.iter().enumerate() {
        if let Label::Positive(j) = *label {
            classes[i] = gts[j].class;
            targets[i] = Some(gts[j].bbox.encode(&anchors[i])?);
        }
    }
    Ok(Assignment {
        labels,
        classes,
        targets,
    })
}

/// `mask[i] = p[i] ≥ o_p`.
pub fn gate<T: Scalar>(objectness: &[T], o_p: T) -> Vec<bool> {
    objectness.iter().map(|&p| p >= o_p).collect()
}

/// Indices selected for one loss branch.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BranchSelection {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl BranchSelection {
    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Samples for the objectness and detection branches.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SampleSelection {
    pub objectness: BranchSelection,
    /// Restricted to gate-passing negatives; positives always included.
    pub detection: BranchSelection,
}

impl SampleSelection {
    pub fn is_empty(&self) -> bool {
        self.objectness.is_empty() && self.detection.is_empty()
    }
}

fn draw<R: Rng + ?Sized>(pool: Vec<usize>, quota: usize, rng: &mut R) -> Vec<usize> {
    if pool.len() <= quota {
        return pool;
    }
    let mut picked: Vec<usize> = sample_indices(rng, pool.len(), quota)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    picked.sort_unstable();
    picked
}

/// All positives plus up to three uniformly drawn negatives per positive for
/// each branch; the detection branch only draws gate-passing negatives.
pub fn sample<R: Rng + ?Sized>(labels: &[Label], gate_mask: &[bool], rng: &mut R) -> SampleSelection {
    debug_assert_eq!(labels.len(), gate_mask.len());
    let positives: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_positive()).collect();
    let negatives: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == Label::Negative).collect();
    let quota = NEGATIVES_PER_POSITIVE * positives.len();
    let gated: Vec<usize> = negatives.iter().copied().filter(|&i| gate_mask[i]).collect();
    let obj_neg = draw(negatives, quota, rng);
    let det_neg = draw(gated, quota, rng);
    SampleSelection {
        objectness: BranchSelection {
            positives: positives.clone(),
            negatives: obj_neg,
        },
        detection: BranchSelection {
            positives,
            negatives: det_neg,
        },
    }
}
