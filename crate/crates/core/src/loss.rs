//! Multi-task objective: objectness, localization and objectness-conditioned
//! classification terms, each normalized by its own sample count.

use log::warn;
use serde::Serialize;

use crate::anchors::{AnchorMeta, AnchorSet};
use crate::assigner::{Assignment, BranchSelection, Label};
use crate::error::{Error, Result};
use crate::network::Forward;
use crate::scalar::Scalar;
use crate::tensor::{Graph, GroupCell, Var};

/// Weights of the objectness and localization terms; classification gets `1 − α − β`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0 / 3.0,
            beta: 1.0 / 3.0,
        }
    }
}

impl LossWeights {
    pub fn gamma(&self) -> f64 {
        1.0 - self.alpha - self.beta
    }
}

/// Raw (unnormalized) term values, their counts and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossReport {
    pub l_obj: f64,
    pub n_obj: usize,
    pub l_loc: f64,
    pub n_loc: usize,
    pub l_cls: f64,
    pub n_cls: usize,
    pub total: f64,
}

impl LossReport {
    pub fn normalized(&self) -> [f64; 3] {
        let norm = |l: f64, n: usize| if n == 0 { 0.0 } else { l / n as f64 };
        [norm(self.l_obj, self.n_obj), norm(self.l_loc, self.n_loc), norm(self.l_cls, self.n_cls)]
    }
}

/// `α·L_obj/N_obj + β·L_loc/N_loc + (1−α−β)·L_cls/N_cls`; terms with zero count contribute 0.
pub fn weighted_total(raw: [f64; 3], counts: [usize; 3], weights: LossWeights) -> f64 {
    let coeff = [weights.alpha, weights.beta, weights.gamma()];
    (0..3)
        .filter(|&i| counts[i] > 0)
        .map(|i| coeff[i] * raw[i] / counts[i] as f64)
        .sum()
}

/// Locates universe index `u` (image-major over the anchor set) on its head tensors.
fn locate(u: usize, per_image: usize, meta: &[AnchorMeta]) -> (usize, GroupCell) {
    let n = u / per_image;
    let m = meta[u % per_image];
    (
        m.scale,
        GroupCell {
            n,
            g: m.a,
            y: m.y,
            x: m.x,
        },
    )
}

/// Per-layer pick lists, keyed by the position of the layer in `Forward::layers`.
fn split_by_layer<P>(fwd: &Forward, items: impl Iterator<Item = (usize, GroupCell, P)>) -> Result<Vec<Vec<(GroupCell, P)>>> {
    let mut out: Vec<Vec<(GroupCell, P)>> = fwd.layers.iter().map(|_| Vec::new()).collect();
    for (layer, cell, p) in items {
        let slot = fwd
            .layers
            .iter()
            .position(|l| l.layer == layer)
            .ok_or_else(|| Error::Input(format!("anchor on layer {} which has no head", layer + 4)))?;
        out[slot].push((cell, p));
    }
    Ok(out)
}

fn sum_vars<T: Scalar>(g: &mut Graph<T>, vars: Vec<Var>) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for v in vars {
        acc = Some(match acc {
            Some(a) => g.add(a, v)?,
            None => v,
        });
    }
    Ok(acc)
}

/// Batch supervision: one assignment per image over a shared anchor set.
pub struct Targets<'a, T> {
    pub anchors: &'a AnchorSet<T>,
    pub assignments: &'a [Assignment<T>],
}

impl<T: Scalar> Targets<'_, T> {
    fn per_image(&self) -> usize {
        self.anchors.len()
    }

    /// Concatenated labels of all images.
    pub fn labels(&self) -> Vec<Label> {
        self.assignments.iter().flat_map(|a| a.labels.iter().copied()).collect()
    }

    fn class_of(&self, u: usize) -> usize {
        self.assignments[u / self.per_image()].classes[u % self.per_image()]
    }

    fn target_of(&self, u: usize) -> Option<[T; 4]> {
        self.assignments[u / self.per_image()].targets[u % self.per_image()]
    }
}

/// Summed objectness cross-entropy over the selection and its count.
pub fn objectness_loss<T: Scalar>(
    g: &mut Graph<T>,
    fwd: &Forward,
    targets: &Targets<'_, T>,
    selection: &BranchSelection,
) -> Result<Option<(Var, usize)>> {
    if selection.is_empty() {
        return Ok(None);
    }
    let meta = targets.anchors.meta();
    let per = targets.per_image();
    let items = selection
        .positives
        .iter()
        .map(|&u| (u, 1usize))
        .chain(selection.negatives.iter().map(|&u| (u, 0usize)))
        .map(|(u, label)| {
            let (layer, cell) = locate(u, per, meta);
            (layer, cell, label)
        });
    let by_layer = split_by_layer(fwd, items)?;
    let mut parts = Vec::new();
    for (slot, picks) in by_layer.iter().enumerate() {
        if picks.is_empty() {
            continue;
        }
        let probs = fwd.layers[slot]
            .obj_probs
            .ok_or_else(|| Error::Input("objectness loss requested without an objectness branch".into()))?;
        parts.push(g.cross_entropy(probs, 2, picks)?);
    }
    Ok(sum_vars(g, parts)?.map(|v| (v, selection.len())))
}

/// Summed smooth-L1 over the positives' offsets and the positive count.
pub fn localization_loss<T: Scalar>(
    g: &mut Graph<T>,
    fwd: &Forward,
    targets: &Targets<'_, T>,
    positives: &[usize],
) -> Result<Option<(Var, usize)>> {
    if positives.is_empty() {
        return Ok(None);
    }
    let meta = targets.anchors.meta();
    let per = targets.per_image();
    let mut items = Vec::with_capacity(positives.len());
    for &u in positives {
        let t = targets
            .target_of(u)
            .ok_or_else(|| Error::Input(format!("positive anchor {u} has no regression target")))?;
        let (layer, cell) = locate(u, per, meta);
        items.push((layer, cell, t));
    }
    let by_layer = split_by_layer(fwd, items.into_iter())?;
    let mut parts = Vec::new();
    for (slot, picks) in by_layer.iter().enumerate() {
        if !picks.is_empty() {
            parts.push(g.smooth_l1(fwd.layers[slot].loc, picks)?);
        }
    }
    Ok(sum_vars(g, parts)?.map(|v| (v, positives.len())))
}

/// Summed (K+1)-way cross-entropy over the detection selection; negatives are class 0.
pub fn classification_loss<T: Scalar>(
    g: &mut Graph<T>,
    fwd: &Forward,
    targets: &Targets<'_, T>,
    selection: &BranchSelection,
    num_classes: usize,
) -> Result<Option<(Var, usize)>> {
    if selection.is_empty() {
        return Ok(None);
    }
    let meta = targets.anchors.meta();
    let per = targets.per_image();
    let items = selection
        .positives
        .iter()
        .map(|&u| (u, targets.class_of(u)))
        .chain(selection.negatives.iter().map(|&u| (u, 0)))
        .map(|(u, class)| {
            let (layer, cell) = locate(u, per, meta);
            (layer, cell, class)
        });
    let by_layer = split_by_layer(fwd, items)?;
    let mut parts = Vec::new();
    for (slot, picks) in by_layer.iter().enumerate() {
        if !picks.is_empty() {
            parts.push(g.cross_entropy(fwd.layers[slot].cls_probs, num_classes + 1, picks)?);
        }
    }
    Ok(sum_vars(g, parts)?.map(|v| (v, selection.len())))
}

/// Recorded total loss and its report.
#[derive(Clone, Copy, Debug)]
pub struct TotalLoss {
    /// `None` when every term was dropped.
    pub total: Option<Var>,
    pub report: LossReport,
}

/// Records the weighted, count-normalized sum of the three terms.
///
/// `objectness_selection` is `None` when the objectness branch is disabled.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    fwd: &Forward,
    targets: &Targets<'_, T>,
    objectness_selection: Option<&BranchSelection>,
    detection_selection: &BranchSelection,
    num_classes: usize,
    weights: LossWeights,
) -> Result<TotalLoss> {
    let obj = match objectness_selection {
        Some(sel) => objectness_loss(g, fwd, targets, sel)?,
        None => None,
    };
    let loc = localization_loss(g, fwd, targets, &detection_selection.positives)?;
    let cls = classification_loss(g, fwd, targets, detection_selection, num_classes)?;

    let mut report = LossReport::default();
    let mut parts = Vec::new();
    let terms = [(obj, weights.alpha, "objectness"), (loc, weights.beta, "localization"), (cls, weights.gamma(), "classification")];
    for (i, (term, coeff, name)) in terms.into_iter().enumerate() {
        let Some((v, n)) = term else {
            if i > 0 || objectness_selection.is_some() {
                warn!("{name} term has no samples; dropped from the total");
            }
            continue;
        };
        let raw = g.value(v).item().to_f64_lossy();
        match i {
            0 => (report.l_obj, report.n_obj) = (raw, n),
            1 => (report.l_loc, report.n_loc) = (raw, n),
            _ => (report.l_cls, report.n_cls) = (raw, n),
        }
        parts.push(g.scale(v, T::lit(coeff / n as f64))?);
    }
    let total = sum_vars(g, parts)?;
    report.total = total.map_or(0.0, |v| g.value(v).item().to_f64_lossy());
    Ok(TotalLoss { total, report })
}

/// Finite-difference check of the full objective with respect to model parameters.
///
/// `include` selects which parameters (by name) are perturbed.
pub fn gradcheck_total_loss_filtered(
    seed: u64,
    coords: usize,
    include: impl Fn(&str) -> bool,
) -> Result<crate::gradcheck::GradCheckReport> {
    use crate::assigner::{assign, gate, sample, GroundTruth};
    use crate::gradcheck::{check, CheckInput};
    use crate::network::{Model, ModelConfig, TrunkInit};
    use crate::tensor::{Shape, Tensor};
    use crate::anchors::BBox;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    let cfg = ModelConfig {
        input_size: 64,
        num_classes: 2,
        backbone_channels: [4, 6, 6, 6],
        rf_channels: 6,
        s_min: None,
        detect_layers: vec![0, 1, 2, 3],
        objectness: true,
        init_std: 0.25,
        trunk_init: TrunkInit::Gaussian,
    };
    let model = Model::<f64>::build(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let images = Tensor::<f64>::uniform(Shape::new(2, 3, 64, 64), -0.5, 0.5, &mut rng);
    let anchors = cfg.anchors::<f64>(64)?;
    let gts = [
        vec![
            GroundTruth { class: 1, bbox: BBox::from_corners(4.0, 6.0, 20.0, 18.0) },
            GroundTruth { class: 2, bbox: BBox::from_corners(20.0, 10.0, 60.0, 56.0) },
        ],
        vec![GroundTruth { class: 2, bbox: BBox::from_corners(30.0, 30.0, 44.0, 50.0) }],
    ];
    let assignments = gts
        .iter()
        .map(|g| assign(anchors.boxes(), g))
        .collect::<Result<Vec<_>>>()?;
    let targets = Targets {
        anchors: &anchors,
        assignments: &assignments,
    };
    let labels = targets.labels();
    let selection = sample(&labels, &gate(&vec![1.0; labels.len()], 0.0), &mut rng);

    let inputs = model
        .params()
        .iter()
        .map(|p| {
            if include(&p.name) {
                CheckInput::var(p.tensor.clone())
            } else {
                CheckInput::constant(p.tensor.clone())
            }
        })
        .collect();
    check("loss", inputs, coords, seed, |g, vars| {
        let fwd = model.forward_with(g, vars.to_vec(), images.clone())?;
        let t = total_loss(
            g,
            &fwd,
            &targets,
            Some(&selection.objectness),
            &selection.detection,
            cfg.num_classes,
            LossWeights::default(),
        )?;
        t.total.ok_or_else(|| Error::Input("empty loss".into()))
    })
}

/// Finite-difference check of the full objective over all parameters.
pub fn gradcheck_total_loss(seed: u64, coords: usize) -> Result<crate::gradcheck::GradCheckReport> {
    gradcheck_total_loss_filtered(seed, coords, |_| true)
}
