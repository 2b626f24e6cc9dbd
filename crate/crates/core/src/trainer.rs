//! Joint training loop: augmentation, multi-scale sampling, SGD with a step schedule,
//! logging and checkpoints.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::anchors::{AnchorSet, BBox};
use crate::assigner::{assign, gate, sample, GroundTruth};
use crate::data::{weights, Dataset, Image, Object};
use crate::error::{Error, Result};
use crate::inference::anchor_objectness;
use crate::loss::{total_loss, LossReport, LossWeights, Targets};
use crate::network::{normalize_image, validate_input_size, Model};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Sgd, Tensor};

/// Edge fractions of the random patch option.
pub const CROP_FRACTIONS: [f64; 6] = [0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
pub const CROP_ATTEMPTS: usize = 50;
/// Clipped boxes keeping less than this fraction of their area are dropped.
pub const MIN_KEPT_AREA: f32 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    /// `(iteration, lr)` drops, iterations strictly increasing; before the first entry `base_lr` applies.
    pub lr_schedule: Vec<(usize, f64)>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub total_iters: usize,
    pub o_p: f64,
    pub seed: u64,
    /// 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
    pub train_sizes: Vec<usize>,
    pub loss_weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            base_lr: 0.05,
            lr_schedule: vec![(1500, 0.005)],
            momentum: 0.9,
            weight_decay: 5e-4,
            total_iters: 2000,
            o_p: 0.03,
            seed: 0,
            checkpoint_every: 0,
            train_sizes: vec![128],
            loss_weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.base_lr > 0.0) || self.lr_schedule.iter().any(|&(_, lr)| !(lr > 0.0)) {
            return Err(Error::config("learning rates must be positive"));
        }
        if self.lr_schedule.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::config("lr_schedule iterations must be strictly increasing"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must be in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.o_p) {
            return Err(Error::config("o_p must be in [0, 1]"));
        }
        if self.train_sizes.is_empty() {
            return Err(Error::config("train_sizes must not be empty"));
        }
        for &s in &self.train_sizes {
            validate_input_size(s)?;
        }
        let w = self.loss_weights;
        if w.alpha < 0.0 || w.beta < 0.0 || w.gamma() < 0.0 {
            return Err(Error::config("loss weights must be non-negative and alpha + beta <= 1"));
        }
        Ok(())
    }

    /// Learning rate in effect at `iter`.
    pub fn lr_at(&self, iter: usize) -> f64 {
        self.lr_schedule
            .iter()
            .take_while(|&&(at, _)| at <= iter)
            .last()
            .map_or(self.base_lr, |&(_, lr)| lr)
    }
}

/// Which augmentation was applied.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AugmentKind {
    Original,
    Flip,
    /// Patch crop with the given edge fraction and top-left corner.
    Crop { fraction: f64, x0: usize, y0: usize },
    /// Crop chosen but no position found; the original was used.
    CropFallback,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Augmented {
    pub image: Image,
    pub objects: Vec<Object>,
    pub kind: AugmentKind,
}

/// Mirrors a box horizontally inside an image of width `width`.
pub fn flip_box(b: &BBox<f32>, width: f32) -> BBox<f32> {
    BBox::from_corners(width - b.right(), b.top(), width - b.left(), b.bottom())
}

/// Uniform choice among original, horizontal flip and patch crop (crop only when objects exist).
pub fn augment<R: Rng + ?Sized>(image: &Image, objects: &[Object], rng: &mut R) -> Augmented {
    let options = if objects.is_empty() { 2 } else { 3 };
    match rng.random_range(0..options) {
        0 => Augmented {
            image: image.clone(),
            objects: objects.to_vec(),
            kind: AugmentKind::Original,
        },
        1 => {
            let w = image.width as f32;
            Augmented {
                image: image.flip_horizontal(),
                objects: objects
                    .iter()
                    .map(|o| Object {
                        bbox: flip_box(&o.bbox, w),
                        ..*o
                    })
                    .collect(),
                kind: AugmentKind::Flip,
            }
        }
        _ => random_crop(image, objects, rng),
    }
}

fn random_crop<R: Rng + ?Sized>(image: &Image, objects: &[Object], rng: &mut R) -> Augmented {
    let fraction = *CROP_FRACTIONS.choose(rng).expect("non-empty");
    let cw = ((image.width as f64 * fraction).round() as usize).max(1);
    let ch = ((image.height as f64 * fraction).round() as usize).max(1);
    for _ in 0..CROP_ATTEMPTS {
        let x0 = rng.random_range(0..=image.width - cw);
        let y0 = rng.random_range(0..=image.height - ch);
        let patch = BBox::from_corners(x0 as f32, y0 as f32, (x0 + cw) as f32, (y0 + ch) as f32);
        if !objects.iter().any(|o| patch.contains_point(o.bbox.cx, o.bbox.cy)) {
            continue;
        }
        let kept = objects
            .iter()
            .filter(|o| patch.contains_point(o.bbox.cx, o.bbox.cy))
            .filter_map(|o| {
                let [l, t, r, b] = o.bbox.corners();
                let clipped = BBox::from_corners(
                    l.max(patch.left()) - x0 as f32,
                    t.max(patch.top()) - y0 as f32,
                    r.min(patch.right()) - x0 as f32,
                    b.min(patch.bottom()) - y0 as f32,
                );
                (clipped.is_valid() && clipped.area() >= MIN_KEPT_AREA * o.bbox.area()).then_some(Object {
                    bbox: clipped,
                    ..*o
                })
            })
            .collect();
        return Augmented {
            image: image.crop(x0, y0, cw, ch).expect("patch inside image"),
            objects: kept,
            kind: AugmentKind::Crop { fraction, x0, y0 },
        };
    }
    Augmented {
        image: image.clone(),
        objects: objects.to_vec(),
        kind: AugmentKind::CropFallback,
    }
}

/// Resizes an image to `size × size`, scaling its boxes.
pub fn resize_sample(image: &Image, objects: &[Object], size: usize) -> (Image, Vec<Object>) {
    if image.width == size && image.height == size {
        return (image.clone(), objects.to_vec());
    }
    let sx = size as f32 / image.width as f32;
    let sy = size as f32 / image.height as f32;
    let objs = objects
        .iter()
        .map(|o| {
            let [l, t, r, b] = o.bbox.corners();
            Object {
                bbox: BBox::from_corners(l * sx, t * sy, r * sx, b * sy),
                ..*o
            }
        })
        .collect();
    (image.resize(size, size), objs)
}

/// Per-iteration input size, uniform over `sizes`.
pub fn multiscale_sample<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<usize> {
    for &s in sizes {
        validate_input_size(s)?;
    }
    sizes
        .choose(rng)
        .copied()
        .ok_or_else(|| Error::config("train_sizes must not be empty"))
}

/// One training-log row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub iter: usize,
    pub report: LossReport,
    pub lr: f64,
    pub input_size: usize,
}

pub const LOG_HEADER: &str = "iter,L_obj,L_loc,L_cls,total,lr";

impl LogRow {
    /// CSV row; loss components are count-normalized.
    pub fn csv(&self) -> String {
        let [o, l, c] = self.report.normalized();
        format!("{},{:.6},{:.6},{:.6},{:.6},{}", self.iter, o, l, c, self.report.total, self.lr)
    }
}

/// Where training artifacts go.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub dir: PathBuf,
}

impl TrainOutput {
    pub fn checkpoint(&self, iter: usize) -> PathBuf {
        self.dir.join(format!("checkpoint_{iter:06}.ronw"))
    }

    pub fn final_weights(&self) -> PathBuf {
        self.dir.join("final.ronw")
    }

    pub fn log(&self) -> PathBuf {
        self.dir.join("train_log.csv")
    }
}

#[derive(Serialize)]
struct NanDump<'a> {
    iter: usize,
    input_size: usize,
    lr: f64,
    image_ids: &'a [String],
    message: String,
}

/// Trains `model` in place and returns the per-iteration log.
///
/// With `out` set, writes the initial checkpoint, periodic checkpoints, the final weights
/// and the CSV log. Any non-finite value aborts the run; the model is left as it was
/// before the failing step and (with `out`) the state is dumped next to the checkpoints.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    dataset: &Dataset,
    cfg: &TrainConfig,
    out: Option<&TrainOutput>,
) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let num_classes = model.config().num_classes;
    if let Some(o) = dataset.samples.iter().flat_map(|s| &s.objects).find(|o| o.class == 0 || o.class > num_classes) {
        return Err(Error::Input(format!(
            "object class {} outside 1..={num_classes}",
            o.class
        )));
    }
    let mut log_file = match out {
        Some(o) => {
            std::fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
            weights::save(&o.checkpoint(0), model)?;
            let path = o.log();
            let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity: Vec<Vec<T>> = model.params().iter().map(|p| vec![T::zero(); p.tensor.data().len()]).collect();
    let mut anchor_cache: BTreeMap<usize, AnchorSet<T>> = BTreeMap::new();
    let mut rows = Vec::with_capacity(cfg.total_iters);

    for iter in 0..cfg.total_iters {
        let lr = cfg.lr_at(iter);
        let size = multiscale_sample(&cfg.train_sizes, &mut rng)?;
        if let std::collections::btree_map::Entry::Vacant(e) = anchor_cache.entry(size) {
            e.insert(model.config().anchors::<T>(size)?);
        }
        let anchors = &anchor_cache[&size];

        let mut tensors = Vec::with_capacity(cfg.batch_size);
        let mut assignments = Vec::with_capacity(cfg.batch_size);
        let mut ids = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let s = &dataset.samples[rng.random_range(0..dataset.len())];
            let aug = augment(&s.image, &s.objects, &mut rng);
            let (img, objs) = resize_sample(&aug.image, &aug.objects, size);
            let gts: Vec<GroundTruth<T>> = objs
                .iter()
                .map(|o| GroundTruth {
                    class: o.class,
                    bbox: o.bbox.cast(),
                })
                .collect();
            assignments.push(assign(anchors.boxes(), &gts)?);
            tensors.push(img.to_tensor::<T>());
            ids.push(s.image_id.clone());
        }
        let images = normalize_image(&Tensor::stack(&tensors)?);

        let step = (|| -> Result<LossReport> {
            let mut g = Graph::new();
            let fwd = model.forward(&mut g, images)?;
            let targets = Targets {
                anchors,
                assignments: &assignments,
            };
            let labels = targets.labels();
            let mask = match anchor_objectness(&g, &fwd, anchors) {
                Some(p1) => gate(&p1, T::lit(cfg.o_p)),
                None => vec![true; labels.len()],
            };
            let sel = sample(&labels, &mask, &mut rng);
            let obj_sel = model.config().objectness.then_some(&sel.objectness);
            let tl = total_loss(&mut g, &fwd, &targets, obj_sel, &sel.detection, num_classes, cfg.loss_weights)?;
            if !tl.report.total.is_finite() {
                return Err(Error::Numeric(format!("loss is {}", tl.report.total)));
            }
            let Some(total) = tl.total else {
                return Ok(tl.report);
            };
            g.backward(total)?;
            let grads: Vec<Vec<T>> = fwd
                .params
                .iter()
                .map(|&v| g.grad(v).map_or_else(|| vec![T::zero(); g.value(v).data().len()], <[T]>::to_vec))
                .collect();
            if let Some(bad) = grads.iter().position(|gr| gr.iter().any(|x| !x.is_finite())) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for {}",
                    model.params()[bad].name
                )));
            }
            let sgd = Sgd {
                lr,
                momentum: cfg.momentum,
                weight_decay: cfg.weight_decay,
            };
            for ((p, gr), v) in model.params_mut().iter_mut().zip(&grads).zip(velocity.iter_mut()) {
                sgd.step(p.tensor.data_mut(), gr, v)?;
            }
            Ok(tl.report)
        })();

        let report = match step {
            Ok(r) => r,
            Err(e @ Error::Numeric(_)) => {
                if let Some(o) = out {
                    dump_state(o, model, iter, size, lr, &ids, &e)?;
                }
                return Err(Error::Numeric(format!("iteration {iter}: {e}")));
            }
            Err(e) => return Err(e),
        };
        let row = LogRow {
            iter,
            report,
            lr,
            input_size: size,
        };
        if let Some((f, path)) = log_file.as_mut() {
            writeln!(f, "{}", row.csv()).map_err(|e| Error::io(path.as_path(), e))?;
        }
        if iter % 100 == 0 {
            info!("iter {iter} size {size} lr {lr} loss {:.4}", report.total);
        } else {
            debug!("iter {iter} size {size} lr {lr} loss {:.4}", report.total);
        }
        rows.push(row);
        if let Some(o) = out {
            let done = iter + 1;
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.total_iters {
                weights::save(&o.checkpoint(done), model)?;
            }
        }
    }
    if let Some(o) = out {
        weights::save(&o.final_weights(), model)?;
    }
    Ok(rows)
}

fn dump_state<T: Scalar>(
    out: &TrainOutput,
    model: &Model<T>,
    iter: usize,
    input_size: usize,
    lr: f64,
    ids: &[String],
    err: &Error,
) -> Result<()> {
    weights::save(&out.dir.join(format!("nan_state_{iter:06}.ronw")), model)?;
    let dump = NanDump {
        iter,
        input_size,
        lr,
        image_ids: ids,
        message: err.to_string(),
    };
    let path = out.dir.join(format!("nan_state_{iter:06}.json"));
    let text = serde_json::to_string_pretty(&dump).expect("dump serializes");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Mean of `total` over a window of log rows.
pub fn mean_total(rows: &[LogRow]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    rows.iter().map(|r| r.report.total).sum::<f64>() / rows.len() as f64
}

/// Renders a full CSV log.
pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv());
    }
    s
}

/// Resolves a training output directory.
pub fn output(dir: &Path) -> TrainOutput {
    TrainOutput { dir: dir.to_path_buf() }
}
