//! Default boxes over the four detection scales and the offset parameterization
//! used for bounding-box regression.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Aspect ratios (width / height) of the default boxes.
pub const RATIOS: [f64; 5] = [1.0 / 3.0, 0.5, 1.0, 2.0, 3.0];
/// Scales per location.
pub const SCALES_PER_LOCATION: usize = 2;
/// Default boxes per feature-map location.
pub const ANCHORS_PER_LOCATION: usize = SCALES_PER_LOCATION * RATIOS.len();
/// Feature-map strides of detection layers 4, 5, 6 and 7.
pub const STRIDES: [usize; 4] = [8, 16, 32, 64];
/// Bound applied to `t_w` / `t_h` before exponentiation.
pub const LOG_SIZE_CLAMP: f64 = 4.0;

/// Axis-aligned rectangle in image pixels, stored as center and extent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox<T> {
    pub cx: T,
    pub cy: T,
    pub w: T,
    pub h: T,
}

impl<T: Scalar> BBox<T> {
    pub fn from_center(cx: T, cy: T, w: T, h: T) -> Self {
        BBox { cx, cy, w, h }
    }

    /// Builds a box from left, top, right, bottom corners.
    pub fn from_corners(l: T, t: T, r: T, b: T) -> Self {
        let two = T::lit(2.0);
        BBox {
            cx: (l + r) / two,
            cy: (t + b) / two,
            w: r - l,
            h: b - t,
        }
    }

    pub fn left(&self) -> T {
        self.cx - self.w / T::lit(2.0)
    }

    pub fn top(&self) -> T {
        self.cy - self.h / T::lit(2.0)
    }

    pub fn right(&self) -> T {
        self.cx + self.w / T::lit(2.0)
    }

    pub fn bottom(&self) -> T {
        self.cy + self.h / T::lit(2.0)
    }

    /// `[l, t, r, b]`.
    pub fn corners(&self) -> [T; 4] {
        [self.left(), self.top(), self.right(), self.bottom()]
    }

    pub fn area(&self) -> T {
        self.w * self.h
    }

    pub fn is_valid(&self) -> bool {
        self.w > T::zero() && self.h > T::zero() && self.cx.is_finite() && self.cy.is_finite()
    }

    pub fn intersection(&self, other: &Self) -> T {
        let iw = self.right().min(other.right()) - self.left().max(other.left());
        let ih = self.bottom().min(other.bottom()) - self.top().max(other.top());
        iw.max(T::zero()) * ih.max(T::zero())
    }

    /// Jaccard overlap; 0 for disjoint or degenerate boxes.
    pub fn iou(&self, other: &Self) -> T {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= T::zero() {
            T::zero()
        } else {
            (inter / union).min(T::one()).max(T::zero())
        }
    }

    pub fn contains_point(&self, x: T, y: T) -> bool {
        x >= self.left() && x <= self.right() && y >= self.top() && y <= self.bottom()
    }

    /// Intersection with `[0, width] × [0, height]`; `None` if empty.
    pub fn clip(&self, width: T, height: T) -> Option<Self> {
        let l = self.left().max(T::zero());
        let t = self.top().max(T::zero());
        let r = self.right().min(width);
        let b = self.bottom().min(height);
        (r > l && b > t).then(|| BBox::from_corners(l, t, r, b))
    }

    pub fn cast<U: Scalar>(&self) -> BBox<U> {
        BBox {
            cx: U::lit(self.cx.to_f64_lossy()),
            cy: U::lit(self.cy.to_f64_lossy()),
            w: U::lit(self.w.to_f64_lossy()),
            h: U::lit(self.h.to_f64_lossy()),
        }
    }

    /// Regression target of `self` (ground truth) relative to `anchor`.
    pub fn encode(&self, anchor: &Self) -> Result<[T; 4]> {
        if !(self.w > T::zero() && self.h > T::zero()) {
            return Err(Error::Input(format!(
                "encode: ground-truth extent must be positive, got {}x{}",
                self.w, self.h
            )));
        }
        if !(anchor.w > T::zero() && anchor.h > T::zero()) {
            return Err(Error::Input("encode: anchor extent must be positive".into()));
        }
        Ok([
            (self.cx - anchor.cx) / anchor.w,
            (self.cy - anchor.cy) / anchor.h,
            (self.w / anchor.w).ln(),
            (self.h / anchor.h).ln(),
        ])
    }

    /// Applies regression offsets `t` to this anchor.
    pub fn decode(&self, t: [T; 4]) -> Self {
        let lim = T::lit(LOG_SIZE_CLAMP);
        let tw = t[2].max(-lim).min(lim);
        let th = t[3].max(-lim).min(lim);
        BBox {
            cx: self.cx + t[0] * self.w,
            cy: self.cy + t[1] * self.h,
            w: self.w * tw.exp(),
            h: self.h * th.exp(),
        }
    }
}

/// Identity of one default box within the multi-scale grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AnchorMeta {
    /// Detection layer index 0..4 (layers 4..7).
    pub scale: usize,
    pub y: usize,
    pub x: usize,
    /// Box index within the location, `scale_slot * 5 + ratio_slot`.
    pub a: usize,
}

/// One detection layer's grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaleGrid {
    pub scale: usize,
    pub stride: usize,
    pub h: usize,
    pub w: usize,
    /// First flat anchor index belonging to this layer.
    pub offset: usize,
    pub sizes: [f64; SCALES_PER_LOCATION],
}

impl ScaleGrid {
    pub fn len(&self) -> usize {
        self.h * self.w * ANCHORS_PER_LOCATION
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flat_index(&self, y: usize, x: usize, a: usize) -> usize {
        self.offset + (y * self.w + x) * ANCHORS_PER_LOCATION + a
    }
}

/// Box sizes of detection layer `k` (1-based): `{(2k−1)·s_min, 2k·s_min}`.
pub fn layer_sizes(k: usize, s_min: f64) -> [f64; 2] {
    [(2 * k - 1) as f64 * s_min, (2 * k) as f64 * s_min]
}

/// Width and height of a default box of side `size` at aspect ratio `ratio`.
pub fn box_extent(size: f64, ratio: f64) -> (f64, f64) {
    (size * ratio.sqrt(), size / ratio.sqrt())
}

/// All default boxes of the enabled detection layers, flattened in (layer, y, x, a) order.
#[derive(Clone, Debug)]
pub struct AnchorSet<T> {
    pub input_size: usize,
    pub s_min: f64,
    grids: Vec<ScaleGrid>,
    boxes: Vec<BBox<T>>,
    meta: Vec<AnchorMeta>,
}

impl<T: Scalar> AnchorSet<T> {
    /// Generates anchors for a square input. `layers` lists enabled detection layers (0..4).
    pub fn generate(input_size: usize, s_min: f64, layers: &[usize]) -> Result<Self> {
        if input_size == 0 || !input_size.is_multiple_of(64) {
            return Err(Error::config(format!(
                "input size {input_size} is not a positive multiple of 64"
            )));
        }
        if !(s_min > 0.0) {
            return Err(Error::config("s_min must be positive"));
        }
        let mut grids = Vec::new();
        let mut boxes = Vec::new();
        let mut meta = Vec::new();
        for (scale, &stride) in STRIDES.iter().enumerate() {
            if !layers.contains(&scale) {
                continue;
            }
            let side = input_size / stride;
            let grid = ScaleGrid {
                scale,
                stride,
                h: side,
                w: side,
                offset: boxes.len(),
                sizes: layer_sizes(scale + 1, s_min),
            };
            for y in 0..side {
                for x in 0..side {
                    let cx = (x as f64 + 0.5) * stride as f64;
                    let cy = (y as f64 + 0.5) * stride as f64;
                    for (si, &size) in grid.sizes.iter().enumerate() {
                        for (ri, &ratio) in RATIOS.iter().enumerate() {
                            let (w, h) = box_extent(size, ratio);
                            boxes.push(BBox::from_center(T::lit(cx), T::lit(cy), T::lit(w), T::lit(h)));
                            meta.push(AnchorMeta {
                                scale,
                                y,
                                x,
                                a: si * RATIOS.len() + ri,
                            });
                        }
                    }
                }
            }
            grids.push(grid);
        }
        Ok(AnchorSet {
            input_size,
            s_min,
            grids,
            boxes,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn boxes(&self) -> &[BBox<T>] {
        &self.boxes
    }

    pub fn meta(&self) -> &[AnchorMeta] {
        &self.meta
    }

    pub fn grids(&self) -> &[ScaleGrid] {
        &self.grids
    }

    pub fn grid(&self, scale: usize) -> Option<&ScaleGrid> {
        self.grids.iter().find(|g| g.scale == scale)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corner_and_center_views_agree() {
        let b = BBox::<f64>::from_corners(10.0, 20.0, 30.0, 60.0);
        assert_eq!((b.cx, b.cy, b.w, b.h), (20.0, 40.0, 20.0, 40.0));
        assert_eq!(b.corners(), [10.0, 20.0, 30.0, 60.0]);
    }

    #[test]
    fn encode_identity_and_unit_shift() {
        let a = BBox::<f64>::from_center(50.0, 50.0, 20.0, 10.0);
        assert_eq!(a.encode(&a).unwrap(), [0.0; 4]);
        let g = BBox::from_center(70.0, 50.0, 20.0, 10.0);
        assert_eq!(g.encode(&a).unwrap(), [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn encode_rejects_degenerate_ground_truth() {
        let a = BBox::<f64>::from_center(50.0, 50.0, 20.0, 10.0);
        let g = BBox::from_center(50.0, 50.0, 0.0, 10.0);
        assert!(matches!(g.encode(&a), Err(Error::Input(_))));
    }

    #[test]
    fn decode_zero_is_identity_and_log2_doubles() {
        let a = BBox::<f64>::from_center(5.0, 6.0, 7.0, 8.0);
        assert_eq!(a.decode([0.0; 4]), a);
        let d = a.decode([0.0, 0.0, 2f64.ln(), 0.0]);
        assert!((d.w - 14.0).abs() < 1e-12);
        assert_eq!(d.h, 8.0);
    }

    #[test]
    fn decode_clamps_log_extent() {
        let a = BBox::<f32>::from_center(0.0, 0.0, 1.0, 1.0);
        let d = a.decode([0.0, 0.0, 1000.0, -1000.0]);
        assert!((d.w - 4f32.exp()).abs() < 1e-3);
        assert!((d.h - (-4f32).exp()).abs() < 1e-6);
    }

    #[test]
    fn eq1_sizes_for_320_input() {
        let s_min = 32.0;
        let got: Vec<[f64; 2]> = (1..=4).map(|k| layer_sizes(k, s_min)).collect();
        assert_eq!(got, vec![[32.0, 64.0], [96.0, 128.0], [160.0, 192.0], [224.0, 256.0]]);
    }

    #[test]
    fn ratio_one_is_square() {
        assert_eq!(box_extent(32.0, 1.0), (32.0, 32.0));
    }

    #[test]
    fn generate_rejects_bad_size() {
        assert!(AnchorSet::<f32>::generate(100, 10.0, &[0, 1, 2, 3]).is_err());
    }

    #[test]
    fn flat_index_matches_storage_order() {
        let set = AnchorSet::<f64>::generate(128, 12.8, &[0, 1, 2, 3]).unwrap();
        for g in set.grids() {
            for y in 0..g.h {
                for x in 0..g.w {
                    for a in 0..ANCHORS_PER_LOCATION {
                        let m = set.meta()[g.flat_index(y, x, a)];
                        assert_eq!(m, AnchorMeta { scale: g.scale, y, x, a });
                    }
                }
            }
        }
    }

    #[test]
    fn disabled_layers_are_skipped() {
        let set = AnchorSet::<f64>::generate(128, 12.8, &[3]).unwrap();
        assert_eq!(set.len(), 4 * ANCHORS_PER_LOCATION);
        assert_eq!(set.grids()[0].offset, 0);
        assert!(set.grid(0).is_none());
    }
}
