//! Synthetic shapes: circles, squares and triangles on a flat gray background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Image, Object, Sample};
use crate::anchors::BBox;
use crate::error::{Error, Result};

pub const CLASS_NAMES: [&str; 3] = ["circle", "square", "triangle"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    /// Class id in `1..=3`.
    pub fn class_id(self) -> usize {
        match self {
            ShapeKind::Circle => 1,
            ShapeKind::Square => 2,
            ShapeKind::Triangle => 3,
        }
    }
}

/// Generator settings.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapesConfig {
    pub image_size: usize,
    /// Smallest and largest object side in pixels.
    pub size_range: (f64, f64),
    pub max_objects: usize,
    pub kinds: Vec<ShapeKind>,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        ShapesConfig {
            image_size: 128,
            size_range: (8.0, 0.8 * 128.0),
            max_objects: 4,
            kinds: ShapeKind::ALL.to_vec(),
        }
    }
}

impl ShapesConfig {
    pub fn for_size(image_size: usize) -> Self {
        ShapesConfig {
            image_size,
            size_range: (8.0, 0.8 * image_size as f64),
            ..ShapesConfig::default()
        }
    }
}

fn random_color<R: Rng>(rng: &mut R, background: u8) -> [u8; 3] {
    loop {
        let c = [rng.random::<u8>(), rng.random::<u8>(), rng.random::<u8>()];
        let contrast: f64 = c.iter().map(|&v| (v as f64 - background as f64).abs()).sum::<f64>() / 3.0;
        if contrast >= 80.0 {
            return c;
        }
    }
}

fn covers(kind: ShapeKind, px: f64, py: f64, x0: f64, y0: f64, w: f64, h: f64) -> bool {
    match kind {
        ShapeKind::Square => px >= x0 && px < x0 + w && py >= y0 && py < y0 + h,
        ShapeKind::Circle => {
            let (cx, cy, r) = (x0 + w / 2.0, y0 + h / 2.0, w / 2.0);
            (px - cx).powi(2) + (py - cy).powi(2) <= r * r
        }
        ShapeKind::Triangle => {
            // apex at top center, base along the bottom edge
            if py < y0 || py >= y0 + h {
                return false;
            }
            let half = (py - y0) / h * w / 2.0;
            let cx = x0 + w / 2.0;
            (px - cx).abs() <= half
        }
    }
}

/// Tight pixel extent actually painted for the shape: `(l, t, r, b)`, half-open.
fn paint(image: &mut Image, kind: ShapeKind, x0: usize, y0: usize, w: usize, h: usize, color: [u8; 3]) -> Option<(usize, usize, usize, usize)> {
    let mut ext: Option<(usize, usize, usize, usize)> = None;
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            if covers(kind, x as f64 + 0.5, y as f64 + 0.5, x0 as f64, y0 as f64, w as f64, h as f64) {
                for (c, &v) in color.iter().enumerate() {
                    image.set(c, y, x, v as f32 / 255.0);
                }
                ext = Some(match ext {
                    None => (x, y, x + 1, y + 1),
                    Some((l, t, r, b)) => (l.min(x), t.min(y), r.max(x + 1), b.max(y + 1)),
                });
            }
        }
    }
    ext
}

/// Generates one image with 1..=`max_objects` non-overlapping shapes.
pub fn generate_sample<R: Rng>(cfg: &ShapesConfig, image_id: String, rng: &mut R) -> Sample {
    let s = cfg.image_size;
    let bg: u8 = rng.random_range(90..=166);
    let mut image = Image::filled(s, s, [bg as f32 / 255.0; 3]);
    let count = rng.random_range(1..=cfg.max_objects.max(1));
    let (lo, hi) = cfg.size_range;
    let hi = hi.min(s as f64);
    let mut placed: Vec<(usize, usize, usize, usize)> = Vec::new();
    let mut objects = Vec::new();
    for _ in 0..count {
        for _attempt in 0..50 {
            let kind = cfg.kinds[rng.random_range(0..cfg.kinds.len())];
            let side = rng.random_range(lo..=hi).round().max(lo.ceil()) as usize;
            let (w, h) = match kind {
                ShapeKind::Triangle => {
                    let aspect: f64 = rng.random_range(0.8..1.25);
                    let h = ((side as f64) * aspect).round().clamp(lo.ceil(), s as f64) as usize;
                    (side.min(s), h)
                }
                _ => (side.min(s), side.min(s)),
            };
            let x0 = rng.random_range(0..=s - w);
            let y0 = rng.random_range(0..=s - h);
            let overlaps = placed
                .iter()
                .any(|&(l, t, r, b)| x0 < r + 1 && l < x0 + w + 1 && y0 < b + 1 && t < y0 + h + 1);
            if overlaps {
                continue;
            }
            let color = random_color(rng, bg);
            if let Some((l, t, r, b)) = paint(&mut image, kind, x0, y0, w, h, color) {
                placed.push((x0, y0, x0 + w, y0 + h));
                objects.push(Object {
                    class: kind.class_id(),
                    bbox: BBox::from_corners(l as f32, t as f32, r as f32, b as f32),
                    difficult: false,
                });
            }
            break;
        }
    }
    Sample {
        image_id,
        image,
        objects,
    }
}

/// `n` images, deterministic in `seed`. Images that end up empty are regenerated.
pub fn generate(n: usize, cfg: &ShapesConfig, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Input("dataset size must be at least 1".into()));
    }
    if cfg.kinds.is_empty() || !(cfg.size_range.0 >= 4.0) || cfg.size_range.0 > cfg.size_range.1 {
        return Err(Error::config("invalid shapes generator configuration"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        loop {
            let s = generate_sample(cfg, format!("{i:06}"), &mut rng);
            if !s.objects.is_empty() {
                samples.push(s);
                break;
            }
        }
    }
    Ok(Dataset {
        classes: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let cfg = ShapesConfig::default();
        let a = generate(5, &cfg, 9).unwrap();
        let b = generate(5, &cfg, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate(5, &cfg, 10).unwrap());
    }

    #[test]
    fn boxes_are_in_bounds_with_minimum_area() {
        let cfg = ShapesConfig::default();
        let d = generate(200, &cfg, 1).unwrap();
        for s in &d.samples {
            assert!(!s.objects.is_empty() && s.objects.len() <= 4);
            for o in &s.objects {
                let [l, t, r, b] = o.bbox.corners();
                assert!(l >= 0.0 && t >= 0.0 && r <= 128.0 && b <= 128.0);
                assert!(o.bbox.area() >= 16.0, "{:?}", o.bbox);
            }
        }
    }

    #[test]
    fn zero_images_is_rejected() {
        assert!(generate(0, &ShapesConfig::default(), 0).is_err());
    }
}
