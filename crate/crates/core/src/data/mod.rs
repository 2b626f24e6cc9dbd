//! Datasets, image and annotation I/O, and weight persistence.

pub mod image;
pub mod manifest;
pub mod ppm;
pub mod shapes;
pub mod voc;
pub mod weights;

pub use image::Image;

use crate::anchors::BBox;
use crate::assigner::GroundTruth;

/// One annotated object; `class` is in `1..=K`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Object {
    pub class: usize,
    pub bbox: BBox<f32>,
    /// VOC "difficult" flag; such objects are excluded from evaluation.
    pub difficult: bool,
}

/// An image with its annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image_id: String,
    pub image: Image,
    pub objects: Vec<Object>,
}

impl Sample {
    pub fn ground_truths(&self) -> Vec<GroundTruth<f32>> {
        self.objects
            .iter()
            .map(|o| GroundTruth {
                class: o.class,
                bbox: o.bbox,
            })
            .collect()
    }
}

/// Samples plus the class names (index 0 is class id 1).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}
