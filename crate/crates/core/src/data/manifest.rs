//! Dataset manifest: class list plus image / annotation paths relative to the manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ppm, voc, Dataset, Sample};
use crate::error::{Error, Result};

pub const FILE_NAME: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub image_id: String,
    pub image: String,
    pub annotation: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub classes: Vec<String>,
    pub items: Vec<ManifestItem>,
}

/// Resolves a dataset argument that may name the directory or the manifest itself.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(FILE_NAME)
    } else {
        path.to_path_buf()
    }
}

/// Writes PPM images, VOC annotations and the manifest under `dir`.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    let images = dir.join("images");
    let annotations = dir.join("annotations");
    for d in [&images, &annotations] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut items = Vec::with_capacity(dataset.len());
    for s in &dataset.samples {
        let image = format!("images/{}.ppm", s.image_id);
        let annotation = format!("annotations/{}.xml", s.image_id);
        ppm::write(&dir.join(&image), &s.image)?;
        let xml = voc::to_xml(&format!("{}.ppm", s.image_id), s.image.width, s.image.height, &s.objects, &dataset.classes)?;
        let apath = dir.join(&annotation);
        std::fs::write(&apath, xml).map_err(|e| Error::io(&apath, e))?;
        items.push(ManifestItem {
            image_id: s.image_id.clone(),
            image,
            annotation,
        });
    }
    let manifest = Manifest {
        classes: dataset.classes.clone(),
        items,
    };
    let mpath = dir.join(FILE_NAME);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))
}

/// Loads a dataset from a manifest file or a directory containing one.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mpath = manifest_path(path);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        source_name: mpath.display().to_string(),
        location: format!("line {} column {}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    let root = mpath.parent().unwrap_or(Path::new("."));
    let mut samples = Vec::with_capacity(manifest.items.len());
    for item in &manifest.items {
        let image = ppm::read(&root.join(&item.image))?;
        let ann = voc::read(&root.join(&item.annotation), &manifest.classes)?;
        samples.push(Sample {
            image_id: item.image_id.clone(),
            image,
            objects: ann.objects,
        });
    }
    Ok(Dataset {
        classes: manifest.classes,
        samples,
    })
}
