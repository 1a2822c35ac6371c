//! Canonical single-file JSON dataset schema (COCO-like field names, corner
//! bbox convention):
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "categories": [{"id": 0, "name": "red-square"}],
//!   "images": [{"id": 0, "width": 64, "height": 64,
//!               "file_name": null, "recipe": {...}}],
//!   "annotations": [{"id": 0, "image_id": 0, "category_id": 0,
//!                    "bbox": [x1, y1, x2, y2]}]
//! }
//! ```
//!
//! `bbox` is `[x1, y1, x2, y2]` in pixels. Synthetic images carry an inline
//! render recipe; external images carry a `file_name` relative path instead.

use super::{AnnotatedImage, Category, Dataset, RenderRecipe};
use crate::error::{Error, Result};
use crate::geom::{BBox, Detection};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Serialize, Deserialize)]
struct FileDataset {
    schema_version: u32,
    categories: Vec<Category>,
    images: Vec<FileImage>,
    annotations: Vec<FileAnnotation>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FileImage {
    id: u64,
    width: usize,
    height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    file_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    recipe: Option<RenderRecipe>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FileAnnotation {
    id: u64,
    image_id: u64,
    category_id: usize,
    bbox: [f64; 4],
}

fn to_file(ds: &Dataset) -> FileDataset {
    let mut annotations = Vec::new();
    let mut next = 0u64;
    for img in &ds.images {
        for d in &img.gt {
            annotations.push(FileAnnotation {
                id: next,
                image_id: img.id,
                category_id: d.class_id,
                bbox: [d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2],
            });
            next += 1;
        }
    }
    FileDataset {
        schema_version: 1,
        categories: ds.categories.clone(),
        images: ds
            .images
            .iter()
            .map(|i| FileImage {
                id: i.id,
                width: i.width,
                height: i.height,
                file_name: i.file_name.clone(),
                recipe: i.recipe.clone(),
            })
            .collect(),
        annotations,
    }
}

fn from_file(fd: FileDataset) -> Result<Dataset> {
    if fd.schema_version != 1 {
        return Err(Error::data(format!(
            "unsupported schema_version {}",
            fd.schema_version
        )));
    }
    let mut images: Vec<AnnotatedImage> = fd
        .images
        .into_iter()
        .map(|i| AnnotatedImage {
            id: i.id,
            width: i.width,
            height: i.height,
            recipe: i.recipe,
            file_name: i.file_name,
            gt: Vec::new(),
        })
        .collect();
    let index: std::collections::BTreeMap<u64, usize> = images
        .iter()
        .enumerate()
        .map(|(k, i)| (i.id, k))
        .collect();
    for ann in fd.annotations {
        let slot = index.get(&ann.image_id).ok_or_else(|| {
            Error::data(format!(
                "annotation {} references unknown image {}",
                ann.id, ann.image_id
            ))
        })?;
        let [x1, y1, x2, y2] = ann.bbox;
        let bbox = BBox::new(x1, y1, x2, y2).map_err(|e| {
            Error::data(format!(
                "annotation {} of image {}: {e}",
                ann.id, ann.image_id
            ))
        })?;
        images[*slot].gt.push(Detection {
            bbox,
            class_id: ann.category_id,
            score: 1.0,
        });
    }
    let ds = Dataset {
        categories: fd.categories,
        images,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    let fd: FileDataset = serde_json::from_str(&text)?;
    from_file(fd)
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let fd = to_file(ds);
    let text = serde_json::to_string_pretty(&fd)?;
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};

    #[test]
    fn minimal_file_loads() {
        let json = r#"{
            "schema_version": 1,
            "categories": [{"id": 0, "name": "thing"}],
            "images": [{"id": 5, "width": 32, "height": 32}],
            "annotations": [{"id": 0, "image_id": 5, "category_id": 0,
                             "bbox": [1.0, 2.0, 10.0, 12.0]}]
        }"#;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mini.json");
        std::fs::write(&p, json).unwrap();
        let ds = load_dataset(&p).unwrap();
        assert_eq!(ds.images.len(), 1);
        assert_eq!(ds.images[0].gt.len(), 1);
        assert_eq!(ds.images[0].gt[0].class_id, 0);
    }

    #[test]
    fn degenerate_box_names_the_annotation() {
        let json = r#"{
            "schema_version": 1,
            "categories": [{"id": 0, "name": "thing"}],
            "images": [{"id": 5, "width": 32, "height": 32}],
            "annotations": [{"id": 3, "image_id": 5, "category_id": 0,
                             "bbox": [10.0, 2.0, 1.0, 12.0]}]
        }"#;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.json");
        std::fs::write(&p, json).unwrap();
        let err = load_dataset(&p).unwrap_err().to_string();
        assert!(err.contains("annotation 3"), "error was: {err}");
        assert!(err.contains("image 5"), "error was: {err}");
    }

    #[test]
    fn roundtrip_preserves_dataset() {
        let ds = generate_synthetic(&SyntheticConfig::shapes_default(9), 12).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ds.json");
        save_dataset(&ds, &p).unwrap();
        let back = load_dataset(&p).unwrap();
        assert_eq!(ds, back);
        // exporting again yields identical bytes
        let p2 = dir.path().join("ds2.json");
        save_dataset(&back, &p2).unwrap();
        assert_eq!(
            std::fs::read(&p).unwrap(),
            std::fs::read(&p2).unwrap()
        );
    }

    #[test]
    fn unknown_image_reference_fails() {
        let json = r#"{
            "schema_version": 1,
            "categories": [{"id": 0, "name": "thing"}],
            "images": [{"id": 5, "width": 32, "height": 32}],
            "annotations": [{"id": 0, "image_id": 6, "category_id": 0,
                             "bbox": [1.0, 2.0, 3.0, 4.0]}]
        }"#;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ref.json");
        std::fs::write(&p, json).unwrap();
        assert!(load_dataset(&p).is_err());
    }
}
