//! Datasets: synthetic shape generation, annotation ingestion, incremental
//! splits, and the co-occurrence auditor.

mod schema;
mod splits;
mod synth;

pub use schema::{load_dataset, save_dataset};
pub use splits::{audit_cooccurrence, build_incremental_splits, CooccurrenceAudit, SideAudit};
pub use synth::{
    default_categories, generate_synthetic, render_recipe, PlacedObject, RenderRecipe, Shape,
    ShapeCategory, SyntheticConfig,
};

use crate::error::{Error, Result};
use crate::geom::Detection;
use crate::image::Image;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: usize,
    pub name: String,
}

/// One dataset image: pixels come either from a synthetic render recipe or an
/// external file referenced by relative path.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub id: u64,
    pub width: usize,
    pub height: usize,
    pub recipe: Option<RenderRecipe>,
    pub file_name: Option<String>,
    /// Ground truth, score fixed at 1.0.
    pub gt: Vec<Detection>,
}

impl AnnotatedImage {
    /// Materialize pixels. Only recipe-backed images can be rendered; images
    /// referencing external files are metadata-only in this crate.
    pub fn render(&self) -> Result<Image> {
        match &self.recipe {
            Some(r) => Ok(render_recipe(r, self.width, self.height)),
            None => Err(Error::data(format!(
                "image {} has no render recipe (external pixels are not loaded)",
                self.id
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub categories: Vec<Category>,
    pub images: Vec<AnnotatedImage>,
}

impl Dataset {
    pub fn category_ids(&self) -> Vec<usize> {
        self.categories.iter().map(|c| c.id).collect()
    }

    pub fn category_name(&self, id: usize) -> Option<&str> {
        self.categories
            .iter()
            .find(|c| c.id == id)
            .map(|c| c.name.as_str())
    }

    pub fn total_objects(&self) -> usize {
        self.images.iter().map(|i| i.gt.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.categories.is_empty() {
            return Err(Error::data("dataset has no categories"));
        }
        let ids = self.category_ids();
        let mut seen = std::collections::BTreeSet::new();
        for &id in &ids {
            if !seen.insert(id) {
                return Err(Error::data(format!("duplicate category id {id}")));
            }
        }
        let mut image_ids = std::collections::BTreeSet::new();
        for img in &self.images {
            if !image_ids.insert(img.id) {
                return Err(Error::data(format!("duplicate image id {}", img.id)));
            }
            for (k, d) in img.gt.iter().enumerate() {
                if !ids.contains(&d.class_id) {
                    return Err(Error::data(format!(
                        "image {}: annotation {k} references unknown category {}",
                        img.id, d.class_id
                    )));
                }
                if !d.bbox.inside_image(img.width as f64, img.height as f64) {
                    return Err(Error::data(format!(
                        "image {}: annotation {k} box outside image",
                        img.id
                    )));
                }
            }
        }
        Ok(())
    }
}
