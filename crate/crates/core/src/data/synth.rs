//! Synthetic shapes: colored squares, circles, triangles, and diamonds on a
//! noisy background. Small enough to train a detector on CPU in minutes, yet
//! not trivially separable thanks to color jitter and background noise.

use super::{AnnotatedImage, Category, Dataset};
use crate::error::{Error, Result};
use crate::geom::{iou, BBox, Detection};
use crate::image::Image;
use crate::partition::ClassPartition;
use crate::seeding::derive_seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
    Diamond,
}

/// A drawable category: id, display name, shape, base RGB color.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeCategory {
    pub id: usize,
    pub name: String,
    pub shape: Shape,
    pub color: [f64; 3],
}

/// The shipped 8-category table (shape x color grid).
pub fn default_categories() -> Vec<ShapeCategory> {
    let spec: [(&str, Shape, [f64; 3]); 8] = [
        ("red-square", Shape::Square, [0.90, 0.10, 0.10]),
        ("green-circle", Shape::Circle, [0.10, 0.85, 0.15]),
        ("blue-triangle", Shape::Triangle, [0.15, 0.25, 0.95]),
        ("yellow-diamond", Shape::Diamond, [0.95, 0.90, 0.10]),
        ("magenta-square", Shape::Square, [0.90, 0.10, 0.90]),
        ("cyan-circle", Shape::Circle, [0.10, 0.90, 0.90]),
        ("white-triangle", Shape::Triangle, [0.95, 0.95, 0.95]),
        ("orange-diamond", Shape::Diamond, [0.95, 0.55, 0.10]),
    ];
    spec.iter()
        .enumerate()
        .map(|(id, (name, shape, color))| ShapeCategory {
            id,
            name: name.to_string(),
            shape: *shape,
            color: *color,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub canvas_size: usize,
    pub categories: Vec<ShapeCategory>,
    /// Inclusive range of objects per image.
    pub objects_min: usize,
    pub objects_max: usize,
    /// Inclusive range of object side lengths in pixels.
    pub size_min: f64,
    pub size_max: f64,
    pub allow_cooccurrence: bool,
    /// Required when `allow_cooccurrence` is false: every image then draws
    /// all its classes from a single partition side.
    pub partition: Option<ClassPartition>,
    /// Uniform per-pixel background noise amplitude.
    pub noise: f64,
    /// Uniform per-object color jitter amplitude.
    pub color_jitter: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn shapes_default(seed: u64) -> Self {
        Self {
            canvas_size: 64,
            categories: default_categories(),
            objects_min: 1,
            objects_max: 3,
            size_min: 14.0,
            size_max: 26.0,
            allow_cooccurrence: true,
            partition: None,
            noise: 0.06,
            color_jitter: 0.08,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.canvas_size < 16 {
            return Err(Error::config("canvas_size too small"));
        }
        if self.categories.is_empty() {
            return Err(Error::config("no categories"));
        }
        let mut ids = std::collections::BTreeSet::new();
        for c in &self.categories {
            if !ids.insert(c.id) {
                return Err(Error::config(format!("duplicate category id {}", c.id)));
            }
        }
        if self.objects_min < 1 || self.objects_min > self.objects_max {
            return Err(Error::config("bad objects-per-image range"));
        }
        if !(self.size_min >= 4.0 && self.size_min <= self.size_max) {
            return Err(Error::config("bad object size range"));
        }
        if self.size_max > self.canvas_size as f64 - 2.0 {
            return Err(Error::config("objects larger than canvas"));
        }
        if self.noise < 0.0 || self.color_jitter < 0.0 {
            return Err(Error::config("negative noise/jitter"));
        }
        if !self.allow_cooccurrence {
            let p = self
                .partition
                .as_ref()
                .ok_or_else(|| Error::config("non-co-occurrence requires a declared partition"))?;
            p.validate()?;
            for id in p.student_order() {
                if !ids.contains(&id) {
                    return Err(Error::config(format!(
                        "partition class {id} not among the generator categories"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: SyntheticConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One object baked into a render recipe. The stored color already includes
/// the per-object jitter so re-rendering is exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacedObject {
    pub category_id: usize,
    pub shape: Shape,
    pub color: [f64; 3],
    pub cx: f64,
    pub cy: f64,
    pub size: f64,
}

impl PlacedObject {
    pub fn bbox(&self) -> BBox {
        BBox {
            x1: self.cx - self.size / 2.0,
            y1: self.cy - self.size / 2.0,
            x2: self.cx + self.size / 2.0,
            y2: self.cy + self.size / 2.0,
        }
    }

    fn contains(&self, px: f64, py: f64) -> bool {
        let dx = px - self.cx;
        let dy = py - self.cy;
        let r = self.size / 2.0;
        match self.shape {
            Shape::Square => dx.abs() <= r && dy.abs() <= r,
            Shape::Circle => dx * dx + dy * dy <= r * r,
            // Up-pointing isoceles triangle inscribed in the size box.
            Shape::Triangle => {
                if dy.abs() > r {
                    return false;
                }
                let half_width_at_y = (dy + r) / 2.0;
                dx.abs() <= half_width_at_y
            }
            Shape::Diamond => dx.abs() + dy.abs() <= r,
        }
    }
}

/// Everything needed to re-render an image bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderRecipe {
    pub seed: u64,
    pub background: f64,
    pub noise: f64,
    pub objects: Vec<PlacedObject>,
}

/// Deterministic rasterization of a recipe.
pub fn render_recipe(recipe: &RenderRecipe, width: usize, height: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let mut img = Image::new(width, height);
    for y in 0..height {
        for x in 0..width {
            let n = rng.gen_range(-recipe.noise..=recipe.noise);
            let v = (recipe.background + n).clamp(0.0, 1.0);
            for c in 0..3 {
                img.set(c, y, x, v);
            }
        }
    }
    for obj in &recipe.objects {
        for y in 0..height {
            let py = y as f64 + 0.5;
            for x in 0..width {
                let px = x as f64 + 0.5;
                if obj.contains(px, py) {
                    for c in 0..3 {
                        img.set(c, y, x, obj.color[c]);
                    }
                }
            }
        }
    }
    img
}

/// Generate a dataset of `n_images` seeded synthetic images.
pub fn generate_synthetic(cfg: &SyntheticConfig, n_images: usize) -> Result<Dataset> {
    cfg.validate()?;
    if n_images < 1 {
        return Err(Error::config("n_images must be >= 1"));
    }
    let size = cfg.canvas_size;
    let mut images = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, i as u64));
        let allowed: Vec<&ShapeCategory> = match (&cfg.partition, cfg.allow_cooccurrence) {
            (Some(p), false) => {
                // Pick one side, weighted by side size for per-class balance.
                let total: usize = (0..p.n_sides()).map(|s| p.side_ids(s).len()).sum();
                let mut pick = rng.gen_range(0..total);
                let mut side = 0;
                for s in 0..p.n_sides() {
                    let n = p.side_ids(s).len();
                    if pick < n {
                        side = s;
                        break;
                    }
                    pick -= n;
                }
                cfg.categories
                    .iter()
                    .filter(|c| p.side_ids(side).contains(&c.id))
                    .collect()
            }
            _ => cfg.categories.iter().collect(),
        };
        let n_objects = rng.gen_range(cfg.objects_min..=cfg.objects_max);
        let background = rng.gen_range(0.15..0.50);
        let mut objects: Vec<PlacedObject> = Vec::new();
        for _ in 0..n_objects {
            let cat = allowed[rng.gen_range(0..allowed.len())];
            for _attempt in 0..20 {
                let s = rng.gen_range(cfg.size_min..=cfg.size_max);
                let half = s / 2.0;
                let cx = rng.gen_range(half + 1.0..size as f64 - half - 1.0);
                let cy = rng.gen_range(half + 1.0..size as f64 - half - 1.0);
                let mut color = cat.color;
                for ch in color.iter_mut() {
                    *ch = (*ch + rng.gen_range(-cfg.color_jitter..=cfg.color_jitter))
                        .clamp(0.0, 1.0);
                }
                let candidate = PlacedObject {
                    category_id: cat.id,
                    shape: cat.shape,
                    color,
                    cx,
                    cy,
                    size: s,
                };
                let cb = candidate.bbox();
                if objects.iter().all(|o| iou(&o.bbox(), &cb) < 0.3) {
                    objects.push(candidate);
                    break;
                }
            }
        }
        let gt: Vec<Detection> = objects
            .iter()
            .map(|o| Detection {
                bbox: o.bbox(),
                class_id: o.category_id,
                score: 1.0,
            })
            .collect();
        images.push(AnnotatedImage {
            id: i as u64,
            width: size,
            height: size,
            recipe: Some(RenderRecipe {
                seed: derive_seed(cfg.seed, 0x1000_0000 + i as u64),
                background,
                noise: cfg.noise,
                objects,
            }),
            file_name: None,
            gt,
        });
    }
    let dataset = Dataset {
        categories: cfg
            .categories
            .iter()
            .map(|c| Category {
                id: c.id,
                name: c.name.clone(),
            })
            .collect(),
        images,
    };
    dataset.validate()?;
    Ok(dataset)
}
