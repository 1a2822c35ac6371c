//! Incremental split construction and the co-occurrence auditor.

use super::{AnnotatedImage, Dataset};
use crate::error::{Error, Result};
use crate::partition::ClassPartition;
use std::collections::BTreeMap;

/// Assign images to partition sides and strip out-of-side labels.
///
/// Non-strict: an image joins every side that owns at least one of its
/// labels (so an image mixing base and novel objects appears in both splits,
/// with the other side's labels removed — they become unlabeled background,
/// which is exactly the co-occurrence the auditor measures).
///
/// Strict: any image whose labels span two or more sides is dropped from all
/// splits.
///
/// Returns one dataset per side: index 0 is the base split, then one per
/// novel group.
pub fn build_incremental_splits(
    dataset: &Dataset,
    partition: &ClassPartition,
    strict: bool,
) -> Result<Vec<Dataset>> {
    partition.validate()?;
    let cat_ids = dataset.category_ids();
    for id in partition.student_order() {
        if !cat_ids.contains(&id) {
            return Err(Error::config(format!(
                "partition class {id} not present in the dataset categories"
            )));
        }
    }
    let n_sides = partition.n_sides();
    let mut splits: Vec<Vec<AnnotatedImage>> = vec![Vec::new(); n_sides];
    for img in &dataset.images {
        let mut present: Vec<usize> = Vec::new();
        for side in 0..n_sides {
            if img
                .gt
                .iter()
                .any(|d| partition.side_ids(side).contains(&d.class_id))
            {
                present.push(side);
            }
        }
        if present.is_empty() {
            continue;
        }
        if strict && present.len() >= 2 {
            continue;
        }
        for &side in &present {
            let mut copy = img.clone();
            copy.gt
                .retain(|d| partition.side_ids(side).contains(&d.class_id));
            splits[side].push(copy);
        }
    }
    let out: Vec<Dataset> = splits
        .into_iter()
        .map(|images| Dataset {
            categories: dataset.categories.clone(),
            images,
        })
        .collect();
    for (side, ds) in out.iter().enumerate() {
        if ds.images.is_empty() {
            return Err(Error::data(format!(
                "split for partition side {side} is empty"
            )));
        }
    }
    Ok(out)
}

/// Per-split object counts over the images' original (unstripped) labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SideAudit {
    pub side_name: String,
    /// class id → number of objects of that class inside this side's split.
    pub counts: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CooccurrenceAudit {
    /// States the counting methodology assumptions.
    pub note: String,
    pub sides: Vec<SideAudit>,
}

impl CooccurrenceAudit {
    /// Objects of class `class_id` appearing inside side `side`'s split.
    pub fn count(&self, side: usize, class_id: usize) -> usize {
        self.sides[side].counts.get(&class_id).copied().unwrap_or(0)
    }

    /// True when no side's split contains any object of another side's
    /// classes (the strict non-co-occurrence regime).
    pub fn cross_counts_all_zero(&self, partition: &ClassPartition) -> bool {
        for (side, audit) in self.sides.iter().enumerate() {
            for (&class_id, &n) in &audit.counts {
                if n == 0 {
                    continue;
                }
                match partition.side_of(class_id) {
                    Some(s) => {
                        let owner = match s {
                            crate::partition::Side::Base => 0,
                            crate::partition::Side::Novel(g) => g + 1,
                        };
                        if owner != side {
                            return false;
                        }
                    }
                    None => return false,
                }
            }
        }
        true
    }

    /// Text table in the style of per-class co-occurrence statistics.
    pub fn render_table(&self, dataset: &Dataset) -> String {
        let mut out = String::new();
        out.push_str(&format!("# {}\n", self.note));
        let classes: Vec<usize> = dataset.category_ids();
        out.push_str("split");
        for &c in &classes {
            let name = dataset.category_name(c).unwrap_or("?");
            out.push_str(&format!("\t{name}"));
        }
        out.push('\n');
        for side in &self.sides {
            out.push_str(&side.side_name);
            for &c in &classes {
                out.push_str(&format!(
                    "\t{}",
                    side.counts.get(&c).copied().unwrap_or(0)
                ));
            }
            out.push('\n');
        }
        out
    }
}

/// Count, for every split built with `strict = false`, the objects of every
/// class appearing inside that split's images.
///
/// Counting methodology: object counts (not image counts) over each side's
/// full split; images belonging to several sides are counted in each.
pub fn audit_cooccurrence(
    dataset: &Dataset,
    partition: &ClassPartition,
) -> Result<CooccurrenceAudit> {
    partition.validate()?;
    let n_sides = partition.n_sides();
    let mut sides: Vec<SideAudit> = (0..n_sides)
        .map(|s| SideAudit {
            side_name: if s == 0 {
                "base".to_string()
            } else {
                format!("novel_{s}")
            },
            counts: BTreeMap::new(),
        })
        .collect();
    for img in &dataset.images {
        let mut present: Vec<usize> = Vec::new();
        for side in 0..n_sides {
            if img
                .gt
                .iter()
                .any(|d| partition.side_ids(side).contains(&d.class_id))
            {
                present.push(side);
            }
        }
        for &side in &present {
            for d in &img.gt {
                *sides[side].counts.entry(d.class_id).or_insert(0) += 1;
            }
        }
    }
    Ok(CooccurrenceAudit {
        note: "object counts per class over each side's non-strict split; \
               an image joins every side owning >=1 of its labels"
            .to_string(),
        sides,
    })
}
