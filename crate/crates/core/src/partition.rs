//! Disjoint base / novel class-id bookkeeping.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Which side of the partition a class id belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Base,
    /// Index into the ordered novel groups.
    Novel(usize),
}

/// Ordered base class ids plus one or more ordered novel groups.
///
/// Every model view derives from this: the base teacher covers `base`, the
/// novel teacher of step `g` covers `novel_groups[g]`, and the student covers
/// their concatenation. Background is always slot 0 of each model's
/// probability vector and is not a member of any side.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPartition {
    pub base: Vec<usize>,
    pub novel_groups: Vec<Vec<usize>>,
}

impl ClassPartition {
    pub fn new(base: Vec<usize>, novel_groups: Vec<Vec<usize>>) -> Result<Self> {
        let p = Self { base, novel_groups };
        p.validate()?;
        Ok(p)
    }

    /// Single novel group convenience constructor.
    pub fn two_way(base: Vec<usize>, novel: Vec<usize>) -> Result<Self> {
        Self::new(base, vec![novel])
    }

    pub fn validate(&self) -> Result<()> {
        if self.base.is_empty() {
            return Err(Error::config("partition has no base classes"));
        }
        if self.novel_groups.iter().any(|g| g.is_empty()) {
            return Err(Error::config("partition has an empty novel group"));
        }
        let mut seen = BTreeSet::new();
        for id in self.student_order() {
            if !seen.insert(id) {
                return Err(Error::config(format!(
                    "class id {id} appears in more than one partition side"
                )));
            }
        }
        Ok(())
    }

    /// All novel ids across groups, in group order.
    pub fn all_novel(&self) -> Vec<usize> {
        self.novel_groups.iter().flatten().copied().collect()
    }

    /// Base ids followed by all novel ids: the student's foreground order.
    pub fn student_order(&self) -> Vec<usize> {
        let mut ids = self.base.clone();
        ids.extend(self.all_novel());
        ids
    }

    pub fn side_of(&self, class_id: usize) -> Option<Side> {
        if self.base.contains(&class_id) {
            return Some(Side::Base);
        }
        self.novel_groups
            .iter()
            .position(|g| g.contains(&class_id))
            .map(Side::Novel)
    }

    pub fn n_sides(&self) -> usize {
        1 + self.novel_groups.len()
    }

    /// Ids of side `i` (0 = base, 1.. = novel groups).
    pub fn side_ids(&self, i: usize) -> &[usize] {
        if i == 0 {
            &self.base
        } else {
            &self.novel_groups[i - 1]
        }
    }

    /// Parse "0,1,2|3,4|5" into base `{0,1,2}` and novel groups `{3,4}`, `{5}`.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut sides = Vec::new();
        for part in spec.split('|') {
            let ids: Result<Vec<usize>> = part
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::config(format!("bad class id '{s}' in partition")))
                })
                .collect();
            sides.push(ids?);
        }
        if sides.len() < 2 {
            return Err(Error::config(
                "partition spec needs at least base|novel sides",
            ));
        }
        let base = sides.remove(0);
        Self::new(base, sides)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disjointness_enforced() {
        assert!(ClassPartition::two_way(vec![0, 1], vec![1]).is_err());
        assert!(ClassPartition::new(vec![0], vec![vec![1], vec![1]]).is_err());
    }

    #[test]
    fn student_order_concatenates() {
        let p = ClassPartition::new(vec![5, 2], vec![vec![7], vec![9, 3]]).unwrap();
        assert_eq!(p.student_order(), vec![5, 2, 7, 9, 3]);
        assert_eq!(p.side_of(2), Some(Side::Base));
        assert_eq!(p.side_of(9), Some(Side::Novel(1)));
        assert_eq!(p.side_of(4), None);
    }

    #[test]
    fn parse_spec() {
        let p = ClassPartition::parse("0,1,2|3").unwrap();
        assert_eq!(p.base, vec![0, 1, 2]);
        assert_eq!(p.novel_groups, vec![vec![3]]);
        assert!(ClassPartition::parse("0,1,2").is_err());
        assert!(ClassPartition::parse("0|x").is_err());
    }
}
