//! Anatomical region vocabulary and its containment hierarchy.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The 29 scene-graph regions.
pub const REGIONS: [&str; 29] = [
    "right lung",
    "right upper lung zone",
    "right mid lung zone",
    "right lower lung zone",
    "right hilar structures",
    "right apical zone",
    "right costophrenic angle",
    "right hemidiaphragm",
    "left lung",
    "left upper lung zone",
    "left mid lung zone",
    "left lower lung zone",
    "left hilar structures",
    "left apical zone",
    "left costophrenic angle",
    "left hemidiaphragm",
    "trachea",
    "spine",
    "right clavicle",
    "left clavicle",
    "aortic arch",
    "mediastinum",
    "upper mediastinum",
    "svc",
    "cardiac silhouette",
    "cavoatrial junction",
    "right atrium",
    "carina",
    "abdomen",
];

/// Child → parent links of the default hierarchy.
const DEFAULT_PARENTS: [(&str, &str); 19] = [
    ("right upper lung zone", "right lung"),
    ("right mid lung zone", "right lung"),
    ("right lower lung zone", "right lung"),
    ("right hilar structures", "right lung"),
    ("right apical zone", "right upper lung zone"),
    ("right costophrenic angle", "right lower lung zone"),
    ("left upper lung zone", "left lung"),
    ("left mid lung zone", "left lung"),
    ("left lower lung zone", "left lung"),
    ("left hilar structures", "left lung"),
    ("left apical zone", "left upper lung zone"),
    ("left costophrenic angle", "left lower lung zone"),
    ("upper mediastinum", "mediastinum"),
    ("cardiac silhouette", "mediastinum"),
    ("aortic arch", "upper mediastinum"),
    ("svc", "upper mediastinum"),
    ("trachea", "upper mediastinum"),
    ("right atrium", "cardiac silhouette"),
    ("cavoatrial junction", "cardiac silhouette"),
];

/// Region containment as a forest: every region has at most one parent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(
    try_from = "BTreeMap<String, Option<String>>",
    into = "BTreeMap<String, Option<String>>"
)]
pub struct RegionHierarchy {
    parent_of: BTreeMap<String, Option<String>>,
}

impl Default for RegionHierarchy {
    fn default() -> Self {
        let mut parent_of: BTreeMap<String, Option<String>> = REGIONS.iter().map(|r| (r.to_string(), None)).collect();
        for (child, parent) in DEFAULT_PARENTS {
            parent_of.insert(child.to_string(), Some(parent.to_string()));
        }
        Self { parent_of }
    }
}

impl TryFrom<BTreeMap<String, Option<String>>> for RegionHierarchy {
    type Error = Error;

    fn try_from(mut parent_of: BTreeMap<String, Option<String>>) -> Result<Self> {
        let parents: Vec<String> = parent_of.values().flatten().cloned().collect();
        for p in parents {
            parent_of.entry(p).or_insert(None);
        }
        let h = Self { parent_of };
        h.check_acyclic()?;
        Ok(h)
    }
}

impl From<RegionHierarchy> for BTreeMap<String, Option<String>> {
    fn from(h: RegionHierarchy) -> Self {
        h.parent_of
    }
}

impl RegionHierarchy {
    /// Parses a JSON object mapping child names to parent names (or null).
    pub fn from_json(text: &str) -> Result<Self> {
        let map: BTreeMap<String, Option<String>> =
            serde_json::from_str(text).map_err(|e| Error::Hierarchy(e.to_string()))?;
        Self::try_from(map)
    }

    fn check_acyclic(&self) -> Result<()> {
        for start in self.parent_of.keys() {
            let mut seen = HashSet::new();
            let mut cur = Some(start.as_str());
            while let Some(node) = cur {
                if !seen.insert(node) {
                    return Err(Error::Hierarchy(format!("cycle through '{node}'")));
                }
                cur = self.parent(node);
            }
        }
        Ok(())
    }

    pub fn contains(&self, region: &str) -> bool {
        self.parent_of.contains_key(region)
    }

    pub fn parent(&self, region: &str) -> Option<&str> {
        self.parent_of.get(region).and_then(|p| p.as_deref())
    }

    pub fn ancestors<'a>(&'a self, region: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        std::iter::successors(self.parent(region), move |r| self.parent(r))
    }

    /// True when `ancestor` strictly contains `region`.
    pub fn is_ancestor(&self, ancestor: &str, region: &str) -> bool {
        self.ancestors(region).any(|a| a == ancestor)
    }

    /// Drops every region that is an ancestor of another one in the list,
    /// keeping the input order otherwise.
    pub fn most_specific<'a>(&self, regions: &[&'a str]) -> Vec<&'a str> {
        regions
            .iter()
            .copied()
            .filter(|r| !regions.iter().any(|other| self.is_ancestor(r, other)))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.parent_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent_of.is_empty()
    }
}
