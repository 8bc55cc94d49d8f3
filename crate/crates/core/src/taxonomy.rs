//! Habitat class hierarchy (coarse L2 groups and fine L3 classes).
//!
//! Every vector or matrix indexed by class elsewhere in the crate uses the
//! taxonomy's `l3_order` as its index space.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::PredictionRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Level {
    L2,
    L3,
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Level::L2 => f.write_str("L2"),
            Level::L3 => f.write_str("L3"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HabitatClass {
    pub code: String,
    pub name: String,
    pub level: Level,
    /// L2 group of an L3 class; `None` for L2 groups.
    #[serde(default, rename = "parent", skip_serializing_if = "Option::is_none")]
    pub parent_code: Option<String>,
    /// Provenance note for classes that are treated as L3 by convention.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Validated, immutable class hierarchy.
#[derive(Debug, Clone, PartialEq)]
pub struct Taxonomy {
    classes: Vec<HabitatClass>,
    l3_order: Vec<String>,
    l2_order: Vec<String>,
    by_code: HashMap<String, usize>,
    l3_index: HashMap<String, usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TaxonomyDocument {
    #[serde(rename = "class", default)]
    classes: Vec<HabitatClass>,
}

const DEFAULT_CLASSES: &[(&str, &str, Option<&str>, Option<&str>)] = &[
    ("grassland", "Grassland", None, None),
    ("acid_grassland", "Acid Grassland", Some("grassland"), None),
    (
        "bracken",
        "Bracken",
        Some("grassland"),
        Some("L4 in UKHab, labelled alongside L3 habitats"),
    ),
    ("calcareous_grassland", "Calcareous Grassland", Some("grassland"), None),
    (
        "improved_grassland",
        "Improved Grassland",
        Some("grassland"),
        Some("UK BAP broad habitat used as an L3 equivalent"),
    ),
    ("neutral_grassland", "Neutral Grassland", Some("grassland"), None),
    ("woodland", "Woodland and Forest", None, None),
    (
        "broadleaved_mixed_and_yew_woodland",
        "Broadleaved, Mixed and Yew Woodland",
        Some("woodland"),
        None,
    ),
    ("coniferous_woodland", "Coniferous Woodland", Some("woodland"), None),
    ("heathland", "Heathland and Shrub", None, None),
    ("dwarf_shrub_heath", "Dwarf Shrub Heath", Some("heathland"), None),
    ("wetland", "Wetland", None, None),
    ("bog", "Bog", Some("wetland"), None),
    ("fen_marsh_swamp", "Fen, Marsh and Swamp", Some("wetland"), None),
    ("cropland", "Cropland", None, None),
    (
        "arable_and_horticulture",
        "Arable and Horticulture",
        Some("cropland"),
        None,
    ),
    ("urban_group", "Urban", None, None),
    (
        "urban",
        "Urban",
        Some("urban_group"),
        Some("single L3 subtype of its own L2 group"),
    ),
    ("sparsely_vegetated_land", "Sparsely Vegetated Land", None, None),
    ("inland_rock", "Inland Rock", Some("sparsely_vegetated_land"), None),
    (
        "supra_littoral_rock",
        "Supra-littoral Rock",
        Some("sparsely_vegetated_land"),
        None,
    ),
    (
        "supra_littoral_sediment",
        "Supra-littoral Sediment",
        Some("sparsely_vegetated_land"),
        None,
    ),
    (
        "marine_inlets_and_transitional_waters",
        "Marine Inlets and Transitional Waters",
        None,
        None,
    ),
    (
        "littoral_rock",
        "Littoral Rock",
        Some("marine_inlets_and_transitional_waters"),
        None,
    ),
    (
        "littoral_sediment",
        "Littoral Sediment",
        Some("marine_inlets_and_transitional_waters"),
        None,
    ),
    ("montane_group", "Montane", None, None),
    (
        "montane",
        "Montane",
        Some("montane_group"),
        Some("UK BAP broad habitat used as an L3 equivalent; forms its own group"),
    ),
];

impl Default for Taxonomy {
    /// The 18-class habitat set grouped under 9 coarse groups.
    fn default() -> Self {
        let classes = DEFAULT_CLASSES
            .iter()
            .map(|(code, name, parent, note)| HabitatClass {
                code: code.to_string(),
                name: name.to_string(),
                level: if parent.is_some() { Level::L3 } else { Level::L2 },
                parent_code: parent.map(str::to_string),
                note: note.map(str::to_string),
            })
            .collect();
        Taxonomy::new(classes).expect("built-in taxonomy is valid")
    }
}

fn valid_code(code: &str) -> bool {
    !code.is_empty()
        && code
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

impl Taxonomy {
    /// Validates a list of classes. L3 order follows the input order.
    pub fn new(classes: Vec<HabitatClass>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::Taxonomy("taxonomy is empty".into()));
        }
        let mut by_code = HashMap::new();
        for (i, c) in classes.iter().enumerate() {
            if !valid_code(&c.code) {
                return Err(Error::Taxonomy(format!(
                    "code `{}` is not lowercase snake-case ASCII",
                    c.code
                )));
            }
            if by_code.insert(c.code.clone(), i).is_some() {
                return Err(Error::Taxonomy(format!("duplicate code `{}`", c.code)));
            }
        }
        let mut l3_order = Vec::new();
        let mut l2_order = Vec::new();
        for c in &classes {
            match (c.level, &c.parent_code) {
                (Level::L2, None) => l2_order.push(c.code.clone()),
                (Level::L2, Some(p)) => {
                    return Err(Error::Taxonomy(format!(
                        "L2 group `{}` must not have a parent (got `{p}`)",
                        c.code
                    )))
                }
                (Level::L3, None) => return Err(Error::Taxonomy(format!("L3 class `{}` has no parent", c.code))),
                (Level::L3, Some(p)) => match by_code.get(p) {
                    Some(&j) if classes[j].level == Level::L2 => l3_order.push(c.code.clone()),
                    Some(_) => {
                        return Err(Error::Taxonomy(format!(
                            "parent `{p}` of `{}` is not an L2 group",
                            c.code
                        )))
                    }
                    None => {
                        return Err(Error::Taxonomy(format!(
                            "L3 class `{}` names unknown parent `{p}`",
                            c.code
                        )))
                    }
                },
            }
        }
        if l3_order.is_empty() {
            return Err(Error::Taxonomy("taxonomy has no L3 classes".into()));
        }
        let l3_index = l3_order.iter().enumerate().map(|(i, c)| (c.clone(), i)).collect();
        Ok(Taxonomy {
            classes,
            l3_order,
            l2_order,
            by_code,
            l3_index,
        })
    }

    /// Parses a taxonomy document (TOML with one `[[class]]` table per class).
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let doc: TaxonomyDocument = toml::from_str(text).map_err(|e| Error::Taxonomy(e.to_string()))?;
        Taxonomy::new(doc.classes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Taxonomy::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        let doc = TaxonomyDocument {
            classes: self.classes.clone(),
        };
        toml::to_string(&doc).expect("taxonomy serializes")
    }

    /// Short content digest used to tie manifests and checkpoints to a
    /// taxonomy.
    pub fn identity(&self) -> String {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(self.to_toml_string().as_bytes());
        digest[..6].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn classes(&self) -> &[HabitatClass] {
        &self.classes
    }

    /// Canonical L3 index space.
    pub fn l3_order(&self) -> &[String] {
        &self.l3_order
    }

    pub fn l2_order(&self) -> &[String] {
        &self.l2_order
    }

    pub fn l3_count(&self) -> usize {
        self.l3_order.len()
    }

    pub fn class(&self, code: &str) -> Option<&HabitatClass> {
        self.by_code.get(code).map(|&i| &self.classes[i])
    }

    pub fn l3_index(&self, code: &str) -> Option<usize> {
        self.l3_index.get(code).copied()
    }

    pub fn is_l3(&self, code: &str) -> bool {
        self.l3_index.contains_key(code)
    }

    pub fn parent_of(&self, l3_code: &str) -> Result<&str> {
        let class = self
            .class(l3_code)
            .ok_or_else(|| Error::UnknownClass(l3_code.to_string()))?;
        match &class.parent_code {
            Some(p) => Ok(p.as_str()),
            None => Err(Error::NotL3(l3_code.to_string())),
        }
    }

    /// L3 children of an L2 group, in `l3_order`.
    pub fn children(&self, l2_code: &str) -> Vec<&str> {
        self.l3_order
            .iter()
            .filter(|c| self.parent_of(c).ok() == Some(l2_code))
            .map(String::as_str)
            .collect()
    }

    /// Maps records from L3 to L2. Scores of sibling classes are summed and
    /// the ranking is re-derived from the summed scores; without scores the
    /// ranked list is mapped and de-duplicated keeping the first occurrence.
    pub fn aggregate_to_l2(&self, records: &[PredictionRecord]) -> Result<Vec<PredictionRecord>> {
        let l2_rank: HashMap<&str, usize> = self.l2_order.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
        records
            .iter()
            .map(|r| {
                let true_class = self.l3_parent(&r.true_class)?.to_string();
                let (ranked, scores) = match &r.scores {
                    Some(scores) => {
                        let mut summed: BTreeMap<usize, f64> = BTreeMap::new();
                        for (code, s) in r.ranked_classes.iter().zip(scores) {
                            let parent = self.l3_parent(code)?;
                            *summed.entry(l2_rank[parent]).or_default() += s;
                        }
                        let mut pairs: Vec<(usize, f64)> = summed.into_iter().collect();
                        // stable sort keeps l2_order among equal scores
                        pairs.sort_by(|a, b| b.1.total_cmp(&a.1));
                        let ranked = pairs.iter().map(|(i, _)| self.l2_order[*i].clone()).collect();
                        (ranked, Some(pairs.into_iter().map(|(_, s)| s).collect()))
                    }
                    None => {
                        let mut ranked: Vec<String> = Vec::new();
                        for code in &r.ranked_classes {
                            let parent = self.l3_parent(code)?;
                            if !ranked.iter().any(|c| c == parent) {
                                ranked.push(parent.to_string());
                            }
                        }
                        (ranked, None)
                    }
                };
                Ok(PredictionRecord {
                    sample_id: r.sample_id.clone(),
                    true_class,
                    ranked_classes: ranked,
                    scores,
                })
            })
            .collect()
    }

    fn l3_parent(&self, code: &str) -> Result<&str> {
        if !self.is_l3(code) {
            return Err(Error::UnknownClass(code.to_string()));
        }
        self.parent_of(code)
    }
}
