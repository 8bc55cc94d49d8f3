use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DatasetManifest;
use crate::error::{Error, Result};

/// Classes with fewer samples than this get no test allocation.
pub const DEFAULT_MIN_TEST_COUNT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidParameter(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    /// Share of the training pool carved out for validation.
    pub val_of_train: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.75,
            val_of_train: 0.2,
            test: 0.25,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("train", self.train),
            ("val_of_train", self.val_of_train),
            ("test", self.test),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "{name} fraction {v} is outside (0, 1)"
                )));
            }
        }
        if (self.train + self.test - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "train ({}) and test ({}) fractions must sum to 1",
                self.train, self.test
            )));
        }
        Ok(())
    }
}

/// Hamilton apportionment: `round(fraction * total)` seats shared in
/// proportion to `counts`, floors first, then leftovers by largest
/// remainder (ties go to the lower index). Each share differs from its
/// exact quota by less than one.
pub fn largest_remainder(counts: &[usize], fraction: f64) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    let target = (fraction * total as f64).round() as usize;
    let quotas: Vec<f64> = counts.iter().map(|&c| c as f64 * fraction).collect();
    let mut alloc: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = alloc.iter().sum();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(target.saturating_sub(assigned)) {
        if alloc[i] < counts[i] {
            alloc[i] += 1;
        }
    }
    alloc
}

/// Train/val/test membership for every manifest sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitAssignment {
    entries: Vec<(String, Split)>,
    index: HashMap<String, usize>,
    pub seed: u64,
    pub fractions: SplitFractions,
    pub min_test_count: usize,
}

impl SplitAssignment {
    fn from_entries(
        entries: Vec<(String, Split)>,
        seed: u64,
        fractions: SplitFractions,
        min_test_count: usize,
    ) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, (id, _)) in entries.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::Dataset(format!("sample `{id}` assigned twice")));
            }
        }
        Ok(SplitAssignment {
            entries,
            index,
            seed,
            fractions,
            min_test_count,
        })
    }

    pub fn get(&self, sample_id: &str) -> Option<Split> {
        self.index.get(sample_id).map(|&i| self.entries[i].1)
    }

    pub fn entries(&self) -> &[(String, Split)] {
        &self.entries
    }

    /// Ids in the given split, in assignment (manifest) order.
    pub fn ids(&self, split: Split) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(_, s)| *s == split)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|(_, s)| *s == split).count()
    }

    /// Checks that every manifest sample is assigned exactly once.
    pub fn check_covers(&self, manifest: &DatasetManifest) -> Result<()> {
        if self.entries.len() != manifest.len() {
            return Err(Error::Dataset(format!(
                "split assigns {} samples, manifest has {}",
                self.entries.len(),
                manifest.len()
            )));
        }
        for r in manifest.records() {
            if self.get(&r.sample_id).is_none() {
                return Err(Error::Dataset(format!("sample `{}` has no split", r.sample_id)));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let f = &self.fractions;
        let mut out = format!(
            "# fractions train={} val_of_train={} test={} min_test_count={}\nsample_id,split,seed\n",
            f.train, f.val_of_train, f.test, self.min_test_count
        );
        for (id, split) in &self.entries {
            out.push_str(&format!("{id},{split},{}\n", self.seed));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::format("<split>", msg);
        let mut lines = text.lines();
        let comment = lines
            .next()
            .and_then(|l| l.strip_prefix("# fractions"))
            .ok_or_else(|| bad("missing `# fractions` header".into()))?;
        let mut kv = BTreeMap::new();
        for pair in comment.split_whitespace() {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| bad(format!("bad header field `{pair}`")))?;
            kv.insert(k, v);
        }
        let num = |k: &str| -> Result<f64> {
            kv.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(format!("header lacks `{k}`")))
        };
        let fractions = SplitFractions {
            train: num("train")?,
            val_of_train: num("val_of_train")?,
            test: num("test")?,
        };
        let min_test_count = num("min_test_count")? as usize;
        if lines.next() != Some("sample_id,split,seed") {
            return Err(bad("expected column header `sample_id,split,seed`".into()));
        }
        let mut seed = None;
        let mut entries = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let mut parts = line.rsplitn(3, ',');
            let (s, split, id) = match (parts.next(), parts.next(), parts.next()) {
                (Some(s), Some(split), Some(id)) => (s, split, id),
                _ => return Err(bad(format!("bad row `{line}`"))),
            };
            let row_seed: u64 = s.parse().map_err(|_| bad(format!("bad seed in `{line}`")))?;
            if *seed.get_or_insert(row_seed) != row_seed {
                return Err(bad("rows disagree on the seed".into()));
            }
            entries.push((id.to_string(), split.parse()?));
        }
        SplitAssignment::from_entries(entries, seed.unwrap_or(0), fractions, min_test_count)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        SplitAssignment::from_text(&text)
    }
}

/// Per-class stratified split. Test counts are apportioned by largest
/// remainder over classes with at least `min_test_count` samples; smaller
/// classes go entirely to the training split. Validation is then carved from
/// each class's training pool the same way. Each class is shuffled by its
/// own seed-derived stream.
pub fn stratified_split(
    manifest: &DatasetManifest,
    fractions: SplitFractions,
    min_test_count: usize,
    seed: u64,
) -> Result<SplitAssignment> {
    fractions.validate()?;
    if manifest.len() < 2 {
        return Err(Error::Dataset(format!(
            "cannot split a manifest of {} sample(s)",
            manifest.len()
        )));
    }
    let mut by_class: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for r in manifest.records() {
        by_class.entry(&r.l3_label).or_default().push(&r.sample_id);
    }
    let classes: Vec<&str> = by_class.keys().copied().collect();
    let counts: Vec<usize> = classes.iter().map(|c| by_class[c].len()).collect();

    let eligible: Vec<usize> = counts
        .iter()
        .map(|&n| if n >= min_test_count { n } else { 0 })
        .collect();
    let test_alloc = largest_remainder(&eligible, fractions.test);
    let pool: Vec<usize> = counts
        .iter()
        .zip(&eligible)
        .zip(&test_alloc)
        .map(|((&n, &e), t)| if e == 0 { 0 } else { n - t })
        .collect();
    let val_alloc = largest_remainder(&pool, fractions.val_of_train);

    let mut assigned: HashMap<&str, Split> = HashMap::with_capacity(manifest.len());
    for (stream, class) in classes.iter().enumerate() {
        let mut ids = by_class[class].clone();
        ids.sort_unstable();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream as u64);
        ids.shuffle(&mut rng);
        let (t, v) = (test_alloc[stream], val_alloc[stream]);
        for (i, id) in ids.into_iter().enumerate() {
            let split = if i < t {
                Split::Test
            } else if i < t + v {
                Split::Val
            } else {
                Split::Train
            };
            assigned.insert(id, split);
        }
    }
    let entries = manifest
        .records()
        .iter()
        .map(|r| (r.sample_id.clone(), assigned[r.sample_id.as_str()]))
        .collect();
    SplitAssignment::from_entries(entries, seed, fractions, min_test_count)
}
