//! Label preparation and stratified train/validation/test splitting.
//!
//! Each class is shuffled with a seeded RNG and apportioned across the three
//! subsets by largest-remainder rounding: every subset receives either the
//! floor or the ceiling of its exact quota, and leftover samples go to the
//! subsets with the largest fractional remainders (ties broken by a seeded
//! random order).

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SplitError {
    #[error("raw labels without a mapping: {0:?}")]
    Unmapped(Vec<String>),
    #[error("invalid fractions {0:?}: each must be positive and they must sum to 1")]
    Fractions([f64; 3]),
    #[error("duplicate sample id `{0}`")]
    DuplicateId(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Train,
    Val,
    Test,
}

impl Subset {
    pub const ALL: [Subset; 3] = [Subset::Train, Subset::Val, Subset::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Subset::Train => "train",
            Subset::Val => "val",
            Subset::Test => "test",
        }
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Subset {
    type Err = SplitError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Subset::Train),
            "val" | "validation" => Ok(Subset::Val),
            "test" => Ok(Subset::Test),
            other => Err(SplitError::Invalid(format!("unknown subset `{other}`"))),
        }
    }
}

/// Samples with raw (possibly multiple) labels, before super-class grouping.
#[derive(Debug, Clone, PartialEq)]
pub struct RawIndex {
    pub sample_ids: Vec<String>,
    pub raw_labels: Vec<Vec<String>>,
}

impl RawIndex {
    /// Reads `sample_id,label` rows; a label cell may hold several
    /// `;`-separated raw labels.
    pub fn read_csv(path: &Path) -> Result<Self, SplitError> {
        let mut reader = csv::Reader::from_path(path)?;
        let (mut sample_ids, mut raw_labels) = (Vec::new(), Vec::new());
        for row in reader.records() {
            let row = row?;
            if row.len() < 2 {
                return Err(SplitError::Invalid(format!("{}: expected sample_id,label rows", path.display())));
            }
            sample_ids.push(row[0].to_string());
            raw_labels.push(split_raw_labels(&row[1]));
        }
        Ok(Self { sample_ids, raw_labels })
    }

    /// Every raw label mapped to itself.
    pub fn identity_map(&self) -> LabelMap {
        LabelMap(
            self.raw_labels
                .iter()
                .flatten()
                .map(|l| (l.clone(), Some(l.clone())))
                .collect(),
        )
    }
}

pub fn split_raw_labels(cell: &str) -> Vec<String> {
    cell.split(';')
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

/// Samples with their set of grouped labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSetIndex {
    pub sample_ids: Vec<String>,
    pub label_sets: Vec<BTreeSet<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    pub sample_ids: Vec<String>,
    pub labels: Vec<String>,
    pub split_assignment: Option<Vec<Subset>>,
}

impl DatasetIndex {
    pub fn new(sample_ids: Vec<String>, labels: Vec<String>) -> Result<Self, SplitError> {
        if sample_ids.len() != labels.len() {
            return Err(SplitError::Invalid(format!(
                "{} ids but {} labels",
                sample_ids.len(),
                labels.len()
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = sample_ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(SplitError::DuplicateId(dup.clone()));
        }
        Ok(Self {
            sample_ids,
            labels,
            split_assignment: None,
        })
    }

    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    /// Sorted distinct labels.
    pub fn classes(&self) -> Vec<String> {
        self.labels.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Row indices assigned to `subset`, in index order.
    pub fn indices(&self, subset: Subset) -> Vec<usize> {
        match &self.split_assignment {
            Some(a) => (0..a.len()).filter(|&i| a[i] == subset).collect(),
            None => Vec::new(),
        }
    }

    pub fn ids(&self, subset: Subset) -> Vec<String> {
        self.indices(subset).into_iter().map(|i| self.sample_ids[i].clone()).collect()
    }

    /// `sample_id,label,subset` CSV.
    pub fn write_manifest(&self, path: &Path) -> Result<(), SplitError> {
        let assignment = self
            .split_assignment
            .as_ref()
            .ok_or_else(|| SplitError::Invalid("index has no split assignment".into()))?;
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["sample_id", "label", "subset"])?;
        for ((id, label), subset) in self.sample_ids.iter().zip(&self.labels).zip(assignment) {
            w.write_record([id.as_str(), label.as_str(), subset.as_str()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a `sample_id,label[,subset]` CSV.
    pub fn read_csv(path: &Path) -> Result<Self, SplitError> {
        let mut r = csv::Reader::from_path(path)?;
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        let col = |name: &str| header.iter().position(|h| h == name);
        let id_col = col("sample_id").ok_or_else(|| SplitError::Invalid("missing sample_id column".into()))?;
        let label_col = col("label").ok_or_else(|| SplitError::Invalid("missing label column".into()))?;
        let subset_col = col("subset");
        let (mut ids, mut labels, mut subsets) = (Vec::new(), Vec::new(), Vec::new());
        for row in r.records() {
            let row = row?;
            ids.push(row[id_col].to_string());
            labels.push(row[label_col].to_string());
            if let Some(c) = subset_col {
                subsets.push(row[c].parse::<Subset>()?);
            }
        }
        let mut index = Self::new(ids, labels)?;
        if subset_col.is_some() {
            index.split_assignment = Some(subsets);
        }
        Ok(index)
    }
}

/// Raw label to grouped label. `None` marks a label that is known but
/// deliberately ignored (e.g. rhythm statements with no diagnostic class).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelMap(pub BTreeMap<String, Option<String>>);

impl LabelMap {
    pub fn load(path: &Path) -> Result<Self, SplitError> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }
}

pub fn apply_label_map(index: &RawIndex, map: &LabelMap) -> Result<LabelSetIndex, SplitError> {
    let unmapped: BTreeSet<&String> = index
        .raw_labels
        .iter()
        .flatten()
        .filter(|l| !map.0.contains_key(*l))
        .collect();
    if !unmapped.is_empty() {
        return Err(SplitError::Unmapped(unmapped.into_iter().cloned().collect()));
    }
    let label_sets = index
        .raw_labels
        .iter()
        .map(|raw| raw.iter().filter_map(|l| map.0[l].clone()).collect())
        .collect();
    Ok(LabelSetIndex {
        sample_ids: index.sample_ids.clone(),
        label_sets,
    })
}

/// Keeps samples whose label set is a singleton; returns the index and the
/// number of samples removed.
pub fn filter_unique(index: &LabelSetIndex) -> Result<(DatasetIndex, usize), SplitError> {
    let (mut ids, mut labels) = (Vec::new(), Vec::new());
    for (id, set) in index.sample_ids.iter().zip(&index.label_sets) {
        if set.len() == 1 {
            ids.push(id.clone());
            labels.push(set.iter().next().unwrap().clone());
        }
    }
    let removed = index.sample_ids.len() - ids.len();
    Ok((DatasetIndex::new(ids, labels)?, removed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub totals: BTreeMap<Subset, usize>,
    pub per_class: BTreeMap<String, [usize; 3]>,
    /// Classes with fewer samples than subsets.
    pub rare_classes: Vec<String>,
}

/// Largest-remainder apportionment of `n` items over `fractions`.
/// `tie_order` ranks subsets for equal remainders (lower wins).
pub fn apportion(n: usize, fractions: [f64; 3], tie_order: [usize; 3]) -> [usize; 3] {
    let quotas = fractions.map(|f| f * n as f64);
    let mut counts = quotas.map(|q| q.floor() as usize);
    let assigned: usize = counts.iter().sum();
    let mut left = n.saturating_sub(assigned);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(tie_order[a].cmp(&tie_order[b]))
    });
    for &s in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[s] += 1;
        left -= 1;
    }
    counts
}

pub fn validate_fractions(fractions: [f64; 3]) -> Result<(), SplitError> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(*f > 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(SplitError::Fractions(fractions));
    }
    Ok(())
}

/// Assigns every sample to train/val/test, stratified by label.
///
/// Classes with a single sample go to train. Classes with fewer samples than
/// subsets are apportioned as usual but reported in `rare_classes`.
pub fn stratified_split(
    index: &DatasetIndex,
    fractions: [f64; 3],
    seed: u64,
) -> Result<(DatasetIndex, SplitSummary), SplitError> {
    validate_fractions(fractions)?;
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, label) in index.labels.iter().enumerate() {
        by_class.entry(label).or_default().push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![Subset::Train; index.len()];
    let mut per_class = BTreeMap::new();
    let mut rare_classes = Vec::new();
    for (label, mut members) in by_class {
        members.shuffle(&mut rng);
        let n = members.len();
        let counts = if n == 1 {
            [1, 0, 0]
        } else {
            let mut tie = [0usize, 1, 2];
            tie.shuffle(&mut rng);
            apportion(n, fractions, tie)
        };
        if n < Subset::ALL.len() {
            warn!("class `{label}` has {n} sample(s) and cannot appear in every subset");
            rare_classes.push(label.to_string());
        }
        let mut it = members.into_iter();
        for (s, &c) in Subset::ALL.iter().zip(&counts) {
            for i in it.by_ref().take(c) {
                assignment[i] = *s;
            }
        }
        per_class.insert(label.to_string(), counts);
    }
    let mut totals = BTreeMap::new();
    for s in Subset::ALL {
        totals.insert(s, assignment.iter().filter(|&&a| a == s).count());
    }
    let mut out = index.clone();
    out.split_assignment = Some(assignment);
    Ok((
        out,
        SplitSummary {
            totals,
            per_class,
            rare_classes,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn map() -> LabelMap {
        LabelMap(
            [("IMI", Some("MI")), ("AMI", Some("MI")), ("ISCAL", Some("STTC")), ("SR", None)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v.map(str::to_string)))
                .collect(),
        )
    }

    #[test]
    fn label_map_groups_and_filters() {
        let raw = RawIndex {
            sample_ids: strings(&["a", "b", "c", "d"]),
            raw_labels: vec![strings(&["IMI", "AMI", "SR"]), strings(&["IMI", "ISCAL"]), vec![], strings(&["SR"])],
        };
        let sets = apply_label_map(&raw, &map()).unwrap();
        assert_eq!(sets.label_sets[0], ["MI".to_string()].into_iter().collect());
        assert_eq!(sets.label_sets[1].len(), 2);
        assert!(sets.label_sets[2].is_empty());
        assert!(sets.label_sets[3].is_empty());
        let (kept, removed) = filter_unique(&sets).unwrap();
        assert_eq!(kept.sample_ids, strings(&["a"]));
        assert_eq!(kept.labels, strings(&["MI"]));
        assert_eq!(removed, 3);
    }

    #[test]
    fn unmapped_labels_listed() {
        let raw = RawIndex {
            sample_ids: strings(&["a"]),
            raw_labels: vec![strings(&["IMI", "XYZ", "ABC"])],
        };
        match apply_label_map(&raw, &map()) {
            Err(SplitError::Unmapped(l)) => assert_eq!(l, strings(&["ABC", "XYZ"])),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn singletons_are_identity() {
        let sets = LabelSetIndex {
            sample_ids: strings(&["a", "b"]),
            label_sets: vec![["MI".to_string()].into(), ["CD".to_string()].into()],
        };
        let (kept, removed) = filter_unique(&sets).unwrap();
        assert_eq!(kept.sample_ids, sets.sample_ids);
        assert_eq!(removed, 0);
    }

    #[test]
    fn bundled_ptbxl_map_has_five_superclasses() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/ptbxl_superclass.json");
        let m = LabelMap::load(&path).unwrap();
        let classes: BTreeSet<String> = m.0.values().flatten().cloned().collect();
        assert_eq!(classes, ["CD", "HYP", "MI", "NORM", "STTC"].iter().map(|s| s.to_string()).collect());
        assert_eq!(m.0["NORM"].as_deref(), Some("NORM"));
        assert_eq!(m.0["SR"], None);
    }

    #[test]
    fn exact_proportions() {
        let index = DatasetIndex::new((0..100).map(|i| i.to_string()).collect(), vec!["a".into(); 100]).unwrap();
        let (split, summary) = stratified_split(&index, [0.7, 0.15, 0.15], 3).unwrap();
        assert_eq!(summary.per_class["a"], [70, 15, 15]);
        assert_eq!(split.indices(Subset::Val).len(), 15);
    }

    #[test]
    fn small_classes_follow_largest_remainder() {
        let labels = strings(&["A", "A", "A", "A", "B", "B"]);
        let index = DatasetIndex::new((0..6).map(|i| i.to_string()).collect(), labels).unwrap();
        let mut seen_b = BTreeSet::new();
        for seed in 0..32 {
            let (_, summary) = stratified_split(&index, [0.5, 0.25, 0.25], seed).unwrap();
            assert_eq!(summary.per_class["A"], [2, 1, 1]);
            let b = summary.per_class["B"];
            assert!(b == [1, 0, 1] || b == [1, 1, 0], "{b:?}");
            seen_b.insert(b);
            assert_eq!(summary.rare_classes, strings(&["B"]));
        }
        assert_eq!(seen_b.len(), 2, "seeded tie-break should reach both outcomes");
    }

    #[test]
    fn singleton_class_goes_to_train() {
        let index = DatasetIndex::new(strings(&["x", "y", "z", "w"]), strings(&["A", "A", "A", "B"])).unwrap();
        let (split, _) = stratified_split(&index, [0.2, 0.4, 0.4], 1).unwrap();
        assert_eq!(split.split_assignment.unwrap()[3], Subset::Train);
    }

    #[test]
    fn fraction_validation() {
        let index = DatasetIndex::new(strings(&["a"]), strings(&["A"])).unwrap();
        assert!(stratified_split(&index, [0.7, 0.2, 0.2], 0).is_err());
        assert!(stratified_split(&index, [1.0, 0.0, 0.0], 0).is_err());
    }

    #[test]
    fn apportion_rounding() {
        assert_eq!(apportion(10, [0.7, 0.15, 0.15], [0, 1, 2]), [7, 2, 1]);
        assert_eq!(apportion(10, [0.7, 0.15, 0.15], [0, 2, 1]), [7, 1, 2]);
        assert_eq!(apportion(3, [1.0 / 3.0; 3], [0, 1, 2]), [1, 1, 1]);
    }

    #[test]
    fn manifest_roundtrip() {
        let index = DatasetIndex::new(strings(&["a", "b", "c"]), strings(&["X", "X", "Y"])).unwrap();
        let (split, _) = stratified_split(&index, [0.5, 0.25, 0.25], 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.csv");
        split.write_manifest(&path).unwrap();
        assert_eq!(DatasetIndex::read_csv(&path).unwrap(), split);
    }

    #[test]
    fn duplicate_ids_rejected() {
        assert!(matches!(
            DatasetIndex::new(strings(&["a", "a"]), strings(&["X", "Y"])),
            Err(SplitError::DuplicateId(_))
        ));
    }
}
