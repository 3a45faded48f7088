//! Sparse crowd labels: ingestion, storage and consensus voting.
//!
//! Identifiers are strings on disk and dense `usize` indices in memory. The
//! index tables travel with every matrix so later stages can map back.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LABEL_CSV_HEADER: [&str; 4] = ["annotator_id", "item_id", "attribute_id", "label"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Observation {
    pub annotator: usize,
    pub item: usize,
    pub label: u8,
}

/// Dense index table for a string-keyed axis. Serializes as a list of ids.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct IndexMap {
    ids: Vec<String>,
    lookup: HashMap<String, usize>,
}

impl PartialEq for IndexMap {
    fn eq(&self, other: &Self) -> bool {
        self.ids == other.ids
    }
}

impl Eq for IndexMap {}

impl From<Vec<String>> for IndexMap {
    fn from(ids: Vec<String>) -> Self {
        let lookup = ids.iter().enumerate().map(|(k, id)| (id.clone(), k)).collect();
        Self { ids, lookup }
    }
}

impl From<IndexMap> for Vec<String> {
    fn from(m: IndexMap) -> Self {
        m.ids
    }
}

impl IndexMap {
    pub fn from_ids(ids: Vec<String>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(ids.len());
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::domain(format!("duplicate identifier {dup:?}")));
        }
        Ok(Self::from(ids))
    }

    /// Index of `id`, inserting it at the end if unseen.
    pub fn intern(&mut self, id: &str) -> usize {
        if let Some(&k) = self.lookup.get(id) {
            return k;
        }
        let k = self.ids.len();
        self.ids.push(id.to_string());
        self.lookup.insert(id.to_string(), k);
        k
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.lookup.get(id).copied()
    }

    pub fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// One attribute's annotator × item label matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatrix {
    attribute_id: String,
    annotators: IndexMap,
    items: IndexMap,
    /// Sorted by (annotator, item).
    entries: Vec<Observation>,
}

impl LabelMatrix {
    pub fn new(
        attribute_id: impl Into<String>,
        annotators: IndexMap,
        items: IndexMap,
        mut entries: Vec<Observation>,
    ) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::NoObservations);
        }
        let (m, n) = (annotators.len(), items.len());
        for e in &entries {
            if e.annotator >= m || e.item >= n {
                return Err(Error::domain(format!(
                    "entry ({}, {}) outside {m}x{n}",
                    e.annotator, e.item
                )));
            }
            if e.label > 1 {
                return Err(Error::domain(format!("label {} not in {{0,1}}", e.label)));
            }
        }
        entries.sort_unstable();
        if let Some(w) = entries
            .windows(2)
            .find(|w| (w[0].annotator, w[0].item) == (w[1].annotator, w[1].item))
        {
            return Err(Error::Conflict {
                line: 0,
                annotator: annotators.id(w[0].annotator).to_string(),
                item: items.id(w[0].item).to_string(),
            });
        }
        Ok(Self {
            attribute_id: attribute_id.into(),
            annotators,
            items,
            entries,
        })
    }

    /// Build from index triples with synthetic identifiers `a{i}` / `x{j}`.
    pub fn from_triples(
        num_annotators: usize,
        num_items: usize,
        triples: impl IntoIterator<Item = (usize, usize, u8)>,
    ) -> Result<Self> {
        let annotators = IndexMap::from_ids((0..num_annotators).map(|i| format!("a{i}")).collect())?;
        let items = IndexMap::from_ids((0..num_items).map(|j| format!("x{j}")).collect())?;
        let entries = triples
            .into_iter()
            .map(|(annotator, item, label)| Observation {
                annotator,
                item,
                label,
            })
            .collect();
        Self::new("attr", annotators, items, entries)
    }

    pub fn attribute_id(&self) -> &str {
        &self.attribute_id
    }

    pub fn num_annotators(&self) -> usize {
        self.annotators.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn annotators(&self) -> &IndexMap {
        &self.annotators
    }

    pub fn items(&self) -> &IndexMap {
        &self.items
    }

    pub fn entries(&self) -> &[Observation] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn observed_fraction(&self) -> f64 {
        self.entries.len() as f64 / (self.num_annotators() * self.num_items()) as f64
    }

    /// Entries of one annotator, sorted by item.
    pub fn annotator_entries(&self, annotator: usize) -> &[Observation] {
        let lo = self.entries.partition_point(|e| e.annotator < annotator);
        let hi = self.entries.partition_point(|e| e.annotator <= annotator);
        &self.entries[lo..hi]
    }

    /// Per-item lists of (annotator, label).
    pub fn by_item(&self) -> Vec<Vec<(usize, u8)>> {
        let mut out = vec![Vec::new(); self.num_items()];
        for e in &self.entries {
            out[e.item].push((e.annotator, e.label));
        }
        out
    }

    /// Per-annotator lists of (item, label).
    pub fn by_annotator(&self) -> Vec<Vec<(usize, u8)>> {
        let mut out = vec![Vec::new(); self.num_annotators()];
        for e in &self.entries {
            out[e.annotator].push((e.item, e.label));
        }
        out
    }

    pub fn get(&self, annotator: usize, item: usize) -> Option<u8> {
        self.annotator_entries(annotator)
            .binary_search_by_key(&item, |e| e.item)
            .ok()
            .map(|k| self.annotator_entries(annotator)[k].label)
    }

    /// Same index spaces, subset of entries.
    pub fn with_entries(&self, entries: Vec<Observation>) -> Result<Self> {
        Self::new(
            self.attribute_id.clone(),
            self.annotators.clone(),
            self.items.clone(),
            entries,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        let io = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(LABEL_CSV_HEADER).map_err(io)?;
        for e in &self.entries {
            w.write_record([
                self.annotators.id(e.annotator),
                self.items.id(e.item),
                &self.attribute_id,
                if e.label == 1 { "1" } else { "0" },
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
struct RawRow {
    line: u64,
    annotator: String,
    item: String,
    attribute: String,
    label: u8,
}

/// Parsed contents of a label-CSV file, possibly spanning several attributes.
#[derive(Debug, Clone)]
pub struct LabelFile {
    rows: Vec<RawRow>,
}

impl LabelFile {
    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(file, path)
    }

    pub fn from_reader<R: std::io::Read>(reader: R, path: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let parse_err = |line: u64, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let header = rdr
            .headers()
            .map_err(|e| parse_err(1, e.to_string()))?
            .clone();
        if header.iter().collect::<Vec<_>>() != LABEL_CSV_HEADER {
            return Err(parse_err(
                1,
                format!("expected header {:?}", LABEL_CSV_HEADER.join(",")),
            ));
        }
        let mut rows = Vec::new();
        let mut seen = HashSet::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                parse_err(line, e.to_string())
            })?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            if rec.len() != 4 {
                return Err(parse_err(line, format!("expected 4 fields, found {}", rec.len())));
            }
            let label = match &rec[3] {
                "0" => 0,
                "1" => 1,
                other => {
                    return Err(Error::Domain(format!(
                        "{}: line {line}: label {other:?} not in {{0,1}}",
                        path.display()
                    )))
                }
            };
            let row = RawRow {
                line,
                annotator: rec[0].to_string(),
                item: rec[1].to_string(),
                attribute: rec[2].to_string(),
                label,
            };
            if !seen.insert((row.annotator.clone(), row.item.clone(), row.attribute.clone())) {
                return Err(Error::Conflict {
                    line,
                    annotator: row.annotator,
                    item: row.item,
                });
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::NoObservations);
        }
        Ok(Self { rows })
    }

    /// Attribute identifiers in first-appearance order.
    pub fn attributes(&self) -> Vec<String> {
        let mut seen = IndexMap::default();
        for r in &self.rows {
            seen.intern(&r.attribute);
        }
        seen.ids().to_vec()
    }

    /// The matrix of one attribute; `None` requires the file to hold exactly one.
    pub fn matrix(&self, attribute: Option<&str>) -> Result<LabelMatrix> {
        let attrs = self.attributes();
        let attribute = match attribute {
            Some(a) => {
                if !attrs.iter().any(|x| x == a) {
                    return Err(Error::MissingAttribute(a.to_string()));
                }
                a.to_string()
            }
            None if attrs.len() == 1 => attrs[0].clone(),
            None => {
                return Err(Error::Config(format!(
                    "label file holds {} attributes; select one",
                    attrs.len()
                )))
            }
        };
        let mut annotators = IndexMap::default();
        let mut items = IndexMap::default();
        let mut entries = Vec::new();
        for r in self.rows.iter().filter(|r| r.attribute == attribute) {
            entries.push(Observation {
                annotator: annotators.intern(&r.annotator),
                item: items.intern(&r.item),
                label: r.label,
            });
        }
        LabelMatrix::new(attribute, annotators, items, entries)
    }

    pub fn tensor(&self) -> Result<LabelTensor> {
        let mut annotators = IndexMap::default();
        let mut items = IndexMap::default();
        let mut attributes = IndexMap::default();
        let mut entries = Vec::with_capacity(self.rows.len());
        for r in &self.rows {
            entries.push(TensorObservation {
                annotator: annotators.intern(&r.annotator),
                item: items.intern(&r.item),
                attribute: attributes.intern(&r.attribute),
                label: r.label,
            });
        }
        LabelTensor::new(annotators, items, attributes, entries)
    }

    pub fn line_of(&self, k: usize) -> u64 {
        self.rows[k].line
    }
}

pub fn load_labels(path: &Path, attribute: Option<&str>) -> Result<LabelMatrix> {
    LabelFile::read(path)?.matrix(attribute)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Consensus {
    Positive,
    Negative,
    Discarded,
}

impl Consensus {
    pub fn label(self) -> Option<u8> {
        match self {
            Consensus::Positive => Some(1),
            Consensus::Negative => Some(0),
            Consensus::Discarded => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusLabels {
    pub threshold: f64,
    pub outcomes: Vec<Consensus>,
}

impl ConsensusLabels {
    /// (item, label) pairs that survived the agreement filter.
    pub fn kept(&self) -> Vec<(usize, u8)> {
        self.outcomes
            .iter()
            .enumerate()
            .filter_map(|(j, c)| c.label().map(|l| (j, l)))
            .collect()
    }
}

/// Outcome of one item's vote. A side wins when its share is at least
/// `threshold`; if both sides qualify (an exact 50/50 split at 0.5) the item
/// is discarded.
pub fn vote(ones: usize, total: usize, threshold: f64) -> Consensus {
    if total == 0 {
        return Consensus::Discarded;
    }
    let need = threshold * total as f64 - 1e-9;
    let pos = ones as f64 >= need;
    let neg = (total - ones) as f64 >= need;
    match (pos, neg) {
        (true, false) => Consensus::Positive,
        (false, true) => Consensus::Negative,
        _ => Consensus::Discarded,
    }
}

pub fn consensus(matrix: &LabelMatrix, threshold: f64) -> Result<ConsensusLabels> {
    if !(0.5..=1.0).contains(&threshold) {
        return Err(Error::domain(format!(
            "agreement threshold {threshold} outside [0.5, 1]"
        )));
    }
    let n = matrix.num_items();
    let mut ones = vec![0usize; n];
    let mut total = vec![0usize; n];
    for e in matrix.entries() {
        total[e.item] += 1;
        ones[e.item] += usize::from(e.label);
    }
    let outcomes = (0..n).map(|j| vote(ones[j], total[j], threshold)).collect();
    Ok(ConsensusLabels {
        threshold,
        outcomes,
    })
}

/// Entries of the member annotators only; both index spaces are preserved.
pub fn restrict_to_shade(matrix: &LabelMatrix, members: &[usize]) -> Result<LabelMatrix> {
    if members.is_empty() {
        return Err(Error::domain("empty shade member set"));
    }
    let mut keep = vec![false; matrix.num_annotators()];
    for &m in members {
        if m >= keep.len() {
            return Err(Error::domain(format!("annotator index {m} out of range")));
        }
        keep[m] = true;
    }
    let entries = matrix
        .entries()
        .iter()
        .copied()
        .filter(|e| keep[e.annotator])
        .collect();
    matrix.with_entries(entries)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TensorObservation {
    pub annotator: usize,
    pub item: usize,
    pub attribute: usize,
    pub label: u8,
}

/// Annotator × item × attribute labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelTensor {
    annotators: IndexMap,
    items: IndexMap,
    attributes: IndexMap,
    entries: Vec<TensorObservation>,
}

impl LabelTensor {
    pub fn new(
        annotators: IndexMap,
        items: IndexMap,
        attributes: IndexMap,
        mut entries: Vec<TensorObservation>,
    ) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::NoObservations);
        }
        let (m, n, z) = (annotators.len(), items.len(), attributes.len());
        for e in &entries {
            if e.annotator >= m || e.item >= n || e.attribute >= z {
                return Err(Error::domain("tensor entry index out of range"));
            }
            if e.label > 1 {
                return Err(Error::domain(format!("label {} not in {{0,1}}", e.label)));
            }
        }
        entries.sort_unstable();
        if let Some(w) = entries.windows(2).find(|w| {
            (w[0].annotator, w[0].item, w[0].attribute)
                == (w[1].annotator, w[1].item, w[1].attribute)
        }) {
            return Err(Error::Conflict {
                line: 0,
                annotator: annotators.id(w[0].annotator).to_string(),
                item: items.id(w[0].item).to_string(),
            });
        }
        Ok(Self {
            annotators,
            items,
            attributes,
            entries,
        })
    }

    pub fn from_quads(
        m: usize,
        n: usize,
        z: usize,
        quads: impl IntoIterator<Item = (usize, usize, usize, u8)>,
    ) -> Result<Self> {
        let entries = quads
            .into_iter()
            .map(|(annotator, item, attribute, label)| TensorObservation {
                annotator,
                item,
                attribute,
                label,
            })
            .collect();
        Self::new(
            IndexMap::from_ids((0..m).map(|i| format!("a{i}")).collect())?,
            IndexMap::from_ids((0..n).map(|j| format!("x{j}")).collect())?,
            IndexMap::from_ids((0..z).map(|k| format!("z{k}")).collect())?,
            entries,
        )
    }

    pub fn num_annotators(&self) -> usize {
        self.annotators.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn num_attributes(&self) -> usize {
        self.attributes.len()
    }

    pub fn annotators(&self) -> &IndexMap {
        &self.annotators
    }

    pub fn items(&self) -> &IndexMap {
        &self.items
    }

    pub fn attributes(&self) -> &IndexMap {
        &self.attributes
    }

    pub fn entries(&self) -> &[TensorObservation] {
        &self.entries
    }

    /// One attribute slice as a matrix over the tensor's full index spaces.
    pub fn slice(&self, attribute: usize) -> Result<LabelMatrix> {
        let entries = self
            .entries
            .iter()
            .filter(|e| e.attribute == attribute)
            .map(|e| Observation {
                annotator: e.annotator,
                item: e.item,
                label: e.label,
            })
            .collect();
        LabelMatrix::new(
            self.attributes.id(attribute),
            self.annotators.clone(),
            self.items.clone(),
            entries,
        )
    }

    /// Whether annotator `i` has any observation for attribute `z`.
    pub fn has_labels(&self, annotator: usize, attribute: usize) -> bool {
        self.entries
            .iter()
            .any(|e| e.annotator == annotator && e.attribute == attribute)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        let fmt = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(LABEL_CSV_HEADER).map_err(fmt)?;
        for e in &self.entries {
            w.write_record([
                self.annotators.id(e.annotator),
                self.items.id(e.item),
                self.attributes.id(e.attribute),
                if e.label == 1 { "1" } else { "0" },
            ])
            .map_err(fmt)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn parse(text: &str) -> Result<LabelFile> {
        LabelFile::from_reader(text.as_bytes(), Path::new("mem.csv"))
    }

    #[test]
    fn load_small_file() {
        let f = parse("annotator_id,item_id,attribute_id,label\nu1,i1,open,1\nu1,i2,open,0\nu2,i1,open,1\n")
            .unwrap();
        let m = f.matrix(None).unwrap();
        assert_eq!(m.num_annotators(), 2);
        assert_eq!(m.num_items(), 2);
        assert_eq!(m.len(), 3);
        assert!((m.observed_fraction() - 0.75).abs() < 1e-15);
        assert_eq!(m.annotators().get("u2"), Some(1));
        assert_eq!(m.get(0, 1), Some(0));
    }

    #[test]
    fn header_only_is_no_observations() {
        let err = parse("annotator_id,item_id,attribute_id,label\n").unwrap_err();
        assert_eq!(err.to_string(), "no observations");
    }

    #[test]
    fn duplicate_row_is_conflict() {
        let err = parse("annotator_id,item_id,attribute_id,label\nu1,i1,a,1\nu1,i1,a,0\n").unwrap_err();
        assert!(matches!(err, Error::Conflict { line: 3, .. }), "{err}");
    }

    #[test]
    fn bad_label_is_domain_error() {
        let err = parse("annotator_id,item_id,attribute_id,label\nu1,i1,a,2\n").unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn malformed_row_reports_line() {
        let err = parse("annotator_id,item_id,attribute_id,label\nu1,i1,a,1\nu2,i2\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn multi_attribute_requires_selection() {
        let f = parse("annotator_id,item_id,attribute_id,label\nu1,i1,a,1\nu1,i1,b,0\n").unwrap();
        assert!(matches!(f.matrix(None), Err(Error::Config(_))));
        assert_eq!(f.matrix(Some("b")).unwrap().len(), 1);
        assert!(matches!(f.matrix(Some("c")), Err(Error::MissingAttribute(_))));
        let t = f.tensor().unwrap();
        assert_eq!(t.num_attributes(), 2);
    }

    #[test]
    fn sparse_crowd_regime() {
        let mut rng = crate::rng::seeded(1);
        let mut triples = Vec::new();
        let mut items: Vec<usize> = (0..1000).collect();
        for a in 0..195 {
            items.shuffle(&mut rng);
            for &j in &items[..50] {
                triples.push((a, j, rng.random_range(0..2u8)));
            }
        }
        let m = LabelMatrix::from_triples(195, 1000, triples).unwrap();
        // 50 of 1000 items per annotator is a 5% fill; 20% would need 200 labels each.
        assert!((m.observed_fraction() - 0.05).abs() < 1e-12);
    }

    #[test]
    fn consensus_examples() {
        assert_eq!(vote(5, 5, 0.9), Consensus::Positive);
        assert_eq!(vote(3, 5, 0.9), Consensus::Discarded);
        assert_eq!(vote(0, 5, 0.9), Consensus::Negative);
        assert_eq!(vote(0, 0, 0.9), Consensus::Discarded);
        assert_eq!(vote(9, 10, 0.9), Consensus::Positive);
        assert_eq!(vote(2, 4, 0.5), Consensus::Discarded);
        assert_eq!(vote(3, 4, 0.5), Consensus::Positive);
    }

    #[test]
    fn consensus_threshold_validated() {
        let m = LabelMatrix::from_triples(1, 1, [(0, 0, 1)]).unwrap();
        assert!(consensus(&m, 0.4).is_err());
        assert!(consensus(&m, 1.1).is_err());
    }

    #[test]
    fn consensus_exhaustive_five_annotators() {
        for pattern in 0u32..32 {
            let triples: Vec<_> = (0..5).map(|a| (a, 0, ((pattern >> a) & 1) as u8)).collect();
            let m = LabelMatrix::from_triples(5, 1, triples).unwrap();
            let c = consensus(&m, 0.9).unwrap().outcomes[0];
            let ones = pattern.count_ones();
            let expected = match ones {
                5 => Consensus::Positive,
                0 => Consensus::Negative,
                _ => Consensus::Discarded,
            };
            assert_eq!(c, expected, "pattern {pattern:05b}");
        }
    }

    #[test]
    fn restrict_examples() {
        let m = LabelMatrix::from_triples(3, 2, [(0, 0, 1), (1, 0, 0), (2, 1, 1), (0, 1, 0)]).unwrap();
        assert_eq!(restrict_to_shade(&m, &[0, 1, 2]).unwrap().entries(), m.entries());
        let only0 = restrict_to_shade(&m, &[0]).unwrap();
        assert_eq!(only0.entries(), m.annotator_entries(0));
        assert_eq!(only0.num_items(), 2);
        assert!(restrict_to_shade(&m, &[]).is_err());
    }

    #[test]
    fn restrict_matches_filter_oracle() {
        let mut rng = crate::rng::seeded(5);
        let mut triples = Vec::new();
        for a in 0..10 {
            for j in 0..12 {
                if rng.random_bool(0.4) {
                    triples.push((a, j, rng.random_range(0..2u8)));
                }
            }
        }
        let m = LabelMatrix::from_triples(10, 12, triples.clone()).unwrap();
        let members = [1, 4, 6, 9];
        let sub = restrict_to_shade(&m, &members).unwrap();
        let oracle = triples.iter().filter(|t| members.contains(&t.0)).count();
        assert_eq!(sub.len(), oracle);
    }

    #[test]
    fn roundtrip_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.csv");
        let m = LabelMatrix::from_triples(3, 4, [(0, 0, 1), (1, 3, 0), (2, 2, 1)]).unwrap();
        m.save(&path).unwrap();
        let back = load_labels(&path, None).unwrap();
        let ids = |mm: &LabelMatrix| -> Vec<(String, String, u8)> {
            mm.entries()
                .iter()
                .map(|e| (mm.annotators().id(e.annotator).to_string(), mm.items().id(e.item).to_string(), e.label))
                .collect()
        };
        assert_eq!(ids(&m), ids(&back));
    }

    fn small_matrix() -> impl Strategy<Value = (usize, Vec<(usize, usize, u8)>)> {
        (2usize..7, 1usize..5).prop_flat_map(|(m, n)| {
            let cells = proptest::collection::vec(proptest::option::of(0u8..2), m * n);
            cells.prop_map(move |c| {
                let t: Vec<_> = c
                    .iter()
                    .enumerate()
                    .filter_map(|(k, v)| v.map(|l| (k / n, k % n, l)))
                    .collect();
                (m, t)
            })
        })
    }

    proptest! {
        #[test]
        fn consensus_permutation_invariant((m, triples) in small_matrix(), seed in 0u64..1000, th in 0.5f64..=1.0) {
            prop_assume!(!triples.is_empty());
            let n = triples.iter().map(|t| t.1).max().unwrap() + 1;
            let base = LabelMatrix::from_triples(m, n, triples.clone()).unwrap();
            let mut perm: Vec<usize> = (0..m).collect();
            perm.shuffle(&mut crate::rng::seeded(seed));
            let permuted = LabelMatrix::from_triples(m, n, triples.iter().map(|&(a, j, l)| (perm[a], j, l))).unwrap();
            prop_assert_eq!(consensus(&base, th).unwrap(), consensus(&permuted, th).unwrap());
        }

        #[test]
        fn restrict_then_consensus_is_member_vote((m, triples) in small_matrix(), mask in 1u32..64) {
            prop_assume!(!triples.is_empty());
            let n = triples.iter().map(|t| t.1).max().unwrap() + 1;
            let members: Vec<usize> = (0..m).filter(|a| mask & (1 << a) != 0).collect();
            prop_assume!(!members.is_empty());
            let member_triples: Vec<_> = triples.iter().copied().filter(|t| members.contains(&t.0)).collect();
            prop_assume!(!member_triples.is_empty());
            let full = LabelMatrix::from_triples(m, n, triples).unwrap();
            let via_restrict = consensus(&restrict_to_shade(&full, &members).unwrap(), 0.9).unwrap();
            // brute force: count member votes per item directly
            for j in 0..n {
                let votes: Vec<u8> = member_triples.iter().filter(|t| t.1 == j).map(|t| t.2).collect();
                let ones = votes.iter().filter(|&&v| v == 1).count();
                prop_assert_eq!(via_restrict.outcomes[j], vote(ones, votes.len(), 0.9));
            }
        }
    }
}
