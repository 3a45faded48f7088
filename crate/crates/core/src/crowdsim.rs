//! Synthetic crowds with planted schools of thought.
//!
//! Every item carries a latent cue vector drawn from a standard normal. A
//! school labels an item positive when its weight vector's response to the
//! cues exceeds the school's threshold; each annotator belongs to one school
//! and flips labels with probability ε. Item features are the cues plus
//! Gaussian noise followed by pure-noise distractor dimensions, and an
//! optional explanation corpus draws words from school-specific vocabularies.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::classify::FeatureTable;
use crate::coherence::{Corpus, DocumentRecord};
use crate::error::{Error, Result};
use crate::labels::{IndexMap, LabelMatrix, LabelTensor, TensorObservation};
use crate::rng::{derive_indexed, derive_seed, seeded};
use crate::shades::ShadeAssignment;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub words_per_doc: usize,
    pub vocabulary_per_school: usize,
    pub shared_vocabulary: usize,
    /// Probability that a token comes from the shared vocabulary.
    pub shared_fraction: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            words_per_doc: 6,
            vocabulary_per_school: 12,
            shared_vocabulary: 20,
            shared_fraction: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrowdScenario {
    pub num_schools: usize,
    pub cue_dim: usize,
    /// One weight vector per school; unit vectors on the first cue axes when absent.
    pub school_weights: Option<Vec<Vec<f64>>>,
    /// One threshold per school; zeros when absent.
    pub school_thresholds: Option<Vec<f64>>,
    pub num_annotators: usize,
    /// School proportions; uniform when absent.
    pub mixture: Option<Vec<f64>>,
    pub num_items: usize,
    pub labels_per_annotator: usize,
    pub noise: f64,
    pub num_attributes: usize,
    pub feature_noise: f64,
    pub distractor_dims: usize,
    pub corpus: Option<CorpusSpec>,
    pub seed: u64,
}

impl Default for CrowdScenario {
    fn default() -> Self {
        Self {
            num_schools: 3,
            cue_dim: 3,
            school_weights: None,
            school_thresholds: None,
            num_annotators: 120,
            mixture: None,
            num_items: 300,
            labels_per_annotator: 50,
            noise: 0.1,
            num_attributes: 1,
            feature_noise: 0.1,
            distractor_dims: 7,
            corpus: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub annotator_ids: Vec<String>,
    pub item_ids: Vec<String>,
    pub attribute_ids: Vec<String>,
    /// Planted school of each annotator.
    pub schools: Vec<usize>,
    /// `weights[z][s]`: school `s`'s weight vector on attribute `z`.
    pub weights: Vec<Vec<Vec<f64>>>,
    pub thresholds: Vec<f64>,
    /// Latent cue vector of each item.
    pub cues: Vec<Vec<f64>>,
}

impl GroundTruth {
    /// Noise-free label school `s` gives item `j` on attribute `z`.
    pub fn label(&self, school: usize, item: usize, attribute: usize) -> u8 {
        let w = &self.weights[attribute][school];
        let r: f64 = w.iter().zip(&self.cues[item]).map(|(a, b)| a * b).sum();
        u8::from(r > self.thresholds[school])
    }

    pub fn members(&self, school: usize) -> Vec<usize> {
        (0..self.schools.len()).filter(|&i| self.schools[i] == school).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedCrowd {
    pub labels: LabelTensor,
    pub features: FeatureTable,
    pub truth: GroundTruth,
    pub corpus: Option<Corpus>,
}

impl GeneratedCrowd {
    /// Label matrix of one attribute.
    pub fn matrix(&self, attribute: usize) -> Result<LabelMatrix> {
        self.labels.slice(attribute)
    }
}

impl CrowdScenario {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    fn weights(&self) -> Result<Vec<Vec<f64>>> {
        match &self.school_weights {
            Some(w) => {
                if w.len() != self.num_schools || w.iter().any(|v| v.len() != self.cue_dim) {
                    return Err(Error::Config("school weights must be num_schools vectors of length cue_dim".into()));
                }
                Ok(w.clone())
            }
            None => {
                if self.cue_dim < self.num_schools {
                    return Err(Error::Config("default school weights need cue_dim >= num_schools".into()));
                }
                Ok((0..self.num_schools)
                    .map(|s| (0..self.cue_dim).map(|d| f64::from(u8::from(d == s))).collect())
                    .collect())
            }
        }
    }

    fn mixture(&self) -> Result<Vec<f64>> {
        let m = self
            .mixture
            .clone()
            .unwrap_or_else(|| vec![1.0 / self.num_schools as f64; self.num_schools]);
        if m.len() != self.num_schools || m.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::Config("mixture needs one nonnegative proportion per school".into()));
        }
        if (m.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("mixture proportions must sum to 1".into()));
        }
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_schools == 0 || self.cue_dim == 0 || self.num_annotators == 0 || self.num_items == 0 {
            return Err(Error::Config("scenario sizes must be positive".into()));
        }
        if self.num_attributes == 0 {
            return Err(Error::Config("need at least one attribute".into()));
        }
        if !(0.0..0.5).contains(&self.noise) {
            return Err(Error::Config(format!("label noise {} outside [0, 0.5)", self.noise)));
        }
        if self.labels_per_annotator == 0 {
            return Err(Error::Config("labels_per_annotator must be positive".into()));
        }
        if self.labels_per_annotator > self.num_items {
            return Err(Error::domain(format!(
                "labels_per_annotator {} exceeds num_items {}",
                self.labels_per_annotator, self.num_items
            )));
        }
        if !(self.feature_noise >= 0.0) {
            return Err(Error::Config("feature_noise must be nonnegative".into()));
        }
        if let Some(t) = &self.school_thresholds {
            if t.len() != self.num_schools {
                return Err(Error::Config("one threshold per school".into()));
            }
        }
        self.weights()?;
        self.mixture()?;
        Ok(())
    }

    /// School sizes by largest remainder.
    fn school_sizes(&self, mixture: &[f64]) -> Vec<usize> {
        let raw: Vec<f64> = mixture.iter().map(|p| p * self.num_annotators as f64).collect();
        let mut sizes: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
        let mut order: Vec<usize> = (0..sizes.len()).collect();
        order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
        let short = self.num_annotators - sizes.iter().sum::<usize>();
        for &s in order.iter().take(short) {
            sizes[s] += 1;
        }
        sizes
    }
}

fn shifted(w: &[f64], by: usize) -> Vec<f64> {
    let n = w.len();
    (0..n).map(|d| w[(d + n - by % n) % n]).collect()
}

pub fn generate(scenario: &CrowdScenario) -> Result<GeneratedCrowd> {
    scenario.validate()?;
    let seed = scenario.seed;
    let (m, n, zc) = (scenario.num_annotators, scenario.num_items, scenario.num_attributes);
    let base = scenario.weights()?;
    let thresholds = scenario
        .school_thresholds
        .clone()
        .unwrap_or_else(|| vec![0.0; scenario.num_schools]);

    let mut schools: Vec<usize> = scenario
        .school_sizes(&scenario.mixture()?)
        .iter()
        .enumerate()
        .flat_map(|(s, &k)| std::iter::repeat_n(s, k))
        .collect();
    schools.shuffle(&mut seeded(derive_seed(seed, "schools")));

    let mut cue_rng = seeded(derive_seed(seed, "cues"));
    let cues: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..scenario.cue_dim).map(|_| StandardNormal.sample(&mut cue_rng)).collect())
        .collect();

    let annotator_ids: Vec<String> = (0..m).map(|i| format!("u{i:03}")).collect();
    let item_ids: Vec<String> = (0..n).map(|j| format!("item{j:04}")).collect();
    let attribute_ids: Vec<String> = if zc == 1 {
        vec!["attr".to_string()]
    } else {
        (0..zc).map(|z| format!("attr{z}")).collect()
    };
    let weights: Vec<Vec<Vec<f64>>> = (0..zc).map(|z| base.iter().map(|w| shifted(w, z)).collect()).collect();
    let truth = GroundTruth {
        annotator_ids: annotator_ids.clone(),
        item_ids: item_ids.clone(),
        attribute_ids: attribute_ids.clone(),
        schools,
        weights,
        thresholds,
        cues,
    };

    let label_seed = derive_seed(seed, "labels");
    let mut entries = Vec::with_capacity(m * zc * scenario.labels_per_annotator);
    for z in 0..zc {
        for i in 0..m {
            let mut rng = seeded(derive_indexed(derive_indexed(label_seed, z as u64), i as u64));
            let mut items = index::sample(&mut rng, n, scenario.labels_per_annotator).into_vec();
            items.sort_unstable();
            for j in items {
                let mut l = truth.label(truth.schools[i], j, z);
                if rng.random::<f64>() < scenario.noise {
                    l = 1 - l;
                }
                entries.push(TensorObservation {
                    annotator: i,
                    item: j,
                    attribute: z,
                    label: l,
                });
            }
        }
    }
    let labels = LabelTensor::new(
        IndexMap::from_ids(annotator_ids)?,
        IndexMap::from_ids(item_ids.clone())?,
        IndexMap::from_ids(attribute_ids)?,
        entries,
    )?;

    let mut frng = seeded(derive_seed(seed, "features"));
    let noise = Normal::new(0.0, scenario.feature_noise).map_err(|e| Error::Config(e.to_string()))?;
    let rows = truth
        .cues
        .iter()
        .map(|c| {
            let mut r: Vec<f64> = c.iter().map(|v| v + noise.sample(&mut frng)).collect();
            r.extend((0..scenario.distractor_dims).map(|_| -> f64 { StandardNormal.sample(&mut frng) }));
            r
        })
        .collect();
    let features = FeatureTable::new(item_ids, rows)?;

    let corpus = scenario
        .corpus
        .as_ref()
        .map(|spec| planted_corpus(spec, &labels, &truth, derive_seed(seed, "corpus")))
        .transpose()?;
    Ok(GeneratedCrowd {
        labels,
        features,
        truth,
        corpus,
    })
}

/// One explanation per positive label. Tokens come from the annotator's
/// school vocabulary, or from the shared vocabulary with the configured odds.
fn planted_corpus(spec: &CorpusSpec, labels: &LabelTensor, truth: &GroundTruth, seed: u64) -> Result<Corpus> {
    if spec.words_per_doc == 0 || spec.vocabulary_per_school == 0 {
        return Err(Error::Config("corpus needs words and a school vocabulary".into()));
    }
    let mut rng = seeded(seed);
    let mut records = Vec::new();
    for e in labels.entries().iter().filter(|e| e.label == 1) {
        let school = truth.schools[e.annotator];
        let tokens = (0..spec.words_per_doc)
            .map(|_| {
                if spec.shared_vocabulary > 0 && rng.random::<f64>() < spec.shared_fraction {
                    format!("common{}", rng.random_range(0..spec.shared_vocabulary))
                } else {
                    format!("s{school}w{}", rng.random_range(0..spec.vocabulary_per_school))
                }
            })
            .collect();
        records.push(DocumentRecord {
            doc_id: format!("doc{}", records.len()),
            annotator_id: labels.annotators().id(e.annotator).to_string(),
            item_id: labels.items().id(e.item).to_string(),
            tokens,
        });
    }
    Corpus::from_records(records)
}

/// Writes `labels.csv`, `features.csv`, `truth.json` and, when present,
/// `corpus.jsonl` into `dir`.
pub fn write_outputs(crowd: &GeneratedCrowd, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    crowd.labels.save(&dir.join("labels.csv"))?;
    crowd.features.save_csv(&dir.join("features.csv"))?;
    crowd.truth.save(&dir.join("truth.json"))?;
    if let Some(c) = &crowd.corpus {
        c.save_jsonl(&dir.join("corpus.jsonl"))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryScore {
    pub ari: f64,
    pub purity: f64,
    /// `confusion[discovered][planted]` over non-pruned points.
    pub confusion: Vec<Vec<usize>>,
    pub excluded: Vec<usize>,
}

fn choose2(n: usize) -> f64 {
    let n = n as f64;
    n * (n - 1.0) / 2.0
}

/// Adjusted Rand index of two labelings of the same points.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    let mut table: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut ra: BTreeMap<usize, usize> = BTreeMap::new();
    let mut rb: BTreeMap<usize, usize> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *ra.entry(x).or_default() += 1;
        *rb.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| choose2(c)).sum();
    let sa: f64 = ra.values().map(|&c| choose2(c)).sum();
    let sb: f64 = rb.values().map(|&c| choose2(c)).sum();
    let total = choose2(a.len());
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = sa * sb / total;
    let max = 0.5 * (sa + sb);
    if (max - expected).abs() < 1e-12 {
        // both partitions trivial in the same way
        return Ok(if (index - expected).abs() < 1e-12 { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max - expected))
}

/// Agreement between a discovered shade assignment and the planted schools.
/// Pruned points are excluded from every statistic.
pub fn score_recovery(discovered: &ShadeAssignment, planted: &[usize]) -> Result<RecoveryScore> {
    if discovered.assignment.len() != planted.len() {
        return Err(Error::domain(format!(
            "discovered assignment covers {} points, planted schools {}",
            discovered.assignment.len(),
            planted.len()
        )));
    }
    let mut excluded = Vec::new();
    let (mut da, mut pa) = (Vec::new(), Vec::new());
    for (i, s) in discovered.assignment.iter().enumerate() {
        match s {
            Some(s) => {
                da.push(*s);
                pa.push(planted[i]);
            }
            None => excluded.push(i),
        }
    }
    let k = discovered.k.max(da.iter().max().map_or(0, |m| m + 1));
    let p = planted.iter().max().map_or(0, |m| m + 1);
    let mut confusion = vec![vec![0usize; p]; k];
    for (&d, &t) in da.iter().zip(&pa) {
        confusion[d][t] += 1;
    }
    let purity = if da.is_empty() {
        0.0
    } else {
        confusion.iter().map(|r| r.iter().max().copied().unwrap_or(0)).sum::<usize>() as f64 / da.len() as f64
    };
    Ok(RecoveryScore {
        ari: adjusted_rand_index(&da, &pa)?,
        purity,
        confusion,
        excluded,
    })
}
